//! Documents, corpus files, tokenization and the fixed-length encoding fed to
//! the model.

mod corpus;
mod encode;
mod generator;
mod image;
mod image_tokenizer;
mod vocab;

pub use corpus::{read_corpus, write_corpus, CorpusReader};
pub use encode::{encode_document, EncodedInput};
pub use generator::{generate_document, GeneratorStyle, SegmentKind, ENTITY_TAGS};
pub use image::{read_image, write_image, Image};
pub use image_tokenizer::{codebook_levels, tokenize_image};
pub use vocab::{Vocabulary, WordTokenizer, CLS_ID, MASK_ID, NUM_RESERVED, PAD_ID, SEP_ID, UNK_ID};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PixelBox;

/// Inclusive word-index range of an extractive answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub start: usize,
    pub end: usize,
}

/// Optional supervision attached to a document.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_labels: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_class: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<AnswerSpan>,
}

/// One document: OCR words with pixel boxes, their segment grouping and the
/// page raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentRecord {
    pub id: String,
    pub words: Vec<String>,
    pub boxes: Vec<PixelBox>,
    /// Words sharing an id share one segment-level layout box.
    pub segment_ids: Vec<u32>,
    pub image: Image,
    pub labels: Option<Labels>,
}

impl DocumentRecord {
    pub fn validate(&self) -> Result<()> {
        let n = self.words.len();
        if self.boxes.len() != n || self.segment_ids.len() != n {
            return Err(Error::Format(format!(
                "document {}: {} words, {} boxes, {} segment ids",
                self.id,
                n,
                self.boxes.len(),
                self.segment_ids.len()
            )));
        }
        if let Some(labels) = &self.labels {
            if let Some(wl) = &labels.word_labels {
                if wl.len() != n {
                    return Err(Error::Format(format!(
                        "document {}: {} word labels for {} words",
                        self.id,
                        wl.len(),
                        n
                    )));
                }
            }
            if let Some(a) = labels.answer {
                if a.start > a.end || a.end >= n {
                    return Err(Error::Format(format!(
                        "document {}: answer span {}..={} outside {} words",
                        self.id, a.start, a.end, n
                    )));
                }
            }
        }
        Ok(())
    }

    /// Pixel box of each word's segment: the union of all word boxes that
    /// carry the same segment id.
    pub fn segment_boxes(&self) -> Vec<PixelBox> {
        let mut seg: std::collections::HashMap<u32, PixelBox> = std::collections::HashMap::new();
        for (b, s) in self.boxes.iter().zip(&self.segment_ids) {
            seg.entry(*s).and_modify(|u| *u = u.union(b)).or_insert(*b);
        }
        self.segment_ids.iter().map(|s| seg[s]).collect()
    }
}
