use std::collections::BTreeSet;

use serde::Serialize;

use super::vocab::{WordTokenizer, CLS_ID, PAD_ID, SEP_ID};
use super::DocumentRecord;
use crate::error::{Error, Result};
use crate::geometry::{normalize_box, word_patches, NormBox, PatchGrid};
use crate::model::ModelConfig;

/// A document as fixed-length model input: `L` text tokens followed by `M`
/// image patches.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncodedInput {
    pub token_ids: Vec<u32>,
    pub token_boxes: Vec<NormBox>,
    /// `true` for `[CLS]`, words and `[SEP]`; `false` for padding.
    pub attention_flags: Vec<bool>,
    pub word_index_of_token: Vec<Option<usize>>,
    /// Row-major patches, each `[channel][row][col]` bytes.
    pub patch_pixels: Vec<Vec<u8>>,
    pub patch_boxes: Vec<NormBox>,
    /// Patches covered by each token; empty for special and pad tokens.
    pub incidence: Vec<BTreeSet<usize>>,
    pub grid: PatchGrid,
    pub channels: usize,
}

impl EncodedInput {
    /// Number of word tokens; they occupy positions `1..=num_words`.
    pub fn num_words(&self) -> usize {
        self.word_index_of_token.iter().filter(|w| w.is_some()).count()
    }

    /// Positions of real (word) tokens.
    pub fn word_positions(&self) -> std::ops::Range<usize> {
        1..1 + self.num_words()
    }

    pub fn text_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn num_patches(&self) -> usize {
        self.patch_pixels.len()
    }
}

/// Tokenizes, truncates, pads and rasterizes a document for `cfg`.
pub fn encode_document<T: WordTokenizer>(d: &DocumentRecord, cfg: &ModelConfig, vocab: &T) -> Result<EncodedInput> {
    d.validate()?;
    if vocab.word_count() == 0 {
        return Err(Error::Config("vocabulary has no words".into()));
    }
    if d.image.channels != cfg.channels {
        return Err(Error::Format(format!(
            "document {}: image has {} channels, model expects {}",
            d.id, d.image.channels, cfg.channels
        )));
    }
    let grid = cfg.grid()?;
    let l = cfg.max_text_len;
    let kept = d.words.len().min(l - 2);
    let (page_w, page_h) = (d.image.width as i64, d.image.height as i64);
    let seg_boxes = d.segment_boxes();

    let mut token_ids = Vec::with_capacity(l);
    let mut token_boxes = Vec::with_capacity(l);
    let mut word_index_of_token = Vec::with_capacity(l);
    let mut incidence = Vec::with_capacity(l);

    token_ids.push(CLS_ID);
    token_boxes.push(NormBox::ZERO);
    word_index_of_token.push(None);
    incidence.push(BTreeSet::new());
    for w in 0..kept {
        let nb = normalize_box(&seg_boxes[w], page_w, page_h)?;
        token_ids.push(vocab.token_id(&d.words[w]));
        token_boxes.push(nb);
        word_index_of_token.push(Some(w));
        incidence.push(word_patches(&nb, &grid));
    }
    token_ids.push(SEP_ID);
    token_boxes.push(NormBox::ZERO);
    word_index_of_token.push(None);
    incidence.push(BTreeSet::new());
    let real = token_ids.len();
    token_ids.resize(l, PAD_ID);
    token_boxes.resize(l, NormBox::ZERO);
    word_index_of_token.resize(l, None);
    incidence.resize(l, BTreeSet::new());
    let attention_flags = (0..l).map(|i| i < real).collect();

    let image = d.image.resize_nearest(cfg.image_height, cfg.image_width);
    Ok(EncodedInput {
        token_ids,
        token_boxes,
        attention_flags,
        word_index_of_token,
        patch_pixels: image.patches(cfg.patch_size),
        patch_boxes: grid.cell_boxes(),
        incidence,
        grid,
        channels: cfg.channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::docmodel::{Image, Vocabulary, MASK_ID};
    use crate::geometry::PixelBox;

    fn cfg(l: usize) -> ModelConfig {
        ModelConfig { max_text_len: l, ..ModelConfig::desk() }
    }

    fn doc(n: usize) -> DocumentRecord {
        DocumentRecord {
            id: "d".into(),
            words: (0..n).map(|i| format!("w{i}")).collect(),
            boxes: (0..n as u32).map(|i| PixelBox::new(i, i, i + 10, i + 5).unwrap()).collect(),
            segment_ids: (0..n as u32).map(|i| i / 3).collect(),
            image: Image::filled(3, 100, 120, &[255]),
            labels: None,
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens((0..200).map(|i| format!("w{i}")))
    }

    #[test]
    fn two_words_are_padded() {
        let e = encode_document(&doc(2), &cfg(8), &vocab()).unwrap();
        assert_eq!(e.token_ids, vec![CLS_ID, 5, 6, SEP_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(e.attention_flags, vec![true, true, true, true, false, false, false, false]);
        assert_eq!(e.num_words(), 2);
        for i in [0, 3, 4, 7] {
            assert_eq!(e.token_boxes[i], NormBox::ZERO);
            assert!(e.incidence[i].is_empty());
        }
        assert_eq!(e.patch_pixels.len(), 16);
        assert_eq!(e.patch_pixels[0].len(), 16 * 16 * 3);
    }

    #[test]
    fn empty_document() {
        let e = encode_document(&doc(0), &cfg(8), &vocab()).unwrap();
        assert_eq!(&e.token_ids[..3], &[CLS_ID, SEP_ID, PAD_ID]);
        assert!(e.token_boxes.iter().all(|b| *b == NormBox::ZERO));
        assert_eq!(e.num_words(), 0);
    }

    #[test]
    fn truncation_keeps_earliest_words() {
        let l = 10;
        let e = encode_document(&doc(l - 2 + 5), &cfg(l), &vocab()).unwrap();
        assert_eq!(e.num_words(), l - 2);
        assert_eq!(e.token_ids.len(), l);
        assert_eq!(e.token_ids[l - 1], SEP_ID);
        let words: Vec<_> = e.word_index_of_token.iter().flatten().copied().collect();
        assert_eq!(words, (0..l - 2).collect::<Vec<_>>());
    }

    #[test]
    fn segments_share_boxes() {
        let e = encode_document(&doc(7), &cfg(16), &vocab()).unwrap();
        assert_eq!(e.token_boxes[1], e.token_boxes[2]);
        assert_eq!(e.token_boxes[2], e.token_boxes[3]);
        assert_ne!(e.token_boxes[3], e.token_boxes[4]);
        // segment 0 spans words 0..3: pixels [0, 12] x [0, 7] on a 120x100 page
        assert_eq!(e.token_boxes[1], NormBox::new(0, 0, 100, 70).unwrap());
    }

    #[test]
    fn unknown_words_and_errors() {
        let mut d = doc(1);
        d.words[0] = "never-seen".into();
        let e = encode_document(&d, &cfg(4), &vocab()).unwrap();
        assert_eq!(e.token_ids[1], crate::docmodel::UNK_ID);
        assert_ne!(e.token_ids[1], MASK_ID);
        assert!(matches!(encode_document(&d, &cfg(4), &Vocabulary::default()), Err(Error::Config(_))));
        d.image = Image::filled(1, 10, 10, &[0]);
        assert!(matches!(encode_document(&d, &cfg(4), &vocab()), Err(Error::Format(_))));
    }
}
