//! Synthetic form-like documents.
//!
//! A page is a stack of segments. Each segment has a kind (header, question,
//! answer, other) that decides which sub-lexicon its words come from and
//! its BIO labels. Headers and questions are prefixes of a few fixed
//! phrases, as field names on real forms are. An answer that follows a
//! question draws from a few values tied to that question's phrase; other
//! text is drawn freely. Words are drawn as filled rectangles whose colour is a
//! hash of the word, and the page background tint encodes the document
//! class, so both text and image carry learnable signal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnswerSpan, DocumentRecord, Image, Labels};
use crate::geometry::PixelBox;

/// Tag names of the word labels produced by the generator, indexed by id.
pub const ENTITY_TAGS: [&str; 7] = ["O", "B-HEADER", "I-HEADER", "B-QUESTION", "I-QUESTION", "B-ANSWER", "I-ANSWER"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    Header,
    Question,
    Answer,
    Other,
}

impl SegmentKind {
    fn begin_tag(self) -> u32 {
        match self {
            SegmentKind::Header => 1,
            SegmentKind::Question => 3,
            SegmentKind::Answer => 5,
            SegmentKind::Other => 0,
        }
    }

    fn inside_tag(self) -> u32 {
        match self {
            SegmentKind::Other => 0,
            k => k.begin_tag() + 1,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            SegmentKind::Header => "um",
            SegmentKind::Question => "ix",
            SegmentKind::Answer => "on",
            SegmentKind::Other => "e",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorStyle {
    pub page_width: u32,
    pub page_height: u32,
    pub channels: usize,
    pub max_segments: usize,
    pub max_words: usize,
    /// Distinct words per segment kind.
    pub lexicon_size: usize,
    /// Fixed phrases per header/question kind; 0 draws every word freely.
    pub phrases: usize,
    pub num_doc_classes: u32,
    /// Force the document class instead of deriving it from the seed.
    pub doc_class: Option<u32>,
}

impl Default for GeneratorStyle {
    fn default() -> Self {
        Self {
            page_width: 256,
            page_height: 256,
            channels: 3,
            max_segments: 8,
            max_words: 12,
            lexicon_size: 40,
            phrases: 6,
            num_doc_classes: 4,
            doc_class: None,
        }
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const MARGIN: u32 = 8;
const LINE_HEIGHT: u32 = 12;
const LINE_GAP: u32 = 2;
const WORD_GAP: u32 = 4;

/// The `index`-th word of a kind's lexicon: two or three syllables plus a
/// kind-specific ending, so lexicons never collide.
pub fn lexicon_word(kind: SegmentKind, index: usize) -> String {
    let mut s = String::new();
    let mut n = index;
    let syllables = 2 + index % 2;
    for _ in 0..syllables {
        s.push(CONSONANTS[n % CONSONANTS.len()] as char);
        n /= CONSONANTS.len();
        s.push(VOWELS[n % VOWELS.len()] as char);
        n /= VOWELS.len();
        n += index * 7 + 3;
    }
    s.push_str(kind.suffix());
    s
}

/// Distinct answer words that may follow a given question phrase.
const ANSWER_CHOICES: usize = 6;

/// Lexicon index of word `k` of fixed phrase `p`.
fn phrase_word(p: usize, k: usize, lexicon_size: usize) -> usize {
    (p * 7 + k * 5 + p * k) % lexicon_size
}

fn word_color(word: &str) -> [u8; 3] {
    // FNV-1a; components kept below 200 so words never blend into the page
    let mut h: u32 = 0x811c_9dc5;
    for b in word.bytes() {
        h ^= u32::from(b);
        h = h.wrapping_mul(0x0100_0193);
    }
    [(h % 200) as u8, ((h >> 8) % 200) as u8, ((h >> 16) % 200) as u8]
}

/// Page background for a document class.
pub fn class_background(class: u32) -> [u8; 3] {
    match class % 4 {
        0 => [255, 255, 255],
        1 => [255, 230, 230],
        2 => [230, 255, 230],
        _ => [230, 230, 255],
    }
}

fn word_width(word: &str) -> u32 {
    3 * word.len() as u32 + 4
}

fn mix(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic synthetic document for `(seed, style)`.
pub fn generate_document(seed: u64, style: &GeneratorStyle) -> DocumentRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed));
    let classes = style.num_doc_classes.max(1);
    let doc_class = style.doc_class.unwrap_or((mix(seed ^ 0x5eed) % u64::from(classes)) as u32);
    let background = class_background(doc_class);
    let (pw, ph) = (style.page_width, style.page_height);
    let mut image = Image::filled(style.channels, ph as usize, pw as usize, &background);

    let max_segments = style.max_segments.max(1);
    let n_segments = rng.random_range(1..=max_segments);
    let band = (ph - 2 * MARGIN) / max_segments as u32;
    let usable = pw - 2 * MARGIN;

    let mut words = Vec::new();
    let mut boxes = Vec::new();
    let mut segment_ids = Vec::new();
    let mut tags = Vec::new();
    let mut answer = None;

    let mut asked = None;
    for s in 0..n_segments {
        let kind = if s == 0 && n_segments > 1 {
            SegmentKind::Header
        } else if rng.random_bool(0.2) {
            SegmentKind::Other
        } else if s % 2 == 1 {
            SegmentKind::Question
        } else {
            SegmentKind::Answer
        };
        let n_words = rng.random_range(1..=style.max_words.max(1));
        let lexicon = style.lexicon_size.max(1);
        let phrase = match kind {
            SegmentKind::Header | SegmentKind::Question if style.phrases > 0 => Some(rng.random_range(0..style.phrases)),
            _ => None,
        };
        let answer_to = if kind == SegmentKind::Answer { asked } else { None };
        asked = if kind == SegmentKind::Question { phrase } else { None };
        let top = MARGIN + s as u32 * band;
        let (mut x, mut line) = (MARGIN, 0u32);
        let first = words.len();
        for k in 0..n_words {
            let index = match phrase {
                Some(p) => phrase_word(p, k, lexicon),
                None => match answer_to {
                    Some(q) => (q * ANSWER_CHOICES + rng.random_range(0..ANSWER_CHOICES)) % lexicon,
                    None => rng.random_range(0..lexicon),
                },
            };
            let word = lexicon_word(kind, index);
            let w = word_width(&word).min(usable);
            if x + w > MARGIN + usable {
                let y_next = top + (line + 1) * (LINE_HEIGHT + LINE_GAP);
                if y_next + LINE_HEIGHT > top + band {
                    break;
                }
                line += 1;
                x = MARGIN;
            }
            let y = top + line * (LINE_HEIGHT + LINE_GAP);
            let b = PixelBox { x0: x, y0: y, x1: x + w, y1: y + LINE_HEIGHT };
            let color = word_color(&word);
            for c in 0..style.channels {
                for py in b.y0..b.y1 {
                    for px in b.x0..b.x1 {
                        image.set(c, py as usize, px as usize, color[c % 3]);
                    }
                }
            }
            x += w + WORD_GAP;
            tags.push(if k == 0 { kind.begin_tag() } else { kind.inside_tag() });
            words.push(word);
            boxes.push(b);
            segment_ids.push(s as u32);
        }
        if kind == SegmentKind::Answer && answer.is_none() {
            answer = Some(AnswerSpan { start: first, end: words.len() - 1 });
        }
    }

    let id = match style.doc_class {
        Some(c) => format!("synth-{seed:08}-c{c}"),
        None => format!("synth-{seed:08}"),
    };
    DocumentRecord {
        id,
        words,
        boxes,
        segment_ids,
        image,
        labels: Some(Labels { word_labels: Some(tags), doc_class: Some(doc_class), answer }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn deterministic() {
        let s = GeneratorStyle::default();
        assert_eq!(generate_document(17, &s), generate_document(17, &s));
        assert_ne!(generate_document(17, &s), generate_document(18, &s));
    }

    #[test]
    fn distinct_ids() {
        let s = GeneratorStyle::default();
        let ids: HashSet<String> = (0..1000).map(|i| generate_document(i, &s).id).collect();
        assert_eq!(ids.len(), 1000);
    }

    #[test]
    fn shape_and_labels() {
        let s = GeneratorStyle::default();
        for seed in 0..200 {
            let d = generate_document(seed, &s);
            d.validate().unwrap();
            assert!(!d.words.is_empty());
            let segs: HashSet<u32> = d.segment_ids.iter().copied().collect();
            assert!((1..=8).contains(&segs.len()));
            let labels = d.labels.as_ref().unwrap();
            assert_eq!(labels.word_labels.as_ref().unwrap().len(), d.words.len());
            assert!(labels.doc_class.unwrap() < 4);
            for b in &d.boxes {
                assert!(b.x1 <= s.page_width && b.y1 <= s.page_height);
            }
        }
    }

    #[test]
    fn lexicons_do_not_collide() {
        let kinds = [SegmentKind::Header, SegmentKind::Question, SegmentKind::Answer, SegmentKind::Other];
        let all: Vec<String> = kinds.iter().flat_map(|&k| (0..40).map(move |i| lexicon_word(k, i))).collect();
        let set: HashSet<&String> = all.iter().collect();
        assert_eq!(set.len(), all.len());
    }

    /// Scan the whole raster: every pixel that differs from the background
    /// must sit inside a box of a word drawn in that exact colour.
    #[test]
    fn drawn_pixels_stay_inside_boxes() {
        let s = GeneratorStyle::default();
        for seed in 0..50 {
            let d = generate_document(seed, &s);
            let bg = class_background(d.labels.as_ref().unwrap().doc_class.unwrap());
            let img = &d.image;
            for y in 0..img.height {
                for x in 0..img.width {
                    let px = [img.get(0, y, x), img.get(1, y, x), img.get(2, y, x)];
                    if px == bg {
                        continue;
                    }
                    let owned = d.words.iter().zip(&d.boxes).any(|(w, b)| {
                        b.contains_point(x as u32, y as u32) && word_color(w) == px
                    });
                    assert!(owned, "seed {seed}: stray pixel at ({x}, {y})");
                }
            }
        }
    }

    #[test]
    fn forced_class() {
        let s = GeneratorStyle { doc_class: Some(2), ..GeneratorStyle::default() };
        let d = generate_document(5, &s);
        assert_eq!(d.labels.unwrap().doc_class, Some(2));
        assert_eq!(d.id, "synth-00000005-c2");
    }
}
