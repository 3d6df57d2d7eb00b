//! JSON-lines corpus files.
//!
//! Each line is `{id, words, boxes, segment_ids, image, labels?}` with pixel
//! boxes as `[x0, y0, x1, y1]` and `image` a path relative to the corpus
//! file's directory.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{read_image, write_image};
use super::{DocumentRecord, Labels};
use crate::error::{Error, Result};
use crate::geometry::PixelBox;

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    id: String,
    words: Vec<String>,
    boxes: Vec<[u32; 4]>,
    segment_ids: Vec<u32>,
    image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Labels>,
}

/// Streams records in file order.
pub struct CorpusReader {
    lines: Lines<BufReader<File>>,
    base: PathBuf,
    line_no: usize,
}

impl CorpusReader {
    fn parse(&self, text: &str) -> Result<DocumentRecord> {
        let at = |message: String| Error::Parse { line: self.line_no, message };
        let raw: CorpusLine = serde_json::from_str(text).map_err(|e| at(e.to_string()))?;
        if raw.words.len() != raw.boxes.len() || raw.words.len() != raw.segment_ids.len() {
            return Err(at(format!(
                "{} words, {} boxes, {} segment ids",
                raw.words.len(),
                raw.boxes.len(),
                raw.segment_ids.len()
            )));
        }
        let boxes = raw
            .boxes
            .iter()
            .map(|&[x0, y0, x1, y1]| PixelBox::new(x0, y0, x1, y1).map_err(|e| at(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let image = read_image(&self.base.join(&raw.image))?;
        let doc = DocumentRecord {
            id: raw.id,
            words: raw.words,
            boxes,
            segment_ids: raw.segment_ids,
            image,
            labels: raw.labels,
        };
        doc.validate().map_err(|e| at(e.to_string()))?;
        Ok(doc)
    }
}

impl Iterator for CorpusReader {
    type Item = Result<DocumentRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::Parse { line: self.line_no, message: e.to_string() })),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(self.parse(&line));
        }
    }
}

pub fn read_corpus(path: &Path) -> Result<CorpusReader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(CorpusReader {
        lines: BufReader::new(file).lines(),
        base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        line_no: 0,
    })
}

/// Writes `docs` to `path` and their rasters to `<stem>_images/` next to
/// it (PPM for three channels, `LFIMG1` otherwise).
pub fn write_corpus<'a, I>(docs: I, path: &Path) -> Result<()>
where
    I: IntoIterator<Item = &'a DocumentRecord>,
{
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus");
    let image_dir = format!("{stem}_images");
    std::fs::create_dir_all(base.join(&image_dir)).map_err(|e| Error::io(base.join(&image_dir), e))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for d in docs {
        d.validate()?;
        let ext = if d.image.channels == 3 { "ppm" } else { "lfimg" };
        let rel = format!("{image_dir}/{}.{ext}", d.id);
        write_image(&d.image, &base.join(&rel))?;
        let line = CorpusLine {
            id: d.id.clone(),
            words: d.words.clone(),
            boxes: d.boxes.iter().map(|b| [b.x0, b.y0, b.x1, b.y1]).collect(),
            segment_ids: d.segment_ids.clone(),
            image: rel,
            labels: d.labels.clone(),
        };
        let text = serde_json::to_string(&line).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "{text}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::docmodel::{generate_document, GeneratorStyle, Image};

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("corpus-test-{}-{name}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn round_trip() {
        let dir = tmp("rt");
        let style = GeneratorStyle::default();
        let mut docs: Vec<_> = (0..10).map(|s| generate_document(s, &style)).collect();
        docs[3].image = Image::filled(1, 8, 8, &[7]);
        docs[4].labels = None;
        let path = dir.join("train.jsonl");
        write_corpus(&docs, &path).unwrap();
        let back: Vec<_> = read_corpus(&path).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(back, docs);
    }

    #[test]
    fn empty_file_is_empty_stream() {
        let dir = tmp("empty");
        let path = dir.join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert_eq!(read_corpus(&path).unwrap().count(), 0);
    }

    #[test]
    fn mismatched_lengths_name_the_line() {
        let dir = tmp("bad");
        let path = dir.join("bad.jsonl");
        let good = generate_document(1, &GeneratorStyle::default());
        write_corpus([&good], &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str(r#"{"id":"x","words":["a","b"],"boxes":[[0,0,1,1]],"segment_ids":[0,0],"image":"none.ppm"}"#);
        text.push('\n');
        std::fs::write(&path, text).unwrap();
        let items: Vec<_> = read_corpus(&path).unwrap().collect();
        assert!(items[0].is_ok());
        assert!(matches!(items[1], Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn missing_image_names_path() {
        let dir = tmp("missing");
        let path = dir.join("c.jsonl");
        std::fs::write(&path, r#"{"id":"x","words":[],"boxes":[],"segment_ids":[],"image":"gone.ppm"}"#).unwrap();
        match read_corpus(&path).unwrap().next().unwrap() {
            Err(Error::Io { path, .. }) => assert!(path.ends_with("gone.ppm")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(read_corpus(&dir.join("nope.jsonl")), Err(Error::Io { .. })));
    }
}
