//! Entity F1 over BIO tags, classification accuracy and ANLS.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{Prediction, TaskKind};

/// One metric value with the counts behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub support: BTreeMap<String, usize>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}", self.metric, self.value)?;
        for (k, v) in &self.support {
            write!(f, "\t{k}={v}")?;
        }
        Ok(())
    }
}

fn report(metric: &str, value: f64, support: &[(&str, usize)]) -> EvalReport {
    EvalReport {
        metric: metric.to_string(),
        value,
        support: support.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
    }
}

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized Levenshtein similarity of the lowercased, trimmed strings.
pub fn nls(a: &str, b: &str) -> f64 {
    let a = a.trim().to_lowercase();
    let b = b.trim().to_lowercase();
    let n = a.chars().count().max(b.chars().count());
    if n == 0 {
        return 1.0;
    }
    1.0 - levenshtein(&a, &b) as f64 / n as f64
}

/// Mean over questions of the best gold similarity, zeroed below `tau`.
pub fn anls(preds: &[String], golds: &[Vec<String>], tau: f64) -> Result<EvalReport> {
    if preds.len() != golds.len() {
        return Err(Error::Shape(format!("{} predictions for {} questions", preds.len(), golds.len())));
    }
    let mut total = 0.0;
    for (i, (p, g)) in preds.iter().zip(golds).enumerate() {
        if g.is_empty() {
            return Err(Error::Format(format!("question {i} has no gold answers")));
        }
        let s = g.iter().map(|a| nls(p, a)).fold(0.0, f64::max);
        if s >= tau {
            total += s;
        }
    }
    let value = if preds.is_empty() { 0.0 } else { total / preds.len() as f64 };
    Ok(report("anls", value, &[("questions", preds.len())]))
}

/// Fraction of positions where the class ids agree.
pub fn accuracy(gold: &[u32], pred: &[u32]) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::Shape(format!("{} predictions for {} gold labels", pred.len(), gold.len())));
    }
    if gold.is_empty() {
        return Err(Error::Format("accuracy of an empty set".into()));
    }
    let correct = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    Ok(report("accuracy", correct as f64 / gold.len() as f64, &[("correct", correct), ("total", gold.len())]))
}

/// A typed entity over the inclusive token range `start..=end`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Entity {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(t: &str) -> Result<Tag<'_>> {
    if t == "O" {
        return Ok(Tag::Outside);
    }
    match t.split_once('-') {
        Some(("B", k)) if !k.is_empty() => Ok(Tag::Begin(k)),
        Some(("I", k)) if !k.is_empty() => Ok(Tag::Inside(k)),
        _ => Err(Error::Format(format!("malformed BIO tag {t:?}"))),
    }
}

/// Maximal BIO segments. An `I-X` that does not continue an `X` entity
/// opens a new one.
pub fn decode_bio<S: AsRef<str>>(tags: &[S]) -> Result<Vec<Entity>> {
    let mut out: Vec<Entity> = Vec::new();
    let mut open = false;
    for (i, t) in tags.iter().enumerate() {
        match parse_tag(t.as_ref())? {
            Tag::Outside => open = false,
            Tag::Begin(k) => {
                out.push(Entity { kind: k.to_string(), start: i, end: i });
                open = true;
            }
            Tag::Inside(k) => match out.last_mut() {
                Some(e) if open && e.kind == k => e.end = i,
                _ => {
                    out.push(Entity { kind: k.to_string(), start: i, end: i });
                    open = true;
                }
            },
        }
    }
    Ok(out)
}

/// Entity-level F1 over documents; a predicted entity counts only when its
/// type and both boundaries match a gold entity.
pub fn entity_f1<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::Shape(format!("{} predicted documents for {} gold", pred.len(), gold.len())));
    }
    let (mut n_gold, mut n_pred, mut matched) = (0, 0, 0);
    for (d, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Shape(format!("document {d}: {} predicted tags for {} gold", p.len(), g.len())));
        }
        let ge = decode_bio(g)?;
        let pe = decode_bio(p)?;
        n_gold += ge.len();
        n_pred += pe.len();
        matched += pe.iter().filter(|e| ge.contains(e)).count();
    }
    let precision = if n_pred == 0 { 0.0 } else { matched as f64 / n_pred as f64 };
    let recall = if n_gold == 0 { 0.0 } else { matched as f64 / n_gold as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(report("entity_f1", f1, &[("gold", n_gold), ("matched", matched), ("predicted", n_pred)]))
}

/// Scores a prediction dump against gold records of the same shape, joined
/// by document id.
pub fn evaluate_dump(kind: TaskKind, preds: &[Prediction], golds: &[Prediction]) -> Result<EvalReport> {
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let missing = |what: &str, id: &str| Error::Format(format!("no {what} for document {id}"));
    let mut paired = Vec::with_capacity(golds.len());
    for g in golds {
        paired.push((g, *by_id.get(g.id.as_str()).ok_or_else(|| missing("prediction", &g.id))?));
    }
    match kind {
        TaskKind::TokenLabel => {
            let mut gs = Vec::new();
            let mut ps = Vec::new();
            for (g, p) in paired {
                gs.push(g.labels.clone().ok_or_else(|| missing("gold labels", &g.id))?);
                ps.push(p.labels.clone().ok_or_else(|| missing("predicted labels", &p.id))?);
            }
            entity_f1(&gs, &ps)
        }
        TaskKind::DocClass => {
            let mut gs = Vec::new();
            let mut ps = Vec::new();
            for (g, p) in paired {
                gs.push(g.class.ok_or_else(|| missing("gold class", &g.id))?);
                ps.push(p.class.ok_or_else(|| missing("predicted class", &p.id))?);
            }
            accuracy(&gs, &ps)
        }
        TaskKind::ExtractiveQa => {
            let mut gs = Vec::new();
            let mut ps = Vec::new();
            for (g, p) in paired {
                gs.push(vec![g.answer.clone().ok_or_else(|| missing("gold answer", &g.id))?]);
                ps.push(p.answer.clone().unwrap_or_default());
            }
            anls(&ps, &gs, 0.5)
        }
    }
}

/// Reads a JSON-lines prediction or gold dump.
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

pub fn write_predictions(preds: &[Prediction], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for p in preds {
        let line = serde_json::to_string(p).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tags(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    /// Full-matrix recurrence, kept separate from the two-row version above.
    fn dp_oracle(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn levenshtein_known() {
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("fine", "find"), 1);
        assert_eq!(levenshtein("flaw", "lawn"), 2);
    }

    #[test]
    fn anls_examples() {
        let one = |p: &str, g: &[&str]| anls(&[p.to_string()], &[g.iter().map(|s| s.to_string()).collect()], 0.5).unwrap().value;
        assert_eq!(one("Total", &["total"]), 1.0);
        assert_eq!(one("fine", &["find"]), 0.75);
        assert_eq!(one("abc", &["xyz"]), 0.0);
        assert_eq!(one("  Fine ", &["xyz", "find"]), 0.75);
        // one edit in two characters leaves exactly the threshold
        assert_eq!(one("ab", &["ax"]), 0.5);
        assert_eq!(one("abc", &["axy"]), 0.0);
        assert!(anls(&["a".into()], &[vec![]], 0.5).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap().value, 1.0);
        assert_eq!(accuracy(&[1, 2], &[0, 0]).unwrap().value, 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap().value, 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn bio_decoding() {
        let e = decode_bio(&tags("B-Q I-Q O I-A I-A B-A B-Q I-A")).unwrap();
        let got: Vec<(&str, usize, usize)> = e.iter().map(|e| (e.kind.as_str(), e.start, e.end)).collect();
        assert_eq!(got, vec![("Q", 0, 1), ("A", 3, 4), ("A", 5, 5), ("Q", 6, 6), ("A", 7, 7)]);
        assert!(decode_bio(&tags("B-Q X")).is_err());
        assert!(decode_bio(&tags("B-")).is_err());
    }

    #[test]
    fn entity_f1_examples() {
        let gold = vec![tags("B-Q I-Q O B-A")];
        assert_eq!(entity_f1(&gold, &gold).unwrap().value, 1.0);
        assert_eq!(entity_f1(&gold, &[tags("O O O O")]).unwrap().value, 0.0);
        // one exact match, one wrong boundary counted as spurious
        let r = entity_f1(&gold, &[tags("B-Q I-Q B-A I-A")]).unwrap();
        assert_eq!(r.value, 0.5);
        assert_eq!(r.support["matched"], 1);
        // wrong type does not match
        assert_eq!(entity_f1(&[tags("B-Q")], &[tags("B-A")]).unwrap().value, 0.0);
        assert!(entity_f1(&[tags("O")], &[tags("O O")]).is_err());
    }

    #[test]
    fn dump_evaluation() {
        let g = vec![
            Prediction { id: "a".into(), class: Some(1), ..Default::default() },
            Prediction { id: "b".into(), class: Some(2), ..Default::default() },
        ];
        assert_eq!(evaluate_dump(TaskKind::DocClass, &g, &g).unwrap().value, 1.0);
        assert!(evaluate_dump(TaskKind::DocClass, &g[..1], &g).is_err());
        let dir = std::env::temp_dir().join(format!("lm-metrics-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.jsonl");
        write_predictions(&g, &path).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), g);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn report_line() {
        let r = accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap();
        assert_eq!(r.to_string(), "accuracy\t0.75\tcorrect=3\ttotal=4");
    }

    proptest! {
        #[test]
        fn levenshtein_matches_oracle(a in "[abc]{0,12}", b in "[abc]{0,12}") {
            prop_assert_eq!(levenshtein(&a, &b), dp_oracle(&a, &b));
        }

        #[test]
        fn levenshtein_is_a_metric(a in "[ab]{0,8}", b in "[ab]{0,8}", c in "[ab]{0,8}") {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
            prop_assert_eq!(levenshtein(&a, &a), 0);
        }

        #[test]
        fn anls_of_self_is_one(p in "[a-zA-Z0-9]{1,10}") {
            prop_assert_eq!(anls(&[p.clone()], &[vec![p]], 0.5).unwrap().value, 1.0);
        }

        #[test]
        fn f1_ignores_document_order(seed in 0u64..1000) {
            let pool = ["O", "B-X", "I-X", "B-Y", "I-Y"];
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 33) as usize % pool.len() };
            let docs: Vec<(Vec<String>, Vec<String>)> = (0..5)
                .map(|_| {
                    let n = 1 + next() % 5;
                    ((0..n).map(|_| pool[next()].to_string()).collect(), (0..n).map(|_| pool[next()].to_string()).collect())
                })
                .collect();
            let (g, p): (Vec<_>, Vec<_>) = docs.iter().cloned().unzip();
            let (gr, pr): (Vec<_>, Vec<_>) = docs.iter().rev().cloned().unzip();
            prop_assert_eq!(entity_f1(&g, &p).unwrap(), entity_f1(&gr, &pr).unwrap());
        }
    }
}
