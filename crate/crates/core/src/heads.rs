//! Fine-tuning heads over the shared encoder: per-token labels, document
//! class from `[CLS]`, and extractive QA span prediction.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::docmodel::{DocumentRecord, EncodedInput};
use crate::error::{Error, Result};
use crate::model::ops::{gelu, gelu_grad, linear, linear_backward, log_sum_exp};
use crate::model::{ContextualOutput, Grads, Init, Model, ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    TokenLabel,
    DocClass,
    ExtractiveQa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadShape {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHeadConfig {
    pub kind: TaskKind,
    /// Ignored for extractive QA, which always scores start and end.
    pub num_classes: usize,
    pub shape: HeadShape,
    pub max_answer_len: usize,
}

impl TaskHeadConfig {
    /// Linear for token labels and QA, MLP for document classes.
    pub fn new(kind: TaskKind, num_classes: usize) -> Self {
        let shape = match kind {
            TaskKind::DocClass => HeadShape::Mlp,
            _ => HeadShape::Linear,
        };
        Self { kind, num_classes, shape, max_answer_len: 30 }
    }

    pub fn outputs(&self) -> usize {
        match self.kind {
            TaskKind::ExtractiveQa => 2,
            _ => self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != TaskKind::ExtractiveQa && self.num_classes < 2 {
            return Err(Error::Config(format!("classification needs at least 2 classes, got {}", self.num_classes)));
        }
        if self.kind == TaskKind::ExtractiveQa && self.max_answer_len == 0 {
            return Err(Error::Config("max answer length must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter handles of a task head.
#[derive(Debug, Clone)]
pub struct TaskLayout {
    pub config: TaskHeadConfig,
    pub hidden: Option<(ParamId, ParamId)>,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
}

struct HeadCache {
    input: Array2<f64>,
    pre_act: Option<Array2<f64>>,
    act: Option<Array2<f64>>,
}

impl TaskLayout {
    pub(crate) fn register<R: Rng + ?Sized>(config: TaskHeadConfig, d: usize, ps: &mut ParamSet, init: Init, rng: &mut R) -> Self {
        let hidden = (config.shape == HeadShape::Mlp)
            .then(|| (ps.add("task.w1", d, d, init, true, rng), ps.add("task.b1", 1, d, Init::Zeros, false, rng)));
        let out = config.outputs();
        let out_weight = ps.add("task.weight", d, out, Init::Zeros, true, rng);
        let out_bias = ps.add("task.bias", 1, out, Init::Zeros, false, rng);
        Self { config, hidden, out_weight, out_bias }
    }

    fn forward(&self, ps: &ParamSet, rows: Array2<f64>) -> (Array2<f64>, HeadCache) {
        match self.hidden {
            Some((w1, b1)) => {
                let pre = linear(&rows.view(), ps.get(w1), ps.get(b1));
                let act = pre.mapv(gelu);
                let logits = linear(&act.view(), ps.get(self.out_weight), ps.get(self.out_bias));
                (logits, HeadCache { input: rows, pre_act: Some(pre), act: Some(act) })
            }
            None => {
                let logits = linear(&rows.view(), ps.get(self.out_weight), ps.get(self.out_bias));
                (logits, HeadCache { input: rows, pre_act: None, act: None })
            }
        }
    }

    fn backward(&self, ps: &ParamSet, cache: &HeadCache, d_logits: &Array2<f64>, grads: &mut Grads) -> Array2<f64> {
        let [gw, gb] = grads.many_mut([self.out_weight, self.out_bias]);
        match (self.hidden, &cache.pre_act, &cache.act) {
            (Some((w1, b1)), Some(pre), Some(act)) => {
                let mut d = linear_backward(&act.view(), ps.get(self.out_weight), d_logits, gw, gb);
                d.zip_mut_with(pre, |g, &x| *g *= gelu_grad(x));
                let [gw1, gb1] = grads.many_mut([w1, b1]);
                linear_backward(&cache.input.view(), ps.get(w1), &d, gw1, gb1)
            }
            _ => linear_backward(&cache.input.view(), ps.get(self.out_weight), d_logits, gw, gb),
        }
    }
}

fn softmax(row: ndarray::ArrayView1<f64>) -> Vec<f64> {
    let lse = log_sum_exp(row.iter().copied());
    row.iter().map(|v| (v - lse).exp()).collect()
}

fn task(model: &Model, kind: TaskKind) -> Result<&TaskLayout> {
    match &model.task {
        Some(t) if t.config.kind == kind => Ok(t),
        Some(t) => Err(Error::Config(format!("model carries a {:?} head, not {kind:?}", t.config.kind))),
        None => Err(Error::Config("model has no task head".into())),
    }
}

/// Class distribution for every word token, in token order.
pub fn token_classify(model: &Model, ctx: &ContextualOutput, enc: &EncodedInput) -> Result<Vec<Vec<f64>>> {
    let head = task(model, TaskKind::TokenLabel)?;
    let words = enc.word_positions();
    let rows = ctx.hidden.slice(s![words, ..]).to_owned();
    let (logits, _) = head.forward(&model.params, rows);
    Ok(logits.rows().into_iter().map(softmax).collect())
}

/// Class distribution from the `[CLS]` vector.
pub fn doc_classify(model: &Model, ctx: &ContextualOutput) -> Result<Vec<f64>> {
    let head = task(model, TaskKind::DocClass)?;
    let rows = ctx.hidden.slice(s![0..1, ..]).to_owned();
    let (logits, _) = head.forward(&model.params, rows);
    Ok(softmax(logits.row(0)))
}

/// A candidate answer span over word tokens, as token positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// Best `k` spans `(i, j)` with `i <= j < i + max_len` maximizing
/// `start[i] + end[j]`; ties go to the smaller `i`, then the smaller `j`.
/// Indices are relative to the score slices.
pub fn decode_spans(start: &[f64], end: &[f64], max_len: usize, k: usize) -> Result<Vec<Span>> {
    if start.is_empty() || start.len() != end.len() {
        return Err(Error::Contract(format!("no valid span over {} / {} scores", start.len(), end.len())));
    }
    let mut all = Vec::new();
    for i in 0..start.len() {
        for j in i..start.len().min(i + max_len.max(1)) {
            all.push(Span { start: i, end: j, score: start[i] + end[j] });
        }
    }
    all.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.start.cmp(&b.start)).then(a.end.cmp(&b.end)));
    all.truncate(k.max(1));
    Ok(all)
}

/// Ranked answer spans over real word tokens, as token positions.
pub fn qa_spans(model: &Model, ctx: &ContextualOutput, enc: &EncodedInput, k: usize) -> Result<Vec<Span>> {
    let head = task(model, TaskKind::ExtractiveQa)?;
    let words = enc.word_positions();
    let offset = words.start;
    let rows = ctx.hidden.slice(s![words, ..]).to_owned();
    let (logits, _) = head.forward(&model.params, rows);
    let start: Vec<f64> = logits.column(0).to_vec();
    let end: Vec<f64> = logits.column(1).to_vec();
    let mut spans = decode_spans(&start, &end, head.config.max_answer_len, k)?;
    for s in &mut spans {
        s.start += offset;
        s.end += offset;
    }
    Ok(spans)
}

/// Mean cross-entropy of `logits` rows against `targets`, and its gradient.
pub(crate) fn cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let n = targets.len();
    let mut grad = Array2::zeros(logits.raw_dim());
    if n == 0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - row[t];
        for (g, &v) in grad.row_mut(i).iter_mut().zip(row.iter()) {
            *g = (v - lse).exp() / n as f64;
        }
        grad[[i, t]] -= 1.0 / n as f64;
    }
    (loss / n as f64, grad)
}

/// Task loss for one labelled document and its gradient (accumulated into
/// `grads` when given). Returns `None` when the document carries no usable
/// label for this task, e.g. an answer cut off by truncation.
pub fn task_loss(model: &Model, enc: &EncodedInput, doc: &DocumentRecord, grads: Option<&mut Grads>) -> Result<Option<f64>> {
    let head = model.task.as_ref().ok_or_else(|| Error::Config("model has no task head".into()))?;
    let labels = doc.labels.as_ref();
    let missing = || Error::Config(format!("document {} lacks labels for {:?}", doc.id, head.config.kind));
    let (ctx, cache) = model.forward(enc, None)?;
    let words = enc.word_positions();
    let (rows, loss, d_logits, logits_cache) = match head.config.kind {
        TaskKind::TokenLabel => {
            let wl = labels.and_then(|l| l.word_labels.as_ref()).ok_or_else(missing)?;
            if words.is_empty() {
                return Ok(None);
            }
            let targets: Vec<usize> = enc.word_index_of_token[words.clone()]
                .iter()
                .map(|w| wl[w.expect("word position")] as usize)
                .collect();
            if let Some(&bad) = targets.iter().find(|&&t| t >= head.config.num_classes) {
                return Err(Error::Config(format!("label {bad} exceeds {} classes", head.config.num_classes)));
            }
            let rows = ctx.hidden.slice(s![words.clone(), ..]).to_owned();
            let (logits, hc) = head.forward(&model.params, rows);
            let (loss, d) = cross_entropy(&logits, &targets);
            (words.clone().collect::<Vec<_>>(), loss, d, hc)
        }
        TaskKind::DocClass => {
            let class = labels.and_then(|l| l.doc_class).ok_or_else(missing)? as usize;
            if class >= head.config.num_classes {
                return Err(Error::Config(format!("class {class} exceeds {} classes", head.config.num_classes)));
            }
            let (logits, hc) = head.forward(&model.params, ctx.hidden.slice(s![0..1, ..]).to_owned());
            let (loss, d) = cross_entropy(&logits, &[class]);
            (vec![0], loss, d, hc)
        }
        TaskKind::ExtractiveQa => {
            let answer = labels.and_then(|l| l.answer).ok_or_else(missing)?;
            let n = words.len();
            if answer.end >= n {
                return Ok(None);
            }
            let (logits, hc) = head.forward(&model.params, ctx.hidden.slice(s![words.clone(), ..]).to_owned());
            // start and end are each a softmax over the word tokens
            let starts = logits.column(0).to_owned().insert_axis(Axis(0));
            let ends = logits.column(1).to_owned().insert_axis(Axis(0));
            let (ls, ds) = cross_entropy(&starts, &[answer.start]);
            let (le, de) = cross_entropy(&ends, &[answer.end]);
            let mut d = Array2::zeros(logits.raw_dim());
            d.column_mut(0).assign(&ds.row(0));
            d.column_mut(1).assign(&de.row(0));
            (words.clone().collect(), ls + le, d, hc)
        }
    };
    if let Some(grads) = grads {
        let d_rows = head.backward(&model.params, &logits_cache, &d_logits, grads);
        let mut d_hidden = Array2::zeros(ctx.hidden.raw_dim());
        for (r, &pos) in rows.iter().enumerate() {
            d_hidden.row_mut(pos).assign(&d_rows.row(r));
        }
        model.backward(&cache, &d_hidden, grads);
    }
    Ok(Some(loss))
}

/// What a task head predicts for one document; also the gold-file shape.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<u32>,
    /// Inclusive word-index span.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn tag_name(tags: &[String], id: usize) -> String {
    tags.get(id).cloned().unwrap_or_else(|| "O".to_string())
}

/// Runs the task head and formats its prediction. Word tokens lost to
/// truncation are predicted `O`.
pub fn predict(model: &Model, enc: &EncodedInput, doc: &DocumentRecord, tags: &[String]) -> Result<Prediction> {
    let head = model.task.as_ref().ok_or_else(|| Error::Config("model has no task head".into()))?;
    let ctx = model.encode(enc, None)?;
    let mut p = Prediction { id: doc.id.clone(), ..Default::default() };
    match head.config.kind {
        TaskKind::TokenLabel => {
            let dists = token_classify(model, &ctx, enc)?;
            let mut labels = vec!["O".to_string(); doc.words.len()];
            for (d, w) in dists.iter().zip(enc.word_index_of_token[enc.word_positions()].iter()) {
                labels[w.expect("word position")] = tag_name(tags, argmax(d));
            }
            p.labels = Some(labels);
        }
        TaskKind::DocClass => {
            p.class = Some(argmax(&doc_classify(model, &ctx)?) as u32);
        }
        TaskKind::ExtractiveQa => {
            if enc.num_words() > 0 {
                let best = qa_spans(model, &ctx, enc, 1)?[0];
                let (a, b) = (
                    enc.word_index_of_token[best.start].expect("word position"),
                    enc.word_index_of_token[best.end].expect("word position"),
                );
                p.span = Some((a, b));
                p.answer = Some(doc.words[a..=b].join(" "));
            } else {
                p.answer = Some(String::new());
            }
        }
    }
    Ok(p)
}

/// Gold record for `doc` in the prediction-dump shape.
pub fn gold(doc: &DocumentRecord, kind: TaskKind, tags: &[String]) -> Result<Prediction> {
    let labels = doc.labels.as_ref().ok_or_else(|| Error::Config(format!("document {} has no labels", doc.id)))?;
    let mut p = Prediction { id: doc.id.clone(), ..Default::default() };
    match kind {
        TaskKind::TokenLabel => {
            let wl = labels.word_labels.as_ref().ok_or_else(|| Error::Config(format!("document {} has no word labels", doc.id)))?;
            p.labels = Some(wl.iter().map(|&t| tag_name(tags, t as usize)).collect());
        }
        TaskKind::DocClass => {
            p.class = Some(labels.doc_class.ok_or_else(|| Error::Config(format!("document {} has no class", doc.id)))?);
        }
        TaskKind::ExtractiveQa => {
            let a = labels.answer.ok_or_else(|| Error::Config(format!("document {} has no answer", doc.id)))?;
            p.span = Some((a.start, a.end));
            p.answer = Some(doc.words[a.start..=a.end].join(" "));
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::docmodel::{encode_document, generate_document, GeneratorStyle, Vocabulary};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig { layers: 1, hidden: 16, heads: 2, ffn_inner: 32, max_text_len: 16, image_height: 32, image_width: 32, ..ModelConfig::desk() }
    }

    fn setup(kind: TaskKind, classes: usize) -> (Model, EncodedInput, DocumentRecord) {
        let doc = generate_document(2, &GeneratorStyle::default());
        let v = Vocabulary::from_tokens(doc.words.clone());
        let enc = encode_document(&doc, &small(), &v).unwrap();
        let model = Model::new(small(), Some(TaskHeadConfig::new(kind, classes)), 1).unwrap();
        (model, enc, doc)
    }

    #[test]
    fn zero_heads_are_uniform() {
        let (model, enc, _) = setup(TaskKind::TokenLabel, 4);
        let ctx = model.encode(&enc, None).unwrap();
        let d = token_classify(&model, &ctx, &enc).unwrap();
        assert_eq!(d.len(), enc.num_words());
        for row in d {
            assert!(row.iter().all(|&p| (p - 0.25).abs() < 1e-12));
        }
        let (model, enc, _) = setup(TaskKind::DocClass, 4);
        let ctx = model.encode(&enc, None).unwrap();
        let d = doc_classify(&model, &ctx).unwrap();
        assert!(d.iter().all(|&p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn distributions_sum_to_one_and_ignore_padding() {
        let (mut model, mut enc, _) = setup(TaskKind::TokenLabel, 4);
        model.randomize_heads(0.3, 9);
        let ctx = model.encode(&enc, None).unwrap();
        let a = token_classify(&model, &ctx, &enc).unwrap();
        for row in &a {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let last = enc.token_ids.len() - 1;
        assert!(!enc.attention_flags[last]);
        enc.token_ids[last] = 7;
        let ctx2 = model.encode(&enc, None).unwrap();
        let b = token_classify(&model, &ctx2, &enc).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn doc_classify_is_deterministic() {
        let (mut model, enc, _) = setup(TaskKind::DocClass, 3);
        model.randomize_heads(0.3, 2);
        let a = doc_classify(&model, &model.encode(&enc, None).unwrap()).unwrap();
        let b = doc_classify(&model, &model.encode(&enc, None).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn span_decoding_examples() {
        let mut start = vec![0.0; 8];
        let mut end = vec![0.0; 8];
        start[2] = 5.0;
        end[5] = 5.0;
        let best = decode_spans(&start, &end, 30, 1).unwrap()[0];
        assert_eq!((best.start, best.end), (2, 5));
        let flat = decode_spans(&[1.0; 6], &[1.0; 6], 30, 1).unwrap()[0];
        assert_eq!((flat.start, flat.end), (0, 0));
        assert!(decode_spans(&[], &[], 30, 1).is_err());
        // end before start is never allowed
        let s = decode_spans(&[0.0, 9.0], &[9.0, 0.0], 30, 1).unwrap()[0];
        assert!(s.start <= s.end);
    }

    #[test]
    fn span_decoding_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let start: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            let end: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            let max_len = rng.random_range(1..10);
            let mut best = (f64::NEG_INFINITY, 0, 0);
            for i in 0..8 {
                for j in 0..8 {
                    if i <= j && j - i < max_len && start[i] + end[j] > best.0 {
                        best = (start[i] + end[j], i, j);
                    }
                }
            }
            let got = decode_spans(&start, &end, max_len, 3).unwrap();
            assert_eq!((got[0].start, got[0].end), (best.1, best.2));
            assert!(got.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }

    #[test]
    fn qa_spans_index_real_tokens() {
        let (mut model, enc, _) = setup(TaskKind::ExtractiveQa, 2);
        model.randomize_heads(1.0, 4);
        let ctx = model.encode(&enc, None).unwrap();
        for s in qa_spans(&model, &ctx, &enc, 5).unwrap() {
            assert!(s.start <= s.end);
            assert!(enc.word_positions().contains(&s.start) && enc.word_positions().contains(&s.end));
        }
    }

    #[test]
    fn predict_gold_round() {
        let tags: Vec<String> = crate::docmodel::ENTITY_TAGS.iter().map(|s| s.to_string()).collect();
        let (model, enc, doc) = setup(TaskKind::TokenLabel, 7);
        let p = predict(&model, &enc, &doc, &tags).unwrap();
        assert_eq!(p.labels.as_ref().unwrap().len(), doc.words.len());
        let g = gold(&doc, TaskKind::TokenLabel, &tags).unwrap();
        assert_eq!(g.id, doc.id);
        assert!(task_loss(&model, &enc, &doc, None).unwrap().unwrap() > 0.0);
    }

    #[test]
    fn config_checks() {
        assert!(TaskHeadConfig::new(TaskKind::DocClass, 1).validate().is_err());
        assert!(TaskHeadConfig::new(TaskKind::ExtractiveQa, 0).validate().is_ok());
        let (model, enc, _) = setup(TaskKind::DocClass, 3);
        let ctx = model.encode(&enc, None).unwrap();
        assert!(matches!(token_classify(&model, &ctx, &enc), Err(Error::Config(_))));
    }
}
