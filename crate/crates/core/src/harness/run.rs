//! Pre-training, fine-tuning and evaluation loops.
//!
//! Every random choice is drawn from a generator keyed by (seed, step, batch
//! position), so a run is reproducible regardless of how the batch is split
//! into accumulation micro-batches.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adam_step, AdamConfig, OptimizerState};
use crate::docmodel::{encode_document, DocumentRecord, EncodedInput, WordTokenizer};
use crate::error::{Error, Result};
use crate::heads::{gold, predict, task_loss, Prediction, TaskHeadConfig};
use crate::masking::{build_plan, MaskingConfig};
use crate::metrics::{evaluate_dump, EvalReport};
use crate::model::{Checkpoint, Grads, Model, ModelConfig, ParamSet, Precision};
use crate::objectives::{loss_and_grad, LossBreakdown, ObjectiveSwitches};

/// Everything a training run needs besides its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub accumulation: usize,
    pub total_steps: usize,
    pub switches: ObjectiveSwitches,
    pub task: Option<TaskHeadConfig>,
    pub model: ModelConfig,
    pub masking: MaskingConfig,
    pub optimizer: AdamConfig,
    pub precision: Precision,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 8,
            accumulation: 1,
            total_steps: 100,
            switches: ObjectiveSwitches::ALL,
            task: None,
            model: ModelConfig::desk(),
            masking: MaskingConfig::default(),
            optimizer: AdamConfig::default(),
            precision: Precision::F64,
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.accumulation == 0 {
            return Err(Error::Config("batch size and accumulation steps must be positive".into()));
        }
        if !self.batch_size.is_multiple_of(self.accumulation) {
            return Err(Error::Config(format!(
                "batch size {} is not divisible by {} accumulation steps",
                self.batch_size, self.accumulation
            )));
        }
        self.model.validate()?;
        self.masking.validate()?;
        self.optimizer.validate()?;
        if let Some(t) = &self.task {
            t.validate()?;
        }
        Ok(())
    }
}

/// Generator for one batch item, independent of every other item.
pub fn item_rng(seed: u64, step: usize, position: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(step as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(position as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Corpus indices for the 1-based `step`: consecutive slices of a fresh
/// permutation per epoch.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut perm_epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    (0..batch)
        .map(|i| {
            let p = (step - 1) * batch + i;
            let epoch = p / n;
            if epoch != perm_epoch {
                perm = (0..n).collect();
                perm.shuffle(&mut item_rng(seed, epoch, usize::MAX));
                perm_epoch = epoch;
            }
            perm[p % n]
        })
        .collect()
}

/// Encodes every document, stopping at the first failure.
pub fn encode_corpus<T: WordTokenizer>(docs: &[DocumentRecord], cfg: &ModelConfig, vocab: &T) -> Result<Vec<EncodedInput>> {
    docs.iter().map(|d| encode_document(d, cfg, vocab)).collect()
}

/// Sums per-item gradients over the batch of `step`, micro-batch by
/// micro-batch, in batch-position order.
fn batch_gradient<T>(
    run: &RunConfig,
    step: usize,
    n: usize,
    params: &ParamSet,
    mut item: impl FnMut(usize, usize, &mut Grads) -> Result<T>,
) -> Result<(Grads, Vec<T>)> {
    let indices = batch_indices(run.seed, step, run.batch_size, n);
    let micro = run.batch_size / run.accumulation;
    let mut total = params.zeros_like();
    let mut out = Vec::with_capacity(indices.len());
    for (c, chunk) in indices.chunks(micro).enumerate() {
        let mut g = params.zeros_like();
        for (i, &doc) in chunk.iter().enumerate() {
            out.push(item(c * micro + i, doc, &mut g)?);
        }
        total.add_assign(&g);
    }
    Ok((total, out))
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let k = items.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in items {
        m.l_mlm += b.l_mlm;
        m.l_mim += b.l_mim;
        m.l_wpa += b.l_wpa;
        m.n_mlm += b.n_mlm;
        m.n_mim += b.n_mim;
        m.n_wpa += b.n_wpa;
    }
    m.l_mlm /= k;
    m.l_mim /= k;
    m.l_wpa /= k;
    m.total = m.l_mlm + m.l_mim + m.l_wpa;
    m
}

/// Writes to a temporary name first so an interrupted save never replaces
/// a good checkpoint.
pub fn save_atomic(model: &Model, precision: Precision, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, Checkpoint::from_model(model, precision).to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn apply_update(run: &RunConfig, model: &mut Model, grads: &Grads, opt: &mut OptimizerState) -> Result<()> {
    adam_step(&mut model.params, grads, opt)?;
    if run.precision == Precision::F32 {
        model.params.round_to_f32();
    }
    model.params.check_finite()
}

struct Outputs {
    dir: Option<PathBuf>,
    log: Option<BufWriter<File>>,
    checkpoints: Vec<PathBuf>,
}

impl Outputs {
    fn open(run: &RunConfig, log_name: &str, header: &str) -> Result<Self> {
        let Some(dir) = run.out_dir.clone() else {
            return Ok(Self { dir: None, log: None, checkpoints: vec![] });
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(log_name);
        let mut log = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        writeln!(log, "{header}").map_err(|e| Error::io(&path, e))?;
        Ok(Self { dir: Some(dir), log: Some(log), checkpoints: vec![] })
    }

    fn line(&mut self, line: &str) -> Result<()> {
        if let Some(log) = &mut self.log {
            writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| Error::io(Path::new("loss log"), e))?;
        }
        Ok(())
    }

    fn checkpoint(&mut self, run: &RunConfig, model: &Model, step: usize, last: bool) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let periodic = run.checkpoint_every > 0 && step.is_multiple_of(run.checkpoint_every);
        if periodic {
            let p = dir.join(format!("step-{step:06}.ckpt"));
            save_atomic(model, run.precision, &p)?;
            self.checkpoints.push(p);
        }
        if last {
            let p = dir.join("final.ckpt");
            save_atomic(model, run.precision, &p)?;
            self.checkpoints.push(p);
        }
        Ok(())
    }
}

/// Loss per step and the checkpoints written.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainReport {
    pub log: Vec<LossBreakdown>,
    pub checkpoints: Vec<PathBuf>,
}

/// Pre-trains `model` on `data` with the enabled objectives. Each step
/// averages the per-document losses of one batch. A non-finite loss or
/// gradient aborts the run; checkpoints already written stay in place.
pub fn pretrain(
    run: &RunConfig,
    model: &mut Model,
    data: &[EncodedInput],
    mut observe: impl FnMut(usize, &LossBreakdown),
) -> Result<PretrainReport> {
    run.validate()?;
    if data.is_empty() {
        return Err(Error::Format("pre-training corpus is empty".into()));
    }
    let mut opt = OptimizerState::new(&model.params, run.optimizer.clone(), run.total_steps)?;
    let mut out = Outputs::open(run, "loss.tsv", "# step\tl_mlm\tl_mim\tl_wpa\ttotal\tn_mlm\tn_mim\tn_wpa")?;
    let mut log = Vec::with_capacity(run.total_steps);
    let (text_vocab, image_vocab) = (model.config.text_vocab, model.config.image_vocab);
    for step in 1..=run.total_steps {
        let (mut grads, items) = batch_gradient(run, step, data.len(), &model.params, |pos, doc, g| {
            let enc = &data[doc];
            let plan = build_plan(enc, &run.masking, text_vocab, image_vocab, &mut item_rng(run.seed, step, pos))?;
            loss_and_grad(model, enc, &plan, run.switches, g)
        })?;
        let loss = mean_breakdown(&items);
        out.line(&loss.log_line(step))?;
        observe(step, &loss);
        log.push(loss);
        if run.switches.any() {
            grads.scale(1.0 / run.batch_size as f64);
            apply_update(run, model, &grads, &mut opt)?;
        }
        out.checkpoint(run, model, step, step == run.total_steps)?;
    }
    if run.total_steps == 0 {
        out.checkpoint(run, model, 0, true)?;
    }
    Ok(PretrainReport { log, checkpoints: out.checkpoints })
}

/// Trains the task head (and encoder) on labelled documents; returns the
/// mean task loss per step. Documents without a usable label are skipped.
pub fn finetune(
    run: &RunConfig,
    model: &mut Model,
    docs: &[DocumentRecord],
    data: &[EncodedInput],
    mut observe: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    run.validate()?;
    if model.task.is_none() {
        return Err(Error::Config("fine-tuning needs a model with a task head".into()));
    }
    if docs.is_empty() || docs.len() != data.len() {
        return Err(Error::Format(format!("{} documents with {} encodings", docs.len(), data.len())));
    }
    let mut opt = OptimizerState::new(&model.params, run.optimizer.clone(), run.total_steps)?;
    let mut out = Outputs::open(run, "task_loss.tsv", "# step\tloss\tdocuments")?;
    let mut losses = Vec::with_capacity(run.total_steps);
    for step in 1..=run.total_steps {
        let (mut grads, items) =
            batch_gradient(run, step, data.len(), &model.params, |_, doc, g| task_loss(model, &data[doc], &docs[doc], Some(g)))?;
        let used: Vec<f64> = items.into_iter().flatten().collect();
        let loss = if used.is_empty() { 0.0 } else { used.iter().sum::<f64>() / used.len() as f64 };
        out.line(&format!("{step}\t{loss}\t{}", used.len()))?;
        observe(step, loss);
        losses.push(loss);
        if !used.is_empty() {
            grads.scale(1.0 / used.len() as f64);
            apply_update(run, model, &grads, &mut opt)?;
        }
        out.checkpoint(run, model, step, step == run.total_steps)?;
    }
    if run.total_steps == 0 {
        out.checkpoint(run, model, 0, true)?;
    }
    Ok(losses)
}

/// Predicts every document and scores against its gold labels with the
/// metric of the model's task.
pub fn evaluate(model: &Model, docs: &[DocumentRecord], data: &[EncodedInput], tags: &[String]) -> Result<(Vec<Prediction>, EvalReport)> {
    let kind = model.task.as_ref().ok_or_else(|| Error::Config("evaluation needs a model with a task head".into()))?.config.kind;
    let preds = docs.iter().zip(data).map(|(d, e)| predict(model, e, d, tags)).collect::<Result<Vec<_>>>()?;
    let golds = docs.iter().map(|d| gold(d, kind, tags)).collect::<Result<Vec<_>>>()?;
    let report = evaluate_dump(kind, &preds, &golds)?;
    Ok((preds, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::docmodel::{generate_document, GeneratorStyle, Vocabulary, ENTITY_TAGS};
    use crate::heads::TaskKind;

    fn tiny() -> ModelConfig {
        ModelConfig { layers: 1, hidden: 16, heads: 2, ffn_inner: 32, max_text_len: 16, image_height: 32, image_width: 32, text_vocab: 60, ..ModelConfig::desk() }
    }

    fn corpus(n: u64) -> (Vec<DocumentRecord>, Vec<EncodedInput>) {
        let docs: Vec<_> = (0..n).map(|s| generate_document(s, &GeneratorStyle::default())).collect();
        let vocab = Vocabulary::build(docs.iter().flat_map(|d| d.words.iter().map(String::as_str)), 60);
        let enc = encode_corpus(&docs, &tiny(), &vocab).unwrap();
        (docs, enc)
    }

    fn run(steps: usize) -> RunConfig {
        RunConfig {
            seed: 9,
            batch_size: 4,
            total_steps: steps,
            model: tiny(),
            optimizer: AdamConfig { peak_lr: 1e-3, warmup_frac: 0.1, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen: Vec<usize> = (1..=3).flat_map(|s| batch_indices(1, s, 4, 12)).collect();
        seen.sort();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
        assert_eq!(batch_indices(1, 2, 4, 12), batch_indices(1, 2, 4, 12));
        assert_ne!(batch_indices(1, 1, 12, 12), batch_indices(2, 1, 12, 12));
    }

    #[test]
    fn switches_off_leave_parameters() {
        let (_, data) = corpus(4);
        let mut model = Model::new(tiny(), None, 1).unwrap();
        let before = model.params.clone();
        let r = RunConfig { switches: ObjectiveSwitches::NONE, ..run(3) };
        let rep = pretrain(&r, &mut model, &data, |_, _| {}).unwrap();
        assert!(rep.log.iter().all(|l| l.total == 0.0));
        assert_eq!(model.params, before);
    }

    #[test]
    fn pretrain_is_deterministic_and_learns() {
        let (_, data) = corpus(4);
        let go = || {
            let mut model = Model::new(tiny(), None, 1).unwrap();
            pretrain(&run(6), &mut model, &data, |_, _| {}).unwrap().log
        };
        let a = go();
        assert_eq!(a, go());
        assert!(a.iter().all(|l| l.total.is_finite() && l.total == l.l_mlm + l.l_mim + l.l_wpa));
    }

    #[test]
    fn indivisible_accumulation_is_rejected() {
        let r = RunConfig { batch_size: 6, accumulation: 4, ..run(1) };
        assert!(matches!(r.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_step_finetune_matches_untrained_head() {
        let (docs, data) = corpus(4);
        let tags: Vec<String> = ENTITY_TAGS.iter().map(|s| s.to_string()).collect();
        let head = TaskHeadConfig::new(TaskKind::TokenLabel, tags.len());
        let mut model = Model::new(tiny(), Some(head.clone()), 3).unwrap();
        model.randomize_heads(0.3, 4);
        let untrained = evaluate(&model, &docs, &data, &tags).unwrap();
        let r = RunConfig { task: Some(head), ..run(0) };
        finetune(&r, &mut model, &docs, &data, |_, _| {}).unwrap();
        assert_eq!(evaluate(&model, &docs, &data, &tags).unwrap(), untrained);
    }

    #[test]
    fn finetune_needs_a_head() {
        let (docs, data) = corpus(2);
        let mut model = Model::new(tiny(), None, 1).unwrap();
        assert!(matches!(finetune(&run(1), &mut model, &docs, &data, |_, _| {}), Err(Error::Config(_))));
    }
}
