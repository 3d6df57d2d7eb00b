//! Finite-difference verification of the hand-derived gradients.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample;

use super::run::item_rng;
use crate::docmodel::{encode_document, generate_document, EncodedInput, GeneratorStyle, Vocabulary};
use crate::error::{Error, Result};
use crate::masking::{build_plan, MaskingConfig, MaskingPlan};
use crate::model::{Grads, Model, ModelConfig};
use crate::objectives::{loss_and_grad, total_loss, LossBreakdown, ObjectiveSwitches};

pub const FD_STEP: f64 = 1e-4;
/// Tensors at most this large are checked entry by entry; larger ones on
/// their entries with a non-zero analytic gradient plus a random sample.
const FULL_CHECK_LIMIT: usize = 1024;
const SAMPLED_EXTRA: usize = 32;
/// Small enough that no head softmax saturates, so every checked gradient
/// sits well above the rounding noise of the difference quotient.
const HEAD_STD: f64 = 0.1;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Parameter group used for reporting.
pub fn group_of(name: &str) -> &'static str {
    let part = |p: &str| name.split('.').any(|s| s == p);
    if name.starts_with("embeddings.") {
        "embeddings"
    } else if name.starts_with("patch.") {
        "patch-embedding"
    } else if name.starts_with("bias.") {
        "relative-bias"
    } else if name.starts_with("head.mlm") {
        "mlm-head"
    } else if name.starts_with("head.mim") {
        "mim-head"
    } else if name.starts_with("head.wpa") {
        "wpa-head"
    } else if part("attn") {
        "attention"
    } else if part("ln1") || part("ln2") {
        "layer-norm"
    } else if part("ffn") {
        "feed-forward"
    } else {
        "other"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub group: String,
    pub max_rel_err: f64,
    pub entries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub loss: LossBreakdown,
    pub groups: Vec<GroupResult>,
    /// |L(θ) − L(θ')| with an unused word-embedding row perturbed in θ'.
    pub dead_param_delta: Option<f64>,
    /// Max |∇(all objectives) − Σ ∇(each objective)|.
    pub linearity_err: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            writeln!(f, "{}\t{:e}\t{}", g.group, g.max_rel_err, g.entries)?;
        }
        match self.dead_param_delta {
            Some(d) => writeln!(f, "dead-parameter\t{d:e}")?,
            None => writeln!(f, "dead-parameter\tskipped")?,
        }
        write!(f, "linearity\t{:e}", self.linearity_err)
    }
}

/// A model with random heads, one document and a plan exercising all three
/// objectives, with both alignment classes present.
pub fn fixture(cfg: &ModelConfig, seed: u64) -> Result<(Model, EncodedInput, MaskingPlan)> {
    cfg.validate()?;
    let mut model = Model::new(cfg.clone(), None, seed)?;
    model.randomize_heads(HEAD_STD, seed ^ 0x5eed);
    let masking = MaskingConfig { min_block_patches: 1, ..Default::default() };
    let style = GeneratorStyle { max_segments: 4, max_words: 1, lexicon_size: 4, ..Default::default() };
    for attempt in 0..1000u64 {
        let doc = generate_document(seed.wrapping_add(attempt), &style);
        let vocab = Vocabulary::build(doc.words.iter().map(String::as_str), cfg.text_vocab);
        let enc = encode_document(&doc, cfg, &vocab)?;
        let plan = build_plan(&enc, &masking, cfg.text_vocab, cfg.image_vocab, &mut item_rng(seed, attempt as usize, 0))?;
        let aligned = plan.wpa_labels.values().filter(|&&a| a).count();
        if !plan.masked_text.is_empty() && !plan.masked_patches.is_empty() && aligned > 0 && aligned < plan.wpa_labels.len() {
            return Ok((model, enc, plan));
        }
    }
    Err(Error::Contract("no document yields a plan exercising every objective".into()))
}

fn analytic(model: &Model, enc: &EncodedInput, plan: &MaskingPlan, switches: ObjectiveSwitches) -> Result<(LossBreakdown, Grads)> {
    let mut g = model.params.zeros_like();
    let loss = loss_and_grad(model, enc, plan, switches, &mut g)?;
    Ok((loss, g))
}

/// Compares analytic gradients of the total loss (all objectives) against
/// central differences, and runs the dead-parameter and linearity checks.
pub fn gradcheck(cfg: &ModelConfig, seed: u64) -> Result<GradcheckReport> {
    let (mut model, enc, plan) = fixture(cfg, seed)?;
    let all = ObjectiveSwitches::ALL;
    let (loss, grads) = analytic(&model, &enc, &plan, all)?;
    let mut rng = item_rng(seed, usize::MAX, usize::MAX);
    let mut groups: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.param(id).name.clone();
        let g = grads.get(id).clone();
        let cols = g.ncols();
        let n = g.len();
        let entries: Vec<usize> = if n <= FULL_CHECK_LIMIT {
            (0..n).collect()
        } else {
            let mut e: Vec<usize> = (0..n).filter(|&i| g[[i / cols, i % cols]] != 0.0).collect();
            e.extend(sample(&mut rng, n, SAMPLED_EXTRA.min(n)));
            e.sort_unstable();
            e.dedup();
            e
        };
        let slot = groups.entry(group_of(&name)).or_insert((0.0, 0));
        for i in entries {
            let (r, c) = (i / cols, i % cols);
            let orig = model.params.get(id)[[r, c]];
            model.params.get_mut(id)[[r, c]] = orig + FD_STEP;
            let plus = total_loss(&model, &enc, &plan, all)?.total;
            model.params.get_mut(id)[[r, c]] = orig - FD_STEP;
            let minus = total_loss(&model, &enc, &plan, all)?.total;
            model.params.get_mut(id)[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            slot.0 = slot.0.max(relative_error(g[[r, c]], numeric));
            slot.1 += 1;
        }
    }

    let input: Vec<u32> = enc.token_ids.iter().enumerate().map(|(i, &t)| plan.input_token(i, t)).collect();
    let dead_param_delta = match (0..cfg.text_vocab as u32).find(|t| !input.contains(t)) {
        Some(row) => {
            let word = model.encoder.word;
            let saved = model.params.get(word).row(row as usize).to_owned();
            model.params.get_mut(word).row_mut(row as usize).mapv_inplace(|v| v + 1.0);
            let moved = total_loss(&model, &enc, &plan, all)?.total;
            model.params.get_mut(word).row_mut(row as usize).assign(&saved);
            Some((moved - loss.total).abs())
        }
        None => None,
    };

    let mut summed = model.params.zeros_like();
    for s in [ObjectiveSwitches::MLM, ObjectiveSwitches { mlm: false, mim: true, wpa: false }, ObjectiveSwitches { mlm: false, mim: false, wpa: true }] {
        summed.add_assign(&analytic(&model, &enc, &plan, s)?.1);
    }
    let linearity_err = grads.max_abs_diff(&summed);

    Ok(GradcheckReport {
        loss,
        groups: groups.into_iter().map(|(g, (e, n))| GroupResult { group: g.to_string(), max_rel_err: e, entries: n }).collect(),
        dead_param_delta,
        linearity_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 0.5), 0.5);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn groups() {
        assert_eq!(group_of("embeddings.word"), "embeddings");
        assert_eq!(group_of("layer.1.attn.wq"), "attention");
        assert_eq!(group_of("layer.0.ln2.gain"), "layer-norm");
        assert_eq!(group_of("layer.0.ffn.w1"), "feed-forward");
        assert_eq!(group_of("head.wpa.w1"), "wpa-head");
    }

    #[test]
    fn fixture_exercises_every_objective() {
        let (model, enc, plan) = fixture(&ModelConfig::gradcheck(), 1).unwrap();
        let l = total_loss(&model, &enc, &plan, ObjectiveSwitches::ALL).unwrap();
        assert!(l.n_mlm > 0 && l.n_mim > 0 && l.n_wpa > 0);
        assert_eq!(enc.num_patches(), 4);
    }
}
