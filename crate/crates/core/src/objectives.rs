//! The three pre-training losses over one shared forward pass.
//!
//! Each term is the mean over its contributing positions; multiply by the
//! counts in [`LossBreakdown`] to recover plain sums.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::docmodel::EncodedInput;
use crate::error::{Error, Result};
use crate::heads::cross_entropy;
use crate::masking::MaskingPlan;
use crate::model::ops::{gelu, gelu_grad, linear, linear_backward, sigmoid, softplus};
use crate::model::{ContextualOutput, Grads, Model};

/// Which terms enter the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveSwitches {
    pub mlm: bool,
    pub mim: bool,
    pub wpa: bool,
}

impl ObjectiveSwitches {
    pub const MLM: Self = Self { mlm: true, mim: false, wpa: false };
    pub const MLM_MIM: Self = Self { mlm: true, mim: true, wpa: false };
    pub const ALL: Self = Self { mlm: true, mim: true, wpa: true };
    pub const NONE: Self = Self { mlm: false, mim: false, wpa: false };

    pub fn any(&self) -> bool {
        self.mlm || self.mim || self.wpa
    }

    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.mlm, "MLM"), (self.mim, "MIM"), (self.wpa, "WPA")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for ObjectiveSwitches {
    fn default() -> Self {
        Self::ALL
    }
}

/// Per-term losses and contributing counts. Disabled terms are zero with a
/// zero count, so `total` is always the plain sum of the three.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mlm: f64,
    pub l_mim: f64,
    pub l_wpa: f64,
    pub total: f64,
    pub n_mlm: usize,
    pub n_mim: usize,
    pub n_wpa: usize,
}

impl LossBreakdown {
    fn from_terms(mlm: (f64, usize), mim: (f64, usize), wpa: (f64, usize)) -> Self {
        Self {
            l_mlm: mlm.0,
            l_mim: mim.0,
            l_wpa: wpa.0,
            total: mlm.0 + mim.0 + wpa.0,
            n_mlm: mlm.1,
            n_mim: mim.1,
            n_wpa: wpa.1,
        }
    }

    /// `step, l_mlm, l_mim, l_wpa, total, n_mlm, n_mim, n_wpa`, tab-separated,
    /// floats in shortest round-trip form.
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "{step}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.l_mlm, self.l_mim, self.l_wpa, self.total, self.n_mlm, self.n_mim, self.n_wpa
        )
    }

    pub fn parse_log_line(line: &str) -> Result<(usize, LossBreakdown)> {
        let f: Vec<&str> = line.trim_end().split('\t').collect();
        let bad = || Error::Format(format!("malformed loss log line {line:?}"));
        if f.len() != 8 {
            return Err(bad());
        }
        let fl = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        let us = |i: usize| f[i].parse::<usize>().map_err(|_| bad());
        Ok((
            us(0)?,
            LossBreakdown { l_mlm: fl(1)?, l_mim: fl(2)?, l_wpa: fl(3)?, total: fl(4)?, n_mlm: us(5)?, n_mim: us(6)?, n_wpa: us(7)? },
        ))
    }
}

/// Loss of one head, with the gradient it sends back into the encoder output.
struct TermEval {
    loss: f64,
    count: usize,
    rows: Vec<usize>,
    d_rows: Option<Array2<f64>>,
}

fn gather(ctx: &ContextualOutput, rows: &[usize]) -> Array2<f64> {
    ctx.hidden.select(Axis(0), rows)
}

fn mlm_term(model: &Model, ctx: &ContextualOutput, plan: &MaskingPlan, targets: &[u32], grads: Option<&mut Grads>) -> Result<TermEval> {
    let rows: Vec<usize> = plan.masked_text.iter().copied().collect();
    if rows.is_empty() {
        return Ok(TermEval { loss: 0.0, count: 0, rows, d_rows: None });
    }
    let vocab = model.config.text_vocab;
    let mut t = Vec::with_capacity(rows.len());
    for &r in &rows {
        if r >= ctx.text_len {
            return Err(Error::Contract(format!("masked text position {r} outside text range")));
        }
        let id = targets[r] as usize;
        if id >= vocab {
            return Err(Error::Lookup { id, size: vocab });
        }
        t.push(id);
    }
    let h = &model.pretrain;
    let x = gather(ctx, &rows);
    let ps = &model.params;
    let bias = ps.get(h.mlm_bias);
    let logits = match h.mlm_weight {
        Some(w) => linear(&x.view(), ps.get(w), bias),
        None => {
            let mut l = x.dot(&ps.get(model.encoder.word).t());
            l += bias;
            l
        }
    };
    let (loss, d_logits) = cross_entropy(&logits, &t);
    let d_rows = grads.map(|g| match h.mlm_weight {
        Some(w) => {
            let [gw, gb] = g.many_mut([w, h.mlm_bias]);
            linear_backward(&x.view(), ps.get(w), &d_logits, gw, gb)
        }
        None => {
            *g.get_mut(h.mlm_bias) += &d_logits.sum_axis(Axis(0)).insert_axis(Axis(0));
            *g.get_mut(model.encoder.word) += &d_logits.t().dot(&x);
            d_logits.dot(ps.get(model.encoder.word))
        }
    });
    Ok(TermEval { loss, count: rows.len(), rows, d_rows })
}

fn mim_term(model: &Model, ctx: &ContextualOutput, plan: &MaskingPlan, grads: Option<&mut Grads>) -> Result<TermEval> {
    let m = ctx.len() - ctx.text_len;
    let mut rows = Vec::with_capacity(plan.masked_patches.len());
    let mut t = Vec::with_capacity(rows.capacity());
    for &k in &plan.masked_patches {
        if k >= m {
            return Err(Error::Contract(format!("masked patch {k} outside {m} patches")));
        }
        let target = *plan
            .mim_targets
            .get(&k)
            .ok_or_else(|| Error::Contract(format!("masked patch {k} has no image-token target")))? as usize;
        if target >= model.config.image_vocab {
            return Err(Error::Lookup { id: target, size: model.config.image_vocab });
        }
        rows.push(ctx.patch_row(k));
        t.push(target);
    }
    if rows.is_empty() {
        return Ok(TermEval { loss: 0.0, count: 0, rows, d_rows: None });
    }
    let h = &model.pretrain;
    let ps = &model.params;
    let x = gather(ctx, &rows);
    let logits = linear(&x.view(), ps.get(h.mim_weight), ps.get(h.mim_bias));
    let (loss, d_logits) = cross_entropy(&logits, &t);
    let d_rows = grads.map(|g| {
        let [gw, gb] = g.many_mut([h.mim_weight, h.mim_bias]);
        linear_backward(&x.view(), ps.get(h.mim_weight), &d_logits, gw, gb)
    });
    Ok(TermEval { loss, count: rows.len(), rows, d_rows })
}

/// Mean binary cross-entropy of `logits` against 0/1 `labels`, and the
/// gradient with respect to the logits.
pub fn bce_with_logits(logits: &[f64], labels: &[bool]) -> (f64, Vec<f64>) {
    let n = logits.len();
    if n == 0 {
        return (0.0, vec![]);
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&z, &y) in logits.iter().zip(labels) {
        let y = if y { 1.0 } else { 0.0 };
        loss += softplus(z) - y * z;
        grad.push((sigmoid(z) - y) / n as f64);
    }
    (loss / n as f64, grad)
}

fn wpa_term(model: &Model, ctx: &ContextualOutput, plan: &MaskingPlan, grads: Option<&mut Grads>) -> Result<TermEval> {
    let rows: Vec<usize> = plan.wpa_labels.keys().copied().collect();
    if rows.is_empty() {
        return Ok(TermEval { loss: 0.0, count: 0, rows, d_rows: None });
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= ctx.text_len || plan.masked_text.contains(&r)) {
        return Err(Error::Contract(format!("alignment label on position {r}, which is masked or not text")));
    }
    let labels: Vec<bool> = plan.wpa_labels.values().copied().collect();
    let h = &model.pretrain;
    let ps = &model.params;
    let x = gather(ctx, &rows);
    let pre = linear(&x.view(), ps.get(h.wpa_w1), ps.get(h.wpa_b1));
    let act = pre.mapv(gelu);
    let logits = linear(&act.view(), ps.get(h.wpa_w2), ps.get(h.wpa_b2));
    let (loss, d) = bce_with_logits(logits.column(0).as_slice().unwrap_or(&logits.column(0).to_vec()), &labels);
    let d_rows = grads.map(|g| {
        let d_logits = Array2::from_shape_vec((d.len(), 1), d).expect("column");
        let [gw2, gb2] = g.many_mut([h.wpa_w2, h.wpa_b2]);
        let mut d_act = linear_backward(&act.view(), ps.get(h.wpa_w2), &d_logits, gw2, gb2);
        d_act.zip_mut_with(&pre, |v, &p| *v *= gelu_grad(p));
        let [gw1, gb1] = g.many_mut([h.wpa_w1, h.wpa_b1]);
        linear_backward(&x.view(), ps.get(h.wpa_w1), &d_act, gw1, gb1)
    });
    Ok(TermEval { loss, count: rows.len(), rows, d_rows })
}

/// Masked language modeling loss: mean cross-entropy at the masked text
/// positions against the original ids in `targets`.
pub fn mlm_loss(model: &Model, ctx: &ContextualOutput, plan: &MaskingPlan, targets: &[u32]) -> Result<f64> {
    Ok(mlm_term(model, ctx, plan, targets, None)?.loss)
}

/// Masked image modeling loss: mean cross-entropy at the masked patches
/// against their image-token targets.
pub fn mim_loss(model: &Model, ctx: &ContextualOutput, plan: &MaskingPlan) -> Result<f64> {
    Ok(mim_term(model, ctx, plan, None)?.loss)
}

/// Word-patch alignment loss: mean binary cross-entropy of the two-layer
/// head on the labelled word positions.
pub fn wpa_loss(model: &Model, ctx: &ContextualOutput, plan: &MaskingPlan) -> Result<f64> {
    Ok(wpa_term(model, ctx, plan, None)?.loss)
}

/// Masks stay on word tokens; with WPA on, labels cover exactly the
/// unmasked word positions.
fn check_plan(enc: &EncodedInput, plan: &MaskingPlan, wpa: bool) -> Result<()> {
    let expected = enc.word_positions().filter(|p| !plan.masked_text.contains(p));
    if wpa && !expected.eq(plan.wpa_labels.keys().copied()) {
        return Err(Error::Contract("alignment labels do not cover exactly the unmasked word tokens".into()));
    }
    if let Some(p) = plan.masked_text.iter().find(|p| !enc.word_positions().contains(p)) {
        return Err(Error::Contract(format!("masked text position {p} is not a word token")));
    }
    Ok(())
}

fn evaluate(model: &Model, enc: &EncodedInput, plan: &MaskingPlan, switches: ObjectiveSwitches, mut grads: Option<&mut Grads>) -> Result<LossBreakdown> {
    check_plan(enc, plan, switches.wpa)?;
    let (ctx, cache) = model.forward(enc, Some(plan))?;
    let mut terms = Vec::with_capacity(3);
    let empty = || TermEval { loss: 0.0, count: 0, rows: vec![], d_rows: None };
    terms.push(if switches.mlm { mlm_term(model, &ctx, plan, &enc.token_ids, grads.as_deref_mut())? } else { empty() });
    terms.push(if switches.mim { mim_term(model, &ctx, plan, grads.as_deref_mut())? } else { empty() });
    terms.push(if switches.wpa { wpa_term(model, &ctx, plan, grads.as_deref_mut())? } else { empty() });
    let out = LossBreakdown::from_terms(
        (terms[0].loss, terms[0].count),
        (terms[1].loss, terms[1].count),
        (terms[2].loss, terms[2].count),
    );
    if !out.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {out:?}")));
    }
    if let Some(g) = grads {
        let mut d_hidden = Array2::zeros(ctx.hidden.raw_dim());
        let mut any = false;
        for t in &terms {
            if let Some(d) = &t.d_rows {
                any = true;
                for (i, &r) in t.rows.iter().enumerate() {
                    let mut dst = d_hidden.row_mut(r);
                    dst += &d.row(i);
                }
            }
        }
        if any {
            model.backward(&cache, &d_hidden, g);
        }
    }
    Ok(out)
}

/// All enabled losses from a single forward pass.
pub fn total_loss(model: &Model, enc: &EncodedInput, plan: &MaskingPlan, switches: ObjectiveSwitches) -> Result<LossBreakdown> {
    evaluate(model, enc, plan, switches, None)
}

/// [`total_loss`] plus its gradient, accumulated into `grads`.
pub fn loss_and_grad(model: &Model, enc: &EncodedInput, plan: &MaskingPlan, switches: ObjectiveSwitches, grads: &mut Grads) -> Result<LossBreakdown> {
    evaluate(model, enc, plan, switches, Some(grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::docmodel::{encode_document, generate_document, GeneratorStyle, Vocabulary};
    use crate::masking::{build_plan, MaskingConfig};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn cfg() -> ModelConfig {
        ModelConfig { layers: 1, hidden: 16, heads: 2, ffn_inner: 32, max_text_len: 24, image_height: 32, image_width: 32, text_vocab: 50, ..ModelConfig::desk() }
    }

    fn setup(seed: u64, mcfg: &MaskingConfig) -> (Model, EncodedInput, MaskingPlan) {
        let doc = generate_document(seed, &GeneratorStyle::default());
        let v = Vocabulary::from_tokens(doc.words.clone());
        let c = cfg();
        let enc = encode_document(&doc, &c, &v).unwrap();
        let plan = build_plan(&enc, mcfg, c.text_vocab, c.image_vocab, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (Model::new(c, None, seed).unwrap(), enc, plan)
    }

    #[test]
    fn empty_plan() {
        let zero = MaskingConfig { text_ratio: 0.0, image_ratio: 0.0, ..Default::default() };
        let (model, enc, plan) = setup(1, &zero);
        let l = total_loss(&model, &enc, &plan, ObjectiveSwitches::ALL).unwrap();
        assert_eq!((l.l_mlm, l.l_mim), (0.0, 0.0));
        assert!((l.l_wpa - std::f64::consts::LN_2).abs() < 1e-12);
        let l = total_loss(&model, &enc, &plan, ObjectiveSwitches::MLM_MIM).unwrap();
        assert_eq!(l.total, 0.0);
        let empty = MaskingPlan::default();
        let none = total_loss(&model, &enc, &MaskingPlan { wpa_labels: BTreeMap::new(), ..empty }, ObjectiveSwitches::MLM_MIM).unwrap();
        assert_eq!(none.total, 0.0);
    }

    #[test]
    fn fresh_heads_are_uniform() {
        let (model, enc, plan) = setup(2, &MaskingConfig::default());
        let l = total_loss(&model, &enc, &plan, ObjectiveSwitches::ALL).unwrap();
        assert!(l.n_mlm > 0 && l.n_mim > 0 && l.n_wpa > 0);
        assert!((l.l_mlm - 50f64.ln()).abs() < 1e-12);
        assert!((l.l_mim - 512f64.ln()).abs() < 1e-12);
        assert!((l.l_wpa - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l.total - (l.l_mlm + l.l_mim + l.l_wpa)).abs() <= 1e-12);
    }

    #[test]
    fn saturated_logit_is_near_zero() {
        let logits = Array2::from_shape_fn((1, 5), |(_, j)| if j == 2 { 30.0 } else { 0.0 });
        assert!(cross_entropy(&logits, &[2]).0 < 1e-9);
    }

    #[test]
    fn ablation_changes_only_the_sum() {
        let (model, enc, plan) = setup(4, &MaskingConfig::default());
        let all = total_loss(&model, &enc, &plan, ObjectiveSwitches::ALL).unwrap();
        let two = total_loss(&model, &enc, &plan, ObjectiveSwitches::MLM_MIM).unwrap();
        assert_eq!(two.total, all.l_mlm + all.l_mim);
        assert_eq!((two.l_mlm, two.l_mim), (all.l_mlm, all.l_mim));
        assert_eq!(two.l_wpa, 0.0);
        assert_eq!(ObjectiveSwitches::ALL.label(), "MLM+MIM+WPA");
    }

    #[test]
    fn mim_positions_differ_only_by_target() {
        let (mut model, enc, mut plan) = setup(5, &MaskingConfig::default());
        model.randomize_heads(0.2, 1);
        // two masked patches share the mask embedding; give them different targets
        let ks: Vec<usize> = plan.masked_patches.iter().copied().take(2).collect();
        plan.mim_targets.insert(ks[0], 3);
        plan.mim_targets.insert(ks[1], 9);
        let ctx = model.encode(&enc, Some(&plan)).unwrap();
        let h = &model.pretrain;
        let per_pos = |row: usize, t: usize| {
            let x = ctx.hidden.select(Axis(0), &[row]);
            let logits = linear(&x.view(), model.params.get(h.mim_weight), model.params.get(h.mim_bias));
            cross_entropy(&logits, &[t]).0
        };
        let expected: f64 = plan.masked_patches.iter().map(|&k| per_pos(ctx.patch_row(k), plan.mim_targets[&k] as usize)).sum::<f64>()
            / plan.masked_patches.len() as f64;
        assert!((mim_loss(&model, &ctx, &plan).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn wpa_matches_direct_bce() {
        let (mut model, enc, plan) = setup(6, &MaskingConfig::default());
        model.randomize_heads(0.5, 3);
        let ctx = model.encode(&enc, Some(&plan)).unwrap();
        let h = &model.pretrain;
        let mut sum = 0.0;
        for (&pos, &aligned) in &plan.wpa_labels {
            let x = ctx.hidden.row(pos);
            let hid: Vec<f64> = (0..16)
                .map(|j| gelu(x.dot(&model.params.get(h.wpa_w1).column(j)) + model.params.get(h.wpa_b1)[[0, j]]))
                .collect();
            let z: f64 = hid.iter().zip(model.params.get(h.wpa_w2).column(0)).map(|(a, b)| a * b).sum::<f64>()
                + model.params.get(h.wpa_b2)[[0, 0]];
            let p = 1.0 / (1.0 + (-z).exp());
            sum += if aligned { -p.ln() } else { -(1.0 - p).ln() };
        }
        let direct = sum / plan.wpa_labels.len() as f64;
        assert!((wpa_loss(&model, &ctx, &plan).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn wpa_zero_logit_is_ln2_and_domain_is_checked() {
        let (model, enc, mut plan) = setup(7, &MaskingConfig::default());
        let ctx = model.encode(&enc, Some(&plan)).unwrap();
        assert!((wpa_loss(&model, &ctx, &plan).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        if let Some(&p) = plan.masked_text.iter().next() {
            plan.wpa_labels.insert(p, true);
            assert!(matches!(total_loss(&model, &enc, &plan, ObjectiveSwitches::ALL), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn mlm_rejects_bad_target() {
        let (model, enc, plan) = setup(8, &MaskingConfig::default());
        let ctx = model.encode(&enc, Some(&plan)).unwrap();
        let mut targets = enc.token_ids.clone();
        let p = *plan.masked_text.iter().next().unwrap();
        targets[p] = 10_000;
        assert!(matches!(mlm_loss(&model, &ctx, &plan, &targets), Err(Error::Lookup { .. })));
    }

    #[test]
    fn log_line_round_trips() {
        let l = LossBreakdown::from_terms((1.25, 3), (0.1 + 0.2, 4), (f64::MIN_POSITIVE, 5));
        let line = l.log_line(17);
        assert_eq!(line.split('\t').count(), 8);
        assert_eq!(LossBreakdown::parse_log_line(&line).unwrap(), (17, l));
    }
}
