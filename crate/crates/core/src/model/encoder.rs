//! Forward and backward passes of the encoder.

use std::collections::BTreeSet;

use ndarray::{s, Array2, Axis};

use super::attention::stabilized_softmax_row;
use super::bias::BiasIndex;
use super::ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, LayerNormCache};
use super::{Grads, LayerLayout, Model};
use crate::docmodel::EncodedInput;
use crate::error::{Error, Result};
use crate::geometry::NormBox;
use crate::masking::MaskingPlan;

/// `(L + M) x D` contextual vectors: text positions first, then patches.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualOutput {
    pub hidden: Array2<f64>,
    pub text_len: usize,
}

impl ContextualOutput {
    pub fn len(&self) -> usize {
        self.hidden.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.nrows() == 0
    }

    /// Row of patch `m`.
    pub fn patch_row(&self, m: usize) -> usize {
        self.text_len + m
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LayerNormCache,
    normed_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn_out: Array2<f64>,
    ln2: LayerNormCache,
    normed_mid: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    text_ids: Vec<u32>,
    text_boxes: Vec<NormBox>,
    patch_inputs: Array2<f64>,
    masked_patches: Vec<bool>,
    bias_index: BiasIndex,
    layers: Vec<LayerCache>,
}

/// Patch bytes mapped to `[-1, 1]`.
fn patch_matrix(patches: &[Vec<u8>], width: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((patches.len(), width));
    for (m, p) in patches.iter().enumerate() {
        if p.len() != width {
            return Err(Error::Shape(format!("patch {m} has {} values, expected {width}", p.len())));
        }
        for (dst, &v) in out.row_mut(m).iter_mut().zip(p) {
            *dst = f64::from(v) / 127.5 - 1.0;
        }
    }
    Ok(out)
}

impl Model {
    fn check_box(b: &NormBox) -> Result<()> {
        let limit = crate::geometry::LAYOUT_SCALE;
        if b.x0 > b.x1 || b.y0 > b.y1 || b.x1 > limit || b.y1 > limit {
            return Err(Error::InvalidBox {
                x0: b.x0.into(),
                y0: b.y0.into(),
                x1: b.x1.into(),
                y1: b.y1.into(),
                width: limit.into(),
                height: limit.into(),
            });
        }
        Ok(())
    }

    /// Text embedding of explicit ids and boxes: word + 1D position + x(x0)
    /// + x(x1) + y(y0) + y(y1) + width + height.
    pub fn embed_text_ids(&self, ids: &[u32], boxes: &[NormBox]) -> Result<Array2<f64>> {
        let e = &self.encoder;
        let p = &self.params;
        let (word, pos) = (p.get(e.word), p.get(e.position));
        let (tx, ty, tw, th) = (p.get(e.x_axis), p.get(e.y_axis), p.get(e.width), p.get(e.height));
        if ids.len() != boxes.len() || ids.len() > pos.nrows() {
            return Err(Error::Shape(format!("{} ids, {} boxes, {} positions", ids.len(), boxes.len(), pos.nrows())));
        }
        let mut out = Array2::zeros((ids.len(), self.config.hidden));
        for (i, (&id, b)) in ids.iter().zip(boxes).enumerate() {
            if id as usize >= word.nrows() {
                return Err(Error::Lookup { id: id as usize, size: word.nrows() });
            }
            Self::check_box(b)?;
            let mut row = out.row_mut(i);
            row += &word.row(id as usize);
            row += &pos.row(i);
            row += &tx.row(b.x0 as usize);
            row += &tx.row(b.x1 as usize);
            row += &ty.row(b.y0 as usize);
            row += &ty.row(b.y1 as usize);
            row += &tw.row(b.width() as usize);
            row += &th.row(b.height() as usize);
        }
        Ok(out)
    }

    /// `L x D` text embeddings of an encoded input.
    pub fn embed_text(&self, enc: &EncodedInput) -> Result<Array2<f64>> {
        self.embed_text_ids(&enc.token_ids, &enc.token_boxes)
    }

    fn embed_patch_matrix(&self, inputs: &Array2<f64>, masked: &[bool]) -> Result<Array2<f64>> {
        let e = &self.encoder;
        let p = &self.params;
        let pos = p.get(e.patch_position);
        if inputs.nrows() != pos.nrows() {
            return Err(Error::Shape(format!("{} patches for {} patch positions", inputs.nrows(), pos.nrows())));
        }
        let mut out = linear(&inputs.view(), p.get(e.patch_projection), p.get(e.patch_bias));
        let mask_vec = p.get(e.mask_patch).row(0);
        for (m, &is_masked) in masked.iter().enumerate() {
            if is_masked {
                out.row_mut(m).assign(&mask_vec);
            }
        }
        out += pos;
        Ok(out)
    }

    /// `M x D` patch embeddings: shared linear projection of each flattened
    /// patch plus its 1D position embedding.
    pub fn embed_patches(&self, patch_pixels: &[Vec<u8>]) -> Result<Array2<f64>> {
        let inputs = patch_matrix(patch_pixels, self.config.patch_dim())?;
        self.embed_patch_matrix(&inputs, &vec![false; inputs.nrows()])
    }

    /// Per-head `(L+M) x (L+M)` additive attention bias for `enc`.
    pub fn attention_bias(&self, enc: &EncodedInput) -> Vec<Array2<f64>> {
        let e = &self.encoder;
        BiasIndex::new(enc, &self.config).bias(self.params.get(e.rel1d), self.params.get(e.rel2d_x), self.params.get(e.rel2d_y))
    }

    /// Contextual representations, applying the plan's corruption if any.
    pub fn encode(&self, enc: &EncodedInput, plan: Option<&MaskingPlan>) -> Result<ContextualOutput> {
        Ok(self.forward(enc, plan)?.0)
    }

    /// Forward pass keeping what [`Model::backward`] needs.
    pub fn forward(&self, enc: &EncodedInput, plan: Option<&MaskingPlan>) -> Result<(ContextualOutput, ForwardCache)> {
        let cfg = &self.config;
        let text_len = enc.text_len();
        if text_len != cfg.max_text_len || enc.num_patches() != cfg.num_patches() {
            return Err(Error::Shape(format!(
                "input has {text_len} tokens and {} patches, model expects {} and {}",
                enc.num_patches(),
                cfg.max_text_len,
                cfg.num_patches()
            )));
        }
        let text_ids: Vec<u32> = match plan {
            Some(p) => enc.token_ids.iter().enumerate().map(|(i, &t)| p.input_token(i, t)).collect(),
            None => enc.token_ids.clone(),
        };
        let masked_patches: Vec<bool> = match plan {
            Some(p) => (0..enc.num_patches()).map(|m| p.masked_patches.contains(&m)).collect(),
            None => vec![false; enc.num_patches()],
        };
        let patch_inputs = patch_matrix(&enc.patch_pixels, cfg.patch_dim())?;
        let text = self.embed_text_ids(&text_ids, &enc.token_boxes)?;
        let patches = self.embed_patch_matrix(&patch_inputs, &masked_patches)?;
        let mut x = ndarray::concatenate(Axis(0), &[text.view(), patches.view()]).expect("equal widths");

        let mut key_visible = enc.attention_flags.clone();
        key_visible.resize(text_len + enc.num_patches(), true);
        let bias_index = BiasIndex::new(enc, cfg);
        let e = &self.encoder;
        let bias = bias_index.bias(self.params.get(e.rel1d), self.params.get(e.rel2d_x), self.params.get(e.rel2d_y));

        let mut layers = Vec::with_capacity(e.layers.len());
        for lay in &e.layers {
            let (next, cache) = self.layer_forward(lay, &x, &bias, &key_visible);
            layers.push(cache);
            x = next;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("encoder produced non-finite activations".into()));
        }
        let cache = ForwardCache {
            text_ids,
            text_boxes: enc.token_boxes.clone(),
            patch_inputs,
            masked_patches,
            bias_index,
            layers,
        };
        Ok((ContextualOutput { hidden: x, text_len }, cache))
    }

    fn layer_forward(&self, lay: &LayerLayout, x: &Array2<f64>, bias: &[Array2<f64>], key_visible: &[bool]) -> (Array2<f64>, LayerCache) {
        let p = &self.params;
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let alpha = cfg.alpha;
        let shrink = alpha * (dh as f64).sqrt();

        let (normed_in, ln1) = layer_norm(x, p.get(lay.ln1_gain), p.get(lay.ln1_bias), cfg.layer_norm_eps);
        let q = linear(&normed_in.view(), p.get(lay.wq), p.get(lay.bq));
        let k = normed_in.dot(p.get(lay.wk));
        let v = linear(&normed_in.view(), p.get(lay.wv), p.get(lay.bv));
        let mut attn_out = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(cfg.heads);
        for (h, head_bias) in bias.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols).mapv(|t| t / shrink);
            let mut scores = qh.dot(&k.slice(cols).t());
            scores.scaled_add(1.0 / alpha, head_bias);
            for mut row in scores.rows_mut() {
                stabilized_softmax_row(row.as_slice_mut().expect("contiguous row"), alpha, Some(key_visible));
            }
            attn_out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let mut mid = linear(&attn_out.view(), p.get(lay.wo), p.get(lay.bo));
        mid += x;
        let (normed_mid, ln2) = layer_norm(&mid, p.get(lay.ln2_gain), p.get(lay.ln2_bias), cfg.layer_norm_eps);
        let pre_act = linear(&normed_mid.view(), p.get(lay.w1), p.get(lay.b1));
        let act = pre_act.mapv(gelu);
        let mut out = linear(&act.view(), p.get(lay.w2), p.get(lay.b2));
        out += &mid;
        (out, LayerCache { ln1, normed_in, q, k, v, probs, attn_out, ln2, normed_mid, pre_act, act })
    }

    fn layer_backward(&self, lay: &LayerLayout, c: &LayerCache, d_out: &Array2<f64>, bias_index: &BiasIndex, grads: &mut Grads) -> Array2<f64> {
        let p = &self.params;
        let e = &self.encoder;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        // feed-forward block
        let [gw2, gb2] = grads.many_mut([lay.w2, lay.b2]);
        let mut d_pre = linear_backward(&c.act.view(), p.get(lay.w2), d_out, gw2, gb2);
        d_pre.zip_mut_with(&c.pre_act, |g, &x| *g *= gelu_grad(x));
        let [gw1, gb1] = grads.many_mut([lay.w1, lay.b1]);
        let d_normed_mid = linear_backward(&c.normed_mid.view(), p.get(lay.w1), &d_pre, gw1, gb1);
        let [gg2, gbeta2] = grads.many_mut([lay.ln2_gain, lay.ln2_bias]);
        let mut d_mid = layer_norm_backward(&c.ln2, p.get(lay.ln2_gain), &d_normed_mid, gg2, gbeta2);
        d_mid += d_out;

        // attention block
        let [gwo, gbo] = grads.many_mut([lay.wo, lay.bo]);
        let d_attn = linear_backward(&c.attn_out.view(), p.get(lay.wo), &d_mid, gwo, gbo);
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, probs) in c.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let doh = d_attn.slice(cols);
            dv.slice_mut(cols).assign(&probs.t().dot(&doh));
            let mut dz = doh.dot(&c.v.slice(cols).t());
            for (mut row, prow) in dz.rows_mut().into_iter().zip(probs.rows()) {
                let dot: f64 = row.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                row.zip_mut_with(&prow, |g, &pr| *g = pr * (*g - dot));
            }
            // logits = q k^T / sqrt(dh) + bias
            let mut dqh = dz.dot(&c.k.slice(cols));
            dqh *= scale;
            dq.slice_mut(cols).assign(&dqh);
            let mut dkh = dz.t().dot(&c.q.slice(cols));
            dkh *= scale;
            dk.slice_mut(cols).assign(&dkh);
            let [g1, gx, gy] = grads.many_mut([e.rel1d, e.rel2d_x, e.rel2d_y]);
            bias_index.backward(h, &dz, g1, gx, gy);
        }
        let x = c.normed_in.view();
        let [gwq, gbq] = grads.many_mut([lay.wq, lay.bq]);
        let mut d_normed_in = linear_backward(&x, p.get(lay.wq), &dq, gwq, gbq);
        *grads.get_mut(lay.wk) += &x.t().dot(&dk);
        d_normed_in += &dk.dot(&p.get(lay.wk).t());
        let [gwv, gbv] = grads.many_mut([lay.wv, lay.bv]);
        d_normed_in += &linear_backward(&x, p.get(lay.wv), &dv, gwv, gbv);
        let [gg1, gbeta1] = grads.many_mut([lay.ln1_gain, lay.ln1_bias]);
        let mut d_in = layer_norm_backward(&c.ln1, p.get(lay.ln1_gain), &d_normed_in, gg1, gbeta1);
        d_in += &d_mid;
        d_in
    }

    /// Accumulates into `grads` the gradient of a scalar whose derivative
    /// with respect to the encoder output is `d_hidden`.
    pub fn backward(&self, cache: &ForwardCache, d_hidden: &Array2<f64>, grads: &mut Grads) {
        let e = &self.encoder;
        let mut d = d_hidden.clone();
        for (lay, c) in e.layers.iter().zip(&cache.layers).rev() {
            d = self.layer_backward(lay, c, &d, &cache.bias_index, grads);
        }
        let text_len = cache.text_ids.len();
        {
            let [gw, gp, gx, gy, gwd, ght] = grads.many_mut([e.word, e.position, e.x_axis, e.y_axis, e.width, e.height]);
            for (i, (&id, b)) in cache.text_ids.iter().zip(&cache.text_boxes).enumerate() {
                let row = d.row(i);
                let add = |t: &mut Array2<f64>, r: usize| {
                    let mut dst = t.row_mut(r);
                    dst += &row;
                };
                add(gw, id as usize);
                add(gp, i);
                add(gx, b.x0 as usize);
                add(gx, b.x1 as usize);
                add(gy, b.y0 as usize);
                add(gy, b.y1 as usize);
                add(gwd, b.width() as usize);
                add(ght, b.height() as usize);
            }
        }
        let d_patch = d.slice(s![text_len.., ..]);
        *grads.get_mut(e.patch_position) += &d_patch;
        let visible: Vec<usize> = (0..cache.masked_patches.len()).filter(|&m| !cache.masked_patches[m]).collect();
        let masked: BTreeSet<usize> = (0..cache.masked_patches.len()).filter(|&m| cache.masked_patches[m]).collect();
        {
            let mut gm = grads.get_mut(e.mask_patch).row_mut(0);
            for &m in &masked {
                gm += &d_patch.row(m);
            }
        }
        if !visible.is_empty() {
            let x = cache.patch_inputs.select(Axis(0), &visible);
            let dy = d_patch.select(Axis(0), &visible);
            let [gproj, gbias] = grads.many_mut([e.patch_projection, e.patch_bias]);
            *gproj += &x.t().dot(&dy);
            *gbias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
    }
}
