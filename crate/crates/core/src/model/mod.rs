//! The unified text+image Transformer encoder.
//!
//! Inputs are `L` layout-aware text embeddings followed by `M` linearly
//! projected patches. Every layer is pre-norm self-attention with a per-head
//! additive relative-position bias (1D index buckets plus 2D x/y center
//! buckets, tables shared across layers) followed by a GELU feed-forward
//! block. Gradients are hand-derived; see `encoder.rs`.

mod attention;
mod bias;
mod checkpoint;
mod config;
mod encoder;
pub mod ops;
mod params;

pub use attention::{stabilized_attention_scores, stabilized_softmax_row, AttentionRow};
pub use bias::{relative_bucket, BiasIndex};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Precision};
pub use config::ModelConfig;
pub use encoder::{ContextualOutput, ForwardCache};
pub use params::{Grads, Init, ParamId, ParamSet, Parameter};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::LAYOUT_SCALE;
use crate::heads::{TaskHeadConfig, TaskLayout};

/// Parameter handles of one Transformer layer. The key projection has no
/// bias: it would shift every score in a row equally and cancel in softmax.
#[derive(Debug, Clone)]
pub struct LayerLayout {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Parameter handles of the embeddings, bias tables and layers.
#[derive(Debug, Clone)]
pub struct EncoderLayout {
    pub word: ParamId,
    pub position: ParamId,
    pub x_axis: ParamId,
    pub y_axis: ParamId,
    pub width: ParamId,
    pub height: ParamId,
    pub patch_projection: ParamId,
    pub patch_bias: ParamId,
    pub patch_position: ParamId,
    pub mask_patch: ParamId,
    pub rel1d: ParamId,
    pub rel2d_x: ParamId,
    pub rel2d_y: ParamId,
    pub layers: Vec<LayerLayout>,
}

/// Parameter handles of the MLM, MIM and WPA heads.
#[derive(Debug, Clone)]
pub struct PretrainLayout {
    /// `None` when the MLM projection is tied to the word embeddings.
    pub mlm_weight: Option<ParamId>,
    pub mlm_bias: ParamId,
    pub mim_weight: ParamId,
    pub mim_bias: ParamId,
    pub wpa_w1: ParamId,
    pub wpa_b1: ParamId,
    pub wpa_w2: ParamId,
    pub wpa_b2: ParamId,
}

/// Configuration plus every learnable tensor.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub encoder: EncoderLayout,
    pub pretrain: PretrainLayout,
    pub task: Option<TaskLayout>,
}

impl Model {
    /// Fresh parameters. Weights are normal with `config.init_std`, layer
    /// norms start at identity, and every head's output projection starts
    /// at zero so fresh heads predict uniform distributions.
    pub fn new(config: ModelConfig, task: Option<TaskHeadConfig>, seed: u64) -> Result<Self> {
        config.validate()?;
        if let Some(t) = &task {
            t.validate()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::default();
        let c = &config;
        let d = c.hidden;
        let n = Init::Normal(c.init_std);
        let table = LAYOUT_SCALE as usize + 1;
        let rng = &mut rng;
        let encoder = EncoderLayout {
            word: ps.add("embeddings.word", c.text_vocab, d, n, true, rng),
            position: ps.add("embeddings.position", c.max_text_len, d, n, true, rng),
            x_axis: ps.add("embeddings.x", table, d, n, true, rng),
            y_axis: ps.add("embeddings.y", table, d, n, true, rng),
            width: ps.add("embeddings.width", table, d, n, true, rng),
            height: ps.add("embeddings.height", table, d, n, true, rng),
            patch_projection: ps.add("patch.projection", c.patch_dim(), d, n, true, rng),
            patch_bias: ps.add("patch.bias", 1, d, Init::Zeros, false, rng),
            patch_position: ps.add("patch.position", c.num_patches(), d, n, true, rng),
            mask_patch: ps.add("patch.mask", 1, d, n, false, rng),
            rel1d: ps.add("bias.rel1d", c.rel1d_buckets, c.heads, n, false, rng),
            rel2d_x: ps.add("bias.rel2d_x", c.rel2d_buckets, c.heads, n, false, rng),
            rel2d_y: ps.add("bias.rel2d_y", c.rel2d_buckets, c.heads, n, false, rng),
            layers: (0..c.layers)
                .map(|i| {
                    let mut add = |name: &str, r, k, init, decay| ps.add(&format!("layer.{i}.{name}"), r, k, init, decay, rng);
                    LayerLayout {
                        ln1_gain: add("ln1.gain", 1, d, Init::Ones, false),
                        ln1_bias: add("ln1.bias", 1, d, Init::Zeros, false),
                        wq: add("attn.wq", d, d, n, true),
                        bq: add("attn.bq", 1, d, Init::Zeros, false),
                        wk: add("attn.wk", d, d, n, true),
                        wv: add("attn.wv", d, d, n, true),
                        bv: add("attn.bv", 1, d, Init::Zeros, false),
                        wo: add("attn.wo", d, d, n, true),
                        bo: add("attn.bo", 1, d, Init::Zeros, false),
                        ln2_gain: add("ln2.gain", 1, d, Init::Ones, false),
                        ln2_bias: add("ln2.bias", 1, d, Init::Zeros, false),
                        w1: add("ffn.w1", d, c.ffn_inner, n, true),
                        b1: add("ffn.b1", 1, c.ffn_inner, Init::Zeros, false),
                        w2: add("ffn.w2", c.ffn_inner, d, n, true),
                        b2: add("ffn.b2", 1, d, Init::Zeros, false),
                    }
                })
                .collect(),
        };
        let pretrain = PretrainLayout {
            mlm_weight: (!c.tie_mlm_head).then(|| ps.add("head.mlm.weight", d, c.text_vocab, Init::Zeros, true, rng)),
            mlm_bias: ps.add("head.mlm.bias", 1, c.text_vocab, Init::Zeros, false, rng),
            mim_weight: ps.add("head.mim.weight", d, c.image_vocab, Init::Zeros, true, rng),
            mim_bias: ps.add("head.mim.bias", 1, c.image_vocab, Init::Zeros, false, rng),
            wpa_w1: ps.add("head.wpa.w1", d, d, n, true, rng),
            wpa_b1: ps.add("head.wpa.b1", 1, d, Init::Zeros, false, rng),
            wpa_w2: ps.add("head.wpa.w2", d, 1, Init::Zeros, true, rng),
            wpa_b2: ps.add("head.wpa.b2", 1, 1, Init::Zeros, false, rng),
        };
        let task = task.map(|t| TaskLayout::register(t, d, &mut ps, n, rng));
        Ok(Self { config, params: ps, encoder, pretrain, task })
    }

    /// Randomizes the head output projections that [`Model::new`] zeroes.
    pub fn randomize_heads(&mut self, std: f64, seed: u64) {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("finite std");
        let ids: Vec<ParamId> = self
            .params
            .ids()
            .filter(|&id| self.params.param(id).name.starts_with("head.") || self.params.param(id).name.starts_with("task."))
            .collect();
        for id in ids {
            self.params.get_mut(id).mapv_inplace(|_| dist.sample(&mut rng));
        }
    }
}
