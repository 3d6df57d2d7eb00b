//! Optimizer, training and evaluation loops, and the gradient check.

pub mod gradcheck;
pub mod optim;
pub mod run;

pub use gradcheck::{gradcheck, GradcheckReport};
pub use optim::{adam_step, lr_at, AdamConfig, Decay, OptimizerState};
pub use run::{encode_corpus, evaluate, finetune, item_rng, pretrain, PretrainReport, RunConfig};
