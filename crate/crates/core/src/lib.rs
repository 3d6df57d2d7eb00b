//! Layout-aware multimodal document encoder with unified text and image
//! masking: geometry, documents, masking plans, the Transformer, its
//! pre-training objectives, task heads, metrics and the training driver.

pub mod docmodel;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod heads;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod objectives;

pub use docmodel::{DocumentRecord, EncodedInput, Vocabulary};
pub use error::{Error, ErrorClass, Result};
pub use geometry::{NormBox, PatchGrid, PixelBox};
pub use harness::RunConfig;
pub use masking::{MaskingConfig, MaskingPlan};
pub use metrics::EvalReport;
pub use model::{Model, ModelConfig, Precision};
pub use objectives::{LossBreakdown, ObjectiveSwitches};
