//! Fixtures shared by the benchmarks.

use layoutmask::docmodel::{encode_document, generate_document, GeneratorStyle, Vocabulary};
use layoutmask::{EncodedInput, Model, ModelConfig};

/// A model for `cfg` and one synthetic document encoded for it.
pub fn model_and_input(cfg: &ModelConfig, seed: u64) -> (Model, EncodedInput) {
    let doc = generate_document(seed, &GeneratorStyle::default());
    let vocab = Vocabulary::build(doc.words.iter().map(String::as_str), cfg.text_vocab);
    let enc = encode_document(&doc, cfg, &vocab).expect("synthetic documents encode");
    let model = Model::new(cfg.clone(), None, seed).expect("preset configs are valid");
    (model, enc)
}

/// The desk preset with `layers` layers.
pub fn desk_with_layers(layers: usize) -> ModelConfig {
    ModelConfig { layers, ..ModelConfig::desk() }
}
