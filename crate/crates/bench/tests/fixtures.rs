use layoutmask_bench::{desk_with_layers, model_and_input};

#[test]
fn fixture_matches_its_config() {
    let cfg = desk_with_layers(2);
    let (model, enc) = model_and_input(&cfg, 4);
    assert_eq!(model.config, cfg);
    assert!(enc.num_words() > 0);
    assert_eq!(model.encode(&enc, None).unwrap().hidden.nrows(), enc.text_len() + enc.num_patches());
}
