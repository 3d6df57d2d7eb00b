use criterion::{criterion_group, criterion_main, Criterion};
use layoutmask::geometry::make_patch_grid;
use layoutmask::harness::run::item_rng;
use layoutmask::masking::{build_plan, sample_image_blocks, sample_text_spans, MaskingConfig};
use layoutmask::ModelConfig;
use layoutmask_bench::model_and_input;

fn samplers(c: &mut Criterion) {
    let cfg = MaskingConfig::default();
    let grid = make_patch_grid(224, 224, 16).expect("14x14 grid");
    let mut step = 0;
    c.bench_function("text_spans/512", |b| {
        b.iter(|| {
            step += 1;
            sample_text_spans(512, &cfg, &mut item_rng(1, step, 0))
        })
    });
    c.bench_function("image_blocks/14x14", |b| {
        b.iter(|| {
            step += 1;
            sample_image_blocks(&grid, &cfg, &mut item_rng(2, step, 0)).expect("block mask")
        })
    });
}

fn plans(c: &mut Criterion) {
    let model_cfg = ModelConfig::desk();
    let (_, enc) = model_and_input(&model_cfg, 3);
    let cfg = MaskingConfig::default();
    let mut step = 0;
    c.bench_function("build_plan/desk", |b| {
        b.iter(|| {
            step += 1;
            build_plan(&enc, &cfg, model_cfg.text_vocab, model_cfg.image_vocab, &mut item_rng(3, step, 0)).expect("plan")
        })
    });
}

criterion_group!(benches, samplers, plans);
criterion_main!(benches);
