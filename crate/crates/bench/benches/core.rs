use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use alam_core::nn::Precision;
use alam_core::policy::{build_attn_mask, DemoSet, InterventionKind, NetConfig, PolicyConfig, PolicyModel, PolicyRunner, ChunkSource};
use alam_core::pretrain::{AlamModel, ModelSpec, TrainBatch};
use alam_core::probes::OracleEncoder;
use alam_core::quantizer::{nearest, Codebook};
use alam_core::rng::rng_from;
use alam_core::synthworld::{generate_expert_episode, render_view, sample_reaching_start, View};
use alam_core::{DecoderConfig, EncoderConfig, QuantizerConfig, WorldConfig};

fn world() -> WorldConfig {
    WorldConfig { resolution: 32, ..Default::default() }
}

fn bench_render(c: &mut Criterion) {
    let wc = world();
    let s = sample_reaching_start(1, &wc);
    c.bench_function("render_global_32", |b| b.iter(|| render_view(black_box(&s), View::Global, 32, &wc)));
}

fn bench_quantize(c: &mut Criterion) {
    let q = QuantizerConfig::default();
    let book = Codebook::random(&q, 32, &mut rng_from(0)).unwrap();
    let z = vec![0.1; 32];
    c.bench_function("nearest_code_d32_m7", |b| b.iter(|| nearest(black_box(&z), &book.entries)));
}

fn bench_encoder_forward(c: &mut Criterion) {
    let wc = world();
    let spec = ModelSpec {
        resolution: 32,
        encoder: EncoderConfig { hidden: 64, layers: 2, heads: 4, queries: 4, latent_dim: 16, ..Default::default() },
        quantizer: QuantizerConfig::default(),
        decoder: DecoderConfig { hidden: 64, blocks: 2, ..Default::default() },
        precision: Precision::F32,
    };
    let model = AlamModel::new(&spec, 0).unwrap();
    let (traj, _) = generate_expert_episode(3, &wc).unwrap();
    let f = traj.frames(View::Global);
    let items: Vec<_> = (0..8).map(|i| [&f[0], &f[1 + i % 2], &f[3]]).collect();
    let batch = TrainBatch::from_triplets(&items, spec.encoder.patch_size, Precision::F32.dtype()).unwrap();
    c.bench_function("encoder_forward_b8_32px", |b| {
        b.iter(|| model.encoder.forward_raw(black_box(&batch.src), &batch.tgt).unwrap())
    });
}

fn bench_policy(c: &mut Criterion) {
    c.bench_function("attn_mask_h16", |b| b.iter(|| build_attn_mask(black_box(16), 4)));
    let wc = world();
    let demos = DemoSet::generate(&wc, 4, 8, 1, Some(&OracleEncoder)).unwrap();
    let cfg = PolicyConfig { net: NetConfig { hidden: 32, layers: 2, ..Default::default() }, ..Default::default() };
    let model = PolicyModel::new(&cfg, demos.latent_dim(), demos.latent_stats.clone(), 0).unwrap();
    let runner = PolicyRunner { model: &model, world: wc.clone(), intervention: InterventionKind::None };
    let states: Vec<_> = (0..8).map(|i| sample_reaching_start(i, &wc)).collect();
    let seeds: Vec<u64> = (0..8).collect();
    c.bench_function("policy_chunks_b8_k10", |b| b.iter(|| runner.chunks(black_box(&states), &seeds).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_render, bench_quantize, bench_encoder_forward, bench_policy
}
criterion_main!(benches);
