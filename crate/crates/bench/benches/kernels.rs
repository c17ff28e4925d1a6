use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use grucnn_bench::random_tensor;
use grucnn_core::cells::{gru_conv_step, CellKind};
use grucnn_core::data::{make_batch, preprocess_corpus, synth_toyset, SnrChoice, SnrLevel};
use grucnn_core::train::{build_model, ModelSpec, TrainConfig, Trainer};
use grucnn_core::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for &(ci, co, s) in &[(3usize, 24usize, 16usize), (24, 48, 8)] {
        let x = random_tensor(&[32, ci, s, s], 1);
        let k = random_tensor(&[co, ci, 3, 3], 2);
        let b = random_tensor(&[co], 3);
        group.bench_function(BenchmarkId::new("forward_backward", format!("{ci}x{co}@{s}")), |bench| {
            bench.iter(|| {
                let mut g = Graph::<f32>::new();
                let (x, k, b) = (g.input(x.clone()), g.param(k.clone()), g.param(b.clone()));
                let y = g.conv2d(x, k, Some(b)).unwrap();
                let l = g.sum(y);
                g.backward(l).unwrap();
            })
        });
    }
    group.finish();
}

fn gru_step(c: &mut Criterion) {
    let shapes = CellKind::GruConv.param_shapes(8, 8);
    let params: Vec<_> = shapes.iter().enumerate().map(|(i, (_, s, _))| random_tensor(s, 10 + i as u64)).collect();
    let x = random_tensor(&[32, 8, 16, 16], 4);
    let h = random_tensor(&[32, 8, 16, 16], 5);
    c.bench_function("gru_conv_step_8ch_16x16", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let p: Vec<_> = params.iter().map(|t| g.param(t.clone())).collect();
            let (xv, hv) = (g.input(x.clone()), g.input(h.clone()));
            let out = gru_conv_step(&mut g, xv, hv, &p).unwrap();
            let l = g.sum(out);
            g.backward(l).unwrap();
        })
    });
}

fn train_step(c: &mut Criterion) {
    let raw = synth_toyset(4, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let corpus = preprocess_corpus(&raw).unwrap().0;
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for name in ["ccnn", "grucnn"] {
        let spec = ModelSpec::builtin(name, 16, 0.25).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            frames: 8,
            epochs: 1_000_000,
            ..TrainConfig::default()
        };
        let model = build_model::<f32, _>(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut trainer = Trainer::new(model, cfg, 3).unwrap();
        group.bench_function(BenchmarkId::new("b8_t8", name), |bench| bench.iter(|| trainer.step(&corpus).unwrap()));
        let idx: Vec<usize> = (0..8).collect();
        let batch = make_batch::<f32>(&corpus, &idx, 8, SnrChoice::Fixed(SnrLevel::whole(1)), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        group.bench_function(BenchmarkId::new("eval_b8_t8", name), |bench| {
            bench.iter(|| trainer.model.forward_sequence(&batch, false, &mut rng).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv2d, gru_step, train_step);
criterion_main!(benches);
