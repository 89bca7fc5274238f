use std::hint::black_box;
use std::time::{Duration, Instant};

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use duralign::data::{generate_corpus, Batch, SyntheticCorpusSpec};
use duralign::model::{Model, ModelConfig, Trainer};
use duralign::softdtw::{soft_dtw_value_and_grad, soft_dtw_with, SoftDtwConfig};
use duralign::{ExecPolicy, Tensor};

const POLICIES: [(&str, ExecPolicy); 2] = [
    ("sequential", ExecPolicy::Sequential),
    ("parallel", ExecPolicy::Parallel),
];

fn frames(rng: &mut ChaCha8Rng, t: usize, f: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![t, f], |_| rng.random_range(-1.0..1.0))
}

fn softdtw(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = frames(&mut rng, 2000, 80);
    let y = frames(&mut rng, 2000, 80);
    let cfg = SoftDtwConfig {
        band_half_width: 30,
        ..SoftDtwConfig::default()
    };

    // Budget: one banded evaluation at T=2000, F=80, width 60 within a second
    // on a single thread.
    let t0 = Instant::now();
    soft_dtw_with(&x, &y, &cfg, ExecPolicy::Sequential).unwrap();
    let el = t0.elapsed();
    assert!(el <= Duration::from_secs(1), "banded soft-dtw took {el:?}");

    let mut g = c.benchmark_group("softdtw_T2000_F80_w60");
    g.sample_size(20);
    for (name, exec) in POLICIES {
        g.bench_function(BenchmarkId::new("loss", name), |b| {
            b.iter(|| {
                soft_dtw_with(black_box(&x), black_box(&y), &cfg, exec)
                    .unwrap()
                    .0
            })
        });
        g.bench_function(BenchmarkId::new("loss_and_grad", name), |b| {
            b.iter(|| {
                soft_dtw_value_and_grad(black_box(&x), black_box(&y), &cfg, exec)
                    .unwrap()
                    .0
            })
        });
    }
    g.finish();
}

fn batch_gradients(c: &mut Criterion) {
    let corpus = generate_corpus(&SyntheticCorpusSpec::default()).unwrap();
    let batch = Batch::from_utterances(&corpus, &(0..8).collect::<Vec<_>>());
    let mut trainer = Trainer::<f32>::new(Model::new(ModelConfig::default()).unwrap()).unwrap();

    let mut g = c.benchmark_group("batch8_gradients");
    g.sample_size(20);
    for (name, exec) in POLICIES {
        trainer.exec = exec;
        g.bench_function(name, |b| {
            b.iter(|| trainer.compute_gradients(black_box(&batch), 1).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, softdtw, batch_gradients);
criterion_main!(benches);
