use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{check_gradients, GradCheckOptions};
use crate::softdtw::{soft_dtw_value_and_grad, SoftDtwConfig};
use crate::ExecPolicy;

fn t1(v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![v.len()], v.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn zero_mlps(up: &UpsamplerParams, store: &mut ParameterStore<f64>) {
    for name in up.mlp_params() {
        let shape = store.value(name).unwrap().shape().to_vec();
        store.set_value(name, Tensor::zeros(shape)).unwrap();
    }
}

/// Upsampler parameters plus `d` and `V` registered as trainable entries so
/// finite differences can perturb them.
fn setup(seed: u64, k: usize, m: usize) -> (UpsamplerParams, ParameterStore<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let up = UpsamplerParams::new(m, NormKind::Batch, 0.99);
    let mut store = ParameterStore::new();
    up.init(&mut store, &mut rng).unwrap();
    let d = Tensor::from_fn(vec![k], |_| rng.random_range(0.8..3.0));
    store.insert("d", d).unwrap();
    store.insert("v", random(&mut rng, &[k, m])).unwrap();
    (up, store)
}

#[test]
fn boundaries_examples() {
    let (s, e) = token_boundaries(&t1(&[2.0, 3.0, 1.0])).unwrap();
    assert_eq!(s.data(), &[0.0, 2.0, 5.0]);
    assert_eq!(e.data(), &[2.0, 5.0, 6.0]);
    let (s, e) = token_boundaries(&t1(&[1.5])).unwrap();
    assert_eq!((s.data(), e.data()), (&[0.0][..], &[1.5][..]));
    let (s, e) = token_boundaries(&t1(&[0.0, 4.0])).unwrap();
    assert_eq!((s.data(), e.data()), (&[0.0, 0.0][..], &[0.0, 4.0][..]));
}

#[test]
fn grids_example_and_reconstruction() {
    let (gs, ge) = boundary_grids(&t1(&[0.0]), &t1(&[3.0]), 3).unwrap();
    assert_eq!(gs.data(), &[0.0, 1.0, 2.0]);
    assert_eq!(ge.data(), &[3.0, 2.0, 1.0]);

    let d = t1(&[1.25, 0.0, 3.5, 2.0]);
    let (s, e) = token_boundaries(&d).unwrap();
    let (gs, ge) = boundary_grids(&s, &e, 7).unwrap();
    for t in 0..7 {
        for k in 0..4 {
            assert_eq!(gs.at2(t, k) + ge.at2(t, k), d.data()[k]);
        }
    }
}

#[test]
fn grids_gradient_through_boundaries() {
    let mut store = ParameterStore::new();
    store.insert("d", t1(&[1.3, 2.1, 0.7])).unwrap();
    let coeffs = Tensor::from_fn(vec![5, 3], |i| (i as f64 * 0.37).sin());
    let report = check_gradients(
        &store,
        |g, st| {
            let d = g.param(st, "d")?;
            let s = g.exclusive_cumsum(d)?;
            let e = g.add(s, d)?;
            let gs = g.frame_offset(s, 5, false)?;
            let ge = g.frame_offset(e, 5, true)?;
            let c = g.input(coeffs.clone());
            let a = g.mul(gs, c)?;
            let b = g.mul(ge, gs)?;
            let sum = g.add(a, b)?;
            Ok(g.sum(sum))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(1e-6), "{}", report.table());
}

#[test]
fn duration_loss_examples() {
    assert_eq!(duration_loss(&t1(&[2.0, 3.0, 5.0]), 10).unwrap(), 0.0);
    assert_eq!(duration_loss(&t1(&[2.0, 2.0]), 10).unwrap(), 3.0);
    assert!(matches!(duration_loss(&t1(&[]), 10), Err(Error::Empty(_))));
}

#[test]
fn duration_loss_gradient_sign() {
    for (d, frames, expect) in [
        (vec![2.0, 2.0], 10, -0.5),
        (vec![6.0, 6.0, 6.0], 10, 1.0 / 3.0),
        (vec![4.0, 6.0], 10, 0.0),
    ] {
        let mut g = Graph::new();
        let dv = g.input(t1(&d));
        let l = duration_loss_node(&mut g, dv, frames).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(dv).unwrap().data().iter().all(|&x| x == expect));
    }
}

#[test]
fn frame_count_examples() {
    assert_eq!(inferred_frame_count(&t1(&[2.4, 3.1])), 6);
    assert_eq!(inferred_frame_count(&t1(&[0.1])), 1);
    assert_eq!(inferred_frame_count(&t1(&[0.0, 0.0])), 1);
    let d = t1(&[10.0, 10.0, 10.0]).map(|x| 0.75 * x);
    assert_eq!(inferred_frame_count(&d), 23);
}

#[test]
fn zero_projection_gives_ln2_durations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dp = DurationPredictor::new(5, 2, 3).unwrap();
    let mut store = ParameterStore::<f64>::new();
    dp.init(&mut store, &mut rng).unwrap();
    store
        .set_value(&dp.proj.weight, Tensor::zeros(vec![5, 1]))
        .unwrap();
    let h = random(&mut rng, &[4, 5]);
    let z = random(&mut rng, &[4, 2]);
    let seq = predict_durations(&dp, &store, &h, &z).unwrap();
    assert_eq!(seq.v.shape(), &[4, 5]);
    for &x in seq.d.data() {
        assert!((x - 2f64.ln()).abs() < 1e-15);
    }
}

#[test]
fn predictor_rejects_empty() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dp = DurationPredictor::new(3, 1, 3).unwrap();
    let mut store = ParameterStore::<f64>::new();
    dp.init(&mut store, &mut rng).unwrap();
    let r = predict_durations(
        &dp,
        &store,
        &Tensor::zeros(vec![0, 3]),
        &Tensor::zeros(vec![0, 1]),
    );
    assert!(r.is_err());
}

#[test]
fn durations_differentiable_wrt_encoder_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dp = DurationPredictor::new(4, 2, 3).unwrap();
    let mut store = ParameterStore::<f64>::new();
    dp.init(&mut store, &mut rng).unwrap();
    store.insert("h", random(&mut rng, &[5, 4])).unwrap();
    let z = random(&mut rng, &[5, 2]);
    let coeffs = random(&mut rng, &[5]);
    let report = check_gradients(
        &store,
        |g, st| {
            let h = g.param(st, "h")?;
            let zv = g.input(z.clone());
            let (_, d) = dp.forward(g, st, h, zv)?;
            let c = g.input(coeffs.clone());
            let p = g.mul(d, c)?;
            Ok(g.sum(p))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(1e-4), "{}", report.table());
}

#[test]
fn width_one_predictor_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dp = DurationPredictor::new(4, 2, 1).unwrap();
    let mut store = ParameterStore::<f64>::new();
    dp.init(&mut store, &mut rng).unwrap();
    let h = random(&mut rng, &[5, 4]);
    let z = random(&mut rng, &[5, 2]);
    let perm = [3, 0, 4, 1, 2];
    let permute = |t: &Tensor<f64>| {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| t.row(p).to_vec()).collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let base = predict_durations(&dp, &store, &h, &z).unwrap();
    let moved = predict_durations(&dp, &store, &permute(&h), &permute(&z)).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(moved.d.data()[i], base.d.data()[p]);
    }
}

#[test]
fn layer_shapes_are_fixed() {
    let up = UpsamplerParams::new(6, NormKind::Batch, 0.99);
    let mut store = ParameterStore::<f64>::new();
    up.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert_eq!(
        store.value("upsampler.conv.weight").unwrap().shape(),
        &[3, 6, 8]
    );
    assert_eq!(
        store.value("upsampler.w_mlp.0.weight").unwrap().shape(),
        &[10, 16]
    );
    assert_eq!(
        store.value("upsampler.w_mlp.2.weight").unwrap().shape(),
        &[16, 1]
    );
    assert_eq!(
        store.value("upsampler.c_mlp.1.weight").unwrap().shape(),
        &[2, 2]
    );
    assert_eq!(
        store.value("upsampler.context_proj").unwrap().shape(),
        &[2, 6]
    );
}

#[test]
fn zero_mlps_give_uniform_attention_and_zero_context() {
    let (up, mut store) = setup(6, 4, 3);
    zero_mlps(&up, &mut store);
    let seq = TokenSequence::new(
        store.value("v").unwrap().clone(),
        store.value("d").unwrap().clone(),
    )
    .unwrap();
    let b = up.align(&store, &seq, 7, Mode::Train).unwrap();
    assert!(b.w.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    assert_eq!(b.c.shape(), &[7, 4, 2]);
    assert!(b.c.data().iter().all(|&x| x == 0.0));
}

#[test]
fn standalone_ops_match_bundle() {
    let (up, store) = setup(7, 3, 4);
    let seq = TokenSequence::new(
        store.value("v").unwrap().clone(),
        store.value("d").unwrap().clone(),
    )
    .unwrap();
    let b = up.align(&store, &seq, 6, Mode::Train).unwrap();
    let w = up
        .attention_weights(&store, &b.grid_s, &b.grid_e, &seq.v, Mode::Train)
        .unwrap();
    let c = up
        .aux_context(&store, &b.grid_s, &b.grid_e, &seq.v, Mode::Train)
        .unwrap();
    assert_eq!(w, b.w);
    assert_eq!(c, b.c);
    let o = upsample(&b.w, &seq.v, &b.c, &b.a).unwrap();
    assert_eq!(o, b.o);
    for k in 0..3 {
        assert_eq!(b.e.data()[k], b.s.data()[k] + seq.d.data()[k]);
    }
}

#[test]
fn attention_rows_are_stochastic() {
    for seed in 0..10 {
        let (up, store) = setup(100 + seed, 2 + seed as usize % 5, 3);
        let seq = TokenSequence::new(
            store.value("v").unwrap().clone(),
            store.value("d").unwrap().clone(),
        )
        .unwrap();
        let b = up.align(&store, &seq, 9, Mode::Train).unwrap();
        let (_, k) = b.w.dims2("test").unwrap();
        for t in 0..9 {
            let row = &b.w.data()[t * k..(t + 1) * k];
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

fn loss_through<F>(
    up: &UpsamplerParams,
    frames: usize,
    select: F,
) -> impl Fn(&mut Graph<f64>, &ParameterStore<f64>) -> crate::Result<Var> + '_
where
    F: Fn(&UpsampleNodes<f64>) -> Var + 'static,
{
    move |g, st| {
        let d = g.param(st, "d")?;
        let v = g.param(st, "v")?;
        let n = up.forward(g, st, v, d, frames, Mode::Train)?;
        let x = select(&n);
        let shape = g.value(x).shape().to_vec();
        let c = g.input(Tensor::from_fn(shape, |i| ((i * 7 + 3) as f64).sin()));
        let p = g.mul(x, c)?;
        Ok(g.sum(p))
    }
}

#[test]
fn attention_gradient_wrt_durations() {
    let (up, store) = setup(8, 3, 3);
    let report = check_gradients(
        &store,
        loss_through(&up, 7, |n| n.w),
        &GradCheckOptions::default(),
    )
    .unwrap();
    let d = report.params.iter().find(|p| p.name == "d").unwrap();
    assert!(d.max_rel_err <= 1e-4, "{}", report.table());
}

#[test]
fn context_gradient_wrt_tokens() {
    let (up, store) = setup(9, 4, 3);
    let report = check_gradients(
        &store,
        loss_through(&up, 6, |n| n.c),
        &GradCheckOptions::default(),
    )
    .unwrap();
    let v = report.params.iter().find(|p| p.name == "v").unwrap();
    assert!(v.max_rel_err <= 1e-4, "{}", report.table());
}

#[test]
fn full_upsampling_path_gradient() {
    for (seed, k, frames) in [(10, 3, 7), (11, 5, 12), (12, 2, 4)] {
        let (up, store) = setup(seed, k, 4);
        let report = check_gradients(
            &store,
            loss_through(&up, frames, |n| n.o),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(1e-4), "{}", report.table());
    }
}

#[test]
fn upsample_identity_and_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let v = random(&mut rng, &[4, 3]);
    let a = random(&mut rng, &[2, 3]);
    let c = Tensor::zeros(vec![4, 4, 2]);
    let eye = Tensor::from_fn(vec![4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    assert_eq!(upsample(&eye, &v, &c, &a).unwrap(), v);

    let uni = Tensor::full(vec![5, 4], 0.25);
    let o = upsample(&uni, &v, &Tensor::zeros(vec![5, 4, 2]), &a).unwrap();
    for t in 0..5 {
        for m in 0..3 {
            let mean = (0..4).map(|k| v.at2(k, m)).sum::<f64>() / 4.0;
            assert!((o.at2(t, m) - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn upsample_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (t, k, m, p) = (6, 4, 5, 2);
    let w = random(&mut rng, &[t, k]);
    let v = random(&mut rng, &[k, m]);
    let c = random(&mut rng, &[t, k, p]);
    let a = random(&mut rng, &[p, m]);
    let o = upsample(&w, &v, &c, &a).unwrap();
    for ti in 0..t {
        for mi in 0..m {
            let mut want = 0.0;
            for ki in 0..k {
                want += w.at2(ti, ki) * v.at2(ki, mi);
                for pi in 0..p {
                    want += w.at2(ti, ki) * c.data()[(ti * k + ki) * p + pi] * a.at2(pi, mi);
                }
            }
            assert!((o.at2(ti, mi) - want).abs() <= 1e-10);
        }
    }
}

#[test]
fn upsample_shape_mismatch() {
    let w = Tensor::<f64>::zeros(vec![3, 2]);
    let v = Tensor::zeros(vec![2, 4]);
    let a = Tensor::zeros(vec![2, 4]);
    assert!(upsample(&w, &v, &Tensor::zeros(vec![3, 3, 2]), &a).is_err());
    assert!(upsample(
        &w,
        &Tensor::zeros(vec![3, 4]),
        &Tensor::zeros(vec![3, 2, 2]),
        &a
    )
    .is_err());
}

#[test]
fn indicator_attention_is_length_regulator() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let k = rng.random_range(1..7);
        let durs: Vec<usize> = (0..k).map(|_| rng.random_range(0..5)).collect();
        if durs.iter().sum::<usize>() == 0 {
            continue;
        }
        let v = random(&mut rng, &[k, 3]);
        let w = indicator_attention(&durs);
        let t = w.shape()[0];
        let c = Tensor::zeros(vec![t, k, 2]);
        let a = random(&mut rng, &[2, 3]);
        assert_eq!(
            upsample(&w, &v, &c, &a).unwrap(),
            length_regulator(&v, &durs).unwrap()
        );
    }
}

#[test]
fn soft_dtw_through_upsampler_reaches_durations() {
    let (up, mut store) = setup(16, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    store
        .insert("head.weight", random(&mut rng, &[4, 2]))
        .unwrap();
    let target = random(&mut rng, &[6, 2]);
    let cfg = SoftDtwConfig {
        gamma: 0.5,
        warp: 1.0,
        ..SoftDtwConfig::default()
    };
    let build = |g: &mut Graph<f64>, st: &ParameterStore<f64>| {
        let d = g.param(st, "d")?;
        let v = g.param(st, "v")?;
        let n = up.forward(g, st, v, d, 6, Mode::Train)?;
        let w = g.param(st, "head.weight")?;
        let pred = g.matmul(n.o, w)?;
        let (val, grad) =
            soft_dtw_value_and_grad(&target, g.value(pred), &cfg, ExecPolicy::Sequential)?;
        g.scalar_with_grad(pred, val, grad)
    };
    let report = check_gradients(
        &store,
        build,
        &GradCheckOptions {
            step: 1e-5,
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.passed(1e-4), "{}", report.table());

    let mut g = Graph::new();
    let root = build(&mut g, &store).unwrap();
    let grads = g.backward(root).unwrap();
    let gd = &g
        .param_grads(&grads)
        .into_iter()
        .find(|(n, _)| n == "d")
        .unwrap()
        .1;
    assert!(gd.data().iter().all(|&x| x != 0.0));
}

#[test]
fn token_sequence_validation() {
    assert!(TokenSequence::new(Tensor::<f64>::zeros(vec![2, 3]), t1(&[1.0, -0.5])).is_err());
    assert!(TokenSequence::new(Tensor::<f64>::zeros(vec![2, 3]), t1(&[1.0])).is_err());
    assert!(TokenSequence::new(Tensor::<f64>::zeros(vec![0, 3]), t1(&[])).is_err());
}
