use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `v` to a scalar through a fixed random projection so that every
/// output element contributes a distinct weight.
fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(v));
    let w = g.input(w);
    let p = g.hadamard(v, w)?;
    Ok(g.sum(p))
}

fn conv_ref(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let (bn, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = k.shape()[0];
    let mut out = vec![0.0; bn * co * h * w];
    for n in 0..bn {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((n * ci + c) * h + sy as usize) * w + sx as usize]
                                    * k.data()[((o * ci + c) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    out[((n * co + o) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_all_ones_kernel_on_2x2() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64([1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap());
    let k = g.input(Tensor::ones([1, 1, 3, 3]));
    let b = g.input(Tensor::zeros([1]));
    let y = g.conv2d(x, k, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[10., 10., 10., 10.]);
    // brute-force oracle agrees
    let want = conv_ref(g.value(x), g.value(k), &[0.0]);
    assert_eq!(g.value(y).data(), want.as_slice());
}

#[test]
fn conv_identity_kernel_and_bias_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xt = rand_tensor(&mut rng, &[2, 3, 4, 5]);
    let mut kd = vec![0.0; 3 * 3 * 9];
    for c in 0..3 {
        kd[(c * 3 + c) * 9 + 4] = 1.0;
    }
    let mut g = Graph::<f64>::new();
    let x = g.input(xt.clone());
    let k = g.input(Tensor::from_vec([3, 3, 3, 3], kd).unwrap());
    let y = g.conv2d(x, k, None).unwrap();
    assert_eq!(g.value(y).data(), xt.data());

    let z = g.input(Tensor::zeros([2, 3, 4, 5]));
    let k2 = g.input(rand_tensor(&mut rng, &[2, 3, 3, 3]));
    let b = g.input(Tensor::from_f64([2], &[0.5, -2.0]).unwrap());
    let y = g.conv2d(z, k2, Some(b)).unwrap();
    for (i, v) in g.value(y).data().iter().enumerate() {
        let c = (i / 20) % 2;
        assert_eq!(*v, [0.5, -2.0][c]);
    }
}

#[test]
fn conv_random_matches_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let (b, ci, co) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let xt = rand_tensor(&mut rng, &[b, ci, h, w]);
        let kt = rand_tensor(&mut rng, &[co, ci, 3, 3]);
        let bt = rand_tensor(&mut rng, &[co]);
        let mut g = Graph::<f64>::new();
        let (x, k, bb) = (g.input(xt.clone()), g.input(kt.clone()), g.input(bt.clone()));
        let y = g.conv2d(x, k, Some(bb)).unwrap();
        let want = conv_ref(&xt, &kt, bt.data());
        for (a, e) in g.value(y).data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_channel_mismatch_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros([1, 2, 4, 4]));
    let k = g.input(Tensor::zeros([3, 5, 3, 3]));
    let err = g.conv2d(x, k, None).unwrap_err().to_string();
    assert!(err.contains("[1, 2, 4, 4]") && err.contains("[3, 5, 3, 3]"), "{err}");
    let k5 = g.input(Tensor::zeros([3, 2, 5, 5]));
    assert!(g.conv2d(x, k5, None).is_err());
}

#[test]
fn conv_is_linear_in_input_and_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xa = rand_tensor(&mut rng, &[2, 2, 5, 5]);
    let xb = rand_tensor(&mut rng, &[2, 2, 5, 5]);
    let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let (a, b) = (0.7, -1.3);
    let mut g = Graph::<f64>::new();
    let kv = g.input(k.clone());
    let mixed = Tensor::from_vec(
        [2, 2, 5, 5],
        xa.data().iter().zip(xb.data()).map(|(p, q)| a * p + b * q).collect(),
    )
    .unwrap();
    let m = g.input(mixed);
    let lhs = g.conv2d(m, kv, None).unwrap();
    let xav = g.input(xa);
    let xbv = g.input(xb);
    let ya = g.conv2d(xav, kv, None).unwrap();
    let yb = g.conv2d(xbv, kv, None).unwrap();
    for ((l, p), q) in g.value(lhs).data().iter().zip(g.value(ya).data()).zip(g.value(yb).data()) {
        let r = a * p + b * q;
        assert!((l - r).abs() <= 1e-5 * r.abs().max(1.0));
    }
}

#[test]
fn max_pool_examples_and_oracle() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64([1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap());
    let y = g.max_pool_2x2(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    let c = g.input(Tensor::full([1, 2, 4, 4], 3.25));
    let y = g.max_pool_2x2(c).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 3.25));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xt = rand_tensor(&mut rng, &[1, 1, 4, 4]);
    let x = g.input(xt.clone());
    let y = g.max_pool_2x2(x).unwrap();
    let d = xt.data();
    for oy in 0..2 {
        for ox in 0..2 {
            let mut best = f64::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    best = best.max(d[(2 * oy + dy) * 4 + 2 * ox + dx]);
                }
            }
            assert_eq!(g.value(y).data()[oy * 2 + ox], best);
        }
    }

    let odd = g.input(Tensor::zeros([1, 1, 3, 4]));
    assert!(matches!(g.max_pool_2x2(odd), Err(Error::Shape(_))));
}

#[test]
fn max_pool_tie_routes_gradient_to_first_element() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64([1, 1, 2, 2], &[5., 5., 5., 5.]).unwrap());
    let y = g.max_pool_2x2(x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1., 0., 0., 0.]);
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.input(Tensor::zeros([1]));
    let s = g.elementwise(ElementwiseOp::Sigmoid, z, None).unwrap();
    let t = g.elementwise(ElementwiseOp::Tanh, z, None).unwrap();
    assert_eq!(g.value(s).data(), &[0.5]);
    assert_eq!(g.value(t).data(), &[0.0]);
    let a = g.input(Tensor::from_f64([2], &[2., 3.]).unwrap());
    let b = g.input(Tensor::from_f64([2], &[4., 5.]).unwrap());
    let h = g.elementwise(ElementwiseOp::Hadamard, a, Some(b)).unwrap();
    assert_eq!(g.value(h).data(), &[8., 15.]);
    let c = g.input(Tensor::zeros([3]));
    assert!(matches!(g.hadamard(a, c), Err(Error::Shape(_))));
    assert!(g.elementwise(ElementwiseOp::Add, a, None).is_err());
}

#[test]
fn dense_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64([1, 2], &[2., 3.]).unwrap());
    let w = g.input(Tensor::from_f64([1, 2], &[1., 1.]).unwrap());
    let b = g.input(Tensor::zeros([1]));
    let y = g.dense(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[5.0]);

    let eye = g.input(Tensor::from_f64([2, 2], &[1., 0., 0., 1.]).unwrap());
    let y = g.dense(x, eye, None).unwrap();
    assert_eq!(g.value(y).data(), &[2., 3.]);

    let zw = g.input(Tensor::zeros([3, 2]));
    let bias = g.input(Tensor::from_f64([3], &[1., 2., 3.]).unwrap());
    let xx = g.input(Tensor::from_f64([2, 2], &[9., 8., 7., 6.]).unwrap());
    let y = g.dense(xx, zw, Some(bias)).unwrap();
    assert_eq!(g.value(y).data(), &[1., 2., 3., 1., 2., 3.]);

    assert!(matches!(g.dense(xx, bias, None), Err(Error::Shape(_))));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let l = g.input(Tensor::zeros([1, 10]));
    let (p, loss) = g.softmax_cross_entropy(l, &[3]).unwrap();
    assert!(p.data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
    assert!((g.value(loss).data()[0] - 10f64.ln()).abs() < 1e-12);

    let l = g.input(Tensor::from_f64([1, 2], &[1000., 0.]).unwrap());
    let (p, loss) = g.softmax_cross_entropy(l, &[0]).unwrap();
    assert!(p.data()[0] > 1.0 - 1e-12 && p.data()[1] >= 0.0);
    assert!(g.value(loss).data()[0].abs() < 1e-12);

    // -log softmax([1,2,3])[2] = log(e^1 + e^2 + e^3) - 3, evaluated term by term
    let l = g.input(Tensor::from_f64([1, 3], &[1., 2., 3.]).unwrap());
    let (_, loss) = g.softmax_cross_entropy(l, &[2]).unwrap();
    let want = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
    assert!((g.value(loss).data()[0] - want).abs() < 1e-14);
    assert!((want - 0.407_605_964_444_380_1).abs() < 1e-15);

    assert!(matches!(g.softmax_cross_entropy(l, &[3]), Err(Error::InvalidArgument(_))));
}

#[test]
fn softmax_rows_positive_and_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits: Vec<f64> = (0..70).map(|_| rng.random_range(-30.0..30.0)).collect();
    let p = softmax_rows(&logits, 7);
    for row in p.chunks_exact(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn dropout_modes_and_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::<f64>::new();
    let xt = rand_tensor(&mut rng, &[4, 25]);
    let x = g.input(xt.clone());
    let y = g.dropout(x, 0.5, false, &mut rng).unwrap();
    assert_eq!(g.value(y).data(), xt.data());
    let y = g.dropout(x, 0.0, true, &mut rng).unwrap();
    assert_eq!(g.value(y).data(), xt.data());

    let big = g.input(Tensor::ones([200_000]));
    let y = g.dropout(big, 0.25, true, &mut rng).unwrap();
    let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count() as f64 / 200_000.0;
    assert!((zeros - 0.25).abs() < 0.01, "zero fraction {zeros}");
    let kept: Vec<f64> = g.value(y).data().iter().copied().filter(|&v| v != 0.0).collect();
    assert!(kept.iter().all(|&v| (v - 1.0 / 0.75).abs() < 1e-12));

    assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    assert!(g.dropout(x, -0.1, true, &mut rng).is_err());
}

#[test]
fn batch_norm_training_standardizes_each_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xt = Tensor::from_vec(
        [4, 3, 3, 3],
        (0..108).map(|i| rng.random_range(-2.0..5.0) + i as f64 * 0.01).collect(),
    )
    .unwrap();
    let mut g = Graph::<f64>::new();
    let x = g.input(xt);
    let gamma = g.input(Tensor::ones([3]));
    let beta = g.input(Tensor::zeros([3]));
    let mut stats = RunningStats::new(3);
    let cfg = BatchNormConfig { momentum: 0.9, eps: 0.0 };
    let y = g.batch_norm(x, gamma, beta, &mut stats, true, cfg).unwrap();
    let d = g.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|b| d[(b * 3 + c) * 9..][..9].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-4 && (v - 1.0).abs() < 1e-4);
    }
    assert!(stats.mean.iter().any(|&m| m != 0.0));

    let one = g.input(Tensor::zeros([1, 3, 2, 2]));
    assert!(matches!(
        g.batch_norm(one, gamma, beta, &mut stats, true, cfg),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64([1, 2, 1, 2], &[1., 2., 3., 4.]).unwrap());
    let gamma = g.input(Tensor::ones([2]));
    let beta = g.input(Tensor::zeros([2]));
    let mut stats = RunningStats {
        mean: vec![0.5, -1.0],
        var: vec![4.0, 0.25],
    };
    let cfg = BatchNormConfig::default();
    let y = g.batch_norm(x, gamma, beta, &mut stats, false, cfg).unwrap();
    let want = [
        (1. - 0.5) / (4.0f64 + 1e-3).sqrt(),
        (2. - 0.5) / (4.0f64 + 1e-3).sqrt(),
        (3. + 1.) / (0.25f64 + 1e-3).sqrt(),
        (4. + 1.) / (0.25f64 + 1e-3).sqrt(),
    ];
    for (a, b) in g.value(y).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(stats.mean, vec![0.5, -1.0]);
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64([2, 3], &[1., -2., 3., 0.5, 0., 9.]).unwrap());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64([2], &[1., 2.]).unwrap());
    let sq = g.hadamard(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2., 4.]);
    // repeated backward accumulates
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4., 8.]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar_and_untracked() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros([3]));
    let y = g.relu(x);
    assert!(matches!(g.backward(y), Err(Error::Backward(_))));
    let c = g.input(Tensor::zeros([3]));
    let s = g.sum(c);
    assert!(matches!(g.backward(s), Err(Error::Backward(_))));
    // untracked inputs never get a buffer
    let t = g.sum(x);
    let u = g.hadamard(t, s).unwrap();
    g.backward(u).unwrap();
    assert!(g.grad(c).is_none());
}

#[test]
fn record_is_topologically_ordered() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::ones([1, 1, 2, 2]));
    let k = g.param(Tensor::ones([1, 1, 3, 3]));
    let y = g.conv2d(x, k, None).unwrap();
    let r = g.relu(y);
    let p = g.max_pool_2x2(r).unwrap();
    let s = g.sum(p);
    let rec = g.record();
    assert_eq!(rec.len(), 4);
    for e in &rec {
        assert!(e.inputs.iter().all(|&i| i < e.output));
    }
    assert_eq!(rec.last().unwrap().output, s.id());
}

const TRIALS: u64 = 20;
const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn gradcheck_trials(name: &str, mut make: impl FnMut(&mut ChaCha8Rng) -> gradcheck::GradCheckReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let mut total = gradcheck::GradCheckReport::default();
    for _ in 0..TRIALS {
        total = total.merge(make(&mut rng));
    }
    assert!(total.passes(TOL), "{name}: {total:?}");
}

#[test]
fn gradcheck_conv2d() {
    gradcheck_trials("conv2d", |rng| {
        let (b, ci, co) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
        let (h, w) = (rng.random_range(1..4), rng.random_range(1..4));
        let ins = [
            rand_tensor(rng, &[b, ci, h, w]),
            rand_tensor(rng, &[co, ci, 3, 3]),
            rand_tensor(rng, &[co]),
        ];
        gradcheck::check(&ins, STEP, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]))?;
            project(g, y, 11)
        })
        .unwrap()
    });
}

#[test]
fn gradcheck_max_pool() {
    gradcheck_trials("max_pool", |rng| {
        let ins = [rand_tensor(rng, &[2, 2, 4, 2])];
        gradcheck::check(&ins, STEP, |g, v| {
            let y = g.max_pool_2x2(v[0])?;
            project(g, y, 12)
        })
        .unwrap()
    });
}

#[test]
fn gradcheck_unary_elementwise() {
    for op in [ElementwiseOp::Relu, ElementwiseOp::Sigmoid, ElementwiseOp::Tanh, ElementwiseOp::SubFromOne] {
        gradcheck_trials(&format!("{op:?}"), |rng| {
            let ins = [rand_tensor(rng, &[3, 4])];
            gradcheck::check(&ins, STEP, |g, v| {
                let y = g.elementwise(op, v[0], None)?;
                project(g, y, 13)
            })
            .unwrap()
        });
    }
}

#[test]
fn gradcheck_binary_elementwise() {
    for op in [ElementwiseOp::Add, ElementwiseOp::Hadamard] {
        gradcheck_trials(&format!("{op:?}"), |rng| {
            let ins = [rand_tensor(rng, &[2, 5]), rand_tensor(rng, &[2, 5])];
            gradcheck::check(&ins, STEP, |g, v| {
                let y = g.elementwise(op, v[0], Some(v[1]))?;
                let d = g.sub(y, v[1])?;
                project(g, d, 14)
            })
            .unwrap()
        });
    }
}

#[test]
fn gradcheck_dense() {
    gradcheck_trials("dense", |rng| {
        let (b, n, m) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5));
        let ins = [rand_tensor(rng, &[b, n]), rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m])];
        gradcheck::check(&ins, STEP, |g, v| {
            let y = g.dense(v[0], v[1], Some(v[2]))?;
            project(g, y, 15)
        })
        .unwrap()
    });
}

#[test]
fn gradcheck_softmax_cross_entropy() {
    gradcheck_trials("softmax_ce", |rng| {
        let (b, k) = (rng.random_range(1..4), rng.random_range(2..6));
        let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let ins = [rand_tensor(rng, &[b, k])];
        gradcheck::check(&ins, STEP, |g, v| Ok(g.softmax_cross_entropy(v[0], &targets)?.1)).unwrap()
    });
}

#[test]
fn gradcheck_dropout_fixed_mask() {
    gradcheck_trials("dropout", |rng| {
        let seed: u64 = rng.random();
        let ins = [rand_tensor(rng, &[3, 7])];
        gradcheck::check(&ins, STEP, |g, v| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let y = g.dropout(v[0], 0.25, true, &mut r)?;
            project(g, y, 16)
        })
        .unwrap()
    });
}

#[test]
fn gradcheck_batch_norm_both_modes() {
    for training in [true, false] {
        gradcheck_trials(&format!("batch_norm_{training}"), |rng| {
            let ins = [rand_tensor(rng, &[3, 2, 2, 2]), rand_tensor(rng, &[2]), rand_tensor(rng, &[2])];
            let stats0 = RunningStats {
                mean: vec![0.1, -0.2],
                var: vec![0.8, 1.5],
            };
            gradcheck::check(&ins, STEP, |g, v| {
                let mut stats = stats0.clone();
                let y = g.batch_norm(v[0], v[1], v[2], &mut stats, training, BatchNormConfig::default())?;
                project(g, y, 17)
            })
            .unwrap()
        });
    }
}

#[test]
fn gradcheck_reshape_sum_mean() {
    gradcheck_trials("reshape_mean", |rng| {
        let ins = [rand_tensor(rng, &[2, 3, 2, 2]), rand_tensor(rng, &[2, 12])];
        gradcheck::check(&ins, STEP, |g, v| {
            let f = g.flatten(v[0])?;
            let m = g.mean(&[f, v[1], f])?;
            project(g, m, 18)
        })
        .unwrap()
    });
}

#[test]
fn gradcheck_shared_tensor_sums_both_consumers() {
    gradcheck_trials("fanout", |rng| {
        let ins = [rand_tensor(rng, &[1, 1, 3, 3]), rand_tensor(rng, &[1, 1, 3, 3])];
        gradcheck::check(&ins, STEP, |g, v| {
            let a = g.conv2d(v[0], v[1], None)?;
            let b = g.sigmoid(v[0]);
            let c = g.hadamard(a, b)?;
            let d = g.add(c, v[0])?;
            project(g, d, 19)
        })
        .unwrap()
    });
}

#[test]
fn nan_propagates_through_relu_and_pooling() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_vec([1, 1, 2, 2], vec![1.0, f64::NAN, -1.0, 0.5]).unwrap());
    let r = g.relu(x);
    assert!(g.value(r).data()[1].is_nan());
    let p = g.max_pool_2x2(x).unwrap();
    assert!(g.value(p).data()[0].is_nan());
}
