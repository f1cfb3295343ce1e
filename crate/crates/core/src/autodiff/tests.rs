use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::Tensor;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Inputs bounded away from zero by at least `margin`.
fn rand_away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = rand_tensor(shape, rng);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin } * 2.0;
        }
    }
    t
}

/// Scalar probe `sum(out * r)` with a fixed random `r`, so every output
/// coordinate contributes with a generic weight.
fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead_beef);
    let r = rand_tensor(g.shape(out), &mut rng);
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    g.sum_all(p)
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn check<F>(inputs: &[Tensor<f64>], build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> crate::Result<Var>,
{
    let rep = grad_check(inputs, build, &GradCheckOptions::default()).unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn relu_sigmoid_definitions() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = g.constant(Tensor::new(&[1], vec![0.0]).unwrap());
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).data(), &[0.5]);
}

#[test]
fn elementwise_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[2, 3, 4], &mut rng);
        check(&[a.clone(), b.clone()], |g, v| {
            let o = g.add(v[0], v[1])?;
            probe(g, o, seed)
        });
        check(&[a.clone(), b.clone()], |g, v| {
            let o = g.sub(v[0], v[1])?;
            probe(g, o, seed)
        });
        check(&[a.clone(), b.clone()], |g, v| {
            let o = g.mul(v[0], v[1])?;
            probe(g, o, seed)
        });
        check(&[a.clone()], |g, v| {
            let o = g.scale(v[0], -1.7)?;
            probe(g, o, seed)
        });
        check(&[a.clone()], |g, v| {
            let o = g.sigmoid(v[0])?;
            probe(g, o, seed)
        });
        check(&[a.clone()], |g, v| {
            let o = g.neg(v[0])?;
            probe(g, o, seed)
        });
        let away = rand_away_from_zero(&[2, 3, 4], 1e-2, &mut rng);
        check(&[away.clone()], |g, v| {
            let o = g.relu(v[0])?;
            probe(g, o, seed)
        });
        check(&[away.clone()], |g, v| {
            let o = g.abs(v[0])?;
            probe(g, o, seed)
        });
        check(&[away], |g, v| {
            let o = g.leaky_relu(v[0], 0.2)?;
            probe(g, o, seed)
        });
    }
}

#[test]
fn add_backward_passes_gradient_unchanged() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let b = g.input(Tensor::new(&[3], vec![4.0, 5.0, 6.0]).unwrap());
    let s = g.add(a, b).unwrap();
    let loss = probe(&mut g, s, 9).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), grads.get(b).unwrap().data());
}

#[test]
fn broadcast_operand_gradient_sums_over_stretched_axes() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let per_channel = rand_tensor(&[1, 3, 1, 1], &mut rng);
        let scalar = rand_tensor(&[1], &mut rng);
        check(&[a.clone(), per_channel.clone()], |g, v| {
            let o = g.add(v[0], v[1])?;
            probe(g, o, seed)
        });
        check(&[a.clone(), per_channel], |g, v| {
            let o = g.mul(v[0], v[1])?;
            probe(g, o, seed)
        });
        check(&[a, scalar], |g, v| {
            let o = g.sub(v[0], v[1])?;
            probe(g, o, seed)
        });
    }
    // Explicit sum rule on a small case.
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::full(&[2, 3], 1.0).unwrap());
    let b = g.input(Tensor::new(&[1, 3], vec![0.0; 3]).unwrap());
    let s = g.add(a, b).unwrap();
    let l = g.sum_all(s).unwrap();
    assert_eq!(g.backward(l).unwrap().get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn broadcast_mismatch_is_an_error() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
    let b = g.constant(Tensor::zeros(&[3, 2]).unwrap());
    assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn non_finite_is_an_error() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(&[1], vec![f64::MAX]).unwrap());
    assert!(matches!(g.scale(a, 10.0), Err(Error::NonFinite(_))));
}

#[test]
fn reductions() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let m = g.mean_all(a).unwrap();
    assert_eq!(g.value(m).data(), &[2.0]);
    let z = g.constant(Tensor::zeros(&[2, 2]).unwrap());
    let s = g.sum_all(z).unwrap();
    assert_eq!(g.value(s).data(), &[0.0]);
    let id = g.sum(a, &[]).unwrap();
    assert_eq!(g.value(id).data(), g.value(a).data());
    assert!(matches!(g.sum(a, &[1]), Err(Error::InvalidAxis { .. })));

    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(&[2, 3], vec![0.3; 6]).unwrap());
    let m = g.mean_all(x).unwrap();
    let grads = g.backward(m).unwrap();
    for &v in grads.get(x).unwrap().data() {
        assert!((v - 1.0 / 6.0).abs() < 1e-15);
    }
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[2, 3, 4, 5], &mut rng);
        check(&[x.clone()], |g, v| {
            let o = g.mean(v[0], &[0, 2])?;
            probe(g, o, seed)
        });
        check(&[x], |g, v| {
            let o = g.sum(v[0], &[1, 3])?;
            probe(g, o, seed)
        });
    }
}

/// Direct nested-loop convolution, independent of the im2col path.
fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * oc * oh * ow];
    for bi in 0..n {
        for o in 0..oc {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b.map(|b| b.data()[o]).unwrap_or(0.0);
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * c + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out[((bi * oc + o) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    Tensor::new(&[n, oc, oh, ow], out).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-8))
        .fold(0.0, f64::max)
}

#[test]
fn conv_hand_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[5.0]);

    let one = g.constant(Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap());
    let zero = g.constant(Tensor::new(&[1], vec![0.0]).unwrap());
    let id = g.conv2d(x, one, Some(zero), 1, 0).unwrap();
    assert_eq!(g.value(id).data(), g.value(x).data());

    let big = g.constant(Tensor::zeros(&[1, 1, 5, 5]).unwrap());
    assert!(g.conv2d(x, big, None, 1, 1).is_err());
    let wrong_c = g.constant(Tensor::zeros(&[1, 2, 1, 1]).unwrap());
    assert!(matches!(g.conv2d(x, wrong_c, None, 1, 0), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = rand_tensor(&[2, 3, 8, 8], &mut rng);
    let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
    let b = rand_tensor(&[4], &mut rng);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let mut g = Graph::<f64>::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let oracle = conv_oracle(&x, &w, Some(&b), stride, pad);
        assert_eq!(g.value(y).shape(), oracle.shape());
        assert!(rel_err(g.value(y).data(), oracle.data()) < 1e-6);

        // Backward against the oracle: the loss sum(y * r) is linear, so the
        // gradient of each input coordinate equals the oracle response to a
        // unit perturbation.
        let r = rand_tensor(g.shape(y), &mut rng);
        let rv = g.constant(r.clone());
        let p = g.mul(y, rv).unwrap();
        let loss = g.sum_all(p).unwrap();
        let grads = g.backward(loss).unwrap();
        let dot = |t: &Tensor<f64>| t.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();
        let base = dot(&conv_oracle(&x, &w, Some(&b), stride, pad));
        let unit_response = |which: usize, idx: usize| {
            let (mut x2, mut w2, mut b2) = (x.clone(), w.clone(), b.clone());
            match which {
                0 => x2.data_mut()[idx] += 1.0,
                1 => w2.data_mut()[idx] += 1.0,
                _ => b2.data_mut()[idx] += 1.0,
            }
            dot(&conv_oracle(&x2, &w2, Some(&b2), stride, pad)) - base
        };
        for (which, v, len) in [(0, xv, x.len()), (1, wv, w.len()), (2, bv, b.len())] {
            let got = grads.get(v).unwrap().data();
            let want: Vec<f64> = (0..len).map(|i| unit_response(which, i)).collect();
            assert!(rel_err(got, &want) < 1e-6, "input {which}");
        }
    }
}

#[test]
fn conv_gradcheck() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[2, 2, 5, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        check(&[x, w, b], |g, v| {
            let o = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            probe(g, o, seed)
        });
    }
}

#[test]
fn same_padding_preserves_extents() {
    let mut g = Graph::<f32>::new();
    let w = g.constant(Tensor::zeros(&[2, 1, 3, 3]).unwrap());
    for (h, wd) in [(1, 1), (1, 7), (5, 2), (31, 47)] {
        let x = g.constant(Tensor::zeros(&[1, 1, h, wd]).unwrap());
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 2, h, wd]);
    }
}

#[test]
fn matmul_cases() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let ones = g.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
    let y = g.matmul(a, ones).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 7.0]);
    let eye = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let v = g.constant(Tensor::new(&[2, 1], vec![5.0, -6.0]).unwrap());
    let y = g.matmul(eye, v).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, -6.0]);
    let bad = g.constant(Tensor::zeros(&[3, 1]).unwrap());
    assert!(matches!(g.matmul(a, bad), Err(Error::ShapeMismatch { .. })));
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4, 2], &mut rng);
        check(&[a, b], |g, v| {
            let o = g.matmul(v[0], v[1])?;
            probe(g, o, seed)
        });
    }
}

#[test]
fn global_avg_pool_cases() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full(&[1, 1, 3, 3], 0.7).unwrap());
    let p = g.global_avg_pool(c).unwrap();
    assert!((g.value(p).data()[0] - 0.7).abs() < 1e-15);
    let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
    let p = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(p).data(), &[4.0]);

    // Equal-mean planes at different resolutions pool to the same value.
    let small: Vec<f64> = (0..16).map(|i| i as f64 / 8.0).collect();
    let big: Vec<f64> = (0..64).map(|i| ((i % 16) as f64) / 8.0).collect();
    let a = g.constant(Tensor::new(&[1, 1, 4, 4], small).unwrap());
    let b = g.constant(Tensor::new(&[1, 1, 8, 8], big).unwrap());
    let (pa, pb) = (g.global_avg_pool(a).unwrap(), g.global_avg_pool(b).unwrap());
    assert_eq!(g.value(pa).data(), g.value(pb).data());

    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[2, 3, 4, 5], &mut rng);
        check(&[x], |g, v| {
            let o = g.global_avg_pool(v[0])?;
            probe(g, o, seed)
        });
    }
}

#[test]
fn batch_norm_train_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[4, 2, 3, 3], &mut rng);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x);
    let gamma = g.constant(Tensor::full(&[2], 1.0).unwrap());
    let beta = g.constant(Tensor::zeros(&[2]).unwrap());
    let (y, stats) = g.batch_norm_train(xv, gamma, beta, 1e-5).unwrap();
    assert_eq!(stats.count, 36);
    let d = g.value(y).data();
    for ch in 0..2 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| d[(b * 2 + ch) * 9..(b * 2 + ch + 1) * 9].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / 36.0;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 36.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-3);
    }
    // Affine on normalized input.
    let g2 = g.constant(Tensor::full(&[2], 2.0).unwrap());
    let b2 = g.constant(Tensor::full(&[2], 3.0).unwrap());
    let (z, _) = g.batch_norm_train(y, g2, b2, 1e-5).unwrap();
    let zd = g.value(z).data();
    let m = zd.iter().sum::<f64>() / zd.len() as f64;
    let sd = (zd.iter().map(|x| (x - m).powi(2)).sum::<f64>() / zd.len() as f64).sqrt();
    assert!((m - 3.0).abs() < 1e-9);
    assert!((sd - 2.0).abs() < 1e-3);

    let one = g.constant(Tensor::zeros(&[1, 2, 1, 1]).unwrap());
    assert!(matches!(
        g.batch_norm_train(one, gamma, beta, 1e-5),
        Err(Error::TooFewForBatchNorm(1))
    ));
}

#[test]
fn batch_norm_gradcheck() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[4, 2, 3, 3], &mut rng);
        let gamma = rand_tensor(&[2], &mut rng);
        let beta = rand_tensor(&[2], &mut rng);
        check(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
            let (o, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            probe(g, o, seed)
        });
        let mean = [0.1, -0.2];
        let var = [0.5, 1.5];
        check(&[x, gamma, beta], |g, v| {
            let o = g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            probe(g, o, seed)
        });
    }
}

#[test]
fn grad_reverse_semantics() {
    let x = Tensor::new(&[2], vec![0.123456789f64, -7.5]).unwrap();
    let mut g = Graph::<f64>::new();
    let xv = g.input(x.clone());
    let r = g.grad_reverse(xv, 1.0).unwrap();
    assert_eq!(g.value(r), &x);
    let up = g.constant(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
    let p = g.mul(r, up).unwrap();
    let l = g.sum_all(p).unwrap();
    assert_eq!(g.backward(l).unwrap().get(xv).unwrap().data(), &[-1.0, 2.0]);

    let mut g = Graph::<f64>::new();
    let xv = g.input(x.clone());
    let r = g.grad_reverse(xv, 0.0).unwrap();
    let l = probe(&mut g, r, 1).unwrap();
    assert!(g.backward(l).unwrap().get(xv).unwrap().data().iter().all(|&v| v == 0.0));

    // Two reversals restore the original gradient exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&[3, 4], &mut rng);
    let mut g = Graph::<f64>::new();
    let xv = g.input(x.clone());
    let r1 = g.grad_reverse(xv, 1.0).unwrap();
    let r2 = g.grad_reverse(r1, 1.0).unwrap();
    let l = probe(&mut g, r2, 2).unwrap();
    let twice = g.backward(l).unwrap().get(xv).unwrap().clone();
    let mut g = Graph::<f64>::new();
    let xv = g.input(x);
    let l = probe(&mut g, xv, 2).unwrap();
    assert_eq!(&twice, g.backward(l).unwrap().get(xv).unwrap());
}

#[test]
fn concat_cases() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[1, 2, 4, 4]).unwrap());
    let b = g.constant(Tensor::zeros(&[1, 3, 4, 4]).unwrap());
    let c = g.concat(&[a, b]).unwrap();
    assert_eq!(g.shape(c), &[1, 5, 4, 4]);
    let single = g.concat(&[b]).unwrap();
    assert_eq!(g.value(single), g.value(b));
    let bad = g.constant(Tensor::zeros(&[1, 3, 4, 5]).unwrap());
    assert!(g.concat(&[a, bad]).is_err());
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[2, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[2, 1, 3, 3], &mut rng);
        check(&[a, b], |g, v| {
            let o = g.concat(&[v[0], v[1]])?;
            probe(g, o, seed)
        });
    }
}

#[test]
fn broadcast_to_and_reshape_gradcheck() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[2, 3, 1, 1], &mut rng);
        check(&[a.clone()], |g, v| {
            let o = g.broadcast_to(v[0], &[2, 3, 4, 5])?;
            probe(g, o, seed)
        });
        check(&[a], |g, v| {
            let o = g.reshape(v[0], &[2, 3])?;
            probe(g, o, seed)
        });
    }
}

#[test]
fn fused_loss_gradcheck() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = rand_tensor(&[4, 5], &mut rng);
        let labels = [0, 3, 4, 1];
        check(&[logits], |g, v| g.cross_entropy(v[0], &labels));
        let map = rand_tensor(&[2, 1, 3, 3], &mut rng);
        check(&[map.clone()], |g, v| g.bce_with_logits(v[0], 1.0));
        check(&[map], |g, v| g.bce_with_logits(v[0], 0.0));
    }
}

#[test]
fn backward_basics() {
    let p = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let v = g.param("p", &p);
    let s = g.sum_all(v).unwrap();
    assert_eq!(g.backward(s).unwrap().param_map()["p"].data(), &[1.0; 3]);

    let mut g = Graph::<f64>::new();
    let v = g.param("p", &p);
    let again = g.param("p", &p);
    assert_eq!(v, again);
    let sq = g.mul(v, again).unwrap();
    let s = g.sum_all(sq).unwrap();
    assert_eq!(g.backward(s).unwrap().param_map()["p"].data(), &[1.0, -2.0, 4.0]);
    assert!(matches!(g.backward(sq), Err(Error::NotScalar(_))));
}

#[test]
fn composite_conv_bn_relu_mean() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[3, 2, 4, 4], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let gamma = rand_tensor(&[3], &mut rng);
        let beta = rand_tensor(&[3], &mut rng);
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let c = g.conv2d(v[0], v[1], None, 1, 1)?;
            let (b, _) = g.batch_norm_train(c, v[2], v[3], 1e-5)?;
            let r = g.relu(b)?;
            let r = probe(g, r, seed)?;
            g.mean_all(r)
        };
        let rep = grad_check(&[x, w, gamma, beta], build, &GradCheckOptions::default()).unwrap();
        // Near-cancelled coordinates can exceed the bound at eps = 1e-3 from
        // the O(eps^2) truncation term alone; those are re-differenced.
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
        assert!(rep.passed_refined(), "{rep:?}");
    }
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&[2, 3, 6, 6], &mut rng).cast::<f32>();
    let w = rand_tensor(&[4, 3, 3, 3], &mut rng).cast::<f32>();
    let run = || {
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.clone());
        let wv = g.param("w", &w);
        let c = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let r = g.relu(c).unwrap();
        let l = g.mean_all(r).unwrap();
        g.backward(l).unwrap().param_map()
    };
    let (a, b) = (run(), run());
    let bits = |m: &GradientMap<f32>| m["w"].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn gradcheck_linear_is_exact_and_detects_nondeterminism() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[5], &mut rng);
    let rep = grad_check(
        &[x.clone()],
        |g, v| {
            let s = g.scale(v[0], 3.0)?;
            g.sum_all(s)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-9, "{rep:?}");

    let calls = std::cell::Cell::new(0.0);
    let res = grad_check(
        &[x],
        |g, v| {
            calls.set(calls.get() + 1.0);
            let s = g.scale(v[0], calls.get())?;
            g.sum_all(s)
        },
        &GradCheckOptions::default(),
    );
    assert!(matches!(res, Err(Error::NonDeterministic { .. })));
}

#[test]
fn gradcheck_skips_relu_kinks() {
    let x = Tensor::new(&[3], vec![1e-4, -0.5, 0.5]).unwrap();
    let rep = grad_check(
        &[x],
        |g, v| {
            let r = g.relu(v[0])?;
            g.sum_all(r)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert_eq!(rep.skipped_kinks, 1);
    assert_eq!(rep.checked, 2);
    assert!(rep.passed());
}
