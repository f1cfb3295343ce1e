use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{GradCheckOptions, Graph};
use crate::error::Error;
use crate::losses::multiclass_ce_loss;
use crate::nn::{BnMode, Ctx, ParamStore};
use crate::tensor::Tensor;
use crate::verify::{run_suite, uniform, Scope};

fn noisy_input(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn forward_shapes(net: &TransformNet<f32>, shape: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut g = Graph::new();
    let x = g.constant(noisy_input(shape, 1));
    let mut ctx = Ctx::new(&mut g, &net.store, true, BnMode::Train);
    let out = net.forward(&mut ctx, x).unwrap();
    (g.shape(out.denoised).to_vec(), g.shape(out.fused).to_vec())
}

fn zero_branch_convs(store: &mut ParamStore<f64>, prefix: &str) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(prefix) && n.contains(".conv"))
        .map(String::from)
        .collect();
    for n in names {
        store.get_mut(&n).unwrap().data_mut().fill(0.0);
    }
}

#[test]
fn zero_residual_branch_is_identity() {
    let mut store = ParamStore::<f64>::new();
    add_residual_block(&mut store, "blk", 32, &mut ChaCha8Rng::seed_from_u64(3));
    zero_branch_convs(&mut store, "blk");
    let x = uniform(&[2, 32, 16, 16], &mut ChaCha8Rng::seed_from_u64(4));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mut ctx = Ctx::new(&mut g, &store, true, BnMode::Train);
    let y = residual_block_preact(&mut ctx, "blk", xv).unwrap();
    assert_eq!(g.shape(y), &[2, 32, 16, 16]);
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn residual_block_rejects_channel_mismatch() {
    let mut store = ParamStore::<f64>::new();
    add_residual_block(&mut store, "blk", 4, &mut ChaCha8Rng::seed_from_u64(3));
    let mut g = Graph::new();
    let xv = g.constant(Tensor::zeros(&[2, 3, 4, 4]).unwrap());
    let mut ctx = Ctx::new(&mut g, &store, true, BnMode::Train);
    assert!(residual_block_preact(&mut ctx, "blk", xv).is_err());
}

#[test]
fn zero_residual_stack_returns_input_features() {
    let cfg = ModelConfig::desk();
    let mut net = TransformNet::<f64>::build(&cfg, 5).unwrap();
    zero_branch_convs(&mut net.store, "tnet.low.");
    let mut g = Graph::new();
    let x = g.constant(noisy_input(&[2, 3, 12, 12], 2).cast());
    let mut ctx = Ctx::new(&mut g, &net.store, true, BnMode::Train);
    let feat = ctx.conv("tnet.in_conv", x, 1, 1).unwrap();
    let stack = net.residual_stack(&mut ctx, feat).unwrap();
    let low = net.low_level(&mut ctx, x).unwrap();
    let f = g.value(feat).data().to_vec();
    assert_eq!(g.value(stack).data(), &f[..]);
    let doubled: Vec<f64> = f.iter().map(|v| v + v).collect();
    assert_eq!(g.value(low).data(), &doubled[..]);
}

#[test]
fn block_gradchecks() {
    let opts = GradCheckOptions {
        max_coords: Some(40),
        ..Default::default()
    };
    for case in run_suite(Scope::Blocks, &[1, 2, 3, 4, 5], &opts).unwrap() {
        let ok = if case.name == "pixel_discriminator" {
            case.report.passed_refined()
        } else {
            case.report.passed()
        };
        assert!(
            ok,
            "{} seed {}: {:?}",
            case.name,
            case.seed,
            case.report
        );
    }
}

#[test]
fn transform_net_any_resolution() {
    let cfg = ModelConfig::desk();
    let net = TransformNet::<f32>::build(&cfg, 1).unwrap();
    for (h, w) in [(64, 64), (96, 80), (31, 47)] {
        let (d, f) = forward_shapes(&net, &[1, 3, h, w]);
        assert_eq!(d, vec![1, 3, h, w]);
        assert_eq!(f, vec![1, cfg.base_channels, h, w]);
    }
    let (d, _) = forward_shapes(&net, &[2, 3, 96, 80]);
    assert_eq!(d, vec![2, 3, 96, 80]);
}

#[test]
fn transform_net_rejects_non_rgb() {
    let net = TransformNet::<f32>::build(&ModelConfig::micro(), 1).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 8, 8]).unwrap());
    let mut ctx = Ctx::new(&mut g, &net.store, true, BnMode::Train);
    assert!(matches!(net.forward(&mut ctx, x), Err(Error::InvalidShape { .. })));
}

#[test]
fn build_is_seeded() {
    let cfg = ModelConfig::desk();
    let a = TransformNet::<f32>::build(&cfg, 7).unwrap();
    let b = TransformNet::<f32>::build(&cfg, 7).unwrap();
    let c = TransformNet::<f32>::build(&cfg, 8).unwrap();
    assert_eq!(a.store, b.store);
    assert_ne!(a.store.params(), c.store.params());
    assert_eq!(a.store.num_scalars(), c.store.num_scalars());
    let names_a: Vec<&str> = a.store.names().collect();
    let names_c: Vec<&str> = c.store.names().collect();
    assert_eq!(names_a, names_c);
}

#[test]
fn full_preset_matches_published_architecture() {
    let cfg = ModelConfig::full();
    assert_eq!(cfg.base_channels, 32);
    assert_eq!(cfg.low_level_blocks, 16);
    assert_eq!(cfg.local_blocks, 2);
    assert_eq!(cfg.num_noise_classes, 5);
    assert_eq!(cfg.pixel_disc_channels.len(), 3);
    let net = TransformNet::<f32>::build(&cfg, 0).unwrap();
    let blocks = net.store.names().filter(|n| n.ends_with(".conv1.weight")).count();
    assert_eq!(blocks, 18);
}

#[test]
fn eval_denoise_is_deterministic() {
    let cfg = ModelConfig::micro();
    let mut net = TransformNet::<f32>::build(&cfg, 1).unwrap();
    for s in net.store.stats_mut().values_mut() {
        s.updates = 1;
    }
    let x = noisy_input(&[1, 3, 16, 12], 3);
    let a = net.denoise(&x).unwrap();
    let b = net.denoise(&x).unwrap();
    assert_eq!(a.shape(), x.shape());
    assert_eq!(a.data(), b.data());
}

#[test]
fn eval_before_statistics_fails() {
    let net = TransformNet::<f32>::build(&ModelConfig::micro(), 1).unwrap();
    assert!(matches!(
        net.denoise(&noisy_input(&[1, 3, 8, 8], 1)),
        Err(Error::UninitializedStats(_))
    ));
}

fn fusion_store(c: usize, w: &[f64], b: &[f64]) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store.insert("fuse.weight", Tensor::new(&[c, 2 * c, 1, 1], w.to_vec()).unwrap());
    store.insert("fuse.bias", Tensor::new(&[c], b.to_vec()).unwrap());
    store
}

fn run_fusion(store: &ParamStore<f64>, l: &Tensor<f64>, gl: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let lv = g.constant(l.clone());
    let gv = g.constant(gl.clone());
    let mut ctx = Ctx::new(&mut g, store, true, BnMode::Train);
    let f = fuse_local_global(&mut ctx, "fuse", lv, gv).unwrap();
    g.value(f).clone()
}

#[test]
fn fusion_hand_case() {
    // One output channel from two: w = [1, 1] on L, w' = [1, 0] on G.
    let mut store = ParamStore::<f64>::new();
    store.insert("fuse.weight", Tensor::new(&[1, 4, 1, 1], vec![1.0, 1.0, 1.0, 0.0]).unwrap());
    store.insert("fuse.bias", Tensor::new(&[1], vec![0.0]).unwrap());
    let l = Tensor::new(&[1, 2, 1, 1], vec![0.5, -0.2]).unwrap();
    let gl = Tensor::new(&[1, 2, 1, 1], vec![0.3, 9.0]).unwrap();
    let mut g = Graph::new();
    let lv = g.constant(l);
    let gv = g.constant(gl);
    let mut ctx = Ctx::new(&mut g, &store, true, BnMode::Train);
    let f = fuse_local_global(&mut ctx, "fuse", lv, gv).unwrap();
    assert!((g.value(f).data()[0] - 0.6).abs() < 1e-12);
}

/// Per-pixel evaluation of the fusion rule.
fn fusion_oracle(c: usize, w: &[f64], b: &[f64], l: &Tensor<f64>, gl: &Tensor<f64>) -> Vec<f64> {
    let s = l.shape();
    let (n, h, wd) = (s[0], s[2], s[3]);
    let mut out = vec![0.0; n * c * h * wd];
    for ni in 0..n {
        for co in 0..c {
            for y in 0..h {
                for x in 0..wd {
                    let mut acc = b[co];
                    for ci in 0..c {
                        acc += w[co * 2 * c + ci] * l.data()[((ni * c + ci) * h + y) * wd + x];
                        acc += w[co * 2 * c + c + ci] * gl.data()[ni * c + ci];
                    }
                    out[((ni * c + co) * h + y) * wd + x] = acc.max(0.0);
                }
            }
        }
    }
    out
}

#[test]
fn fusion_matches_per_pixel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..100 {
        let c = 1 + case % 4;
        let (n, h, wd) = (1 + case % 2, 1 + case % 5, 2 + case % 3);
        let w = uniform(&[c * 2 * c], &mut rng).into_data();
        let b = uniform(&[c], &mut rng).into_data();
        let l = uniform(&[n, c, h, wd], &mut rng);
        let gl = uniform(&[n, c, 1, 1], &mut rng);
        let got = run_fusion(&fusion_store(c, &w, &b), &l, &gl);
        let want = fusion_oracle(c, &w, &b, &l, &gl);
        for (a, e) in got.data().iter().zip(&want) {
            assert!((a - e).abs() <= 1e-6 * e.abs().max(1e-8), "case {case}: {a} vs {e}");
        }
    }
}

#[test]
fn fusion_with_zero_global_reduces_to_local_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = 3;
    let w = uniform(&[c * 2 * c], &mut rng).into_data();
    let b = uniform(&[c], &mut rng).into_data();
    let l = uniform(&[2, c, 4, 5], &mut rng);
    let got = run_fusion(&fusion_store(c, &w, &b), &l, &Tensor::zeros(&[2, c, 1, 1]).unwrap());

    let mut store = ParamStore::new();
    let local_w: Vec<f64> = (0..c).flat_map(|co| w[co * 2 * c..co * 2 * c + c].to_vec()).collect();
    store.insert("local.weight", Tensor::new(&[c, c, 1, 1], local_w).unwrap());
    store.insert("local.bias", Tensor::new(&[c], b).unwrap());
    let mut g = Graph::new();
    let lv = g.constant(l);
    let mut ctx = Ctx::new(&mut g, &store, true, BnMode::Train);
    let y = ctx.conv("local", lv, 1, 0).unwrap();
    let y = g.relu(y).unwrap();
    assert_eq!(got.data(), g.value(y).data());
}

#[test]
fn fusion_rejects_mismatched_global() {
    let store = fusion_store(2, &[0.0; 8], &[0.0; 2]);
    let mut g = Graph::new();
    let lv = g.constant(Tensor::zeros(&[2, 2, 3, 3]).unwrap());
    let gv = g.constant(Tensor::zeros(&[1, 2, 1, 1]).unwrap());
    let mut ctx = Ctx::new(&mut g, &store, true, BnMode::Train);
    assert!(fuse_local_global(&mut ctx, "fuse", lv, gv).is_err());
}

#[test]
fn feature_discriminator_logits() {
    let cfg = ModelConfig::desk();
    let d = FeatureDiscriminator::<f32>::build(&cfg, 2).unwrap();
    for (n, h, w) in [(1, 8, 8), (3, 17, 9)] {
        let mut g = Graph::new();
        let x = g.constant(noisy_input(&[n, cfg.base_channels, h, w], 4));
        let mut ctx = Ctx::new(&mut g, &d.store, true, BnMode::Train);
        let z = d.forward(&mut ctx, x, Some(1.0)).unwrap();
        assert_eq!(g.shape(z), &[n, cfg.num_noise_classes]);
    }
    assert_eq!(ModelConfig::full().num_noise_classes, 5);
}

#[test]
fn grl_factor_on_feature_discriminator() {
    let cfg = ModelConfig::micro();
    let d = FeatureDiscriminator::<f64>::build(&cfg, 2).unwrap();
    let feats = uniform(&[3, cfg.base_channels, 6, 6], &mut ChaCha8Rng::seed_from_u64(8));
    let labels = [0, 1, 1];
    let grad = |lambda: Option<f64>| {
        let mut g = Graph::new();
        let x = g.input(feats.clone());
        let mut ctx = Ctx::new(&mut g, &d.store, true, BnMode::Train);
        let z = d.forward(&mut ctx, x, lambda).unwrap();
        let loss = multiclass_ce_loss(&mut g, z, &labels).unwrap();
        let grads = g.backward(loss).unwrap();
        (grads.get(x).unwrap().clone(), g.value(z).clone())
    };
    let (plain, z0) = grad(None);
    for lambda in [1.0, 0.3, 2.5] {
        let (rev, z) = grad(Some(lambda));
        assert_eq!(z.data(), z0.data());
        for (r, p) in rev.data().iter().zip(plain.data()) {
            let want = -lambda * p;
            assert!((r - want).abs() <= 1e-6 * want.abs().max(1e-12));
        }
    }
}

#[test]
fn pixel_discriminator_patch_map() {
    let cfg = ModelConfig::desk();
    let d = PixelDiscriminator::<f32>::build(&cfg, 3).unwrap();
    for ((h, w), (oh, ow)) in [((64, 64), (8, 8)), ((96, 80), (12, 10))] {
        let mut g = Graph::new();
        let x = g.constant(noisy_input(&[2, 3, h, w], 5));
        let mut ctx = Ctx::new(&mut g, &d.store, true, BnMode::Train);
        let z = d.forward(&mut ctx, x).unwrap();
        assert_eq!(g.shape(z), &[2, 1, oh, ow]);
    }
}

#[test]
fn swapping_extractors_keeps_shapes() {
    let cfg = ModelConfig::micro();
    let ch = [cfg.extractor_channels[0], cfg.extractor_channels[1], cfg.extractor_channels[2]];
    let run = |seed: u64| {
        let ext: Arc<dyn FeatureExtractor<f32>> = Arc::new(ConvExtractor::seeded(ch, seed));
        let d = PixelDiscriminator::with_extractor(&cfg, ext, 3).unwrap();
        let mut g = Graph::new();
        let x = g.constant(noisy_input(&[2, 3, 16, 16], 5));
        let mut ctx = Ctx::new(&mut g, &d.store, true, BnMode::Train);
        let z = d.forward(&mut ctx, x).unwrap();
        g.value(z).clone()
    };
    let (a, b) = (run(1), run(2));
    assert_eq!(a.shape(), b.shape());
    assert_ne!(a.data(), b.data());
}

#[test]
fn extractor_identifiers() {
    let ch = [2, 3, 3];
    assert_eq!(extractor_from_id::<f32>("seeded", ch).unwrap().channels(), ch);
    assert_eq!(extractor_from_id::<f32>("seeded:9", ch).unwrap().id(), "seeded:9");
    assert!(matches!(extractor_from_id::<f32>("vgg19", ch), Err(Error::UnknownExtractor(_))));
    assert!(extractor_from_id::<f32>("file:/nonexistent/weights.ckpt", ch).is_err());
}

#[test]
fn extractor_from_malformed_store() {
    let mut store = ParamStore::<f32>::new();
    store.insert("stage1.weight", Tensor::zeros(&[4, 3, 3, 3]).unwrap());
    assert!(matches!(
        ConvExtractor::from_store("x", store),
        Err(Error::CorruptCheckpoint(_))
    ));
}

#[test]
fn perceptual_features_scales_and_determinism() {
    let ext = ConvExtractor::<f32>::seeded([2, 3, 3], DEFAULT_EXTRACTOR_SEED);
    let x = noisy_input(&[1, 3, 16, 12], 6);
    let run = || {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let maps = perceptual_features(&ext, &mut g, v).unwrap();
        maps.map(|m| g.value(m).clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a[0].shape(), &[1, 2, 16, 12]);
    assert_eq!(a[1].shape(), &[1, 3, 8, 6]);
    assert_eq!(a[2].shape(), &[1, 3, 4, 3]);
}

#[test]
fn extractor_is_frozen_but_passes_gradients() {
    let ext = ConvExtractor::<f64>::seeded([2, 3, 3], 1);
    let mut g = Graph::new();
    let x = g.input(uniform(&[1, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(1)));
    let maps = ext.features(&mut g, x).unwrap();
    let s = g.sum_all(maps[2]).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(g.params().is_empty());
    assert!(grads.param_map().is_empty());
    assert!(grads.get(x).unwrap().data().iter().any(|v| *v != 0.0));
}

#[test]
fn extractor_gradcheck_through_image() {
    let ext = ConvExtractor::<f64>::seeded([2, 3, 3], 1);
    for seed in 0..3 {
        let img = uniform(&[1, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(seed));
        let report = crate::autodiff::grad_check(
            &[img],
            |g, v| {
                let maps = ext.features(g, v[0])?;
                let a = crate::verify::probe(g, maps[0], seed)?;
                let b = crate::verify::probe(g, maps[2], seed + 1)?;
                g.add(a, b)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}

#[test]
fn zero_image_gives_bias_response() {
    let ext = ConvExtractor::<f64>::seeded([4, 3, 3], 1);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 12, 12]).unwrap());
    let maps = ext.features(&mut g, x).unwrap();
    let m1 = g.value(maps[0]);
    let bias = ext.store().get("stage1.bias").unwrap();
    for c in 0..4 {
        let want = bias.data()[c].max(0.0);
        assert!(m1.data()[c * 144..(c + 1) * 144].iter().all(|&v| v == want));
    }
    // deeper maps are constant away from the zero-padded border
    for m in [maps[1], maps[2]] {
        let t = g.value(m);
        let s = t.shape().to_vec();
        for c in 0..s[1] {
            let at = |y: usize, x: usize| t.data()[(c * s[2] + y) * s[3] + x];
            let centre = at(s[2] / 2, s[3] / 2);
            for y in 1..s[2] - 1 {
                for x in 1..s[3] - 1 {
                    if s[2] > 2 {
                        assert_eq!(at(y, x), centre);
                    }
                }
            }
        }
    }
}
