//! Gradient-check suites over the primitives, the network blocks, and the
//! full training losses.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Graph, Var};
use crate::error::Result;
use crate::losses;
use crate::model::{
    fuse_local_global, residual_block_preact, FeatureDiscriminator, ModelConfig, PixelDiscriminator,
    TransformNet,
};
use crate::nn::{BnMode, Ctx, ParamStore};
use crate::tensor::Tensor;

/// Largest analytic gradient entry tolerated on a parameter the loss is
/// invariant to.
pub const INVARIANT_GRAD_BOUND: f64 = 1e-10;

/// Finite-difference check over `extra` inputs plus every parameter of
/// `stores`. The builder receives the parameter nodes by name and the
/// extra input nodes in order.
///
/// Parameters named in `invariant` (a conv bias feeding a batch-statistics
/// normalization) leave the loss unchanged, so their central difference is
/// pure round-off. They are excluded from the finite-difference sweep and
/// their analytic gradient must instead vanish to [`INVARIANT_GRAD_BOUND`].
pub fn grad_check_params<F>(
    stores: &[&ParamStore<f64>],
    extra: &[Tensor<f64>],
    invariant: &[String],
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &IndexMap<String, Var>, &[Var]) -> Result<Var>,
{
    let mut names = Vec::new();
    let mut inputs: Vec<Tensor<f64>> = extra.to_vec();
    for s in stores {
        for (k, v) in s.params() {
            names.push(k.clone());
            inputs.push(v.clone());
        }
    }
    let n_extra = extra.len();
    let mut report = grad_check(
        &inputs,
        |g, vars| {
            let bound: IndexMap<String, Var> = names
                .iter()
                .zip(&vars[n_extra..])
                .filter(|(n, _)| !invariant.contains(n))
                .map(|(n, v)| (n.clone(), *v))
                .collect();
            build(g, &bound, &vars[..n_extra])
        },
        opts,
    )?;
    if !invariant.is_empty() {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let bound: IndexMap<String, Var> = names.iter().cloned().zip(vars[n_extra..].iter().copied()).collect();
        let loss = build(&mut g, &bound, &vars[..n_extra])?;
        let grads = g.backward(loss)?;
        for name in invariant {
            let v = bound
                .get(name)
                .ok_or_else(|| crate::Error::UnknownParameter(name.clone()))?;
            let worst = grads
                .get(*v)
                .map(|t| t.data().iter().fold(0.0f64, |m, x| m.max(x.abs())))
                .unwrap_or(0.0);
            report.invariant_max_grad = report.invariant_max_grad.max(worst);
            report.invariant_checked += 1;
        }
    }
    Ok(report)
}

/// Names of conv biases that are immediately normalized by batch
/// statistics in the residual blocks and pixel discriminator.
pub fn bn_absorbed_biases(store: &ParamStore<f64>) -> Vec<String> {
    store
        .names()
        .filter(|n| n.ends_with(".conv1.bias") || (n.starts_with("pdisc.block") && n.ends_with(".conv.bias")))
        .map(String::from)
        .collect()
}

pub fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(out * r)` for a fixed random `r`.
pub fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = uniform(g.shape(out), &mut rng);
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    g.sum_all(p)
}

fn bound_ctx<'a>(
    g: &'a mut Graph<f64>,
    store: &'a ParamStore<f64>,
    bound: &IndexMap<String, Var>,
) -> Ctx<'a, f64> {
    Ctx::new(g, store, true, BnMode::TrainFrozenStats).with_bound(bound.clone())
}

/// Randomizes BN affine parameters so the check does not sit at the
/// identity initialization.
fn perturb_affine(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.ends_with(".gamma") || n.ends_with(".beta") || n.ends_with(".bias"))
        .map(String::from)
        .collect();
    for n in names {
        let t = store.get_mut(&n).unwrap();
        for v in t.data_mut() {
            *v = if n.ends_with(".gamma") {
                rng.random_range(0.5..1.5)
            } else {
                rng.random_range(-0.5..0.5)
            };
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Primitives,
    Blocks,
    End2End,
}

impl std::str::FromStr for Scope {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primitives" => Ok(Scope::Primitives),
            "blocks" => Ok(Scope::Blocks),
            "end2end" => Ok(Scope::End2End),
            other => Err(crate::Error::Config(format!("unknown gradcheck scope `{other}`"))),
        }
    }
}

pub struct CaseResult {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

pub const SUITE_SEEDS: [u64; 5] = [11, 22, 33, 44, 55];

fn away_from_zero(t: &mut Tensor<f64>, margin: f64) {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = v.signum().max(0.0) * 2.0 * margin - margin;
        }
    }
}

type Case = (&'static str, Box<dyn Fn(u64) -> Result<GradCheckReport>>);

fn primitive_cases(opts: GradCheckOptions) -> Vec<Case> {
    fn unary(
        opts: GradCheckOptions,
        shape: &'static [usize],
        kink: bool,
        f: fn(&mut Graph<f64>, Var) -> Result<Var>,
    ) -> Box<dyn Fn(u64) -> Result<GradCheckReport>> {
        Box::new(move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = uniform(shape, &mut rng);
            if kink {
                away_from_zero(&mut x, 10.0 * opts.eps);
            }
            grad_check(
                &[x],
                |g, v| {
                    let o = f(g, v[0])?;
                    probe(g, o, seed)
                },
                &opts,
            )
        })
    }
    fn binary(
        opts: GradCheckOptions,
        sa: &'static [usize],
        sb: &'static [usize],
        f: fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
    ) -> Box<dyn Fn(u64) -> Result<GradCheckReport>> {
        Box::new(move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = uniform(sa, &mut rng);
            let b = uniform(sb, &mut rng);
            grad_check(
                &[a, b],
                |g, v| {
                    let o = f(g, v[0], v[1])?;
                    probe(g, o, seed)
                },
                &opts,
            )
        })
    }
    let o = opts;
    vec![
        ("add", binary(o.clone(), &[2, 3, 4], &[2, 3, 4], |g, a, b| g.add(a, b))),
        ("add_broadcast", binary(o.clone(), &[2, 3, 4, 4], &[1, 3, 1, 1], |g, a, b| g.add(a, b))),
        ("sub", binary(o.clone(), &[2, 3, 4], &[1], |g, a, b| g.sub(a, b))),
        ("mul", binary(o.clone(), &[2, 3, 4], &[2, 3, 4], |g, a, b| g.mul(a, b))),
        ("mul_broadcast", binary(o.clone(), &[2, 3, 2, 2], &[2, 1, 2, 2], |g, a, b| g.mul(a, b))),
        ("scale", unary(o.clone(), &[3, 5], false, |g, a| g.scale(a, -1.3))),
        ("neg", unary(o.clone(), &[3, 5], false, |g, a| g.neg(a))),
        ("relu", unary(o.clone(), &[3, 5], true, |g, a| g.relu(a))),
        ("leaky_relu", unary(o.clone(), &[3, 5], true, |g, a| g.leaky_relu(a, 0.2))),
        ("sigmoid", unary(o.clone(), &[3, 5], false, |g, a| g.sigmoid(a))),
        ("abs", unary(o.clone(), &[3, 5], true, |g, a| g.abs(a))),
        ("sum", unary(o.clone(), &[2, 3, 4], false, |g, a| g.sum(a, &[0, 2]))),
        ("mean", unary(o.clone(), &[2, 3, 4], false, |g, a| g.mean(a, &[1]))),
        ("broadcast_to", unary(o.clone(), &[2, 3, 1, 1], false, |g, a| g.broadcast_to(a, &[2, 3, 3, 2]))),
        ("reshape", unary(o.clone(), &[2, 3, 1, 1], false, |g, a| g.reshape(a, &[2, 3]))),
        ("global_avg_pool", unary(o.clone(), &[2, 3, 3, 4], false, |g, a| g.global_avg_pool(a))),
        (
            "grad_reverse",
            Box::new({
                let opts = GradCheckOptions {
                    input_factors: vec![(0, -0.7)],
                    ..o.clone()
                };
                move |seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let x = uniform(&[2, 3], &mut rng);
                    grad_check(
                        &[x],
                        |g, v| {
                            let y = g.grad_reverse(v[0], 0.7)?;
                            let y = g.sigmoid(y)?;
                            probe(g, y, seed)
                        },
                        &opts,
                    )
                }
            }),
        ),
        ("concat", binary(o.clone(), &[2, 2, 3, 3], &[2, 1, 3, 3], |g, a, b| g.concat(&[a, b]))),
        ("matmul", binary(o.clone(), &[3, 4], &[4, 2], |g, a, b| g.matmul(a, b))),
        (
            "conv2d",
            Box::new({
                let opts = o.clone();
                move |seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let x = uniform(&[2, 2, 5, 5], &mut rng);
                    let w = uniform(&[3, 2, 3, 3], &mut rng);
                    let b = uniform(&[3], &mut rng);
                    grad_check(
                        &[x, w, b],
                        |g, v| {
                            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                            probe(g, y, seed)
                        },
                        &opts,
                    )
                }
            }),
        ),
        (
            "batch_norm_train",
            Box::new({
                let opts = o.clone();
                move |seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let x = uniform(&[4, 2, 3, 3], &mut rng);
                    let gm = uniform(&[2], &mut rng);
                    let bt = uniform(&[2], &mut rng);
                    grad_check(
                        &[x, gm, bt],
                        |g, v| {
                            let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                            probe(g, y, seed)
                        },
                        &opts,
                    )
                }
            }),
        ),
        (
            "batch_norm_eval",
            Box::new({
                let opts = o.clone();
                move |seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let x = uniform(&[4, 2, 3, 3], &mut rng);
                    let gm = uniform(&[2], &mut rng);
                    let bt = uniform(&[2], &mut rng);
                    grad_check(
                        &[x, gm, bt],
                        |g, v| {
                            let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.3], &[0.7, 1.4], 1e-5)?;
                            probe(g, y, seed)
                        },
                        &opts,
                    )
                }
            }),
        ),
        (
            "cross_entropy",
            Box::new({
                let opts = o.clone();
                move |seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let z = uniform(&[4, 5], &mut rng);
                    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
                    grad_check(&[z], |g, v| losses::multiclass_ce_loss(g, v[0], &labels), &opts)
                }
            }),
        ),
        (
            "patch_bce",
            Box::new({
                let opts = o.clone();
                move |seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let z = uniform(&[2, 1, 3, 3], &mut rng);
                    let label = (seed % 2) as f64;
                    grad_check(&[z], |g, v| losses::patch_bce_loss(g, v[0], label), &opts)
                }
            }),
        ),
        (
            "l1",
            Box::new({
                let opts = o;
                move |seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let a = uniform(&[2, 3, 2, 2], &mut rng);
                    let mut b = uniform(&[2, 3, 2, 2], &mut rng);
                    // keep |a - b| away from the kink
                    for (x, y) in a.data().iter().zip(b.data_mut()) {
                        if (x - *y).abs() < 0.05 {
                            *y = x + 0.1;
                        }
                    }
                    grad_check(&[a, b], |g, v| losses::l1_loss(g, v[0], v[1]), &opts)
                }
            }),
        ),
    ]
}

const FDISC_LAMBDA: f64 = 0.5;

fn block_cases(opts: GradCheckOptions) -> Vec<Case> {
    let cfg = ModelConfig::micro();
    let c1 = cfg.clone();
    let o1 = opts.clone();
    let residual: Box<dyn Fn(u64) -> Result<GradCheckReport>> = Box::new(move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        crate::model::add_residual_block(&mut store, "blk", c1.base_channels, &mut ChaCha8Rng::seed_from_u64(seed));
        perturb_affine(&mut store, &mut rng);
        let x = uniform(&[2, c1.base_channels, 4, 4], &mut rng);
        grad_check_params(
            &[&store],
            &[x],
            &bn_absorbed_biases(&store),
            |g, bound, ex| {
                let mut ctx = bound_ctx(g, &store, bound);
                let y = residual_block_preact(&mut ctx, "blk", ex[0])?;
                probe(ctx.g, y, seed)
            },
            &o1,
        )
    });
    let c2 = cfg.clone();
    let o2 = opts.clone();
    let fusion: Box<dyn Fn(u64) -> Result<GradCheckReport>> = Box::new(move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = c2.base_channels;
        let mut store = ParamStore::<f64>::new();
        store.add_conv("fuse", 2 * c, c, 1, &mut rng);
        perturb_affine(&mut store, &mut rng);
        let l = uniform(&[2, c, 3, 3], &mut rng);
        let gl = uniform(&[2, c, 1, 1], &mut rng);
        grad_check_params(
            &[&store],
            &[l, gl],
            &[],
            |g, bound, ex| {
                let mut ctx = bound_ctx(g, &store, bound);
                let y = fuse_local_global(&mut ctx, "fuse", ex[0], ex[1])?;
                probe(ctx.g, y, seed)
            },
            &o2,
        )
    });
    let c3 = cfg.clone();
    let o3 = GradCheckOptions {
        input_factors: vec![(0, -FDISC_LAMBDA)],
        ..opts.clone()
    };
    let fdisc: Box<dyn Fn(u64) -> Result<GradCheckReport>> = Box::new(move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = FeatureDiscriminator::<f64>::build(&c3, seed)?;
        perturb_affine(&mut d.store, &mut rng);
        let feats = uniform(&[3, c3.base_channels, 4, 4], &mut rng);
        let labels: Vec<usize> = (0..3).map(|i| i % c3.num_noise_classes).collect();
        grad_check_params(
            &[&d.store],
            &[feats],
            &[],
            |g, bound, ex| {
                let mut ctx = bound_ctx(g, &d.store, bound);
                let z = d.forward(&mut ctx, ex[0], Some(FDISC_LAMBDA))?;
                losses::multiclass_ce_loss(ctx.g, z, &labels)
            },
            &o3,
        )
    });
    let c4 = cfg;
    let o4 = opts;
    let pdisc: Box<dyn Fn(u64) -> Result<GradCheckReport>> = Box::new(move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = PixelDiscriminator::<f64>::build(&c4, seed)?;
        perturb_affine(&mut d.store, &mut rng);
        let img = uniform(&[2, 3, 16, 16], &mut rng);
        grad_check_params(
            &[&d.store],
            &[img],
            &bn_absorbed_biases(&d.store),
            |g, bound, ex| {
                let mut ctx = bound_ctx(g, &d.store, bound);
                let z = d.forward(&mut ctx, ex[0])?;
                probe(ctx.g, z, seed)
            },
            &o4,
        )
    });
    vec![
        ("residual_block", residual),
        ("fusion", fusion),
        ("feature_discriminator", fdisc),
        ("pixel_discriminator", pdisc),
    ]
}

fn end2end_cases(opts: GradCheckOptions) -> Vec<Case> {
    let cfg = ModelConfig::micro();
    let c1 = cfg.clone();
    let o1 = opts.clone();
    let feat: Box<dyn Fn(u64) -> Result<GradCheckReport>> = Box::new(move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = TransformNet::<f64>::build(&c1, seed)?;
        let mut d = FeatureDiscriminator::<f64>::build(&c1, seed + 1)?;
        perturb_affine(&mut net.store, &mut rng);
        perturb_affine(&mut d.store, &mut rng);
        let noisy = uniform(&[2, 3, 6, 6], &mut rng);
        let clean = uniform(&[2, 3, 6, 6], &mut rng);
        let labels = [0usize, 1];
        grad_check_params(
            &[&net.store, &d.store],
            &[noisy, clean],
            &[bn_absorbed_biases(&net.store), bn_absorbed_biases(&d.store)].concat(),
            |g, bound, ex| {
                let mut ctx = bound_ctx(g, &net.store, bound);
                let out = net.forward(&mut ctx, ex[0])?;
                let mut ctx = bound_ctx(g, &d.store, bound);
                // L_feat itself; the reversal only alters the update direction
                let z = d.forward(&mut ctx, out.fused, None)?;
                let prior = losses::multiclass_ce_loss(g, z, &labels)?;
                let l1 = losses::l1_loss(g, out.denoised, ex[1])?;
                losses::combined_feat_loss(g, l1, prior, 0.001)
            },
            &o1,
        )
    });
    let c2 = cfg;
    let o2 = opts;
    let pix: Box<dyn Fn(u64) -> Result<GradCheckReport>> = Box::new(move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = TransformNet::<f64>::build(&c2, seed)?;
        let mut d = PixelDiscriminator::<f64>::build(&c2, seed + 1)?;
        perturb_affine(&mut net.store, &mut rng);
        perturb_affine(&mut d.store, &mut rng);
        let noisy = uniform(&[2, 3, 16, 16], &mut rng);
        let clean = uniform(&[2, 3, 16, 16], &mut rng);
        grad_check_params(
            &[&net.store, &d.store],
            &[noisy, clean],
            &[bn_absorbed_biases(&net.store), bn_absorbed_biases(&d.store)].concat(),
            |g, bound, ex| {
                let mut ctx = bound_ctx(g, &net.store, bound);
                let out = net.forward(&mut ctx, ex[0])?;
                let mut ctx = bound_ctx(g, &d.store, bound);
                let z = d.forward(&mut ctx, out.denoised)?;
                let adv = losses::patch_bce_loss(g, z, 0.0)?;
                let l1 = losses::l1_loss(g, out.denoised, ex[1])?;
                losses::combined_pix_loss(g, l1, adv, 0.001)
            },
            &o2,
        )
    });
    vec![("L_feat", feat), ("L_pix", pix)]
}

/// Runs every case of `scope` for each of `seeds`.
pub fn run_suite(scope: Scope, seeds: &[u64], opts: &GradCheckOptions) -> Result<Vec<CaseResult>> {
    let cases = match scope {
        Scope::Primitives => primitive_cases(opts.clone()),
        Scope::Blocks => block_cases(opts.clone()),
        Scope::End2End => end2end_cases(opts.clone()),
    };
    let mut out = Vec::new();
    for (name, case) in cases {
        for &seed in seeds {
            out.push(CaseResult {
                name: name.to_string(),
                seed,
                report: case(seed)?,
            });
        }
    }
    Ok(out)
}
