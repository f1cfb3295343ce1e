//! Fresh domain classifiers fitted on frozen samples, used to estimate
//! how separable the domains are.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::Adam;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::losses::{argmax_rows, h_divergence_estimate, multiclass_ce_loss, per_domain_zero_one, HDivergence};
use crate::nn::{BnMode, Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 200,
            batch_size: 32,
            lr: 1e-2,
            hidden: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeScore {
    pub per_domain_loss: Vec<f64>,
    pub accuracy: f64,
    pub hdiv: HDivergence,
}

/// Classifier over `(N, D)` vectors (two-layer MLP) or `(N, C, H, W)`
/// maps (stride-2 conv, ReLU, global pool, two-layer head).
pub struct DomainProbe {
    store: ParamStore<f32>,
    spatial: bool,
    classes: usize,
}

impl DomainProbe {
    pub fn new(sample_shape: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let spatial = match sample_shape {
            [d] => {
                store.add_linear("probe.fc1", *d, cfg.hidden, &mut rng);
                false
            }
            [c, _, _] => {
                store.add_conv("probe.conv", *c, cfg.hidden, 3, &mut rng);
                store.add_linear("probe.fc1", cfg.hidden, cfg.hidden, &mut rng);
                true
            }
            other => {
                return Err(Error::InvalidShape {
                    shape: other.to_vec(),
                    reason: "probe samples must be vectors or CHW maps".into(),
                })
            }
        };
        store.add_linear("probe.fc2", cfg.hidden, classes, &mut rng);
        Ok(DomainProbe {
            store,
            spatial,
            classes,
        })
    }

    fn logits(&self, ctx: &mut Ctx<'_, f32>, x: crate::autodiff::Var) -> Result<crate::autodiff::Var> {
        let mut h = x;
        if self.spatial {
            h = ctx.conv("probe.conv", h, 2, 1)?;
            h = ctx.g.relu(h)?;
            h = ctx.g.global_avg_pool(h)?;
            let s = ctx.g.shape(h).to_vec();
            h = ctx.g.reshape(h, &[s[0], s[1]])?;
        }
        h = ctx.linear("probe.fc1", h)?;
        h = ctx.g.relu(h)?;
        ctx.linear("probe.fc2", h)
    }

    pub fn fit(&mut self, x: &Tensor<f32>, labels: &[usize], cfg: &ProbeConfig) -> Result<()> {
        let n = x.shape()[0];
        if n != labels.len() || n == 0 {
            return Err(Error::shape("probe fit", &[n], &[labels.len()]));
        }
        let mut opt = Adam::<f32>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa11ce);
        let mut order: Vec<usize> = (0..n).collect();
        let bs = cfg.batch_size.min(n);
        let mut cursor = n;
        for _ in 0..cfg.steps {
            if cursor + bs > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + bs];
            cursor += bs;
            let xb = gather(x, idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let xv = g.constant(xb);
            let mut ctx = Ctx::new(&mut g, &self.store, true, BnMode::Train);
            let z = self.logits(&mut ctx, xv)?;
            ctx.finish();
            let loss = multiclass_ce_loss(&mut g, z, &yb)?;
            let grads = g.backward(loss)?.param_map();
            opt.step(&mut self.store, &grads, cfg.lr)?;
        }
        Ok(())
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut ctx = Ctx::new(&mut g, &self.store, false, BnMode::Train);
        let z = self.logits(&mut ctx, xv)?;
        ctx.finish();
        Ok(argmax_rows(g.value(z).data(), self.classes))
    }
}

/// Rows `idx` of a batch-major tensor.
pub fn gather(x: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let per: usize = x.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data).unwrap()
}

/// Scores already-made predictions against held-out labels.
pub fn score(predicted: &[usize], labels: &[usize], classes: usize) -> Result<ProbeScore> {
    let per_domain_loss = per_domain_zero_one(predicted, labels, classes)?;
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(ProbeScore {
        hdiv: h_divergence_estimate(&per_domain_loss)?,
        per_domain_loss,
        accuracy: correct as f64 / labels.len() as f64,
    })
}

/// Fits a fresh probe on the training split and scores it on the
/// held-out split.
pub fn probe_divergence(
    train_x: &Tensor<f32>,
    train_y: &[usize],
    test_x: &Tensor<f32>,
    test_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeScore> {
    let mut probe = DomainProbe::new(&train_x.shape()[1..], classes, cfg)?;
    probe.fit(train_x, train_y, cfg)?;
    score(&probe.predict(test_x)?, test_y, classes)
}
