//! Adam with bias correction and the single-cycle cosine schedule.

use indexmap::IndexMap;

use crate::autodiff::GradientMap;
use crate::checkpoint::OptimizerSnapshot;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: IndexMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Adam::new(ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
    }
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    /// One update of every parameter in `store`. `grads` must name exactly
    /// the parameters of `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradientMap<T>, lr: f64) -> Result<()> {
        for name in grads.keys() {
            if !store.contains(name) {
                return Err(Error::UnknownParameter(name.clone()));
            }
        }
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in &names {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Config(format!("no gradient for parameter {name}")))?;
            let p = store.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for name in names {
            let g = &grads[&name];
            let p = store.get_mut(&name)?;
            let (m, v) = self.moments.entry(name).or_insert_with(|| {
                let z = Tensor::from_parts(p.shape().to_vec(), vec![T::zero(); p.len()]);
                (z.clone(), z)
            });
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

impl Adam<f32> {
    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            step: self.step,
            moments: self.moments.clone(),
        }
    }

    pub fn restore(&mut self, snap: &OptimizerSnapshot) {
        self.step = snap.step;
        self.moments = snap.moments.clone();
    }
}

/// `0.5 * lr0 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let t = step as f64 / total_steps as f64;
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos()))
}
