//! Parameter storage and the layer helpers networks are assembled from.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// How batch norm layers behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics are left untouched.
    TrainFrozenStats,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of training batches folded in; zero means uninitialized.
    pub updates: u64,
}

/// Ordered named parameters plus batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
    stats: IndexMap<String, RunningStats<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
            stats: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn stats(&self) -> &IndexMap<String, RunningStats<T>> {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut IndexMap<String, RunningStats<T>> {
        &mut self.stats
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Conv weight `(out, in, k, k)` with He fan-in init plus zero bias.
    pub fn add_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) {
        let fan_in = cin * k * k;
        self.insert(format!("{name}.weight"), he_normal(&[cout, cin, k, k], fan_in, rng));
        self.insert(format!("{name}.bias"), Tensor::from_parts(vec![cout], vec![T::zero(); cout]));
    }

    /// Dense weight `(in, out)` with He fan-in init plus zero bias.
    pub fn add_linear(&mut self, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) {
        self.insert(format!("{name}.weight"), he_normal(&[cin, cout], cin, rng));
        self.insert(format!("{name}.bias"), Tensor::from_parts(vec![cout], vec![T::zero(); cout]));
    }

    pub fn add_bn(&mut self, name: &str, c: usize) {
        self.insert(format!("{name}.gamma"), Tensor::from_parts(vec![c], vec![T::one(); c]));
        self.insert(format!("{name}.beta"), Tensor::from_parts(vec![c], vec![T::zero(); c]));
        self.stats.insert(
            name.to_string(),
            RunningStats {
                mean: vec![T::zero(); c],
                var: vec![T::one(); c],
                updates: 0,
            },
        );
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect();
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            stats: self
                .stats
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: conv(&s.mean),
                            var: conv(&s.var),
                            updates: s.updates,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Folds training-mode batch statistics into the running averages.
    /// The running variance uses the unbiased batch variance.
    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<T>>) -> Result<()> {
        let mom = T::lit(BN_MOMENTUM);
        for u in updates {
            let s = self
                .stats
                .get_mut(&u.layer)
                .ok_or_else(|| Error::UnknownParameter(u.layer.clone()))?;
            let m = T::from_usize(u.count).unwrap();
            let unbias = m / (m - T::one());
            for c in 0..s.mean.len() {
                s.mean[c] = (T::one() - mom) * s.mean[c] + mom * u.mean[c];
                s.var[c] = (T::one() - mom) * s.var[c] + mom * u.var[c] * unbias;
            }
            s.updates += 1;
        }
        Ok(())
    }
}

fn he_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Pending running-statistics update from one training-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub layer: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Binds a [`ParamStore`] into a [`Graph`] for one forward pass.
pub struct Ctx<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    trainable: bool,
    mode: BnMode,
    bound: IndexMap<String, Var>,
    updates: Vec<StatUpdate<T>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    /// Parameters enter the graph as named trainable leaves when
    /// `trainable`, otherwise as constants.
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, trainable: bool, mode: BnMode) -> Self {
        Ctx {
            g,
            store,
            trainable,
            mode,
            bound: IndexMap::new(),
            updates: Vec::new(),
        }
    }

    /// Uses caller-provided nodes for the named parameters instead of
    /// copying them from the store.
    pub fn with_bound(mut self, bound: IndexMap<String, Var>) -> Self {
        self.bound = bound;
        self
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?;
        let v = if self.trainable {
            self.g.param(name, t)
        } else {
            self.g.constant(t.clone())
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv(&mut self, name: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let bname = format!("{name}.bias");
        let b = if self.store.contains(&bname) || self.bound.contains_key(&bname) {
            Some(self.param(&bname)?)
        } else {
            None
        };
        self.g.conv2d(x, w, b, stride, padding)
    }

    /// `x (N, in) @ W (in, out) + b`.
    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add(y, b)
    }

    pub fn bn(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let eps = T::lit(BN_EPS);
        match self.mode {
            BnMode::Eval => {
                let s = self
                    .store
                    .stats()
                    .get(name)
                    .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
                if s.updates == 0 {
                    return Err(Error::UninitializedStats(name.to_string()));
                }
                self.g.batch_norm_eval(x, gamma, beta, &s.mean, &s.var, eps)
            }
            BnMode::Train | BnMode::TrainFrozenStats => {
                let (y, st) = self.g.batch_norm_train(x, gamma, beta, eps)?;
                if self.mode == BnMode::Train {
                    self.updates.push(StatUpdate {
                        layer: name.to_string(),
                        mean: st.mean,
                        var: st.var,
                        count: st.count,
                    });
                }
                Ok(y)
            }
        }
    }

    /// Releases the graph borrow and returns the pending statistics updates.
    pub fn finish(self) -> Vec<StatUpdate<T>> {
        self.updates
    }
}
