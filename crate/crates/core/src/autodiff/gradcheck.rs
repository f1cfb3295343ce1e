//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// `(input, factor)` pairs whose analytic gradient is expected to be
    /// `factor` times the finite difference, as behind a gradient reversal.
    pub input_factors: Vec<(usize, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-3,
            tolerance: 1e-4,
            max_coords: None,
            seed: 0,
            input_factors: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a non-differentiable point.
    pub skipped_kinks: usize,
    /// Checked coordinates whose error reached the tolerance.
    pub over_tolerance: usize,
    /// Max error after re-differencing every over-tolerance coordinate at
    /// `eps / 10`. A drop by roughly 100x marks central-difference
    /// truncation rather than a wrong analytic gradient.
    pub refined_max_rel_error: f64,
    /// `(input, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub tolerance: f64,
    /// Parameters verified to have a vanishing gradient instead of being
    /// swept (see `verify::grad_check_params`).
    pub invariant_checked: usize,
    pub invariant_max_grad: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0
            && self.max_rel_error < self.tolerance
            && self.invariant_max_grad <= crate::verify::INVARIANT_GRAD_BOUND
    }

    /// Like [`passed`](Self::passed) but judged on the refined errors.
    pub fn passed_refined(&self) -> bool {
        self.checked > 0
            && self.refined_max_rel_error < self.tolerance
            && self.invariant_max_grad <= crate::verify::INVARIANT_GRAD_BOUND
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

fn evaluate<F>(inputs: &[Tensor<f64>], build: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok((g.value(loss).item()?, g.kink_signature()))
}

/// Compares the analytic gradient of the scalar built by `build` against
/// central differences `(f(x+eps) - f(x-eps)) / (2 eps)` for every
/// coordinate of every input. The error per coordinate is
/// `|analytic - numeric| / max(|numeric|, 1e-8)`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let base = g.value(loss).item()?;
    let signature = g.kink_signature();
    let grads = g.backward(loss)?;

    let (again, sig_again) = evaluate(inputs, &build)?;
    if again.to_bits() != base.to_bits() || sig_again != signature {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        tolerance: opts.tolerance,
        ..Default::default()
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let len = inputs[i].len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < len => {
                let mut c = sample(&mut rng, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        let analytic = grads.get(*var);
        for c in coords {
            let orig = inputs[i].data()[c];
            work[i].data_mut()[c] = orig + opts.eps;
            let (fp, sp) = evaluate(&work, &build)?;
            work[i].data_mut()[c] = orig - opts.eps;
            let (fm, sm) = evaluate(&work, &build)?;
            work[i].data_mut()[c] = orig;
            if sp != signature || sm != signature {
                report.skipped_kinks += 1;
                continue;
            }
            let factor = opts
                .input_factors
                .iter()
                .find(|(k, _)| *k == i)
                .map_or(1.0, |&(_, f)| f);
            let numeric = factor * (fp - fm) / (2.0 * opts.eps);
            let a = analytic.map(|t| t.data()[c]).unwrap_or(0.0);
            let rel = relative_error(a, numeric);
            report.checked += 1;
            let mut refined = rel;
            if rel >= opts.tolerance {
                report.over_tolerance += 1;
                let h = opts.eps / 10.0;
                work[i].data_mut()[c] = orig + h;
                let (fp, sp) = evaluate(&work, &build)?;
                work[i].data_mut()[c] = orig - h;
                let (fm, sm) = evaluate(&work, &build)?;
                work[i].data_mut()[c] = orig;
                if sp == signature && sm == signature {
                    refined = relative_error(a, factor * (fp - fm) / (2.0 * h));
                }
            }
            report.refined_max_rel_error = report.refined_max_rel_error.max(refined);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((i, c, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
