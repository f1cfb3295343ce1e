//! Training losses for both priors and the classifier-induced domain
//! divergence diagnostic.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const DEFAULT_LAMBDA1: f64 = 0.001;
pub const DEFAULT_LAMBDA2: f64 = 0.001;

/// Mean absolute difference over every entry.
pub fn l1_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape("l1_loss", g.shape(pred), g.shape(target)));
    }
    let d = g.sub(pred, target)?;
    let d = g.abs(d)?;
    g.mean_all(d)
}

/// Mean cross entropy of `(N, m)` logits against class indices.
pub fn multiclass_ce_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// Mean BCE over every location of an `(N, 1, h, w)` logit map, all
/// carrying the label `label` (1 for denoised, 0 for clean).
pub fn patch_bce_loss<T: Real>(g: &mut Graph<T>, logit_map: Var, label: T) -> Result<Var> {
    let s = g.shape(logit_map);
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "patch logit map must be (N, 1, h, w)".into(),
        });
    }
    g.bce_with_logits(logit_map, label)
}

/// `L1 + lambda1 * prior`.
pub fn combined_feat_loss<T: Real>(g: &mut Graph<T>, l1: Var, prior: Var, lambda1: T) -> Result<Var> {
    let p = g.scale(prior, lambda1)?;
    g.add(l1, p)
}

/// `L1 + lambda2 * adv`.
pub fn combined_pix_loss<T: Real>(g: &mut Graph<T>, l1: Var, adv: Var, lambda2: T) -> Result<Var> {
    let p = g.scale(adv, lambda2)?;
    g.add(l1, p)
}

/// Patch-GAN objectives from logit maps on denoised and clean images.
/// Returns `(disc_loss, gen_loss)` where the discriminator labels denoised
/// patches 1 and clean patches 0, and the generator term flips the label
/// on its own output.
pub fn adversarial_objectives<T: Real>(
    g: &mut Graph<T>,
    on_denoised: Var,
    on_clean: Var,
) -> Result<(Var, Var)> {
    let fake = patch_bce_loss(g, on_denoised, T::one())?;
    let real = patch_bce_loss(g, on_clean, T::zero())?;
    let disc = g.add(fake, real)?;
    let gen = patch_bce_loss(g, on_denoised, T::zero())?;
    Ok((disc, gen))
}

/// Domain divergence estimate with the unclamped value kept alongside.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HDivergence {
    pub raw: f64,
    pub clamped: f64,
}

/// `2 (1 - sum_k loss_k)` where `loss_k` is the best domain classifier's
/// mean 0-1 loss on held-out samples of domain `k`.
pub fn h_divergence_estimate(per_domain_mean_losses: &[f64]) -> Result<HDivergence> {
    if per_domain_mean_losses.is_empty() {
        return Err(Error::EmptyDataset("no domains for the divergence estimate".into()));
    }
    if let Some(&bad) = per_domain_mean_losses.iter().find(|v| !v.is_finite()) {
        return Err(Error::Config(format!("per-domain loss {bad} is not finite")));
    }
    let raw = 2.0 * (1.0 - per_domain_mean_losses.iter().sum::<f64>());
    Ok(HDivergence {
        raw,
        clamped: raw.clamp(-2.0, 2.0),
    })
}

/// Per-domain mean 0-1 loss of `predicted` against `labels` over
/// `classes` domains. Every domain must have at least one sample.
pub fn per_domain_zero_one(predicted: &[usize], labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    if predicted.len() != labels.len() {
        return Err(Error::shape("per_domain_zero_one", &[predicted.len()], &[labels.len()]));
    }
    let mut wrong = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for (&p, &l) in predicted.iter().zip(labels) {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        count[l] += 1;
        if p != l {
            wrong[l] += 1;
        }
    }
    if let Some(k) = count.iter().position(|&c| c == 0) {
        return Err(Error::EmptyDataset(format!("domain {k} has no samples")));
    }
    Ok(wrong.iter().zip(&count).map(|(&w, &c)| w as f64 / c as f64).collect())
}

/// Row-wise argmax of an `(N, m)` logit table.
pub fn argmax_rows<T: Real>(logits: &[T], m: usize) -> Vec<usize> {
    logits
        .chunks(m)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
