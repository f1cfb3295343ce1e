//! Test-set evaluation and the noise-level sensitivity sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{psnr, ssim};
use crate::data::{add_awgn, ImageBuffer};
use crate::error::{Error, Result};
use crate::model::TransformNet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub sigma: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    /// PSNR of the noisy input against the clean image.
    pub psnr_noisy_db: f64,
}

/// Noise for image `index` at `sigma` depends only on `(seed, sigma,
/// index)`, so any subset of levels reproduces the same corruption.
pub fn eval_noise(clean: &ImageBuffer, sigma: f64, seed: u64, index: usize) -> Result<ImageBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ sigma.to_bits());
    rng.set_stream(index as u64);
    add_awgn(clean, sigma, &mut rng)
}

/// Eval-mode denoising of one image, clamped to `[0, 1]`.
pub fn denoise_image(net: &TransformNet<f32>, noisy: &ImageBuffer) -> Result<ImageBuffer> {
    let rgb = noisy.to_rgb();
    let out = net.denoise(&rgb.to_tensor())?;
    Ok(ImageBuffer::from_tensor(&out, 0, noisy.source_id.clone())?.map(|v| v.clamp(0.0, 1.0)))
}

/// Corrupts, denoises and scores every image; metrics are averaged in
/// index order.
pub fn evaluate_at_sigma(net: &TransformNet<f32>, clean: &[ImageBuffer], sigma: f64, seed: u64) -> Result<EvalRow> {
    if clean.is_empty() {
        return Err(Error::EmptyDataset("empty test set".into()));
    }
    let (mut p, mut s, mut pn) = (0.0, 0.0, 0.0);
    for (i, img) in clean.iter().enumerate() {
        let img = img.to_rgb();
        let noisy = eval_noise(&img, sigma, seed, i)?;
        let den = denoise_image(net, &noisy)?;
        p += psnr(&den, &img, 1.0)?;
        s += ssim(&den, &img)?;
        pn += psnr(&noisy, &img, 1.0)?;
    }
    let n = clean.len() as f64;
    Ok(EvalRow {
        sigma,
        psnr_db: p / n,
        ssim: s / n,
        psnr_noisy_db: pn / n,
    })
}

pub fn evaluate(net: &TransformNet<f32>, clean: &[ImageBuffer], sigmas: &[f64], seed: u64) -> Result<Vec<EvalRow>> {
    sigmas.iter().map(|&s| evaluate_at_sigma(net, clean, s, seed)).collect()
}

/// `(sigma, mean PSNR)` rows in ascending sigma order.
pub fn noise_sensitivity_sweep(
    net: &TransformNet<f32>,
    clean: &[ImageBuffer],
    sigmas: &[f64],
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if let Some(&bad) = sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::Config(format!("sweep sigma {bad} must be positive")));
    }
    let mut sorted = sigmas.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .into_iter()
        .map(|s| Ok((s, evaluate_at_sigma(net, clean, s, seed)?.psnr_db)))
        .collect()
}

/// `steps` evenly spaced levels from `lo` to `hi`; one step gives `lo`.
pub fn sigma_grid(lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && lo < hi) || steps == 0 {
        return Err(Error::Config(format!("invalid sweep range {lo}..{hi} with {steps} steps")));
    }
    if steps == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..steps)
        .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
        .collect())
}

/// Stacks equally sized RGB images into one NCHW tensor.
pub fn stack(images: &[ImageBuffer]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::EmptyDataset("nothing to stack".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::shape("stack", &[h, w], &[img.height, img.width]));
        }
        data.extend_from_slice(&img.to_rgb().data);
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}
