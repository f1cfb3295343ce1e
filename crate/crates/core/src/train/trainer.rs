//! The training loop for the four modes.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use indexmap::IndexMap;

use super::eval::{evaluate, stack};
use super::optim::{cosine_lr, Adam};
use super::probe::{probe_divergence, score, ProbeConfig};
use crate::autodiff::{GradientMap, Graph};
use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{add_awgn, crop, make_batch, step_rng, synth_corpus, Batch, DataSource, Dataset, DatasetSpec, ImageBuffer, NoiseMode};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_objectives, argmax_rows, combined_feat_loss, combined_pix_loss, l1_loss, multiclass_ce_loss,
};
use crate::model::{FeatureDiscriminator, ModelConfig, PixelDiscriminator, TransformNet};
use crate::nn::{BnMode, Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainMode {
    /// Non-blind, one fixed noise level.
    S(f64),
    /// Blind, no prior.
    B,
    /// Blind with the feature-level prior.
    BF,
    /// Blind with the pixel-level prior.
    BP,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMode::S(s) => write!(f, "S({s})"),
            TrainMode::B => write!(f, "B"),
            TrainMode::BF => write!(f, "BF"),
            TrainMode::BP => write!(f, "BP"),
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown training mode `{s}`"));
        match s {
            "B" => Ok(TrainMode::B),
            "BF" => Ok(TrainMode::BF),
            "BP" => Ok(TrainMode::BP),
            _ => {
                let rest = s.strip_prefix('S').ok_or_else(bad)?;
                let rest = rest.strip_prefix('(').and_then(|r| r.strip_suffix(')')).unwrap_or(rest);
                let sigma: f64 = rest.parse().map_err(|_| bad())?;
                if !(sigma.is_finite() && sigma > 0.0) {
                    return Err(bad());
                }
                Ok(TrainMode::S(sigma))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub max_steps: u64,
    pub lr0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_grl: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Evaluate every this many steps (and after the last step).
    pub eval_every: u64,
    pub eval_sigmas: Vec<f64>,
    pub eval_images: usize,
    pub eval_size: usize,
    pub eval_seed: u64,
    /// Held-out patches per noise class for the domain diagnostic; 0 turns
    /// it off.
    pub diag_per_class: usize,
    pub probe: ProbeConfig,
}

impl TrainConfig {
    /// Published schedule: batch 64, learning rate 1e-3, both prior weights
    /// 1e-3.
    pub fn paper(mode: TrainMode) -> Self {
        TrainConfig {
            mode,
            batch_size: 64,
            max_steps: 30 * 82_783 / 64,
            lr0: 1e-3,
            lambda1: 0.001,
            lambda2: 0.001,
            lambda_grl: 1.0,
            adam_beta1: super::optim::ADAM_BETA1,
            adam_beta2: super::optim::ADAM_BETA2,
            adam_eps: super::optim::ADAM_EPS,
            seed: 0,
            eval_every: 1000,
            eval_sigmas: vec![15.0, 25.0, 35.0, 50.0, 75.0],
            eval_images: 8,
            eval_size: 64,
            eval_seed: 1234,
            diag_per_class: 64,
            probe: ProbeConfig::default(),
        }
    }

    pub fn desk(mode: TrainMode) -> Self {
        TrainConfig {
            batch_size: 8,
            max_steps: 2000,
            eval_every: 500,
            eval_images: 8,
            eval_size: 48,
            diag_per_class: 64,
            ..Self::paper(mode)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda_grl < 0.0 {
            return fail("lambda values must be non-negative");
        }
        if !(self.lr0 > 0.0) {
            return fail("lr0 must be positive");
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return fail("batch_size, max_steps and eval_every must be positive");
        }
        if self.eval_images == 0 || self.eval_sigmas.is_empty() {
            return fail("evaluation needs images and sigmas");
        }
        if self.batch_size < 2 {
            return fail("batch normalization needs batch_size >= 2");
        }
        Ok(())
    }
}

/// One evaluation row per noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub sigma: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Training L1 of the most recent step.
    pub l1: f64,
    /// Prior term of the most recent step: the feature discriminator's
    /// cross entropy (BF) or the generator's adversarial term (BP).
    pub prior_loss: Option<f64>,
    pub hdiv: Option<f64>,
    pub lr: f64,
    pub wall_s: f64,
}

pub const METRICS_HEADER: &str = "step,sigma,psnr_db,ssim,l1,prior_loss,hdiv,lr,wall_s";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl MetricRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.3}",
            self.step,
            self.sigma,
            self.psnr_db,
            self.ssim,
            self.l1,
            opt(self.prior_loss),
            opt(self.hdiv),
            self.lr,
            self.wall_s
        )
    }
}

/// Domain separability of the fused features on held-out patches.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainRecord {
    pub step: u64,
    /// Held-out accuracy of the training-time feature discriminator.
    pub disc_accuracy: f64,
    /// Divergence estimate from the training-time discriminator's errors.
    pub disc_hdiv: f64,
    /// Held-out accuracy of a freshly fitted probe.
    pub probe_accuracy: f64,
    /// Divergence estimate from the probe's errors, clamped to `[-2, 2]`.
    pub hdiv: f64,
    pub hdiv_raw: f64,
}

pub const DOMAIN_HEADER: &str = "step,disc_accuracy,disc_hdiv,probe_accuracy,hdiv,hdiv_raw";

impl DomainRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.disc_accuracy, self.disc_hdiv, self.probe_accuracy, self.hdiv, self.hdiv_raw
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub l1: f64,
    pub prior: Option<f64>,
    pub disc: Option<f64>,
}

/// Held-out patches for the domain diagnostic, already corrupted.
#[derive(Clone, Debug)]
struct DiagSet {
    train_noisy: Tensor<f32>,
    train_labels: Vec<usize>,
    test_noisy: Tensor<f32>,
    test_labels: Vec<usize>,
}

const EVAL_CORPUS_SALT: u64 = 0x5eed_e7a1;

/// Model, optimizer and data state for one run.
pub struct Trainer {
    pub tc: TrainConfig,
    pub mc: ModelConfig,
    pub data: Dataset,
    pub net: TransformNet<f32>,
    pub fdisc: Option<FeatureDiscriminator<f32>>,
    pub pdisc: Option<PixelDiscriminator<f32>>,
    pub opt_g: Adam<f32>,
    pub opt_fd: Adam<f32>,
    pub opt_pd: Adam<f32>,
    pub step: u64,
    pub eval_images: Vec<ImageBuffer>,
    pub records: Vec<MetricRecord>,
    pub domain_records: Vec<DomainRecord>,
    pub last: StepLosses,
    noise: NoiseMode,
    diag: Option<DiagSet>,
    started: Instant,
}

fn split_grads(grads: GradientMap<f32>, prefix: &str) -> (GradientMap<f32>, GradientMap<f32>) {
    grads.into_iter().partition(|(k, _)| k.starts_with(prefix))
}

/// Isolation audit: every gradient must belong to `store`.
fn audit(grads: &GradientMap<f32>, store: &ParamStore<f32>, step: &str) -> Result<()> {
    if let Some(k) = grads.keys().find(|k| !store.contains(k)) {
        return Err(Error::Config(format!("{step} produced a gradient for foreign parameter {k}")));
    }
    Ok(())
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged {
            step,
            what: what.to_string(),
        },
        other => other,
    }
}

impl Trainer {
    pub fn new(tc: TrainConfig, mc: ModelConfig, spec: DatasetSpec) -> Result<Self> {
        tc.validate()?;
        mc.validate()?;
        let noise = match tc.mode {
            TrainMode::S(s) => NoiseMode::Fixed(s),
            _ => spec.noise.clone(),
        };
        noise.validate()?;
        if tc.mode == TrainMode::BF {
            match noise.num_classes() {
                Some(m) if m == mc.num_noise_classes => {}
                Some(m) => {
                    return Err(Error::Config(format!(
                        "feature prior needs num_noise_classes = {m} to match the sigma set"
                    )))
                }
                None => return Err(Error::Config("feature prior needs a discrete sigma set".into())),
            }
        }
        let data = Dataset::open(&spec)?;
        let eval_images = match &spec.source {
            DataSource::Synthetic { seed, .. } => synth_corpus(seed ^ EVAL_CORPUS_SALT, tc.eval_images, tc.eval_size)?,
            DataSource::Directory(_) => data.images.iter().take(tc.eval_images).cloned().collect(),
        };
        let seed = tc.seed;
        let net = TransformNet::build(&mc, seed)?;
        let fdisc = (tc.mode == TrainMode::BF)
            .then(|| FeatureDiscriminator::build(&mc, seed.wrapping_add(1)))
            .transpose()?;
        let pdisc = (tc.mode == TrainMode::BP)
            .then(|| PixelDiscriminator::build(&mc, seed.wrapping_add(2)))
            .transpose()?;
        let adam = || Adam::new(tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
        let diag = match (&noise, tc.diag_per_class, tc.mode) {
            (NoiseMode::BlindSet(set), n, TrainMode::BF) if n > 0 => Some(Self::diag_set(&tc, &data, &eval_images, set)?),
            _ => None,
        };
        Ok(Trainer {
            opt_g: adam(),
            opt_fd: adam(),
            opt_pd: adam(),
            tc,
            mc,
            data,
            net,
            fdisc,
            pdisc,
            step: 0,
            eval_images,
            records: Vec::new(),
            domain_records: Vec::new(),
            last: StepLosses::default(),
            noise,
            diag,
            started: Instant::now(),
        })
    }

    /// Equal numbers of patches per class, alternating classes, cut from
    /// the held-out evaluation images.
    fn diag_set(tc: &TrainConfig, data: &Dataset, images: &[ImageBuffer], set: &[f64]) -> Result<DiagSet> {
        let p = data.spec.patch_size;
        let mut rng = step_rng(tc.eval_seed ^ 0xd1a9, 0);
        let mut make = |n: usize| -> Result<(Tensor<f32>, Vec<usize>)> {
            let mut patches = Vec::new();
            let mut labels = Vec::new();
            for i in 0..n * set.len() {
                let k = i % set.len();
                let img = &images[(i / set.len()) % images.len()];
                let y0 = rand::Rng::random_range(&mut rng, 0..=img.height - p);
                let x0 = rand::Rng::random_range(&mut rng, 0..=img.width - p);
                let clean = crop(&img.to_rgb(), y0, x0, p);
                patches.push(add_awgn(&clean, set[k], &mut rng)?);
                labels.push(k);
            }
            Ok((stack(&patches)?, labels))
        };
        let (train_noisy, train_labels) = make(tc.diag_per_class)?;
        let (test_noisy, test_labels) = make(tc.diag_per_class)?;
        Ok(DiagSet {
            train_noisy,
            train_labels,
            test_noisy,
            test_labels,
        })
    }

    pub fn lr(&self) -> Result<f64> {
        cosine_lr(self.step.min(self.tc.max_steps), self.tc.max_steps, self.tc.lr0)
    }

    pub fn batch(&self, step: u64) -> Result<Batch> {
        make_batch(&self.data, self.tc.batch_size, &mut step_rng(self.tc.seed, step), &self.noise)
    }

    /// Runs to `max_steps`, evaluating on cadence.
    pub fn run(&mut self) -> Result<()> {
        if self.step == 0 {
            self.diagnose()?;
        }
        while self.step < self.tc.max_steps {
            self.train_step()?;
        }
        Ok(())
    }

    /// One optimization step plus any evaluation that falls due.
    pub fn train_step(&mut self) -> Result<StepLosses> {
        if self.step >= self.tc.max_steps {
            return Err(Error::StepOutOfRange {
                step: self.step,
                total: self.tc.max_steps,
            });
        }
        let lr = self.lr()?;
        let batch = self.batch(self.step)?;
        let step = self.step;
        let losses = match self.tc.mode {
            TrainMode::S(_) | TrainMode::B => self.l1_step(&batch, lr),
            TrainMode::BF => self.feature_prior_step(&batch, lr),
            TrainMode::BP => {
                let disc = self.bp_disc_step(&batch, lr)?;
                let (l1, gen) = self.bp_gen_step(&batch, lr)?;
                Ok(StepLosses {
                    l1,
                    prior: Some(gen),
                    disc: Some(disc),
                })
            }
        }
        .map_err(|e| diverged(step, e))?;
        for v in [Some(losses.l1), losses.prior, losses.disc].into_iter().flatten() {
            if !v.is_finite() {
                return Err(Error::Diverged {
                    step,
                    what: "loss".into(),
                });
            }
        }
        self.last = losses;
        self.step += 1;
        if self.step.is_multiple_of(self.tc.eval_every) || self.step == self.tc.max_steps {
            self.diagnose()?;
            self.evaluate_now()?;
        }
        Ok(losses)
    }

    fn l1_step(&mut self, batch: &Batch, lr: f64) -> Result<StepLosses> {
        let mut g = Graph::new();
        let x = g.constant(batch.noisy.clone());
        let clean = g.constant(batch.clean.clone());
        let mut ctx = Ctx::new(&mut g, &self.net.store, true, BnMode::Train);
        let out = self.net.forward(&mut ctx, x)?;
        let updates = ctx.finish();
        let loss = l1_loss(&mut g, out.denoised, clean)?;
        let l1 = g.value(loss).item()? as f64;
        let grads = g.backward(loss)?.param_map();
        audit(&grads, &self.net.store, "generator step")?;
        self.opt_g.step(&mut self.net.store, &grads, lr)?;
        self.net.store.apply_stat_updates(updates)?;
        Ok(StepLosses {
            l1,
            ..Default::default()
        })
    }

    /// A single backward pass of `L1 + lambda1 * CE` through the reversal
    /// layer updates both networks.
    fn feature_prior_step(&mut self, batch: &Batch, lr: f64) -> Result<StepLosses> {
        let fdisc = self.fdisc.as_mut().expect("feature discriminator");
        let labels = batch
            .class_index
            .as_ref()
            .ok_or_else(|| Error::Config("feature prior needs class labels".into()))?;
        let mut g = Graph::new();
        let x = g.constant(batch.noisy.clone());
        let clean = g.constant(batch.clean.clone());
        let mut ctx = Ctx::new(&mut g, &self.net.store, true, BnMode::Train);
        let out = self.net.forward(&mut ctx, x)?;
        let updates = ctx.finish();
        let mut ctx = Ctx::new(&mut g, &fdisc.store, true, BnMode::Train);
        let z = fdisc.forward(&mut ctx, out.fused, Some(self.tc.lambda_grl as f32))?;
        ctx.finish();
        let ce = multiclass_ce_loss(&mut g, z, labels)?;
        let l1 = l1_loss(&mut g, out.denoised, clean)?;
        let total = combined_feat_loss(&mut g, l1, ce, self.tc.lambda1 as f32)?;
        let (l1v, cev) = (g.value(l1).item()? as f64, g.value(ce).item()? as f64);
        let grads = g.backward(total)?.param_map();
        let (gen, disc) = split_grads(grads, crate::model::TRANSFORM_PREFIX);
        audit(&gen, &self.net.store, "feature prior step")?;
        audit(&disc, &fdisc.store, "feature prior step")?;
        self.opt_g.step(&mut self.net.store, &gen, lr)?;
        self.opt_fd.step(&mut fdisc.store, &disc, lr)?;
        self.net.store.apply_stat_updates(updates)?;
        Ok(StepLosses {
            l1: l1v,
            prior: Some(cev),
            disc: None,
        })
    }

    /// Discriminator half of a pixel-prior step. The generator runs on
    /// batch statistics without touching its running averages, and its
    /// parameters enter as constants.
    pub fn bp_disc_step(&mut self, batch: &Batch, lr: f64) -> Result<f64> {
        let pdisc = self.pdisc.as_mut().expect("pixel discriminator");
        let mut g = Graph::new();
        let x = g.constant(batch.noisy.clone());
        let clean = g.constant(batch.clean.clone());
        let mut ctx = Ctx::new(&mut g, &self.net.store, false, BnMode::TrainFrozenStats);
        let out = self.net.forward(&mut ctx, x)?;
        ctx.finish();
        let mut ctx = Ctx::new(&mut g, &pdisc.store, true, BnMode::Train);
        let on_fake = pdisc.forward(&mut ctx, out.denoised)?;
        let mut updates = ctx.finish();
        let mut ctx = Ctx::new(&mut g, &pdisc.store, true, BnMode::Train);
        let on_real = pdisc.forward(&mut ctx, clean)?;
        updates.extend(ctx.finish());
        let (disc, _) = adversarial_objectives(&mut g, on_fake, on_real)?;
        let dv = g.value(disc).item()? as f64;
        let grads = g.backward(disc)?.param_map();
        audit(&grads, &pdisc.store, "discriminator step")?;
        pdisc_step(&mut self.opt_pd, pdisc, &grads, lr, updates)?;
        Ok(dv)
    }

    /// Generator half of a pixel-prior step; the discriminator is frozen.
    pub fn bp_gen_step(&mut self, batch: &Batch, lr: f64) -> Result<(f64, f64)> {
        let pdisc = self.pdisc.as_ref().expect("pixel discriminator");
        let mut g = Graph::new();
        let x = g.constant(batch.noisy.clone());
        let clean = g.constant(batch.clean.clone());
        let mut ctx = Ctx::new(&mut g, &self.net.store, true, BnMode::Train);
        let out = self.net.forward(&mut ctx, x)?;
        let updates = ctx.finish();
        let mut ctx = Ctx::new(&mut g, &pdisc.store, false, BnMode::TrainFrozenStats);
        let on_fake = pdisc.forward(&mut ctx, out.denoised)?;
        ctx.finish();
        let gen = crate::losses::patch_bce_loss(&mut g, on_fake, 0.0)?;
        let l1 = l1_loss(&mut g, out.denoised, clean)?;
        let total = combined_pix_loss(&mut g, l1, gen, self.tc.lambda2 as f32)?;
        let (l1v, gv) = (g.value(l1).item()? as f64, g.value(gen).item()? as f64);
        let grads = g.backward(total)?.param_map();
        audit(&grads, &self.net.store, "generator step")?;
        self.opt_g.step(&mut self.net.store, &grads, lr)?;
        self.net.store.apply_stat_updates(updates)?;
        Ok((l1v, gv))
    }

    /// Fused features of `noisy` in chunks of the training batch size,
    /// using batch statistics without updating them.
    fn fused_features(&self, noisy: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = noisy.shape()[0];
        let bs = self.tc.batch_size;
        let mut data = Vec::new();
        let mut shape = Vec::new();
        for start in (0..n).step_by(bs) {
            let idx: Vec<usize> = (start..(start + bs).min(n)).collect();
            let chunk = super::probe::gather(noisy, &idx);
            let mut g = Graph::new();
            let x = g.constant(chunk);
            let mut ctx = Ctx::new(&mut g, &self.net.store, false, BnMode::TrainFrozenStats);
            let out = self.net.forward(&mut ctx, x)?;
            ctx.finish();
            let f = g.value(out.fused);
            shape = f.shape().to_vec();
            data.extend_from_slice(f.data());
        }
        shape[0] = n;
        Tensor::new(&shape, data)
    }

    /// Domain diagnostic on the held-out patches (feature prior only).
    pub fn diagnose(&mut self) -> Result<Option<DomainRecord>> {
        let (Some(diag), Some(fdisc)) = (&self.diag, &self.fdisc) else {
            return Ok(None);
        };
        let classes = self.mc.num_noise_classes;
        let train_f = self.fused_features(&diag.train_noisy)?;
        let test_f = self.fused_features(&diag.test_noisy)?;

        let mut g = Graph::new();
        let xv = g.constant(test_f.clone());
        let mut ctx = Ctx::new(&mut g, &fdisc.store, false, BnMode::TrainFrozenStats);
        let z = fdisc.forward(&mut ctx, xv, None)?;
        ctx.finish();
        let disc = score(&argmax_rows(g.value(z).data(), classes), &diag.test_labels, classes)?;

        let probe_cfg = ProbeConfig {
            seed: self.tc.eval_seed,
            ..self.tc.probe.clone()
        };
        let probe = probe_divergence(&train_f, &diag.train_labels, &test_f, &diag.test_labels, classes, &probe_cfg)?;
        let rec = DomainRecord {
            step: self.step,
            disc_accuracy: disc.accuracy,
            disc_hdiv: disc.hdiv.clamped,
            probe_accuracy: probe.accuracy,
            hdiv: probe.hdiv.clamped,
            hdiv_raw: probe.hdiv.raw,
        };
        self.domain_records.push(rec.clone());
        Ok(Some(rec))
    }

    pub fn evaluate_now(&mut self) -> Result<Vec<MetricRecord>> {
        let rows = evaluate(&self.net, &self.eval_images, &self.tc.eval_sigmas, self.tc.eval_seed)?;
        let hdiv = self
            .domain_records
            .last()
            .filter(|r| r.step == self.step)
            .map(|r| r.hdiv);
        let lr = self.lr()?;
        let wall = self.started.elapsed().as_secs_f64();
        let recs: Vec<MetricRecord> = rows
            .into_iter()
            .map(|r| MetricRecord {
                step: self.step,
                sigma: r.sigma,
                psnr_db: r.psnr_db,
                ssim: r.ssim,
                l1: self.last.l1,
                prior_loss: self.last.prior,
                hdiv,
                lr,
                wall_s: wall,
            })
            .collect();
        self.records.extend(recs.iter().cloned());
        Ok(recs)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.mc, self.tc.mode)
    }

    pub fn checkpoint(&self, config_text: &str) -> Checkpoint {
        let mut params = IndexMap::new();
        let mut stats = IndexMap::new();
        let mut optimizers = IndexMap::new();
        let mut add = |store: &ParamStore<f32>| {
            params.extend(store.params().iter().map(|(k, v)| (k.clone(), v.clone())));
            stats.extend(store.stats().iter().map(|(k, v)| (k.clone(), v.clone())));
        };
        add(&self.net.store);
        optimizers.insert("generator".to_string(), self.opt_g.snapshot());
        if let Some(d) = &self.fdisc {
            add(&d.store);
            optimizers.insert("feature_disc".to_string(), self.opt_fd.snapshot());
        }
        if let Some(d) = &self.pdisc {
            add(&d.store);
            optimizers.insert("pixel_disc".to_string(), self.opt_pd.snapshot());
        }
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.tc.seed.to_le_bytes());
        Checkpoint {
            fingerprint: self.fingerprint(),
            step: self.step,
            rng: RngState {
                seed,
                stream: self.step,
                word_pos: 0,
            },
            params,
            stats,
            optimizers,
            config: config_text.to_string(),
        }
    }

    /// Restores parameters, statistics, optimizer moments and the step
    /// counter from `ckpt`.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let expected = self.fingerprint();
        if ckpt.fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                found: ckpt.fingerprint.clone(),
                expected,
            });
        }
        restore_store(&mut self.net.store, ckpt)?;
        if let Some(d) = &mut self.fdisc {
            restore_store(&mut d.store, ckpt)?;
        }
        if let Some(d) = &mut self.pdisc {
            restore_store(&mut d.store, ckpt)?;
        }
        let restore_opt = |opt: &mut Adam<f32>, key: &str| -> Result<()> {
            let snap = ckpt
                .optimizers
                .get(key)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing optimizer state {key}")))?;
            opt.restore(snap);
            Ok(())
        };
        restore_opt(&mut self.opt_g, "generator")?;
        if self.fdisc.is_some() {
            restore_opt(&mut self.opt_fd, "feature_disc")?;
        }
        if self.pdisc.is_some() {
            restore_opt(&mut self.opt_pd, "pixel_disc")?;
        }
        self.step = ckpt.step;
        Ok(())
    }
}

fn pdisc_step(
    opt: &mut Adam<f32>,
    pdisc: &mut PixelDiscriminator<f32>,
    grads: &GradientMap<f32>,
    lr: f64,
    updates: Vec<crate::nn::StatUpdate<f32>>,
) -> Result<()> {
    opt.step(&mut pdisc.store, grads, lr)?;
    pdisc.store.apply_stat_updates(updates)
}

/// Copies every parameter and statistic of `store` out of `ckpt`,
/// checking shapes.
pub fn restore_store(store: &mut ParamStore<f32>, ckpt: &Checkpoint) -> Result<()> {
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let src = ckpt
            .params
            .get(&name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing parameter {name}")))?;
        let dst = store.get_mut(&name)?;
        if src.shape() != dst.shape() {
            return Err(Error::CorruptCheckpoint(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        *dst = src.clone();
    }
    for (name, s) in store.stats_mut() {
        let src = ckpt
            .stats
            .get(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing statistics {name}")))?;
        if src.mean.len() != s.mean.len() {
            return Err(Error::CorruptCheckpoint(format!("statistics {name} have the wrong width")));
        }
        *s = src.clone();
    }
    Ok(())
}

/// Architecture identity checked when a checkpoint is loaded.
pub fn fingerprint(mc: &ModelConfig, mode: TrainMode) -> String {
    let mut parts = vec![mc.transform_descriptor()];
    match mode {
        TrainMode::BF => parts.push(mc.feature_disc_descriptor()),
        TrainMode::BP => parts.push(format!("{}[{}]", mc.pixel_disc_descriptor(), mc.extractor)),
        _ => {}
    }
    parts.join("|")
}

/// Rebuilds the denoiser alone from a checkpoint.
pub fn load_denoiser(ckpt: &Checkpoint, mc: &ModelConfig) -> Result<TransformNet<f32>> {
    let expected = mc.transform_descriptor();
    if !ckpt.fingerprint.split('|').next().is_some_and(|f| f == expected) {
        return Err(Error::FingerprintMismatch {
            found: ckpt.fingerprint.clone(),
            expected,
        });
    }
    let mut net = TransformNet::build(mc, 0)?;
    restore_store(&mut net.store, ckpt)?;
    Ok(net)
}
