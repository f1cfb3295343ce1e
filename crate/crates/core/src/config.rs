//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are errors.
//! `preset` (`desk`, `full` or `micro`) selects the defaults for every
//! other key and is applied first wherever it appears.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{DataSource, DatasetSpec, NoiseMode, BLIND_SIGMAS};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{ProbeConfig, TrainConfig, TrainMode};

pub const SEED_ENV: &str = "DIPNET_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
    Micro,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            "micro" => Ok(Preset::Micro),
            _ => Err(Error::Config(format!("unknown preset `{s}`"))),
        }
    }
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
            Preset::Micro => "micro",
        }
    }
}

/// Everything a training run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DatasetSpec,
    pub out_dir: PathBuf,
    /// Save `checkpoint.ckpt` every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Checkpoint to resume from.
    pub resume: Option<PathBuf>,
    /// Stop once this step is reached without changing the schedule; 0
    /// runs to `max_steps`.
    pub stop_at: u64,
    num_classes_set: bool,
}

/// Where the resolved seed came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedSource {
    /// The configuration document or its default.
    File,
    Env,
    Flag,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, patch, count, size) = match preset {
            Preset::Desk => (ModelConfig::desk(), 32, 64, 64),
            Preset::Full => (ModelConfig::full(), 64, 64, 128),
            Preset::Micro => (ModelConfig::micro(), 12, 6, 24),
        };
        let mut train = match preset {
            Preset::Full => TrainConfig::paper(TrainMode::S(25.0)),
            _ => TrainConfig::desk(TrainMode::S(25.0)),
        };
        if preset == Preset::Micro {
            train.batch_size = 4;
            train.max_steps = 10;
            train.eval_every = 5;
            train.eval_images = 2;
            train.eval_size = 16;
            train.diag_per_class = 6;
            train.probe.steps = 10;
        }
        RunConfig {
            preset,
            train,
            model,
            data: DatasetSpec {
                source: DataSource::Synthetic { seed: 1, count, size },
                patch_size: patch,
                noise: NoiseMode::BlindSet(BLIND_SIGMAS.to_vec()),
                epoch_size: 1000,
                shuffle_seed: 0,
            },
            out_dir: PathBuf::from("runs/out"),
            checkpoint_every: 0,
            resume: None,
            stop_at: 0,
            num_classes_set: false,
        }
    }

    /// Parses a document, then applies `overrides` (`key=value`) in order.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let preset = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) => v.parse()?,
            None => Preset::Desk,
        };
        let mut cfg = RunConfig::preset(preset);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    fn finish(&mut self) -> Result<()> {
        if !self.num_classes_set {
            if let Some(m) = self.data.noise.num_classes() {
                self.model.num_noise_classes = m;
            }
        }
        self.model.validate()?;
        self.train.validate()?;
        self.data.noise.validate()
    }

    /// Applies the seed precedence: flag, then environment, then file.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<SeedSource> {
        if let Some(s) = flag {
            self.train.seed = s;
            return Ok(SeedSource::Flag);
        }
        if let Some(s) = env {
            self.train.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
            return Ok(SeedSource::Env);
        }
        Ok(SeedSource::File)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut self.model;
        match key {
            "preset" => {
                value.parse::<Preset>()?;
            }
            "mode" => t.mode = value.parse()?,
            "seed" => t.seed = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "max_steps" => t.max_steps = num(key, value)?,
            "lr0" => t.lr0 = num(key, value)?,
            "lambda1" => t.lambda1 = num(key, value)?,
            "lambda2" => t.lambda2 = num(key, value)?,
            "lambda_grl" => t.lambda_grl = num(key, value)?,
            "adam_beta1" => t.adam_beta1 = num(key, value)?,
            "adam_beta2" => t.adam_beta2 = num(key, value)?,
            "adam_eps" => t.adam_eps = num(key, value)?,
            "eval_every" => t.eval_every = num(key, value)?,
            "eval_sigmas" => t.eval_sigmas = list(key, value)?,
            "eval_images" => t.eval_images = num(key, value)?,
            "eval_size" => t.eval_size = num(key, value)?,
            "eval_seed" => t.eval_seed = num(key, value)?,
            "diag_per_class" => t.diag_per_class = num(key, value)?,
            "probe_steps" => t.probe.steps = num(key, value)?,
            "probe_batch_size" => t.probe.batch_size = num(key, value)?,
            "probe_lr" => t.probe.lr = num(key, value)?,
            "probe_hidden" => t.probe.hidden = num(key, value)?,
            "base_channels" => m.base_channels = num(key, value)?,
            "low_level_blocks" => m.low_level_blocks = num(key, value)?,
            "local_blocks" => m.local_blocks = num(key, value)?,
            "global_fc_width" => m.global_fc_width = num(key, value)?,
            "num_noise_classes" => {
                m.num_noise_classes = num(key, value)?;
                self.num_classes_set = true;
            }
            "pixel_disc_channels" => m.pixel_disc_channels = list(key, value)?,
            "feat_disc_channels" => m.feat_disc_channels = num(key, value)?,
            "extractor" => m.extractor = value.to_string(),
            "extractor_channels" => m.extractor_channels = list(key, value)?,
            "input_skip" => m.input_skip = num(key, value)?,
            "data" => {
                self.data.source = if value == "synthetic" {
                    match self.data.source {
                        DataSource::Synthetic { .. } => self.data.source.clone(),
                        DataSource::Directory(_) => {
                            let RunConfig { data, .. } = RunConfig::preset(self.preset);
                            data.source
                        }
                    }
                } else {
                    DataSource::Directory(PathBuf::from(value))
                }
            }
            "synth_seed" | "synth_count" | "synth_size" => match &mut self.data.source {
                DataSource::Synthetic { seed, count, size } => match key {
                    "synth_seed" => *seed = num(key, value)?,
                    "synth_count" => *count = num(key, value)?,
                    _ => *size = num(key, value)?,
                },
                DataSource::Directory(_) => {
                    return Err(Error::Config(format!("`{key}` needs `data = synthetic`")));
                }
            },
            "patch_size" => self.data.patch_size = num(key, value)?,
            "noise" => self.data.noise = parse_noise(value)?,
            "epoch_size" => self.data.epoch_size = num(key, value)?,
            "shuffle_seed" => self.data.shuffle_seed = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "stop_at" => self.stop_at = num(key, value)?,
            "resume" => self.resume = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its resolved value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", self.preset.name().into());
        kv("mode", t.mode.to_string());
        kv("seed", t.seed.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("max_steps", t.max_steps.to_string());
        kv("lr0", t.lr0.to_string());
        kv("lambda1", t.lambda1.to_string());
        kv("lambda2", t.lambda2.to_string());
        kv("lambda_grl", t.lambda_grl.to_string());
        kv("adam_beta1", t.adam_beta1.to_string());
        kv("adam_beta2", t.adam_beta2.to_string());
        kv("adam_eps", t.adam_eps.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("eval_sigmas", join(&t.eval_sigmas));
        kv("eval_images", t.eval_images.to_string());
        kv("eval_size", t.eval_size.to_string());
        kv("eval_seed", t.eval_seed.to_string());
        kv("diag_per_class", t.diag_per_class.to_string());
        let ProbeConfig {
            steps,
            batch_size,
            lr,
            hidden,
            ..
        } = &t.probe;
        kv("probe_steps", steps.to_string());
        kv("probe_batch_size", batch_size.to_string());
        kv("probe_lr", lr.to_string());
        kv("probe_hidden", hidden.to_string());
        kv("base_channels", m.base_channels.to_string());
        kv("low_level_blocks", m.low_level_blocks.to_string());
        kv("local_blocks", m.local_blocks.to_string());
        kv("global_fc_width", m.global_fc_width.to_string());
        kv("num_noise_classes", m.num_noise_classes.to_string());
        kv("pixel_disc_channels", join(&m.pixel_disc_channels));
        kv("feat_disc_channels", m.feat_disc_channels.to_string());
        kv("extractor", m.extractor.clone());
        kv("extractor_channels", join(&m.extractor_channels));
        kv("input_skip", m.input_skip.to_string());
        match &self.data.source {
            DataSource::Synthetic { seed, count, size } => {
                kv("data", "synthetic".into());
                kv("synth_seed", seed.to_string());
                kv("synth_count", count.to_string());
                kv("synth_size", size.to_string());
            }
            DataSource::Directory(p) => kv("data", p.display().to_string()),
        }
        kv("patch_size", self.data.patch_size.to_string());
        kv("noise", noise_text(&self.data.noise));
        kv("epoch_size", self.data.epoch_size.to_string());
        kv("shuffle_seed", self.data.shuffle_seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("stop_at", self.stop_at.to_string());
        kv(
            "resume",
            self.resume.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        s
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// `fixed:25`, `set:15,25,35` or `range:15,75`.
pub fn parse_noise(value: &str) -> Result<NoiseMode> {
    let (kind, rest) = value
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("noise `{value}` needs a kind prefix (fixed, set, range)")))?;
    let v: Vec<f64> = list("noise", rest)?;
    let mode = match (kind.trim(), v.as_slice()) {
        ("fixed", [s]) => NoiseMode::Fixed(*s),
        ("set", _) => NoiseMode::BlindSet(v),
        ("range", [lo, hi]) => NoiseMode::BlindRange(*lo, *hi),
        _ => return Err(Error::Config(format!("malformed noise `{value}`"))),
    };
    mode.validate()?;
    Ok(mode)
}

fn noise_text(n: &NoiseMode) -> String {
    match n {
        NoiseMode::Fixed(s) => format!("fixed:{s}"),
        NoiseMode::BlindSet(v) => format!("set:{}", join(v)),
        NoiseMode::BlindRange(lo, hi) => format!("range:{lo},{hi}"),
    }
}
