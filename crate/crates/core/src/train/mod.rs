//! Optimization, evaluation and the training loop.

pub mod eval;
pub mod metrics;
pub mod optim;
pub mod probe;
pub mod trainer;


pub use eval::{denoise_image, evaluate, noise_sensitivity_sweep, sigma_grid, EvalRow};
pub use metrics::{psnr, ssim};
pub use optim::{cosine_lr, Adam};
pub use probe::{probe_divergence, DomainProbe, ProbeConfig, ProbeScore};
pub use trainer::{
    fingerprint, load_denoiser, DomainRecord, MetricRecord, StepLosses, TrainConfig, TrainMode, Trainer,
    DOMAIN_HEADER, METRICS_HEADER,
};
