//! Command implementations behind the `dipnet` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{list_images, load_dir, load_image, save_image, ImageBuffer};
use crate::error::{Error, Result};
use crate::model::TransformNet;
use crate::train::{
    denoise_image, evaluate, load_denoiser, noise_sensitivity_sweep, sigma_grid, Trainer, DOMAIN_HEADER,
    METRICS_HEADER,
};
use crate::verify::{run_suite, CaseResult, Scope};
use crate::autodiff::GradCheckOptions;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DOMAIN_FILE: &str = "domain.csv";
pub const CONFIG_FILE: &str = "config.cfg";
pub const EVAL_SEED: u64 = 2024;

/// Usage and configuration problems map to exit code 1, everything else
/// to 2.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownExtractor(_) | Error::NegativeSigma(_) => 1,
        _ => 2,
    }
}

pub struct TrainSummary {
    pub steps: u64,
    pub final_rows: Vec<String>,
    pub checkpoint: PathBuf,
}

/// Keeps the header and every row whose leading step is at most `step`.
fn truncate_csv(path: &Path, header: &str, step: u64) -> Result<String> {
    let mut out = format!("{header}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let s: Option<u64> = line.split(',').next().and_then(|v| v.parse().ok());
            if s.is_some_and(|s| s <= step) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

fn append(path: &Path, rows: &[String]) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let mut f = fs::OpenOptions::new().append(true).open(path)?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    Ok(())
}

/// Trains per `cfg`, writing the resolved config, metrics and domain CSVs
/// and checkpoints into `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig, log: &mut dyn Write) -> Result<TrainSummary> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    let resolved = cfg.to_text();
    fs::write(out.join(CONFIG_FILE), &resolved)?;
    let mut trainer = Trainer::new(cfg.train.clone(), cfg.model.clone(), cfg.data.clone())?;
    let (metrics_path, domain_path) = (out.join(METRICS_FILE), out.join(DOMAIN_FILE));
    if let Some(path) = &cfg.resume {
        let ckpt = Checkpoint::load_expecting(path, &trainer.fingerprint())?;
        trainer.restore(&ckpt)?;
        let kept = truncate_csv(&metrics_path, METRICS_HEADER, ckpt.step)?;
        fs::write(&metrics_path, kept)?;
        let kept = truncate_csv(&domain_path, DOMAIN_HEADER, ckpt.step)?;
        fs::write(&domain_path, kept)?;
        writeln!(log, "resumed from {} at step {}", path.display(), ckpt.step)?;
    } else {
        fs::write(&metrics_path, format!("{METRICS_HEADER}\n"))?;
        fs::write(&domain_path, format!("{DOMAIN_HEADER}\n"))?;
    }
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let flush = |t: &Trainer, seen: &mut (usize, usize)| -> Result<()> {
        let rows: Vec<String> = t.records[seen.0..].iter().map(|r| r.csv_row()).collect();
        append(&metrics_path, &rows)?;
        let rows: Vec<String> = t.domain_records[seen.1..].iter().map(|r| r.csv_row()).collect();
        append(&domain_path, &rows)?;
        *seen = (t.records.len(), t.domain_records.len());
        Ok(())
    };
    let mut seen = (0, 0);
    if trainer.step == 0 {
        trainer.diagnose()?;
        flush(&trainer, &mut seen)?;
    }
    let end = match cfg.stop_at {
        0 => cfg.train.max_steps,
        s => s.min(cfg.train.max_steps),
    };
    while trainer.step < end {
        trainer.train_step()?;
        if trainer.records.len() > seen.0 {
            for r in &trainer.records[seen.0..] {
                writeln!(log, "step {} sigma {} psnr {:.3} ssim {:.4}", r.step, r.sigma, r.psnr_db, r.ssim)?;
            }
        }
        flush(&trainer, &mut seen)?;
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 {
            trainer.checkpoint(&resolved).save(&ckpt_path)?;
        }
    }
    trainer.checkpoint(&resolved).save(&ckpt_path)?;
    let final_rows = trainer
        .records
        .iter()
        .filter(|r| r.step == trainer.step)
        .map(|r| r.csv_row())
        .collect();
    Ok(TrainSummary {
        steps: trainer.step,
        final_rows,
        checkpoint: ckpt_path,
    })
}

/// The denoiser stored in a checkpoint written by [`cmd_train`].
pub fn load_model(path: &Path) -> Result<TransformNet<f32>> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ckpt.config, &[])?;
    load_denoiser(&ckpt, &cfg.model)
}

/// Denoises one image or every image of a directory into `out_dir` under
/// the same file names. Returns the number of failed files.
pub fn cmd_denoise(ckpt: &Path, input: &Path, out_dir: &Path, log: &mut dyn Write) -> Result<usize> {
    let net = load_model(ckpt)?;
    let inputs = if input.is_dir() {
        list_images(input)?
    } else {
        vec![input.to_path_buf()]
    };
    if inputs.is_empty() {
        return Err(Error::EmptyDataset(format!("no images in {}", input.display())));
    }
    fs::create_dir_all(out_dir)?;
    let mut failures = 0;
    for path in inputs {
        let result = (|| -> Result<PathBuf> {
            let img = load_image(&path)?;
            let den = denoise_image(&net, &img)?;
            let name = path
                .file_name()
                .ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?;
            let dst = out_dir.join(name);
            save_image(&den, &dst, true)?;
            Ok(dst)
        })();
        match result {
            Ok(dst) => writeln!(log, "{} -> {}", path.display(), dst.display())?,
            Err(e) => {
                failures += 1;
                writeln!(log, "{}: {e}", path.display())?;
            }
        }
    }
    Ok(failures)
}

fn clean_set(dir: &Path) -> Result<Vec<ImageBuffer>> {
    Ok(load_dir(dir)?.iter().map(ImageBuffer::to_rgb).collect())
}

/// Per-sigma and average PSNR/SSIM as CSV text.
pub fn cmd_eval(ckpt: &Path, clean_dir: &Path, sigmas: &[f64], seed: u64) -> Result<String> {
    if sigmas.is_empty() {
        return Err(Error::Config("empty sigma list".into()));
    }
    if let Some(&s) = sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::NegativeSigma(s));
    }
    let net = load_model(ckpt)?;
    let clean = clean_set(clean_dir)?;
    let rows = evaluate(&net, &clean, sigmas, seed)?;
    let mut out = String::from("sigma,psnr_db,ssim\n");
    for r in &rows {
        out.push_str(&format!("{},{},{}\n", r.sigma, r.psnr_db, r.ssim));
    }
    let n = rows.len() as f64;
    let p = rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
    let s = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    out.push_str(&format!("average,{p},{s}\n"));
    Ok(out)
}

/// `(sigma, psnr_db)` curve as CSV text.
pub fn cmd_sweep(ckpt: &Path, clean_dir: &Path, lo: f64, hi: f64, steps: usize, seed: u64) -> Result<String> {
    let sigmas = sigma_grid(lo, hi, steps)?;
    let net = load_model(ckpt)?;
    let clean = clean_set(clean_dir)?;
    let mut out = String::from("sigma,psnr_db\n");
    for (s, p) in noise_sensitivity_sweep(&net, &clean, &sigmas, seed)? {
        out.push_str(&format!("{s},{p}\n"));
    }
    Ok(out)
}

/// Runs one gradient-check scope, printing a line per case and seed.
/// Returns the names of failing cases.
pub fn cmd_gradcheck(scope: Scope, seeds: &[u64], log: &mut dyn Write) -> Result<Vec<String>> {
    let results = run_suite(scope, seeds, &GradCheckOptions::default())?;
    let mut failed = Vec::new();
    writeln!(log, "case,seed,checked,max_rel_error,refined_max_rel_error,invariant_max_grad,status")?;
    for CaseResult { name, seed, report } in &results {
        let ok = report.passed();
        writeln!(
            log,
            "{name},{seed},{},{:.3e},{:.3e},{:.3e},{}",
            report.checked,
            report.max_rel_error,
            report.refined_max_rel_error,
            report.invariant_max_grad,
            if ok { "pass" } else { "FAIL" }
        )?;
        if !ok && !failed.contains(name) {
            failed.push(name.clone());
        }
    }
    Ok(failed)
}
