use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dipnet::app::{self, exit_code, EVAL_SEED};
use dipnet::config::{RunConfig, SEED_ENV};
use dipnet::data::BLIND_SIGMAS;
use dipnet::verify::{Scope, SUITE_SEEDS};
use dipnet::{Error, Result};

#[derive(Parser)]
#[command(name = "dipnet", version, about = "Blind image denoising with learned priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a configuration file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value`, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Overrides both the file and the environment.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Denoise an image or a directory of images.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt, denoise and score clean images at several noise levels.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clean: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = BLIND_SIGMAS.to_vec())]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = EVAL_SEED)]
        seed: u64,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PSNR over evenly spaced noise levels.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clean: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        sigma_min: f64,
        #[arg(long, default_value_t = 100.0)]
        sigma_max: f64,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = EVAL_SEED)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck {
        /// primitives, blocks or end2end.
        scope: String,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn emit(text: &str, out: Option<PathBuf>) -> Result<()> {
    match out {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => Ok(io::stdout().write_all(text.as_bytes())?),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut stderr = io::stderr();
    match cli.command {
        Command::Train {
            config,
            mut set,
            seed,
            out,
            resume,
        } => {
            let text = match &config {
                Some(p) => std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
                None => String::new(),
            };
            if let Some(o) = out {
                set.push(format!("out_dir={}", o.display()));
            }
            if let Some(r) = resume {
                set.push(format!("resume={}", r.display()));
            }
            let mut cfg = RunConfig::parse(&text, &set)?;
            let env = std::env::var(SEED_ENV).ok();
            cfg.resolve_seed(seed, env.as_deref())?;
            eprint!("{}", cfg.to_text());
            let summary = app::cmd_train(&cfg, &mut stderr)?;
            eprintln!("trained {} steps, checkpoint {}", summary.steps, summary.checkpoint.display());
            Ok(())
        }
        Command::Denoise { ckpt, input, out } => {
            let failures = app::cmd_denoise(&ckpt, &input, &out, &mut stderr)?;
            if failures > 0 {
                return Err(Error::Image {
                    path: input,
                    msg: format!("{failures} file(s) failed"),
                });
            }
            Ok(())
        }
        Command::Eval {
            ckpt,
            clean,
            sigmas,
            seed,
            out,
        } => emit(&app::cmd_eval(&ckpt, &clean, &sigmas, seed)?, out),
        Command::Sweep {
            ckpt,
            clean,
            sigma_min,
            sigma_max,
            steps,
            seed,
            out,
        } => emit(&app::cmd_sweep(&ckpt, &clean, sigma_min, sigma_max, steps, seed)?, out),
        Command::Gradcheck { scope, seeds } => {
            let scope: Scope = scope.parse()?;
            let seeds = seeds.unwrap_or_else(|| SUITE_SEEDS.to_vec());
            let failed = app::cmd_gradcheck(scope, &seeds, &mut io::stdout())?;
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::GradCheckFailed(failed.join(", ")))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
