//! Command-line front end: dataset generation, the three training
//! phases, synthesis sweeps, evaluation, the regressor ablation, and the
//! gradient-check suite.
//!
//! Exit codes: 0 success, 1 user error (bad flags, unreadable inputs),
//! 2 internal error (divergence, failed gradient check).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agegan::data::{gen_synthetic_dataset, load_dataset, preprocess_image, Provenance, SynthConfig};
use agegan::eval::{
    ablation_with_without_r, evaluate, synthesize_sweep, write_ablation_outputs,
    write_sweep_montage,
};
use agegan::gradcheck::run_gradcheck;
use agegan::ordinal::evaluate_mae;
use agegan::training::{
    checkpoint, load_checkpoint, pretrain_encoder, pretrain_regressor, train, TrainConfig,
};
use agegan::{Error, Scalar};

#[derive(Parser)]
#[command(
    name = "agegan",
    version,
    about = "Conditional adversarial autoencoder for face age progression/regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every training-flavored subcommand. Precedence:
/// CLI flags > config file > desk-preset defaults.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single config keys, e.g. --set epochs=10 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// RNG seed; omitted: one is drawn and printed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = TrainConfig::desk_preset();
        if let Some(path) = &self.config {
            cfg.apply_file(&std::fs::read_to_string(path)?)?;
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("--set wants KEY=VALUE, got {kv}")))?;
            cfg.apply_kv(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        } else if self.config.is_none() || !self.sets.iter().any(|s| s.starts_with("seed")) {
            cfg.seed = entropy_seed();
            println!("seed = {} (auto-selected; pass --seed to reproduce)", cfg.seed);
        }
        Ok(cfg)
    }
}

fn entropy_seed() -> u64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0);
    agegan::mix_seed(&[nanos, std::process::id() as u64])
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedurally generated synthetic face dataset.
    GenSynthetic {
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 100)]
        n_identities: usize,
        #[arg(long, default_value_t = 10)]
        images_per_identity: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 60.0)]
        max_age: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Phase 1: pre-train the ordinal age regressor.
    PretrainAge {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Phase 2: pre-train the encoder with a throwaway decoder.
    PretrainEncoder {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run all three phases and write checkpoints plus train_log.csv.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Resume phase 3 from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Age-sweep a face through a trained checkpoint into a PNG montage.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source image(s); repeat for multiple rows.
        #[arg(long, required = true)]
        image: Vec<PathBuf>,
        /// Comma-separated target ages in years, e.g. 10,30,50.
        #[arg(long)]
        ages: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Aging-accuracy and identity metrics for a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 4)]
        ages_per_item: usize,
        /// Score apparent ages with the analytic oracle (synthetic data).
        #[arg(long)]
        use_oracle: bool,
        /// Mark the loaded folder as a synthetic export (enables oracles).
        #[arg(long)]
        synthetic_data: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Paired with/without-regressor ablation on a synthetic dataset.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Seed pairs to train.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 4)]
        ages_per_item: usize,
        #[arg(long, default_value_t = 500)]
        n_identities: usize,
        #[arg(long, default_value_t = 10)]
        images_per_identity: usize,
    },
    /// Finite-difference verification of every loss gradient.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Sampled coordinates per loss.
        #[arg(long, default_value_t = 64)]
        coords: usize,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let internal = e
                .downcast_ref::<Error>()
                .map(|err| matches!(err, Error::Diverged { .. }))
                .unwrap_or(false);
            ExitCode::from(if internal { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::GenSynthetic {
            out,
            split,
            n_identities,
            images_per_identity,
            image_size,
            max_age,
            seed,
        } => {
            let seed = seed.unwrap_or_else(|| {
                let s = entropy_seed();
                println!("seed = {s} (auto-selected; pass --seed to reproduce)");
                s
            });
            let cfg = SynthConfig {
                image_size,
                max_age,
                n_identities,
                images_per_identity,
                seed,
            };
            let ds = gen_synthetic_dataset::<Scalar>(&cfg)?;
            agegan::data::export_dataset(&ds, &out, &split)?;
            println!(
                "wrote {} images to {}/{split} (seed {seed})",
                ds.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::PretrainAge {
            config,
            data,
            split,
            out,
        } => {
            let cfg = config.resolve()?;
            let ds = load_dataset::<Scalar>(&data, &split, cfg.image_size, cfg.max_age)?;
            let (regressor, mae) = pretrain_regressor(&ds, &cfg)?;
            std::fs::create_dir_all(&out)?;
            checkpoint::write_blob(&out.join("r.bin"), &checkpoint::net_entries(&regressor))?;
            std::fs::write(
                out.join("mae_report.json"),
                serde_json::to_string_pretty(&mae)?,
            )?;
            println!(
                "regressor holdout MAE {:.3} ± {:.3} years over {} items",
                mae.mae_mean, mae.mae_std, mae.n
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::PretrainEncoder {
            config,
            data,
            split,
            out,
        } => {
            let cfg = config.resolve()?;
            let ds = load_dataset::<Scalar>(&data, &split, cfg.image_size, cfg.max_age)?;
            let (encoder, encoder_pre, psnr_db) = pretrain_encoder(&ds, &cfg)?;
            std::fs::create_dir_all(&out)?;
            checkpoint::write_blob(&out.join("e.bin"), &checkpoint::net_entries(&encoder))?;
            checkpoint::write_blob(
                &out.join("e_pre.bin"),
                &checkpoint::net_entries(&encoder_pre),
            )?;
            std::fs::write(
                out.join("psnr.json"),
                serde_json::to_string_pretty(&serde_json::json!({ "psnr_db": psnr_db }))?,
            )?;
            println!("encoder holdout reconstruction PSNR {psnr_db:.2} dB");
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            config,
            data,
            split,
            out,
            resume,
        } => {
            let cfg = config.resolve()?;
            let ds = load_dataset::<Scalar>(&data, &split, cfg.image_size, cfg.max_age)?;
            let final_ckpt = train(&cfg, &ds, &out, resume.as_deref())?;
            println!("final checkpoint: {}", final_ckpt.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Synthesize {
            checkpoint,
            image,
            ages,
            out,
        } => {
            let state = load_checkpoint::<Scalar>(&checkpoint)?;
            let ages: Vec<f64> = ages
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidInput(format!("bad age: {t}")))
                })
                .collect::<Result<_, _>>()?;
            let mut sources = Vec::new();
            for path in &image {
                let raw = image::open(path)?;
                sources.push(preprocess_image::<Scalar>(&raw, state.config.image_size)?);
            }
            let grid = synthesize_sweep(&state, &sources, &ages)?;
            std::fs::create_dir_all(&out)?;
            let png = out.join("sweep.png");
            write_sweep_montage(&grid, &png)?;
            println!(
                "wrote {} and {}",
                png.display(),
                png.with_extension("json").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            ages_per_item,
            use_oracle,
            synthetic_data,
            out,
            seed,
        } => {
            let state = load_checkpoint::<Scalar>(&checkpoint)?;
            let mut ds =
                load_dataset::<Scalar>(&data, &split, state.config.image_size, state.config.max_age)?;
            if synthetic_data {
                ds.provenance = Provenance::Synthetic;
            }
            let seed = seed.unwrap_or_else(|| {
                let s = entropy_seed();
                println!("seed = {s} (auto-selected; pass --seed to reproduce)");
                s
            });
            let report = evaluate(&state, &ds, ages_per_item, use_oracle, seed)?;
            let mae_r = evaluate_mae(&state.regressor, &ds, state.config.bin_width, &split)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(
                out.join("eval_report.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            std::fs::write(
                out.join("regressor_mae.json"),
                serde_json::to_string_pretty(&mae_r)?,
            )?;
            println!(
                "aging MAE (regressor) {:.3} ± {:.3} years",
                report.aging_mae_regressor.mean, report.aging_mae_regressor.std
            );
            if let Some(s) = report.aging_mae_oracle {
                println!("aging MAE (oracle)    {:.3} ± {:.3} years", s.mean, s.std);
            }
            println!(
                "identity distance (latent) {:.4} ± {:.4}",
                report.identity_latent.mean, report.identity_latent.std
            );
            if let Some(s) = report.identity_oracle {
                println!("identity distance (oracle) {:.4} ± {:.4}", s.mean, s.std);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate {
            config,
            out,
            seeds,
            ages_per_item,
            n_identities,
            images_per_identity,
        } => {
            let cfg = config.resolve()?;
            let synth = SynthConfig {
                image_size: cfg.image_size,
                max_age: cfg.max_age,
                n_identities,
                images_per_identity,
                seed: agegan::mix_seed(&[cfg.seed, 0xDA7A]),
            };
            let ds = gen_synthetic_dataset::<Scalar>(&synth)?;
            println!(
                "ablation over {} seed pairs, {} synthetic items, {} epochs each",
                seeds,
                ds.len(),
                cfg.epochs
            );
            let (summary, _) = ablation_with_without_r(&cfg, &ds, seeds, ages_per_item, Some(1000))?;
            write_ablation_outputs(&summary, &out)?;
            println!(
                "MAE with R {:.3}, without R {:.3}",
                summary.mae_with_mean, summary.mae_without_mean
            );
            println!("{}", summary.summary_line());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed, coords, step } => {
            let seed = seed.unwrap_or(7);
            let report = run_gradcheck(seed, coords, step)?;
            println!("gradient check (step {step:.0e}, {coords} coordinates per loss):");
            for c in &report.checks {
                println!("  {:<22} max rel err {:.3e}", c.name, c.max_rel_err);
            }
            let tol = 1e-4;
            if report.all_below(tol) {
                println!("all gradients within {tol:.0e}");
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradient check FAILED (tolerance {tol:.0e})");
                Ok(ExitCode::from(2))
            }
        }
    }
}
