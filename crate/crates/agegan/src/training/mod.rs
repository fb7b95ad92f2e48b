//! The three-phase training protocol: pre-train the age regressor R,
//! pre-train the encoder E (a frozen copy becomes the identity reference
//! E_pre), then alternate discriminator and generator/encoder updates.
//!
//! Determinism contract: all randomness derives from `config.seed`; the
//! per-epoch RNG stream is re-derived from `(seed, phase, epoch)`, so a
//! run resumed from an epoch-boundary checkpoint continues bit-for-bit
//! like the uninterrupted run.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{shuffle, Dataset};
use crate::losses::{
    gan_d_objective_grad, generator_objective_grad, GanGVariant, GeneratorLossNets, LossReport,
    LossWeights,
};
use crate::networks::{Discriminator, Encoder, Generator, NetworkSpec, Regressor};
use crate::nn::{all_finite, fingerprint, Adam, BnMode, GradStore, ParamSet};
use crate::ordinal::{evaluate_mae, rank_encode_batch, rank_loss_grad, MaeReport};
use crate::{mix_seed, scalar, to_f64, Error, Real, Result};

const PHASE_REGRESSOR: u64 = 0x51;
const PHASE_ENCODER: u64 = 0x52;
const PHASE_ADVERSARIAL: u64 = 0x53;

/// How the generator's target age is chosen during phase 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetAgeMode {
    /// Uniform over `[0, max_age]` per item, so G sees every age and the
    /// age-distance weighting is exercised.
    UniformRandom,
    /// Force the output age to the input age (reduces training to an
    /// autoencoder when the other loss weights are zeroed).
    MatchInput,
}

/// Everything a training run needs to know.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub base_filters: usize,
    pub max_age: f64,
    pub bin_width: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Phase-3 (adversarial) epochs.
    pub epochs: usize,
    pub epochs_regressor: usize,
    pub epochs_encoder: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub g_loss_variant: GanGVariant,
    pub checkpoint_every: usize,
    pub target_age_mode: TargetAgeMode,
    /// Stop regressor pre-training early once test MAE reaches this.
    pub regressor_stop_mae: Option<f64>,
    /// Stop encoder pre-training early once held-out PSNR reaches this.
    pub encoder_stop_psnr: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            latent_dim: 64,
            base_filters: 32,
            max_age: 60.0,
            bin_width: 1.0,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            batch_size: 100,
            epochs: 200,
            epochs_regressor: 30,
            epochs_encoder: 20,
            weights: LossWeights::morph(),
            seed: 0,
            g_loss_variant: GanGVariant::Saturating,
            checkpoint_every: 5,
            target_age_mode: TargetAgeMode::UniformRandom,
            regressor_stop_mae: None,
            encoder_stop_psnr: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: 32x32 synthetic faces, 30 adversarial epochs,
    /// batch 64, and networks sized for single-machine CPU budgets.
    pub fn desk_preset() -> Self {
        Self {
            batch_size: 64,
            epochs: 30,
            base_filters: 16,
            latent_dim: 32,
            regressor_stop_mae: Some(2.0),
            encoder_stop_psnr: Some(22.0),
            ..Self::default()
        }
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            image_size: self.image_size,
            channels: self.channels,
            latent_dim: self.latent_dim,
            base_filters: self.base_filters,
            rank_count: (self.max_age / self.bin_width).round() as usize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network_spec().validate()?;
        self.weights.validate()?;
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 || self.epochs_regressor == 0 || self.epochs_encoder == 0 {
            return Err(Error::InvalidConfig("epoch counts must be >= 1".into()));
        }
        if !(self.max_age > 0.0) {
            return Err(Error::InvalidConfig("max_age must be > 0".into()));
        }
        Ok(())
    }

    /// Apply one `key = value` assignment (config file or CLI override).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::InvalidConfig(format!("bad value for {what}: {value}"));
        match key {
            "image_size" => self.image_size = value.parse().map_err(|_| bad(key))?,
            "channels" => self.channels = value.parse().map_err(|_| bad(key))?,
            "latent_dim" => self.latent_dim = value.parse().map_err(|_| bad(key))?,
            "base_filters" => self.base_filters = value.parse().map_err(|_| bad(key))?,
            "max_age" => self.max_age = value.parse().map_err(|_| bad(key))?,
            "bin_width" => self.bin_width = value.parse().map_err(|_| bad(key))?,
            "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad(key))?,
            "weight_decay" => self.weight_decay = value.parse().map_err(|_| bad(key))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad(key))?,
            "epochs_regressor" => self.epochs_regressor = value.parse().map_err(|_| bad(key))?,
            "epochs_encoder" => self.epochs_encoder = value.parse().map_err(|_| bad(key))?,
            "lambda_pixel" => self.weights.pixel = value.parse().map_err(|_| bad(key))?,
            "lambda_identity" => self.weights.identity = value.parse().map_err(|_| bad(key))?,
            "lambda_gan" => self.weights.gan = value.parse().map_err(|_| bad(key))?,
            "lambda_regression" => {
                self.weights.regression = value.parse().map_err(|_| bad(key))?
            }
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "checkpoint_every" => self.checkpoint_every = value.parse().map_err(|_| bad(key))?,
            "g_loss_variant" => {
                self.g_loss_variant = match value {
                    "saturating" => GanGVariant::Saturating,
                    "nonsaturating" => GanGVariant::NonSaturating,
                    _ => return Err(bad(key)),
                }
            }
            "target_age_mode" => {
                self.target_age_mode = match value {
                    "uniform" => TargetAgeMode::UniformRandom,
                    "match-input" => TargetAgeMode::MatchInput,
                    _ => return Err(bad(key)),
                }
            }
            "regressor_stop_mae" => {
                self.regressor_stop_mae = Some(value.parse().map_err(|_| bad(key))?)
            }
            "encoder_stop_psnr" => {
                self.encoder_stop_psnr = Some(value.parse().map_err(|_| bad(key))?)
            }
            _ => {
                return Err(Error::InvalidConfig(format!("unknown config key: {key}")));
            }
        }
        Ok(())
    }

    /// Parse a flat `key = value` config file into `self` (later lines
    /// win; `#` starts a comment).
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!(
                    "line {}: expected key = value, got {raw:?}",
                    lineno + 1
                )));
            };
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

/// Aggregate metrics carried in checkpoint manifests.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsDigest {
    pub regressor_test_mae: Option<f64>,
    pub encoder_psnr: Option<f64>,
    pub last_losses: Option<LossReport>,
}

/// Full mutable training state across phase 3.
pub struct TrainState<S: Real> {
    pub spec: NetworkSpec,
    pub config: TrainConfig,
    pub encoder: Encoder<S>,
    pub generator: Generator<S>,
    pub discriminator: Discriminator<S>,
    /// Frozen identity reference (deep copy of E at the end of phase 2).
    pub encoder_pre: Encoder<S>,
    /// Frozen age estimator from phase 1.
    pub regressor: Regressor<S>,
    pub adam_encoder: Adam<S>,
    pub adam_generator: Adam<S>,
    pub adam_discriminator: Adam<S>,
    /// Completed phase-3 epochs.
    pub epoch: usize,
    pub iteration: u64,
    pub encoder_pre_fingerprint: String,
    pub regressor_fingerprint: String,
    pub rng: ChaCha8Rng,
    pub metrics: MetricsDigest,
}

impl<S: Real> TrainState<S> {
    /// Assemble a state from pre-trained R and E; G and D start fresh.
    pub fn new(
        config: &TrainConfig,
        encoder: Encoder<S>,
        encoder_pre: Encoder<S>,
        regressor: Regressor<S>,
        metrics: MetricsDigest,
    ) -> Self {
        let spec = config.network_spec();
        let generator = Generator::init(&spec, mix_seed(&[config.seed, 0x6E]), true);
        let discriminator = Discriminator::init(&spec, mix_seed(&[config.seed, 0xDE]));
        let encoder_pre_fingerprint = fingerprint(&encoder_pre);
        let regressor_fingerprint = fingerprint(&regressor);
        TrainState {
            spec,
            config: config.clone(),
            encoder,
            generator,
            discriminator,
            encoder_pre,
            regressor,
            adam_encoder: Adam::new(config.learning_rate, config.weight_decay),
            adam_generator: Adam::new(config.learning_rate, config.weight_decay),
            adam_discriminator: Adam::new(config.learning_rate, config.weight_decay),
            epoch: 0,
            iteration: 0,
            encoder_pre_fingerprint,
            regressor_fingerprint,
            rng: epoch_rng(config.seed, PHASE_ADVERSARIAL, 0),
            metrics,
        }
    }

    /// Verify the freeze contract: E_pre and R must never change.
    pub fn check_frozen(&self) -> Result<()> {
        if fingerprint(&self.encoder_pre) != self.encoder_pre_fingerprint {
            return Err(Error::CheckpointMismatch(
                "frozen encoder_pre parameters changed".into(),
            ));
        }
        if fingerprint(&self.regressor) != self.regressor_fingerprint {
            return Err(Error::CheckpointMismatch(
                "frozen regressor parameters changed".into(),
            ));
        }
        Ok(())
    }
}

pub fn epoch_rng(seed: u64, phase: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, phase, epoch as u64]))
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idxs: Vec<usize> = (0..n).collect();
    shuffle(&mut idxs, rng);
    idxs.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn ensure_finite<S: Real>(value: S, component: &str, iteration: u64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Diverged {
            component: component.to_string(),
            iteration,
        });
    }
    Ok(())
}

// ── Phase 1: ordinal regressor ──────────────────────────────────────────

/// Pre-train the age regressor on rank targets; returns the network
/// (frozen from here on) and its final held-out MAE report.
pub fn pretrain_regressor<S: Real>(
    dataset: &Dataset<S>,
    config: &TrainConfig,
) -> Result<(Regressor<S>, MaeReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("regressor pre-training".into()));
    }
    let spec = config.network_spec();
    let mut regressor = Regressor::init(&spec, mix_seed(&[config.seed, 0xA6]));
    let mut adam = Adam::new(config.learning_rate, config.weight_decay);
    let (train, test) = dataset.split_holdout(0.1, mix_seed(&[config.seed, 0xA7]));
    let test = if test.is_empty() { dataset.clone() } else { test };
    let mut iteration = 0u64;
    let mut report = None;
    for epoch in 0..config.epochs_regressor {
        let mut rng = epoch_rng(config.seed, PHASE_REGRESSOR, epoch);
        for chunk in batches(train.len(), config.batch_size, &mut rng) {
            let (x, ages) = train.batch(&chunk);
            let targets = rank_encode_batch::<S>(&ages, config.max_age, config.bin_width)?;
            let (logits, cache) = regressor.forward(&x, BnMode::Train)?;
            let (loss, glogits) = rank_loss_grad(&logits, &targets)?;
            ensure_finite(loss, "rank_loss", iteration)?;
            let mut gs = GradStore::new();
            regressor.backward(&cache, &glogits, Some(&mut gs));
            adam.step(&mut regressor, &gs);
            regressor.commit_bn(&cache);
            iteration += 1;
        }
        let mae = evaluate_mae(&regressor, &test, config.bin_width, "regressor-holdout")?;
        log::info!(
            "phase1 epoch {epoch}: holdout MAE {:.3} ± {:.3} years",
            mae.mae_mean,
            mae.mae_std
        );
        let reached = config
            .regressor_stop_mae
            .map(|t| mae.mae_mean <= t)
            .unwrap_or(false);
        report = Some(mae);
        if reached {
            break;
        }
    }
    if !all_finite(&regressor) {
        return Err(Error::Diverged {
            component: "regressor parameters".into(),
            iteration,
        });
    }
    Ok((regressor, report.expect("at least one epoch")))
}

// ── Phase 2: encoder pre-training ───────────────────────────────────────

/// Mean squared reconstruction error per pixel, with gradient w.r.t. the
/// reconstruction.
fn mse_grad<S: Real>(x: &Array4<S>, xhat: &Array4<S>) -> (S, Array4<S>) {
    let n = scalar::<S>(x.len() as f64);
    let diff = xhat - x;
    let value = diff.mapv(|d| d * d).sum() / n;
    let two = scalar::<S>(2.0);
    (value, diff.mapv(|d| two * d / n))
}

/// PSNR in dB for unit-range images given a mean squared error.
pub fn psnr(mse: f64) -> f64 {
    -10.0 * mse.max(1e-12).log10()
}

/// Pre-train E jointly with a throwaway decoder under plain MSE
/// reconstruction. Returns `(E, E_pre, holdout PSNR)` where E_pre is the
/// frozen deep copy used by the identity loss.
pub fn pretrain_encoder<S: Real>(
    dataset: &Dataset<S>,
    config: &TrainConfig,
) -> Result<(Encoder<S>, Encoder<S>, f64)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("encoder pre-training".into()));
    }
    let spec = config.network_spec();
    let mut encoder = Encoder::init(&spec, mix_seed(&[config.seed, 0xE6]));
    let mut decoder = Generator::init(&spec, mix_seed(&[config.seed, 0xE7]), false);
    let mut adam_e = Adam::new(config.learning_rate, config.weight_decay);
    let mut adam_dec = Adam::new(config.learning_rate, config.weight_decay);
    let (train, test) = dataset.split_holdout(0.1, mix_seed(&[config.seed, 0xE8]));
    let test = if test.is_empty() { dataset.clone() } else { test };
    let mut iteration = 0u64;
    let mut holdout_psnr = 0.0;
    for epoch in 0..config.epochs_encoder {
        let mut rng = epoch_rng(config.seed, PHASE_ENCODER, epoch);
        for chunk in batches(train.len(), config.batch_size, &mut rng) {
            let (x, _) = train.batch(&chunk);
            let (z, e_cache) = encoder.forward(&x)?;
            let (xhat, g_cache) = decoder.forward(&z, None)?;
            let (loss, gxhat) = mse_grad(&x, &xhat);
            ensure_finite(loss, "reconstruction", iteration)?;
            let mut gs_dec = GradStore::new();
            let gz = decoder.backward(&g_cache, &gxhat, Some(&mut gs_dec));
            let mut gs_e = GradStore::new();
            encoder.backward(&e_cache, &gz, Some(&mut gs_e));
            adam_dec.step(&mut decoder, &gs_dec);
            adam_e.step(&mut encoder, &gs_e);
            iteration += 1;
        }
        holdout_psnr = psnr(reconstruction_mse(&encoder, &decoder, &test)?);
        log::info!("phase2 epoch {epoch}: holdout PSNR {holdout_psnr:.2} dB");
        if config
            .encoder_stop_psnr
            .map(|t| holdout_psnr >= t)
            .unwrap_or(false)
        {
            break;
        }
    }
    if !all_finite(&encoder) {
        return Err(Error::Diverged {
            component: "encoder parameters".into(),
            iteration,
        });
    }
    let encoder_pre = encoder.clone();
    Ok((encoder, encoder_pre, holdout_psnr))
}

/// Dataset-level reconstruction MSE of an encoder/decoder pair.
pub fn reconstruction_mse<S: Real>(
    encoder: &Encoder<S>,
    decoder: &Generator<S>,
    dataset: &Dataset<S>,
) -> Result<f64> {
    let idxs: Vec<usize> = (0..dataset.len()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idxs.chunks(64) {
        let (x, _) = dataset.batch(chunk);
        let (z, _) = encoder.forward(&x)?;
        let (xhat, _) = decoder.forward(&z, None)?;
        let diff = &xhat - &x;
        total += to_f64(diff.mapv(|d| d * d).sum());
        count += x.len();
    }
    Ok(total / count as f64)
}

// ── Phase 3: alternating adversarial updates ────────────────────────────

/// One alternating iteration: a discriminator Adam step on the
/// adversarial loss with detached fakes, then one generator/encoder Adam
/// step on the weighted compound objective (evaluated against the just-
/// updated discriminator).
pub fn train_step<S: Real>(
    state: &mut TrainState<S>,
    x: &Array4<S>,
    ages_in: &[f64],
) -> Result<LossReport> {
    let max_age = state.config.max_age;
    let ages_out: Vec<f64> = match state.config.target_age_mode {
        TargetAgeMode::UniformRandom => ages_in
            .iter()
            .map(|_| state.rng.gen_range(0.0..=max_age))
            .collect(),
        TargetAgeMode::MatchInput => ages_in.to_vec(),
    };
    let ell_in: Vec<f64> = ages_in.iter().map(|a| a / max_age).collect();
    let ell_out: Vec<f64> = ages_out.iter().map(|a| a / max_age).collect();

    // Discriminator update; fakes are constants here.
    let (z, _) = state.encoder.forward(x)?;
    let (fakes, _) = state.generator.forward(&z, Some(&ell_out))?;
    let (gan_d_value, gs_d, cache_real, cache_fake) = gan_d_objective_grad(
        &state.discriminator,
        (x, &ell_in),
        (&fakes, &ell_out),
        BnMode::Train,
    )?;
    ensure_finite(gan_d_value, "gan_d", state.iteration)?;
    state
        .adam_discriminator
        .step(&mut state.discriminator, &gs_d);
    state.discriminator.commit_bn(&cache_real);
    state.discriminator.commit_bn(&cache_fake);

    // Generator/encoder update against the updated discriminator.
    let step = {
        let nets = GeneratorLossNets {
            encoder: &state.encoder,
            generator: &state.generator,
            discriminator: &state.discriminator,
            encoder_pre: &state.encoder_pre,
            regressor: &state.regressor,
        };
        generator_objective_grad(
            &nets,
            x,
            ages_in,
            &ages_out,
            max_age,
            &state.config.weights,
            state.config.g_loss_variant,
        )?
    };
    state
        .adam_generator
        .step(&mut state.generator, &step.grads_generator);
    state
        .adam_encoder
        .step(&mut state.encoder, &step.grads_encoder);

    state.iteration += 1;
    let report = LossReport {
        gan_d: to_f64(gan_d_value),
        ..step.report
    };
    if let Some(component) = report.first_non_finite() {
        return Err(Error::Diverged {
            component: component.to_string(),
            iteration: state.iteration,
        });
    }
    state.metrics.last_losses = Some(report);
    Ok(report)
}

/// Run all three phases (or resume phase 3 from a checkpoint directory),
/// writing `train_log.csv` and periodic checkpoints under `out_dir`.
/// Returns the final checkpoint path.
pub fn train<S: Real>(
    config: &TrainConfig,
    dataset: &Dataset<S>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("training".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut state: TrainState<S> = match resume {
        Some(ckpt) => {
            let state = load_checkpoint::<S>(ckpt)?;
            let want = config.network_spec().fingerprint();
            if state.spec.fingerprint() != want {
                return Err(Error::CheckpointMismatch(format!(
                    "checkpoint was built for {:?}, config asks for {:?}",
                    state.spec,
                    config.network_spec()
                )));
            }
            state
        }
        None => {
            log::info!("phase 1: pre-training ordinal regressor");
            let (regressor, mae) = pretrain_regressor(dataset, config)?;
            log::info!("phase 1 done: holdout MAE {:.3} years", mae.mae_mean);
            log::info!("phase 2: pre-training encoder");
            let (encoder, encoder_pre, psnr_db) = pretrain_encoder(dataset, config)?;
            log::info!("phase 2 done: holdout PSNR {psnr_db:.2} dB");
            let metrics = MetricsDigest {
                regressor_test_mae: Some(mae.mae_mean),
                encoder_psnr: Some(psnr_db),
                last_losses: None,
            };
            TrainState::new(config, encoder, encoder_pre, regressor, metrics)
        }
    };

    let log_path = out_dir.join("train_log.csv");
    let fresh_log = !log_path.exists();
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    if fresh_log {
        writeln!(
            log_file,
            "iteration,pixel,identity,gan_g,regression,total_g,gan_d,wall_secs"
        )?;
    }
    let started = Instant::now();

    run_phase3(
        &mut state,
        dataset,
        |iteration, report| {
            writeln!(
                log_file,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
                iteration,
                report.pixel,
                report.identity,
                report.gan_g,
                report.regression,
                report.total_g,
                report.gan_d,
                started.elapsed().as_secs_f64()
            )?;
            Ok(())
        },
        |state| {
            if state.config.checkpoint_every > 0
                && state.epoch % state.config.checkpoint_every == 0
            {
                let dir = out_dir.join(format!("ckpt_epoch_{:04}", state.epoch));
                save_checkpoint(state, &dir)?;
                log::info!("epoch {}: checkpoint at {}", state.epoch, dir.display());
            }
            if let Some(r) = &state.metrics.last_losses {
                log::info!(
                    "epoch {}: total_g {:.4} (pixel {:.4} identity {:.4} gan_g {:.4} regression {:.4}) gan_d {:.4}",
                    state.epoch, r.total_g, r.pixel, r.identity, r.gan_g, r.regression, r.gan_d
                );
            }
            Ok(())
        },
    )?;

    let final_dir = out_dir.join("ckpt_final");
    save_checkpoint(&state, &final_dir)?;
    Ok(final_dir)
}

/// Drive phase 3 from the state's current epoch to `config.epochs`,
/// invoking `on_report` after every iteration and `on_epoch` after every
/// epoch (the frozen-network and finiteness checks run unconditionally).
pub fn run_phase3<S: Real>(
    state: &mut TrainState<S>,
    dataset: &Dataset<S>,
    mut on_report: impl FnMut(u64, &LossReport) -> Result<()>,
    mut on_epoch: impl FnMut(&TrainState<S>) -> Result<()>,
) -> Result<()> {
    let first_epoch = state.epoch;
    for epoch in first_epoch..state.config.epochs {
        state.rng = epoch_rng(state.config.seed, PHASE_ADVERSARIAL, epoch);
        let mut shuffle_rng = epoch_rng(state.config.seed, PHASE_ADVERSARIAL ^ 0xFF, epoch);
        for chunk in batches(dataset.len(), state.config.batch_size, &mut shuffle_rng) {
            let (x, ages) = dataset.batch(&chunk);
            let report = train_step(state, &x, &ages)?;
            on_report(state.iteration, &report)?;
        }
        state.epoch = epoch + 1;
        state.check_frozen()?;
        if !all_finite(&state.encoder)
            || !all_finite(&state.generator)
            || !all_finite(&state.discriminator)
        {
            return Err(Error::Diverged {
                component: "network parameters".into(),
                iteration: state.iteration,
            });
        }
        on_epoch(state)?;
    }
    Ok(())
}

// ── Checkpoint assembly ─────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    spec: NetworkSpec,
    spec_fingerprint: String,
    config: TrainConfig,
    epoch: usize,
    iteration: u64,
    adam_t: BTreeMap<String, u64>,
    fingerprints: BTreeMap<String, String>,
    metrics: MetricsDigest,
}

const MANIFEST_FORMAT: u32 = 1;

/// Write the full training state into `dir` (parameter blobs + manifest).
pub fn save_checkpoint<S: Real>(state: &TrainState<S>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let nets: [(&str, &dyn ParamSet<S>); 5] = [
        ("e", &state.encoder),
        ("g", &state.generator),
        ("d", &state.discriminator),
        ("e_pre", &state.encoder_pre),
        ("r", &state.regressor),
    ];
    let mut fingerprints = BTreeMap::new();
    for (name, net) in nets {
        checkpoint::write_blob(&dir.join(format!("{name}.bin")), &checkpoint::net_entries(net))?;
        fingerprints.insert(name.to_string(), fingerprint(net));
    }
    let optimizers = [
        ("adam_e", &state.adam_encoder),
        ("adam_g", &state.adam_generator),
        ("adam_d", &state.adam_discriminator),
    ];
    let mut adam_t = BTreeMap::new();
    for (name, adam) in optimizers {
        checkpoint::write_blob(
            &dir.join(format!("{name}.bin")),
            &checkpoint::moment_entries(&adam.export_moments()),
        )?;
        adam_t.insert(name.to_string(), adam.t);
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT,
        spec: state.spec.clone(),
        spec_fingerprint: state.spec.fingerprint(),
        config: state.config.clone(),
        epoch: state.epoch,
        iteration: state.iteration,
        adam_t,
        fingerprints,
        metrics: state.metrics.clone(),
    };
    let tmp = dir.join("manifest.json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
    std::fs::rename(tmp, dir.join("manifest.json"))?;
    Ok(())
}

/// Load a checkpoint directory back into a full training state.
///
/// Checkpoints store 32-bit parameters; loading verifies both the spec
/// fingerprint and each network's state fingerprint, so evaluation-mode
/// outputs reproduce bitwise at `S = f32`.
pub fn load_checkpoint<S: Real>(dir: &Path) -> Result<TrainState<S>> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::CheckpointMismatch(format!(
            "unsupported checkpoint format {}",
            manifest.format
        )));
    }
    let spec = manifest.spec.clone();
    spec.validate()?;
    if spec.fingerprint() != manifest.spec_fingerprint {
        return Err(Error::CheckpointMismatch(
            "spec fingerprint does not match manifest".into(),
        ));
    }
    let config = manifest.config.clone();
    let mut encoder = Encoder::<S>::init(&spec, 0);
    let mut generator = Generator::<S>::init(&spec, 0, true);
    let mut discriminator = Discriminator::<S>::init(&spec, 0);
    let mut encoder_pre = Encoder::<S>::init(&spec, 0);
    let mut regressor = Regressor::<S>::init(&spec, 0);
    {
        let nets: [(&str, &mut dyn ParamSet<S>); 5] = [
            ("e", &mut encoder),
            ("g", &mut generator),
            ("d", &mut discriminator),
            ("e_pre", &mut encoder_pre),
            ("r", &mut regressor),
        ];
        for (name, net) in nets {
            let blob = checkpoint::read_blob(&dir.join(format!("{name}.bin")))?;
            checkpoint::load_net(net, &blob, name)?;
        }
    }
    let verify: [(&str, &dyn ParamSet<S>); 5] = [
        ("e", &encoder),
        ("g", &generator),
        ("d", &discriminator),
        ("e_pre", &encoder_pre),
        ("r", &regressor),
    ];
    for (name, net) in verify {
        let want = manifest.fingerprints.get(name).ok_or_else(|| {
            Error::CheckpointMismatch(format!("manifest lacks fingerprint for {name}"))
        })?;
        let got = fingerprint(net);
        if &got != want {
            return Err(Error::CheckpointMismatch(format!(
                "network {name} fingerprint mismatch after load"
            )));
        }
    }
    let load_adam = |name: &str| -> Result<Adam<S>> {
        let mut adam = Adam::new(config.learning_rate, config.weight_decay);
        let blob = checkpoint::read_blob(&dir.join(format!("{name}.bin")))?;
        let t = *manifest.adam_t.get(name).unwrap_or(&0);
        adam.import_moments(checkpoint::moments_from_blob(blob), t);
        Ok(adam)
    };
    let adam_encoder = load_adam("adam_e")?;
    let adam_generator = load_adam("adam_g")?;
    let adam_discriminator = load_adam("adam_d")?;
    let encoder_pre_fingerprint = fingerprint(&encoder_pre);
    let regressor_fingerprint = fingerprint(&regressor);
    Ok(TrainState {
        spec,
        rng: epoch_rng(config.seed, PHASE_ADVERSARIAL, manifest.epoch),
        config,
        encoder,
        generator,
        discriminator,
        encoder_pre,
        regressor,
        adam_encoder,
        adam_generator,
        adam_discriminator,
        epoch: manifest.epoch,
        iteration: manifest.iteration,
        encoder_pre_fingerprint,
        regressor_fingerprint,
        metrics: manifest.metrics,
    })
}
