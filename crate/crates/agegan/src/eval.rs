//! Post-training evaluation: age-sweep synthesis, aging-accuracy and
//! identity-permanence metrics, and the paired ablation harness.
//!
//! Aging accuracy is measured two ways: through the frozen regressor
//! (the estimator that also shaped training) and through the analytic
//! oracle on synthetic data (the independent referee). Both are reported
//! side by side.

use std::path::{Path, PathBuf};

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{oracle_age, oracle_identity_distance, Dataset, ImageTensor, Provenance};
use crate::losses::LossWeights;
use crate::nn::{fingerprint, BnMode};
use crate::ordinal::{mean_std, rank_decode_hard};
use crate::training::{
    pretrain_encoder, pretrain_regressor, run_phase3, MetricsDigest, TrainConfig, TrainState,
};
use crate::{mix_seed, to_f64, Error, Real, Result};

/// Mean/std/count triple used throughout the reports.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stats {
    pub fn from_samples(xs: &[f64]) -> Self {
        let (mean, std) = mean_std(xs);
        Stats {
            mean,
            std,
            n: xs.len(),
        }
    }
}

/// Aging-accuracy and identity metrics for one model on one dataset.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_items: usize,
    pub ages_per_item: usize,
    pub seed: u64,
    /// Oracle-refereed aging MAE in years (synthetic data only).
    pub aging_mae_oracle: Option<Stats>,
    /// Aging MAE in years measured by the frozen regressor.
    pub aging_mae_regressor: Stats,
    /// Mean latent identity distance ||E_pre(x̂) - E_pre(x)||_2.
    pub identity_latent: Stats,
    /// Oracle identity-patch distance (synthetic data only).
    pub identity_oracle: Option<Stats>,
}

/// A grid of age-swept generations: one row per source image, the source
/// first, then one cell per requested age (ascending).
pub struct SweepGrid<S: Real> {
    pub ages: Vec<f64>,
    pub rows: Vec<Vec<ImageTensor<S>>>,
    pub cell_size: usize,
}

/// Run the encoder/generator forward over every (source, age) pair.
pub fn synthesize_sweep<S: Real>(
    state: &TrainState<S>,
    images: &[ImageTensor<S>],
    target_ages: &[f64],
) -> Result<SweepGrid<S>> {
    if target_ages.is_empty() {
        return Err(Error::InvalidInput("empty age list".into()));
    }
    if images.is_empty() {
        return Err(Error::InvalidInput("no source images".into()));
    }
    let max_age = state.config.max_age;
    if target_ages.iter().any(|a| !(0.0..=max_age).contains(a)) {
        return Err(Error::InvalidInput(format!(
            "target age outside [0, {max_age}]"
        )));
    }
    let mut ages = target_ages.to_vec();
    ages.sort_by(|a, b| a.partial_cmp(b).expect("finite ages"));
    let mut rows = Vec::with_capacity(images.len());
    for img in images {
        let x = img
            .data()
            .clone()
            .insert_axis(Axis(0));
        let (z, _) = state.encoder.forward(&x)?;
        let mut row = vec![img.clone()];
        for &age in &ages {
            let (y, _) = state.generator.forward(&z, Some(&[age / max_age]))?;
            let cell = ImageTensor::new(y.index_axis(Axis(0), 0).to_owned())?;
            row.push(cell);
        }
        rows.push(row);
    }
    Ok(SweepGrid {
        ages,
        rows,
        cell_size: images[0].size(),
    })
}

#[derive(Serialize)]
struct SweepSidecar<'a> {
    ages: &'a [f64],
    rows: usize,
    cols: usize,
    cell_width: usize,
    cell_height: usize,
    layout: &'static str,
}

/// Write the sweep as one 8-bit PNG montage plus a JSON sidecar
/// describing the cell geometry.
pub fn write_sweep_montage<S: Real>(grid: &SweepGrid<S>, png_path: &Path) -> Result<()> {
    let rows = grid.rows.len();
    let cols = grid.ages.len() + 1;
    let cell = grid.cell_size;
    let mut canvas = image::RgbImage::new((cols * cell) as u32, (rows * cell) as u32);
    for (ri, row) in grid.rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            let rgb = crate::data::to_rgb8(img);
            for y in 0..cell {
                for x in 0..cell {
                    canvas.put_pixel(
                        (ci * cell + x) as u32,
                        (ri * cell + y) as u32,
                        *rgb.get_pixel(x as u32, y as u32),
                    );
                }
            }
        }
    }
    canvas.save(png_path).map_err(Error::Image)?;
    let sidecar = SweepSidecar {
        ages: &grid.ages,
        rows,
        cols,
        cell_width: cell,
        cell_height: cell,
        layout: "rows = sources (source image first), columns = ascending target ages",
    };
    std::fs::write(
        png_path.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

/// Measure aging accuracy and identity permanence over a dataset.
///
/// For every item, `ages_per_item` target ages are drawn uniformly from
/// `[0, max_age]`; the generated face's apparent age is read back with
/// the frozen regressor and (on synthetic data, when `use_oracle`) the
/// analytic oracle. `use_oracle` on non-synthetic data is an error.
pub fn evaluate<S: Real>(
    state: &TrainState<S>,
    dataset: &Dataset<S>,
    ages_per_item: usize,
    use_oracle: bool,
    seed: u64,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("evaluation".into()));
    }
    if use_oracle && dataset.provenance != Provenance::Synthetic {
        return Err(Error::InvalidInput(
            "oracle evaluation requires a synthetic dataset".into(),
        ));
    }
    if ages_per_item == 0 {
        return Err(Error::InvalidInput("ages_per_item must be >= 1".into()));
    }
    let max_age = state.config.max_age;
    let bin_width = state.config.bin_width;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xE7A1]));
    let targets: Vec<Vec<f64>> = (0..dataset.len())
        .map(|_| {
            (0..ages_per_item)
                .map(|_| rng.gen_range(0.0..=max_age))
                .collect()
        })
        .collect();

    let mut err_oracle = Vec::new();
    let mut err_regressor = Vec::new();
    let mut id_latent = Vec::new();
    let mut id_oracle = Vec::new();

    let idxs: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idxs.chunks(64) {
        let (x, _) = dataset.batch(chunk);
        let (z, _) = state.encoder.forward(&x)?;
        let (z_ref, _) = state.encoder_pre.forward(&x)?;
        for k in 0..ages_per_item {
            let ages_t: Vec<f64> = chunk.iter().map(|&i| targets[i][k]).collect();
            let ell: Vec<f64> = ages_t.iter().map(|a| a / max_age).collect();
            let (xhat, _) = state.generator.forward(&z, Some(&ell))?;
            let (logits, _) = state.regressor.forward(&xhat, BnMode::Eval)?;
            let (z_hat, _) = state.encoder_pre.forward(&xhat)?;
            for (row, &item) in chunk.iter().enumerate() {
                let gen_img = ImageTensor::new(xhat.index_axis(Axis(0), row).to_owned())?;
                let target = ages_t[row];
                let l: Vec<S> = logits.row(row).to_vec();
                err_regressor.push((rank_decode_hard(&l, bin_width) - target).abs());
                if use_oracle {
                    err_oracle.push((oracle_age(&gen_img, max_age) - target).abs());
                    id_oracle.push(oracle_identity_distance(
                        &gen_img,
                        &dataset.items[item].image,
                    )?);
                }
                let dz = (&z_hat.row(row) - &z_ref.row(row))
                    .mapv(|v| v * v)
                    .sum();
                id_latent.push(to_f64(dz).sqrt());
            }
        }
    }
    Ok(EvalReport {
        n_items: dataset.len(),
        ages_per_item,
        seed,
        aging_mae_oracle: use_oracle.then(|| Stats::from_samples(&err_oracle)),
        aging_mae_regressor: Stats::from_samples(&err_regressor),
        identity_latent: Stats::from_samples(&id_latent),
        identity_oracle: use_oracle.then(|| Stats::from_samples(&id_oracle)),
    })
}

/// Spec surface: aging accuracy only (the full report computes both).
pub fn evaluate_aging_accuracy<S: Real>(
    state: &TrainState<S>,
    dataset: &Dataset<S>,
    ages_per_item: usize,
    use_oracle: bool,
    seed: u64,
) -> Result<EvalReport> {
    evaluate(state, dataset, ages_per_item, use_oracle, seed)
}

/// Spec surface: identity metrics only (oracle part on synthetic data).
pub fn evaluate_identity<S: Real>(
    state: &TrainState<S>,
    dataset: &Dataset<S>,
    ages_per_item: usize,
    seed: u64,
) -> Result<EvalReport> {
    let use_oracle = dataset.provenance == Provenance::Synthetic;
    evaluate(state, dataset, ages_per_item, use_oracle, seed)
}

/// One trained arm of an ablation.
pub struct ArmResult<S: Real> {
    pub name: String,
    pub weights: LossWeights,
    pub report: EvalReport,
    pub state: TrainState<S>,
}

/// Paired-run outcome across seeds and arms.
pub struct AblationOutcome<S: Real> {
    pub seeds: Vec<u64>,
    /// `per_seed[s][a]` is arm `a` trained with seed `seeds[s]`.
    pub per_seed: Vec<Vec<ArmResult<S>>>,
}

impl<S: Real> AblationOutcome<S> {
    /// Mean of a metric across seeds for the given arm index.
    pub fn mean_over_seeds(&self, arm: usize, metric: impl Fn(&EvalReport) -> f64) -> f64 {
        let vals: Vec<f64> = self.per_seed.iter().map(|s| metric(&s[arm].report)).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Train every arm on every seed, sharing the pre-trained regressor and
/// encoder within a seed (phases 1 and 2 do not depend on the loss
/// weights, so arms differ in phase 3 only).
pub fn run_ablation_arms<S: Real>(
    base: &TrainConfig,
    dataset: &Dataset<S>,
    n_seeds: usize,
    arms: &[(String, LossWeights)],
    eval_ages_per_item: usize,
    eval_items: Option<usize>,
) -> Result<AblationOutcome<S>> {
    if arms.is_empty() || n_seeds == 0 {
        return Err(Error::InvalidConfig("need at least one arm and seed".into()));
    }
    let use_oracle = dataset.provenance == Provenance::Synthetic;
    // Metrics are estimated on a leading subset when the caller asks for
    // one (training always sees the full dataset).
    let eval_ds: Dataset<S> = match eval_items {
        Some(n) if n < dataset.len() => Dataset {
            items: dataset.items[..n].to_vec(),
            max_age: dataset.max_age,
            provenance: dataset.provenance,
        },
        _ => dataset.clone(),
    };
    let mut outcome = AblationOutcome {
        seeds: Vec::new(),
        per_seed: Vec::new(),
    };
    for s in 0..n_seeds {
        let seed = mix_seed(&[base.seed, 0xAB1A, s as u64]);
        let mut cfg = base.clone();
        cfg.seed = seed;
        log::info!("ablation seed {s} ({seed}): pre-training shared R and E");
        let (regressor, mae) = pretrain_regressor(dataset, &cfg)?;
        let (encoder, encoder_pre, psnr_db) = pretrain_encoder(dataset, &cfg)?;
        let metrics = MetricsDigest {
            regressor_test_mae: Some(mae.mae_mean),
            encoder_psnr: Some(psnr_db),
            last_losses: None,
        };
        let mut arm_results = Vec::with_capacity(arms.len());
        for (name, weights) in arms {
            let mut arm_cfg = cfg.clone();
            arm_cfg.weights = *weights;
            let mut state = TrainState::new(
                &arm_cfg,
                encoder.clone(),
                encoder_pre.clone(),
                regressor.clone(),
                metrics.clone(),
            );
            log::info!("ablation seed {s}, arm {name}: {} epochs", arm_cfg.epochs);
            run_phase3(&mut state, dataset, |_, _| Ok(()), |_| Ok(()))?;
            let report = evaluate(
                &state,
                &eval_ds,
                eval_ages_per_item,
                use_oracle,
                mix_seed(&[seed, 0xE7]),
            )?;
            arm_results.push(ArmResult {
                name: name.clone(),
                weights: *weights,
                report,
                state,
            });
        }
        outcome.seeds.push(seed);
        outcome.per_seed.push(arm_results);
    }
    Ok(outcome)
}

/// Serializable summary of the regressor ablation.
#[derive(Debug, Clone, Serialize)]
pub struct RegressorAblationSummary {
    pub seeds: Vec<u64>,
    pub with_r: Vec<EvalReport>,
    pub without_r: Vec<EvalReport>,
    pub mae_with_mean: f64,
    pub mae_without_mean: f64,
    pub ratio: f64,
    pub pass: bool,
}

impl RegressorAblationSummary {
    /// The one-line summary the harness writes next to the reports.
    pub fn summary_line(&self) -> String {
        format!("ratio={:.4} pass={}", self.ratio, self.pass)
    }
}

/// Directional reproduction of the with/without-regressor comparison:
/// two trainings per seed differing only in the regression weight
/// (preset vs zero). Pass iff mean oracle MAE with R is below 0.6 times
/// the mean without R.
pub fn ablation_with_without_r<S: Real>(
    base: &TrainConfig,
    dataset: &Dataset<S>,
    n_seeds: usize,
    eval_ages_per_item: usize,
    eval_items: Option<usize>,
) -> Result<(RegressorAblationSummary, AblationOutcome<S>)> {
    if dataset.provenance != Provenance::Synthetic {
        return Err(Error::InvalidInput(
            "the regressor ablation needs the synthetic oracle".into(),
        ));
    }
    let mut without = base.weights;
    without.regression = 0.0;
    let arms = vec![
        ("with_r".to_string(), base.weights),
        ("without_r".to_string(), without),
    ];
    let outcome = run_ablation_arms(base, dataset, n_seeds, &arms, eval_ages_per_item, eval_items)?;
    let oracle_mae = |r: &EvalReport| r.aging_mae_oracle.expect("synthetic oracle").mean;
    let mae_with_mean = outcome.mean_over_seeds(0, oracle_mae);
    let mae_without_mean = outcome.mean_over_seeds(1, oracle_mae);
    let summary = RegressorAblationSummary {
        seeds: outcome.seeds.clone(),
        with_r: outcome
            .per_seed
            .iter()
            .map(|s| s[0].report.clone())
            .collect(),
        without_r: outcome
            .per_seed
            .iter()
            .map(|s| s[1].report.clone())
            .collect(),
        mae_with_mean,
        mae_without_mean,
        ratio: mae_without_mean / mae_with_mean,
        pass: mae_with_mean < 0.6 * mae_without_mean,
    };
    Ok((summary, outcome))
}

/// Write ablation reports and the one-line summary under `out_dir`.
pub fn write_ablation_outputs(
    summary: &RegressorAblationSummary,
    out_dir: &Path,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("ablation_report.json"),
        serde_json::to_string_pretty(summary)?,
    )?;
    let line_path = out_dir.join("ablation_summary.txt");
    std::fs::write(&line_path, format!("{}\n", summary.summary_line()))?;
    Ok(line_path)
}

/// Check that the oracle-based evaluation never touches the regressor's
/// parameters (estimator independence).
pub fn oracle_estimator_independent<S: Real>(
    state: &TrainState<S>,
    dataset: &Dataset<S>,
    seed: u64,
) -> Result<bool> {
    let before = fingerprint(&state.regressor);
    let _ = evaluate(state, dataset, 2, true, seed)?;
    Ok(fingerprint(&state.regressor) == before)
}
