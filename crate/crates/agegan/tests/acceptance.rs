//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured numbers (run with `--nocapture` to see them).
//!
//! The heavy trainings (criteria 4, 5, 6) share fixtures: the 5k-item
//! synthetic dataset and a 3-seed x 3-arm ablation (full preset, no
//! regression loss, no identity loss) in which phases 1 and 2 are trained
//! once per seed and reused across arms. Wall-clock budgets are stated
//! for a 4-core CPU and scaled for machines with fewer cores.

use std::sync::LazyLock;
use std::time::Instant;

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use agegan::data::{gen_synthetic_dataset, Dataset, SynthConfig};
use agegan::eval::{run_ablation_arms, AblationOutcome, EvalReport};
use agegan::gradcheck::run_gradcheck;
use agegan::losses::{pixel_loss, LossWeights};
use agegan::networks::{Discriminator, Encoder, Generator, NetworkSpec, Regressor};
use agegan::nn::{fingerprint, BnMode};
use agegan::ordinal::{rank_decode_hard, rank_encode};
use agegan::training::{
    load_checkpoint, pretrain_regressor, run_phase3, save_checkpoint, MetricsDigest, TargetAgeMode,
    TrainConfig, TrainState,
};

/// Scale a wall-clock budget stated for a 4-core CPU to this machine.
fn budget_secs(four_core_secs: f64) -> f64 {
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1) as f64;
    four_core_secs * (4.0 / cores.min(4.0))
}

fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::desk_preset()
    }
}

/// The desk-scale oracle dataset: 5000 synthetic 32x32 faces with ages
/// uniform in [0, 60].
static SYNTH_5K: LazyLock<Dataset<f32>> = LazyLock::new(|| {
    gen_synthetic_dataset(&SynthConfig {
        image_size: 32,
        max_age: 60.0,
        n_identities: 500,
        images_per_identity: 10,
        seed: 20240601,
    })
    .expect("synthetic dataset")
});

struct AblationFixture {
    outcome: AblationOutcome<f32>,
    elapsed_secs: f64,
}

/// Three arms per seed: the full preset, the preset with the regression
/// weight zeroed, and the preset with the identity weight zeroed.
static ABLATION: LazyLock<Result<AblationFixture, String>> = LazyLock::new(|| {
    let started = Instant::now();
    let cfg = desk_config(71);
    let mut no_r = cfg.weights;
    no_r.regression = 0.0;
    let mut no_i = cfg.weights;
    no_i.identity = 0.0;
    let arms = vec![
        ("full".to_string(), cfg.weights),
        ("no_regression".to_string(), no_r),
        ("no_identity".to_string(), no_i),
    ];
    let outcome = run_ablation_arms(&cfg, &SYNTH_5K, 3, &arms, 4, Some(1000))
        .map_err(|e| format!("ablation training failed: {e}"))?;
    Ok(AblationFixture {
        outcome,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
});

fn oracle_mae(r: &EvalReport) -> f64 {
    r.aging_mae_oracle.expect("synthetic oracle").mean
}

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let report = run_gradcheck(7, 64, 1e-4).expect("gradcheck runs");
    let elapsed = started.elapsed().as_secs_f64();
    for c in &report.checks {
        assert!(
            c.max_rel_err < 1e-4,
            "criterion 1: {} max rel err {:.3e} >= 1e-4",
            c.name,
            c.max_rel_err
        );
        assert!(c.coords_checked >= 50);
    }
    let limit = budget_secs(300.0);
    assert!(
        elapsed < limit,
        "criterion 1: gradcheck took {elapsed:.1}s (budget {limit:.0}s)"
    );
    println!(
        "ACCEPTANCE 1 gradient-correctness: PASS (max rel err {:.3e} over {} losses, {:.1}s)",
        report.max_rel_err(),
        report.checks.len(),
        elapsed
    );
}

#[test]
fn criterion_2_pixel_loss_scaling_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let gaps = [2.0f64, 4.0, 8.0, 16.0];
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let x: Array4<f64> = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.gen_range(0.0..1.0));
        let xhat: Array4<f64> = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.gen_range(0.0..1.0));
        for (i, &g1) in gaps.iter().enumerate() {
            for &g2 in &gaps[i + 1..] {
                let c = g2 / g1;
                let v1 = pixel_loss(&x, &xhat, &[20.0, 20.0], &[20.0 + g1, 20.0 - g1]).unwrap();
                let v2 = pixel_loss(&x, &xhat, &[20.0, 20.0], &[20.0 + g2, 20.0 - g2]).unwrap();
                let rel = (v2 - v1 / c).abs() / v1.abs().max(1e-300);
                worst = worst.max(rel);
                assert!(
                    rel < 1e-9,
                    "criterion 2: trial {trial} gaps ({g1},{g2}) rel err {rel:.3e}"
                );
            }
        }
    }
    println!("ACCEPTANCE 2 pixel-scaling-law: PASS (worst relative error {worst:.3e})");
}

#[test]
fn criterion_3_ordinal_codec() {
    // Exhaustive encode/decode consistency over integer ages 0..=60.
    for age in 0..=60u32 {
        let t = rank_encode(age as f64, 60.0, 1.0).unwrap();
        let logits: Vec<f64> = t
            .bits
            .iter()
            .map(|&b| if b { 40.0 } else { -40.0 })
            .collect();
        assert_eq!(
            rank_decode_hard(&logits, 1.0),
            age as f64,
            "criterion 3: integer age {age}"
        );
    }
    // Brute-force decode equivalence over every monotone pattern, K-1 <= 12.
    let mut patterns = 0usize;
    for m in 1..=12usize {
        for pattern in 0..(1u32 << m) {
            let bits: Vec<bool> = (0..m).map(|k| pattern & (1 << k) != 0).collect();
            if !bits.windows(2).all(|w| w[0] || !w[1]) {
                continue;
            }
            patterns += 1;
            let logits: Vec<f64> = bits.iter().map(|&b| if b { 5.0 } else { -5.0 }).collect();
            let by_count = rank_decode_hard(&logits, 1.0);
            // enumerate every monotone hypothesis, pick max agreement
            let mut best = (0usize, -1i64);
            for h in 0..=m {
                let agree = (0..m).filter(|&k| (k < h) == bits[k]).count() as i64;
                if agree > best.1 {
                    best = (h, agree);
                }
            }
            assert_eq!(
                by_count, best.0 as f64,
                "criterion 3: pattern {pattern:b} (m={m})"
            );
        }
    }
    println!(
        "ACCEPTANCE 3 ordinal-codec: PASS (61 integer ages exhaustive, {patterns} monotone patterns vs brute force)"
    );
}

#[test]
fn criterion_4_regressor_pretraining() {
    let started = Instant::now();
    let mut cfg = desk_config(41);
    cfg.epochs_regressor = 30;
    cfg.regressor_stop_mae = Some(3.0);
    let (_, mae) = pretrain_regressor(&SYNTH_5K, &cfg).expect("phase 1 runs");
    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        mae.mae_mean <= 3.0,
        "criterion 4: holdout MAE {:.3} > 3.0 years within 30 epochs",
        mae.mae_mean
    );
    let limit = budget_secs(900.0);
    assert!(
        elapsed < limit,
        "criterion 4: took {elapsed:.0}s (budget {limit:.0}s)"
    );
    println!(
        "ACCEPTANCE 4 regressor-pretraining: PASS (holdout MAE {:.3} ± {:.3} years, {:.0}s)",
        mae.mae_mean, mae.mae_std, elapsed
    );
}

#[test]
fn criterion_5_regressor_ablation_directional() {
    let fx = ABLATION.as_ref().expect("ablation fixture");
    let with_r = fx.outcome.mean_over_seeds(0, oracle_mae);
    let without_r = fx.outcome.mean_over_seeds(1, oracle_mae);
    let per_seed: Vec<String> = fx
        .outcome
        .per_seed
        .iter()
        .map(|s| {
            format!(
                "{:.2}/{:.2}",
                oracle_mae(&s[0].report),
                oracle_mae(&s[1].report)
            )
        })
        .collect();
    assert!(
        with_r < 0.6 * without_r,
        "criterion 5: MAE with R {with_r:.3} !< 0.6 * {without_r:.3} (per-seed with/without: {per_seed:?})"
    );
    // Conditioning is live after training: same z, different target ages,
    // different images.
    let trained = &fx.outcome.per_seed[0][0].state;
    let z = Array2::<f32>::from_elem((1, trained.spec.latent_dim), 0.5);
    let (y_young, _) = trained.generator.forward(&z, Some(&[0.1])).unwrap();
    let (y_old, _) = trained.generator.forward(&z, Some(&[0.9])).unwrap();
    let diff = (&y_young - &y_old).mapv(f32::abs).sum();
    assert!(
        diff > 0.0,
        "criterion 5: age conditioning inert after training"
    );
    let limit = budget_secs(10800.0);
    assert!(
        fx.elapsed_secs < limit,
        "criterion 5: ablation took {:.0}s (budget {limit:.0}s)",
        fx.elapsed_secs
    );
    println!(
        "ACCEPTANCE 5 ablation-with/without-R: PASS (oracle MAE {with_r:.3} vs {without_r:.3} years, ratio {:.2}x >= 1.67x, per-seed {per_seed:?}, {:.0}s total)",
        without_r / with_r,
        fx.elapsed_secs
    );
}

#[test]
fn criterion_6_identity_permanence_directional() {
    let fx = ABLATION.as_ref().expect("ablation fixture");
    let id_dist = |r: &EvalReport| r.identity_oracle.expect("synthetic oracle").mean;
    let with_identity = fx.outcome.mean_over_seeds(0, id_dist);
    let without_identity = fx.outcome.mean_over_seeds(2, id_dist);
    assert!(
        with_identity < without_identity,
        "criterion 6: oracle identity distance {with_identity:.4} !< {without_identity:.4}"
    );
    println!(
        "ACCEPTANCE 6 identity-permanence: PASS (oracle identity distance {with_identity:.4} with loss vs {without_identity:.4} without)"
    );
}

#[test]
fn criterion_7_range_and_shape_invariants() {
    let mut total_samples = 0usize;
    for &size in &[32usize, 64] {
        let spec = NetworkSpec {
            image_size: size,
            channels: 3,
            latent_dim: 16,
            base_filters: 8,
            rank_count: 60,
        };
        for param_seed in 0..5u64 {
            let e: Encoder<f32> = Encoder::init(&spec, param_seed);
            let g: Generator<f32> = Generator::init(&spec, param_seed + 100, true);
            let d: Discriminator<f32> = Discriminator::init(&spec, param_seed + 200);
            let mut rng = ChaCha8Rng::seed_from_u64(9000 + param_seed + size as u64);
            for _ in 0..10 {
                let b = 50;
                let x = Array4::from_shape_fn((b, 3, size, size), |_| rng.gen_range(0.0..1.0f32));
                let ell: Vec<f64> = (0..b).map(|_| rng.gen_range(0.0..1.0)).collect();
                let (z, _) = e.forward(&x).unwrap();
                assert!(
                    z.iter().all(|&v| (0.0..=1.0).contains(&v)),
                    "criterion 7: latent outside [0,1]"
                );
                let (y, _) = g.forward(&z, Some(&ell)).unwrap();
                assert_eq!(y.dim(), x.dim(), "criterion 7: G shape != input shape");
                assert!(
                    y.iter().all(|&v| (0.0..=1.0).contains(&v)),
                    "criterion 7: generated pixel outside [0,1]"
                );
                let (p, _) = d.forward(&x, &ell, BnMode::Train).unwrap();
                assert!(
                    p.iter().all(|&v| v > 0.0 && v < 1.0),
                    "criterion 7: discriminator output outside (0,1)"
                );
                total_samples += b;
            }
        }
    }
    assert!(total_samples >= 10_000);
    println!(
        "ACCEPTANCE 7 range/shape-invariants: PASS ({total_samples} randomized samples through E, G, D at 32 and 64 px)"
    );
}

#[test]
fn criterion_8_reproducibility() {
    // Fixed-seed synthetic generation is bitwise deterministic.
    let cfg = SynthConfig {
        n_identities: 20,
        images_per_identity: 5,
        seed: 777,
        ..Default::default()
    };
    let a: Dataset<f32> = gen_synthetic_dataset(&cfg).unwrap();
    let b: Dataset<f32> = gen_synthetic_dataset(&cfg).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.items.iter().zip(b.items.iter()) {
        assert_eq!(x.image, y.image, "criterion 8: synthetic render differs");
        assert_eq!(x.age.years.to_bits(), y.age.years.to_bits());
    }

    // Checkpoint save/load reproduces evaluation-mode outputs bitwise.
    let tc = TrainConfig {
        image_size: 32,
        latent_dim: 8,
        base_filters: 4,
        batch_size: 8,
        epochs: 1,
        epochs_regressor: 1,
        epochs_encoder: 1,
        seed: 88,
        ..TrainConfig::desk_preset()
    };
    let spec = tc.network_spec();
    let mut state: TrainState<f32> = TrainState::new(
        &tc,
        Encoder::init(&spec, 1),
        Encoder::init(&spec, 1),
        Regressor::init(&spec, 2),
        MetricsDigest::default(),
    );
    let (x, ages) = a.batch(&[0, 1, 2, 3]);
    agegan::training::train_step(&mut state, &x, &ages).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&state, dir.path()).unwrap();
    let loaded = load_checkpoint::<f32>(dir.path()).unwrap();
    for (name, net_a, net_b) in [
        ("e", fingerprint(&state.encoder), fingerprint(&loaded.encoder)),
        (
            "g",
            fingerprint(&state.generator),
            fingerprint(&loaded.generator),
        ),
        (
            "d",
            fingerprint(&state.discriminator),
            fingerprint(&loaded.discriminator),
        ),
        (
            "r",
            fingerprint(&state.regressor),
            fingerprint(&loaded.regressor),
        ),
    ] {
        assert_eq!(net_a, net_b, "criterion 8: {name} fingerprint changed");
    }
    let z = Array2::<f32>::from_elem((2, 8), 0.4);
    let probe_ages = [0.2, 0.9];
    let (y1, _) = state.generator.forward(&z, Some(&probe_ages)).unwrap();
    let (y2, _) = loaded.generator.forward(&z, Some(&probe_ages)).unwrap();
    assert_eq!(y1, y2, "criterion 8: generator outputs differ after reload");
    let (p1, _) = state
        .discriminator
        .forward(&x, &[0.1, 0.2, 0.3, 0.4], BnMode::Eval)
        .unwrap();
    let (p2, _) = loaded
        .discriminator
        .forward(&x, &[0.1, 0.2, 0.3, 0.4], BnMode::Eval)
        .unwrap();
    assert_eq!(p1, p2, "criterion 8: discriminator outputs differ");
    println!("ACCEPTANCE 8 reproducibility: PASS (bitwise synthetic determinism and checkpoint roundtrip)");
}

#[test]
fn criterion_9_autoencoder_degeneration() {
    let started = Instant::now();
    let (train_set, holdout) = SYNTH_5K.split_holdout(0.1, 2024);
    let mut cfg = desk_config(91);
    cfg.epochs = 20;
    cfg.weights = LossWeights {
        pixel: 1.0,
        identity: 0.0,
        gan: 0.0,
        regression: 0.0,
    };
    cfg.target_age_mode = TargetAgeMode::MatchInput;
    cfg.epochs_regressor = 1; // phases 1-2 are irrelevant to this criterion
    cfg.epochs_encoder = 1;
    let spec = cfg.network_spec();
    let mut state: TrainState<f32> = TrainState::new(
        &cfg,
        Encoder::init(&spec, agegan::mix_seed(&[cfg.seed, 0xE6])),
        Encoder::init(&spec, agegan::mix_seed(&[cfg.seed, 0xE6])),
        Regressor::init(&spec, agegan::mix_seed(&[cfg.seed, 0xA6])),
        MetricsDigest::default(),
    );
    let mut epoch_pixel = Vec::new();
    let mut sum = 0.0;
    let mut count = 0usize;
    run_phase3(
        &mut state,
        &train_set,
        |_, report| {
            sum += report.pixel;
            count += 1;
            Ok(())
        },
        |_| {
            epoch_pixel.push(sum / count as f64);
            sum = 0.0;
            count = 0;
            Ok(())
        },
    )
    .expect("degenerate training runs");

    // Reconstruction PSNR on held-out faces at the input age.
    let idxs: Vec<usize> = (0..holdout.len()).collect();
    let mut sq = 0.0f64;
    let mut n = 0usize;
    for chunk in idxs.chunks(64) {
        let (x, ages) = holdout.batch(chunk);
        let ell: Vec<f64> = ages.iter().map(|a| a / cfg.max_age).collect();
        let (z, _) = state.encoder.forward(&x).unwrap();
        let (xhat, _) = state.generator.forward(&z, Some(&ell)).unwrap();
        sq += (&xhat - &x).mapv(|d| (d as f64) * (d as f64)).sum();
        n += x.len();
    }
    let psnr = -10.0 * (sq / n as f64).log10();
    assert!(
        psnr > 20.0,
        "criterion 9: held-out reconstruction PSNR {psnr:.2} dB <= 20 dB (epoch pixel means {epoch_pixel:?})"
    );
    // Smoke property: epoch-averaged reconstruction error trends down.
    assert!(
        epoch_pixel.last().unwrap() < epoch_pixel.first().unwrap(),
        "criterion 9: epoch-mean reconstruction did not decrease: {epoch_pixel:?}"
    );
    let monotone_violations = epoch_pixel
        .windows(2)
        .filter(|w| w[1] > w[0] * 1.001)
        .count();
    assert_eq!(
        monotone_violations, 0,
        "criterion 9: epoch means not monotone: {epoch_pixel:?}"
    );
    println!(
        "ACCEPTANCE 9 autoencoder-degeneration: PASS (held-out PSNR {psnr:.2} dB after 20 epochs, {:.0}s)",
        started.elapsed().as_secs_f64()
    );
}
