//! Central finite-difference verification of every gradient the trainer
//! consumes.
//!
//! Each adversarial/reconstruction loss is checked end-to-end at f64
//! precision: analytic backward pass versus `(f(p+h) - f(p-h)) / 2h` on a
//! random subset of parameter coordinates of the networks that actually
//! receive those gradients. The finite-difference side only ever calls
//! value (forward) code, so the two routes stay independent down to the
//! shared forward pass.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::{
    gan_d_loss, gan_d_objective_grad, generator_objective_grad, generator_objective_value,
    GanGVariant, GeneratorLossNets, LossWeights,
};
use crate::networks::{Discriminator, Encoder, Generator, NetworkSpec, Regressor};
use crate::nn::{BnMode, GradStore, ParamSet};
use crate::ordinal::{rank_encode_batch, rank_loss, rank_loss_grad};
use crate::{mix_seed, Real, Result};

/// Outcome for one loss function.
#[derive(Debug, Clone)]
pub struct LossCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Full report over all losses.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<LossCheck>,
    pub step: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks
            .iter()
            .fold(0.0_f64, |m, c| m.max(c.max_rel_err))
    }

    pub fn all_below(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

/// Flat coordinate addressing into a network's parameter set.
fn param_layout<S: Real>(net: &dyn ParamSet<S>) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    net.for_each_param(&mut |name, _, vals| out.push((name.to_string(), vals.len())));
    out
}

fn add_to_slot<S: Real>(net: &mut dyn ParamSet<S>, name: &str, idx: usize, delta: S) {
    net.for_each_param_mut(&mut |n, _, vals| {
        if n == name {
            vals[idx] = vals[idx] + delta;
        }
    });
}

fn grad_at<S: Real>(gs: &GradStore<S>, name: &str, idx: usize) -> f64 {
    gs.get(name)
        .map(|g| crate::to_f64(g.as_slice().expect("standard layout")[idx]))
        .unwrap_or(0.0)
}

/// Scale-aware relative error: the difference is measured against the
/// larger of the two derivatives, floored at a small fraction of the
/// largest sampled gradient so near-zero coordinates do not amplify
/// finite-difference roundoff into spurious failures.
fn relative_errors(pairs: &[(f64, f64)]) -> f64 {
    let gmax = pairs
        .iter()
        .map(|(a, f)| a.abs().max(f.abs()))
        .fold(0.0_f64, f64::max);
    let floor = (gmax * 1e-3).max(1e-12);
    pairs
        .iter()
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(floor))
        .fold(0.0_f64, f64::max)
}

struct Fixture {
    spec: NetworkSpec,
    encoder: Encoder<f64>,
    generator: Generator<f64>,
    discriminator: Discriminator<f64>,
    encoder_pre: Encoder<f64>,
    regressor: Regressor<f64>,
    x: Array4<f64>,
    x_fake_src: Array4<f64>,
    ages_in: Vec<f64>,
    ages_out: Vec<f64>,
    max_age: f64,
}

impl Fixture {
    fn build(seed: u64) -> Self {
        let spec = NetworkSpec {
            image_size: 16,
            channels: 3,
            latent_dim: 5,
            base_filters: 4,
            rank_count: 8,
        };
        let batch = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xF0]));
        let rand_images = |rng: &mut ChaCha8Rng| {
            Array4::from_shape_fn(
                (batch, spec.channels, spec.image_size, spec.image_size),
                |_| rng.gen_range(0.05..0.95),
            )
        };
        let x = rand_images(&mut rng);
        let x_fake_src = rand_images(&mut rng);
        let ages_in = vec![12.0, 31.5, 48.0];
        let ages_out = vec![50.0, 8.0, 30.0];
        Self {
            encoder: Encoder::init(&spec, mix_seed(&[seed, 1])),
            generator: Generator::init(&spec, mix_seed(&[seed, 2]), true),
            discriminator: Discriminator::init(&spec, mix_seed(&[seed, 3])),
            encoder_pre: Encoder::init(&spec, mix_seed(&[seed, 4])),
            regressor: Regressor::init(&spec, mix_seed(&[seed, 5])),
            x,
            x_fake_src,
            ages_in,
            ages_out,
            max_age: 60.0,
            spec,
        }
    }

    fn nets(&self) -> GeneratorLossNets<'_, f64> {
        GeneratorLossNets {
            encoder: &self.encoder,
            generator: &self.generator,
            discriminator: &self.discriminator,
            encoder_pre: &self.encoder_pre,
            regressor: &self.regressor,
        }
    }

    fn ell_norm(&self, ages: &[f64]) -> Vec<f64> {
        ages.iter().map(|a| a / self.max_age).collect()
    }
}

/// Check the discriminator loss gradient w.r.t. D's parameters
/// (training-mode batch statistics, exactly as the D step uses them).
fn check_gan_d(fx: &Fixture, rng: &mut ChaCha8Rng, coords: usize, h: f64) -> LossCheck {
    let ell_in = fx.ell_norm(&fx.ages_in);
    let ell_out = fx.ell_norm(&fx.ages_out);
    let (_, gs, _, _) = gan_d_objective_grad(
        &fx.discriminator,
        (&fx.x, &ell_in),
        (&fx.x_fake_src, &ell_out),
        BnMode::Train,
    )
    .expect("forward");
    let layout = param_layout(&fx.discriminator);
    let mut pairs = Vec::with_capacity(coords);
    for _ in 0..coords {
        let (name, len) = &layout[rng.gen_range(0..layout.len())];
        let idx = rng.gen_range(0..*len);
        let analytic = grad_at(&gs, name, idx);
        let eval = |delta: f64| {
            let mut d = fx.discriminator.clone();
            add_to_slot(&mut d, name, idx, delta);
            gan_d_loss(
                &d,
                (&fx.x, &ell_in),
                (&fx.x_fake_src, &ell_out),
                BnMode::Train,
            )
            .expect("value")
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        pairs.push((analytic, fd));
    }
    LossCheck {
        name: "gan_d".into(),
        max_rel_err: relative_errors(&pairs),
        coords_checked: pairs.len(),
    }
}

/// Check one generator-side loss (selected by one-hot weights) w.r.t. the
/// encoder and generator parameters.
fn check_generator_component(
    fx: &Fixture,
    rng: &mut ChaCha8Rng,
    coords: usize,
    h: f64,
    name: &str,
    weights: LossWeights,
    variant: GanGVariant,
) -> LossCheck {
    let step = generator_objective_grad(
        &fx.nets(),
        &fx.x,
        &fx.ages_in,
        &fx.ages_out,
        fx.max_age,
        &weights,
        variant,
    )
    .expect("forward");
    let e_layout = param_layout(&fx.encoder);
    let g_layout = param_layout(&fx.generator);
    let mut pairs = Vec::with_capacity(coords);
    for i in 0..coords {
        let in_encoder = i % 2 == 0;
        let (pname, len) = if in_encoder {
            &e_layout[rng.gen_range(0..e_layout.len())]
        } else {
            &g_layout[rng.gen_range(0..g_layout.len())]
        };
        let idx = rng.gen_range(0..*len);
        let analytic = if in_encoder {
            grad_at(&step.grads_encoder, pname, idx)
        } else {
            grad_at(&step.grads_generator, pname, idx)
        };
        let eval = |delta: f64| {
            let mut e = fx.encoder.clone();
            let mut g = fx.generator.clone();
            if in_encoder {
                add_to_slot(&mut e, pname, idx, delta);
            } else {
                add_to_slot(&mut g, pname, idx, delta);
            }
            let nets = GeneratorLossNets {
                encoder: &e,
                generator: &g,
                discriminator: &fx.discriminator,
                encoder_pre: &fx.encoder_pre,
                regressor: &fx.regressor,
            };
            generator_objective_value(
                &nets,
                &fx.x,
                &fx.ages_in,
                &fx.ages_out,
                fx.max_age,
                &weights,
                variant,
            )
            .expect("value")
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        pairs.push((analytic, fd));
    }
    LossCheck {
        name: name.into(),
        max_rel_err: relative_errors(&pairs),
        coords_checked: pairs.len(),
    }
}

/// Check the ordinal rank loss w.r.t. the regressor parameters
/// (training-mode batch statistics, as in regressor pre-training).
fn check_rank_loss(fx: &Fixture, rng: &mut ChaCha8Rng, coords: usize, h: f64) -> LossCheck {
    let targets = rank_encode_batch::<f64>(
        &fx.ages_in
            .iter()
            .map(|a| a.floor().min(fx.spec.rank_count as f64))
            .collect::<Vec<_>>(),
        fx.spec.rank_count as f64,
        1.0,
    )
    .expect("targets");
    let (logits, cache) = fx.regressor.forward(&fx.x, BnMode::Train).expect("fwd");
    let (_, glogits) = rank_loss_grad(&logits, &targets).expect("loss");
    let mut gs = GradStore::new();
    fx.regressor.backward(&cache, &glogits, Some(&mut gs));
    let layout = param_layout(&fx.regressor);
    let mut pairs = Vec::with_capacity(coords);
    for _ in 0..coords {
        let (name, len) = &layout[rng.gen_range(0..layout.len())];
        let idx = rng.gen_range(0..*len);
        let analytic = grad_at(&gs, name, idx);
        let eval = |delta: f64| {
            let mut r = fx.regressor.clone();
            add_to_slot(&mut r, name, idx, delta);
            let (logits, _) = r.forward(&fx.x, BnMode::Train).expect("fwd");
            rank_loss(&logits, &targets).expect("value")
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        pairs.push((analytic, fd));
    }
    LossCheck {
        name: "rank_loss".into(),
        max_rel_err: relative_errors(&pairs),
        coords_checked: pairs.len(),
    }
}

/// Run the full gradient-check suite at f64 precision.
///
/// `coords` is the number of sampled coordinates per loss (>= 50 for the
/// acceptance gate); `step` the central-difference step (1e-4 there).
pub fn run_gradcheck(seed: u64, coords: usize, step: f64) -> Result<GradCheckReport> {
    let fx = Fixture::build(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xC0]));
    let one = |p, i, g, r| LossWeights {
        pixel: p,
        identity: i,
        gan: g,
        regression: r,
    };
    let mut checks = vec![check_gan_d(&fx, &mut rng, coords, step)];
    checks.push(check_generator_component(
        &fx,
        &mut rng,
        coords,
        step,
        "gan_g",
        one(0.0, 0.0, 1.0, 0.0),
        GanGVariant::Saturating,
    ));
    checks.push(check_generator_component(
        &fx,
        &mut rng,
        coords,
        step,
        "gan_g_nonsaturating",
        one(0.0, 0.0, 1.0, 0.0),
        GanGVariant::NonSaturating,
    ));
    checks.push(check_generator_component(
        &fx,
        &mut rng,
        coords,
        step,
        "regression",
        one(0.0, 0.0, 0.0, 1.0),
        GanGVariant::Saturating,
    ));
    checks.push(check_generator_component(
        &fx,
        &mut rng,
        coords,
        step,
        "identity",
        one(0.0, 1.0, 0.0, 0.0),
        GanGVariant::Saturating,
    ));
    checks.push(check_generator_component(
        &fx,
        &mut rng,
        coords,
        step,
        "pixel",
        one(1.0, 0.0, 0.0, 0.0),
        GanGVariant::Saturating,
    ));
    checks.push(check_generator_component(
        &fx,
        &mut rng,
        coords,
        step,
        "generator_objective",
        LossWeights::morph(),
        GanGVariant::Saturating,
    ));
    checks.push(check_rank_loss(&fx, &mut rng, coords, step));
    Ok(GradCheckReport { checks, step })
}
