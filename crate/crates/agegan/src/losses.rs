//! The adversarial, pixel, identity, and regression losses, plus the
//! weighted objectives that drive the discriminator and generator steps.
//!
//! Each loss comes in two flavors: a scalar "core" on already-computed
//! network outputs (unit-testable against hand values) and a composed
//! form that chains through the networks and returns the gradients the
//! optimizer consumes. Frozen networks (the pre-trained encoder and the
//! regressor during generator updates, the discriminator inside the
//! adversarial generator term) contribute input gradients only — their
//! parameter gradients are never materialized.

use ndarray::{Array1, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::networks::{Discriminator, DiscriminatorCache, Encoder, Generator, Regressor};
use crate::nn::{BnMode, GradStore};
use crate::ordinal::{soft_age, soft_age_grad};
use crate::{scalar, to_f64, Error, Real, Result};

/// Age gap clamp: gaps below one year divide the pixel loss as if the gap
/// were one year, keeping reconstruction at the input age well-defined.
pub const MIN_AGE_GAP_YEARS: f64 = 1.0;

/// Coefficients of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pixel: f64,
    pub identity: f64,
    pub gan: f64,
    pub regression: f64,
}

impl LossWeights {
    /// Preset used for the MORPH experiments.
    pub fn morph() -> Self {
        Self {
            pixel: 0.10,
            identity: 1.00,
            gan: 1.00,
            regression: 0.02,
        }
    }

    /// Preset used for the UTKFace experiments.
    pub fn utkface() -> Self {
        Self {
            pixel: 0.50,
            identity: 1.00,
            gan: 1.00,
            regression: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.pixel, self.identity, self.gan, self.regression];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(
                "loss weights must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::morph()
    }
}

/// Which form of the adversarial generator loss to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GanGVariant {
    /// `mean log(1 - D(x̂, l))` — goes inert when D dominates.
    Saturating,
    /// `mean -log D(x̂, l)` — keeps gradients alive early in training.
    NonSaturating,
}

/// Per-iteration loss components; `total_g` is always the exact weighted
/// recombination of the four generator terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub pixel: f64,
    pub identity: f64,
    pub gan_g: f64,
    pub regression: f64,
    pub total_g: f64,
    pub gan_d: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.pixel,
            self.identity,
            self.gan_g,
            self.regression,
            self.total_g,
            self.gan_d,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Name of the first non-finite component, for divergence diagnostics.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("pixel", self.pixel),
            ("identity", self.identity),
            ("gan_g", self.gan_g),
            ("regression", self.regression),
            ("total_g", self.total_g),
            ("gan_d", self.gan_d),
        ]
        .iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| *n)
    }
}

/// Weighted sum of the four generator components (values in f64).
pub fn combine_generator_losses(
    weights: &LossWeights,
    pixel: f64,
    identity: f64,
    gan_g: f64,
    regression: f64,
    gan_d: f64,
) -> (f64, LossReport) {
    let total_g = weights.pixel * pixel
        + weights.identity * identity
        + weights.gan * gan_g
        + weights.regression * regression;
    (
        total_g,
        LossReport {
            pixel,
            identity,
            gan_g,
            regression,
            total_g,
            gan_d,
        },
    )
}

fn effective_gap(age_in: f64, age_out: f64) -> f64 {
    (age_in - age_out).abs().max(MIN_AGE_GAP_YEARS)
}

/// Age-distance-weighted squared pixel loss.
///
/// Per item: `||x̂_b - x_b||^2 / (Δl_b * W * H * C)` with the per-item age
/// gap in years clamped below by [`MIN_AGE_GAP_YEARS`]; mean over the
/// batch. Returns the value and the gradient w.r.t. `x̂`.
pub fn pixel_loss_grad<S: Real>(
    x: &Array4<S>,
    xhat: &Array4<S>,
    ages_in: &[f64],
    ages_out: &[f64],
) -> Result<(S, Array4<S>)> {
    if x.dim() != xhat.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            x.dim(),
            xhat.dim()
        )));
    }
    let (b, c, h, w) = x.dim();
    if ages_in.len() != b || ages_out.len() != b {
        return Err(Error::ShapeMismatch("ages do not match batch".into()));
    }
    let whc = (w * h * c) as f64;
    let bn = scalar::<S>(b as f64);
    let mut value = S::zero();
    let mut grad = Array4::<S>::zeros(x.raw_dim());
    for bi in 0..b {
        let denom = scalar::<S>(effective_gap(ages_in[bi], ages_out[bi]) * whc);
        let xb = x.index_axis(Axis(0), bi);
        let hb = xhat.index_axis(Axis(0), bi);
        let diff = &hb - &xb;
        value += diff.mapv(|d| d * d).sum() / denom;
        let two = scalar::<S>(2.0);
        grad.index_axis_mut(Axis(0), bi)
            .assign(&diff.mapv(|d| two * d / (denom * bn)));
    }
    Ok((value / bn, grad))
}

pub fn pixel_loss<S: Real>(
    x: &Array4<S>,
    xhat: &Array4<S>,
    ages_in: &[f64],
    ages_out: &[f64],
) -> Result<S> {
    pixel_loss_grad(x, xhat, ages_in, ages_out).map(|(v, _)| v)
}

/// Identity core: mean over the batch of the squared L2 distance between
/// latent rows. Returns the value and the gradient w.r.t. `za`.
pub fn identity_sqdist<S: Real>(za: &Array2<S>, zb: &Array2<S>) -> (S, Array2<S>) {
    debug_assert_eq!(za.dim(), zb.dim());
    let b = scalar::<S>(za.dim().0 as f64);
    let diff = za - zb;
    let value = diff.mapv(|d| d * d).sum() / b;
    let two = scalar::<S>(2.0);
    let grad = diff.mapv(|d| two * d / b);
    (value, grad)
}

/// Identity loss through the frozen pre-trained encoder:
/// `mean_b ||E_pre(x̂) - E_pre(x)||^2`.
pub fn identity_loss<S: Real>(
    e_pre: &Encoder<S>,
    x: &Array4<S>,
    xhat: &Array4<S>,
) -> Result<S> {
    let (z_in, _) = e_pre.forward(x)?;
    let (z_hat, _) = e_pre.forward(xhat)?;
    Ok(identity_sqdist(&z_hat, &z_in).0)
}

/// Identity loss with the gradient w.r.t. `x̂` (through E_pre, whose own
/// parameters receive nothing).
pub fn identity_loss_grad<S: Real>(
    e_pre: &Encoder<S>,
    x: &Array4<S>,
    xhat: &Array4<S>,
) -> Result<(S, Array4<S>)> {
    let (z_in, _) = e_pre.forward(x)?;
    let (z_hat, cache) = e_pre.forward(xhat)?;
    let (value, gz) = identity_sqdist(&z_hat, &z_in);
    let gx = e_pre.backward(&cache, &gz, None);
    Ok((value, gx))
}

/// Discriminator core: `mean[-log p_real] + mean[-log(1 - p_fake)]`, with
/// gradients w.r.t. both probability vectors.
pub fn gan_d_core<S: Real>(
    p_real: &Array1<S>,
    p_fake: &Array1<S>,
) -> (S, Array1<S>, Array1<S>) {
    let br = scalar::<S>(p_real.len() as f64);
    let bf = scalar::<S>(p_fake.len() as f64);
    let one = S::one();
    let value = p_real.mapv(|p| -(p.ln())).sum() / br
        + p_fake.mapv(|p| -((one - p).ln())).sum() / bf;
    let g_real = p_real.mapv(|p| -(one / p) / br);
    let g_fake = p_fake.mapv(|p| (one / (one - p)) / bf);
    (value, g_real, g_fake)
}

/// Generator adversarial core with gradient w.r.t. `p_fake`.
pub fn gan_g_core<S: Real>(p_fake: &Array1<S>, variant: GanGVariant) -> (S, Array1<S>) {
    let b = scalar::<S>(p_fake.len() as f64);
    let one = S::one();
    match variant {
        GanGVariant::Saturating => {
            let value = p_fake.mapv(|p| (one - p).ln()).sum() / b;
            let grad = p_fake.mapv(|p| -(one / (one - p)) / b);
            (value, grad)
        }
        GanGVariant::NonSaturating => {
            let value = p_fake.mapv(|p| -(p.ln())).sum() / b;
            let grad = p_fake.mapv(|p| -(one / p) / b);
            (value, grad)
        }
    }
}

/// Regression core: mean squared error between differentiable soft ages
/// and normalized targets, with gradient w.r.t. the soft ages.
pub fn regression_core<S: Real>(soft: &Array1<S>, targets_norm: &[f64]) -> (S, Array1<S>) {
    debug_assert_eq!(soft.len(), targets_norm.len());
    let b = scalar::<S>(soft.len() as f64);
    let mut value = S::zero();
    let mut grad = Array1::<S>::zeros(soft.len());
    for i in 0..soft.len() {
        let d = soft[i] - scalar(targets_norm[i]);
        value += d * d;
        grad[i] = scalar::<S>(2.0) * d / b;
    }
    (value / b, grad)
}

/// Full discriminator objective: forward D on real and fake batches in
/// the given BN mode, accumulate D's parameter gradients. Fake images are
/// treated as constants. The caches are returned so the caller can commit
/// the batch-norm statistics after a training step.
pub fn gan_d_objective_grad<S: Real>(
    d: &Discriminator<S>,
    real: (&Array4<S>, &[f64]),
    fake: (&Array4<S>, &[f64]),
    mode: BnMode,
) -> Result<(S, GradStore<S>, DiscriminatorCache<S>, DiscriminatorCache<S>)> {
    let (p_real, cache_real) = d.forward(real.0, real.1, mode)?;
    let (p_fake, cache_fake) = d.forward(fake.0, fake.1, mode)?;
    let (value, g_real, g_fake) = gan_d_core(&p_real, &p_fake);
    let mut gs = GradStore::new();
    d.backward(&cache_real, &g_real, Some(&mut gs));
    d.backward(&cache_fake, &g_fake, Some(&mut gs));
    Ok((value, gs, cache_real, cache_fake))
}

/// Discriminator loss value only (Eq. alias of the D objective).
pub fn gan_d_loss<S: Real>(
    d: &Discriminator<S>,
    real: (&Array4<S>, &[f64]),
    fake: (&Array4<S>, &[f64]),
    mode: BnMode,
) -> Result<S> {
    let (p_real, _) = d.forward(real.0, real.1, mode)?;
    let (p_fake, _) = d.forward(fake.0, fake.1, mode)?;
    Ok(gan_d_core(&p_real, &p_fake).0)
}

/// Adversarial generator loss value through a frozen (eval-mode) D.
pub fn gan_g_loss<S: Real>(
    d: &Discriminator<S>,
    fake: (&Array4<S>, &[f64]),
    variant: GanGVariant,
) -> Result<S> {
    let (p_fake, _) = d.forward(fake.0, fake.1, BnMode::Eval)?;
    Ok(gan_g_core(&p_fake, variant).0)
}

/// Regression loss value through a frozen (eval-mode) R.
pub fn regression_loss<S: Real>(
    r: &Regressor<S>,
    xhat: &Array4<S>,
    targets_norm: &[f64],
) -> Result<S> {
    let (logits, _) = r.forward(xhat, BnMode::Eval)?;
    let soft = Array1::from_iter((0..logits.dim().0).map(|b| soft_age(&logits.row(b).to_owned())));
    Ok(regression_core(&soft, targets_norm).0)
}

/// The networks entering the generator objective. `discriminator` and
/// `regressor` and `encoder_pre` are frozen here: they shape the loss but
/// receive no parameter gradients.
pub struct GeneratorLossNets<'a, S: Real> {
    pub encoder: &'a Encoder<S>,
    pub generator: &'a Generator<S>,
    pub discriminator: &'a Discriminator<S>,
    pub encoder_pre: &'a Encoder<S>,
    pub regressor: &'a Regressor<S>,
}

/// Outputs of one full generator-objective pass.
pub struct GeneratorStep<S: Real> {
    pub report: LossReport,
    pub total: S,
    pub grads_encoder: GradStore<S>,
    pub grads_generator: GradStore<S>,
    pub generated: Array4<S>,
}

/// Compute Eq.-(7)-style generator objective and its gradients w.r.t. the
/// encoder and generator parameters.
///
/// `ages_in` are the batch's true ages (years); `ages_out` the sampled
/// target ages (years). The pixel target is the input image itself; the
/// regression target is the normalized output age.
pub fn generator_objective_grad<S: Real>(
    nets: &GeneratorLossNets<'_, S>,
    x: &Array4<S>,
    ages_in: &[f64],
    ages_out: &[f64],
    max_age: f64,
    weights: &LossWeights,
    variant: GanGVariant,
) -> Result<GeneratorStep<S>> {
    weights.validate()?;
    let ell_out: Vec<f64> = ages_out.iter().map(|a| a / max_age).collect();

    let (z, e_cache) = nets.encoder.forward(x)?;
    let (xhat, g_cache) = nets.generator.forward(&z, Some(&ell_out))?;

    // Pixel term.
    let (v_pixel, gx_pixel) = pixel_loss_grad(x, &xhat, ages_in, ages_out)?;

    // Identity term through the frozen pre-trained encoder.
    let (z_in, _) = nets.encoder_pre.forward(x)?;
    let (z_hat, ep_cache) = nets.encoder_pre.forward(&xhat)?;
    let (v_identity, gz_hat) = identity_sqdist(&z_hat, &z_in);
    let gx_identity = nets.encoder_pre.backward(&ep_cache, &gz_hat, None);

    // Adversarial term through the frozen discriminator.
    let (p_fake, d_cache) = nets.discriminator.forward(&xhat, &ell_out, BnMode::Eval)?;
    let (v_gan, gp) = gan_g_core(&p_fake, variant);
    let gx_gan = nets.discriminator.backward(&d_cache, &gp, None);

    // Regression term through the frozen regressor.
    let (logits, r_cache) = nets.regressor.forward(&xhat, BnMode::Eval)?;
    let b = logits.dim().0;
    let soft = Array1::from_iter((0..b).map(|bi| soft_age(&logits.row(bi).to_owned())));
    let (v_reg, gsoft) = regression_core(&soft, &ell_out);
    let mut glogits = Array2::<S>::zeros(logits.raw_dim());
    for bi in 0..b {
        let row = logits.row(bi).to_owned();
        let d_soft = soft_age_grad(&row);
        glogits.row_mut(bi).assign(&d_soft.mapv(|v| v * gsoft[bi]));
    }
    let gx_reg = nets.regressor.backward(&r_cache, &glogits, None);

    // Weighted image-space gradient, then back through G and E.
    let (wp, wi, wg, wr) = (
        scalar::<S>(weights.pixel),
        scalar::<S>(weights.identity),
        scalar::<S>(weights.gan),
        scalar::<S>(weights.regression),
    );
    let mut gxhat = gx_pixel.mapv(|v| v * wp);
    gxhat.zip_mut_with(&gx_identity, |a, &b| *a += wi * b);
    gxhat.zip_mut_with(&gx_gan, |a, &b| *a += wg * b);
    gxhat.zip_mut_with(&gx_reg, |a, &b| *a += wr * b);

    let mut grads_generator = GradStore::new();
    let gz = nets
        .generator
        .backward(&g_cache, &gxhat, Some(&mut grads_generator));
    let mut grads_encoder = GradStore::new();
    nets.encoder.backward(&e_cache, &gz, Some(&mut grads_encoder));

    let (total_f64, report) = combine_generator_losses(
        weights,
        to_f64(v_pixel),
        to_f64(v_identity),
        to_f64(v_gan),
        to_f64(v_reg),
        f64::NAN, // D term is not part of this pass; caller fills it.
    );
    let total = wp * v_pixel + wi * v_identity + wg * v_gan + wr * v_reg;
    let report = LossReport {
        gan_d: 0.0,
        total_g: total_f64,
        ..report
    };
    Ok(GeneratorStep {
        report,
        total,
        grads_encoder,
        grads_generator,
        generated: xhat,
    })
}

/// Value-only evaluation of the generator objective (finite-difference
/// probes rebuild networks and call this).
pub fn generator_objective_value<S: Real>(
    nets: &GeneratorLossNets<'_, S>,
    x: &Array4<S>,
    ages_in: &[f64],
    ages_out: &[f64],
    max_age: f64,
    weights: &LossWeights,
    variant: GanGVariant,
) -> Result<S> {
    let ell_out: Vec<f64> = ages_out.iter().map(|a| a / max_age).collect();
    let (z, _) = nets.encoder.forward(x)?;
    let (xhat, _) = nets.generator.forward(&z, Some(&ell_out))?;
    let v_pixel = pixel_loss(x, &xhat, ages_in, ages_out)?;
    let v_identity = identity_loss(nets.encoder_pre, x, &xhat)?;
    let v_gan = gan_g_loss(nets.discriminator, (&xhat, &ell_out), variant)?;
    let v_reg = regression_loss(nets.regressor, &xhat, &ell_out)?;
    Ok(scalar::<S>(weights.pixel) * v_pixel
        + scalar::<S>(weights.identity) * v_identity
        + scalar::<S>(weights.gan) * v_gan
        + scalar::<S>(weights.regression) * v_reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::NetworkSpec;
    use crate::nn::fingerprint;
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pixel_loss_hand_values() {
        // 2x2x1 images, every pixel differing by 0.5, gap 5 years.
        let x = Array4::<f64>::zeros((1, 1, 2, 2));
        let xhat = Array4::<f64>::from_elem((1, 1, 2, 2), 0.5);
        let v = pixel_loss(&x, &xhat, &[10.0], &[15.0]).unwrap();
        assert!((v - 0.05).abs() < 1e-12);
        // doubling the gap halves the loss
        let v2 = pixel_loss(&x, &xhat, &[10.0], &[20.0]).unwrap();
        assert!((v2 - 0.025).abs() < 1e-12);
        // identical tensors -> 0
        let v3 = pixel_loss(&x, &x, &[10.0], &[15.0]).unwrap();
        assert_eq!(v3, 0.0);
        // gap clamp: 0 and 0.3 years behave like 1 year
        let v4 = pixel_loss(&x, &xhat, &[10.0], &[10.0]).unwrap();
        let v5 = pixel_loss(&x, &xhat, &[10.0], &[10.3]).unwrap();
        assert!((v4 - 0.25).abs() < 1e-12);
        assert!((v4 - v5).abs() < 1e-12);
        // shape mismatch
        assert!(pixel_loss(&x, &Array4::<f64>::zeros((1, 1, 4, 4)), &[1.0], &[2.0]).is_err());
    }

    proptest! {
        #[test]
        fn pixel_scaling_law(seed in 0u64..1000, gap_idx in 0usize..3) {
            // loss(c * gap) == loss(gap) / c exactly, above the clamp.
            let gaps = [2.0f64, 4.0, 8.0, 16.0];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Array4<f64> = Array4::from_shape_fn((2, 3, 4, 4), |_| rng.gen_range(0.0..1.0));
            let xhat: Array4<f64> = Array4::from_shape_fn((2, 3, 4, 4), |_| rng.gen_range(0.0..1.0));
            let g1 = gaps[gap_idx];
            let g2 = gaps[gap_idx + 1]; // c = 2
            let v1 = pixel_loss(&x, &xhat, &[20.0, 20.0], &[20.0 + g1, 20.0 - g1]).unwrap();
            let v2 = pixel_loss(&x, &xhat, &[20.0, 20.0], &[20.0 + g2, 20.0 - g2]).unwrap();
            let rel = (v2 - v1 / 2.0).abs() / v1.max(1e-300);
            prop_assert!(rel < 1e-9, "rel {rel}");
        }

        #[test]
        fn losses_are_permutation_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..0.95)).collect();
            let fwd = Array1::from_vec(p.clone());
            let mut rev = p.clone();
            rev.reverse();
            let rev = Array1::from_vec(rev);
            let (a, _) = gan_g_core(&fwd, GanGVariant::Saturating);
            let (b, _) = gan_g_core(&rev, GanGVariant::Saturating);
            prop_assert!((a - b).abs() < 1e-12);
            let t = [0.1, 0.4, 0.6, 0.9];
            let mut t_rev = t;
            t_rev.reverse();
            let (ra, _) = regression_core(&fwd, &t);
            let (rb, _) = regression_core(&rev, &t_rev);
            prop_assert!((ra - rb).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_core_hand_values() {
        let za = Array2::from_shape_vec((1, 2), vec![0.0f64, 1.0]).unwrap();
        let zb = Array2::from_shape_vec((1, 2), vec![1.0f64, 0.0]).unwrap();
        let (v, g) = identity_sqdist(&za, &zb);
        assert_eq!(v, 2.0);
        assert_eq!(g[(0, 0)], -2.0);
        assert_eq!(g[(0, 1)], 2.0);
        // symmetry of the value
        let (v2, _) = identity_sqdist(&zb, &za);
        assert_eq!(v, v2);
        let (v3, _) = identity_sqdist(&za, &za);
        assert_eq!(v3, 0.0);
    }

    #[test]
    fn gan_d_core_hand_values() {
        let half = Array1::from_elem(4, 0.5f64);
        let (v, _, _) = gan_d_core(&half, &half);
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let real = Array1::from_elem(3, 0.9f64);
        let fake = Array1::from_elem(3, 0.1f64);
        let (v, _, _) = gan_d_core(&real, &fake);
        assert!((v - (-(0.9f64.ln()) - (0.9f64.ln()))).abs() < 1e-12);

        // optimum bounded by the clamp
        let eps = crate::networks::PROB_EPS;
        let good_real = Array1::from_elem(3, 1.0 - eps);
        let good_fake = Array1::from_elem(3, eps);
        let (v, _, _) = gan_d_core(&good_real, &good_fake);
        assert!(v > 0.0 && v < 1e-5);
    }

    #[test]
    fn gan_g_core_hand_values() {
        let half = Array1::from_elem(5, 0.5f64);
        let (sat, _) = gan_g_core(&half, GanGVariant::Saturating);
        assert!((sat - 0.5f64.ln()).abs() < 1e-12);
        let (nonsat, _) = gan_g_core(&half, GanGVariant::NonSaturating);
        assert!((nonsat - std::f64::consts::LN_2).abs() < 1e-12);
        let confident = Array1::from_elem(5, 0.9f64);
        let (sat9, _) = gan_g_core(&confident, GanGVariant::Saturating);
        assert!((sat9 - 0.1f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn regression_core_hand_values() {
        let soft = Array1::from_vec(vec![0.6f64]);
        let (v, g) = regression_core(&soft, &[0.4]);
        assert!((v - 0.04).abs() < 1e-12);
        assert!((g[0] - 0.4).abs() < 1e-12);
        let (v0, _) = regression_core(&soft, &[0.6]);
        assert!(v0.abs() < 1e-12);
    }

    #[test]
    fn combine_examples() {
        let zero = LossWeights {
            pixel: 0.0,
            identity: 0.0,
            gan: 0.0,
            regression: 0.0,
        };
        let (total, _) = combine_generator_losses(&zero, 3.0, 4.0, 5.0, 6.0, 0.0);
        assert_eq!(total, 0.0);

        // MORPH preset with unit components: 0.10 + 1 + 1 + 0.02 = 2.12
        let (total, report) = combine_generator_losses(&LossWeights::morph(), 1.0, 1.0, 1.0, 1.0, 0.5);
        assert!((total - 2.12).abs() < 1e-12);
        assert_eq!(report.total_g, total);
        assert_eq!(report.gan_d, 0.5);

        // doubling the pixel weight doubles exactly the pixel contribution
        let mut w2 = LossWeights::morph();
        w2.pixel *= 2.0;
        let (t2, _) = combine_generator_losses(&w2, 1.0, 1.0, 1.0, 1.0, 0.0);
        assert!((t2 - total - 0.10).abs() < 1e-12);

        assert!(LossWeights {
            pixel: -0.1,
            ..LossWeights::morph()
        }
        .validate()
        .is_err());
    }

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            image_size: 16,
            channels: 3,
            latent_dim: 4,
            base_filters: 2,
            rank_count: 6,
        }
    }

    fn rand_batch(spec: &NetworkSpec, b: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((b, spec.channels, spec.image_size, spec.image_size), |_| {
            rng.gen_range(0.05..0.95)
        })
    }

    #[test]
    fn discriminator_objective_matches_loss_alias_and_touches_only_d() {
        let spec = tiny_spec();
        let d: Discriminator<f64> = Discriminator::init(&spec, 5);
        let real = rand_batch(&spec, 3, 1);
        let fake = rand_batch(&spec, 3, 2);
        let ell = [0.2, 0.5, 0.8];
        let (v1, gs, _, _) =
            gan_d_objective_grad(&d, (&real, &ell), (&fake, &ell), BnMode::Train).unwrap();
        let v2 = gan_d_loss(&d, (&real, &ell), (&fake, &ell), BnMode::Train).unwrap();
        assert_eq!(v1, v2);
        assert!(v1 > 0.0);
        // gradient names all belong to D's parameter set
        let mut d_names = std::collections::HashSet::new();
        use crate::nn::ParamSet;
        d.for_each_param(&mut |n, _, _| {
            d_names.insert(n.to_string());
        });
        for (name, _) in gs.iter() {
            assert!(d_names.contains(name), "unexpected grad {name}");
        }
    }

    #[test]
    fn generator_objective_leaves_frozen_nets_untouched() {
        let spec = tiny_spec();
        let e: Encoder<f64> = Encoder::init(&spec, 1);
        let g: Generator<f64> = Generator::init(&spec, 2, true);
        let d: Discriminator<f64> = Discriminator::init(&spec, 3);
        let e_pre: Encoder<f64> = Encoder::init(&spec, 4);
        let r: Regressor<f64> = Regressor::init(&spec, 5);
        let fp_d = fingerprint(&d);
        let fp_pre = fingerprint(&e_pre);
        let fp_r = fingerprint(&r);

        let x = rand_batch(&spec, 2, 9);
        let nets = GeneratorLossNets {
            encoder: &e,
            generator: &g,
            discriminator: &d,
            encoder_pre: &e_pre,
            regressor: &r,
        };
        let step = generator_objective_grad(
            &nets,
            &x,
            &[10.0, 40.0],
            &[55.0, 5.0],
            60.0,
            &LossWeights::morph(),
            GanGVariant::Saturating,
        )
        .unwrap();
        assert!(step.report.is_finite() || step.report.gan_d == 0.0);
        assert!(!step.grads_encoder.is_empty());
        assert!(!step.grads_generator.is_empty());
        assert_eq!(fingerprint(&d), fp_d);
        assert_eq!(fingerprint(&e_pre), fp_pre);
        assert_eq!(fingerprint(&r), fp_r);
        // report invariant: total recombines exactly
        let w = LossWeights::morph();
        let recomputed = w.pixel * step.report.pixel
            + w.identity * step.report.identity
            + w.gan * step.report.gan_g
            + w.regression * step.report.regression;
        assert_eq!(recomputed, step.report.total_g);
        // generated images respect the contract
        assert!(step
            .generated
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
        // value-only path agrees with the grad path
        let value = generator_objective_value(
            &nets,
            &x,
            &[10.0, 40.0],
            &[55.0, 5.0],
            60.0,
            &LossWeights::morph(),
            GanGVariant::Saturating,
        )
        .unwrap();
        assert!((value - step.total).abs() < 1e-12);
    }

    #[test]
    fn loss_report_divergence_detection() {
        let mut r = LossReport {
            pixel: 1.0,
            identity: 1.0,
            gan_g: -0.5,
            regression: 0.1,
            total_g: 1.0,
            gan_d: 1.0,
        };
        assert!(r.is_finite());
        assert_eq!(r.first_non_finite(), None);
        r.identity = f64::NAN;
        assert_eq!(r.first_non_finite(), Some("identity"));
    }
}
