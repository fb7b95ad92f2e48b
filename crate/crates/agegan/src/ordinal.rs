//! Ordinal-regression machinery: age estimation as K-1 ordered binary
//! "is age >= boundary" subtasks.
//!
//! Encoding rule: with bin width `w` and `K-1 = max_age / w` tasks, bit k
//! (0-based) is 1 iff `age >= (k+1) * w`. The hard decode counts positive
//! tasks; [`soft_age`] is the differentiable relaxation (mean of task
//! sigmoids) that lets the regression loss back-propagate into the
//! generator.

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::data::Dataset;
use crate::networks::Regressor;
use crate::nn::BnMode;
use crate::{scalar, Error, Real, Result};

/// Monotone binary rank targets for one age.
#[derive(Debug, Clone, PartialEq)]
pub struct RankTargets {
    pub bits: Vec<bool>,
    pub bin_width: f64,
}

impl RankTargets {
    /// Targets as a scalar row for loss computation.
    pub fn to_row<S: Real>(&self) -> Array1<S> {
        Array1::from_iter(
            self.bits
                .iter()
                .map(|&b| if b { S::one() } else { S::zero() }),
        )
    }
}

/// Encode an age into K-1 monotone threshold bits.
pub fn rank_encode(age: f64, max_age: f64, bin_width: f64) -> Result<RankTargets> {
    if !(bin_width > 0.0) || !(max_age > 0.0) {
        return Err(Error::InvalidInput(
            "bin_width and max_age must be positive".into(),
        ));
    }
    let k_minus_1 = max_age / bin_width;
    if (k_minus_1 - k_minus_1.round()).abs() > 1e-9 || k_minus_1 < 1.0 {
        return Err(Error::InvalidInput(format!(
            "bin_width {bin_width} does not divide max_age {max_age}"
        )));
    }
    if !(0.0..=max_age).contains(&age) {
        return Err(Error::InvalidInput(format!(
            "age {age} outside [0, {max_age}]"
        )));
    }
    let n = k_minus_1.round() as usize;
    let bits = (0..n).map(|k| age >= (k + 1) as f64 * bin_width).collect();
    Ok(RankTargets { bits, bin_width })
}

/// Hard decode: bin_width times the number of tasks with sigmoid > 0.5,
/// i.e. the number of positive logits.
pub fn rank_decode_hard<S: Real>(logits: &[S], bin_width: f64) -> f64 {
    let count = logits.iter().filter(|&&l| l > S::zero()).count();
    count as f64 * bin_width
}

/// Differentiable normalized age: mean of the task sigmoids, in `[0,1]`.
pub fn soft_age<S: Real>(logits: &Array1<S>) -> S {
    let k = scalar::<S>(logits.len() as f64);
    logits
        .iter()
        .map(|&l| S::one() / (S::one() + (-l).exp()))
        .sum::<S>()
        / k
}

/// Derivative of [`soft_age`] w.r.t. each logit.
pub fn soft_age_grad<S: Real>(logits: &Array1<S>) -> Array1<S> {
    let k = scalar::<S>(logits.len() as f64);
    logits.mapv(|l| {
        let s = S::one() / (S::one() + (-l).exp());
        s * (S::one() - s) / k
    })
}

/// Mean per-rank binary cross-entropy over a batch of logits and targets.
///
/// Computed in the numerically stable logit form; returns the loss value
/// and its gradient w.r.t. the logits: `(sigmoid(l) - y) / (B * (K-1))`.
pub fn rank_loss_grad<S: Real>(
    logits: &Array2<S>,
    targets: &Array2<S>,
) -> Result<(S, Array2<S>)> {
    if logits.dim() != targets.dim() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs targets {:?}",
            logits.dim(),
            targets.dim()
        )));
    }
    let n = scalar::<S>(logits.len() as f64);
    let mut loss = S::zero();
    let mut grad = Array2::<S>::zeros(logits.raw_dim());
    for ((idx, &l), &y) in logits.indexed_iter().zip(targets.iter()) {
        // BCE(l, y) = max(l,0) - l*y + ln(1 + e^{-|l|})
        let pos = if l > S::zero() { l } else { S::zero() };
        loss += pos - l * y + (S::one() + (-l.abs()).exp()).ln();
        let s = S::one() / (S::one() + (-l).exp());
        grad[idx] = (s - y) / n;
    }
    Ok((loss / n, grad))
}

/// Loss value only.
pub fn rank_loss<S: Real>(logits: &Array2<S>, targets: &Array2<S>) -> Result<S> {
    rank_loss_grad(logits, targets).map(|(v, _)| v)
}

/// Stack encoded targets for a batch of ages.
pub fn rank_encode_batch<S: Real>(
    ages: &[f64],
    max_age: f64,
    bin_width: f64,
) -> Result<Array2<S>> {
    let n = (max_age / bin_width).round() as usize;
    let mut out = Array2::<S>::zeros((ages.len(), n));
    for (i, &age) in ages.iter().enumerate() {
        let t = rank_encode(age, max_age, bin_width)?;
        out.row_mut(i).assign(&t.to_row());
    }
    Ok(out)
}

/// MAE report emitted as JSON.
#[derive(Debug, Clone, Serialize)]
pub struct MaeReport {
    pub dataset: String,
    pub n: usize,
    pub mae_mean: f64,
    pub mae_std: f64,
    /// Mean absolute error per decade of true age, keyed "0-9", "10-19", ...
    pub per_decade_mae: Vec<(String, f64)>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Evaluate the regressor's hard-decoded MAE (in years) over a dataset,
/// using eval-mode batch norm.
pub fn evaluate_mae<S: Real>(
    regressor: &Regressor<S>,
    dataset: &Dataset<S>,
    bin_width: f64,
    label: &str,
) -> Result<MaeReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("MAE evaluation".into()));
    }
    let batch = 64usize;
    let mut errors = Vec::with_capacity(dataset.len());
    let mut decade_sums: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    let idxs: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idxs.chunks(batch) {
        let (x, ages) = dataset.batch(chunk);
        let (logits, _) = regressor.forward(&x, BnMode::Eval)?;
        for (row, &age) in ages.iter().enumerate() {
            let l: Vec<S> = logits.row(row).to_vec();
            let pred = rank_decode_hard(&l, bin_width);
            let err = (pred - age).abs();
            errors.push(err);
            let decade = (age / 10.0).floor() as usize;
            let e = decade_sums.entry(decade).or_insert((0.0, 0));
            e.0 += err;
            e.1 += 1;
        }
    }
    let (mae_mean, mae_std) = mean_std(&errors);
    let per_decade_mae = decade_sums
        .into_iter()
        .map(|(d, (sum, count))| (format!("{}-{}", d * 10, d * 10 + 9), sum / count as f64))
        .collect();
    Ok(MaeReport {
        dataset: label.to_string(),
        n: errors.len(),
        mae_mean,
        mae_std,
        per_decade_mae,
    })
}

/// Brute-force decoder used only as a test oracle: try every monotone
/// hypothesis (h leading ones) and return the one agreeing with the most
/// observed threshold bits.
#[cfg(test)]
fn decode_by_enumeration(bits: &[bool], bin_width: f64) -> f64 {
    let m = bits.len();
    let mut best_h = 0usize;
    let mut best_agree = -1i64;
    for h in 0..=m {
        let agree = (0..m).filter(|&k| (k < h) == bits[k]).count() as i64;
        if agree > best_agree {
            best_agree = agree;
            best_h = h;
        }
    }
    best_h as f64 * bin_width
}
