//! Reference calibration and model-selection methods.

use crate::error::{Error, Result};
use crate::types::{softmax, Dataset, GaeConfig};

/// Search range of the fitted temperatures.
pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 20.0);
/// Width of the final golden-section bracket.
pub const TEMPERATURE_TOL: f64 = 1e-4;

/// Minimizes a unimodal function on `[lo, hi]` by golden-section search.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > tol {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

fn labels(source: &Dataset) -> Result<Vec<usize>> {
    let missing = source.unlabeled_count();
    if missing > 0 {
        return Err(Error::MissingLabels(missing));
    }
    Ok(source.records().iter().map(|r| r.label.unwrap_or(0)).collect())
}

fn check_weights(source: &Dataset, weights: Option<&[f64]>) -> Result<()> {
    match weights {
        Some(w) if w.len() != source.len() => Err(Error::LengthMismatch(w.len(), source.len())),
        _ => Ok(()),
    }
}

fn weighted_mean(values: impl Iterator<Item = f64>, weights: Option<&[f64]>) -> f64 {
    let (num, den) = values.enumerate().fold((0.0, 0.0), |(n, d), (i, v)| {
        let w = weights.map_or(1.0, |w| w[i]);
        (n + w * v, d + w)
    });
    num / den
}

fn nll(logits: &[f64], label: usize, t: f64) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| ((l - max) / t).exp()).sum::<f64>().ln();
    lse - (logits[label] - max) / t
}

fn brier(logits: &[f64], label: usize, t: f64) -> f64 {
    softmax(logits, t)
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let y = if k == label { 1.0 } else { 0.0 };
            (p - y) * (p - y)
        })
        .sum()
}

fn fit_temperature(
    source: &Dataset,
    weights: Option<&[f64]>,
    loss: fn(&[f64], usize, f64) -> f64,
) -> Result<f64> {
    let y = labels(source)?;
    check_weights(source, weights)?;
    let objective = |t: f64| {
        weighted_mean(
            source.records().iter().zip(&y).map(|(r, y)| loss(&r.logits, *y, t)),
            weights,
        )
    };
    let (lo, hi) = TEMPERATURE_RANGE;
    Ok(golden_section(objective, lo, hi, TEMPERATURE_TOL))
}

/// Temperature minimizing the (optionally weighted) mean negative
/// log-likelihood on labeled source data.
pub fn fit_temperature_nll(source: &Dataset, weights: Option<&[f64]>) -> Result<f64> {
    fit_temperature(source, weights, nll)
}

/// Temperature minimizing the (optionally weighted) multiclass Brier score
/// against one-hot labels.
pub fn fit_temperature_brier(source: &Dataset, weights: Option<&[f64]>) -> Result<f64> {
    fit_temperature(source, weights, brier)
}

pub fn vanilla(target: &Dataset) -> Vec<f64> {
    target.confidences(1.0)
}

/// Temperature scaling. Returns the fitted temperature and the target
/// confidences.
pub fn ts(source: &Dataset, target: &Dataset) -> Result<(f64, Vec<f64>)> {
    let t = fit_temperature_nll(source, None)?;
    Ok((t, target.confidences(t)))
}

/// Importance-weighted temperature scaling.
pub fn iwts(source: &Dataset, target: &Dataset, weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    let t = fit_temperature_nll(source, Some(weights))?;
    Ok((t, target.confidences(t)))
}

/// Temperature fitted on the importance-weighted Brier score.
pub fn cpcs(source: &Dataset, target: &Dataset, weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    let t = fit_temperature_brier(source, Some(weights))?;
    Ok((t, target.confidences(t)))
}

/// Importance-weighted cross-validation score `1 - mean(w * 1[wrong])` on
/// labeled source data, weights clipped to the configured range.
pub fn iwcv(source: &Dataset, weights: &[f64], cfg: &GaeConfig) -> Result<f64> {
    let correct = source.correctness()?;
    if weights.len() != correct.len() {
        return Err(Error::LengthMismatch(weights.len(), correct.len()));
    }
    let loss: f64 = correct
        .iter()
        .zip(weights)
        .filter(|(ok, _)| !**ok)
        .map(|(_, w)| cfg.clip_weight(*w))
        .sum();
    Ok(1.0 - loss / correct.len() as f64)
}
