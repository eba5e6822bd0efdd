//! Confidence-based accuracy groups.
//!
//! Group indices are 0-based: a sample whose (temperature-scaled) maximum
//! softmax value is `c` goes to group `min(floor(c * M), M - 1)`, i.e. the
//! half-open interval `[n/M, (n+1)/M)` with the top group closed at 1.

use crate::types::Dataset;

pub fn group_of(confidence: f64, groups: usize) -> usize {
    let g = (confidence * groups as f64).floor();
    if g.is_nan() || g < 0.0 {
        0
    } else {
        (g as usize).min(groups - 1)
    }
}

pub fn assign_groups(data: &Dataset, groups: usize, temperature: f64) -> Vec<usize> {
    assert!(groups >= 1 && temperature > 0.0);
    data.records()
        .iter()
        .map(|r| group_of(r.confidence(temperature), groups))
        .collect()
}

/// Group assignment of both domains. Source samples always use `t = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSpec {
    pub groups: usize,
    pub temperature: f64,
    pub source_groups: Vec<usize>,
    pub target_groups: Vec<usize>,
}

impl GroupSpec {
    pub fn new(source: &Dataset, target: &Dataset, groups: usize, temperature: f64) -> Self {
        Self {
            groups,
            temperature,
            source_groups: assign_groups(source, groups, 1.0),
            target_groups: assign_groups(target, groups, temperature),
        }
    }

    pub fn source_sizes(&self) -> Vec<usize> {
        sizes(&self.source_groups, self.groups)
    }

    pub fn target_sizes(&self) -> Vec<usize> {
        sizes(&self.target_groups, self.groups)
    }
}

fn sizes(assign: &[usize], groups: usize) -> Vec<usize> {
    let mut out = vec![0; groups];
    for g in assign {
        out[*g] += 1;
    }
    out
}

/// Popoviciu-based sufficient condition for a group estimate to beat
/// per-sample estimates: `(max - min)^2 / 4 <= (N-1)/N * mean(b (1 - b))`.
///
/// Returns `(lhs, rhs, holds)`.
pub fn group_variance_diagnostic(accuracies: &[f64]) -> (f64, f64, bool) {
    assert!(!accuracies.is_empty(), "need at least one accuracy");
    let n = accuracies.len() as f64;
    let max = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = accuracies.iter().copied().fold(f64::INFINITY, f64::min);
    let lhs = 0.25 * (max - min).powi(2);
    let mean_var = accuracies.iter().map(|b| b * (1.0 - b)).sum::<f64>() / n;
    let rhs = (n - 1.0) / n * mean_var;
    (lhs, rhs, lhs <= rhs)
}
