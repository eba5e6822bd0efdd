//! Shared data model: prediction records, datasets and run configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// One sample's model output together with whatever side information the
/// dump carried.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub domain: Domain,
    pub split: Split,
    pub label: Option<usize>,
    pub logits: Vec<f64>,
    /// Representation `h(x)` used by the domain classifier.
    pub features: Option<Vec<f64>>,
    /// Externally computed density-ratio score; bypasses the domain classifier.
    pub iw_score: Option<f64>,
}

impl PredictionRecord {
    /// Argmax of the logits, lowest index on ties.
    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }

    /// `None` when the record is unlabeled.
    pub fn is_correct(&self) -> Option<bool> {
        self.label.map(|y| y == self.predicted_class())
    }

    pub fn confidence(&self, temperature: f64) -> f64 {
        softmax_max(&self.logits, temperature).0
    }
}

/// A homogeneous collection of prediction records.
#[derive(Clone, Debug)]
pub struct Dataset {
    records: Vec<PredictionRecord>,
    num_classes: usize,
    feature_dim: usize,
}

impl Dataset {
    pub fn new(records: Vec<PredictionRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Invalid("dataset is empty".into()))?;
        let num_classes = first.logits.len();
        let feature_dim = first.features.as_ref().map_or(0, Vec::len);
        if num_classes < 2 {
            return Err(Error::Invalid(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        for r in &records {
            if r.logits.len() != num_classes {
                return Err(Error::Invalid(format!(
                    "sample {}: expected {num_classes} logits, got {}",
                    r.sample_id,
                    r.logits.len()
                )));
            }
            if let Some(bad) = r.logits.iter().find(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!(
                    "sample {}: non-finite logit {bad}",
                    r.sample_id
                )));
            }
            if let Some(y) = r.label {
                if y >= num_classes {
                    return Err(Error::Invalid(format!(
                        "sample {}: label {y} out of range for {num_classes} classes",
                        r.sample_id
                    )));
                }
            }
            let d = r.features.as_ref().map_or(0, Vec::len);
            if d != feature_dim {
                return Err(Error::Invalid(format!(
                    "sample {}: feature dimension {d} differs from {feature_dim}",
                    r.sample_id
                )));
            }
            if let Some(s) = r.iw_score {
                if !(s.is_finite() && s > 0.0) {
                    return Err(Error::Invalid(format!(
                        "sample {}: iw_score must be finite and positive, got {s}",
                        r.sample_id
                    )));
                }
            }
        }
        Ok(Self {
            records,
            num_classes,
            feature_dim,
        })
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<PredictionRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Zero when the records carry no features.
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn has_features(&self) -> bool {
        self.feature_dim > 0
    }

    pub fn has_iw_scores(&self) -> bool {
        self.records.iter().all(|r| r.iw_score.is_some())
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.records.iter().all(|r| r.label.is_some())
    }

    pub fn unlabeled_count(&self) -> usize {
        self.records.iter().filter(|r| r.label.is_none()).count()
    }

    /// Per-sample correctness; errors when any label is missing.
    pub fn correctness(&self) -> Result<Vec<bool>> {
        let missing = self.unlabeled_count();
        if missing > 0 {
            return Err(Error::MissingLabels(missing));
        }
        Ok(self
            .records
            .iter()
            .map(|r| r.is_correct().unwrap_or(false))
            .collect())
    }

    pub fn confidences(&self, temperature: f64) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.confidence(temperature))
            .collect()
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `logits / temperature`, computed with max subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Maximum temperature-scaled softmax probability and the predicted class.
///
/// The class is always the argmax of the raw logits: temperature only
/// rescales the confidence.
pub fn softmax_max(logits: &[f64], temperature: f64) -> (f64, usize) {
    debug_assert!(temperature > 0.0);
    let class = argmax(logits);
    let max = logits[class];
    // exp(0) = 1 for the max entry, so the top probability is 1 / sum.
    let total: f64 = logits
        .iter()
        .map(|l| ((l - max) / temperature).exp())
        .sum();
    (1.0 / total, class)
}

/// Run configuration. Defaults reproduce the reference operating point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaeConfig {
    /// Number of importance-weight bins.
    pub bins: usize,
    /// Number of accuracy groups.
    pub groups: usize,
    /// Clopper–Pearson level per side.
    pub delta_bar: f64,
    /// Within-bin density-variation constant added to the binned CIs.
    pub smoothness: f64,
    pub w_max: f64,
    pub w_min: f64,
    /// Per-bin slack on `(w_T - w_S)^2`.
    pub delta_tol: f64,
    /// Slack on the two group-probability identities.
    pub delta_prob: f64,
    /// Candidate temperatures for target grouping.
    pub temp_grid: Vec<f64>,
    pub opt_tol: f64,
    pub ece_bins: usize,
    pub seed: u64,
    /// Divide `delta_bar` by `2 * bins` (union bound over all bins and sides).
    pub union_bound: bool,
    /// Groups with fewer source or target samples are not solved.
    pub min_group_size: usize,
    pub l2_penalty: f64,
    /// Average group estimates without target-count weighting for selection.
    pub unweighted_selection: bool,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            bins: 10,
            groups: 10,
            delta_bar: 0.05,
            smoothness: 0.001,
            w_max: 6.0,
            w_min: 1.0 / 6.0,
            delta_tol: 0.1,
            delta_prob: 0.3,
            temp_grid: vec![0.85, 0.90, 0.95, 1.00, 1.05, 1.10],
            opt_tol: 1e-8,
            ece_bins: 15,
            seed: 0,
            union_bound: false,
            min_group_size: 5,
            l2_penalty: 1.0,
            unweighted_selection: false,
        }
    }
}

impl GaeConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.bins < 1 {
            return fail("bins must be at least 1".into());
        }
        if self.groups < 2 {
            return fail("groups must be at least 2".into());
        }
        if !(self.delta_bar > 0.0 && self.delta_bar < 1.0) {
            return fail(format!("delta_bar must lie in (0, 1), got {}", self.delta_bar));
        }
        if !(self.smoothness >= 0.0 && self.smoothness.is_finite()) {
            return fail(format!("smoothness must be non-negative, got {}", self.smoothness));
        }
        if !(self.w_min > 0.0 && self.w_min < self.w_max && self.w_max.is_finite()) {
            return fail(format!(
                "need 0 < w_min < w_max, got w_min={} w_max={}",
                self.w_min, self.w_max
            ));
        }
        if !(self.delta_tol >= 0.0 && self.delta_prob >= 0.0) {
            return fail("relaxation constants must be non-negative".into());
        }
        if self.temp_grid.is_empty() {
            return fail("temp_grid must not be empty".into());
        }
        if let Some(t) = self.temp_grid.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return fail(format!("temperatures must be positive, got {t}"));
        }
        if !(self.opt_tol > 0.0) {
            return fail("opt_tol must be positive".into());
        }
        if self.ece_bins < 1 {
            return fail("ece_bins must be at least 1".into());
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return fail("l2_penalty must be non-negative".into());
        }
        Ok(())
    }

    /// Clopper–Pearson level actually used on each side of each bin.
    pub fn per_side_delta(&self) -> f64 {
        if self.union_bound {
            self.delta_bar / (2.0 * self.bins as f64)
        } else {
            self.delta_bar
        }
    }

    /// Deduplicated temperature grid in ascending order.
    pub fn temperatures(&self) -> Vec<f64> {
        let mut ts = self.temp_grid.clone();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts
    }

    pub fn clip_weight(&self, w: f64) -> f64 {
        w.clamp(self.w_min, self.w_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_max_examples() {
        let (c, k) = softmax_max(&[0.0, 0.0], 1.0);
        assert_eq!(k, 0);
        assert_abs_diff_eq!(c, 0.5, epsilon = 1e-15);

        let (c, k) = softmax_max(&[2.0, 0.0], 1.0);
        assert_eq!(k, 0);
        assert_abs_diff_eq!(c, 1.0 / (1.0 + (-2.0f64).exp()), epsilon = 1e-15);
        assert_abs_diff_eq!(c, 0.8808, epsilon = 1e-4);

        let (c, k) = softmax_max(&[2.0, 0.0], 2.0);
        assert_eq!(k, 0);
        assert_abs_diff_eq!(c, 1.0 / (1.0 + (-1.0f64).exp()), epsilon = 1e-15);
        assert_abs_diff_eq!(c, 0.7311, epsilon = 1e-4);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(softmax_max(&[5.0, 5.0, 5.0], 0.3).1, 0);
    }

    #[test]
    fn huge_logits_do_not_overflow() {
        let (c, k) = softmax_max(&[1e300, -1e300], 1.0);
        assert_eq!(k, 0);
        assert_eq!(c, 1.0);
        let p = softmax(&[800.0, 799.0], 1.0);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    fn record(id: &str, logits: Vec<f64>, label: Option<usize>) -> PredictionRecord {
        PredictionRecord {
            sample_id: id.into(),
            domain: Domain::Source,
            split: Split::Validation,
            label,
            logits,
            features: None,
            iw_score: None,
        }
    }

    #[test]
    fn dataset_rejects_bad_records() {
        assert!(Dataset::new(vec![]).is_err());
        assert!(Dataset::new(vec![record("a", vec![1.0], None)]).is_err());
        assert!(Dataset::new(vec![record("a", vec![1.0, f64::NAN], None)]).is_err());
        assert!(Dataset::new(vec![record("a", vec![1.0, 0.0], Some(2))]).is_err());
        assert!(Dataset::new(vec![
            record("a", vec![1.0, 0.0], None),
            record("b", vec![1.0, 0.0, 2.0], None),
        ])
        .is_err());
        let mut with_features = record("c", vec![0.0, 1.0], None);
        with_features.features = Some(vec![1.0]);
        assert!(Dataset::new(vec![record("a", vec![1.0, 0.0], None), with_features]).is_err());
    }

    #[test]
    fn correctness_requires_labels() {
        let ds = Dataset::new(vec![
            record("a", vec![1.0, 0.0], Some(0)),
            record("b", vec![1.0, 0.0], None),
        ])
        .unwrap();
        assert!(matches!(ds.correctness(), Err(Error::MissingLabels(1))));
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = GaeConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.per_side_delta(), 0.05);
        let ub = GaeConfig {
            union_bound: true,
            ..cfg
        };
        assert_abs_diff_eq!(ub.per_side_delta(), 0.05 / 20.0, epsilon = 1e-18);
    }

    #[test]
    fn config_rejects_inconsistent_values() {
        for cfg in [
            GaeConfig { delta_bar: 1.0, ..Default::default() },
            GaeConfig { w_min: 7.0, ..Default::default() },
            GaeConfig { temp_grid: vec![], ..Default::default() },
            GaeConfig { temp_grid: vec![1.0, -0.5], ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in prop::collection::vec(-50.0f64..50.0, 2..12), t in 0.01f64..100.0) {
            let p = softmax(&logits, t);
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn temperature_never_changes_prediction(logits in prop::collection::vec(-50.0f64..50.0, 2..12), t in 0.01f64..100.0) {
            let p = softmax(&logits, t);
            prop_assert_eq!(argmax(&p), argmax(&logits));
            prop_assert_eq!(softmax_max(&logits, t).1, argmax(&logits));
        }
    }
}
