//! Group accuracy estimates, calibrated confidences, ECE and selection
//! scores.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::optimizer::{alpha_target, GroupBinCounts, GroupOutcome};
use crate::types::Dataset;

/// Target accuracy estimate of one group. Skipped groups carry no estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupAccuracyEstimate {
    pub group: usize,
    /// Clipped to `[0, 1]`.
    pub alpha_hat: Option<f64>,
    pub raw: Option<f64>,
    pub source_count: usize,
    pub target_count: usize,
}

impl GroupAccuracyEstimate {
    pub fn skipped(&self) -> bool {
        self.alpha_hat.is_none()
    }
}

fn skipped(group: usize, counts: &GroupBinCounts) -> GroupAccuracyEstimate {
    GroupAccuracyEstimate {
        group,
        alpha_hat: None,
        raw: None,
        source_count: counts.source_size(),
        target_count: counts.target_size(),
    }
}

fn estimated(group: usize, counts: &GroupBinCounts, w_source: &[f64]) -> Result<GroupAccuracyEstimate> {
    let a = alpha_target(counts, w_source)?;
    Ok(GroupAccuracyEstimate {
        group,
        alpha_hat: Some(a.value),
        raw: Some(a.raw),
        source_count: counts.source_size(),
        target_count: counts.target_size(),
    })
}

/// Estimates from solved groups, using each solution's source-side weights.
pub fn estimates_from_outcomes(outcomes: &[GroupOutcome]) -> Result<Vec<GroupAccuracyEstimate>> {
    outcomes
        .iter()
        .enumerate()
        .map(|(g, o)| match o {
            GroupOutcome::Solved { counts, solution } => estimated(g, counts, &solution.w_source),
            GroupOutcome::Skipped { counts } => Ok(skipped(g, counts)),
        })
        .collect()
}

/// Estimates with one fixed weight vector shared by every group. Groups
/// below `min_group_size` on either side are skipped.
pub fn estimates_with_weights(
    counts: &[GroupBinCounts],
    w_source: &[f64],
    min_group_size: usize,
) -> Result<Vec<GroupAccuracyEstimate>> {
    let min = min_group_size.max(1);
    counts
        .iter()
        .enumerate()
        .map(|(g, c)| {
            if c.source_size() < min || c.target_size() < min {
                Ok(skipped(g, c))
            } else {
                estimated(g, c, w_source)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibratedConfidence {
    pub confidence: f64,
    /// The sample's group was skipped and the vanilla confidence is used.
    pub fallback: bool,
}

/// Assigns every target sample its group's estimate, or its plain softmax
/// confidence when the group was skipped.
pub fn calibrate(
    target: &Dataset,
    target_groups: &[usize],
    estimates: &[GroupAccuracyEstimate],
) -> Result<Vec<CalibratedConfidence>> {
    if target_groups.len() != target.len() {
        return Err(Error::LengthMismatch(target_groups.len(), target.len()));
    }
    let out: Vec<CalibratedConfidence> = target
        .records()
        .iter()
        .zip(target_groups)
        .map(|(r, g)| match estimates.get(*g).and_then(|e| e.alpha_hat) {
            Some(a) => CalibratedConfidence {
                confidence: a,
                fallback: false,
            },
            None => CalibratedConfidence {
                confidence: r.confidence(1.0),
                fallback: true,
            },
        })
        .collect();
    let fallbacks = out.iter().filter(|c| c.fallback).count();
    if fallbacks > 0 {
        log::info!("{fallbacks} target samples fell back to vanilla confidence");
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReliabilityBin {
    pub count: usize,
    /// Mean confidence; 0 for empty bins.
    pub conf: f64,
    /// Mean accuracy; 0 for empty bins.
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub method: String,
    pub ece: f64,
    pub bins: Vec<ReliabilityBin>,
}

/// Index of the equal-width bin holding `c` among `m` bins on `[0, 1]`.
pub fn ece_bin(c: f64, m: usize) -> usize {
    ((c * m as f64).floor().max(0.0) as usize).min(m - 1)
}

/// Expected calibration error over `m` equal-width confidence bins.
pub fn ece(method: &str, confidences: &[f64], correct: &[bool], m: usize) -> Result<CalibrationReport> {
    if confidences.len() != correct.len() {
        return Err(Error::LengthMismatch(confidences.len(), correct.len()));
    }
    if m == 0 {
        return Err(Error::Invalid("ECE needs at least one bin".into()));
    }
    let mut sums = vec![(0usize, 0.0f64, 0usize); m];
    for (c, ok) in confidences.iter().zip(correct) {
        let b = &mut sums[ece_bin(*c, m)];
        b.0 += 1;
        b.1 += c;
        b.2 += usize::from(*ok);
    }
    let n = confidences.len() as f64;
    let mut total = 0.0;
    let bins = sums
        .into_iter()
        .map(|(count, conf_sum, hits)| {
            if count == 0 {
                return ReliabilityBin {
                    count,
                    conf: 0.0,
                    acc: 0.0,
                };
            }
            let conf = conf_sum / count as f64;
            let acc = hits as f64 / count as f64;
            total += count as f64 / n * (acc - conf).abs();
            ReliabilityBin { count, conf, acc }
        })
        .collect();
    Ok(CalibrationReport {
        method: method.to_string(),
        ece: total,
        bins,
    })
}

/// Empirical target expectation of the calibrated confidence, i.e. the
/// target-count-weighted mean of the group estimates (with vanilla values
/// for skipped groups).
pub fn selection_score(calibrated: &[CalibratedConfidence]) -> f64 {
    if calibrated.is_empty() {
        return 0.0;
    }
    calibrated.iter().map(|c| c.confidence).sum::<f64>() / calibrated.len() as f64
}

/// Plain mean of the estimates of non-skipped groups.
pub fn unweighted_selection_score(estimates: &[GroupAccuracyEstimate]) -> Option<f64> {
    let vals: Vec<f64> = estimates.iter().filter_map(|e| e.alpha_hat).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionScore {
    pub model_id: String,
    pub method: String,
    pub score: f64,
}

/// Sorts by descending score, ties by model id, and attaches 1-based ranks.
pub fn rank(mut scores: Vec<SelectionScore>) -> Vec<(SelectionScore, usize)> {
    scores.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.model_id.cmp(&b.model_id))
    });
    scores.into_iter().enumerate().map(|(i, s)| (s, i + 1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Domain, PredictionRecord, Split};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn ece_examples() {
        let r = ece("x", &[0.8, 0.8, 0.6, 0.6], &[true, false, true, true], 15).unwrap();
        assert_abs_diff_eq!(r.ece, 0.35, epsilon = 1e-12);
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 4);

        let r = ece("x", &[1.0; 5], &[false; 5], 15).unwrap();
        assert_abs_diff_eq!(r.ece, 1.0);
        assert_eq!(r.bins[14].count, 5);

        // Half of the samples in a bin at conf 0.5 are correct.
        let r = ece("x", &[0.5, 0.5, 0.75, 0.75, 0.75, 0.75], &[true, false, true, true, true, false], 4).unwrap();
        assert_abs_diff_eq!(r.ece, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn ece_rejects_mismatched_lengths() {
        assert!(matches!(ece("x", &[0.5], &[], 15), Err(Error::LengthMismatch(1, 0))));
    }

    #[test]
    fn ece_bin_edges() {
        assert_eq!(ece_bin(0.0, 15), 0);
        assert_eq!(ece_bin(1.0, 15), 14);
        assert_eq!(ece_bin(0.2, 10), 2);
    }

    fn target(n: usize) -> Dataset {
        Dataset::new(
            (0..n)
                .map(|i| PredictionRecord {
                    sample_id: format!("t{i}"),
                    domain: Domain::Target,
                    split: Split::Test,
                    label: None,
                    logits: vec![0.0, i as f64 / 10.0],
                    features: None,
                    iw_score: None,
                })
                .collect(),
        )
        .unwrap()
    }

    fn est(group: usize, a: Option<f64>) -> GroupAccuracyEstimate {
        GroupAccuracyEstimate {
            group,
            alpha_hat: a,
            raw: a,
            source_count: 10,
            target_count: 10,
        }
    }

    #[test]
    fn calibrate_uses_group_estimate_or_vanilla() {
        let data = target(4);
        let groups = [0, 0, 1, 1];
        let out = calibrate(&data, &groups, &[est(0, Some(0.7)), est(1, None)]).unwrap();
        assert_eq!(out[0], CalibratedConfidence { confidence: 0.7, fallback: false });
        assert!(out[2].fallback);
        assert_abs_diff_eq!(out[3].confidence, data.records()[3].confidence(1.0));
    }

    #[test]
    fn single_group_gives_constant_confidence() {
        let data = target(6);
        let out = calibrate(&data, &[0; 6], &[est(0, Some(0.42))]).unwrap();
        assert!(out.iter().all(|c| c.confidence == 0.42 && !c.fallback));
        assert_abs_diff_eq!(selection_score(&out), 0.42);
    }

    #[test]
    fn ranking_orders_and_breaks_ties_by_id() {
        let s = |id: &str, v| SelectionScore {
            model_id: id.into(),
            method: "m".into(),
            score: v,
        };
        let ranked = rank(vec![s("b", 0.5), s("a", 0.5), s("c", 0.9)]);
        let ids: Vec<_> = ranked.iter().map(|(s, r)| (s.model_id.as_str(), *r)).collect();
        assert_eq!(ids, vec![("c", 1), ("a", 2), ("b", 3)]);
    }

    #[test]
    fn unweighted_score_skips_missing_groups() {
        assert_eq!(unweighted_selection_score(&[est(0, Some(0.2)), est(1, None), est(2, Some(0.6))]), Some(0.4));
        assert_eq!(unweighted_selection_score(&[est(0, None)]), None);
    }

    proptest! {
        #[test]
        fn ece_is_permutation_invariant(
            pairs in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..60),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (c1, k1): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
            let (c2, k2): (Vec<f64>, Vec<bool>) = shuffled.into_iter().unzip();
            let a = ece("x", &c1, &k1, 15).unwrap();
            let b = ece("x", &c2, &k2, 15).unwrap();
            prop_assert!((a.ece - b.ece).abs() < 1e-12);
            prop_assert!(a.ece >= 0.0 && a.ece <= 1.0);
        }

        #[test]
        fn ece_zero_iff_bins_match(hits in prop::collection::vec(any::<bool>(), 1..40)) {
            // Every sample gets its bin's accuracy as confidence; all samples
            // share one bin so the bin accuracy is the overall hit rate.
            let acc = hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64;
            let conf = vec![acc; hits.len()];
            let r = ece("x", &conf, &hits, 1).unwrap();
            prop_assert!(r.ece < 1e-12);
            let off = vec![(acc + 0.25) % 1.0; hits.len()];
            let r = ece("x", &off, &hits, 1).unwrap();
            prop_assert!(r.ece > 0.0);
        }
    }
}
