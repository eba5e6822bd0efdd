//! End-to-end estimation: importance-weight scores, bins, intervals, the
//! temperature search, and the methods built on top of them.

use log::info;
use rayon::prelude::*;

use crate::baselines;
use crate::ci::{binned_intervals, IwIntervals};
use crate::domain::{build_bins, fit_domain_classifier, BinPartition, DomainClassifier};
use crate::error::{Error, Result};
use crate::estimate::{
    calibrate, estimates_from_outcomes, estimates_with_weights, selection_score, unweighted_selection_score,
    CalibratedConfidence, GroupAccuracyEstimate, SelectionScore,
};
use crate::grouping::assign_groups;
use crate::optimizer::{group_bin_counts, solve_all_groups, GroupBinCounts, SearchInput, TemperatureSearch};
use crate::types::{Dataset, GaeConfig};

/// Importance-weight scores of both domains.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub source: Vec<f64>,
    pub target: Vec<f64>,
    /// `None` when the scores came from an `iw_score` column.
    pub classifier: Option<DomainClassifier>,
}

/// Uses supplied `iw_score` columns when both datasets carry them, and
/// otherwise fits a domain classifier on the features.
pub fn score_domains(source: &Dataset, target: &Dataset, cfg: &GaeConfig) -> Result<Scores> {
    if source.has_iw_scores() && target.has_iw_scores() {
        let col = |d: &Dataset| d.records().iter().map(|r| r.iw_score.unwrap_or(1.0)).collect();
        return Ok(Scores {
            source: col(source),
            target: col(target),
            classifier: None,
        });
    }
    let clf = fit_domain_classifier(source, target, cfg.l2_penalty, cfg.seed)?;
    Ok(Scores {
        source: clf.score_dataset(source)?,
        target: clf.score_dataset(target)?,
        classifier: Some(clf),
    })
}

/// Everything that does not depend on the grouping temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub scores: Scores,
    pub partition: BinPartition,
    pub source_bins: Vec<usize>,
    pub target_bins: Vec<usize>,
    pub intervals: IwIntervals,
}

impl Prepared {
    pub fn new(source: &Dataset, target: &Dataset, cfg: &GaeConfig) -> Result<Self> {
        cfg.validate()?;
        let scores = score_domains(source, target, cfg)?;
        let partition = build_bins(&scores.source, &scores.target, cfg.bins)?;
        let source_bins = partition.assign(&scores.source);
        let target_bins = partition.assign(&scores.target);
        let b = partition.num_bins();
        let intervals = binned_intervals(&tally(&source_bins, b), &tally(&target_bins, b), cfg)?;
        Ok(Self {
            scores,
            partition,
            source_bins,
            target_bins,
            intervals,
        })
    }

    /// Replaces the data-driven intervals, e.g. with fixed unit weights.
    pub fn with_intervals(mut self, intervals: IwIntervals) -> Result<Self> {
        if intervals.len() != self.partition.num_bins() {
            return Err(Error::LengthMismatch(intervals.len(), self.partition.num_bins()));
        }
        self.intervals = intervals;
        Ok(self)
    }

    /// Source-side per-sample weights, clipped to the configured range.
    pub fn source_weights(&self, cfg: &GaeConfig) -> Vec<f64> {
        self.scores.source.iter().map(|s| cfg.clip_weight(*s)).collect()
    }
}

fn tally(bins: &[usize], b: usize) -> Vec<usize> {
    let mut out = vec![0; b];
    for i in bins {
        out[*i] += 1;
    }
    out
}

/// Result of one full run.
#[derive(Clone, Debug, PartialEq)]
pub struct GaeRun {
    pub prepared: Prepared,
    pub source_groups: Vec<usize>,
    pub source_correct: Vec<bool>,
    pub search: TemperatureSearch,
}

pub fn run(source: &Dataset, target: &Dataset, cfg: &GaeConfig) -> Result<GaeRun> {
    run_prepared(source, target, Prepared::new(source, target, cfg)?, cfg)
}

pub fn run_prepared(source: &Dataset, target: &Dataset, prepared: Prepared, cfg: &GaeConfig) -> Result<GaeRun> {
    cfg.validate()?;
    if source.num_classes() != target.num_classes() {
        return Err(Error::Invalid(format!(
            "source has {} classes, target {}",
            source.num_classes(),
            target.num_classes()
        )));
    }
    let source_correct = source.correctness()?;
    let source_groups = assign_groups(source, cfg.groups, 1.0);
    let target_logits: Vec<Vec<f64>> = target.records().iter().map(|r| r.logits.clone()).collect();
    let search = solve_all_groups(
        &SearchInput {
            source_groups: &source_groups,
            source_bins: &prepared.source_bins,
            source_correct: &source_correct,
            target_logits: &target_logits,
            target_bins: &prepared.target_bins,
        },
        &prepared.intervals,
        cfg,
    )?;
    info!(
        "selected temperature {} with {} solved groups",
        search.best_temperature(),
        search.best_result().solved()
    );
    Ok(GaeRun {
        prepared,
        source_groups,
        source_correct,
        search,
    })
}

impl GaeRun {
    pub fn temperature(&self) -> f64 {
        self.search.best_temperature()
    }

    /// Target group per sample at the selected temperature.
    pub fn target_groups(&self) -> &[usize] {
        &self.search.best_result().target_groups
    }

    pub fn estimates(&self) -> Result<Vec<GroupAccuracyEstimate>> {
        estimates_from_outcomes(&self.search.best_result().outcomes)
    }

    pub fn calibrate(&self, target: &Dataset) -> Result<Vec<CalibratedConfidence>> {
        calibrate(target, self.target_groups(), &self.estimates()?)
    }

    /// Group counts with target groups taken at temperature 1.
    pub fn unit_temperature_counts(&self, target: &Dataset, cfg: &GaeConfig) -> (Vec<usize>, Vec<GroupBinCounts>) {
        let target_groups = assign_groups(target, cfg.groups, 1.0);
        let counts = group_bin_counts(
            cfg.groups,
            self.prepared.intervals.len(),
            &self.source_groups,
            &self.prepared.source_bins,
            &self.source_correct,
            &target_groups,
            &self.prepared.target_bins,
        );
        (target_groups, counts)
    }

    /// Interval midpoints as weights, unit temperature, no solver.
    pub fn iw_mid(&self, target: &Dataset, cfg: &GaeConfig) -> Result<(Vec<usize>, Vec<GroupAccuracyEstimate>)> {
        let (groups, counts) = self.unit_temperature_counts(target, cfg);
        let est = estimates_with_weights(&counts, &self.prepared.intervals.midpoints(), cfg.min_group_size)?;
        Ok((groups, est))
    }

    pub fn calibrate_iw_mid(&self, target: &Dataset, cfg: &GaeConfig) -> Result<Vec<CalibratedConfidence>> {
        let (groups, est) = self.iw_mid(target, cfg)?;
        calibrate(target, &groups, &est)
    }
}

/// Calibration methods with per-sample target confidences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    IwGae,
    IwMid,
    Vanilla,
    Ts,
    IwTs,
    Cpcs,
    Iwcv,
}

impl Method {
    pub const CALIBRATION: [Method; 6] = [
        Method::IwGae,
        Method::IwMid,
        Method::Vanilla,
        Method::Ts,
        Method::IwTs,
        Method::Cpcs,
    ];
    pub const SELECTION: [Method; 4] = [Method::IwGae, Method::IwMid, Method::Iwcv, Method::Vanilla];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::IwGae => "iw-gae",
            Method::IwMid => "iw-mid",
            Method::Vanilla => "vanilla",
            Method::Ts => "ts",
            Method::IwTs => "iw-ts",
            Method::Cpcs => "cpcs",
            Method::Iwcv => "iwcv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Method::IwGae,
            Method::IwMid,
            Method::Vanilla,
            Method::Ts,
            Method::IwTs,
            Method::Cpcs,
            Method::Iwcv,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
    }
}

/// Confidences of one calibration method for every target sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodConfidences {
    pub method: Method,
    pub confidences: Vec<CalibratedConfidence>,
}

fn plain(values: Vec<f64>) -> Vec<CalibratedConfidence> {
    values
        .into_iter()
        .map(|confidence| CalibratedConfidence {
            confidence,
            fallback: false,
        })
        .collect()
}

/// Runs the requested calibration methods. The IW-GAE run is computed only
/// when a method needs it.
pub fn calibrate_methods(
    source: &Dataset,
    target: &Dataset,
    methods: &[Method],
    cfg: &GaeConfig,
) -> Result<Vec<MethodConfidences>> {
    let needs_run = methods.iter().any(|m| matches!(m, Method::IwGae | Method::IwMid));
    let needs_weights = methods.iter().any(|m| matches!(m, Method::IwTs | Method::Cpcs));
    let prepared = if needs_run || needs_weights {
        Some(Prepared::new(source, target, cfg)?)
    } else {
        None
    };
    let weights = prepared.as_ref().map(|p| p.source_weights(cfg));
    let run = match (needs_run, prepared) {
        (true, Some(p)) => Some(run_prepared(source, target, p, cfg)?),
        _ => None,
    };
    let mut out = Vec::new();
    for &method in methods {
        let confidences = match method {
            Method::IwGae => run.as_ref().expect("run computed").calibrate(target)?,
            Method::IwMid => run.as_ref().expect("run computed").calibrate_iw_mid(target, cfg)?,
            Method::Vanilla => plain(baselines::vanilla(target)),
            Method::Ts => plain(baselines::ts(source, target)?.1),
            Method::IwTs => plain(baselines::iwts(source, target, weights.as_deref().expect("weights"))?.1),
            Method::Cpcs => plain(baselines::cpcs(source, target, weights.as_deref().expect("weights"))?.1),
            Method::Iwcv => continue,
        };
        out.push(MethodConfidences { method, confidences });
    }
    Ok(out)
}

/// Selection scores of one model under the requested methods.
pub fn model_scores(
    model_id: &str,
    source: &Dataset,
    target: &Dataset,
    methods: &[Method],
    cfg: &GaeConfig,
) -> Result<Vec<SelectionScore>> {
    let prepared = Prepared::new(source, target, cfg)?;
    let weights = prepared.source_weights(cfg);
    let needs_run = methods.iter().any(|m| matches!(m, Method::IwGae | Method::IwMid));
    let run = if needs_run {
        Some(run_prepared(source, target, prepared, cfg)?)
    } else {
        None
    };
    let mut out = Vec::new();
    for &method in methods {
        let score = match method {
            Method::IwGae => {
                let run = run.as_ref().expect("run computed");
                if cfg.unweighted_selection {
                    unweighted_selection_score(&run.estimates()?).unwrap_or(0.0)
                } else {
                    selection_score(&run.calibrate(target)?)
                }
            }
            Method::IwMid => {
                let run = run.as_ref().expect("run computed");
                let (groups, est) = run.iw_mid(target, cfg)?;
                if cfg.unweighted_selection {
                    unweighted_selection_score(&est).unwrap_or(0.0)
                } else {
                    selection_score(&calibrate(target, &groups, &est)?)
                }
            }
            Method::Iwcv => baselines::iwcv(source, &weights, cfg)?,
            Method::Vanilla => {
                let c = baselines::vanilla(target);
                c.iter().sum::<f64>() / c.len() as f64
            }
            Method::Ts | Method::IwTs | Method::Cpcs => continue,
        };
        out.push(SelectionScore {
            model_id: model_id.to_string(),
            method: method.as_str().to_string(),
            score,
        });
    }
    Ok(out)
}

/// One candidate model: its id, labeled source validation set and target set.
pub struct Candidate<'a> {
    pub id: &'a str,
    pub source: &'a Dataset,
    pub target: &'a Dataset,
}

/// Scores every candidate in parallel. Failed models are returned as errors
/// in input order so callers can report them as unranked.
pub fn select(candidates: &[Candidate<'_>], methods: &[Method], cfg: &GaeConfig) -> Vec<Result<Vec<SelectionScore>>> {
    candidates
        .par_iter()
        .map(|c| model_scores(c.id, c.source, c.target, methods, cfg))
        .collect()
}
