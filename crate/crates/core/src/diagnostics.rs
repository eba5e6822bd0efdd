//! Per-group diagnostic quantities: the identical-accuracy bias term, source
//! and target estimation errors against oracle truth, and the two bound
//! checks relating them.

use crate::error::{Error, Result};
use crate::grouping::group_of;
use crate::optimizer::{alpha_target, GroupOutcome, TemperatureResult};
use crate::pipeline::GaeRun;
use crate::synth::OracleDraws;
use crate::types::{softmax_max, Dataset, GaeConfig};

/// Confidence level of the Hoeffding term.
pub const STAT_DELTA: f64 = 0.05;

/// `sqrt(ln(2 / 0.05) / (2 n))`.
pub fn hoeffding_eps(n: usize) -> f64 {
    ((2.0 / STAT_DELTA).ln() / (2.0 * n as f64)).sqrt()
}

/// `(P_T / (2 P_S)) (1 / w_min^2 + bias^2 + var)`.
pub fn ident_bias(mass_ratio: f64, min_weight: f64, bias: f64, variance: f64) -> f64 {
    0.5 * mass_ratio * (1.0 / (min_weight * min_weight) + bias * bias + variance)
}

/// Target-domain samples with known importance weights and correctness
/// probabilities, used as a population stand-in.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSet {
    pub logits: Vec<Vec<f64>>,
    /// Scores on the same scale as the run's bins.
    pub scores: Vec<f64>,
    pub true_iw: Vec<f64>,
    pub correct_prob: Vec<f64>,
}

impl OracleSet {
    /// Scores large synthetic draws with the run's domain classifier.
    pub fn from_draws(run: &GaeRun, draws: OracleDraws) -> Result<Self> {
        let clf = run
            .prepared
            .scores
            .classifier
            .as_ref()
            .ok_or_else(|| Error::Invalid("oracle draws need a fitted domain classifier".into()))?;
        Ok(Self {
            scores: draws.features.iter().map(|x| clf.iw_score(x)).collect(),
            logits: draws.logits,
            true_iw: draws.true_iw,
            correct_prob: draws.correct_prob,
        })
    }

    fn check(&self) -> Result<()> {
        let n = self.logits.len();
        for len in [self.scores.len(), self.true_iw.len(), self.correct_prob.len()] {
            if len != n {
                return Err(Error::LengthMismatch(len, n));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupDiagnostic {
    pub temperature: f64,
    pub group: usize,
    pub source_count: usize,
    pub target_count: usize,
    pub alpha_hat: f64,
    pub eps_opt: f64,
    pub ident_bias: f64,
    pub eps_stat: f64,
    /// `|alpha_S(G; w*) - alpha_S(G; w_T)|`; needs oracle truth.
    pub src_err: Option<f64>,
    /// `|alpha_T(G; w*) - alpha_T(G; w_S)|`; needs oracle truth.
    pub tgt_err: Option<f64>,
    /// `src_err <= eps_opt + eps_stat + ident_bias`.
    pub source_bound: Option<bool>,
    /// `tgt_err <= w_max * src_err * (P_T / P_S)^2`.
    pub transfer_bound: Option<bool>,
}

/// Diagnostics for every solved group at the run's selected temperature.
///
/// `labeled_target` supplies the bias and variance of the identical
/// accuracy assumption. With an oracle set, source and target accuracy
/// errors are evaluated on the oracle samples that fall into each group:
///
/// * `alpha_T(G; w) = mean[p(x) w_S(x) / w*(x)]`, which equals
///   `E_S[w 1(Y = Yhat) | G] P_S / P_T` under the true weights,
/// * `alpha_S(G; w) = mean[p(x) / w(x)] P_T / P_S`,
///
/// with the group masses taken from the run's counts.
pub fn diagnose(
    run: &GaeRun,
    labeled_target: &Dataset,
    oracle: Option<&OracleSet>,
    cfg: &GaeConfig,
) -> Result<Vec<GroupDiagnostic>> {
    diagnose_result(run, run.search.best_result(), labeled_target, oracle, cfg)
}

/// [`diagnose`] for every temperature of the search, in grid order.
pub fn diagnose_all(
    run: &GaeRun,
    labeled_target: &Dataset,
    oracle: Option<&OracleSet>,
    cfg: &GaeConfig,
) -> Result<Vec<GroupDiagnostic>> {
    let mut out = Vec::new();
    for result in &run.search.results {
        out.extend(diagnose_result(run, result, labeled_target, oracle, cfg)?);
    }
    Ok(out)
}

fn diagnose_result(
    run: &GaeRun,
    result: &TemperatureResult,
    labeled_target: &Dataset,
    oracle: Option<&OracleSet>,
    cfg: &GaeConfig,
) -> Result<Vec<GroupDiagnostic>> {
    let correct = labeled_target.correctness()?;
    let target_groups = &result.target_groups;
    if target_groups.len() != correct.len() {
        return Err(Error::LengthMismatch(correct.len(), target_groups.len()));
    }
    if let Some(o) = oracle {
        o.check()?;
    }
    let t = result.temperature;
    let oracle_groups: Option<Vec<(usize, usize)>> = oracle.map(|o| {
        o.logits
            .iter()
            .zip(&o.scores)
            .map(|(l, s)| (group_of(softmax_max(l, t).0, cfg.groups), run.prepared.partition.bin_of(*s)))
            .collect()
    });

    let mut out = Vec::new();
    for (g, outcome) in result.outcomes.iter().enumerate() {
        let GroupOutcome::Solved { counts, solution } = outcome else {
            continue;
        };
        let hits: Vec<f64> = correct
            .iter()
            .zip(target_groups)
            .filter(|(_, tg)| **tg == g)
            .map(|(c, _)| if *c { 1.0 } else { 0.0 })
            .collect();
        let true_acc = hits.iter().sum::<f64>() / hits.len() as f64;
        let variance = true_acc * (1.0 - true_acc);
        let alpha_hat = alpha_target(counts, &solution.w_source)?.value;
        let mass_ratio = counts.target_mass() / counts.source_mass();
        let ident = ident_bias(mass_ratio, solution.min_weight(), alpha_hat - true_acc, variance);
        let eps_stat = hoeffding_eps(counts.source_size());

        let errors = match (oracle, &oracle_groups) {
            (Some(o), Some(assign)) => {
                let (mut n, mut s_true, mut s_est, mut t_true, mut t_est) = (0usize, 0.0, 0.0, 0.0, 0.0);
                for (i, (og, ob)) in assign.iter().enumerate() {
                    if *og != g {
                        continue;
                    }
                    let p = o.correct_prob[i];
                    let w = o.true_iw[i];
                    n += 1;
                    s_true += p / w;
                    s_est += p / solution.w_target[*ob];
                    t_true += p;
                    t_est += p * solution.w_source[*ob] / w;
                }
                (n > 0).then(|| {
                    let n = n as f64;
                    let src = mass_ratio * (s_true - s_est).abs() / n;
                    let tgt = (t_true - t_est).abs() / n;
                    (src, tgt)
                })
            }
            _ => None,
        };
        let (src_err, tgt_err) = match errors {
            Some((s, t)) => (Some(s), Some(t)),
            None => (None, None),
        };
        out.push(GroupDiagnostic {
            temperature: t,
            group: g,
            source_count: counts.source_size(),
            target_count: counts.target_size(),
            alpha_hat,
            eps_opt: solution.eps_opt,
            ident_bias: ident,
            eps_stat,
            src_err,
            tgt_err,
            source_bound: src_err.map(|e| e <= solution.eps_opt + eps_stat + ident),
            transfer_bound: src_err
                .zip(tgt_err)
                .map(|(s, t)| t <= cfg.w_max * s * mass_ratio * mass_ratio),
        });
    }
    Ok(out)
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either input is constant or shorter than 2.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ra = ranks(a);
    let rb = ranks(b);
    pearson(&ra, &rb)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Fraction of `true` among the defined flags.
pub fn pass_rate(flags: impl IntoIterator<Item = Option<bool>>) -> Option<f64> {
    let (pass, total) = flags
        .into_iter()
        .flatten()
        .fold((0usize, 0usize), |(p, t), f| (p + usize::from(f), t + 1));
    (total > 0).then(|| pass as f64 / total as f64)
}
