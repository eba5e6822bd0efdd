//! Per-group selection of binned importance weights from their intervals,
//! and the outer search over target-grouping temperatures.
//!
//! For one accuracy group the decision variables are a source-side weight
//! `w_S[i]` and a target-side weight `w_T[i]` for every bin `i`. The solver
//! minimizes the squared gap between the Monte-Carlo source accuracy and the
//! importance-weighted source accuracy
//!
//! ```text
//! (alpha_mc - (1/|G_T| sum_i a_i / w_T[i]) * (1/|G_S| sum_i b_i w_S[i]))^2
//! ```
//!
//! subject to
//!
//! * `w_S[i], w_T[i]` inside the bin's interval,
//! * `(w_T[i] - w_S[i])^2 <= delta_tol` for every bin,
//! * `|E_S[w_S | G] - P_T(G)/P_S(G)| <= delta_prob`,
//! * `|E_T[1/w_T | G] - P_S(G)/P_T(G)| <= delta_prob`.
//!
//! The objective is convex in each block separately but not jointly, so the
//! solver alternates between the two blocks. Inequality constraints are
//! handled by an augmented Lagrangian and the box by projection.

use std::collections::BTreeMap;

use log::{debug, warn};
use rayon::prelude::*;

use crate::ci::IwIntervals;
use crate::error::{Error, Result};
use crate::types::GaeConfig;

/// Coupling constraint tolerance after the final repair step.
pub const COUPLING_TOL: f64 = 1e-9;
/// Probability constraints must hold within this slack for a solution to be
/// reported feasible.
pub const PROB_TOL: f64 = 1e-6;
/// A feasible point may exceed the midpoint residual by this much. Covers
/// rounding in `U V` when the midpoint residual is exactly zero but the
/// midpoint itself is infeasible.
pub const RESIDUAL_ROUNDOFF: f64 = 1e-15;

const MAX_OUTER_ITERS: usize = 500;
const MAX_SWEEPS: usize = 5000;
const BACKTRACK_STEPS: usize = 50;
const RHO_INIT: f64 = 10.0;
const RHO_MAX: f64 = 1e10;

/// Per-bin counts of one accuracy group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupBinCounts {
    /// Target samples of the group in each bin.
    pub target: Vec<usize>,
    /// Correctly predicted source samples of the group in each bin.
    pub correct: Vec<usize>,
    /// Source samples of the group in each bin.
    pub source: Vec<usize>,
    pub total_source: usize,
    pub total_target: usize,
}

impl GroupBinCounts {
    pub fn bins(&self) -> usize {
        self.target.len()
    }

    pub fn source_size(&self) -> usize {
        self.source.iter().sum()
    }

    pub fn target_size(&self) -> usize {
        self.target.iter().sum()
    }

    pub fn correct_size(&self) -> usize {
        self.correct.iter().sum()
    }

    /// Empirical `P(X_S in G)`.
    pub fn source_mass(&self) -> f64 {
        self.source_size() as f64 / self.total_source as f64
    }

    /// Empirical `P(X_T in G)`.
    pub fn target_mass(&self) -> f64 {
        self.target_size() as f64 / self.total_target as f64
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.source_size() == 0 {
            return Err(Error::EmptyGroup("source"));
        }
        if self.target_size() == 0 {
            return Err(Error::EmptyGroup("target"));
        }
        Ok(())
    }
}

/// Tallies [`GroupBinCounts`] for every group.
///
/// `*_groups` and `*_bins` are per-sample group and bin indices;
/// `source_correct` flags correct source predictions.
pub fn group_bin_counts(
    groups: usize,
    bins: usize,
    source_groups: &[usize],
    source_bins: &[usize],
    source_correct: &[bool],
    target_groups: &[usize],
    target_bins: &[usize],
) -> Vec<GroupBinCounts> {
    assert_eq!(source_groups.len(), source_bins.len());
    assert_eq!(source_groups.len(), source_correct.len());
    assert_eq!(target_groups.len(), target_bins.len());
    let empty = GroupBinCounts {
        target: vec![0; bins],
        correct: vec![0; bins],
        source: vec![0; bins],
        total_source: source_groups.len(),
        total_target: target_groups.len(),
    };
    let mut out = vec![empty; groups];
    for ((g, b), ok) in source_groups.iter().zip(source_bins).zip(source_correct) {
        out[*g].source[*b] += 1;
        if *ok {
            out[*g].correct[*b] += 1;
        }
    }
    for (g, b) in target_groups.iter().zip(target_bins) {
        out[*g].target[*b] += 1;
    }
    out
}

/// Fraction of correct source predictions in the group.
pub fn alpha_mc(counts: &GroupBinCounts) -> Result<f64> {
    let n = counts.source_size();
    if n == 0 {
        return Err(Error::EmptyGroup("source"));
    }
    Ok(counts.correct_size() as f64 / n as f64)
}

/// Importance-weighted source accuracy with separate source- and
/// target-side bin weights.
pub fn alpha_iw_source(counts: &GroupBinCounts, w_source: &[f64], w_target: &[f64]) -> Result<f64> {
    counts.check_nonempty()?;
    check_len(counts, w_source)?;
    check_len(counts, w_target)?;
    let inv_target: f64 = counts
        .target
        .iter()
        .zip(w_target)
        .map(|(a, w)| *a as f64 / w)
        .sum::<f64>()
        / counts.target_size() as f64;
    let weighted_correct: f64 = counts
        .correct
        .iter()
        .zip(w_source)
        .map(|(b, w)| *b as f64 * w)
        .sum::<f64>()
        / counts.source_size() as f64;
    Ok(inv_target * weighted_correct)
}

fn check_len(counts: &GroupBinCounts, w: &[f64]) -> Result<()> {
    if w.len() != counts.bins() {
        return Err(Error::LengthMismatch(w.len(), counts.bins()));
    }
    Ok(())
}

/// Target group accuracy estimate; `value` is clipped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetAccuracy {
    pub value: f64,
    pub raw: f64,
}

/// `(sum_i b_i w_S[i] / sum_i s_i) * P_S(G) / P_T(G)`.
pub fn alpha_target(counts: &GroupBinCounts, w_source: &[f64]) -> Result<TargetAccuracy> {
    counts.check_nonempty()?;
    check_len(counts, w_source)?;
    let weighted: f64 = counts
        .correct
        .iter()
        .zip(w_source)
        .map(|(b, w)| *b as f64 * w)
        .sum();
    let raw = weighted / counts.source_size() as f64 * counts.source_mass() / counts.target_mass();
    Ok(TargetAccuracy {
        value: raw.clamp(0.0, 1.0),
        raw,
    })
}

/// Result of one group solve.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSolution {
    pub w_source: Vec<f64>,
    pub w_target: Vec<f64>,
    /// Squared residual at the returned weights.
    pub eps_opt: f64,
    /// Squared residual at the interval midpoints.
    pub eps_midpoint: f64,
    /// The probability constraints hold at the returned weights.
    pub feasible: bool,
    pub temperature: f64,
    /// The interval midpoints were returned instead of a solver iterate.
    pub fallback: bool,
    pub iterations: usize,
}

impl GroupSolution {
    /// Smallest of the `2B` returned weights.
    pub fn min_weight(&self) -> f64 {
        self.w_source
            .iter()
            .chain(&self.w_target)
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Normalized problem data for one group.
struct Problem {
    bins: usize,
    /// `b_i / |G_S|`
    correct: Vec<f64>,
    /// `s_i / |G_S|`
    source: Vec<f64>,
    /// `a_i / |G_T|`
    target: Vec<f64>,
    alpha_mc: f64,
    /// `P_T(G) / P_S(G)`
    mass_ratio: f64,
    delta_tol: f64,
    delta_prob: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Problem {
    fn new(counts: &GroupBinCounts, intervals: &IwIntervals, cfg: &GaeConfig) -> Result<Self> {
        counts.check_nonempty()?;
        if intervals.len() != counts.bins() {
            return Err(Error::LengthMismatch(intervals.len(), counts.bins()));
        }
        let ns = counts.source_size() as f64;
        let nt = counts.target_size() as f64;
        let per_var = |f: fn(&crate::ci::BinInterval) -> f64| -> Vec<f64> {
            let v: Vec<f64> = intervals.bins.iter().map(f).collect();
            [v.clone(), v].concat()
        };
        Ok(Self {
            bins: counts.bins(),
            correct: counts.correct.iter().map(|b| *b as f64 / ns).collect(),
            source: counts.source.iter().map(|s| *s as f64 / ns).collect(),
            target: counts.target.iter().map(|a| *a as f64 / nt).collect(),
            alpha_mc: alpha_mc(counts)?,
            mass_ratio: counts.target_mass() / counts.source_mass(),
            delta_tol: cfg.delta_tol,
            delta_prob: cfg.delta_prob,
            lower: per_var(|b| b.lower),
            upper: per_var(|b| b.upper),
        })
    }

    fn num_constraints(&self) -> usize {
        self.bins + 4
    }

    /// `(U, V)` with `U = sum b_i w_S / |G_S|` and `V = sum a_i / w_T / |G_T|`.
    fn factors(&self, x: &[f64]) -> (f64, f64) {
        let (ws, wt) = x.split_at(self.bins);
        let u = self.correct.iter().zip(ws).map(|(c, w)| c * w).sum();
        let v = self.target.iter().zip(wt).map(|(c, w)| c / w).sum();
        (u, v)
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let (u, v) = self.factors(x);
        (self.alpha_mc - u * v).powi(2)
    }

    fn objective_grad(&self, x: &[f64], grad: &mut [f64]) {
        let b = self.bins;
        let (u, v) = self.factors(x);
        let h = self.alpha_mc - u * v;
        for i in 0..b {
            grad[i] = -2.0 * h * v * self.correct[i];
            grad[b + i] = 2.0 * h * u * self.target[i] / (x[b + i] * x[b + i]);
        }
    }

    fn source_mean(&self, x: &[f64]) -> f64 {
        self.source.iter().zip(&x[..self.bins]).map(|(c, w)| c * w).sum()
    }

    /// Constraint values in `c(x) <= 0` form.
    fn constraints(&self, x: &[f64], out: &mut [f64]) {
        let b = self.bins;
        for i in 0..b {
            out[i] = (x[b + i] - x[i]).powi(2) - self.delta_tol;
        }
        let es = self.source_mean(x);
        let (_, et) = self.factors(x);
        let inv_ratio = 1.0 / self.mass_ratio;
        out[b] = es - self.mass_ratio - self.delta_prob;
        out[b + 1] = self.mass_ratio - es - self.delta_prob;
        out[b + 2] = et - inv_ratio - self.delta_prob;
        out[b + 3] = inv_ratio - et - self.delta_prob;
    }

    /// Adds `scale_k * grad c_k(x)` for every constraint.
    fn add_constraint_grads(&self, x: &[f64], scale: &[f64], grad: &mut [f64]) {
        let b = self.bins;
        for i in 0..b {
            if scale[i] != 0.0 {
                let d = 2.0 * (x[b + i] - x[i]) * scale[i];
                grad[i] -= d;
                grad[b + i] += d;
            }
        }
        let s_coef = scale[b] - scale[b + 1];
        let t_coef = scale[b + 2] - scale[b + 3];
        for i in 0..b {
            grad[i] += s_coef * self.source[i];
            grad[b + i] -= t_coef * self.target[i] / (x[b + i] * x[b + i]);
        }
    }

    /// Largest violation of the probability constraints.
    fn prob_violation(&self, x: &[f64]) -> f64 {
        let mut c = vec![0.0; self.num_constraints()];
        self.constraints(x, &mut c);
        c[self.bins..].iter().copied().fold(0.0, f64::max)
    }

    fn max_violation(&self, x: &[f64]) -> f64 {
        let mut c = vec![0.0; self.num_constraints()];
        self.constraints(x, &mut c);
        c.into_iter().fold(0.0, f64::max)
    }

    fn project(&self, x: &mut [f64]) {
        for ((xi, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *xi = xi.clamp(*lo, *hi);
        }
    }

    /// Pulls each `(w_S[i], w_T[i])` pair toward its center until the
    /// coupling constraint holds. Both stay inside the shared box.
    fn repair_coupling(&self, x: &mut [f64]) {
        let b = self.bins;
        let half = 0.5 * self.delta_tol.sqrt();
        for i in 0..b {
            let gap = x[b + i] - x[i];
            if gap * gap > self.delta_tol {
                let center = 0.5 * (x[i] + x[b + i]);
                let sign = gap.signum();
                x[i] = center - sign * half;
                x[b + i] = center + sign * half;
                if (x[b + i] - x[i]).powi(2) > self.delta_tol {
                    x[b + i] = x[i] + sign * self.delta_tol.sqrt() * (1.0 - 1e-12);
                }
            }
        }
        self.project(x);
    }
}

/// Augmented Lagrangian state for one outer iteration.
struct Lagrangian<'a> {
    problem: &'a Problem,
    multipliers: Vec<f64>,
    rho: f64,
}

impl Lagrangian<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let mut c = vec![0.0; self.problem.num_constraints()];
        self.problem.constraints(x, &mut c);
        let penalty: f64 = c
            .iter()
            .zip(&self.multipliers)
            .map(|(ck, lk)| ((lk + self.rho * ck).max(0.0).powi(2) - lk * lk) / (2.0 * self.rho))
            .sum();
        self.problem.objective(x) + penalty
    }

    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        let mut c = vec![0.0; self.problem.num_constraints()];
        self.problem.constraints(x, &mut c);
        let scale: Vec<f64> = c
            .iter()
            .zip(&self.multipliers)
            .map(|(ck, lk)| (lk + self.rho * ck).max(0.0))
            .collect();
        self.problem.objective_grad(x, grad);
        self.problem.add_constraint_grads(x, &scale, grad);
    }

    /// One projected-gradient step on a block with a Barzilai–Borwein step
    /// size and Armijo backtracking. Returns the achieved decrease.
    fn step_block(&self, x: &mut [f64], block: &mut BlockState) -> f64 {
        let range = block.range.clone();
        let mut grad = vec![0.0; x.len()];
        let value = self.value(x);
        self.gradient(x, &mut grad);
        let g: Vec<f64> = grad[range.clone()].to_vec();
        let current: Vec<f64> = x[range.clone()].to_vec();
        if let Some((px, pg)) = &block.prev {
            let s: Vec<f64> = current.iter().zip(px).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g.iter().zip(pg).map(|(a, b)| a - b).collect();
            let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
            let ss: f64 = s.iter().map(|a| a * a).sum();
            if ss > 0.0 {
                block.step = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { (block.step * 2.0).min(1e10) };
            }
        }
        let mut step = block.step;
        for _ in 0..BACKTRACK_STEPS {
            let mut trial = x.to_vec();
            for (k, i) in range.clone().enumerate() {
                trial[i] = current[k] - step * g[k];
            }
            self.problem.project(&mut trial);
            if range.clone().all(|i| trial[i] == x[i]) {
                break;
            }
            let decrease: f64 = range.clone().enumerate().map(|(k, i)| g[k] * (trial[i] - current[k])).sum();
            let tv = self.value(&trial);
            if tv <= value + 1e-4 * decrease {
                x.copy_from_slice(&trial);
                block.step = step;
                block.prev = Some((current, g));
                return value - tv;
            }
            step *= 0.5;
        }
        block.prev = None;
        0.0
    }
}

/// Step-size memory of one variable block across sweeps.
struct BlockState {
    range: std::ops::Range<usize>,
    step: f64,
    prev: Option<(Vec<f64>, Vec<f64>)>,
}

impl BlockState {
    fn new(range: std::ops::Range<usize>) -> Self {
        Self { range, step: 1.0, prev: None }
    }
}

/// Solves the weight-selection problem for one group.
///
/// Guarantees, for the returned weights: every weight lies in its interval;
/// the coupling constraint holds within [`COUPLING_TOL`]; either the
/// probability constraints hold within [`PROB_TOL`] or `feasible` is false;
/// and `eps_opt <= eps_midpoint`, up to [`RESIDUAL_ROUNDOFF`] when the
/// midpoint is infeasible. When the solver cannot produce a feasible
/// point that is at least as good as the midpoints, the midpoints are
/// returned with `fallback = true`.
pub fn solve_group(
    counts: &GroupBinCounts,
    intervals: &IwIntervals,
    cfg: &GaeConfig,
    temperature: f64,
) -> Result<GroupSolution> {
    let problem = Problem::new(counts, intervals, cfg)?;
    let b = problem.bins;
    let mid = [intervals.midpoints(), intervals.midpoints()].concat();
    let eps_midpoint = problem.objective(&mid);
    let mid_feasible = problem.prob_violation(&mid) <= PROB_TOL;

    let mut best: Option<(Vec<f64>, f64)> = mid_feasible.then(|| (mid.clone(), eps_midpoint));
    let consider = |x: &[f64], best: &mut Option<(Vec<f64>, f64)>| {
        let mut cand = x.to_vec();
        problem.repair_coupling(&mut cand);
        if problem.prob_violation(&cand) > PROB_TOL {
            return;
        }
        let f = problem.objective(&cand);
        if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
            *best = Some((cand, f));
        }
    };

    let mut x = mid.clone();
    let mut al = Lagrangian {
        problem: &problem,
        multipliers: vec![0.0; problem.num_constraints()],
        rho: RHO_INIT,
    };
    let mut prev_violation = problem.max_violation(&x);
    let mut prev_objective = problem.objective(&x);
    let mut stalled = 0;
    let mut iterations = 0;
    let fixed = problem.lower.iter().zip(&problem.upper).all(|(lo, hi)| lo == hi);
    if !fixed {
        for outer in 0..MAX_OUTER_ITERS {
            iterations = outer + 1;
            let mut blocks = [BlockState::new(0..b), BlockState::new(b..2 * b)];
            for _ in 0..MAX_SWEEPS {
                let mut decrease = 0.0;
                for block in &mut blocks {
                    decrease += al.step_block(&mut x, block);
                }
                if decrease <= 1e-16 * (1.0 + al.value(&x).abs()) {
                    break;
                }
            }
            consider(&x, &mut best);

            let mut c = vec![0.0; problem.num_constraints()];
            problem.constraints(&x, &mut c);
            for (lk, ck) in al.multipliers.iter_mut().zip(&c) {
                *lk = (*lk + al.rho * ck).max(0.0);
            }
            let violation = c.iter().copied().fold(0.0, f64::max);
            let objective = problem.objective(&x);
            if violation <= 1e-12 && (prev_objective - objective).abs() < cfg.opt_tol {
                break;
            }
            if violation > 0.25 * prev_violation {
                if al.rho >= RHO_MAX {
                    stalled += 1;
                    if stalled >= 5 {
                        break;
                    }
                }
                al.rho = (al.rho * 10.0).min(RHO_MAX);
            }
            prev_violation = violation;
            prev_objective = objective;
        }
    }

    let solution = match best {
        Some((w, f)) if f <= eps_midpoint + RESIDUAL_ROUNDOFF => {
            let fallback = w == mid;
            GroupSolution {
                w_source: w[..b].to_vec(),
                w_target: w[b..].to_vec(),
                eps_opt: f,
                eps_midpoint,
                feasible: true,
                temperature,
                fallback,
                iterations,
            }
        }
        _ => {
            if !mid_feasible {
                debug!("group solve: no feasible point found, returning midpoints");
            }
            GroupSolution {
                w_source: mid[..b].to_vec(),
                w_target: mid[b..].to_vec(),
                eps_opt: eps_midpoint,
                eps_midpoint,
                feasible: mid_feasible,
                temperature,
                fallback: true,
                iterations,
            }
        }
    };
    Ok(solution)
}

/// Outcome for one group at one temperature.
#[derive(Clone, Debug, PartialEq)]
pub enum GroupOutcome {
    Solved {
        counts: GroupBinCounts,
        solution: GroupSolution,
    },
    /// Too few source or target samples; the counts are kept for reporting.
    Skipped { counts: GroupBinCounts },
}

impl GroupOutcome {
    pub fn counts(&self) -> &GroupBinCounts {
        match self {
            GroupOutcome::Solved { counts, .. } | GroupOutcome::Skipped { counts } => counts,
        }
    }

    pub fn solution(&self) -> Option<&GroupSolution> {
        match self {
            GroupOutcome::Solved { solution, .. } => Some(solution),
            GroupOutcome::Skipped { .. } => None,
        }
    }
}

/// All groups solved at one temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureResult {
    pub temperature: f64,
    /// Target group index per target sample.
    pub target_groups: Vec<usize>,
    pub outcomes: Vec<GroupOutcome>,
}

impl TemperatureResult {
    pub fn total_eps(&self) -> f64 {
        self.outcomes
            .iter()
            .filter_map(GroupOutcome::solution)
            .map(|s| s.eps_opt)
            .sum()
    }

    pub fn solved(&self) -> usize {
        self.outcomes.iter().filter(|o| o.solution().is_some()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureSearch {
    pub best: usize,
    /// One entry per distinct grid temperature, ascending.
    pub results: Vec<TemperatureResult>,
}

impl TemperatureSearch {
    pub fn best_temperature(&self) -> f64 {
        self.results[self.best].temperature
    }

    pub fn best_result(&self) -> &TemperatureResult {
        &self.results[self.best]
    }

    /// Solutions of the selected temperature keyed by group index.
    pub fn solutions(&self) -> BTreeMap<usize, &GroupSolution> {
        self.best_result()
            .outcomes
            .iter()
            .enumerate()
            .filter_map(|(g, o)| o.solution().map(|s| (g, s)))
            .collect()
    }
}

/// Inputs of the temperature search that do not depend on the temperature.
pub struct SearchInput<'a> {
    pub source_groups: &'a [usize],
    pub source_bins: &'a [usize],
    pub source_correct: &'a [bool],
    /// Target groups are recomputed from these logits for each temperature.
    pub target_logits: &'a [Vec<f64>],
    pub target_bins: &'a [usize],
}

/// Solves every eligible group for each temperature in the grid and picks
/// the temperature with the smallest summed squared residual.
///
/// Totals within `cfg.opt_tol` of the minimum count as ties; ties go to the
/// temperature closest to 1, then to the smaller temperature.
pub fn solve_all_groups(
    input: &SearchInput<'_>,
    intervals: &IwIntervals,
    cfg: &GaeConfig,
) -> Result<TemperatureSearch> {
    let temps = cfg.temperatures();
    let bins = intervals.len();

    let per_t: Vec<(f64, Vec<usize>, Vec<GroupBinCounts>)> = temps
        .iter()
        .map(|&t| {
            let target_groups: Vec<usize> = input
                .target_logits
                .iter()
                .map(|l| crate::grouping::group_of(crate::types::softmax_max(l, t).0, cfg.groups))
                .collect();
            let counts = group_bin_counts(
                cfg.groups,
                bins,
                input.source_groups,
                input.source_bins,
                input.source_correct,
                &target_groups,
                input.target_bins,
            );
            (t, target_groups, counts)
        })
        .collect();

    // Flatten (temperature, group) pairs so the parallel map has enough work;
    // collect preserves order, which keeps results independent of threads.
    let jobs: Vec<(usize, usize)> = (0..per_t.len())
        .flat_map(|ti| (0..cfg.groups).map(move |g| (ti, g)))
        .collect();
    let outcomes: Vec<Result<GroupOutcome>> = jobs
        .par_iter()
        .map(|&(ti, g)| {
            let (t, _, counts) = &per_t[ti];
            let c = &counts[g];
            if c.source_size() < cfg.min_group_size.max(1) || c.target_size() < cfg.min_group_size.max(1) {
                return Ok(GroupOutcome::Skipped { counts: c.clone() });
            }
            let solution = solve_group(c, intervals, cfg, *t)?;
            Ok(GroupOutcome::Solved {
                counts: c.clone(),
                solution,
            })
        })
        .collect();
    let mut outcomes = outcomes.into_iter();

    let mut results = Vec::with_capacity(per_t.len());
    for (t, target_groups, _) in per_t {
        let group_outcomes = outcomes.by_ref().take(cfg.groups).collect::<Result<Vec<_>>>()?;
        results.push(TemperatureResult {
            temperature: t,
            target_groups,
            outcomes: group_outcomes,
        });
    }

    let eligible: Vec<usize> = (0..results.len()).filter(|&i| results[i].solved() > 0).collect();
    if eligible.is_empty() {
        return Err(Error::NoEligibleGroups);
    }
    let min_total = eligible
        .iter()
        .map(|&i| results[i].total_eps())
        .fold(f64::INFINITY, f64::min);
    let mut order = eligible.clone();
    order.sort_by(|&a, &b| {
        let ta = results[a].temperature;
        let tb = results[b].temperature;
        (ta - 1.0).abs().total_cmp(&(tb - 1.0).abs()).then(ta.total_cmp(&tb))
    });
    let best = order
        .into_iter()
        .find(|&i| results[i].total_eps() <= min_total + cfg.opt_tol)
        .expect("minimum is attained by an eligible temperature");
    for r in &results {
        let skipped = r.outcomes.len() - r.solved();
        if skipped > 0 && r.temperature == results[best].temperature {
            warn!(
                "temperature {}: {skipped} of {} groups skipped (too few samples)",
                r.temperature,
                r.outcomes.len()
            );
        }
    }
    Ok(TemperatureSearch { best, results })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ci::BinInterval;
    use approx::assert_abs_diff_eq;

    fn counts(target: &[usize], correct: &[usize], source: &[usize], ns: usize, nt: usize) -> GroupBinCounts {
        GroupBinCounts {
            target: target.to_vec(),
            correct: correct.to_vec(),
            source: source.to_vec(),
            total_source: ns,
            total_target: nt,
        }
    }

    fn intervals(bounds: &[(f64, f64)]) -> IwIntervals {
        IwIntervals {
            bins: bounds
                .iter()
                .map(|&(lower, upper)| BinInterval {
                    lower,
                    upper,
                    n_source: 0,
                    n_target: 0,
                    fallback: false,
                })
                .collect(),
            delta_bar: 0.05,
            smoothness: 0.001,
        }
    }

    #[test]
    fn monte_carlo_accuracy() {
        assert_eq!(alpha_mc(&counts(&[1], &[2], &[4], 4, 1)).unwrap(), 0.5);
        assert_eq!(alpha_mc(&counts(&[1], &[4], &[4], 4, 1)).unwrap(), 1.0);
        assert_abs_diff_eq!(alpha_mc(&counts(&[1, 1], &[1, 2], &[2, 6], 8, 2)).unwrap(), 3.0 / 8.0);
        assert!(matches!(alpha_mc(&counts(&[1], &[0], &[0], 4, 1)), Err(Error::EmptyGroup("source"))));
    }

    #[test]
    fn weighted_source_accuracy() {
        let c = counts(&[2], &[2], &[4], 4, 2);
        assert_abs_diff_eq!(alpha_iw_source(&c, &[2.0], &[2.0]).unwrap(), 0.5);

        let c = counts(&[3, 5], &[2, 3], &[4, 6], 10, 8);
        let mc = alpha_mc(&c).unwrap();
        assert_abs_diff_eq!(alpha_iw_source(&c, &[1.0, 1.0], &[1.0, 1.0]).unwrap(), mc, epsilon = 1e-15);

        let ws = [0.7, 1.9];
        let wt = [1.3, 0.4];
        let base = alpha_iw_source(&c, &ws, &wt).unwrap();
        let scaled = alpha_iw_source(&c, &ws.map(|w| w * 3.5), &wt.map(|w| w * 3.5)).unwrap();
        assert_abs_diff_eq!(base, scaled, epsilon = 1e-14);

        let empty_target = counts(&[0, 0], &[2, 3], &[4, 6], 10, 8);
        assert!(matches!(alpha_iw_source(&empty_target, &ws, &wt), Err(Error::EmptyGroup("target"))));
    }

    #[test]
    fn target_accuracy() {
        // P_S = 4/8 = 0.5, P_T = 2/8 = 0.25.
        let c = counts(&[2], &[2], &[4], 8, 8);
        let a = alpha_target(&c, &[0.5]).unwrap();
        assert_abs_diff_eq!(a.value, 0.5);

        // No shift: masses equal and unit weights give the source accuracy.
        let c = counts(&[3, 5], &[2, 3], &[3, 5], 20, 20);
        assert_abs_diff_eq!(alpha_target(&c, &[1.0, 1.0]).unwrap().value, alpha_mc(&c).unwrap());

        // Clipping branch: all correct, w = 2, P_S / P_T = 2 gives raw 4.
        let c = counts(&[2], &[4], &[4], 8, 8);
        let a = alpha_target(&c, &[2.0]).unwrap();
        assert_abs_diff_eq!(a.raw, 4.0);
        assert_eq!(a.value, 1.0);
    }

    #[test]
    fn single_bin_midpoint_is_optimal() {
        // Mass ratio 1.5 so the midpoint satisfies both probability constraints.
        let c = counts(&[30], &[21], &[40], 100, 50);
        let sol = solve_group(&c, &intervals(&[(0.5, 2.5)]), &GaeConfig::default(), 1.0).unwrap();
        assert!(sol.feasible && sol.fallback);
        assert_eq!(sol.w_source, vec![1.5]);
        assert_eq!(sol.w_target, vec![1.5]);
        assert!(sol.eps_opt <= 1e-30);
    }

    #[test]
    fn singleton_intervals_are_returned_verbatim() {
        let c = counts(&[10, 20], &[5, 12], &[10, 15], 50, 50);
        let iv = intervals(&[(0.8, 0.8), (1.7, 1.7)]);
        let sol = solve_group(&c, &iv, &GaeConfig::default(), 1.0).unwrap();
        assert_eq!(sol.w_source, vec![0.8, 1.7]);
        assert_eq!(sol.w_target, vec![0.8, 1.7]);
        assert_eq!(sol.eps_opt, sol.eps_midpoint);
    }

    #[test]
    fn interior_root_is_found() {
        // alpha_mc = 0.5 and, with w_S = w_T = w, U V = 0.25 (1 + w1 / w2):
        // the residual vanishes on w1 = w2 but not at the midpoints (1, 3).
        let c = counts(&[10, 10], &[10, 0], &[10, 10], 20, 20);
        let iv = intervals(&[(0.5, 1.5), (1.0, 5.0)]);
        let cfg = GaeConfig::default();
        let sol = solve_group(&c, &iv, &cfg, 1.0).unwrap();
        assert!(sol.eps_midpoint > 1e-3);
        assert!(sol.eps_opt <= 1e-8, "eps {}", sol.eps_opt);
        assert!(sol.feasible);
        assert!(!sol.fallback);
    }

    #[test]
    fn solution_respects_contract() {
        let c = counts(&[12, 30, 9], &[8, 20, 2], &[20, 25, 4], 80, 60);
        let iv = intervals(&[(0.4, 1.2), (0.9, 2.0), (1.5, 4.0)]);
        let cfg = GaeConfig::default();
        let sol = solve_group(&c, &iv, &cfg, 1.0).unwrap();
        for (i, b) in iv.bins.iter().enumerate() {
            assert!(b.contains(sol.w_source[i]) && b.contains(sol.w_target[i]));
            assert!((sol.w_target[i] - sol.w_source[i]).powi(2) <= cfg.delta_tol + COUPLING_TOL);
        }
        assert!(sol.eps_opt <= sol.eps_midpoint);
        let recomputed = (alpha_mc(&c).unwrap() - alpha_iw_source(&c, &sol.w_source, &sol.w_target).unwrap()).powi(2);
        assert_abs_diff_eq!(recomputed, sol.eps_opt, epsilon = 1e-15);
    }

    #[test]
    fn solve_is_deterministic() {
        let c = counts(&[12, 30, 9], &[8, 20, 2], &[20, 25, 4], 80, 60);
        let iv = intervals(&[(0.4, 1.2), (0.9, 2.0), (1.5, 4.0)]);
        let a = solve_group(&c, &iv, &GaeConfig::default(), 1.0).unwrap();
        let b = solve_group(&c, &iv, &GaeConfig::default(), 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_group_is_an_error() {
        let c = counts(&[0, 0], &[1, 1], &[2, 2], 4, 4);
        let iv = intervals(&[(0.5, 1.5), (0.5, 1.5)]);
        assert!(matches!(solve_group(&c, &iv, &GaeConfig::default(), 1.0), Err(Error::EmptyGroup(_))));
    }

    #[test]
    fn infeasible_probability_constraints_fall_back() {
        // Group holds 10% of source but 90% of target mass: the required
        // source-side mean weight of 9 is far outside the [0.5, 1.5] box.
        let c = counts(&[90], &[5], &[10], 100, 100);
        let iv = intervals(&[(0.5, 1.5)]);
        let sol = solve_group(&c, &iv, &GaeConfig::default(), 1.0).unwrap();
        assert!(!sol.feasible);
        assert!(sol.fallback);
        assert_eq!(sol.w_source, vec![1.0]);
    }

    #[test]
    fn bin_counts_tally_groups() {
        let c = group_bin_counts(2, 3, &[0, 0, 1, 1], &[0, 2, 2, 1], &[true, false, true, true], &[1, 1, 0], &[0, 0, 2]);
        assert_eq!(c[0].source, vec![1, 0, 1]);
        assert_eq!(c[0].correct, vec![1, 0, 0]);
        assert_eq!(c[0].target, vec![0, 0, 1]);
        assert_eq!(c[1].source, vec![0, 1, 1]);
        assert_eq!(c[1].target, vec![2, 0, 0]);
        assert!(c.iter().all(|g| g.total_source == 4 && g.total_target == 3));
    }
}
