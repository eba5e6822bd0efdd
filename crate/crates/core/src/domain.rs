//! Discriminative density-ratio scoring and the importance-weight bins built
//! on top of it.
//!
//! A logistic regression separates source (label 0) from target (label 1)
//! samples. The fitted odds times the domain prior ratio estimate
//! `p_T(x) / p_S(x)`; the pipeline only uses that score to order samples into
//! bins, so any monotone rescaling yields the same partition.

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::Dataset;

/// Linear term clamp applied before exponentiation.
pub const LINEAR_CLAMP: f64 = 30.0;

/// Gradient-norm threshold for the logistic fit.
pub const FIT_GRADIENT_TOL: f64 = 1e-6;

const MAX_LBFGS_ITERS: usize = 2000;
const LBFGS_MEMORY: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// `P(d=0) / P(d=1)` over the samples the regression was fitted on.
    pub class_prior_ratio: f64,
    pub l2_penalty: f64,
}

impl DomainClassifier {
    pub fn linear_term(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    /// Estimated importance weight: prior ratio times target odds.
    pub fn iw_score(&self, x: &[f64]) -> f64 {
        let z = self.linear_term(x).clamp(-LINEAR_CLAMP, LINEAR_CLAMP);
        self.class_prior_ratio * z.exp()
    }

    /// Probability that `x` comes from the target domain.
    pub fn target_probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.linear_term(x))
    }

    pub fn score_dataset(&self, data: &Dataset) -> Result<Vec<f64>> {
        data.records()
            .iter()
            .map(|r| {
                r.features
                    .as_deref()
                    .map(|x| self.iw_score(x))
                    .ok_or(Error::MissingFeatures)
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Fits the domain classifier on features of both datasets.
///
/// The smaller domain is upsampled with replacement (seeded) until both
/// domains contribute the same number of rows, then the L2-regularized
/// logistic loss is minimized with L-BFGS until the gradient norm drops
/// below [`FIT_GRADIENT_TOL`]. The bias is not penalized.
pub fn fit_domain_classifier(
    source: &Dataset,
    target: &Dataset,
    l2_penalty: f64,
    seed: u64,
) -> Result<DomainClassifier> {
    let carries = |d: &Dataset| d.records().iter().all(|r| r.features.is_some());
    if !carries(source) || !carries(target) {
        return Err(Error::MissingFeatures);
    }
    if !source.has_features() || !target.has_features() {
        return Err(Error::Degenerate);
    }
    if source.feature_dim() != target.feature_dim() {
        return Err(Error::Invalid(format!(
            "feature dimensions differ: source {} vs target {}",
            source.feature_dim(),
            target.feature_dim()
        )));
    }
    let feats = |d: &Dataset| -> Vec<Vec<f64>> {
        d.records()
            .iter()
            .map(|r| r.features.clone().unwrap_or_default())
            .collect()
    };
    let mut xs_source = feats(source);
    let mut xs_target = feats(target);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let upsample = |xs: &mut Vec<Vec<f64>>, to: usize, rng: &mut ChaCha8Rng| {
        let n = xs.len();
        for _ in n..to {
            let i = rng.random_range(0..n);
            let row = xs[i].clone();
            xs.push(row);
        }
    };
    let n = xs_source.len().max(xs_target.len());
    upsample(&mut xs_source, n, &mut rng);
    upsample(&mut xs_target, n, &mut rng);

    let rows: Vec<(&[f64], f64)> = xs_source
        .iter()
        .map(|x| (x.as_slice(), 0.0))
        .chain(xs_target.iter().map(|x| (x.as_slice(), 1.0)))
        .collect();
    let (weights, bias) = fit_logistic(&rows, source.feature_dim(), l2_penalty)?;
    Ok(DomainClassifier {
        weights,
        bias,
        class_prior_ratio: xs_source.len() as f64 / xs_target.len() as f64,
        l2_penalty,
    })
}

/// Mean logistic loss plus `l2 / (2n) * |w|^2`, i.e. the usual
/// `sum loss + l2/2 |w|^2` objective divided by `n`.
struct LogisticObjective<'a> {
    rows: &'a [(&'a [f64], f64)],
    dim: usize,
    l2: f64,
    /// Diagonal preconditioner: parameters are optimized as `theta * scale`.
    scale: Vec<f64>,
}

impl LogisticObjective<'_> {
    fn n(&self) -> f64 {
        self.rows.len() as f64
    }

    /// Value and gradient with respect to the original parameters
    /// `theta = (w_0..w_{d-1}, b)`.
    fn eval(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let d = self.dim;
        let mut grad = vec![0.0; d + 1];
        let mut loss = 0.0;
        for (x, y) in self.rows {
            let z = dot(&theta[..d], x) + theta[d];
            loss += softplus(z) - y * z;
            let r = sigmoid(z) - y;
            for (g, xi) in grad[..d].iter_mut().zip(x.iter()) {
                *g += r * xi;
            }
            grad[d] += r;
        }
        let n = self.n();
        let pen = self.l2 / n;
        loss /= n;
        loss += 0.5 * pen * theta[..d].iter().map(|w| w * w).sum::<f64>();
        for (j, g) in grad.iter_mut().enumerate() {
            *g /= n;
            if j < d {
                *g += pen * theta[j];
            }
        }
        (loss, grad)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn fit_logistic(rows: &[(&[f64], f64)], dim: usize, l2: f64) -> Result<(Vec<f64>, f64)> {
    if dim == 0 {
        return Err(Error::Degenerate);
    }
    let n = rows.len() as f64;
    // Diagonal of the Hessian at theta = 0 (where every sigmoid is 1/2).
    let mut diag = vec![0.0; dim + 1];
    for (x, _) in rows {
        for (dj, xj) in diag.iter_mut().zip(x.iter()) {
            *dj += 0.25 * xj * xj;
        }
    }
    for dj in diag[..dim].iter_mut() {
        *dj = *dj / n + l2 / n;
    }
    diag[dim] = 0.25;
    let scale: Vec<f64> = diag.iter().map(|d| d.max(1e-12).sqrt()).collect();
    let obj = LogisticObjective {
        rows,
        dim,
        l2,
        scale,
    };

    // Optimize u = theta * scale so the problem is roughly unit-conditioned.
    let to_theta = |u: &[f64]| -> Vec<f64> { u.iter().zip(&obj.scale).map(|(a, s)| a / s).collect() };
    let eval_u = |u: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
        let (f, g) = obj.eval(&to_theta(u));
        let gu = g.iter().zip(&obj.scale).map(|(a, s)| a / s).collect();
        (f, gu, g)
    };

    let mut u = vec![0.0; dim + 1];
    let (mut f, mut g, mut g_theta) = eval_u(&u);
    let mut history: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::with_capacity(LBFGS_MEMORY);
    let mut iters = 0;
    while norm(&g_theta) > FIT_GRADIENT_TOL && iters < MAX_LBFGS_ITERS {
        iters += 1;
        let mut dir = lbfgs_direction(&g, &history);
        let mut slope = dot(&dir, &g);
        if slope >= 0.0 {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = u.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let (ft, gt, gtt) = eval_u(&trial);
            if ft <= f + 1e-4 * step * slope {
                accepted = Some((trial, ft, gt, gtt));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, ft, gt, gtt)) = accepted else {
            debug!("logistic fit: line search stalled after {iters} iterations");
            break;
        };
        let s: Vec<f64> = trial.iter().zip(&u).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-16 {
            if history.len() == LBFGS_MEMORY {
                history.remove(0);
            }
            history.push((s, y, 1.0 / sy));
        }
        let improvement = f - ft;
        u = trial;
        f = ft;
        g = gt;
        g_theta = gtt;
        if improvement.abs() < 1e-16 * f.abs().max(1.0) && norm(&g_theta) <= 10.0 * FIT_GRADIENT_TOL {
            break;
        }
    }
    let gn = norm(&g_theta);
    if gn > FIT_GRADIENT_TOL {
        warn!("logistic fit stopped at gradient norm {gn:.3e} after {iters} iterations");
    } else {
        debug!("logistic fit converged in {iters} iterations (|g| = {gn:.3e})");
    }
    let theta = to_theta(&u);
    Ok((theta[..dim].to_vec(), theta[dim]))
}

/// Two-loop recursion.
fn lbfgs_direction(g: &[f64], history: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.last() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

/// Partition of the importance-weight score axis into contiguous bins.
///
/// A score belongs to bin `i` when exactly `i` edges are `<=` it.
#[derive(Clone, Debug, PartialEq)]
pub struct BinPartition {
    edges: Vec<f64>,
    requested: usize,
}

impl BinPartition {
    pub fn from_edges(edges: Vec<f64>, requested: usize) -> Result<Self> {
        if edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::Invalid("bin edges must be finite and strictly increasing".into()));
        }
        Ok(Self { edges, requested })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn num_bins(&self) -> usize {
        self.edges.len() + 1
    }

    /// Number of bins that was asked for.
    pub fn requested(&self) -> usize {
        self.requested
    }

    /// Fewer bins than requested because of tied scores.
    pub fn is_degenerate(&self) -> bool {
        self.num_bins() < self.requested
    }

    pub fn bin_of(&self, score: f64) -> usize {
        self.edges.partition_point(|e| *e <= score)
    }

    pub fn assign(&self, scores: &[f64]) -> Vec<usize> {
        scores.iter().map(|s| self.bin_of(*s)).collect()
    }
}

/// Quantile bins over the pooled source and target scores.
///
/// Each edge sits halfway between two consecutive distinct pooled scores, so
/// every bin holds at least one pooled sample. With tied scores fewer than
/// `bins` bins may result; the partition reports this through
/// [`BinPartition::is_degenerate`].
pub fn build_bins(scores_source: &[f64], scores_target: &[f64], bins: usize) -> Result<BinPartition> {
    if bins == 0 {
        return Err(Error::Invalid("bin count must be positive".into()));
    }
    let mut pooled: Vec<f64> = scores_source.iter().chain(scores_target).copied().collect();
    if pooled.is_empty() {
        return Err(Error::Invalid("no scores to bin".into()));
    }
    if let Some(bad) = pooled.iter().find(|s| !s.is_finite()) {
        return Err(Error::Invalid(format!("non-finite score {bad}")));
    }
    pooled.sort_by(f64::total_cmp);
    let n = pooled.len();

    let mut edges: Vec<f64> = Vec::with_capacity(bins.saturating_sub(1));
    for j in 1..bins {
        let k = j * n / bins;
        if k == 0 || k >= n {
            continue;
        }
        // First index above the value just below the cut.
        let below = pooled[k - 1];
        let upper = pooled[k..].partition_point(|v| *v <= below) + k;
        // The tie run reaches the top: cut below it instead.
        let upper = if upper < n { upper } else { pooled.partition_point(|v| *v < below) };
        if upper == 0 {
            continue;
        }
        let (lo, hi) = (pooled[upper - 1], pooled[upper]);
        let mut edge = lo + (hi - lo) / 2.0;
        if edge <= lo {
            edge = hi;
        }
        edges.push(edge);
    }
    edges.dedup();
    let partition = BinPartition::from_edges(edges, bins)?;
    if partition.is_degenerate() {
        warn!(
            "degenerate bins: requested {bins}, built {} because of tied scores",
            partition.num_bins()
        );
    }
    Ok(partition)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Domain, PredictionRecord, Split};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn classifier(ratio: f64, bias: f64) -> DomainClassifier {
        DomainClassifier {
            weights: vec![0.0],
            bias,
            class_prior_ratio: ratio,
            l2_penalty: 1.0,
        }
    }

    #[test]
    fn score_examples() {
        assert_abs_diff_eq!(classifier(1.0, 0.0).iw_score(&[3.0]), 1.0);
        assert_abs_diff_eq!(classifier(1.0, 2f64.ln()).iw_score(&[3.0]), 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(classifier(0.5, 0.0).iw_score(&[3.0]), 0.5);
    }

    #[test]
    fn score_is_clamped() {
        let c = DomainClassifier {
            weights: vec![1.0],
            bias: 0.0,
            class_prior_ratio: 1.0,
            l2_penalty: 0.0,
        };
        assert_eq!(c.iw_score(&[1e6]), LINEAR_CLAMP.exp());
        assert_eq!(c.iw_score(&[-1e6]), (-LINEAR_CLAMP).exp());
        assert!(c.iw_score(&[f64::MAX]).is_finite());
    }

    fn dataset(domain: Domain, xs: &[Vec<f64>]) -> Dataset {
        let recs = xs
            .iter()
            .enumerate()
            .map(|(i, x)| PredictionRecord {
                sample_id: format!("{}-{i}", domain.as_str()),
                domain,
                split: Split::Validation,
                label: None,
                logits: vec![0.0, 1.0],
                features: Some(x.clone()),
                iw_score: None,
            })
            .collect();
        Dataset::new(recs).unwrap()
    }

    fn gaussian(mean: f64, sd: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(mean, sd).unwrap();
        (0..n).map(|_| vec![normal.sample(&mut rng)]).collect()
    }

    #[test]
    fn indistinguishable_domains_give_unit_weights() {
        let xs = gaussian(0.0, 1.0, 300, 1);
        let clf = fit_domain_classifier(&dataset(Domain::Source, &xs), &dataset(Domain::Target, &xs), 1.0, 7).unwrap();
        for x in &xs {
            assert_abs_diff_eq!(clf.iw_score(x), 1.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn unequal_sizes_still_estimate_the_density_ratio() {
        // Same distribution, 3x more source rows: the true ratio is 1.
        let xs = gaussian(0.0, 1.0, 300, 2);
        let source = dataset(Domain::Source, &[xs.clone(), xs.clone(), xs.clone()].concat());
        let clf = fit_domain_classifier(&source, &dataset(Domain::Target, &xs), 1.0, 3).unwrap();
        assert_abs_diff_eq!(clf.class_prior_ratio, 1.0);
        // Random duplication adds noise to the fit, so only the average is
        // held tightly.
        let scores: Vec<f64> = xs.iter().map(|x| clf.iw_score(x)).collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert_abs_diff_eq!(mean, 1.0, epsilon = 0.02);
        assert!(scores.iter().all(|s| (s - 1.0).abs() < 0.2));
    }

    #[test]
    fn separable_domains_are_separated() {
        let s = gaussian(-5.0, 0.1, 500, 11);
        let t = gaussian(5.0, 0.1, 500, 12);
        let clf = fit_domain_classifier(&dataset(Domain::Source, &s), &dataset(Domain::Target, &t), 1.0, 0).unwrap();
        let hs = gaussian(-5.0, 0.1, 500, 13);
        let ht = gaussian(5.0, 0.1, 500, 14);
        let correct = hs.iter().filter(|x| clf.target_probability(x) < 0.5).count()
            + ht.iter().filter(|x| clf.target_probability(x) > 0.5).count();
        assert!(correct as f64 / 1000.0 > 0.99, "accuracy {}", correct as f64 / 1000.0);
    }

    #[test]
    fn infinite_regularization_gives_prior_ratio() {
        let s = gaussian(-1.0, 1.0, 200, 21);
        let t = gaussian(1.0, 1.0, 200, 22);
        let clf = fit_domain_classifier(&dataset(Domain::Source, &s), &dataset(Domain::Target, &t), 1e12, 0).unwrap();
        assert!(clf.weights[0].abs() < 1e-6, "w = {}", clf.weights[0]);
        assert_abs_diff_eq!(clf.iw_score(&[0.7]), clf.class_prior_ratio, epsilon = 1e-5);
    }

    #[test]
    fn gaussian_shift_recovers_log_ratio_slope() {
        // N(0,1) vs N(1,1): log ratio is x - 1/2.
        let s = gaussian(0.0, 1.0, 4000, 31);
        let t = gaussian(1.0, 1.0, 4000, 32);
        let clf = fit_domain_classifier(&dataset(Domain::Source, &s), &dataset(Domain::Target, &t), 1.0, 0).unwrap();
        assert_abs_diff_eq!(clf.weights[0], 1.0, epsilon = 0.1);
        assert_abs_diff_eq!(clf.bias, -0.5, epsilon = 0.1);
    }

    #[test]
    fn fit_requires_features() {
        let plain = |domain| {
            Dataset::new(vec![PredictionRecord {
                sample_id: "a".into(),
                domain,
                split: Split::Test,
                label: None,
                logits: vec![0.0, 1.0],
                features: None,
                iw_score: None,
            }])
            .unwrap()
        };
        let s = plain(Domain::Source);
        let t = plain(Domain::Target);
        assert!(matches!(fit_domain_classifier(&s, &t, 1.0, 0), Err(Error::MissingFeatures)));

        let empty = |domain| {
            Dataset::new(vec![PredictionRecord {
                sample_id: "a".into(),
                domain,
                split: Split::Test,
                label: None,
                logits: vec![0.0, 1.0],
                features: Some(vec![]),
                iw_score: None,
            }])
            .unwrap()
        };
        assert!(matches!(
            fit_domain_classifier(&empty(Domain::Source), &empty(Domain::Target), 1.0, 0),
            Err(Error::Degenerate)
        ));
    }

    #[test]
    fn fit_is_deterministic() {
        let s = gaussian(0.0, 1.0, 120, 41);
        let t = gaussian(0.5, 1.0, 300, 42);
        let a = fit_domain_classifier(&dataset(Domain::Source, &s), &dataset(Domain::Target, &t), 1.0, 9).unwrap();
        let b = fit_domain_classifier(&dataset(Domain::Source, &s), &dataset(Domain::Target, &t), 1.0, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bins_split_at_the_median() {
        let p = build_bins(&[1.0, 2.0], &[3.0, 4.0], 2).unwrap();
        assert_eq!(p.edges(), &[2.5]);
        assert_eq!(p.assign(&[1.0, 2.0, 3.0, 4.0]), vec![0, 0, 1, 1]);
    }

    #[test]
    fn constant_scores_collapse_to_one_bin() {
        let p = build_bins(&[2.0; 30], &[2.0; 30], 10).unwrap();
        assert_eq!(p.num_bins(), 1);
        assert!(p.is_degenerate());
    }

    #[test]
    fn hundred_scores_make_ten_equal_bins() {
        let s: Vec<f64> = (1..=50).map(f64::from).collect();
        let t: Vec<f64> = (51..=100).map(f64::from).collect();
        let p = build_bins(&s, &t, 10).unwrap();
        assert_eq!(p.num_bins(), 10);
        let mut counts = [0usize; 10];
        for b in p.assign(&[s, t].concat()) {
            counts[b] += 1;
        }
        assert_eq!(counts, [10; 10]);
    }

    #[test]
    fn ties_straddling_a_cut_move_the_edge() {
        let p = build_bins(&[1.0, 1.0, 1.0], &[2.0], 2).unwrap();
        assert_eq!(p.edges(), &[1.5]);
        let p = build_bins(&[1.0, 2.0, 2.0, 2.0], &[], 2).unwrap();
        assert_eq!(p.edges(), &[1.5]);
    }

    proptest! {
        #[test]
        fn bins_partition_pooled_scores(
            s in prop::collection::vec(0.0f64..10.0, 1..80),
            t in prop::collection::vec(prop_oneof![0.0f64..10.0, Just(3.0)], 0..80),
            bins in 1usize..15,
        ) {
            let p = build_bins(&s, &t, bins).unwrap();
            prop_assert!(p.num_bins() <= bins);
            let mut counts = vec![0usize; p.num_bins()];
            for b in p.assign(&[s.clone(), t.clone()].concat()) {
                prop_assert!(b < p.num_bins());
                counts[b] += 1;
            }
            prop_assert!(counts.iter().all(|c| *c >= 1));
            prop_assert_eq!(counts.iter().sum::<usize>(), s.len() + t.len());
        }

        #[test]
        fn score_is_monotone_in_linear_term(a in -40.0f64..40.0, b in -40.0f64..40.0) {
            let c = DomainClassifier { weights: vec![1.0], bias: 0.0, class_prior_ratio: 1.3, l2_penalty: 1.0 };
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(c.iw_score(&[lo]) <= c.iw_score(&[hi]));
            if hi - lo > 1e-9 && hi.abs() < LINEAR_CLAMP && lo.abs() < LINEAR_CLAMP {
                prop_assert!(c.iw_score(&[lo]) < c.iw_score(&[hi]));
            }
        }
    }
}
