//! Clopper–Pearson intervals for bin probabilities and the importance-weight
//! intervals derived from them.

use log::warn;
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::types::GaeConfig;

const BISECTION_TOL: f64 = 1e-10;
const BISECTION_MAX_ITERS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinomialCI {
    pub lower: f64,
    pub upper: f64,
}

/// `P(X <= k)` for `X ~ Binom(m, theta)`.
pub fn binomial_cdf(k: usize, m: usize, theta: f64) -> f64 {
    if k >= m {
        return 1.0;
    }
    if theta <= 0.0 {
        return 1.0;
    }
    if theta >= 1.0 {
        return 0.0;
    }
    beta_reg((m - k) as f64, k as f64 + 1.0, 1.0 - theta)
}

/// `P(X >= k)` for `X ~ Binom(m, theta)`.
fn binomial_upper_tail(k: usize, m: usize, theta: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    1.0 - binomial_cdf(k - 1, m, theta)
}

/// Smallest `theta` in `[0, 1]` where the decreasing predicate flips to true,
/// found by bisection.
fn bisect(mut lo: f64, mut hi: f64, accept: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..BISECTION_MAX_ITERS {
        if hi - lo <= BISECTION_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if accept(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact binomial interval with level `delta` on each side.
///
/// `upper = inf { theta : P(X <= k) <= delta }` and
/// `lower = sup { theta : P(X >= k) <= delta }`.
pub fn clopper_pearson(k: usize, m: usize, delta: f64) -> Result<BinomialCI> {
    if k > m {
        return Err(Error::InvalidCount { k, m });
    }
    if m == 0 {
        return Err(Error::Invalid("trial count must be positive".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    let upper = if k == m {
        1.0
    } else {
        bisect(0.0, 1.0, |t| binomial_cdf(k, m, t) <= delta)
    };
    let lower = if k == 0 {
        0.0
    } else {
        // P(X >= k) increases with theta: the sup is where it crosses delta.
        bisect(0.0, 1.0, |t| binomial_upper_tail(k, m, t) > delta)
    };
    Ok(BinomialCI {
        lower: lower.min(upper),
        upper,
    })
}

/// Interval of one bin's importance weight together with its counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinInterval {
    pub lower: f64,
    pub upper: f64,
    pub n_source: usize,
    pub n_target: usize,
    /// The clipped interval was empty and collapsed to a single point.
    pub fallback: bool,
}

impl BinInterval {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, w: f64) -> bool {
        self.lower <= w && w <= self.upper
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IwIntervals {
    pub bins: Vec<BinInterval>,
    /// Level actually used on each side of each bin.
    pub delta_bar: f64,
    pub smoothness: f64,
}

impl IwIntervals {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.bins.iter().map(BinInterval::midpoint).collect()
    }
}

/// Unclipped ratio interval for one bin; the upper end is `+inf` when the
/// source lower bound minus the smoothness constant is not positive.
pub fn raw_iw_interval(
    n_source: usize,
    n_target: usize,
    total_source: usize,
    total_target: usize,
    delta: f64,
    smoothness: f64,
) -> Result<(f64, f64)> {
    let s = clopper_pearson(n_source, total_source, delta)?;
    let t = clopper_pearson(n_target, total_target, delta)?;
    let g = smoothness;
    let lower = (t.lower - g).max(0.0) / (s.upper + g);
    let denom = (s.lower - g).max(0.0);
    let upper = if denom > 0.0 {
        (t.upper + g) / denom
    } else {
        f64::INFINITY
    };
    Ok((lower, upper))
}

/// Ratio interval intersected with `[w_min, w_max]`.
///
/// Fails with [`Error::EmptyInterval`] when the intersection is empty.
pub fn iw_interval(
    n_source: usize,
    n_target: usize,
    total_source: usize,
    total_target: usize,
    cfg: &GaeConfig,
) -> Result<(f64, f64)> {
    let (lo, hi) = raw_iw_interval(
        n_source,
        n_target,
        total_source,
        total_target,
        cfg.per_side_delta(),
        cfg.smoothness,
    )?;
    let lower = lo.max(cfg.w_min);
    let upper = hi.min(cfg.w_max);
    if lower > upper {
        return Err(Error::EmptyInterval { lower, upper });
    }
    Ok((lower, upper))
}

/// Intervals for every bin from per-bin counts. Bins whose clipped interval
/// is empty collapse to the clamped midpoint of the raw interval.
pub fn binned_intervals(
    source_counts: &[usize],
    target_counts: &[usize],
    cfg: &GaeConfig,
) -> Result<IwIntervals> {
    if source_counts.len() != target_counts.len() {
        return Err(Error::LengthMismatch(source_counts.len(), target_counts.len()));
    }
    let total_source: usize = source_counts.iter().sum();
    let total_target: usize = target_counts.iter().sum();
    let mut bins = Vec::with_capacity(source_counts.len());
    for (j, (&ns, &nt)) in source_counts.iter().zip(target_counts).enumerate() {
        let bin = match iw_interval(ns, nt, total_source, total_target, cfg) {
            Ok((lower, upper)) => BinInterval {
                lower,
                upper,
                n_source: ns,
                n_target: nt,
                fallback: false,
            },
            Err(Error::EmptyInterval { .. }) => {
                let (lo, hi) = raw_iw_interval(
                    ns,
                    nt,
                    total_source,
                    total_target,
                    cfg.per_side_delta(),
                    cfg.smoothness,
                )?;
                let point = cfg.clip_weight(0.5 * (lo + hi));
                warn!("bin {j}: interval empty after clipping, using point {point}");
                BinInterval {
                    lower: point,
                    upper: point,
                    n_source: ns,
                    n_target: nt,
                    fallback: true,
                }
            }
            Err(e) => return Err(e),
        };
        bins.push(bin);
    }
    Ok(IwIntervals {
        bins,
        delta_bar: cfg.per_side_delta(),
        smoothness: cfg.smoothness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Binomial, Distribution};

    /// Direct summation of binomial terms; independent of the incomplete beta.
    fn cdf_by_summation(k: usize, m: usize, theta: f64) -> f64 {
        let mut total = 0.0;
        let mut coef = 1.0f64;
        for i in 0..=k {
            if i > 0 {
                coef *= (m - i + 1) as f64 / i as f64;
            }
            total += coef * theta.powi(i as i32) * (1.0 - theta).powi((m - i) as i32);
        }
        total
    }

    #[test]
    fn zero_successes_match_closed_form() {
        let ci = clopper_pearson(0, 10, 0.025).unwrap();
        assert_abs_diff_eq!(ci.upper, 1.0 - 0.025f64.powf(0.1), epsilon = 1e-9);
        assert_abs_diff_eq!(ci.upper, 0.30850, epsilon = 1e-5);
        assert_eq!(ci.lower, 0.0);
    }

    #[test]
    fn boundaries_are_exact() {
        assert_eq!(clopper_pearson(10, 10, 0.05).unwrap().upper, 1.0);
        assert_eq!(clopper_pearson(0, 10, 0.05).unwrap().lower, 0.0);
        let ci = clopper_pearson(10, 10, 0.025).unwrap();
        assert_abs_diff_eq!(ci.lower, 0.025f64.powf(0.1), epsilon = 1e-9);
    }

    #[test]
    fn half_successes() {
        let ci = clopper_pearson(5, 10, 0.025).unwrap();
        assert_abs_diff_eq!(ci.lower, 0.1871, epsilon = 1e-4);
        assert_abs_diff_eq!(ci.upper, 0.8129, epsilon = 1e-4);
        // The endpoints solve the tail equations of the summed binomial.
        assert_abs_diff_eq!(cdf_by_summation(5, 10, ci.upper), 0.025, epsilon = 1e-9);
        assert_abs_diff_eq!(1.0 - cdf_by_summation(4, 10, ci.lower), 0.025, epsilon = 1e-9);
    }

    #[test]
    fn rejects_bad_counts() {
        assert!(matches!(clopper_pearson(11, 10, 0.05), Err(Error::InvalidCount { k: 11, m: 10 })));
        assert!(clopper_pearson(0, 0, 0.05).is_err());
        assert!(clopper_pearson(1, 2, 0.0).is_err());
    }

    #[test]
    fn cdf_matches_summation() {
        for &(k, m, theta) in &[(0, 5, 0.3), (3, 7, 0.41), (12, 30, 0.5), (29, 30, 0.9)] {
            assert_abs_diff_eq!(binomial_cdf(k, m, theta), cdf_by_summation(k, m, theta), epsilon = 1e-12);
        }
    }

    #[test]
    fn coverage_near_nominal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let binom = Binomial::new(50, 0.3).unwrap();
        let covered = (0..1000)
            .filter(|_| {
                let k = binom.sample(&mut rng) as usize;
                let ci = clopper_pearson(k, 50, 0.025).unwrap();
                ci.lower <= 0.3 && 0.3 <= ci.upper
            })
            .count();
        assert!(covered >= 930, "coverage {covered}/1000");
    }

    fn cfg(g: f64) -> GaeConfig {
        GaeConfig {
            smoothness: g,
            ..GaeConfig::default()
        }
    }

    #[test]
    fn full_source_empty_target_hits_the_floor() {
        let (lo, hi) = raw_iw_interval(20, 0, 20, 20, 0.05, 0.001).unwrap();
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0);
        // The raw upper end falls below the weight floor, so clipping empties
        // the interval and the binned version falls back to the floor.
        assert!(hi < 1.0 / 6.0);
        assert!(matches!(iw_interval(20, 0, 20, 20, &cfg(0.001)), Err(Error::EmptyInterval { .. })));
        let iv = binned_intervals(&[20, 0], &[0, 20], &cfg(0.001)).unwrap();
        assert!(iv.bins[0].fallback);
        assert_eq!((iv.bins[0].lower, iv.bins[0].upper), (1.0 / 6.0, 1.0 / 6.0));
    }

    #[test]
    fn symmetric_counts_contain_one() {
        let (lo, hi) = iw_interval(10, 10, 20, 20, &cfg(0.0)).unwrap();
        assert!(lo <= 1.0 && 1.0 <= hi);
    }

    #[test]
    fn zero_source_lower_bound_clips_to_cap() {
        let (_, raw_hi) = raw_iw_interval(0, 5, 20, 20, 0.05, 0.001).unwrap();
        assert!(raw_hi.is_infinite());
        let (_, hi) = iw_interval(0, 5, 20, 20, &cfg(0.001)).unwrap();
        assert_eq!(hi, 6.0);
    }

    #[test]
    fn empty_clipped_interval_falls_back_to_a_point() {
        // All target mass in bin 0 with tiny source mass: ratio far above w_max.
        let c = GaeConfig {
            w_max: 2.0,
            w_min: 0.5,
            ..GaeConfig::default()
        };
        assert!(matches!(iw_interval(100, 1000, 1000, 1000, &c), Err(Error::EmptyInterval { .. })));
        let iv = binned_intervals(&[100, 900], &[1000, 0], &c).unwrap();
        assert!(iv.bins[0].fallback);
        assert_eq!(iv.bins[0].lower, 2.0);
        assert_eq!(iv.bins[0].upper, 2.0);
        assert!(iv.bins[1].fallback);
        assert_eq!(iv.bins[1].upper, 0.5);
    }

    #[test]
    fn union_bound_widens_intervals() {
        let plain = iw_interval(40, 60, 200, 200, &GaeConfig::default()).unwrap();
        let strict = iw_interval(
            40,
            60,
            200,
            200,
            &GaeConfig {
                union_bound: true,
                ..GaeConfig::default()
            },
        )
        .unwrap();
        assert!(strict.0 < plain.0 && strict.1 > plain.1);
    }

    proptest! {
        #[test]
        fn monotone_in_successes(m in 1usize..80, k_frac in 0.0f64..1.0, delta in 0.001f64..0.3) {
            let k = ((m as f64) * k_frac).floor() as usize;
            prop_assume!(k < m);
            let a = clopper_pearson(k, m, delta).unwrap();
            let b = clopper_pearson(k + 1, m, delta).unwrap();
            prop_assert!(a.upper <= b.upper + 1e-12);
            prop_assert!(a.lower <= b.lower + 1e-12);
            prop_assert!(a.lower <= a.upper);
        }

        #[test]
        fn smoothness_widens_both_ends(
            ns in 1usize..100, nt in 1usize..100, g1 in 0.0f64..0.05, dg in 0.0f64..0.05,
        ) {
            let (lo1, hi1) = raw_iw_interval(ns, nt, 200, 200, 0.05, g1).unwrap();
            let (lo2, hi2) = raw_iw_interval(ns, nt, 200, 200, 0.05, g1 + dg).unwrap();
            prop_assert!(lo2 <= lo1 + 1e-15);
            prop_assert!(hi2 >= hi1 - 1e-15);
        }
    }
}
