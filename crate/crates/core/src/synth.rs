//! Gaussian covariate-shift problems with exact importance weights and exact
//! per-sample correctness probabilities.
//!
//! Inputs are `x ~ N(mu_domain, sigma^2 I)`. Labels are drawn from
//! `softmax_k(-|x - c_k|^2)` and then flipped to a uniformly chosen other
//! class with probability `noise`, identically in both domains. The model
//! under evaluation is a fixed linear classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::domain::{BinPartition, DomainClassifier};
use crate::error::{Error, Result};
use crate::io::TruthRow;
use crate::types::{argmax, softmax, Dataset, Domain, PredictionRecord, Split};

/// `logits = weights x + bias`, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, x) + b)
            .collect()
    }

    /// The classifier whose softmax reproduces the noise-free label
    /// conditional, with logits multiplied by `scale`.
    pub fn nearest_center(centers: &[Vec<f64>], scale: f64) -> Self {
        Self {
            weights: centers
                .iter()
                .map(|c| c.iter().map(|v| 2.0 * scale * v).collect())
                .collect(),
            bias: centers.iter().map(|c| -scale * dot(c, c)).collect(),
        }
    }

    /// Rotates every weight row by `angle` in the plane of the first two
    /// feature coordinates.
    pub fn rotated(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let weights = self
            .weights
            .iter()
            .map(|w| {
                let mut w = w.clone();
                if w.len() >= 2 {
                    let (a, b) = (w[0], w[1]);
                    w[0] = c * a - s * b;
                    w[1] = s * a + c * b;
                }
                w
            })
            .collect();
        Self {
            weights,
            bias: self.bias.clone(),
        }
    }

    pub fn scaled(&self, scale: f64) -> Self {
        Self {
            weights: self
                .weights
                .iter()
                .map(|w| w.iter().map(|v| v * scale).collect())
                .collect(),
            bias: self.bias.iter().map(|b| b * scale).collect(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub classes: usize,
    pub mu_source: Vec<f64>,
    pub mu_target: Vec<f64>,
    pub sigma: f64,
    pub class_centers: Vec<Vec<f64>>,
    /// Probability of replacing the label by a uniformly chosen other
    /// class, in `[0, 0.5)`.
    pub noise: f64,
    pub classifier: LinearClassifier,
    pub n_source: usize,
    pub n_target: usize,
    /// Target logits are multiplied by this; a value of `0.9` plants a
    /// grouping temperature of `0.9`.
    pub target_logit_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Two-dimensional, three-class problem with a moderate mean shift and
    /// an overconfident nearest-center classifier.
    pub fn gaussian_shift(n: usize, seed: u64) -> Self {
        let centers: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                let a = std::f64::consts::FRAC_PI_2 + k as f64 * 2.0 * std::f64::consts::FRAC_PI_3;
                vec![1.5 * a.cos(), 1.5 * a.sin()]
            })
            .collect();
        Self {
            dim: 2,
            classes: 3,
            mu_source: vec![0.0, 0.0],
            mu_target: vec![0.8, -0.4],
            sigma: 1.0,
            classifier: LinearClassifier::nearest_center(&centers, 2.0),
            class_centers: centers,
            noise: 0.1,
            n_source: n,
            n_target: n,
            target_logit_scale: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("synthetic spec: {m}")));
        if self.dim == 0 || self.classes < 2 {
            return bad("need dim >= 1 and at least 2 classes");
        }
        if self.mu_source.len() != self.dim || self.mu_target.len() != self.dim {
            return bad("domain means must have length dim");
        }
        if self.class_centers.len() != self.classes || self.class_centers.iter().any(|c| c.len() != self.dim) {
            return bad("need one center of length dim per class");
        }
        if self.classifier.weights.len() != self.classes
            || self.classifier.bias.len() != self.classes
            || self.classifier.weights.iter().any(|w| w.len() != self.dim)
        {
            return bad("classifier shape must be classes x dim");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad("noise must lie in [0, 0.5)");
        }
        if !(self.target_logit_scale > 0.0 && self.target_logit_scale.is_finite()) {
            return bad("target logit scale must be positive");
        }
        if self.n_source == 0 || self.n_target == 0 {
            return bad("sample counts must be positive");
        }
        Ok(())
    }

    /// `p_T(x) / p_S(x)`.
    pub fn true_iw(&self, x: &[f64]) -> f64 {
        ((sq_dist(x, &self.mu_source) - sq_dist(x, &self.mu_target)) / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// `p(y | x)`; depends on `x` only, never on the domain.
    ///
    /// Flipping to a uniformly chosen other class with probability `r` is
    /// the same as mixing with the uniform distribution at rate
    /// `r K / (K - 1)`.
    pub fn label_distribution(&self, x: &[f64]) -> Vec<f64> {
        let neg: Vec<f64> = self.class_centers.iter().map(|c| -sq_dist(x, c)).collect();
        let k = self.classes as f64;
        let mix = self.noise * k / (k - 1.0);
        softmax(&neg, 1.0)
            .into_iter()
            .map(|p| (1.0 - mix) * p + mix / k)
            .collect()
    }

    /// `P(Y = yhat(x) | x)` for the spec's classifier.
    pub fn correct_prob(&self, x: &[f64]) -> f64 {
        self.correct_prob_for(&self.classifier, x)
    }

    pub fn correct_prob_for(&self, classifier: &LinearClassifier, x: &[f64]) -> f64 {
        self.label_distribution(x)[argmax(&classifier.logits(x))]
    }

    fn draw_x(&self, rng: &mut ChaCha8Rng, mean: &[f64]) -> Vec<f64> {
        mean.iter()
            .map(|m| m + self.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn draw_label(&self, rng: &mut ChaCha8Rng, x: &[f64]) -> usize {
        let p = self.label_distribution(x);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, pk) in p.iter().enumerate() {
            acc += pk;
            if u < acc {
                return k;
            }
        }
        p.len() - 1
    }
}

/// Raw draws of one generated problem, before they are wrapped into
/// datasets for a particular classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub source_x: Vec<Vec<f64>>,
    pub source_y: Vec<usize>,
    pub target_x: Vec<Vec<f64>>,
    pub target_y: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    /// Labeled source validation set.
    pub source: Dataset,
    /// Target test set with labels hidden.
    pub target: Dataset,
    pub target_labels: Vec<usize>,
    pub source_truth: Vec<TruthRow>,
    pub target_truth: Vec<TruthRow>,
}

impl SyntheticData {
    /// The target set with its labels restored.
    pub fn labeled_target(&self) -> Dataset {
        let records = self
            .target
            .records()
            .iter()
            .zip(&self.target_labels)
            .map(|(r, y)| PredictionRecord {
                label: Some(*y),
                ..r.clone()
            })
            .collect();
        Dataset::new(records).expect("labels come from the same class set")
    }

    /// Mean true correctness probability over the whole target set.
    pub fn true_target_accuracy(&self) -> f64 {
        oracle_group_accuracy(self.target_truth.iter().map(|t| t.true_correct_prob))
    }
}

/// Draws inputs and labels for both domains. The stream depends only on the
/// seed and the sample counts, so classifiers can be swapped afterwards.
pub fn draw(spec: &SyntheticSpec) -> Result<SyntheticSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sample = SyntheticSample {
        source_x: Vec::with_capacity(spec.n_source),
        source_y: Vec::with_capacity(spec.n_source),
        target_x: Vec::with_capacity(spec.n_target),
        target_y: Vec::with_capacity(spec.n_target),
    };
    for _ in 0..spec.n_source {
        let x = spec.draw_x(&mut rng, &spec.mu_source);
        sample.source_y.push(spec.draw_label(&mut rng, &x));
        sample.source_x.push(x);
    }
    for _ in 0..spec.n_target {
        let x = spec.draw_x(&mut rng, &spec.mu_target);
        sample.target_y.push(spec.draw_label(&mut rng, &x));
        sample.target_x.push(x);
    }
    Ok(sample)
}

/// Wraps drawn inputs into datasets scored by `classifier`.
pub fn realize(spec: &SyntheticSpec, sample: &SyntheticSample, classifier: &LinearClassifier) -> Result<SyntheticData> {
    let record = |id: String, domain, split, label, logits, x: &[f64]| PredictionRecord {
        sample_id: id,
        domain,
        split,
        label,
        logits,
        features: Some(x.to_vec()),
        iw_score: None,
    };
    let truth = |x: &[f64]| TruthRow {
        true_iw: spec.true_iw(x),
        true_correct_prob: spec.correct_prob_for(classifier, x),
    };
    let source: Vec<PredictionRecord> = sample
        .source_x
        .iter()
        .zip(&sample.source_y)
        .enumerate()
        .map(|(i, (x, y))| record(format!("s{i}"), Domain::Source, Split::Validation, Some(*y), classifier.logits(x), x))
        .collect();
    let target: Vec<PredictionRecord> = sample
        .target_x
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let logits = classifier.logits(x).iter().map(|l| l * spec.target_logit_scale).collect();
            record(format!("t{i}"), Domain::Target, Split::Test, None, logits, x)
        })
        .collect();
    Ok(SyntheticData {
        source: Dataset::new(source)?,
        target: Dataset::new(target)?,
        target_labels: sample.target_y.clone(),
        source_truth: sample.source_x.iter().map(|x| truth(x)).collect(),
        target_truth: sample.target_x.iter().map(|x| truth(x)).collect(),
    })
}

/// Seeded generation with the spec's own classifier.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    realize(spec, &draw(spec)?, &spec.classifier)
}

/// Mean true correctness probability over a group's samples.
pub fn oracle_group_accuracy(correct_probs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = correct_probs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), p| (s + p, n + 1));
    assert!(n > 0, "oracle accuracy of an empty group");
    sum / n as f64
}

/// Large target-domain draw used as a population stand-in.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleDraws {
    pub features: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub true_iw: Vec<f64>,
    pub correct_prob: Vec<f64>,
}

impl OracleDraws {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// `n` fresh target-domain inputs with the spec's classifier.
pub fn oracle_target_draws(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<OracleDraws> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OracleDraws {
        features: Vec::with_capacity(n),
        logits: Vec::with_capacity(n),
        true_iw: Vec::with_capacity(n),
        correct_prob: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let x = spec.draw_x(&mut rng, &spec.mu_target);
        out.logits.push(
            spec.classifier
                .logits(&x)
                .into_iter()
                .map(|l| l * spec.target_logit_scale)
                .collect(),
        );
        out.true_iw.push(spec.true_iw(&x));
        out.correct_prob.push(spec.correct_prob(&x));
        out.features.push(x);
    }
    Ok(out)
}

/// Exact `P_T(bin) / P_S(bin)` for each bin of a partition over the scores
/// of a fitted domain classifier.
///
/// The classifier's linear term is Gaussian under either domain, so bin
/// masses follow from its normal CDF. Scores are taken as unclamped; the
/// mass beyond the classifier's clamp is negligible at any realistic fit.
pub fn binned_true_iw(spec: &SyntheticSpec, clf: &DomainClassifier, partition: &BinPartition) -> Result<Vec<f64>> {
    spec.validate()?;
    if clf.weights.len() != spec.dim {
        return Err(Error::LengthMismatch(clf.weights.len(), spec.dim));
    }
    let sd = spec.sigma * clf.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    if sd <= 0.0 {
        return Err(Error::Invalid("domain classifier has zero weights".into()));
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let mass = |mu: &[f64], lo: f64, hi: f64| {
        let m = clf.linear_term(mu);
        std.cdf((hi - m) / sd) - std.cdf((lo - m) / sd)
    };
    let cuts: Vec<f64> = std::iter::once(f64::NEG_INFINITY)
        .chain(partition.edges().iter().map(|e| (e / clf.class_prior_ratio).ln()))
        .chain(std::iter::once(f64::INFINITY))
        .collect();
    Ok(cuts
        .windows(2)
        .map(|c| mass(&spec.mu_target, c[0], c[1]) / mass(&spec.mu_source, c[0], c[1]))
        .collect())
}
