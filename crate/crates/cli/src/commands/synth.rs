use std::path::Path;

use anyhow::anyhow;
use iwgae::io::{write_features, write_predictions, write_truth};
use iwgae::synth::{generate, SyntheticSpec};
use iwgae::GaeConfig;

use crate::failure::{Exit, Failure};
use crate::report;

/// Writes a two-dimensional Gaussian-shift problem seeded by `cfg.seed`.
pub fn run(n: usize, shift: &[f64], logit_scale: f64, noise: f64, cfg: &GaeConfig, out: &Path) -> Result<Vec<String>, Failure> {
    let mut spec = SyntheticSpec::gaussian_shift(n, cfg.seed);
    if shift.len() != spec.dim {
        return Err(anyhow!("--shift needs {} values, got {}", spec.dim, shift.len())).input();
    }
    spec.mu_target = shift.to_vec();
    spec.target_logit_scale = logit_scale;
    spec.noise = noise;
    spec.validate().input()?;
    let data = generate(&spec).pipeline()?;

    let labeled = data.labeled_target();
    write_predictions(report::create(out, "source.csv")?, data.source.records()).output()?;
    write_predictions(report::create(out, "target.csv")?, data.target.records()).output()?;
    write_predictions(report::create(out, "target_labeled.csv")?, labeled.records()).output()?;
    write_features(report::create(out, "source_features.csv")?, data.source.records()).output()?;
    write_features(report::create(out, "target_features.csv")?, data.target.records()).output()?;
    let truth = data
        .source
        .records()
        .iter()
        .zip(&data.source_truth)
        .chain(data.target.records().iter().zip(&data.target_truth))
        .map(|(r, t)| (r.sample_id.as_str(), *t));
    write_truth(report::create(out, "truth.csv")?, truth).output()?;
    println!("true target accuracy {}", data.true_target_accuracy());
    Ok([
        "source.csv",
        "target.csv",
        "target_labeled.csv",
        "source_features.csv",
        "target_features.csv",
        "truth.csv",
    ]
    .map(String::from)
    .to_vec())
}
