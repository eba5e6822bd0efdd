use std::path::Path;

use iwgae::estimate::ece;
use iwgae::io::{write_confidences, ConfidenceRow};
use iwgae::pipeline::{calibrate_methods, Method};
use iwgae::GaeConfig;

use crate::failure::{Exit, Failure};
use crate::inputs::{require_labels, Inputs};
use crate::report;

pub struct Args<'a> {
    pub source: &'a Path,
    pub target: &'a Path,
    pub source_features: Option<&'a Path>,
    pub target_features: Option<&'a Path>,
}

/// Writes `confidences.csv` and `reliability.csv`, plus `ece.csv` when the
/// target file happens to be labeled. Target labels never reach the methods.
pub fn run(
    inputs: &mut Inputs,
    args: Args<'_>,
    methods: &[Method],
    cfg: &GaeConfig,
    out: &Path,
) -> Result<Vec<String>, Failure> {
    let source = inputs.dataset(args.source, args.source_features)?;
    require_labels(&source, args.source)?;
    let target = inputs.dataset(args.target, args.target_features)?;

    let results = calibrate_methods(&source, &target, methods, cfg).pipeline()?;

    let mut rows = Vec::with_capacity(results.len() * target.len());
    for m in &results {
        for (r, c) in target.records().iter().zip(&m.confidences) {
            rows.push(ConfidenceRow {
                sample_id: r.sample_id.clone(),
                method: m.method.as_str().to_string(),
                confidence: c.confidence,
                fallback: c.fallback,
            });
        }
    }
    write_confidences(report::create(out, "confidences.csv")?, &rows).output()?;
    let mut outputs = vec!["confidences.csv".to_string()];

    let labels = target.is_fully_labeled().then(|| target.correctness()).transpose().pipeline()?;
    let mut reliability = Vec::new();
    let mut eces = Vec::new();
    for m in &results {
        let conf: Vec<f64> = m.confidences.iter().map(|c| c.confidence).collect();
        match &labels {
            Some(correct) => {
                let rep = ece(m.method.as_str(), &conf, correct, cfg.ece_bins).pipeline()?;
                eces.push(vec![rep.method.clone(), rep.ece.to_string()]);
                reliability.extend(report::reliability_rows(&rep));
            }
            None => reliability.extend(report::unlabeled_reliability_rows(m.method.as_str(), &conf, cfg.ece_bins)),
        }
    }
    outputs.push(report::write_csv(out, "reliability.csv", &report::RELIABILITY_HEADER, reliability)?);
    if labels.is_some() {
        for row in &eces {
            println!("{:<8} ECE {}", row[0], row[1]);
        }
        outputs.push(report::write_csv(out, "ece.csv", &["method", "ece"], eces)?);
    }
    Ok(outputs)
}
