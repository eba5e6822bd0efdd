use std::collections::HashMap;
use std::path::Path;

use anyhow::anyhow;
use iwgae::estimate::ece;
use iwgae::io::read_confidences;
use iwgae::GaeConfig;

use crate::failure::{Exit, Failure};
use crate::inputs::{require_labels, Inputs};
use crate::report;

/// Writes `ece.csv` and `reliability.csv`. Every method in the confidence
/// file must cover exactly the target's sample ids.
pub fn run(
    inputs: &mut Inputs,
    target_path: &Path,
    confidences: &Path,
    methods: Option<&[String]>,
    cfg: &GaeConfig,
    out: &Path,
) -> Result<Vec<String>, Failure> {
    let target = inputs.dataset(target_path, None)?;
    require_labels(&target, target_path)?;
    let bytes = inputs.read(confidences)?;
    let rows = read_confidences(bytes.as_slice())
        .map_err(|e| anyhow!("{}: {e}", confidences.display()))
        .input()?;

    let index: HashMap<&str, usize> = target
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| (r.sample_id.as_str(), i))
        .collect();
    let mut order: Vec<&str> = Vec::new();
    let mut by_method: HashMap<&str, Vec<Option<f64>>> = HashMap::new();
    for r in &rows {
        if methods.is_some_and(|ms| !ms.iter().any(|m| m == &r.method)) {
            continue;
        }
        let i = *index
            .get(r.sample_id.as_str())
            .ok_or_else(|| anyhow!("sample {:?} is not in {}", r.sample_id, target_path.display()))
            .input()?;
        let slot = by_method.entry(r.method.as_str()).or_insert_with(|| {
            order.push(r.method.as_str());
            vec![None; target.len()]
        });
        slot[i] = Some(r.confidence);
    }
    if order.is_empty() {
        return Err(anyhow!("no confidence rows to evaluate")).input();
    }

    let correct = target.correctness().pipeline()?;
    let mut table = Vec::new();
    let mut reliability = Vec::new();
    for m in order {
        let conf = by_method[m]
            .iter()
            .zip(target.records())
            .map(|(c, r)| c.ok_or_else(|| anyhow!("method {m:?} has no confidence for sample {:?}", r.sample_id)))
            .collect::<anyhow::Result<Vec<f64>>>()
            .input()?;
        let rep = ece(m, &conf, &correct, cfg.ece_bins).pipeline()?;
        println!("{:<8} ECE {}", m, rep.ece);
        table.push(vec![m.to_string(), rep.ece.to_string()]);
        reliability.extend(report::reliability_rows(&rep));
    }
    Ok(vec![
        report::write_csv(out, "ece.csv", &["method", "ece"], table)?,
        report::write_csv(out, "reliability.csv", &report::RELIABILITY_HEADER, reliability)?,
    ])
}
