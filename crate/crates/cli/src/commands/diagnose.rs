use std::path::{Path, PathBuf};

use anyhow::anyhow;
use iwgae::diagnostics::{diagnose, pass_rate, spearman, GroupDiagnostic, OracleSet};
use iwgae::io::read_truth;
use iwgae::pipeline::run as run_pipeline;
use iwgae::{Dataset, GaeConfig};

use crate::failure::{Exit, Failure};
use crate::inputs::{require_labels, Inputs};
use crate::report;

struct Problem {
    name: String,
    source: Dataset,
    target: Dataset,
    labeled: Dataset,
    oracle_truth: Vec<(f64, f64)>,
}

fn optional(dir: &Path, name: &str) -> Option<PathBuf> {
    let p = dir.join(name);
    p.exists().then_some(p)
}

fn load(inputs: &mut Inputs, dir: &Path) -> Result<Problem, Failure> {
    let truth_path = dir.join("truth.csv");
    if !truth_path.exists() {
        return Err(anyhow!("{} is missing; diagnostics need ground truth", truth_path.display())).input();
    }
    let source = inputs.dataset(&dir.join("source.csv"), optional(dir, "source_features.csv").as_deref())?;
    require_labels(&source, &dir.join("source.csv"))?;
    let target = inputs.dataset(&dir.join("target.csv"), optional(dir, "target_features.csv").as_deref())?;
    let labeled_path = dir.join("target_labeled.csv");
    let labeled = inputs.dataset(&labeled_path, None)?;
    require_labels(&labeled, &labeled_path)?;
    let same_ids = labeled.len() == target.len()
        && labeled.records().iter().zip(target.records()).all(|(a, b)| a.sample_id == b.sample_id);
    if !same_ids {
        return Err(anyhow!("{} must list the target samples in the same order", labeled_path.display())).input();
    }
    let bytes = inputs.read(&truth_path)?;
    let truth = read_truth(bytes.as_slice())
        .map_err(|e| anyhow!("{}: {e}", truth_path.display()))
        .input()?;
    let oracle_truth = target
        .records()
        .iter()
        .map(|r| {
            truth
                .get(&r.sample_id)
                .map(|t| (t.true_iw, t.true_correct_prob))
                .ok_or_else(|| anyhow!("{}: no row for target sample {:?}", truth_path.display(), r.sample_id))
        })
        .collect::<anyhow::Result<_>>()
        .input()?;
    let name = dir
        .file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(Problem {
        name,
        source,
        target,
        labeled,
        oracle_truth,
    })
}

/// Writes `diagnostics.csv`, `temperatures.csv` and `summary.csv`. The
/// target samples of each directory, with their truth rows, serve as the
/// oracle population.
pub fn run(inputs: &mut Inputs, dirs: &[PathBuf], cfg: &GaeConfig, out: &Path) -> Result<Vec<String>, Failure> {
    let problems = dirs.iter().map(|d| load(inputs, d)).collect::<Result<Vec<_>, _>>()?;

    let mut all: Vec<GroupDiagnostic> = Vec::new();
    let mut rows = Vec::new();
    let mut temps = Vec::new();
    for p in &problems {
        let run = run_pipeline(&p.source, &p.target, cfg)
            .map_err(|e| anyhow!("{}: {e}", p.name))
            .pipeline()?;
        let oracle = OracleSet {
            logits: p.target.records().iter().map(|r| r.logits.clone()).collect(),
            scores: run.prepared.scores.target.clone(),
            true_iw: p.oracle_truth.iter().map(|t| t.0).collect(),
            correct_prob: p.oracle_truth.iter().map(|t| t.1).collect(),
        };
        let diags = diagnose(&run, &p.labeled, Some(&oracle), cfg).pipeline()?;
        temps.push(vec![p.name.clone(), run.temperature().to_string()]);
        for d in &diags {
            rows.push(vec![
                p.name.clone(),
                d.temperature.to_string(),
                d.group.to_string(),
                d.eps_opt.to_string(),
                d.ident_bias.to_string(),
                report::opt(d.src_err),
                report::opt(d.tgt_err),
                report::opt_bool(d.source_bound),
                report::opt_bool(d.transfer_bound),
            ]);
        }
        all.extend(diags);
    }

    let paired: Vec<&GroupDiagnostic> = all.iter().filter(|d| d.src_err.is_some()).collect();
    let src: Vec<f64> = paired.iter().filter_map(|d| d.src_err).collect();
    let tgt: Vec<f64> = paired.iter().filter_map(|d| d.tgt_err).collect();
    let eps: Vec<f64> = paired.iter().map(|d| d.eps_opt).collect();
    let summary = [
        ("pairs", Some(paired.len() as f64)),
        ("prop1_pass_rate", pass_rate(all.iter().map(|d| d.source_bound))),
        ("eq5_pass_rate", pass_rate(all.iter().map(|d| d.transfer_bound))),
        ("spearman_src_tgt", spearman(&src, &tgt)),
        ("spearman_eps_src", spearman(&eps, &src)),
    ];
    for (k, v) in &summary {
        println!("{k:<18} {}", report::opt(*v));
    }
    for t in &temps {
        println!("{:<18} temperature {}", t[0], t[1]);
    }
    Ok(vec![
        report::write_csv(
            out,
            "diagnostics.csv",
            &["dataset", "temperature", "group", "eps_opt", "ident_bias", "src_err", "tgt_err", "prop1", "eq5"],
            rows,
        )?,
        report::write_csv(out, "temperatures.csv", &["dataset", "temperature"], temps)?,
        report::write_csv(
            out,
            "summary.csv",
            &["metric", "value"],
            summary.iter().map(|(k, v)| vec![k.to_string(), report::opt(*v)]),
        )?,
    ])
}
