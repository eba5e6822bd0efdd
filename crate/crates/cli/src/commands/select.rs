use std::path::Path;

use anyhow::anyhow;
use iwgae::estimate::rank;
use iwgae::io::read_candidates;
use iwgae::pipeline::{select, Candidate, Method};
use iwgae::{Dataset, GaeConfig};

use crate::failure::{Exit, Failure};
use crate::inputs::{require_labels, Inputs};
use crate::report;

/// Writes `rankings.csv`. Models that fail to load or score keep rows with
/// empty score and rank. Candidate paths are relative to the candidates file.
pub fn run(
    inputs: &mut Inputs,
    candidates: &Path,
    methods: &[Method],
    cfg: &GaeConfig,
    out: &Path,
) -> Result<Vec<String>, Failure> {
    let bytes = inputs.read(candidates)?;
    let entries = read_candidates(bytes.as_slice())
        .map_err(|e| anyhow!("{}: {e}", candidates.display()))
        .input()?;
    let base = candidates.parent().unwrap_or(Path::new("."));

    let mut loaded: Vec<Option<(Dataset, Dataset)>> = Vec::new();
    for e in &entries {
        let features = |f: &Option<String>| f.as_ref().map(|p| base.join(p));
        let mut load = || -> Result<(Dataset, Dataset), Failure> {
            let src_path = base.join(&e.source_file);
            let source = inputs.dataset(&src_path, features(&e.source_features).as_deref())?;
            require_labels(&source, &src_path)?;
            let target = inputs.dataset(&base.join(&e.target_file), features(&e.target_features).as_deref())?;
            Ok((source, target))
        };
        match load() {
            Ok(pair) => loaded.push(Some(pair)),
            Err(f) => {
                log::warn!("model {:?} skipped: {:#}", e.model_id, f.error);
                loaded.push(None);
            }
        }
    }

    let ready: Vec<Candidate<'_>> = entries
        .iter()
        .zip(&loaded)
        .filter_map(|(e, l)| {
            l.as_ref().map(|(s, t)| Candidate {
                id: &e.model_id,
                source: s,
                target: t,
            })
        })
        .collect();
    let results = select(&ready, methods, cfg);

    let mut scores = Vec::new();
    let mut failed = Vec::new();
    for (c, r) in ready.iter().zip(results) {
        match r {
            Ok(s) => scores.extend(s),
            Err(e) => {
                log::warn!("model {:?} failed: {e}", c.id);
                failed.push(c.id.to_string());
            }
        }
    }
    failed.extend(
        entries
            .iter()
            .zip(&loaded)
            .filter(|(_, l)| l.is_none())
            .map(|(e, _)| e.model_id.clone()),
    );
    if scores.is_empty() {
        return Err(anyhow!("no candidate model could be scored")).pipeline();
    }

    let mut rows = Vec::new();
    for m in methods {
        let per_method: Vec<_> = scores.iter().filter(|s| s.method == m.as_str()).cloned().collect();
        for (s, r) in rank(per_method) {
            rows.push(vec![s.model_id, s.method, s.score.to_string(), r.to_string()]);
        }
        for id in entries.iter().map(|e| &e.model_id).filter(|id| failed.contains(id)) {
            rows.push(vec![id.clone(), m.as_str().to_string(), String::new(), String::new()]);
        }
    }
    for row in rows.iter().filter(|r| r[3] == "1") {
        println!("{:<8} best {}", row[1], row[0]);
    }
    Ok(vec![report::write_csv(out, "rankings.csv", &["model_id", "method", "score", "rank"], rows)?])
}
