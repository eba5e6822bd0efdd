use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use iwgae::estimate::{ece_bin, CalibrationReport};

use crate::failure::{Exit, Failure};

/// Writes a CSV file into `dir` and returns its name for the manifest.
pub fn write_csv<I>(dir: &Path, name: &str, header: &[&str], rows: I) -> Result<String, Failure>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let write = || -> anyhow::Result<()> {
        let mut w = csv::Writer::from_path(dir.join(name))?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    };
    write().output()?;
    Ok(name.to_string())
}

pub fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    File::create(dir.join(name)).map(BufWriter::new).output()
}

pub fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn opt_bool(v: Option<bool>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const RELIABILITY_HEADER: [&str; 5] = ["method", "bin", "count", "conf", "acc"];

pub fn reliability_rows(report: &CalibrationReport) -> impl Iterator<Item = Vec<String>> + '_ {
    report.bins.iter().enumerate().map(|(i, b)| {
        vec![
            report.method.clone(),
            i.to_string(),
            b.count.to_string(),
            b.conf.to_string(),
            b.acc.to_string(),
        ]
    })
}

/// Reliability rows without accuracies, for unlabeled targets.
pub fn unlabeled_reliability_rows(method: &str, confidences: &[f64], m: usize) -> Vec<Vec<String>> {
    let mut bins = vec![(0usize, 0.0f64); m];
    for c in confidences {
        let b = &mut bins[ece_bin(*c, m)];
        b.0 += 1;
        b.1 += c;
    }
    bins.into_iter()
        .enumerate()
        .map(|(i, (count, sum))| {
            let conf = if count == 0 { 0.0 } else { sum / count as f64 };
            vec![method.to_string(), i.to_string(), count.to_string(), conf.to_string(), String::new()]
        })
        .collect()
}
