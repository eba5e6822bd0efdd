//! CSV file formats and the key=value configuration file.
//!
//! Every parser takes a reader so that it can be driven directly from byte
//! slices. Errors carry the 1-based line number (the header is line 1).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use csv::{ReaderBuilder, StringRecord, Trim};

use crate::error::{Error, Result};
use crate::types::{Domain, GaeConfig, PredictionRecord, Split};

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    ReaderBuilder::new()
        .has_headers(true)
        .trim(Trim::All)
        .flexible(true)
        .from_reader(input)
}

fn line_of(rec: &StringRecord) -> usize {
    rec.position().map_or(0, |p| p.line() as usize)
}

fn schema(line: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        line,
        message: message.into(),
    }
}

fn csv_error(err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line() as usize);
    match err.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        csv::ErrorKind::Utf8 { err, .. } => schema(line, format!("invalid UTF-8: {err}")),
        other => schema(line, format!("{other:?}")),
    }
}

fn parse_f64(field: &str, line: usize, column: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| schema(line, format!("column {column}: cannot parse {field:?} as a number")))?;
    if !v.is_finite() {
        return Err(schema(line, format!("column {column}: non-finite value {field:?}")));
    }
    Ok(v)
}

fn check_width(rec: &StringRecord, expected: usize) -> Result<()> {
    if rec.len() != expected {
        return Err(schema(
            line_of(rec),
            format!("expected {expected} fields, found {}", rec.len()),
        ));
    }
    Ok(())
}

fn parse_domain(field: &str, line: usize) -> Result<Domain> {
    match field {
        "source" => Ok(Domain::Source),
        "target" => Ok(Domain::Target),
        other => Err(schema(line, format!("unknown domain {other:?}"))),
    }
}

fn parse_split(field: &str, line: usize) -> Result<Split> {
    match field {
        "train" => Ok(Split::Train),
        "validation" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        other => Err(schema(line, format!("unknown split {other:?}"))),
    }
}

/// Reads a prediction file:
/// `sample_id,domain,split,label,logit_0,...,logit_{K-1}[,iw_score]`.
pub fn read_predictions<R: Read>(input: R) -> Result<Vec<PredictionRecord>> {
    let mut rdr = reader(input);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let fixed = ["sample_id", "domain", "split", "label"];
    for (i, name) in fixed.iter().enumerate() {
        match header.get(i) {
            Some(h) if h == *name => {}
            Some(h) => {
                return Err(schema(1, format!("column {i} must be {name:?}, found {h:?}")));
            }
            None => return Err(schema(1, format!("missing column {name:?}"))),
        }
    }
    let rest: Vec<&str> = header.iter().skip(fixed.len()).collect();
    let has_score = rest.last() == Some(&"iw_score");
    let num_classes = rest.len() - usize::from(has_score);
    for (k, name) in rest.iter().take(num_classes).enumerate() {
        if *name != format!("logit_{k}") {
            return Err(schema(1, format!("expected column logit_{k}, found {name:?}")));
        }
    }
    if num_classes < 2 {
        return Err(schema(1, "at least two logit columns are required"));
    }
    let width = header.len();

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = line_of(&rec);
        check_width(&rec, width)?;
        let sample_id = rec[0].to_string();
        if sample_id.is_empty() {
            return Err(schema(line, "empty sample_id"));
        }
        if !seen.insert(sample_id.clone()) {
            return Err(schema(line, format!("duplicate sample_id {sample_id:?}")));
        }
        let domain = parse_domain(&rec[1], line)?;
        let split = parse_split(&rec[2], line)?;
        let label = match &rec[3] {
            "" => None,
            s => {
                let y: usize = s
                    .parse()
                    .map_err(|_| schema(line, format!("label {s:?} is not a class index")))?;
                if y >= num_classes {
                    return Err(schema(
                        line,
                        format!("label {y} out of range for {num_classes} classes"),
                    ));
                }
                Some(y)
            }
        };
        let logits = (0..num_classes)
            .map(|k| parse_f64(&rec[4 + k], line, &format!("logit_{k}")))
            .collect::<Result<Vec<_>>>()?;
        let iw_score = if has_score {
            let s = parse_f64(&rec[4 + num_classes], line, "iw_score")?;
            if s <= 0.0 {
                return Err(schema(line, format!("iw_score must be positive, got {s}")));
            }
            Some(s)
        } else {
            None
        };
        out.push(PredictionRecord {
            sample_id,
            domain,
            split,
            label,
            logits,
            features: None,
            iw_score,
        });
    }
    if out.is_empty() {
        return Err(schema(1, "file contains no records"));
    }
    Ok(out)
}

/// Reads a feature file `sample_id,f_0,...,f_{d-1}` keyed by sample id.
pub fn read_features<R: Read>(input: R) -> Result<HashMap<String, Vec<f64>>> {
    let mut rdr = reader(input);
    let header = rdr.headers().map_err(csv_error)?.clone();
    if header.get(0) != Some("sample_id") {
        return Err(schema(1, "first column must be \"sample_id\""));
    }
    let dim = header.len() - 1;
    if dim == 0 {
        return Err(schema(1, "no feature columns"));
    }
    for (j, name) in header.iter().skip(1).enumerate() {
        if name != format!("f_{j}") {
            return Err(schema(1, format!("expected column f_{j}, found {name:?}")));
        }
    }
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = line_of(&rec);
        check_width(&rec, dim + 1)?;
        let values = (0..dim)
            .map(|j| parse_f64(&rec[1 + j], line, &format!("f_{j}")))
            .collect::<Result<Vec<_>>>()?;
        if out.insert(rec[0].to_string(), values).is_some() {
            return Err(schema(line, format!("duplicate sample_id {:?}", &rec[0])));
        }
    }
    Ok(out)
}

/// Attaches features to every record; a record without a feature row is an error.
pub fn attach_features(
    records: &mut [PredictionRecord],
    features: &HashMap<String, Vec<f64>>,
) -> Result<()> {
    for r in records.iter_mut() {
        let f = features.get(&r.sample_id).ok_or_else(|| {
            Error::Invalid(format!("no feature row for sample {:?}", r.sample_id))
        })?;
        r.features = Some(f.clone());
    }
    Ok(())
}

pub fn write_predictions<W: Write>(out: W, records: &[PredictionRecord]) -> Result<()> {
    let Some(first) = records.first() else {
        return Err(Error::Invalid("no records to write".into()));
    };
    let k = first.logits.len();
    let with_score = records.iter().all(|r| r.iw_score.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["sample_id", "domain", "split", "label"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..k).map(|i| format!("logit_{i}")));
    if with_score {
        header.push("iw_score".into());
    }
    w.write_record(&header).map_err(csv_error)?;
    for r in records {
        let mut row = vec![
            r.sample_id.clone(),
            r.domain.as_str().to_string(),
            r.split.as_str().to_string(),
            r.label.map(|y| y.to_string()).unwrap_or_default(),
        ];
        row.extend(r.logits.iter().map(|v| v.to_string()));
        if with_score {
            row.push(r.iw_score.unwrap_or_default().to_string());
        }
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_features<W: Write>(out: W, records: &[PredictionRecord]) -> Result<()> {
    let dim = records
        .first()
        .and_then(|r| r.features.as_ref())
        .map(Vec::len)
        .ok_or(Error::MissingFeatures)?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..dim).map(|j| format!("f_{j}")));
    w.write_record(&header).map_err(csv_error)?;
    for r in records {
        let f = r.features.as_ref().ok_or(Error::MissingFeatures)?;
        let mut row = vec![r.sample_id.clone()];
        row.extend(f.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Ground truth emitted alongside synthetic data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthRow {
    pub true_iw: f64,
    pub true_correct_prob: f64,
}

/// Reads `sample_id,true_iw,true_correct_prob`.
pub fn read_truth<R: Read>(input: R) -> Result<BTreeMap<String, TruthRow>> {
    let mut rdr = reader(input);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let expected = ["sample_id", "true_iw", "true_correct_prob"];
    if header.iter().ne(expected.iter().copied()) {
        return Err(schema(1, format!("header must be {}", expected.join(","))));
    }
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = line_of(&rec);
        check_width(&rec, 3)?;
        let true_iw = parse_f64(&rec[1], line, "true_iw")?;
        let p = parse_f64(&rec[2], line, "true_correct_prob")?;
        if true_iw <= 0.0 {
            return Err(schema(line, "true_iw must be positive"));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(schema(line, "true_correct_prob must lie in [0, 1]"));
        }
        let row = TruthRow {
            true_iw,
            true_correct_prob: p,
        };
        if out.insert(rec[0].to_string(), row).is_some() {
            return Err(schema(line, format!("duplicate sample_id {:?}", &rec[0])));
        }
    }
    Ok(out)
}

pub fn write_truth<'a, W: Write>(
    out: W,
    rows: impl IntoIterator<Item = (&'a str, TruthRow)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "true_iw", "true_correct_prob"])
        .map_err(csv_error)?;
    for (id, row) in rows {
        w.write_record([
            id.to_string(),
            row.true_iw.to_string(),
            row.true_correct_prob.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// One row of a confidence file.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceRow {
    pub sample_id: String,
    pub method: String,
    pub confidence: f64,
    pub fallback: bool,
}

/// Reads `sample_id,method,confidence,fallback`.
pub fn read_confidences<R: Read>(input: R) -> Result<Vec<ConfidenceRow>> {
    let mut rdr = reader(input);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let expected = ["sample_id", "method", "confidence", "fallback"];
    if header.iter().ne(expected.iter().copied()) {
        return Err(schema(1, format!("header must be {}", expected.join(","))));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = line_of(&rec);
        check_width(&rec, 4)?;
        let confidence = parse_f64(&rec[2], line, "confidence")?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(schema(line, format!("confidence {confidence} outside [0, 1]")));
        }
        let fallback = match &rec[3] {
            "true" | "1" => true,
            "false" | "0" => false,
            other => return Err(schema(line, format!("fallback must be a boolean, got {other:?}"))),
        };
        if rec[1].is_empty() {
            return Err(schema(line, "empty method"));
        }
        if !seen.insert((rec[0].to_string(), rec[1].to_string())) {
            return Err(schema(
                line,
                format!("duplicate row for sample {:?} method {:?}", &rec[0], &rec[1]),
            ));
        }
        out.push(ConfidenceRow {
            sample_id: rec[0].to_string(),
            method: rec[1].to_string(),
            confidence,
            fallback,
        });
    }
    Ok(out)
}

pub fn write_confidences<W: Write>(out: W, rows: &[ConfidenceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "method", "confidence", "fallback"])
        .map_err(csv_error)?;
    for r in rows {
        w.write_record([
            r.sample_id.clone(),
            r.method.clone(),
            r.confidence.to_string(),
            r.fallback.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// One candidate model for selection. Paths are as written in the file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateEntry {
    pub model_id: String,
    pub source_file: String,
    pub target_file: String,
    pub source_features: Option<String>,
    pub target_features: Option<String>,
}

/// Reads `model_id,source_file,target_file[,source_features,target_features]`.
pub fn read_candidates<R: Read>(input: R) -> Result<Vec<CandidateEntry>> {
    let mut rdr = reader(input);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let base = ["model_id", "source_file", "target_file"];
    let full = [
        "model_id",
        "source_file",
        "target_file",
        "source_features",
        "target_features",
    ];
    let with_features = if header.iter().eq(full.iter().copied()) {
        true
    } else if header.iter().eq(base.iter().copied()) {
        false
    } else {
        return Err(schema(
            1,
            format!("header must be {} or {}", base.join(","), full.join(",")),
        ));
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = line_of(&rec);
        check_width(&rec, header.len())?;
        if rec.iter().take(3).any(str::is_empty) {
            return Err(schema(line, "model_id, source_file and target_file are required"));
        }
        if !seen.insert(rec[0].to_string()) {
            return Err(schema(line, format!("duplicate model_id {:?}", &rec[0])));
        }
        let opt = |i: usize| {
            rec.get(i)
                .filter(|s| with_features && !s.is_empty())
                .map(str::to_string)
        };
        out.push(CandidateEntry {
            model_id: rec[0].to_string(),
            source_file: rec[1].to_string(),
            target_file: rec[2].to_string(),
            source_features: opt(3),
            target_features: opt(4),
        });
    }
    if out.is_empty() {
        return Err(schema(1, "no candidate models listed"));
    }
    Ok(out)
}

/// Parses a key=value configuration file; unset keys keep their defaults.
pub fn parse_config(text: &str) -> Result<GaeConfig> {
    let cfg: GaeConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Renders a configuration in the same key=value form `parse_config` reads.
pub fn render_config(cfg: &GaeConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}
