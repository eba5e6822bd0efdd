use std::collections::BTreeMap;
use std::path::Path;

use anyhow::anyhow;
use iwgae::io;
use iwgae::Dataset;
use sha2::{Digest, Sha256};

use crate::failure::{Exit, Failure};

/// Reads input files, hashing each one before it is parsed.
#[derive(Default)]
pub struct Inputs {
    pub hashes: BTreeMap<String, String>,
}

impl Inputs {
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>, Failure> {
        let bytes = std::fs::read(path)
            .map_err(|e| anyhow!("cannot read {}: {e}", path.display()))
            .input()?;
        self.hashes
            .insert(path.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(bytes)
    }

    pub fn read_text(&mut self, path: &Path) -> Result<String, Failure> {
        let bytes = self.read(path)?;
        String::from_utf8(bytes)
            .map_err(|_| anyhow!("{}: not valid UTF-8", path.display()))
            .input()
    }

    /// Predictions with optional features attached.
    pub fn dataset(&mut self, path: &Path, features: Option<&Path>) -> Result<Dataset, Failure> {
        let bytes = self.read(path)?;
        let mut records = io::read_predictions(bytes.as_slice())
            .map_err(|e| anyhow!("{}: {e}", path.display()))
            .input()?;
        if let Some(fp) = features {
            let bytes = self.read(fp)?;
            let table = io::read_features(bytes.as_slice())
                .map_err(|e| anyhow!("{}: {e}", fp.display()))
                .input()?;
            io::attach_features(&mut records, &table)
                .map_err(|e| anyhow!("{}: {e}", fp.display()))
                .input()?;
        }
        Dataset::new(records)
            .map_err(|e| anyhow!("{}: {e}", path.display()))
            .input()
    }
}

/// Fails with exit code 2 unless every record carries a label.
pub fn require_labels(data: &Dataset, path: &Path) -> Result<(), Failure> {
    match data.unlabeled_count() {
        0 => Ok(()),
        n => Err(anyhow!("{}: {n} record(s) have no label; this file must be fully labeled", path.display())).input(),
    }
}
