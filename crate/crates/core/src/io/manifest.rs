//! Line-delimited JSON dataset manifest.
//!
//! The first line is a header record; every following line describes one
//! utterance whose matrix lives in a separate file, relative to the manifest.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::io::{read_file, read_matrix, write_file};
use crate::synth::Standardization;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: u32,
    pub seed: u64,
    pub config_digest: String,
    /// Dataset-level configuration, e.g. the generator settings.
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub standardization: Option<Standardization>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub speaker: usize,
    #[serde(default)]
    pub content: Option<usize>,
    pub t: usize,
    pub d: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(ManifestHeader),
    Utterance(ManifestRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

fn line_error(line: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        what: "manifest",
        offset: line as u64,
        reason: reason.into(),
    }
}

impl Manifest {
    /// Parses manifest text. Offsets in errors are 1-based line numbers.
    pub fn parse(text: &str) -> Result<Manifest> {
        let mut header = None;
        let mut records = Vec::new();
        let mut ids = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let line: Line = serde_json::from_str(raw).map_err(|e| line_error(ln, e.to_string()))?;
            match line {
                Line::Header(h) => {
                    if header.is_some() || !records.is_empty() {
                        return Err(line_error(ln, "header must be the first record and appear once"));
                    }
                    if h.version != MANIFEST_VERSION {
                        return Err(line_error(ln, format!("unsupported manifest version {}", h.version)));
                    }
                    header = Some(h);
                }
                Line::Utterance(r) => {
                    if header.is_none() {
                        return Err(line_error(ln, "utterance before header"));
                    }
                    if r.t == 0 || r.d == 0 {
                        return Err(line_error(ln, "zero-sized utterance"));
                    }
                    if !ids.insert(r.id.clone()) {
                        return Err(line_error(ln, format!("duplicate id {:?}", r.id)));
                    }
                    records.push(r);
                }
            }
        }
        let header = header.ok_or_else(|| line_error(0, "missing header"))?;
        Ok(Manifest { header, records })
    }

    pub fn to_text(&self) -> String {
        let mut out = serde_json::to_string(&Line::Header(self.header.clone())).expect("serializable");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(&Line::Utterance(r.clone())).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format {
            what: "manifest",
            offset: e.valid_up_to() as u64,
            reason: "not UTF-8".into(),
        })?;
        Manifest::parse(text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn speakers(&self) -> BTreeSet<usize> {
        self.records.iter().map(|r| r.speaker).collect()
    }

    /// Loads every referenced matrix (paths relative to `base`) and checks its shape.
    pub fn load_matrices(&self, base: &Path) -> Result<Vec<Tensor>> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let p: PathBuf = base.join(&r.path);
                let t = read_matrix(&p)?;
                if t.shape() != [r.t, r.d] {
                    return Err(Error::at_sample(
                        i,
                        Error::dim("manifest record", &[r.t, r.d], t.shape()),
                    ));
                }
                Ok(t)
            })
            .collect()
    }

    /// `(x, speaker)` samples.
    pub fn load_speaker_samples(&self, base: &Path) -> Result<Vec<Sample>> {
        Ok(self
            .load_matrices(base)?
            .into_iter()
            .zip(&self.records)
            .map(|(x, r)| Sample::new(x, r.speaker))
            .collect())
    }

    /// `(x, content)` samples; every record must have a content label.
    pub fn load_content_samples(&self, base: &Path) -> Result<Vec<Sample>> {
        if let Some(r) = self.records.iter().find(|r| r.content.is_none()) {
            return Err(Error::contract(format!("utterance {} has no content label", r.id)));
        }
        Ok(self
            .load_matrices(base)?
            .into_iter()
            .zip(&self.records)
            .map(|(x, r)| Sample::new(x, r.content.expect("checked")))
            .collect())
    }
}
