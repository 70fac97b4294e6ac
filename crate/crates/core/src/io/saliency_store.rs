//! Saliency-map dataset on disk: a JSON-lines index plus one matrix file per
//! representation and per map.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, read_matrix, write_file, write_matrix};
use crate::saliency::{SaliencyDataset, SaliencyMap, SaliencyPair, SaliencyProvenance};

pub const SALIENCY_INDEX: &str = "saliency.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRecord {
    pub id: String,
    pub x: String,
    pub s: String,
    pub t: usize,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    SaliencyHeader {
        version: u32,
        seed: u64,
        config_digest: String,
        provenance: SaliencyProvenance,
    },
    Pair(SaliencyRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyManifest {
    pub seed: u64,
    pub config_digest: String,
    pub provenance: SaliencyProvenance,
    pub records: Vec<SaliencyRecord>,
}

fn line_error(line: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        what: "saliency index",
        offset: line as u64,
        reason: reason.into(),
    }
}

pub fn parse_saliency_manifest(text: &str) -> Result<SaliencyManifest> {
    let mut head = None;
    let mut records = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Line>(raw).map_err(|e| line_error(ln, e.to_string()))? {
            Line::SaliencyHeader {
                version,
                seed,
                config_digest,
                provenance,
            } => {
                if head.is_some() || !records.is_empty() {
                    return Err(line_error(ln, "header must be the first record and appear once"));
                }
                if version != 1 {
                    return Err(line_error(ln, format!("unsupported version {version}")));
                }
                head = Some((seed, config_digest, provenance));
            }
            Line::Pair(r) => {
                if head.is_none() {
                    return Err(line_error(ln, "pair before header"));
                }
                if !ids.insert(r.id.clone()) {
                    return Err(line_error(ln, format!("duplicate id {:?}", r.id)));
                }
                records.push(r);
            }
        }
    }
    let (seed, config_digest, provenance) = head.ok_or_else(|| line_error(0, "missing header"))?;
    Ok(SaliencyManifest {
        seed,
        config_digest,
        provenance,
        records,
    })
}

/// Writes `dir/saliency.jsonl` and `dir/{x,s}/<id>.rshd`.
pub fn save_saliency_dataset(dir: &Path, ds: &SaliencyDataset, ids: &[String], seed: u64) -> Result<()> {
    if ids.len() != ds.len() {
        return Err(Error::dim("saliency ids", &[ds.len()], &[ids.len()]));
    }
    let provenance = ds.provenance().clone();
    let mut text = serde_json::to_string(&Line::SaliencyHeader {
        version: 1,
        seed,
        config_digest: crate::io::digest_json(&provenance),
        provenance,
    })
    .expect("serializable");
    text.push('\n');
    for (id, pair) in ids.iter().zip(ds.pairs()) {
        let rec = SaliencyRecord {
            id: id.clone(),
            x: format!("x/{id}.rshd"),
            s: format!("s/{id}.rshd"),
            t: pair.x.rows(),
            d: pair.x.cols(),
        };
        write_matrix(dir.join(&rec.x), &pair.x)?;
        write_matrix(dir.join(&rec.s), pair.s.values())?;
        text.push_str(&serde_json::to_string(&Line::Pair(rec)).expect("serializable"));
        text.push('\n');
    }
    write_file(&dir.join(SALIENCY_INDEX), text.as_bytes())
}

/// Reads a dataset written by [`save_saliency_dataset`]; returns it with its ids.
pub fn load_saliency_dataset(dir: &Path) -> Result<(SaliencyDataset, Vec<String>)> {
    let index = dir.join(SALIENCY_INDEX);
    let bytes = read_file(&index)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| line_error(e.valid_up_to(), "not UTF-8"))?;
    let m = parse_saliency_manifest(text)?;
    let mut pairs = Vec::with_capacity(m.records.len());
    for (i, r) in m.records.iter().enumerate() {
        let x = read_matrix(dir.join(&r.x))?;
        let s = read_matrix(dir.join(&r.s))?;
        if x.shape() != [r.t, r.d] {
            return Err(Error::at_sample(
                i,
                Error::dim("saliency record", &[r.t, r.d], x.shape()),
            ));
        }
        let s = SaliencyMap::new(s).map_err(|e| Error::at_sample(i, e))?;
        pairs.push(SaliencyPair { x, s });
    }
    let ids = m.records.into_iter().map(|r| r.id).collect();
    Ok((SaliencyDataset::new(pairs, m.provenance)?, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saliency::SmoothGradConfig;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let prov = SaliencyProvenance {
            sid_checkpoint: "abcd".into(),
            smoothgrad: SmoothGradConfig::default(),
            sigma_abs: 0.1,
        };
        let pairs = (0..3)
            .map(|i| SaliencyPair {
                x: Tensor::filled(2 + i, 3, i as f64 - 1.0),
                s: SaliencyMap::new(Tensor::filled(2 + i, 3, i as f64)).unwrap(),
            })
            .collect();
        let ds = SaliencyDataset::new(pairs, prov).unwrap();
        let ids: Vec<String> = (0..3).map(|i| format!("u{i}")).collect();
        save_saliency_dataset(dir.path(), &ds, &ids, 5).unwrap();
        let (back, back_ids) = load_saliency_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back_ids, ids);
    }
}
