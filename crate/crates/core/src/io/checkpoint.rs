//! Model checkpoints: JSON architecture/provenance header plus named matrices.
//!
//! Layout: `RSHK | version u16 | reserved u16 | header_len u32 | header JSON |
//! count u32 | count x (name_len u16 | name | matrix_len u64 | matrix file)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::matrix::{decode_from, encode_matrix};
use crate::io::{digest_bytes, read_file, write_file, Reader};
use crate::nn::{EmbedderConfig, EmbedderModel, Model, PooledClassifier, PseConfig, PseModel};
use crate::optim::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RSHK";
pub const CHECKPOINT_VERSION: u16 = 1;
const MAX_HEADER: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum Architecture {
    Sid { d: usize, classes: usize },
    Classifier { d: usize, classes: usize },
    Pse(PseConfig),
    Embedder(EmbedderConfig),
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Sid { .. } => "sid",
            Architecture::Classifier { .. } => "classifier",
            Architecture::Pse(_) => "pse",
            Architecture::Embedder(_) => "embedder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_digest: String,
    /// Validation loss of the saved parameters.
    pub validation_metric: f64,
    /// Digests of the inputs this model was trained from.
    #[serde(default)]
    pub inputs: Vec<String>,
    /// Stage-specific extras (e.g. label maps).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub provenance: Provenance,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn sid(model: &PooledClassifier, provenance: Provenance) -> Self {
        Checkpoint {
            architecture: Architecture::Sid {
                d: model.input_dim(),
                classes: model.num_classes(),
            },
            provenance,
            params: model.params().clone(),
        }
    }

    pub fn classifier(model: &PooledClassifier, provenance: Provenance) -> Self {
        Checkpoint {
            architecture: Architecture::Classifier {
                d: model.input_dim(),
                classes: model.num_classes(),
            },
            provenance,
            params: model.params().clone(),
        }
    }

    pub fn pse(model: &PseModel, provenance: Provenance) -> Self {
        Checkpoint {
            architecture: Architecture::Pse(*model.config()),
            provenance,
            params: model.params().clone(),
        }
    }

    pub fn embedder(model: &EmbedderModel, provenance: Provenance) -> Self {
        Checkpoint {
            architecture: Architecture::Embedder(*model.config()),
            provenance,
            params: model.params().clone(),
        }
    }

    fn wrong(&self, want: &str) -> Error {
        Error::Config(format!(
            "expected a {want} checkpoint, got {}",
            self.architecture.name()
        ))
    }

    pub fn into_sid(self) -> Result<PooledClassifier> {
        match self.architecture {
            Architecture::Sid { d, classes } => PooledClassifier::from_params(d, classes, self.params),
            _ => Err(self.wrong("sid")),
        }
    }

    pub fn into_classifier(self) -> Result<PooledClassifier> {
        match self.architecture {
            Architecture::Classifier { d, classes } => PooledClassifier::from_params(d, classes, self.params),
            _ => Err(self.wrong("classifier")),
        }
    }

    pub fn into_pse(self) -> Result<PseModel> {
        match self.architecture {
            Architecture::Pse(cfg) => PseModel::from_params(cfg, self.params),
            _ => Err(self.wrong("pse")),
        }
    }

    pub fn into_embedder(self) -> Result<EmbedderModel> {
        match self.architecture {
            Architecture::Embedder(cfg) => EmbedderModel::from_params(cfg, self.params),
            _ => Err(self.wrong("embedder")),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            architecture: self.architecture.clone(),
            provenance: self.provenance.clone(),
        })
        .expect("serializable");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let m = encode_matrix(t);
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            out.extend_from_slice(&m);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(4)? != CHECKPOINT_MAGIC {
            return r.fail("bad magic, expected RSHK");
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return r.fail(format!("unsupported version {version}"));
        }
        r.u16()?;
        let hlen = r.u32()? as usize;
        if hlen > MAX_HEADER {
            return r.fail(format!("header of {hlen} bytes is too large"));
        }
        let hstart = r.offset();
        let header: Header = match serde_json::from_slice(r.take(hlen)?) {
            Ok(h) => h,
            Err(e) => {
                return Err(Error::Format {
                    what: "checkpoint",
                    offset: hstart as u64,
                    reason: format!("header: {e}"),
                })
            }
        };
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = match std::str::from_utf8(r.take(nlen)?) {
                Ok(s) => s.to_string(),
                Err(_) => return r.fail("parameter name is not UTF-8"),
            };
            let mlen = r.u64()?;
            let start = r.offset();
            let mlen = usize::try_from(mlen).or_else(|_| r.fail("matrix length too large"))?;
            let body = r.take(mlen)?;
            let mut inner = Reader::new(body, "checkpoint");
            let t = decode_from(&mut inner).map_err(|e| match e {
                Error::Format { offset, reason, .. } => Error::Format {
                    what: "checkpoint",
                    offset: start as u64 + offset,
                    reason: format!("parameter {name}: {reason}"),
                },
                other => other,
            })?;
            if inner.remaining() != 0 {
                return r.fail(format!("parameter {name}: matrix length mismatch"));
            }
            params.push(name, t);
        }
        r.finish()?;
        Ok(Checkpoint {
            architecture: header.architecture,
            provenance: header.provenance,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let bytes = self.encode();
        write_file(path.as_ref(), &bytes)?;
        Ok(digest_bytes(&bytes))
    }

    /// Loads a checkpoint and returns it with the digest of its bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<(Checkpoint, String)> {
        let bytes = read_file(path.as_ref())?;
        Ok((Checkpoint::decode(&bytes)?, digest_bytes(&bytes)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::pse_forward;
    use crate::rng::{self, Purpose};
    use crate::tensor::Tensor;

    fn prov() -> Provenance {
        Provenance {
            seed: 1,
            config_digest: "cafe".into(),
            validation_metric: 0.5,
            inputs: vec![],
            extra: serde_json::Value::Null,
        }
    }

    #[test]
    fn pse_round_trip_reproduces_forward() {
        let m = PseModel::new(PseConfig::desk(5), 4).unwrap();
        let bytes = Checkpoint::pse(&m, prov()).encode();
        let back = Checkpoint::decode(&bytes).unwrap().into_pse().unwrap();
        let x = Tensor::matrix(3, 5, (0..15).map(|i| (i as f64).sin()).collect());
        let mut r = rng::stream(0, Purpose::Dropout, 0);
        let a = pse_forward(&m, &x, false, &mut r).unwrap();
        let b = pse_forward(&back, &x, false, &mut r).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn wrong_kind_is_config_error() {
        let m = PooledClassifier::random(3, 2, 0);
        let ck = Checkpoint::sid(&m, prov());
        assert!(matches!(ck.clone().into_pse(), Err(Error::Config(_))));
        assert_eq!(ck.into_sid().unwrap(), m);
    }

    #[test]
    fn truncation_is_reported() {
        let m = PooledClassifier::random(3, 2, 0);
        let bytes = Checkpoint::classifier(&m, prov()).encode();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Format { .. })));
        }
    }
}
