//! Binary checkpoints: magic, JSON metadata, then the parameter bytes.
//!
//! ```text
//! "MITECK01" | u64 LE metadata length | metadata JSON | ParamSet bytes
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::MetaConfig;
use crate::datagen::Standardizer;
use crate::error::{Error, Result};
use crate::nets::{ByteReader, ParamSet, TaskKind};

const MAGIC: &[u8; 8] = b"MITECK01";

/// Everything needed to rebuild predictions from a saved model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: MetaConfig,
    pub target: usize,
    pub kind: TaskKind,
    pub k: usize,
    /// Covariate standardisation fitted on the training split.
    pub standardizer: Option<Standardizer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(16 + meta.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&self.params.to_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let len = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("metadata length overflow".into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)?;
        let (params, used) = ParamSet::from_bytes(r.rest())?;
        if used != r.rest().len() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        if let Some(s) = &meta.standardizer {
            if s.mean.len() != params.input_dim() {
                return Err(Error::Checkpoint("standardizer width does not match the network input".into()));
            }
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path.as_ref())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::init_params;
    use crate::numkit::RngStream;

    fn sample() -> Checkpoint {
        let config = MetaConfig {
            extractor_widths: vec![3],
            head_widths: vec![3, 2],
            ..MetaConfig::default()
        };
        let params = init_params(&config.architecture(2), &mut RngStream::new(4)).unwrap();
        Checkpoint {
            meta: CheckpointMeta {
                config,
                target: 1,
                kind: TaskKind::Classification,
                k: 2,
                standardizer: Some(Standardizer {
                    mean: vec![0.5, -1.0],
                    sd: vec![2.0, 1.0],
                }),
            },
            params,
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
