//! Binary checkpoints with a JSON manifest.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic         8 bytes  "HOGRNCK\0"
//! version       u32
//! manifest_len  u64
//! manifest      manifest_len bytes of UTF-8 JSON
//! param_count   u32
//! per parameter:
//!   name_len u32, name bytes, rows u64, cols u64, rows·cols f64
//! adam_step     u64
//! per parameter, in the same order:
//!   first moment rows·cols f64, second moment rows·cols f64
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load round trip is exact.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numcore::{AdamConfig, DenseMatrix, OptimizerState, ParameterStore};
use crate::training::{TrainConfig, TrainOutcome};

pub const MAGIC: &[u8; 8] = b"HOGRNCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub vocab_fingerprint: String,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_valid_mrr: f64,
    pub parameters: Vec<ParamShape>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParameterStore,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn from_outcome(outcome: &TrainOutcome, train: &TrainConfig, vocab_fingerprint: &str) -> Self {
        let params = outcome.model.params.clone();
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                vocab_fingerprint: vocab_fingerprint.to_string(),
                train: train.clone(),
                model: outcome.model.config.clone(),
                adam: outcome.optimizer.config,
                best_epoch: outcome.best_epoch,
                epochs_run: outcome.epochs_run,
                best_valid_mrr: outcome.best_valid_mrr,
                parameters: shapes(&params),
            },
            params,
            optimizer: outcome.optimizer.clone(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.manifest.model.clone(), self.params.clone())
    }

    /// Fails unless the checkpoint was trained on a vocabulary with this fingerprint.
    pub fn check_vocabulary(&self, fingerprint: &str) -> Result<()> {
        if self.manifest.vocab_fingerprint != fingerprint {
            return Err(Error::Checkpoint(format!(
                "vocabulary mismatch: checkpoint {}, dataset {fingerprint}",
                self.manifest.vocab_fingerprint
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest encoding: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, p) in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
            put_f64s(&mut out, p.value.as_slice());
        }
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        for (m, v) in self
            .optimizer
            .first_moment
            .iter()
            .zip(&self.optimizer.second_moment)
        {
            put_f64s(&mut out, m.as_slice());
            put_f64s(&mut out, v.as_slice());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let len = r.len_u64()?;
        let manifest: Manifest = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let count = r.u32()? as usize;
        if count != manifest.parameters.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} parameters, blob has {count}",
                manifest.parameters.len()
            )));
        }
        let mut params = ParameterStore::new();
        for shape in &manifest.parameters {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let (rows, cols) = (r.len_u64()?, r.len_u64()?);
            if name != shape.name || rows != shape.rows || cols != shape.cols {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` ({rows}×{cols}) disagrees with manifest entry `{}` ({}×{})",
                    shape.name, shape.rows, shape.cols
                )));
            }
            if params.find(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
            }
            params.add(name, r.matrix(rows, cols)?);
        }
        let mut optimizer = OptimizerState::new(manifest.adam, &params);
        optimizer.step = r.u64()?;
        for (i, shape) in manifest.parameters.iter().enumerate() {
            optimizer.first_moment[i] = r.matrix(shape.rows, shape.cols)?;
            optimizer.second_moment[i] = r.matrix(shape.rows, shape.cols)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint data",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            manifest,
            params,
            optimizer,
        })
    }

    /// Writes the checkpoint and a readable copy of its manifest next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        let mpath = manifest_path(path);
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest encoding: {e}")))?;
        fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// `run.ckpt` → `run.manifest.json`
pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("manifest.json")
}

fn shapes(params: &ParameterStore) -> Vec<ParamShape> {
    params
        .iter()
        .map(|(_, p)| ParamShape {
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
        })
        .collect()
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} too large")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DenseMatrix> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint("matrix size overflows".into()))?;
        let data = self
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(DenseMatrix::from_vec(rows, cols, data)?)
    }
}
