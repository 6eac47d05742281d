//! Checkpoint container.
//!
//! Layout: the 8-byte magic `AUXCKPT1`, a little-endian `u64` header length, a JSON header,
//! then every tensor as raw little-endian floats in header order (parameters, then the Adam
//! first and second moments when present).

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use auxcount_core::losses::LossComponents;
use auxcount_core::model::CountingModel;
use auxcount_core::nn::{Adam, AdamConfig};
use auxcount_core::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"AUXCKPT1";
pub const VERSION: u32 = 1;

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss: LossComponents<f64>,
    pub train_seconds: f64,
    pub val_mae: Option<f64>,
    pub val_rmse: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    config: RunConfig,
    epoch: usize,
    step: usize,
    best_val_mae: Option<f64>,
    history: Vec<EpochRecord>,
    params: Vec<TensorEntry>,
    adam: Option<AdamHeader>,
}

/// A restorable training state.
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub epoch: usize,
    pub step: usize,
    pub best_val_mae: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub params: Vec<(String, Tensor<T>)>,
    pub adam: Option<Adam<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            version: VERSION,
            dtype: T::DTYPE.to_string(),
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            best_val_mae: self.best_val_mae,
            history: self.history.clone(),
            params: self.params.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
            adam: self.adam.as_ref().map(|a| AdamHeader { config: a.config, step: a.step }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        let mut put = |t: &Tensor<T>| t.data().iter().for_each(|&v| v.write_le(&mut bytes));
        self.params.iter().for_each(|(_, t)| put(t));
        if let Some(a) = &self.adam {
            a.first.iter().chain(&a.second).for_each(&mut put);
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        // Write then rename so an interrupted save never leaves a truncated checkpoint.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            bail!("{} is not a checkpoint", path.display());
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).context("truncated checkpoint header")?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start]).context("corrupt checkpoint header")?;
        if header.version != VERSION {
            bail!("unsupported checkpoint version {}", header.version);
        }
        if header.dtype != T::DTYPE {
            bail!("checkpoint holds {} values, expected {}", header.dtype, T::DTYPE);
        }
        let mut offset = body_start;
        let mut take = |shape: &[usize]| -> Result<Tensor<T>> {
            let n: usize = shape.iter().product();
            let end = offset + n * T::BYTES;
            let raw = bytes.get(offset..end).context("truncated checkpoint payload")?;
            offset = end;
            Ok(Tensor::from_vec(shape, raw.chunks(T::BYTES).map(T::read_le).collect())?)
        };
        let params = header
            .params
            .iter()
            .map(|e| Ok((e.name.clone(), take(&e.shape)?)))
            .collect::<Result<Vec<_>>>()?;
        let adam = match header.adam {
            Some(a) => {
                let first = header.params.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
                let second = header.params.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
                Some(Adam { config: a.config, step: a.step, first, second })
            }
            None => None,
        };
        if offset != bytes.len() {
            bail!("checkpoint has {} unexpected trailing bytes", bytes.len() - offset);
        }
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            best_val_mae: header.best_val_mae,
            history: header.history,
            params,
            adam,
        })
    }

    /// Rebuilds the model described by the stored config and loads its parameters.
    pub fn model(&self) -> Result<CountingModel<T>> {
        let mut model = CountingModel::new(&self.config.model, self.config.optim.seed)?;
        if model.store.len() != self.params.len() {
            bail!(
                "checkpoint has {} tensors but the configured model has {}",
                self.params.len(),
                model.store.len()
            );
        }
        model.store.load_named(&self.params)?;
        Ok(model)
    }
}
