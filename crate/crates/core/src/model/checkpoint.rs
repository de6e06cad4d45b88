//! Versioned JSON container for parameters and optimizer state.
//!
//! Every tensor is stored by name with its shape and row-major data. The
//! same container holds the main model and the baselines, told apart by
//! `kind`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, ParamTree};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const FORMAT: &str = "slfc-ckpt-v1";
pub const KIND_MODEL: &str = "slfc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn from_matrix(m: &Matrix) -> Self {
        TensorRecord {
            shape: [m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        Matrix::from_vec(self.shape[0], self.shape[1], self.data.clone())
    }
}

pub type TensorMap = BTreeMap<String, TensorRecord>;

/// Optimizer and RNG position needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub adam_step: u64,
    pub adam_m: TensorMap,
    pub adam_v: TensorMap,
    pub seed: u64,
    /// Number of completed epochs; the next epoch uses this as its stream.
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub kind: String,
    pub config: serde_json::Value,
    pub params: TensorMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_state: Option<TrainState>,
}

/// Named copies of every tensor of `tree`.
pub fn tensor_map<P: ParamTree + ?Sized>(tree: &P) -> TensorMap {
    let mut out = TensorMap::new();
    tree.visit(&mut |name, m| {
        out.insert(name.to_string(), TensorRecord::from_matrix(m));
    });
    out
}

/// Overwrites every tensor of `tree` from `map`, requiring an exact match
/// of names and shapes.
pub fn restore_tensors<P: ParamTree + ?Sized>(tree: &mut P, map: &TensorMap) -> Result<()> {
    let mut err = None;
    let mut used = 0;
    tree.visit_mut(&mut |name, m| {
        if err.is_some() {
            return;
        }
        match map.get(name) {
            None => err = Some(Error::Parse(format!("checkpoint lacks tensor {name}"))),
            Some(rec) if rec.shape != [m.rows(), m.cols()] => {
                err = Some(Error::Parse(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    rec.shape,
                    [m.rows(), m.cols()]
                )))
            }
            Some(rec) => match rec.to_matrix() {
                Ok(v) => {
                    *m = v;
                    used += 1;
                }
                Err(e) => err = Some(Error::Parse(format!("tensor {name}: {e}"))),
            },
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if used != map.len() {
        return Err(Error::Parse(format!(
            "checkpoint has {} tensors, model uses {used}",
            map.len()
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new<C: Serialize, P: ParamTree + ?Sized>(kind: &str, config: &C, params: &P) -> Result<Self> {
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("{kind} parameters")));
        }
        Ok(Checkpoint {
            format: FORMAT.to_string(),
            kind: kind.to_string(),
            config: serde_json::to_value(config).map_err(|e| Error::Parse(e.to_string()))?,
            params: tensor_map(params),
            train_state: None,
        })
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Parse(format!("checkpoint config: {e}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Parse(format!(
                "checkpoint holds a {:?} model, expected {kind:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
        if ck.format != FORMAT {
            return Err(Error::Parse(format!(
                "unsupported checkpoint format {:?} (expected {FORMAT:?})",
                ck.format
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

impl ModelParams {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(KIND_MODEL, &self.config, self)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(KIND_MODEL)?;
        let config: ModelConfig = ck.config()?;
        // Shapes come from the config; values are overwritten below.
        let mut params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
        restore_tensors(&mut params, &ck.params)?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
