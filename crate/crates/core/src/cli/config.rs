use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{BcConfig, MdnConfig};
use crate::error::{Error, Result};
use crate::eval::EvalProtocol;
use crate::model::ModelConfig;
use crate::simenv::HybridTaskSpec;
use crate::train::TrainConfig;

/// A preset name or a full task description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskRef {
    Preset(String),
    Spec(Box<HybridTaskSpec>),
}

impl TaskRef {
    pub fn resolve(&self) -> Result<HybridTaskSpec> {
        let spec = match self {
            TaskRef::Preset(name) => HybridTaskSpec::preset(name)?,
            TaskRef::Spec(s) => (**s).clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Switching latent feedback controllers.
    Slfc,
    Bc,
    Mdn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { seeds: vec![0, 1, 2, 3, 4] }
    }
}

/// Everything a command can read from the JSON config file. Observation
/// and action sizes of the policies always come from the task; the run
/// seed is copied into the training and evaluation sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskRef,
    pub n_demos: usize,
    pub seed: u64,
    pub policy: PolicyKind,
    pub model: ModelConfig,
    pub bc: BcConfig,
    pub mdn: MdnConfig,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskRef::Preset("smoke".into()),
            n_demos: 200,
            seed: 0,
            policy: PolicyKind::Slfc,
            model: ModelConfig::default(),
            bc: BcConfig::default(),
            mdn: MdnConfig::default(),
            train: TrainConfig::default(),
            eval: EvalProtocol::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Fills derived fields from the task and seed and checks every
    /// section.
    pub fn finalize(&mut self) -> Result<HybridTaskSpec> {
        let spec = self.task.resolve()?;
        let (o, a) = (spec.obs_dim(), spec.action_dim());
        self.model.obs_dim = o;
        self.model.action_dim = a;
        self.bc.obs_dim = o;
        self.bc.action_dim = a;
        self.mdn.obs_dim = o;
        self.mdn.action_dim = a;
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
        if self.n_demos == 0 {
            return Err(Error::config("n_demos must be at least 1"));
        }
        if self.eval.episodes == 0 {
            return Err(Error::config("episodes must be at least 1"));
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"epochs": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epoch": 3}}"#).is_err());
    }

    #[test]
    fn task_can_be_inline() {
        let spec = serde_json::to_value(HybridTaskSpec::writing()).unwrap();
        let text = serde_json::json!({ "task": spec, "seed": 4 }).to_string();
        let mut c = RunConfig::from_json(&text).unwrap();
        let s = c.finalize().unwrap();
        assert_eq!(s, HybridTaskSpec::writing());
        assert_eq!(c.model.obs_dim, 8);
        assert_eq!((c.train.seed, c.eval.seed), (4, 4));
    }

    #[test]
    fn bad_sections_rejected() {
        let mut c = RunConfig::from_json(r#"{"task": "nope"}"#).unwrap();
        assert!(c.finalize().is_err());
        let mut c = RunConfig::from_json(r#"{"eval": {"episodes": 0}}"#).unwrap();
        assert!(matches!(c.finalize(), Err(Error::Config(_))));
    }
}
