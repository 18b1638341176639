use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerState, TrainConfig, Trainer};
use crate::dataio::{read_container, write_container, Blob, CaseRecord, DType, NormStats};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamSet};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ABCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    stats: NormStats,
}

/// Everything needed to resume training or evaluate: weights, EMA weights,
/// Lion momenta, step count and standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub step: u64,
    pub stats: NormStats,
    pub params: ParamSet,
    pub ema: ParamSet,
    pub lion_m: ParamSet,
}

const GROUPS: [&str; 3] = ["model", "ema", "lion_m"];

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            model_config: t.model.config.clone(),
            train_config: t.cfg.clone(),
            step: t.step,
            stats: t.stats.clone(),
            params: t.model.params.clone(),
            ema: t.ema.clone(),
            lion_m: t.opt.m.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = Header {
            model: self.model_config.clone(),
            train: self.train_config.clone(),
            step: self.step,
            stats: self.stats.clone(),
        };
        let mut blobs = Vec::new();
        for (group, set) in GROUPS.iter().zip([&self.params, &self.ema, &self.lion_m]) {
            for (name, t) in set.names().iter().zip(set.tensors()) {
                blobs.push(Blob::new(format!("{group}.{name}"), DType::F64, t.shape.clone(), t.data.clone()));
            }
        }
        write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &blobs)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (header, blobs) = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let h: Header = serde_json::from_value(header).map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
        let template = Model::new(h.model.clone())?.params;
        let mut sets = Vec::new();
        let mut it = blobs.into_iter();
        for group in GROUPS {
            let mut set = ParamSet::default();
            for (name, t) in template.names().iter().zip(template.tensors()) {
                let b = it.next().ok_or_else(|| Error::Corrupt(format!("missing blob {group}.{name}")))?;
                if b.name != format!("{group}.{name}") || b.shape != t.shape || b.dtype != DType::F64 {
                    return Err(Error::Corrupt(format!("unexpected blob `{}` {:?}", b.name, b.shape)));
                }
                set.push(name.clone(), Tensor::new(b.shape, b.values)?);
            }
            sets.push(set);
        }
        if it.next().is_some() {
            return Err(Error::Corrupt("extra blobs in checkpoint".into()));
        }
        let lion_m = sets.pop().unwrap();
        let ema = sets.pop().unwrap();
        let params = sets.pop().unwrap();
        Ok(Self { model_config: h.model, train_config: h.train, step: h.step, stats: h.stats, params, ema, lion_m })
    }

    pub fn model(&self) -> Result<Model> {
        Model::with_params(self.model_config.clone(), self.params.clone())
    }

    pub fn ema_model(&self) -> Result<Model> {
        Model::with_params(self.model_config.clone(), self.ema.clone())
    }

    /// Rebuilds the trainer this checkpoint was taken from.
    pub fn into_trainer(self, train_cases: Vec<CaseRecord>) -> Result<Trainer> {
        let model = self.model()?;
        let opt = OptimizerState {
            m: self.lion_m,
            beta1: self.train_config.beta1,
            beta2: self.train_config.beta2,
            weight_decay: self.train_config.weight_decay,
        };
        Trainer::from_parts(model, self.ema, opt, self.step, self.train_config, train_cases, self.stats)
    }
}
