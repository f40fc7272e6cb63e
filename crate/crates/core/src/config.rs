//! Run configuration: a single TOML file with sections mirroring the
//! pipeline stages. Unknown keys are rejected so experiment records stay
//! trustworthy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{CategorySet, CountBinning};
use crate::encoders::VitConfig;
use crate::error::{CoreError, Result};
use crate::losses::LossConfig;
use crate::rats::Strategy;
use crate::synthdata::SynthConfig;
use crate::train::CosineSchedule;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 7 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// number of images generated by gen-data
    pub images: usize,
    /// held-out tail of the dataset used for evaluation
    pub holdout: usize,
    pub synth: SynthConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            images: 2000,
            holdout: 200,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub categories: Vec<String>,
    pub d_anchor: usize,
    /// count-bin truncation threshold
    pub n: usize,
    pub temperature: f64,
    /// crop / model input side M
    pub m_side: usize,
    pub ratios: Vec<f64>,
    pub vit: VitConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            categories: vec![
                "negative tumor cell".to_string(),
                "positive tumor cell".to_string(),
            ],
            d_anchor: 64,
            n: 4,
            temperature: 0.07,
            m_side: 70,
            ratios: vec![5.0 / 8.0, 0.75, 7.0 / 8.0, 1.0],
            vit: VitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum TeacherSpec {
    /// skill-controlled oracle with Gaussian count noise
    Synthetic { sigma: f64, seed: u64 },
    /// randomly initialized frozen transformer (a stand-in "big" encoder)
    RandomVit {
        seed: u64,
        d_enc: usize,
        blocks: usize,
        heads: usize,
        mlp_ratio: usize,
    },
    /// weights loaded from a tensor container (resolved against
    /// COUNTLAB_CACHE when relative)
    External { path: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeachersSection {
    pub specs: Vec<TeacherSpec>,
    /// epochs of projector pretraining per teacher (0 = keep init;
    /// synthetic teachers default to their exact paired projector)
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_images: usize,
}

impl Default for TeachersSection {
    fn default() -> Self {
        TeachersSection {
            specs: vec![
                TeacherSpec::Synthetic { sigma: 0.0, seed: 11 },
                TeacherSpec::Synthetic { sigma: 5.0, seed: 12 },
            ],
            pretrain_epochs: 0,
            pretrain_lr: 1e-3,
            pretrain_images: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgglomerateSection {
    pub epochs: usize,
    /// patches per batch; must be a multiple of the group size
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub strategy: Strategy,
    pub tdrop_keep: f64,
    pub per_group_selection: bool,
}

impl Default for AgglomerateSection {
    fn default() -> Self {
        AgglomerateSection {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            lr_min: 1e-6,
            warmup_epochs: 2,
            weight_decay: 0.01,
            strategy: Strategy::Rats,
            tdrop_keep: 0.5,
            per_group_selection: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    /// keep the encoder frozen during fine-tuning (the supported mode)
    pub freeze_encoder: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            lr_min: 1e-6,
            warmup_epochs: 2,
            freeze_encoder: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub teachers: TeachersSection,
    pub loss: LossConfig,
    pub agglomerate: AgglomerateSection,
    pub finetune: FinetuneSection,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CoreError::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CoreError::Config(format!("serialize: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synth.validate()?;
        let m = self.categories()?.len();
        self.loss.validate(m)?;
        let mut vit = self.model.vit.clone();
        vit.input_side = self.model.m_side;
        vit.validate()?;
        if self.model.ratios.is_empty() {
            return Err(CoreError::Config("ratio list is empty".into()));
        }
        let k = self.model.ratios.len();
        if self.agglomerate.batch_size % k != 0 {
            return Err(CoreError::Config(format!(
                "agglomerate.batch_size {} must be a multiple of the group size {k}",
                self.agglomerate.batch_size
            )));
        }
        if self.data.holdout >= self.data.images {
            return Err(CoreError::Config(format!(
                "holdout {} must be smaller than the dataset size {}",
                self.data.holdout, self.data.images
            )));
        }
        if self.teachers.specs.is_empty() {
            return Err(CoreError::Config("no teachers configured".into()));
        }
        if self.model.n < 1 {
            return Err(CoreError::Config("model.n must be >= 1".into()));
        }
        if self.model.temperature <= 0.0 {
            return Err(CoreError::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn categories(&self) -> Result<CategorySet> {
        CategorySet::new(self.model.categories.clone())
    }

    pub fn binning(&self) -> Result<CountBinning> {
        CountBinning::new(self.model.n)
    }

    /// ViT config with the input side pinned to the crop size M.
    pub fn vit_config(&self) -> VitConfig {
        let mut v = self.model.vit.clone();
        v.input_side = self.model.m_side;
        v
    }

    pub fn agglomerate_schedule(&self, steps_per_epoch: usize) -> CosineSchedule {
        CosineSchedule {
            base_lr: self.agglomerate.lr,
            min_lr: self.agglomerate.lr_min,
            warmup_steps: self.agglomerate.warmup_epochs * steps_per_epoch,
            total_steps: self.agglomerate.epochs * steps_per_epoch,
        }
    }

    pub fn finetune_schedule(&self, steps_per_epoch: usize) -> CosineSchedule {
        CosineSchedule {
            base_lr: self.finetune.lr,
            min_lr: self.finetune.lr_min,
            warmup_steps: self.finetune.warmup_epochs * steps_per_epoch,
            total_steps: self.finetune.epochs * steps_per_epoch,
        }
    }

    /// Train-split indices: everything before the holdout tail.
    pub fn train_indices(&self, dataset_len: usize) -> Vec<usize> {
        let end = dataset_len.saturating_sub(self.data.holdout);
        (0..end).collect()
    }

    /// Held-out indices: the dataset tail.
    pub fn holdout_indices(&self, dataset_len: usize) -> Vec<usize> {
        let start = dataset_len.saturating_sub(self.data.holdout);
        (start..dataset_len).collect()
    }
}
