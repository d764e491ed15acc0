//! Run configuration: one TOML document describing data, model, optimizer,
//! training budgets and the evaluation protocol.

use std::path::Path;

use answerme_core::model::ModelConfig;
use answerme_core::optim::OptimizerConfig;
use answerme_core::synth::{FamilyKind, SceneSpec};
use answerme_core::tasks::{MlmTarget, PretrainTask};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub universe_seed: u64,
    pub universe_size: u64,
    pub scene: SceneSpec,
    pub families: Vec<FamilyKind>,
    pub train_per_family: usize,
    pub eval_per_family: usize,
    pub caption_pairs: usize,
    pub vocab_max_size: usize,
    /// Rendered samples per family feeding vocabulary construction.
    pub corpus_samples: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            universe_seed: 7,
            universe_size: 1 << 40,
            scene: SceneSpec::default(),
            families: FamilyKind::ALL.to_vec(),
            train_per_family: 4000,
            eval_per_family: 500,
            caption_pairs: 4000,
            vocab_max_size: 512,
            corpus_samples: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSpec {
    pub tasks: Vec<PretrainTask>,
    pub mlm_target: MlmTarget,
    pub batch_size: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            tasks: PretrainTask::ALL.to_vec(),
            mlm_target: MlmTarget::default(),
            batch_size: 24,
            steps: 1000,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    pub families: Vec<FamilyKind>,
    pub batch_size: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            families: vec![
                FamilyKind::VqaAttr,
                FamilyKind::Count,
                FamilyKind::Entail,
                FamilyKind::Compositional,
            ],
            batch_size: 24,
            steps: 4000,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ProtocolKind {
    ZeroShot,
    Mixture,
    Forgetting,
    PretrainAblation,
    FusionAblation,
    DetectEval,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 6] = [
        ProtocolKind::ZeroShot,
        ProtocolKind::Mixture,
        ProtocolKind::Forgetting,
        ProtocolKind::PretrainAblation,
        ProtocolKind::FusionAblation,
        ProtocolKind::DetectEval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::ZeroShot => "zero_shot",
            ProtocolKind::Mixture => "mixture",
            ProtocolKind::Forgetting => "forgetting",
            ProtocolKind::PretrainAblation => "pretrain_ablation",
            ProtocolKind::FusionAblation => "fusion_ablation",
            ProtocolKind::DetectEval => "detect_eval",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// One experiment. Field use per kind:
///
/// * `zero_shot`: `train_families` is an ordered pool; each entry of
///   `mixture_sizes` trains on that many leading families and is scored on
///   every `held_out` family.
/// * `mixture`: one mixture over `train_families` plus a single-task run per
///   family.
/// * `forgetting`: the mixture over `train_families` is fine-tuned on
///   `finetune_family` for `finetune_steps`; `held_out` lists the families
///   watched for forgetting (they must be in the mixture).
/// * `pretrain_ablation`: five pretraining task sets, each followed by the
///   same downstream mixture over `train_families`.
/// * `fusion_ablation`: the mixture trained once per fusion kind.
/// * `detect_eval`: `train_families` is the question-answering mixture;
///   detection is scored from scratch, after pretraining, mixed in, and
///   zero-shot.
///
/// Every training run takes `steps_per_family` steps per mixture member, so
/// each family sees the same number of examples whatever the mixture size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    pub train_families: Vec<FamilyKind>,
    pub held_out: Vec<FamilyKind>,
    pub mixture_sizes: Vec<usize>,
    pub finetune_family: Option<FamilyKind>,
    pub batch_size: usize,
    pub steps_per_family: u64,
    pub finetune_steps: u64,
    pub pretrain_steps: u64,
    pub seeds: Vec<u64>,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            kind: ProtocolKind::ZeroShot,
            train_families: vec![
                FamilyKind::Count,
                FamilyKind::Entail,
                FamilyKind::Compositional,
                FamilyKind::NlvrPair,
                FamilyKind::Caption,
                FamilyKind::RegionDesc,
                FamilyKind::MatchYesno,
                FamilyKind::DetectText,
            ],
            held_out: vec![FamilyKind::VqaAttr],
            mixture_sizes: vec![4, 8],
            finetune_family: None,
            batch_size: 24,
            steps_per_family: 400,
            finetune_steps: 400,
            pretrain_steps: 0,
            seeds: vec![0, 1, 2],
        }
    }
}

impl ProtocolSpec {
    /// The family layout used for `kind` in the standard suite, with seeds
    /// and budgets taken from `budgets`. The batch size is rounded up to a
    /// multiple of the mixture size.
    pub fn preset(kind: ProtocolKind, budgets: &ProtocolSpec) -> Self {
        use FamilyKind::*;
        let (train, held, finetune): (&[FamilyKind], &[FamilyKind], Option<FamilyKind>) = match kind {
            ProtocolKind::ZeroShot => (
                &[Count, Entail, Compositional, NlvrPair, Caption, RegionDesc, MatchYesno, DetectText],
                &[VqaAttr],
                None,
            ),
            ProtocolKind::Mixture => (&[VqaAttr, Count, Entail, Compositional], &[], None),
            ProtocolKind::Forgetting => (
                &[VqaAttr, Count, Entail, Compositional, NlvrPair, Caption, RegionDesc, MatchYesno, DetectText],
                &[VqaAttr],
                Some(MatchYesno),
            ),
            ProtocolKind::PretrainAblation => (&[VqaAttr, Entail], &[], None),
            ProtocolKind::FusionAblation => (&[VqaAttr, Count], &[], None),
            ProtocolKind::DetectEval => (&[VqaAttr, RegionDesc, Caption], &[DetectText], None),
        };
        Self {
            kind,
            train_families: train.to_vec(),
            held_out: held.to_vec(),
            mixture_sizes: if kind == ProtocolKind::ZeroShot { vec![4, 8] } else { Vec::new() },
            finetune_family: finetune,
            batch_size: budgets.batch_size.next_multiple_of(train.len()),
            ..budgets.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataSpec,
    pub pretrain: PretrainSpec,
    pub mixture: MixtureConfig,
    pub protocol: ProtocolSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            data: DataSpec::default(),
            pretrain: PretrainSpec::default(),
            mixture: MixtureConfig::default(),
            protocol: ProtocolSpec::default(),
        }
    }
}

impl RunConfig {
    /// Settings sized for a single CPU core: a narrower model than the
    /// default toy config, smaller datasets and short budgets.
    pub fn compact() -> Self {
        let mut c = Self::default();
        c.model = ModelConfig {
            d_model: 32,
            conv_channels: vec![8, 16, 16],
            text_heads: 2,
            fusion_heads: 2,
            decoder_heads: 2,
            ff_dim: 64,
            ..ModelConfig::default()
        };
        c.data.train_per_family = 3000;
        c.pretrain.steps = 400;
        c.mixture.steps = 1600;
        c.mixture.checkpoint_every = 400;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// Sets the model's vocabulary size to the built vocabulary and checks
    /// everything that can be checked without data.
    pub fn resolve(mut self, vocab_len: usize) -> Result<Self> {
        self.model.vocab_size = vocab_len;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.scene.validate()?;
        if self.model.image_height != self.data.scene.image_height || self.model.image_width != self.data.scene.image_width
        {
            return Err(AppError::Config(format!(
                "model expects {}x{} images, scenes render {}x{}",
                self.model.image_height, self.model.image_width, self.data.scene.image_height, self.data.scene.image_width
            )));
        }
        if self.data.eval_per_family == 0 || self.data.train_per_family == 0 {
            return Err(AppError::Config("dataset sizes must be positive".into()));
        }
        if self.protocol.seeds.is_empty() {
            return Err(AppError::Config("protocol needs at least one seed".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form (object keys sorted), so the
    /// hash does not depend on key order in the source file.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("run config serializes to JSON");
        let canonical = serde_json::to_string(&value).expect("JSON value serializes");
        hex(&Sha256::digest(canonical.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
