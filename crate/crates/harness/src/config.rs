//! Declarative run configuration. Every field has a default, so an empty
//! document is a valid config; unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hybrid_core::checkpoint::sha256_hex;
use hybrid_core::conversion::InitMode;
use hybrid_core::corpus::VOCAB;
use hybrid_core::distill::{LossWeights, StageConfig};
use hybrid_core::optim::OptimConfig;
use hybrid_core::HybridModelSpec;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub teacher: TrainSettings,
    pub convert: ConvertConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub spec: SpecConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            teacher: TrainSettings {
                steps: 200,
                batch_size: 8,
                lr: 3e-3,
                warmup_steps: 20,
                weight_decay: 0.0,
                grad_clip: Some(1.0),
            },
            convert: ConvertConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            spec: SpecConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// Text source: a UTF-8 file, or the built-in synthetic language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: Option<PathBuf>,
    pub synthetic_bytes: usize,
    pub synthetic_seed: u64,
    pub seq_len: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic_bytes: 300_000,
            synthetic_seed: 0,
            seq_len: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub mlp_hidden: usize,
    /// `N'`; defaults to the head dimension.
    pub state_dim: Option<usize>,
    pub conv_len: usize,
    pub rope: Option<f64>,
    pub scale_by_model_dim: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            layers: 4,
            heads: 4,
            kv_heads: 2,
            mlp_hidden: 256,
            state_dim: None,
            conv_len: 4,
            rope: None,
            scale_by_model_dim: false,
        }
    }
}

impl ModelConfig {
    pub fn teacher_spec(&self) -> HybridModelSpec {
        let mut s = HybridModelSpec::teacher(VOCAB, self.d_model, self.layers, self.heads, self.kv_heads, self.mlp_hidden);
        if let Some(ns) = self.state_dim {
            s.state_dim = ns;
        }
        s.conv_len = self.conv_len;
        s.rope = self.rope;
        s.scale_by_model_dim = self.scale_by_model_dim;
        s
    }
}

/// Optimizer loop settings shared by every training command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 4,
            lr: 1e-3,
            warmup_steps: 10,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainSettings {
    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            ..OptimConfig::with_lr(self.lr)
        }
    }

    pub fn stage(&self, weights: LossWeights, freeze_mlp: bool, seed: u64) -> StageConfig {
        StageConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            optim: self.optim(),
            weights,
            freeze_mlp,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvertConfig {
    pub attention_fraction: f64,
    pub init: InitMode,
    /// Intermediate fractions visited before `attention_fraction`, each
    /// followed by `stage_steps` KD steps. Empty means direct conversion.
    pub schedule: Vec<f64>,
    pub stage_steps: usize,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        Self {
            attention_fraction: 0.5,
            init: InitMode::Attention,
            schedule: Vec::new(),
            stage_steps: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub prompts: usize,
    pub prompt_len: usize,
    pub max_len: usize,
    /// Sampling temperature for pseudo-labels; absent means greedy.
    pub temperature: Option<f64>,
    pub cache_logits: bool,
    pub weights: LossWeights,
    pub freeze_mlp: bool,
    pub kd: TrainSettings,
    pub sft: TrainSettings,
    pub dpo: TrainSettings,
    /// Token-swap rate for dispreferred continuations.
    pub rho: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            prompts: 256,
            prompt_len: 32,
            max_len: 32,
            temperature: None,
            cache_logits: true,
            weights: LossWeights::default(),
            freeze_mlp: true,
            kd: TrainSettings::default(),
            sft: TrainSettings {
                steps: 100,
                ..TrainSettings::default()
            },
            dpo: TrainSettings {
                steps: 50,
                lr: 1e-4,
                ..TrainSettings::default()
            },
            rho: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out sequences used for KL to the teacher.
    pub kl_sequences: usize,
    pub kl_seq_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            kl_sequences: 16,
            kl_seq_len: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub max_tokens: usize,
    pub prompts: usize,
    pub prompt_len: usize,
    pub runs: usize,
}

impl Default for SpecConfig {
    fn default() -> Self {
        Self {
            k: 4,
            max_tokens: 32,
            prompts: 20,
            prompt_len: 16,
            runs: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub teacher: TrainSettings,
    pub kd: TrainSettings,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            model: ModelConfig {
                d_model: 64,
                layers: 4,
                heads: 4,
                kv_heads: 2,
                mlp_hidden: 128,
                ..ModelConfig::default()
            },
            teacher: TrainSettings {
                steps: 200,
                batch_size: 8,
                lr: 3e-3,
                warmup_steps: 20,
                ..TrainSettings::default()
            },
            kd: TrainSettings {
                steps: 150,
                lr: 1e-3,
                ..TrainSettings::default()
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing run config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.teacher_spec().validate()?;
        self.distill.weights.validate()?;
        let f = self.convert.attention_fraction;
        anyhow::ensure!((0.0..=1.0).contains(&f), "attention_fraction must lie in [0, 1], got {f}");
        anyhow::ensure!(self.spec.k >= 1, "K must be at least 1");
        anyhow::ensure!(!self.ablate.seeds.is_empty(), "ablate.seeds must not be empty");
        Ok(())
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}
