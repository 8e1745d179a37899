use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::LoraConfig;
use crate::data::{Generator, Scheme, SplitSpec};
use crate::error::{AdeError, Result};
use crate::model::ModelConfig;
use crate::surgery::{AdjustMode, InitStrategy, Ranking};
use crate::training::{sha256_hex, TrainConfig};

/// Where a corpus comes from: a built-in generator or a text file with one
/// document per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSource {
    pub name: String,
    #[serde(default)]
    pub generator: Option<Generator>,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "CorpusSource::default_docs")]
    pub n_docs: usize,
    #[serde(default = "CorpusSource::default_chars")]
    pub doc_chars: usize,
}

impl CorpusSource {
    fn default_docs() -> usize {
        2000
    }
    fn default_chars() -> usize {
        256
    }

    pub fn generated(name: &str, generator: Generator, n_docs: usize, doc_chars: usize) -> Self {
        CorpusSource {
            name: name.into(),
            generator: Some(generator),
            path: None,
            n_docs,
            doc_chars,
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        match (&self.generator, &self.path) {
            (Some(_), None) => {
                if self.n_docs == 0 || self.doc_chars == 0 {
                    return Err(AdeError::config(field, "n_docs and doc_chars must be positive"));
                }
                Ok(())
            }
            (None, Some(p)) if p.exists() => Ok(()),
            (None, Some(p)) => Err(AdeError::config(field, format!("{} does not exist", p.display()))),
            _ => Err(AdeError::config(field, "set exactly one of generator or path")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default = "TaskConfig::default_count")]
    pub per_corpus: usize,
    #[serde(default = "TaskConfig::default_context")]
    pub context_len: usize,
    #[serde(default = "TaskConfig::default_option")]
    pub option_len: usize,
}

impl TaskConfig {
    fn default_count() -> usize {
        100
    }
    fn default_context() -> usize {
        24
    }
    fn default_option() -> usize {
        8
    }
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            per_corpus: Self::default_count(),
            context_len: Self::default_context(),
            option_len: Self::default_option(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "DataConfig::default_scheme")]
    pub scheme: Scheme,
    /// The pretraining distribution, watched for forgetting.
    pub general: CorpusSource,
    /// The continued-pretraining distribution.
    pub target: CorpusSource,
    #[serde(default)]
    pub split: SplitSpec,
    /// Share of CPT tokens drawn from the general corpus.
    #[serde(default)]
    pub duplicate_fraction: f64,
    #[serde(default)]
    pub tasks: TaskConfig,
}

impl DataConfig {
    fn default_scheme() -> Scheme {
        Scheme::Char
    }
}

/// Which model gets trained by `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArmConfig {
    /// From scratch on the general corpus, using the `pretrain` budget.
    Pretrain,
    FullCpt,
    Lora(LoraConfig),
    Ade(AdeTemplate),
}

impl ArmConfig {
    pub fn label(&self) -> &'static str {
        match self {
            ArmConfig::Pretrain => "pretrain",
            ArmConfig::FullCpt => "full_cpt",
            ArmConfig::Lora(_) => "lora",
            ArmConfig::Ade(_) => "ade",
        }
    }
}

/// Everything needed to turn an importance report into a plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdeTemplate {
    #[serde(default = "AdeTemplate::default_k")]
    pub k: usize,
    #[serde(default = "AdeTemplate::default_mode")]
    pub mode: AdjustMode,
    #[serde(default)]
    pub init: InitStrategy,
    #[serde(default)]
    pub ranking: Ranking,
    /// Share of the importance holdout scored.
    #[serde(default = "AdeTemplate::default_fraction")]
    pub importance_fraction: f64,
    #[serde(default)]
    pub include_embeddings: bool,
    #[serde(default)]
    pub include_head: bool,
}

impl AdeTemplate {
    fn default_k() -> usize {
        2
    }
    fn default_mode() -> AdjustMode {
        AdjustMode::FreezeAndExpand
    }
    fn default_fraction() -> f64 {
        1.0
    }
}

impl Default for AdeTemplate {
    fn default() -> Self {
        AdeTemplate {
            k: Self::default_k(),
            mode: Self::default_mode(),
            init: InitStrategy::default(),
            ranking: Ranking::default(),
            importance_fraction: Self::default_fraction(),
            include_embeddings: false,
            include_head: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReproduceConfig {
    #[serde(default = "ReproduceConfig::default_fractions")]
    pub duplicate_fractions: Vec<f64>,
    #[serde(default)]
    pub lora: LoraConfig,
    #[serde(default)]
    pub ade: AdeTemplate,
}

impl ReproduceConfig {
    fn default_fractions() -> Vec<f64> {
        vec![0.0, 0.1, 0.2]
    }
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        ReproduceConfig {
            duplicate_fractions: Self::default_fractions(),
            lora: LoraConfig::default(),
            ade: AdeTemplate::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "ExperimentConfig::default_output")]
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    /// Budget for training the base model.
    pub pretrain: TrainConfig,
    /// Budget for each continued-pretraining arm.
    pub train: TrainConfig,
    pub arm: ArmConfig,
    #[serde(default)]
    pub reproduce: ReproduceConfig,
}

impl ExperimentConfig {
    fn default_output() -> PathBuf {
        PathBuf::from("runs")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| AdeError::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AdeError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative corpus paths are taken relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        for src in [&mut cfg.data.general, &mut cfg.data.target] {
            if let Some(p) = &src.path {
                if p.is_relative() {
                    src.path = Some(base.join(p));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.general.validate("data.general")?;
        self.data.target.validate("data.target")?;
        if self.data.general.name == self.data.target.name {
            return Err(AdeError::config(
                "data.target.name",
                "must differ from data.general.name",
            ));
        }
        self.data.split.validate()?;
        let d = self.data.duplicate_fraction;
        if !(0.0..1.0).contains(&d) {
            return Err(AdeError::config(
                "data.duplicate_fraction",
                format!("must be in [0, 1), got {d}"),
            ));
        }
        for (field, t) in [("pretrain", &self.pretrain), ("train", &self.train)] {
            t.validate().map_err(|e| AdeError::config(field, e.to_string()))?;
            if t.seq_len - 1 > self.model.max_seq_len {
                return Err(AdeError::config(
                    format!("{field}.seq_len"),
                    format!("{} exceeds model.max_seq_len + 1", t.seq_len),
                ));
            }
        }
        if let Some(bad) = self
            .reproduce
            .duplicate_fractions
            .iter()
            .find(|f| !(0.0..1.0).contains(*f))
        {
            return Err(AdeError::config(
                "reproduce.duplicate_fractions",
                format!("{bad} outside [0, 1)"),
            ));
        }
        let k_ok = |k: usize| k >= 1 && k < self.model.n_blocks;
        if let ArmConfig::Ade(t) = &self.arm {
            if !k_ok(t.k) {
                return Err(AdeError::config(
                    "arm.k",
                    format!("must be in 1..{}", self.model.n_blocks),
                ));
            }
        }
        if !k_ok(self.reproduce.ade.k) {
            return Err(AdeError::config(
                "reproduce.ade.k",
                format!("must be in 1..{}", self.model.n_blocks),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Built-in desk-scale defaults.
    pub fn desk() -> Self {
        let mut pretrain = TrainConfig::new(5_000_000);
        pretrain.lr_max = 3e-3;
        pretrain.lr_min = 3e-4;
        pretrain.warmup_steps = 20;
        let mut train = TrainConfig::new(1_000_000);
        train.lr_max = 1e-3;
        train.lr_min = 1e-4;
        ExperimentConfig {
            seed: 0,
            output_dir: Self::default_output(),
            model: ModelConfig {
                vocab_size: 34,
                ..ModelConfig::default()
            },
            data: DataConfig {
                scheme: Scheme::Char,
                general: CorpusSource::generated("general", Generator::MarkovText, 4000, 256),
                target: CorpusSource::generated("target", Generator::Arithmetic, 4000, 256),
                split: SplitSpec::default(),
                duplicate_fraction: 0.0,
                tasks: TaskConfig::default(),
            },
            pretrain,
            train,
            arm: ArmConfig::Ade(AdeTemplate::default()),
            reproduce: ReproduceConfig::default(),
        }
    }

    /// Minutes-scale settings used by the acceptance suite and the examples.
    pub fn tiny() -> Self {
        let mut cfg = Self::desk();
        cfg.model = ModelConfig {
            n_blocks: 8,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size: 34,
            max_seq_len: 32,
            ..ModelConfig::default()
        };
        cfg.data.general = CorpusSource::generated("general", Generator::MarkovText, 600, 64);
        cfg.data.target = CorpusSource::generated("target", Generator::Arithmetic, 600, 64);
        cfg.data.tasks = TaskConfig {
            per_corpus: 24,
            context_len: 16,
            option_len: 8,
        };
        for t in [&mut cfg.pretrain, &mut cfg.train] {
            t.seq_len = 33;
            t.tokens_per_batch = 33 * 16;
        }
        cfg.pretrain.total_tokens = 33 * 16 * 1200;
        cfg.pretrain.eval_every = 0.25;
        cfg.train.total_tokens = 33 * 16 * 100;
        cfg.reproduce.lora = LoraConfig {
            rank: 4,
            alpha: 8.0,
            ..LoraConfig::default()
        };
        cfg
    }
}
