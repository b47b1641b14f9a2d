//! The flat run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use mbert_core::model::{ModelConfig, Task};
use mbert_core::synth::SynthConfig;
use mbert_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 2 layers, width 64, 4 heads.
    Small,
    /// 6 layers, width 288, 8 heads.
    Full,
}

/// One flat TOML table. Paths default to fixed names under `work_dir`;
/// model fields left unset come from the selected profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub profile: Profile,
    pub work_dir: PathBuf,

    pub cohort: Option<PathBuf>,
    pub ranges: Option<PathBuf>,
    pub prepared: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub reports: Option<PathBuf>,

    pub n_admissions: usize,
    pub n_lab_codes: usize,
    pub n_vital_codes: usize,
    pub n_med_codes: usize,
    pub n_proc_codes: usize,
    pub mean_events_per_admission: f64,
    pub severity_effect: f64,
    pub co_timestamp_fraction: f64,

    pub n_layers: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub intermediate_dim: Option<usize>,
    pub n_heads: Option<usize>,
    pub max_len: Option<usize>,
    pub dropout_p: Option<f64>,
    pub attention_dropout_p: Option<f64>,
    pub weight_decay: Option<f64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            seed: s.seed,
            task: Task::Binary,
            profile: Profile::Small,
            work_dir: PathBuf::from("work"),
            cohort: None,
            ranges: None,
            prepared: None,
            vocab: None,
            checkpoint: None,
            reports: None,
            n_admissions: s.n_admissions,
            n_lab_codes: s.n_lab_codes,
            n_vital_codes: s.n_vital_codes,
            n_med_codes: s.n_med_codes,
            n_proc_codes: s.n_proc_codes,
            mean_events_per_admission: s.mean_events_per_admission,
            severity_effect: s.severity_effect,
            co_timestamp_fraction: s.co_timestamp_fraction,
            n_layers: None,
            hidden_dim: None,
            intermediate_dim: None,
            n_heads: None,
            max_len: None,
            dropout_p: None,
            attention_dropout_p: None,
            weight_decay: None,
            lr: None,
            batch_size: None,
            max_epochs: None,
            patience: None,
        }
    }
}

/// The part of a run that determines its results. Paths are left out so the
/// same experiment in two directories hashes the same.
#[derive(Serialize)]
struct Hashed {
    seed: u64,
    task: Task,
    synth: SynthConfig,
    model: ModelConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Validation(format!(
                "config file {} does not exist",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_admissions: self.n_admissions,
            seed: self.seed,
            n_lab_codes: self.n_lab_codes,
            n_vital_codes: self.n_vital_codes,
            n_med_codes: self.n_med_codes,
            n_proc_codes: self.n_proc_codes,
            mean_events_per_admission: self.mean_events_per_admission,
            severity_effect: self.severity_effect,
            co_timestamp_fraction: self.co_timestamp_fraction,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let base = match self.profile {
            Profile::Small => ModelConfig::small(),
            Profile::Full => ModelConfig::full(),
        };
        ModelConfig {
            n_layers: self.n_layers.unwrap_or(base.n_layers),
            hidden_dim: self.hidden_dim.unwrap_or(base.hidden_dim),
            intermediate_dim: self.intermediate_dim.unwrap_or(base.intermediate_dim),
            n_heads: self.n_heads.unwrap_or(base.n_heads),
            max_len: self.max_len.unwrap_or(base.max_len),
            dropout_p: self.dropout_p.unwrap_or(base.dropout_p),
            attention_dropout_p: self.attention_dropout_p.unwrap_or(base.attention_dropout_p),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            lr: self.lr.unwrap_or(base.lr),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            max_epochs: self.max_epochs.unwrap_or(base.max_epochs),
            patience: self.patience.unwrap_or(base.patience),
            task: self.task,
            seed: self.seed,
        }
    }

    /// Hex sha256 of the result-determining settings.
    pub fn hash(&self) -> String {
        let h = Hashed {
            seed: self.seed,
            task: self.task,
            synth: self.synth_config(),
            model: self.model_config(),
        };
        let text = toml::to_string(&h).expect("flat config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn under_work(&self, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
        explicit
            .clone()
            .unwrap_or_else(|| self.work_dir.join(default))
    }

    pub fn cohort_path(&self) -> PathBuf {
        self.under_work(&self.cohort, "cohort.jsonl")
    }

    pub fn ranges_path(&self) -> PathBuf {
        self.under_work(&self.ranges, "ranges.tsv")
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.under_work(&self.prepared, "prepared")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.vocab
            .clone()
            .unwrap_or_else(|| self.prepared_dir().join("vocab.txt"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.work_dir.join("checkpoints").join(self.task.as_str()))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.under_work(&self.reports, "reports")
    }

    pub fn features_dir(&self) -> PathBuf {
        self.work_dir.join("features").join(self.task.as_str())
    }
}
