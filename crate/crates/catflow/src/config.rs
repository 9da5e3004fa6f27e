//! Run configuration: the single provenance record every command echoes
//! into its outputs. Values come from a JSON config file with flag
//! overrides on top (flags win), and `CATFLOW_SEED` as a seed fallback.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use catflow_core::corpus::{self, TaskPreset};
use catflow_core::trainer::{TrainConfig, TrainObjective};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Ce,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivKind {
    Exact,
    Hutchinson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Named toy task (`iid8`, `markov4`, `markov16`); exclusive with
    /// `corpus`.
    pub task: Option<String>,
    /// Corpus file (one sequence per line, `# vocab=V order=k seed=s`
    /// header).
    pub corpus: Option<PathBuf>,
    /// Embedding width; defaults to the task preset's when a task is named.
    pub dim: Option<usize>,
    /// Sequence length; defaults to the task preset's.
    pub seq_len: Option<usize>,
    pub hidden: usize,
    pub gamma_features: usize,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    pub p_sc: f64,
    pub lr: f64,
    /// Scheduler learning rate; equals `lr` when absent.
    pub sched_lr: Option<f64>,
    pub warmup: u64,
    pub ema_decay: f64,
    pub bias_ramp: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub objective: ObjectiveKind,
    pub sampler_steps: usize,
    pub elbo_draws: usize,
    pub div: DivKind,
    pub probes: usize,
    pub workers: usize,
    pub out: PathBuf,
    pub ckpt_every: u64,
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: None,
            corpus: None,
            dim: None,
            seq_len: None,
            hidden: 128,
            gamma_features: 16,
            steps: 10_000,
            batch: 32,
            seed: 0,
            p_sc: 0.25,
            lr: 1e-3,
            sched_lr: None,
            warmup: 2500,
            ema_decay: 0.9999,
            bias_ramp: 5000,
            weight_decay: 0.01,
            grad_clip: 0.0,
            objective: ObjectiveKind::Ce,
            sampler_steps: 128,
            elbo_draws: 8,
            div: DivKind::Hutchinson,
            probes: 32,
            workers: 1,
            out: PathBuf::from("runs/out"),
            ckpt_every: 5000,
            log_every: 50,
        }
    }
}

/// What the model trains or evaluates against.
pub struct TaskData {
    pub vocab: usize,
    pub dim: usize,
    pub seq_len: usize,
    pub source: TaskSource,
}

pub enum TaskSource {
    Preset(TaskPreset),
    Corpus(corpus::CorpusSource),
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// FNV-1a hash of the canonical JSON; echoed into CSV headers.
    pub fn hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325_u64;
        for b in serde_json::to_string(self)
            .expect("config serializes")
            .bytes()
        {
            h ^= b as u64;
            h = h.wrapping_mul(0x1_0000_0000_01b3);
        }
        h
    }

    pub fn sched_lr_value(&self) -> f64 {
        self.sched_lr.unwrap_or(self.lr)
    }

    /// Resolves the data source and the model geometry.
    pub fn task_data(&self) -> Result<TaskData, CliError> {
        match (&self.task, &self.corpus) {
            (Some(_), Some(_)) => Err(CliError::Usage(
                "`task` and `corpus` are mutually exclusive".into(),
            )),
            (Some(name), None) => {
                let preset = corpus::preset(name).ok_or_else(|| {
                    CliError::Usage(format!(
                        "unknown task `{name}`; presets: {}",
                        corpus::preset_names().join(", ")
                    ))
                })?;
                Ok(TaskData {
                    vocab: preset.vocab,
                    dim: self.dim.unwrap_or(preset.dim),
                    seq_len: self.seq_len.unwrap_or(preset.seq_len),
                    source: TaskSource::Preset(preset),
                })
            }
            (None, Some(path)) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    CliError::Usage(format!("cannot read corpus {}: {e}", path.display()))
                })?;
                let (vocab, sequences) = corpus::parse_corpus(&text)?;
                let seq_len = self
                    .seq_len
                    .unwrap_or_else(|| sequences.iter().map(Vec::len).min().unwrap_or(1));
                let dim = self
                    .dim
                    .ok_or_else(|| CliError::Usage("corpus runs need an explicit `dim`".into()))?;
                Ok(TaskData {
                    vocab,
                    dim,
                    seq_len,
                    source: TaskSource::Corpus(corpus::CorpusSource { vocab, sequences }),
                })
            }
            (None, None) => Err(CliError::Usage(
                "missing required field: set `task` or `corpus`".into(),
            )),
        }
    }

    /// Lowers this run configuration to the trainer's config.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let data = self.task_data()?;
        let mut cfg = TrainConfig::new(data.vocab, data.dim, data.seq_len);
        cfg.hidden = self.hidden;
        cfg.gamma_features = self.gamma_features;
        cfg.batch = self.batch;
        cfg.total_steps = self.steps;
        cfg.seed = self.seed;
        cfg.p_sc = self.p_sc;
        cfg.lr = self.lr;
        cfg.sched_lr = self.sched_lr_value();
        cfg.warmup_steps = self.warmup;
        cfg.ema_decay = self.ema_decay;
        cfg.bias_ramp_steps = self.bias_ramp;
        cfg.weight_decay = self.weight_decay;
        cfg.grad_clip = self.grad_clip;
        cfg.objective = match self.objective {
            ObjectiveKind::Ce => TrainObjective::CrossEntropy,
            ObjectiveKind::Mse => TrainObjective::Mse,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Seed fallback: flag beats config file beats `CATFLOW_SEED` beats 0.
pub fn seed_from_env() -> Option<u64> {
    std::env::var("CATFLOW_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_recipe() {
        let rc = RunConfig::default();
        assert_eq!(rc.p_sc, 0.25);
        assert_eq!(rc.warmup, 2500);
        assert_eq!(rc.ema_decay, 0.9999);
        assert_eq!(rc.bias_ramp, 5000);
        assert_eq!(rc.elbo_draws, 8);
    }

    #[test]
    fn task_data_resolution() {
        let mut rc = RunConfig::default();
        assert!(rc.task_data().is_err());
        rc.task = Some("iid8".into());
        let data = rc.task_data().unwrap();
        assert_eq!((data.vocab, data.dim, data.seq_len), (8, 4, 1));
        rc.task = Some("nope".into());
        assert!(matches!(rc.task_data(), Err(CliError::Usage(_))));
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
