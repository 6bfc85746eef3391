//! TOML run configuration.
//!
//! ```toml
//! [encoder]            # every field optional
//! hidden_dim = 64
//!
//! [trainer]
//! alpha = 1e-3
//! optimizer = "adam"
//!
//! [finetune]           # seeds used by --schedule single_task
//! seeds = [1, 2, 3, 4, 5]
//!
//! [bench]
//! n_inputs = 16
//!
//! [gradcheck]
//! ops = ["matmul", "nli_loss"]
//!
//! [[tasks]]
//! task_id = "nli"
//! head_kind = "nli"
//! batch_size = 16
//! source = { synthetic = { n_train = 2000, n_test = 500, seed = 13, vocab_size = 20 } }
//!
//! [[tasks]]
//! task_id = "ner"
//! head_kind = "ner"
//! label_names = ["O", "B-PROB", "I-PROB"]
//! batch_size = 25
//! source = { files = { train = "ner/train.conll", test = "ner/test.conll" } }
//! ```
//!
//! Relative data paths are resolved against the config file's directory.
//! Synthetic tasks may omit `label_names`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use mtcb::bench::BenchConfig;
use mtcb::data::{synth_labels, DataSource};
use mtcb::encoder::EncoderConfig;
use mtcb::gradsuite;
use mtcb::heads::{HeadKind, TaskSpec};
use mtcb::trainer::{Schedule, TrainerConfig};
use mtcb::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    encoder: EncoderConfig,
    #[serde(default)]
    trainer: TrainerConfig,
    #[serde(default)]
    finetune: FinetuneConfig,
    #[serde(default)]
    bench: BenchSection,
    #[serde(default)]
    gradcheck: Option<GradcheckSection>,
    #[serde(default)]
    tasks: Vec<TaskEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskEntry {
    task_id: String,
    head_kind: HeadKind,
    #[serde(default)]
    label_names: Vec<String>,
    batch_size: usize,
    source: DataSource,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Empty means "the trainer seed only".
    pub seeds: Vec<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchSection {
    n_inputs: usize,
    reps: usize,
    warmups: usize,
    seq_len: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        let d = BenchConfig::default();
        BenchSection {
            n_inputs: d.n_inputs,
            reps: d.reps,
            warmups: d.warmups,
            seq_len: d.seq_len,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradcheckSection {
    ops: Vec<String>,
}

/// A validated configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub trainer: TrainerConfig,
    pub finetune: FinetuneConfig,
    pub bench: BenchConfig,
    /// `None` runs every check.
    pub gradcheck_ops: Option<Vec<String>>,
    pub tasks: Vec<TaskSpec>,
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub schedule: Option<Schedule>,
    pub outer_loops: Option<usize>,
    /// Keep only these task ids, in config order.
    pub tasks: Option<Vec<String>>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses and validates `text`; relative data paths are joined onto
    /// `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let tasks = raw
            .tasks
            .into_iter()
            .map(|t| {
                let source = match t.source {
                    DataSource::Files { train, test } => DataSource::Files {
                        train: base.join(train),
                        test: base.join(test),
                    },
                    s => s,
                };
                let labels = if t.label_names.is_empty() && matches!(source, DataSource::Synthetic { .. }) {
                    synth_labels(t.head_kind, 3)
                } else {
                    t.label_names
                };
                TaskSpec::new(&t.task_id, t.head_kind, labels, t.batch_size, source)
            })
            .collect::<Result<Vec<_>>>()?;
        let b = raw.bench;
        let cfg = RunConfig {
            encoder: raw.encoder,
            trainer: raw.trainer,
            finetune: raw.finetune,
            bench: BenchConfig {
                n_inputs: b.n_inputs,
                reps: b.reps,
                warmups: b.warmups,
                seq_len: b.seq_len,
                seed: 1,
            },
            gradcheck_ops: raw.gradcheck.map(|g| g.ops),
            tasks,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.trainer.validate()?;
        self.bench.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("config declares no tasks".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !seen.insert(t.task_id.as_str()) {
                return Err(Error::Config(format!("duplicate task_id {:?}", t.task_id)));
            }
            if let DataSource::Files { train, test } = &t.source {
                for p in [train, test] {
                    if !p.is_file() {
                        return Err(Error::Config(format!("task {:?}: data file {} not found", t.task_id, p.display())));
                    }
                }
            }
        }
        if let Some(ops) = &self.gradcheck_ops {
            if ops.is_empty() {
                return Err(Error::Config("gradcheck.ops is empty".into()));
            }
            let known = gradsuite::all_checks();
            if let Some(bad) = ops.iter().find(|o| !known.contains(o)) {
                return Err(Error::Config(format!("unknown gradient check {bad:?}")));
            }
        }
        Ok(())
    }

    pub fn apply(mut self, o: &Overrides) -> Result<Self> {
        if let Some(seed) = o.seed {
            self.trainer.seed = seed;
            self.bench.seed = seed;
        }
        if let Some(s) = o.schedule {
            self.trainer.schedule = s;
        }
        if let Some(n) = o.outer_loops {
            self.trainer.outer_loops = n;
        }
        if let Some(ids) = &o.tasks {
            if let Some(bad) = ids.iter().find(|id| !self.tasks.iter().any(|t| &t.task_id == *id)) {
                return Err(Error::Config(format!("--tasks names unknown task {bad:?}")));
            }
            self.tasks.retain(|t| ids.contains(&t.task_id));
        }
        self.validate()?;
        Ok(self)
    }

    /// Replaces the seed of every synthetic source with one derived from
    /// `seed` and the task id.
    pub fn reseed_synthetic(&mut self, seed: u64) {
        for t in &mut self.tasks {
            if let DataSource::Synthetic { seed: s, .. } = &mut t.source {
                *s = mtcb::rng::derive_seed(seed, &format!("synth/{}", t.task_id), &[]);
            }
        }
    }

    /// Seeds for single-task fine-tuning.
    pub fn finetune_seeds(&self) -> Vec<u64> {
        if self.finetune.seeds.is_empty() {
            vec![self.trainer.seed]
        } else {
            self.finetune.seeds.clone()
        }
    }

    pub fn task_files(&self) -> Vec<(&str, &PathBuf, &PathBuf)> {
        self.tasks
            .iter()
            .filter_map(|t| match &t.source {
                DataSource::Files { train, test } => Some((t.task_id.as_str(), train, test)),
                _ => None,
            })
            .collect()
    }
}
