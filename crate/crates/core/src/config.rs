//! Line-based `key = value` run configuration.
//!
//! `#` starts a comment, blank lines are ignored, absent keys take their
//! defaults and unknown keys are rejected. Every error names the key and
//! the line it came from.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Result, RomError};
use crate::scheduler::{PretrainMix, Schedule, ScheduleKind};
use crate::trainer::{AdamConfig, LrKind, LrSchedule};

/// Hyperparameters shared by the three training phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the training data.
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrKind,
    pub warmup_steps: usize,
    pub restart_period: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub seed: u64,
    pub model: EncoderConfig,
    pub block_size: usize,
    pub vocab_cap: usize,
    pub keep_prob: f64,
    pub schedule: ScheduleKind,
    pub schedule_epsilon: f64,
    pub schedule_period: usize,
    pub schedule_seed: u64,
    pub pretrain: PhaseConfig,
    pub pretrain_ict: f64,
    pub pretrain_phrase_ict: f64,
    pub retrieval: PhaseConfig,
    pub hard_negatives: bool,
    pub joint: PhaseConfig,
    /// k of the dev top-k accuracy that accepts a refresh.
    pub refresh_k: usize,
    /// Stop after this many epochs without an accepted refresh; 0 disables.
    pub early_stopping: usize,
    /// Keep token embeddings fixed during the joint phase.
    pub freeze_embeddings: bool,
    pub reader_batch_size: usize,
    pub reader_passages: usize,
    pub reader_k_passages: usize,
    pub max_span_len: usize,
    pub adam: AdamConfig,
    pub loss_normalize: bool,
    pub loss_decay: f64,
    pub supervision_fraction: f64,
    pub eval_ks: Vec<usize>,
    /// Passage depths at which reader EM is reported.
    pub eval_em_ks: Vec<usize>,
    pub index_batch_size: usize,
    pub docs_path: PathBuf,
    pub corpus_path: PathBuf,
    pub train_qa_path: PathBuf,
    pub dev_qa_path: PathBuf,
    pub runs_dir: PathBuf,
    pub run_name: String,
    /// Stop every phase after this many optimizer steps in total; 0 disables.
    pub max_steps: u64,
}

impl Default for Config {
    fn default() -> Self {
        let phase = |epochs, batch_size, lr, lr_schedule, warmup_steps| PhaseConfig {
            epochs,
            steps_per_epoch: 0,
            batch_size,
            lr,
            lr_schedule,
            warmup_steps,
            restart_period: 5,
        };
        Config {
            seed: 0,
            model: EncoderConfig::default(),
            block_size: 100,
            vocab_cap: 30_000,
            keep_prob: 0.9,
            schedule: ScheduleKind::Equal,
            schedule_epsilon: 0.05,
            schedule_period: 2,
            schedule_seed: 0,
            pretrain: PhaseConfig {
                steps_per_epoch: 100,
                ..phase(10, 16, 1e-4, LrKind::LinearWarmup, 100)
            },
            pretrain_ict: 1.0,
            pretrain_phrase_ict: 0.0,
            retrieval: phase(5, 14, 1e-5, LrKind::LinearWarmup, 0),
            hard_negatives: false,
            joint: phase(30, 14, 1e-5, LrKind::CosineWarmRestarts, 0),
            refresh_k: 10,
            early_stopping: 0,
            freeze_embeddings: false,
            reader_batch_size: 6,
            reader_passages: 10,
            reader_k_passages: 10,
            max_span_len: 10,
            adam: AdamConfig::default(),
            loss_normalize: true,
            loss_decay: 0.99,
            supervision_fraction: 1.0,
            eval_ks: vec![1, 5, 10, 20, 100],
            eval_em_ks: vec![5, 10, 20, 100],
            index_batch_size: 64,
            docs_path: PathBuf::from("data/docs.jsonl"),
            corpus_path: PathBuf::from("data/corpus.bin"),
            train_qa_path: PathBuf::from("data/train.jsonl"),
            dev_qa_path: PathBuf::from("data/dev.jsonl"),
            runs_dir: PathBuf::from("runs"),
            run_name: "default".to_string(),
            max_steps: 0,
        }
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| format!("cannot parse `{s}`: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(usize, u64, f64, bool, String, ScheduleKind, LrKind);

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|p| usize::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        /// Every accepted key, in `to_text` order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl Config {
            fn set_raw(&mut self, key: &str, value: &str) -> Option<std::result::Result<(), String>> {
                match key {
                    $($key => Some(ConfigValue::parse_value(value).map(|v| self.$($field).+ = v)),)*
                    _ => None,
                }
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.render())),*]
            }
        }
    };
}

config_keys! {
    "seed" => seed,
    "model.d_model" => model.d_model,
    "model.n_heads" => model.n_heads,
    "model.n_layers" => model.n_layers,
    "model.d_ff" => model.d_ff,
    "model.max_seq_len" => model.max_seq_len,
    "model.d_proj" => model.d_proj,
    "model.dropout" => model.dropout,
    "model.tie_heads" => model.tie_heads,
    "corpus.block_size" => block_size,
    "corpus.vocab_cap" => vocab_cap,
    "corpus.keep_prob" => keep_prob,
    "schedule" => schedule,
    "schedule.epsilon" => schedule_epsilon,
    "schedule.period" => schedule_period,
    "schedule.seed" => schedule_seed,
    "pretrain.ict" => pretrain_ict,
    "pretrain.phrase_ict" => pretrain_phrase_ict,
    "pretrain.epochs" => pretrain.epochs,
    "pretrain.steps_per_epoch" => pretrain.steps_per_epoch,
    "pretrain.batch_size" => pretrain.batch_size,
    "pretrain.lr" => pretrain.lr,
    "pretrain.lr_schedule" => pretrain.lr_schedule,
    "pretrain.warmup_steps" => pretrain.warmup_steps,
    "pretrain.restart_period" => pretrain.restart_period,
    "retrieval.epochs" => retrieval.epochs,
    "retrieval.steps_per_epoch" => retrieval.steps_per_epoch,
    "retrieval.batch_size" => retrieval.batch_size,
    "retrieval.lr" => retrieval.lr,
    "retrieval.lr_schedule" => retrieval.lr_schedule,
    "retrieval.warmup_steps" => retrieval.warmup_steps,
    "retrieval.restart_period" => retrieval.restart_period,
    "retrieval.hard_negatives" => hard_negatives,
    "joint.epochs" => joint.epochs,
    "joint.steps_per_epoch" => joint.steps_per_epoch,
    "joint.batch_size" => joint.batch_size,
    "joint.lr" => joint.lr,
    "joint.lr_schedule" => joint.lr_schedule,
    "joint.warmup_steps" => joint.warmup_steps,
    "joint.restart_period" => joint.restart_period,
    "joint.refresh_k" => refresh_k,
    "joint.early_stopping" => early_stopping,
    "joint.freeze_embeddings" => freeze_embeddings,
    "reader.batch_size" => reader_batch_size,
    "reader.passages" => reader_passages,
    "reader.k_passages" => reader_k_passages,
    "reader.max_span_len" => max_span_len,
    "adam.beta1" => adam.beta1,
    "adam.beta2" => adam.beta2,
    "adam.eps" => adam.eps,
    "adam.weight_decay" => adam.weight_decay,
    "loss.normalize" => loss_normalize,
    "loss.decay" => loss_decay,
    "supervision.fraction" => supervision_fraction,
    "eval.ks" => eval_ks,
    "eval.em_ks" => eval_em_ks,
    "index.batch_size" => index_batch_size,
    "paths.docs" => docs_path,
    "paths.corpus" => corpus_path,
    "paths.train_qa" => train_qa_path,
    "paths.dev_qa" => dev_qa_path,
    "paths.runs" => runs_dir,
    "run.name" => run_name,
    "run.max_steps" => max_steps,
}

/// Where each key's value came from, for error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Default,
    Line(usize),
    Override,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Default => write!(f, "default"),
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Override => write!(f, "override"),
        }
    }
}

/// A config plus the origin of every explicitly set key.
#[derive(Debug, Clone, Default)]
pub struct LoadedConfig {
    pub config: Config,
    origins: BTreeMap<&'static str, Origin>,
}

fn key_error(line: usize, key: &str, msg: impl Into<String>) -> RomError {
    RomError::ConfigKey {
        line,
        key: key.to_string(),
        msg: msg.into(),
    }
}

impl LoadedConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut out = LoadedConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| RomError::MalformedLine {
                line,
                msg: format!("expected `key = value`, found `{content}`"),
            })?;
            out.set(key.trim(), value.trim(), Origin::Line(line))?;
        }
        out.validate()?;
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(RomError::MissingPrerequisite(path.to_path_buf()));
        }
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    fn line_of(origin: Origin) -> usize {
        match origin {
            Origin::Line(n) => n,
            _ => 0,
        }
    }

    fn set(&mut self, key: &str, value: &str, origin: Origin) -> Result<()> {
        let line = Self::line_of(origin);
        let canonical = *KEYS.iter().find(|k| **k == key).ok_or_else(|| key_error(line, key, "unknown key"))?;
        match self.config.set_raw(key, value) {
            Some(Ok(())) => {
                self.origins.insert(canonical, origin);
                Ok(())
            }
            Some(Err(msg)) => Err(key_error(line, key, msg)),
            None => Err(key_error(line, key, "unknown key")),
        }
    }

    /// Applies a command-line override; it beats any file value.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        self.set(key, value, Origin::Override)?;
        self.validate()
    }

    /// Applies several overrides, validating once after all are set so that
    /// interdependent keys can change together.
    pub fn apply_overrides<'k>(&mut self, pairs: impl IntoIterator<Item = (&'k str, &'k str)>) -> Result<()> {
        for (key, value) in pairs {
            self.set(key, value, Origin::Override)?;
        }
        self.validate()
    }

    /// Applies `value` only if the key was not set explicitly.
    pub fn apply_fallback(&mut self, key: &str, value: &str) -> Result<()> {
        if self.origins.contains_key(key) {
            return Ok(());
        }
        self.set(key, value, Origin::Override)?;
        self.validate()
    }

    pub fn origin(&self, key: &str) -> Origin {
        self.origins.get(key).copied().unwrap_or(Origin::Default)
    }

    fn check(&self, key: &str, ok: bool, msg: &str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(key_error(Self::line_of(self.origin(key)), key, msg))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        let m = &c.model;
        self.check("model.d_model", m.d_model >= 1, "must be ≥ 1")?;
        self.check("model.n_heads", m.n_heads >= 1 && m.d_model.is_multiple_of(m.n_heads), "must divide model.d_model")?;
        self.check("model.n_layers", m.n_layers >= 1, "must be ≥ 1")?;
        self.check("model.d_ff", m.d_ff >= 1, "must be ≥ 1")?;
        self.check("model.max_seq_len", m.max_seq_len >= 8, "must be ≥ 8")?;
        self.check("model.d_proj", m.d_proj >= 1, "must be ≥ 1")?;
        self.check("model.dropout", (0.0..1.0).contains(&m.dropout), "must be in [0, 1)")?;
        self.check("corpus.block_size", c.block_size >= 2, "must be ≥ 2")?;
        self.check("corpus.vocab_cap", c.vocab_cap >= 1, "must be ≥ 1")?;
        self.check("corpus.keep_prob", (0.0..=1.0).contains(&c.keep_prob), "must be in [0, 1]")?;
        self.check(
            "schedule.epsilon",
            c.schedule_epsilon > 0.0 && c.schedule_epsilon < 0.5,
            "must be in (0, 0.5)",
        )?;
        self.check("schedule.period", c.schedule_period >= 2, "must be ≥ 2")?;
        let mix_ok = c.pretrain_ict >= 0.0
            && c.pretrain_phrase_ict >= 0.0
            && (c.pretrain_ict + c.pretrain_phrase_ict - 1.0).abs() <= 1e-12;
        self.check("pretrain.ict", mix_ok, "pretrain.ict and pretrain.phrase_ict must be ≥ 0 and sum to 1")?;
        for (name, p, min_epochs) in [
            ("pretrain", &c.pretrain, 0),
            ("retrieval", &c.retrieval, 0),
            ("joint", &c.joint, 2),
        ] {
            let key = |k: &str| format!("{name}.{k}");
            self.check(&key("epochs"), p.epochs >= min_epochs, &format!("must be ≥ {min_epochs}"))?;
            self.check(&key("batch_size"), p.batch_size >= 2, "must be ≥ 2")?;
            self.check(&key("lr"), p.lr > 0.0 && p.lr.is_finite(), "must be > 0")?;
            self.check(&key("restart_period"), p.restart_period >= 1, "must be ≥ 1")?;
        }
        self.check("joint.refresh_k", c.refresh_k >= 1, "must be ≥ 1")?;
        self.check("reader.batch_size", c.reader_batch_size >= 1, "must be ≥ 1")?;
        self.check("reader.passages", c.reader_passages >= 1, "must be ≥ 1")?;
        self.check(
            "reader.k_passages",
            (1..=c.reader_passages).contains(&c.reader_k_passages),
            "must be in 1..=reader.passages",
        )?;
        self.check("reader.max_span_len", c.max_span_len >= 1, "must be ≥ 1")?;
        self.check("adam.beta1", (0.0..1.0).contains(&c.adam.beta1), "must be in [0, 1)")?;
        self.check("adam.beta2", (0.0..1.0).contains(&c.adam.beta2), "must be in [0, 1)")?;
        self.check("adam.eps", c.adam.eps > 0.0, "must be > 0")?;
        self.check("adam.weight_decay", c.adam.weight_decay >= 0.0, "must be ≥ 0")?;
        self.check("loss.decay", c.loss_decay > 0.0 && c.loss_decay < 1.0, "must be in (0, 1)")?;
        self.check(
            "supervision.fraction",
            c.supervision_fraction > 0.0 && c.supervision_fraction <= 1.0,
            "must be in (0, 1]",
        )?;
        self.check(
            "eval.ks",
            !c.eval_ks.is_empty() && c.eval_ks[0] >= 1 && c.eval_ks.windows(2).all(|w| w[0] < w[1]),
            "must be a strictly increasing list of positive integers",
        )?;
        self.check(
            "eval.em_ks",
            c.eval_em_ks.iter().all(|&k| k >= 1) && c.eval_em_ks.windows(2).all(|w| w[0] < w[1]),
            "must be a strictly increasing list of positive integers",
        )?;
        self.check("index.batch_size", c.index_batch_size >= 1, "must be ≥ 1")?;
        self.check("run.name", !c.run_name.is_empty() && !c.run_name.contains('/'), "must be a plain name")?;
        Ok(())
    }
}

impl Config {
    pub fn parse_str(text: &str) -> Result<Self> {
        LoadedConfig::parse_str(text).map(|l| l.config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        LoadedConfig::load(path).map(|l| l.config)
    }

    /// Fully resolved config in the file format; parses back to `self`.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn joint_schedule(&self) -> Schedule {
        Schedule {
            kind: self.schedule,
            total_epochs: self.joint.epochs,
            epsilon: self.schedule_epsilon,
            period: self.schedule_period,
            seed: self.schedule_seed,
        }
    }

    pub fn pretrain_mix(&self) -> PretrainMix {
        PretrainMix {
            ict: self.pretrain_ict,
            phrase_ict: self.pretrain_phrase_ict,
        }
    }

    /// Model config for a corpus with `vocab_size` tokens.
    pub fn model_for_vocab(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            ..self.model.clone()
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir.join(&self.run_name)
    }
}

impl PhaseConfig {
    /// Schedule for a phase of `updates` optimizer steps, numbered from 1.
    /// Linear decay reaches 0 at step `updates + 1`, so the last update
    /// still moves the parameters.
    pub fn lr_schedule(&self, updates: usize) -> LrSchedule {
        LrSchedule {
            kind: self.lr_schedule,
            base_lr: self.lr,
            warmup_steps: self.warmup_steps,
            total_steps: updates + 1,
            restart_period_epochs: self.restart_period,
        }
    }
}

impl FromStr for Config {
    type Err = RomError;
    fn from_str(s: &str) -> Result<Self> {
        Config::parse_str(s)
    }
}
