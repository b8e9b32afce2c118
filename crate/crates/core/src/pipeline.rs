//! Phase orchestration over a run directory.
//!
//! A run directory holds `config.resolved`, `metrics.csv`, `steps.csv`,
//! `checkpoints/{pretrain,retrieval,joint,joint-best}.ckpt`,
//! `index/index.bin` and, after evaluation, `eval.json`. Each phase reads
//! the previous phase's checkpoint from the same directory.

use std::path::{Path, PathBuf};

use log::info;

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::corpus::{build_corpus, load_qa_dataset, read_documents, subsample_supervision, Corpus, QaExample};
use crate::encoder::{EncoderParams, Head};
use crate::error::{Result, RomError};
use crate::eval::{evaluate, EvalReport, RunSummary};
use crate::index::{build_index, DenseIndex};
use crate::scheduler::Phase;
use crate::trainer::{read_rows, MetricsLog, MetricsRow, TrainState, Trainer, METRIC_KS};

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const EVAL_FILE: &str = "eval.json";

pub fn checkpoint_path(run_dir: &Path, name: &str) -> PathBuf {
    run_dir.join("checkpoints").join(format!("{name}.ckpt"))
}

pub fn index_path(run_dir: &Path) -> PathBuf {
    run_dir.join("index").join("index.bin")
}

/// Latest phase checkpoint present in `run_dir`.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    ["joint", "retrieval", "pretrain"]
        .iter()
        .map(|n| checkpoint_path(run_dir, n))
        .find(|p| p.exists())
        .ok_or_else(|| RomError::MissingPrerequisite(checkpoint_path(run_dir, "pretrain")))
}

pub fn write_resolved_config(config: &Config, run_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(run_dir.join(RESOLVED_CONFIG), config.to_text())?;
    Ok(())
}

/// Reads documents from `paths.docs`, builds the corpus and saves it to `paths.corpus`.
pub fn build_corpus_file(config: &Config) -> Result<Corpus> {
    if !config.docs_path.exists() {
        return Err(RomError::MissingPrerequisite(config.docs_path.clone()));
    }
    let docs = read_documents(&config.docs_path)?;
    let corpus = build_corpus(&docs, config.block_size, config.vocab_cap)?;
    if let Some(parent) = config.corpus_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    corpus.save(&config.corpus_path)?;
    Ok(corpus)
}

pub fn load_corpus(config: &Config) -> Result<Corpus> {
    Corpus::load(&config.corpus_path)
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Vec<QaExample>,
    pub dev: Vec<QaExample>,
}

/// Loads train/dev QA; the train split is subsampled to `supervision.fraction`.
pub fn load_datasets(config: &Config, corpus: &Corpus) -> Result<Datasets> {
    let train = load_qa_dataset(&config.train_qa_path, corpus)?;
    let dev = load_qa_dataset(&config.dev_qa_path, corpus)?;
    if train.dropped + dev.dropped > 0 {
        info!("dropped {} train / {} dev unanswerable questions", train.dropped, dev.dropped);
    }
    let train = subsample_supervision(&train.examples, config.supervision_fraction, config.seed)?;
    Ok(Datasets {
        train,
        dev: dev.examples,
    })
}

fn load_phase_input(config: &Config, corpus: &Corpus, run_dir: &Path, name: &str) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(&checkpoint_path(run_dir, name))?;
    ckpt.check_vocab(corpus.vocab.len())?;
    let expected = config.model_for_vocab(corpus.vocab.len());
    if ckpt.params.config != expected {
        return Err(RomError::IncompatibleCheckpoint(format!(
            "checkpoint model {:?} differs from config model {:?}",
            ckpt.params.config, expected
        )));
    }
    Ok(ckpt)
}

/// Pretraining from a fresh initialization seeded by `seed`.
pub fn run_pretrain(config: &Config, corpus: &Corpus, run_dir: &Path) -> Result<TrainState> {
    write_resolved_config(config, run_dir)?;
    let params = EncoderParams::init(&config.model_for_vocab(corpus.vocab.len()), config.seed)?;
    let log = MetricsLog::open(run_dir, Phase::Pretrain)?;
    let mut t = Trainer::new(config, corpus, params, Some(run_dir))?.with_log(log);
    t.pretrain()?;
    Ok(t.state)
}

pub fn run_retrieval(config: &Config, corpus: &Corpus, data: &Datasets, run_dir: &Path) -> Result<TrainState> {
    write_resolved_config(config, run_dir)?;
    let ckpt = load_phase_input(config, corpus, run_dir, "pretrain")?;
    let log = MetricsLog::open(run_dir, Phase::Retrieval)?;
    let mut t = Trainer::from_checkpoint(config, corpus, ckpt, Some(run_dir))?.with_log(log);
    t.train_retrieval(&data.train, &data.dev)?;
    Ok(t.state)
}

/// What a joint run produced, including the final dev evaluation.
#[derive(Debug, Clone)]
pub struct JointRun {
    pub state: TrainState,
    pub accepted_refreshes: usize,
    pub eval: EvalReport,
    pub rows: Vec<MetricsRow>,
}

/// Joint optimization from the retrieval checkpoint, then a dev evaluation
/// of the final model (freshly embedded corpus) written to `eval.json`.
pub fn run_joint(config: &Config, corpus: &Corpus, data: &Datasets, run_dir: &Path) -> Result<JointRun> {
    write_resolved_config(config, run_dir)?;
    let ckpt = load_phase_input(config, corpus, run_dir, "retrieval")?;
    let log = MetricsLog::open(run_dir, Phase::Joint)?;
    let mut t = Trainer::from_checkpoint(config, corpus, ckpt, Some(run_dir))?.with_log(log);
    t.state.refresh_log.clear();
    let outcome = t.joint_optimize(&data.train, &data.dev, None)?;
    let eval = evaluate_params(config, corpus, &t.params, &data.dev)?;
    eval.save(&run_dir.join(EVAL_FILE))?;
    Ok(JointRun {
        state: t.state.clone(),
        accepted_refreshes: outcome.accepted_refreshes,
        eval,
        rows: t.log.epochs().to_vec(),
    })
}

pub fn embed_corpus(config: &Config, corpus: &Corpus, params: &EncoderParams, version: u64) -> Result<DenseIndex> {
    build_index(params, corpus, Head::Retrieval, config.index_batch_size, version)
}

/// Builds a fresh index from `params` and evaluates `questions`.
pub fn evaluate_params(
    config: &Config,
    corpus: &Corpus,
    params: &EncoderParams,
    questions: &[QaExample],
) -> Result<EvalReport> {
    let index = embed_corpus(config, corpus, params, 0)?;
    evaluate(params, corpus, &index, questions, config)
}

/// Every run under `dir` that has a resolved config and either an
/// `eval.json` or joint-phase retrieval metrics.
pub fn load_run_summaries(dir: &Path) -> Result<Vec<RunSummary>> {
    if !dir.is_dir() {
        return Err(RomError::MissingPrerequisite(dir.to_path_buf()));
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(RESOLVED_CONFIG).exists())
        .collect();
    entries.sort();
    let mut out = Vec::new();
    for run in entries {
        let config = Config::load(&run.join(RESOLVED_CONFIG))?;
        let name = run.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let eval_path = run.join(EVAL_FILE);
        let metrics_path = run.join(crate::trainer::METRICS_FILE);
        let summary = if eval_path.exists() {
            let e = EvalReport::load(&eval_path)?;
            Some(RunSummary {
                name,
                schedule: config.schedule.name().to_string(),
                topk_accuracy: e.topk_accuracy,
                em_at_k: e.em_at_k,
            })
        } else if metrics_path.exists() {
            let rows: Vec<MetricsRow> = read_rows(&metrics_path)?;
            rows.iter()
                .rev()
                .find(|r| r.phase == Phase::Joint.name() && r.top1.is_some())
                .map(|r| RunSummary {
                    name,
                    schedule: config.schedule.name().to_string(),
                    topk_accuracy: METRIC_KS
                        .iter()
                        .zip(r.topk())
                        .filter_map(|(&k, v)| v.map(|v| (k, v)))
                        .collect(),
                    em_at_k: Default::default(),
                })
        } else {
            None
        };
        out.extend(summary);
    }
    Ok(out)
}
