use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use rom_core::checkpoint::Checkpoint;
use rom_core::config::{Config, LoadedConfig};
use rom_core::corpus::{tokenize, Corpus};
use rom_core::encoder::Head;
use rom_core::eval::{evaluate, schedule_report, REPORT_TOPK};
use rom_core::index::DenseIndex;
use rom_core::pipeline::{self, Datasets};
use rom_core::synthetic::{self, SyntheticConfig};
use rom_core::RomError;

#[derive(Parser)]
#[command(name = "rom", version, about = "Multi-task retrieval and reading trainer")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set joint.epochs=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Same as `--set seed=N`; falls back to $ROM_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Same as `--set schedule=NAME`.
    #[arg(long, global = true)]
    schedule: Option<String>,
    /// Same as `--set run.name=NAME`.
    #[arg(long, global = true)]
    run: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a templated synthetic corpus with train/dev questions.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        entities: usize,
        #[arg(long, default_value_t = 150)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        dev: usize,
        #[arg(long, default_value_t = 2)]
        negatives: usize,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
    },
    /// Tokenize `paths.docs` into blocks and write `paths.corpus`.
    BuildCorpus,
    /// ICT / PhraseICT pretraining from a fresh initialization.
    Pretrain,
    /// Supervised retrieval training from the pretraining checkpoint.
    TrainRetrieval,
    /// Scheduled retrieval + reader training with gated index refresh.
    TrainJoint,
    /// Pretrain, retrieval and joint phases in sequence.
    Run,
    /// Embed every block and write the dense index.
    Embed {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the top-k blocks for a query.
    Retrieve {
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Retrieval accuracy and exact match on the dev set.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare schedules across the runs under a directory.
    Report {
        #[arg(long)]
        dir: Option<PathBuf>,
        /// Column order; defaults to the schedules present.
        #[arg(long, value_delimiter = ',')]
        schedules: Vec<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn resolve_config(g: &Global) -> Result<Config> {
    let mut loaded = match &g.config {
        Some(p) => LoadedConfig::load(p)?,
        None => LoadedConfig::parse_str("")?,
    };
    let mut pairs = Vec::new();
    for kv in &g.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = g.seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    if let Some(s) = &g.schedule {
        pairs.push(("schedule".into(), s.clone()));
    }
    if let Some(r) = &g.run {
        pairs.push(("run.name".into(), r.clone()));
    }
    loaded.apply_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    if let Ok(s) = std::env::var("ROM_SEED") {
        loaded.apply_fallback("seed", &s)?;
    }
    loaded.validate()?;
    Ok(loaded.config)
}

fn load_checkpoint(config: &Config, corpus_vocab: usize, path: Option<&Path>) -> Result<Checkpoint> {
    let path = match path {
        Some(p) => p.to_path_buf(),
        None => pipeline::latest_checkpoint(&config.run_dir())?,
    };
    let ckpt = Checkpoint::load(&path)?;
    ckpt.check_vocab(corpus_vocab)?;
    info!("loaded {}", path.display());
    Ok(ckpt)
}

fn data(config: &Config) -> Result<(Corpus, Datasets)> {
    let corpus = pipeline::load_corpus(config)?;
    let data = pipeline::load_datasets(config, &corpus)?;
    Ok((corpus, data))
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Synth {
        out,
        entities,
        train,
        dev,
        negatives,
        data_seed,
    } = &cli.command
    {
        let d = synthetic::generate(&SyntheticConfig {
            n_entities: *entities,
            n_train: *train,
            n_dev: *dev,
            n_negatives: *negatives,
            seed: *data_seed,
        })?;
        let paths = d.write(out)?;
        println!("{}\n{}\n{}", paths.docs.display(), paths.train.display(), paths.dev.display());
        return Ok(());
    }
    if let Command::Report { dir, schedules, csv } = &cli.command {
        let config = resolve_config(&cli.global)?;
        let dir = dir.clone().unwrap_or(config.runs_dir);
        let runs = pipeline::load_run_summaries(&dir)?;
        let schedules = if schedules.is_empty() {
            let mut s: Vec<String> = runs.iter().map(|r| r.schedule.clone()).collect();
            s.sort();
            s.dedup();
            s
        } else {
            schedules.clone()
        };
        let report = schedule_report(&runs, &schedules);
        print!("{}", report.to_text());
        if let Some(p) = csv {
            std::fs::write(p, report.to_csv()?)?;
        }
        return Ok(());
    }

    let config = resolve_config(&cli.global)?;
    let run_dir = config.run_dir();
    match cli.command {
        Command::Synth { .. } | Command::Report { .. } => unreachable!(),
        Command::BuildCorpus => {
            let c = pipeline::build_corpus_file(&config)?;
            println!(
                "{} blocks, vocab {} -> {}",
                c.n_blocks(),
                c.vocab.len(),
                config.corpus_path.display()
            );
        }
        Command::Pretrain => {
            let corpus = pipeline::load_corpus(&config)?;
            let s = pipeline::run_pretrain(&config, &corpus, &run_dir)?;
            println!("pretrain done at step {}", s.global_step);
        }
        Command::TrainRetrieval => {
            let (corpus, data) = data(&config)?;
            let s = pipeline::run_retrieval(&config, &corpus, &data, &run_dir)?;
            println!(
                "retrieval done at step {}, best avg_rank {:?}",
                s.global_step, s.best_avg_rank
            );
        }
        Command::TrainJoint => {
            let (corpus, data) = data(&config)?;
            let j = pipeline::run_joint(&config, &corpus, &data, &run_dir)?;
            print_joint(&j);
        }
        Command::Run => {
            let (corpus, data) = data(&config)?;
            pipeline::run_pretrain(&config, &corpus, &run_dir)?;
            pipeline::run_retrieval(&config, &corpus, &data, &run_dir)?;
            let j = pipeline::run_joint(&config, &corpus, &data, &run_dir)?;
            print_joint(&j);
        }
        Command::Embed { checkpoint, out } => {
            let corpus = pipeline::load_corpus(&config)?;
            let ckpt = load_checkpoint(&config, corpus.vocab.len(), checkpoint.as_deref())?;
            let index = pipeline::embed_corpus(&config, &corpus, &ckpt.params, ckpt.state.snapshot_version)?;
            let out = out.unwrap_or_else(|| pipeline::index_path(&run_dir));
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            index.save(&out)?;
            println!("{} blocks -> {}", index.n_blocks(), out.display());
        }
        Command::Retrieve {
            query,
            k,
            checkpoint,
            index,
        } => {
            let corpus = pipeline::load_corpus(&config)?;
            let ckpt = load_checkpoint(&config, corpus.vocab.len(), checkpoint.as_deref())?;
            let index = active_index(&config, &corpus, &ckpt, index.as_deref())?;
            let q = ckpt.params.embed_query(&tokenize(&query, &corpus.vocab), Head::Retrieval)?;
            for (id, score) in index.top_k(q.view(), k)? {
                let text = corpus.block_text(id);
                let snippet: String = text.chars().take(80).collect();
                println!("{id}\t{score:.6}\t{snippet}");
            }
        }
        Command::Eval {
            checkpoint,
            index,
            out,
        } => {
            let (corpus, data) = data(&config)?;
            let ckpt = load_checkpoint(&config, corpus.vocab.len(), checkpoint.as_deref())?;
            let index = active_index(&config, &corpus, &ckpt, index.as_deref())?;
            let report = evaluate(&ckpt.params, &corpus, &index, &data.dev, &config)?;
            let out = out.unwrap_or_else(|| run_dir.join(pipeline::EVAL_FILE));
            report.save(&out)?;
            println!("{}", eval_line(&report));
        }
    }
    Ok(())
}

/// `explicit` if given, otherwise the corpus embedded with the checkpoint.
///
/// The snapshot saved during training is not reused by default: it was
/// embedded by an earlier passage encoder than the checkpoint's query encoder.
fn active_index(config: &Config, corpus: &Corpus, ckpt: &Checkpoint, explicit: Option<&Path>) -> Result<DenseIndex> {
    let index = match explicit {
        Some(p) => DenseIndex::load(p, Some(ckpt.params.config.d_proj))?,
        None => pipeline::embed_corpus(config, corpus, &ckpt.params, ckpt.state.snapshot_version)?,
    };
    if index.n_blocks() != corpus.n_blocks() {
        return Err(RomError::IncompatibleIndex(format!(
            "index has {} blocks, corpus {}",
            index.n_blocks(),
            corpus.n_blocks()
        ))
        .into());
    }
    Ok(index)
}

fn eval_line(report: &rom_core::eval::EvalReport) -> String {
    let topk: Vec<String> = report
        .topk_accuracy
        .iter()
        .map(|(k, v)| format!("top{k}={v:.2}"))
        .collect();
    let em: Vec<String> = report.em_at_k.iter().map(|(k, v)| format!("em@{k}={v:.2}")).collect();
    format!(
        "n={} em={:.2} {} {}",
        report.n_questions,
        report.exact_match,
        topk.join(" "),
        em.join(" ")
    )
}

fn print_joint(j: &pipeline::JointRun) {
    println!(
        "joint done at step {}: {} accepted refreshes",
        j.state.global_step, j.accepted_refreshes
    );
    let cols: Vec<String> = REPORT_TOPK
        .iter()
        .filter_map(|k| j.eval.topk_accuracy.get(k).map(|v| format!("top{k}={v:.2}")))
        .collect();
    println!("dev em={:.2} {}", j.eval.exact_match, cols.join(" "));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<RomError>() {
                Some(RomError::MissingPrerequisite(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
