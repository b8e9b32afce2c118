//! Training phases, the optimizer and the validation-gated joint loop.
//!
//! A [`Trainer`] owns the single shared model. Pretraining samples ICT and
//! PhraseICT batches from the corpus, the retrieval phase fits the retrieval
//! head on supervised pairs, and [`Trainer::joint_optimize`] interleaves
//! scheduled retrieval/reader training with index refreshes gated first on
//! dev average rank and then on dev top-k accuracy.

mod metrics;
mod optim;

pub use metrics::{read_rows, MetricsLog, MetricsRow, StepRow, METRICS_FILE, STEPS_FILE};
pub use optim::{Adam, AdamConfig, LrKind, LrSchedule};

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Config, PhaseConfig};
use crate::corpus::{make_ict_example, make_phrase_ict_example, Corpus, QaExample};
use crate::encoder::{passage_input, query_input, EncoderParams, Head, ReaderInput};
use crate::error::{Result, RomError};
use crate::eval::{exact_match, predict_answer, topk_accuracy};
use crate::index::{build_index, embed_queries, DenseIndex, Hits};
use crate::parallel;
use crate::scheduler::{phase_weights, Phase, Task, TaskWeights};
use crate::tasks::{
    combine_gradients, combine_losses, ict_loss, reader_loss, retrieval_loss, LossGrad, LossNormalizer, ReaderBatch,
    ReaderSample, RetrievalBatch, TaskLosses,
};

/// Retrieval depths reported in the metrics CSV.
pub const METRIC_KS: [usize; 5] = [1, 5, 10, 20, 100];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshRecord {
    pub epoch: usize,
    pub avg_rank: f64,
    /// Dev top-k accuracy of the rebuilt index.
    pub topk_acc: f64,
    pub accepted: bool,
    pub snapshot_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: Phase,
    /// Completed epochs of the current phase.
    pub epoch: usize,
    pub total_epochs: usize,
    pub global_step: u64,
    /// Lower is better; `None` before the first validation.
    pub best_avg_rank: Option<f64>,
    pub best_topk_acc: Option<f64>,
    /// Version of the most recently built index.
    pub snapshot_version: u64,
    pub accepted_snapshot_version: u64,
    pub refresh_log: Vec<RefreshRecord>,
    pub seed: u64,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        TrainState {
            phase: Phase::Pretrain,
            epoch: 0,
            total_epochs: 0,
            global_step: 0,
            best_avg_rank: None,
            best_topk_acc: None,
            snapshot_version: 0,
            accepted_snapshot_version: 0,
            refresh_log: Vec::new(),
            seed,
        }
    }

    pub fn accepted_refreshes(&self) -> impl Iterator<Item = &RefreshRecord> {
        self.refresh_log.iter().filter(|r| r.accepted)
    }

    /// Average rank strictly decreasing and top-k accuracy strictly
    /// increasing across accepted refreshes.
    pub fn refresh_log_is_monotone(&self) -> bool {
        let acc: Vec<&RefreshRecord> = self.accepted_refreshes().collect();
        acc.windows(2)
            .all(|w| w[1].avg_rank < w[0].avg_rank && w[1].topk_acc > w[0].topk_acc)
    }
}

/// Rank of each query's gold among the pool (1 = best), averaged.
///
/// Rank counts pool entries scoring strictly higher, plus equal scores with
/// a lower block id.
pub fn average_rank(query_emb: &Array2<f64>, pool_emb: &Array2<f64>, pool_ids: &[u32], gold: &[u32]) -> Result<f64> {
    if query_emb.nrows() != gold.len() || pool_emb.nrows() != pool_ids.len() {
        return Err(RomError::ShapeMismatch("average_rank inputs misaligned".into()));
    }
    if gold.is_empty() {
        return Err(RomError::invalid("no dev questions for average rank"));
    }
    let dot = |a: ArrayView1<f64>, b: ArrayView1<f64>| a.iter().zip(b.iter()).fold(0.0, |s, (x, y)| s + x * y);
    let mut total = 0usize;
    for (q, &g) in query_emb.rows().into_iter().zip(gold) {
        let gi = pool_ids.iter().position(|&p| p == g).ok_or(RomError::GoldMissing(g))?;
        let gs = dot(q, pool_emb.row(gi));
        let above = pool_emb
            .rows()
            .into_iter()
            .zip(pool_ids)
            .filter(|(row, &id)| {
                let s = dot(q, *row);
                s > gs || (s == gs && id < g)
            })
            .count();
        total += above + 1;
    }
    Ok(total as f64 / gold.len() as f64)
}

/// Every dev gold block plus every listed dev negative, sorted and unique.
pub fn candidate_pool(dev: &[QaExample]) -> Vec<u32> {
    let set: BTreeSet<u32> = dev
        .iter()
        .flat_map(|q| std::iter::once(q.positive_block_id).chain(q.negative_block_ids.iter().copied()))
        .collect();
    set.into_iter().collect()
}

/// Mean gold rank of `dev` questions within `pool`, through the retrieval head.
pub fn avg_rank_validation(params: &EncoderParams, corpus: &Corpus, dev: &[QaExample], pool: &[u32]) -> Result<f64> {
    let queries: Vec<Vec<u32>> = dev.iter().map(|q| q.question.clone()).collect();
    let q_emb = embed_queries(params, &queries, Head::Retrieval)?;
    let blocks = pool
        .iter()
        .map(|&id| corpus.block(id).ok_or_else(|| RomError::invalid(format!("pool block {id} not in corpus"))))
        .collect::<Result<Vec<_>>>()?;
    let rows = parallel::map(&blocks, |_, b| params.embed_passage(&b.title, &b.body, Head::Retrieval));
    let mut pool_emb = Array2::zeros((pool.len(), params.config.d_proj));
    for (i, r) in rows.into_iter().enumerate() {
        pool_emb.row_mut(i).assign(&r?);
    }
    let gold: Vec<u32> = dev.iter().map(|q| q.positive_block_id).collect();
    average_rank(&q_emb, &pool_emb, pool, &gold)
}

/// Top `n` block ids of `hits`; with `gold` set and absent, the lowest-ranked
/// entry is replaced by it.
pub fn reader_passages(hits: &Hits, n: usize, gold: Option<u32>) -> Vec<u32> {
    let mut ids: Vec<u32> = hits.iter().take(n).map(|h| h.0).collect();
    if let Some(g) = gold {
        if !ids.contains(&g) {
            if ids.len() < n {
                ids.push(g);
            } else if let Some(last) = ids.last_mut() {
                *last = g;
            }
        }
    }
    ids
}

/// Reader training sample for `ex` over `block_ids`; `None` when the gold
/// block is absent or every gold span was truncated away.
pub fn reader_sample(ex: &QaExample, block_ids: &[u32], corpus: &Corpus, max_len: usize) -> Option<ReaderSample> {
    let positive = block_ids.iter().position(|&b| b == ex.positive_block_id)?;
    let passages: Vec<ReaderInput> = block_ids
        .iter()
        .filter_map(|&id| corpus.block(id))
        .map(|b| ReaderInput::new(&ex.question, &b.title, &b.body, max_len))
        .collect();
    if passages.len() != block_ids.len() {
        return None;
    }
    let body_len = passages[positive].body_len;
    let gold_spans: Vec<(usize, usize)> = ex.gold_spans.iter().copied().filter(|&(_, e)| e < body_len).collect();
    (!gold_spans.is_empty()).then_some(ReaderSample {
        passages,
        positive,
        gold_spans,
    })
}

fn phase_salt(phase: Phase) -> u64 {
    match phase {
        Phase::Pretrain => 1,
        Phase::Retrieval => 2,
        Phase::Joint => 3,
    }
}

/// Independent stream per (seed, phase, purpose, counter).
fn stream_rng(seed: u64, phase: Phase, purpose: u64, counter: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((phase_salt(phase) << 60) | (purpose << 52) | (counter & ((1 << 52) - 1)));
    r
}

const PURPOSE_BATCH: u64 = 1;
const PURPOSE_DROPOUT: u64 = 2;
const PURPOSE_SHUFFLE: u64 = 3;

/// What the joint loop produced.
#[derive(Debug, Clone)]
pub struct JointOutcome {
    /// Index of the last accepted snapshot (or the initial one).
    pub index: DenseIndex,
    pub accepted_refreshes: usize,
}

pub struct Trainer<'a> {
    pub config: &'a Config,
    pub corpus: &'a Corpus,
    pub params: EncoderParams,
    pub state: TrainState,
    pub optimizer: Option<Adam>,
    pub log: MetricsLog,
    run_dir: Option<PathBuf>,
}

struct StepPlan<'p> {
    phase: Phase,
    epoch: usize,
    step_in_epoch: usize,
    steps_per_epoch: usize,
    lr: &'p LrSchedule,
    weights: TaskWeights,
}

impl<'a> Trainer<'a> {
    /// `run_dir` receives checkpoints and index snapshots; `None` keeps
    /// everything in memory.
    pub fn new(config: &'a Config, corpus: &'a Corpus, params: EncoderParams, run_dir: Option<&Path>) -> Result<Self> {
        let log = MetricsLog::in_memory();
        Ok(Trainer {
            config,
            corpus,
            params,
            state: TrainState::new(config.seed),
            optimizer: None,
            log,
            run_dir: run_dir.map(Path::to_path_buf),
        })
    }

    /// Resumes from a checkpoint's parameters and state.
    pub fn from_checkpoint(config: &'a Config, corpus: &'a Corpus, ckpt: Checkpoint, run_dir: Option<&Path>) -> Result<Self> {
        let mut t = Trainer::new(config, corpus, ckpt.params, run_dir)?;
        t.state = ckpt.state;
        t.state.seed = config.seed;
        Ok(t)
    }

    pub fn with_log(mut self, log: MetricsLog) -> Self {
        self.log = log;
        self
    }

    fn step_budget_left(&self) -> bool {
        self.config.max_steps == 0 || self.state.global_step < self.config.max_steps
    }

    fn begin_phase(&mut self, phase: Phase, epochs: usize) {
        self.state.phase = phase;
        self.state.epoch = 0;
        self.state.total_epochs = epochs;
        self.optimizer = Some(Adam::new(&self.params, self.config.adam));
    }

    fn dropout_seed(&self, phase: Phase, task: Task) -> Option<u64> {
        (self.params.config.dropout > 0.0).then(|| {
            stream_rng(self.config.seed, phase, PURPOSE_DROPOUT, self.state.global_step * 8 + task.index() as u64).next_u64()
        })
    }

    /// Combines task losses, takes one optimizer step and records it.
    fn apply_step(
        &mut self,
        plan: &StepPlan,
        losses: Vec<(Task, LossGrad)>,
        normalizer: &mut LossNormalizer,
    ) -> Result<(TaskLosses, f64)> {
        let mut raw = TaskLosses::default();
        for (task, lg) in &losses {
            raw.set(*task, lg.loss);
        }
        normalizer.observe(&raw);
        let bundle = combine_losses(raw, plan.weights, normalizer.factors())?;
        let grads: Vec<(Task, &EncoderParams)> = losses.iter().map(|(t, lg)| (*t, &lg.grads)).collect();
        let total = combine_gradients(&bundle, &grads, &self.params);
        let step = plan.epoch * plan.steps_per_epoch + plan.step_in_epoch + 1;
        let epoch_f = plan.epoch as f64 + plan.step_in_epoch as f64 / plan.steps_per_epoch.max(1) as f64;
        let lr = plan.lr.lr_at(step, epoch_f);
        let opt = self.optimizer.get_or_insert_with(|| Adam::new(&self.params, self.config.adam));
        let frozen = (plan.phase == Phase::Joint && self.config.freeze_embeddings).then(|| self.params.tok_emb.clone());
        opt.step(&mut self.params, &total, lr)?;
        if let Some(tok_emb) = frozen {
            self.params.tok_emb = tok_emb;
        }
        self.params.round_to_f32();
        self.state.global_step += 1;
        self.log.push_step(StepRow {
            phase: plan.phase.name().to_string(),
            epoch: plan.epoch,
            step: self.state.global_step,
            lr,
            loss_total: bundle.combined,
            loss_ict: raw.get(Task::Ict),
            loss_phrase_ict: raw.get(Task::PhraseIct),
            loss_retrieval: raw.get(Task::Retrieval),
            loss_reader: raw.get(Task::Reader),
        })?;
        Ok((raw, bundle.combined))
    }

    fn save_checkpoint(&self, name: &str) -> Result<()> {
        if let Some(dir) = &self.run_dir {
            let dir = dir.join("checkpoints");
            std::fs::create_dir_all(&dir)?;
            Checkpoint {
                params: self.params.clone(),
                optimizer: self.optimizer.clone(),
                state: self.state.clone(),
            }
            .save(&dir.join(format!("{name}.ckpt")))?;
        }
        Ok(())
    }

    fn steps_per_epoch(p: &PhaseConfig, n_items: usize) -> usize {
        if p.steps_per_epoch > 0 {
            p.steps_per_epoch
        } else {
            n_items.div_ceil(p.batch_size).max(1)
        }
    }

    /// ICT / PhraseICT pretraining over the corpus blocks.
    pub fn pretrain(&mut self) -> Result<()> {
        let cfg = self.config;
        let pc = &cfg.pretrain;
        let mix = cfg.pretrain_mix();
        let weights = phase_weights(Phase::Pretrain, mix, None, 0)?;
        let ict_pool: Vec<usize> = (0..self.corpus.n_blocks())
            .filter(|&i| self.corpus.blocks[i].n_sentences() >= 2)
            .collect();
        let phrase_pool: Vec<usize> = (0..self.corpus.n_blocks())
            .filter(|&i| self.corpus.blocks[i].body.len() >= 4)
            .collect();
        for (task, pool) in [(Task::Ict, &ict_pool), (Task::PhraseIct, &phrase_pool)] {
            if weights.get(task) > 0.0 && pool.len() < 2 {
                return Err(match task {
                    Task::Ict => RomError::BlockTooShortForIct,
                    _ => RomError::BlockTooShortForPhraseIct,
                });
            }
        }
        let spe = Self::steps_per_epoch(pc, ict_pool.len().max(phrase_pool.len()));
        let lr = pc.lr_schedule(spe * pc.epochs);
        let multi = weights.active().count() > 1;
        let mut normalizer = LossNormalizer::new(cfg.loss_normalize && multi, cfg.loss_decay);
        self.begin_phase(Phase::Pretrain, pc.epochs);
        let max_len = self.params.config.max_seq_len;
        for epoch in 0..pc.epochs {
            if !self.step_budget_left() {
                break;
            }
            let mut acc = EpochAccumulator::default();
            for s in 0..spe {
                if !self.step_budget_left() {
                    break;
                }
                let mut rng = stream_rng(cfg.seed, Phase::Pretrain, PURPOSE_BATCH, self.state.global_step);
                let mut losses = Vec::new();
                for (task, pool) in [(Task::Ict, &ict_pool), (Task::PhraseIct, &phrase_pool)] {
                    if weights.get(task) == 0.0 {
                        continue;
                    }
                    let b = pc.batch_size.min(pool.len());
                    let picks = rand::seq::index::sample(&mut rng, pool.len(), b);
                    let mut batch = RetrievalBatch {
                        queries: Vec::with_capacity(b),
                        passages: Vec::with_capacity(b),
                        positive_index: (0..b).collect(),
                    };
                    for i in picks.iter() {
                        let block = &self.corpus.blocks[pool[i]];
                        let ex = match task {
                            Task::Ict => make_ict_example(block, &mut rng, cfg.keep_prob)?,
                            _ => {
                                let remove = rand::Rng::random::<f64>(&mut rng) >= cfg.keep_prob;
                                make_phrase_ict_example(block, self.corpus, &mut rng, remove)?
                            }
                        };
                        batch.queries.push(query_input(&ex.pseudo_query, max_len));
                        batch.passages.push(passage_input(&block.title, &ex.evidence, max_len));
                    }
                    let seed = self.dropout_seed(Phase::Pretrain, task);
                    losses.push((task, ict_loss(&self.params, &batch, seed)?));
                }
                let plan = StepPlan {
                    phase: Phase::Pretrain,
                    epoch,
                    step_in_epoch: s,
                    steps_per_epoch: spe,
                    lr: &lr,
                    weights,
                };
                let (raw, total) = self.apply_step(&plan, losses, &mut normalizer)?;
                acc.add(&raw, total);
            }
            normalizer.freeze();
            self.state.epoch = epoch + 1;
            let row = acc.row(epoch, Phase::Pretrain, weights, self.state.snapshot_version);
            info!("pretrain epoch {epoch}: loss {:.4}", row.loss_total);
            self.log.push_epoch(row)?;
        }
        self.save_checkpoint("pretrain")
    }

    fn retrieval_batch(&self, train: &[QaExample], idx: &[usize], hard: &[Option<u32>]) -> RetrievalBatch {
        let max_len = self.params.config.max_seq_len;
        let passage = |id: u32| {
            let b = &self.corpus.blocks[id as usize];
            passage_input(&b.title, &b.body, max_len)
        };
        let mut batch = RetrievalBatch {
            queries: idx.iter().map(|&i| query_input(&train[i].question, max_len)).collect(),
            passages: idx.iter().map(|&i| passage(train[i].positive_block_id)).collect(),
            positive_index: (0..idx.len()).collect(),
        };
        if self.config.hard_negatives {
            for &i in idx {
                if let Some(n) = hard[i] {
                    batch.passages.push(passage(n));
                }
            }
        }
        batch
    }

    /// Supervised retrieval on question/positive pairs. Keeps the epoch with
    /// the best dev average rank.
    pub fn train_retrieval(&mut self, train: &[QaExample], dev: &[QaExample]) -> Result<()> {
        let cfg = self.config;
        let pc = &cfg.retrieval;
        check_questions(train, "train")?;
        let weights = phase_weights(Phase::Retrieval, cfg.pretrain_mix(), None, 0)?;
        let spe = Self::steps_per_epoch(pc, train.len());
        let lr = pc.lr_schedule(spe * pc.epochs);
        let mut normalizer = LossNormalizer::new(false, cfg.loss_decay);
        let pool = candidate_pool(dev);
        let hard: Vec<Option<u32>> = train.iter().map(|q| q.negative_block_ids.first().copied()).collect();
        if !self.params.config.tie_heads {
            // start the supervised head from the pretrained one
            self.params.w_ret = self.params.w_ict.clone();
        }
        self.begin_phase(Phase::Retrieval, pc.epochs);
        let mut best: Option<(f64, EncoderParams)> = None;
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..pc.epochs {
            if !self.step_budget_left() {
                break;
            }
            order.shuffle(&mut stream_rng(cfg.seed, Phase::Retrieval, PURPOSE_SHUFFLE, epoch as u64));
            let mut acc = EpochAccumulator::default();
            for s in 0..spe {
                if !self.step_budget_left() {
                    break;
                }
                let idx = cycle_slice(&order, s * pc.batch_size, pc.batch_size.min(train.len()));
                let batch = self.retrieval_batch(train, &idx, &hard);
                let seed = self.dropout_seed(Phase::Retrieval, Task::Retrieval);
                let losses = vec![(Task::Retrieval, retrieval_loss(&self.params, &batch, seed)?)];
                let plan = StepPlan {
                    phase: Phase::Retrieval,
                    epoch,
                    step_in_epoch: s,
                    steps_per_epoch: spe,
                    lr: &lr,
                    weights,
                };
                let (raw, total) = self.apply_step(&plan, losses, &mut normalizer)?;
                acc.add(&raw, total);
            }
            self.state.epoch = epoch + 1;
            let mut row = acc.row(epoch, Phase::Retrieval, weights, self.state.snapshot_version);
            if !dev.is_empty() {
                let avg = avg_rank_validation(&self.params, self.corpus, dev, &pool)?;
                row.avg_rank = Some(avg);
                if best.as_ref().is_none_or(|(b, _)| avg < *b) {
                    best = Some((avg, self.params.clone()));
                }
            }
            info!("retrieval epoch {epoch}: loss {:.4} avg_rank {:?}", row.loss_total, row.avg_rank);
            self.log.push_epoch(row)?;
        }
        if let Some((_, p)) = best {
            self.params = p;
        }
        self.save_checkpoint("retrieval")
    }

    fn retrieve(&self, index: &DenseIndex, questions: &[QaExample], k: usize) -> Result<Vec<Hits>> {
        let queries: Vec<Vec<u32>> = questions.iter().map(|q| q.question.clone()).collect();
        let q_emb = embed_queries(&self.params, &queries, Head::Retrieval)?;
        index.top_k_batch(&q_emb, k.min(index.n_blocks()))
    }

    fn build_snapshot(&mut self) -> Result<DenseIndex> {
        self.state.snapshot_version += 1;
        build_index(
            &self.params,
            self.corpus,
            Head::Retrieval,
            self.config.index_batch_size,
            self.state.snapshot_version,
        )
    }

    fn dev_em(&self, dev: &[QaExample], passages: &[Vec<u32>]) -> Result<f64> {
        let k = self.config.reader_k_passages;
        let preds = parallel::map(dev, |i, q| {
            let ids: Vec<u32> = passages[i].iter().take(k).copied().collect();
            predict_answer(&self.params, self.corpus, &q.question, &ids, self.config.max_span_len)
        });
        let golds: Vec<Vec<String>> = dev.iter().map(|q| q.answers.clone()).collect();
        exact_match(&preds.into_iter().collect::<Result<Vec<_>>>()?, &golds)
    }

    fn metric_topk(&self, results: &[Hits], dev: &[QaExample]) -> Result<Vec<f64>> {
        let n = self.corpus.n_blocks();
        let ks: Vec<usize> = METRIC_KS.iter().map(|&k| k.min(n)).collect();
        let answers: Vec<Vec<String>> = dev.iter().map(|q| q.answers.clone()).collect();
        let acc = topk_accuracy(results, &answers, self.corpus, &ks)?;
        Ok(ks.iter().map(|k| acc[k]).collect())
    }

    /// The joint loop. `initial` is the index the first reader inputs come
    /// from; when `None` it is built from the current parameters.
    pub fn joint_optimize(
        &mut self,
        train: &[QaExample],
        dev: &[QaExample],
        initial: Option<DenseIndex>,
    ) -> Result<JointOutcome> {
        let cfg = self.config;
        let pc = &cfg.joint;
        check_questions(train, "train")?;
        check_questions(dev, "dev")?;
        let schedule = cfg.joint_schedule();
        schedule.validate()?;
        let n_blocks = self.corpus.n_blocks();
        let depth = METRIC_KS.iter().copied().max().unwrap_or(1).max(cfg.reader_passages).max(cfg.refresh_k);
        let refresh_col = METRIC_KS.iter().position(|&k| k == cfg.refresh_k);
        let pool = candidate_pool(dev);
        let max_len = self.params.config.max_seq_len;

        let mut index = match initial {
            Some(ix) => {
                if ix.d_proj() != self.params.config.d_proj || ix.n_blocks() != n_blocks {
                    return Err(RomError::IncompatibleIndex("initial index does not match model/corpus".into()));
                }
                self.state.snapshot_version = self.state.snapshot_version.max(ix.snapshot_version());
                ix
            }
            None => self.build_snapshot()?,
        };
        self.state.accepted_snapshot_version = index.snapshot_version();
        let refresh_acc = |trainer: &Self, results: &[Hits]| -> Result<(Vec<f64>, f64)> {
            let cols = trainer.metric_topk(results, dev)?;
            let acc = match refresh_col {
                Some(c) => cols[c],
                None => {
                    let answers: Vec<Vec<String>> = dev.iter().map(|q| q.answers.clone()).collect();
                    let k = cfg.refresh_k.min(n_blocks);
                    topk_accuracy(results, &answers, trainer.corpus, &[k])?[&k]
                }
            };
            Ok((cols, acc))
        };

        let train_hits = self.retrieve(&index, train, depth)?;
        let dev_hits = self.retrieve(&index, dev, depth)?;
        let mut train_passages: Vec<Vec<u32>> = train
            .iter()
            .zip(&train_hits)
            .map(|(q, h)| reader_passages(h, cfg.reader_passages, Some(q.positive_block_id)))
            .collect();
        let mut dev_passages: Vec<Vec<u32>> = dev_hits.iter().map(|h| reader_passages(h, cfg.reader_passages, None)).collect();
        let mut hard = hard_negatives(train, &train_hits);
        let initial_avg = avg_rank_validation(&self.params, self.corpus, dev, &pool)?;
        let (_, initial_acc) = refresh_acc(self, &dev_hits)?;
        self.state.best_avg_rank = Some(initial_avg);
        self.state.best_topk_acc = Some(initial_acc);
        info!("joint start: avg_rank {initial_avg:.3} top-{} {initial_acc:.2}", cfg.refresh_k);

        let spe = Self::steps_per_epoch(pc, train.len());
        let lr = pc.lr_schedule(spe * pc.epochs);
        let mut normalizer = LossNormalizer::new(cfg.loss_normalize, cfg.loss_decay);
        self.begin_phase(Phase::Joint, pc.epochs);
        let mut accepted = 0usize;
        let mut since_accept = 0usize;
        let mut best_em: Option<f64> = None;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut reader_order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..pc.epochs {
            if !self.step_budget_left() {
                break;
            }
            let weights = phase_weights(Phase::Joint, cfg.pretrain_mix(), Some(&schedule), epoch)?;
            order.shuffle(&mut stream_rng(cfg.seed, Phase::Joint, PURPOSE_SHUFFLE, 2 * epoch as u64));
            reader_order.shuffle(&mut stream_rng(cfg.seed, Phase::Joint, PURPOSE_SHUFFLE, 2 * epoch as u64 + 1));
            let samples: Vec<Option<ReaderSample>> = train
                .iter()
                .zip(&train_passages)
                .map(|(q, ids)| reader_sample(q, ids, self.corpus, max_len))
                .collect();
            let usable: Vec<usize> = reader_order.iter().copied().filter(|&i| samples[i].is_some()).collect();
            let mut acc = EpochAccumulator::default();
            for s in 0..spe {
                if !self.step_budget_left() {
                    break;
                }
                let mut losses = Vec::new();
                if weights.get(Task::Retrieval) > 0.0 {
                    let idx = cycle_slice(&order, s * pc.batch_size, pc.batch_size.min(train.len()));
                    let batch = self.retrieval_batch(train, &idx, &hard);
                    let seed = self.dropout_seed(Phase::Joint, Task::Retrieval);
                    losses.push((Task::Retrieval, retrieval_loss(&self.params, &batch, seed)?));
                }
                if weights.get(Task::Reader) > 0.0 && !usable.is_empty() {
                    let rb = cfg.reader_batch_size.min(usable.len());
                    let idx = cycle_slice(&usable, s * rb, rb);
                    let batch = ReaderBatch {
                        samples: idx.iter().map(|&i| samples[i].clone().expect("filtered")).collect(),
                    };
                    let seed = self.dropout_seed(Phase::Joint, Task::Reader);
                    losses.push((Task::Reader, reader_loss(&self.params, &batch, seed)?));
                }
                if losses.is_empty() {
                    continue;
                }
                let plan = StepPlan {
                    phase: Phase::Joint,
                    epoch,
                    step_in_epoch: s,
                    steps_per_epoch: spe,
                    lr: &lr,
                    weights,
                };
                let (raw, total) = self.apply_step(&plan, losses, &mut normalizer)?;
                acc.add(&raw, total);
            }
            normalizer.freeze();
            self.state.epoch = epoch + 1;
            let mut row = acc.row(epoch, Phase::Joint, weights, self.state.accepted_snapshot_version);

            let avg = avg_rank_validation(&self.params, self.corpus, dev, &pool)?;
            row.avg_rank = Some(avg);
            let mut refreshed = false;
            if self.state.best_avg_rank.is_none_or(|b| avg < b) {
                self.state.best_avg_rank = Some(avg);
                row.refresh_attempted = true;
                let candidate = self.build_snapshot()?;
                let dev_hits = self.retrieve(&candidate, dev, depth)?;
                let (cols, top) = refresh_acc(self, &dev_hits)?;
                row.set_topk(&cols);
                let ok = self.state.best_topk_acc.is_none_or(|b| top > b);
                self.state.refresh_log.push(RefreshRecord {
                    epoch,
                    avg_rank: avg,
                    topk_acc: top,
                    accepted: ok,
                    snapshot_version: candidate.snapshot_version(),
                });
                if ok {
                    self.state.best_topk_acc = Some(top);
                    let train_hits = self.retrieve(&candidate, train, depth)?;
                    train_passages = train
                        .iter()
                        .zip(&train_hits)
                        .map(|(q, h)| reader_passages(h, cfg.reader_passages, Some(q.positive_block_id)))
                        .collect();
                    dev_passages = dev_hits.iter().map(|h| reader_passages(h, cfg.reader_passages, None)).collect();
                    hard = hard_negatives(train, &train_hits);
                    index = candidate;
                    self.state.accepted_snapshot_version = index.snapshot_version();
                    row.refresh_accepted = true;
                    row.snapshot_version = index.snapshot_version();
                    accepted += 1;
                    refreshed = true;
                    if let Some(dir) = &self.run_dir {
                        let d = dir.join("index");
                        std::fs::create_dir_all(&d)?;
                        index.save(&d.join("index.bin"))?;
                    }
                }
                info!(
                    "joint epoch {epoch}: refresh attempt avg_rank {avg:.3} top-{} {top:.2} accepted={ok}",
                    cfg.refresh_k
                );
            }
            let em = self.dev_em(dev, &dev_passages)?;
            row.em_dev = Some(em);
            info!("joint epoch {epoch}: loss {:.4} avg_rank {avg:.3} em {em:.2}", row.loss_total);
            self.log.push_epoch(row)?;
            if best_em.is_none_or(|b| em > b) {
                best_em = Some(em);
                self.save_checkpoint("joint-best")?;
            }
            since_accept = if refreshed { 0 } else { since_accept + 1 };
            if cfg.early_stopping > 0 && since_accept >= cfg.early_stopping {
                info!("joint: no accepted refresh for {since_accept} epochs, stopping");
                break;
            }
        }
        self.save_checkpoint("joint")?;
        if let Some(dir) = &self.run_dir {
            let d = dir.join("index");
            std::fs::create_dir_all(&d)?;
            index.save(&d.join("index.bin"))?;
        }
        Ok(JointOutcome {
            index,
            accepted_refreshes: accepted,
        })
    }
}

fn check_questions(qs: &[QaExample], which: &str) -> Result<()> {
    if qs.is_empty() {
        return Err(RomError::invalid(format!("no {which} questions")));
    }
    Ok(())
}

/// `len` items of `order` starting at `start`, wrapping around.
fn cycle_slice(order: &[usize], start: usize, len: usize) -> Vec<usize> {
    (0..len).map(|j| order[(start + j) % order.len()]).collect()
}

/// Highest-ranked non-gold block per question, falling back to the
/// dataset's first listed negative.
fn hard_negatives(train: &[QaExample], hits: &[Hits]) -> Vec<Option<u32>> {
    train
        .iter()
        .zip(hits)
        .map(|(q, h)| {
            h.iter()
                .map(|x| x.0)
                .find(|&id| id != q.positive_block_id)
                .or_else(|| q.negative_block_ids.first().copied())
        })
        .collect()
}

#[derive(Default)]
struct EpochAccumulator {
    steps: usize,
    total: f64,
    sums: [f64; 4],
    counts: [usize; 4],
}

impl EpochAccumulator {
    fn add(&mut self, raw: &TaskLosses, total: f64) {
        self.steps += 1;
        self.total += total;
        for t in Task::ALL {
            if let Some(v) = raw.get(t) {
                self.sums[t.index()] += v;
                self.counts[t.index()] += 1;
            }
        }
    }

    fn mean(&self, t: Task) -> Option<f64> {
        let i = t.index();
        (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64)
    }

    fn row(&self, epoch: usize, phase: Phase, w: TaskWeights, snapshot_version: u64) -> MetricsRow {
        let ict = match (self.mean(Task::Ict), self.mean(Task::PhraseIct)) {
            (Some(a), Some(b)) => Some(0.5 * (a + b)),
            (a, b) => a.or(b),
        };
        MetricsRow {
            epoch,
            phase: phase.name().to_string(),
            lambda_retrieval: w.get(Task::Retrieval),
            lambda_reader: w.get(Task::Reader),
            loss_total: if self.steps > 0 { self.total / self.steps as f64 } else { 0.0 },
            loss_ict: ict,
            loss_retrieval: self.mean(Task::Retrieval),
            loss_reader: self.mean(Task::Reader),
            avg_rank: None,
            top1: None,
            top5: None,
            top10: None,
            top20: None,
            top100: None,
            em_dev: None,
            refresh_attempted: false,
            refresh_accepted: false,
            snapshot_version,
        }
    }
}
