//! Per-task losses with exact gradients, the reader's span decoder and the
//! scheduled loss combination.

mod reader;

pub use reader::{
    best_span, reader_logits, reader_loss, reader_predict, PassageLogits, ReaderBatch, ReaderSample, SpanPrediction,
};

use ndarray::{Array1, Array2};
use rand::SeedableRng;

use crate::encoder::{DropoutRng, EncoderParams, ForwardCache, Head};
use crate::error::{Result, RomError};
use crate::parallel;
use crate::scheduler::{Task, TaskWeights};

/// Sequences per gradient-accumulation chunk. Fixed so the reduction order
/// (and therefore every bit of the summed gradient) is independent of the
/// number of worker threads.
const GRAD_CHUNK: usize = 4;

/// A loss value and its gradient with respect to every parameter.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: EncoderParams,
}

/// Contrastive batch over assembled input sequences (`[CLS] … [SEP]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalBatch {
    pub queries: Vec<Vec<u32>>,
    /// One positive per query plus any appended hard negatives.
    pub passages: Vec<Vec<u32>>,
    pub positive_index: Vec<usize>,
}

impl RetrievalBatch {
    fn validate(&self) -> Result<()> {
        if self.passages.len() < 2 {
            return Err(RomError::TooFewCandidates);
        }
        if self.queries.is_empty() || self.positive_index.len() != self.queries.len() {
            return Err(RomError::invalid("every query needs exactly one positive index"));
        }
        let mut seen = vec![false; self.passages.len()];
        for &p in &self.positive_index {
            if p >= self.passages.len() || seen[p] {
                return Err(RomError::invalid(format!("positive index {p} invalid or repeated")));
            }
            seen[p] = true;
        }
        Ok(())
    }
}

pub(crate) fn dropout_rng(seed: Option<u64>, stream: usize) -> Option<DropoutRng> {
    seed.map(|s| {
        let mut r = DropoutRng::seed_from_u64(s);
        r.set_stream(stream as u64);
        r
    })
}

/// Runs forward passes for `seqs` in parallel, returning outputs and caches in order.
pub(crate) fn forward_all(
    params: &EncoderParams,
    seqs: &[Vec<u32>],
    dropout_seed: Option<u64>,
) -> Result<Vec<(Array2<f64>, ForwardCache)>> {
    parallel::map(seqs, |i, ids| {
        let mut rng = dropout_rng(dropout_seed, i);
        params.forward_cached(ids, rng.as_mut()).map(|(o, c)| (o.hidden, c))
    })
    .into_iter()
    .collect()
}

/// Backpropagates per-sequence hidden-state gradients and sums the result
/// in a fixed order.
pub(crate) fn backprop_all(params: &EncoderParams, caches: &[&ForwardCache], d_hidden: &[Array2<f64>]) -> EncoderParams {
    debug_assert_eq!(caches.len(), d_hidden.len());
    let idx: Vec<usize> = (0..caches.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(GRAD_CHUNK).collect();
    let partials = parallel::map(&chunks, |_, chunk| {
        let mut g = params.zeros_like();
        for &i in chunk.iter() {
            params.backward(caches[i], &d_hidden[i], &mut g);
        }
        g
    });
    let mut total = params.zeros_like();
    for g in &partials {
        total.add_scaled(g, 1.0);
    }
    total
}

fn log_softmax(row: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + row.mapv(|x| (x - max).exp()).sum().ln();
    row.mapv(|x| x - lse)
}

/// In-batch softmax NLL over inner-product scores `q_i · p_j` through `head`.
pub fn contrastive_loss(
    params: &EncoderParams,
    batch: &RetrievalBatch,
    head: Head,
    dropout_seed: Option<u64>,
) -> Result<LossGrad> {
    batch.validate()?;
    let n_q = batch.queries.len();
    let n_p = batch.passages.len();
    let seqs: Vec<Vec<u32>> = batch.queries.iter().chain(batch.passages.iter()).cloned().collect();
    let fwd = forward_all(params, &seqs, dropout_seed)?;

    let w = params.head_matrix(head);
    let d = params.config.d_model;
    let mut cls = Array2::zeros((seqs.len(), d));
    for (i, (h, _)) in fwd.iter().enumerate() {
        cls.row_mut(i).assign(&h.row(0));
    }
    let emb = cls.dot(w);
    let q = emb.slice(ndarray::s![..n_q, ..]);
    let p = emb.slice(ndarray::s![n_q.., ..]);
    let scores = q.dot(&p.t());

    let mut loss = 0.0;
    let mut d_scores = Array2::zeros((n_q, n_p));
    for i in 0..n_q {
        let ls = log_softmax(scores.row(i));
        let pos = batch.positive_index[i];
        loss -= ls[pos];
        let mut dr = d_scores.row_mut(i);
        dr.assign(&ls.mapv(f64::exp));
        dr[pos] -= 1.0;
    }
    let inv = 1.0 / n_q as f64;
    loss *= inv;
    d_scores *= inv;
    if !loss.is_finite() {
        return Err(RomError::Diverged(format!("{head:?} loss is {loss}")));
    }

    let mut d_emb = Array2::zeros(emb.raw_dim());
    d_emb.slice_mut(ndarray::s![..n_q, ..]).assign(&d_scores.dot(&p));
    d_emb.slice_mut(ndarray::s![n_q.., ..]).assign(&d_scores.t().dot(&q));
    let d_cls = d_emb.dot(&w.t());

    let d_hidden: Vec<Array2<f64>> = fwd
        .iter()
        .enumerate()
        .map(|(i, (h, _))| {
            let mut dh = Array2::zeros(h.raw_dim());
            dh.row_mut(0).assign(&d_cls.row(i));
            dh
        })
        .collect();
    let caches: Vec<&ForwardCache> = fwd.iter().map(|(_, c)| c).collect();
    let mut grads = backprop_all(params, &caches, &d_hidden);
    let dw = cls.t().dot(&d_emb);
    *grads.head_matrix_grad_mut(head) += &dw;
    Ok(LossGrad { loss, grads })
}

/// ICT / PhraseICT loss (ICT head).
pub fn ict_loss(params: &EncoderParams, batch: &RetrievalBatch, dropout_seed: Option<u64>) -> Result<LossGrad> {
    contrastive_loss(params, batch, Head::Ict, dropout_seed)
}

/// Supervised retrieval loss (retrieval head).
pub fn retrieval_loss(params: &EncoderParams, batch: &RetrievalBatch, dropout_seed: Option<u64>) -> Result<LossGrad> {
    contrastive_loss(params, batch, Head::Retrieval, dropout_seed)
}

/// Raw per-task losses of one step; `None` for tasks not evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TaskLosses(pub [Option<f64>; 4]);

impl TaskLosses {
    pub fn set(&mut self, task: Task, value: f64) {
        self.0[task.index()] = Some(value);
    }

    pub fn get(&self, task: Task) -> Option<f64> {
        self.0[task.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub raw: TaskLosses,
    pub norm: [f64; 4],
    pub weights: TaskWeights,
    pub combined: f64,
}

impl LossBundle {
    /// Coefficient `λ_i / norm_i` multiplying task `i`'s gradient.
    pub fn coefficient(&self, task: Task) -> f64 {
        self.weights.get(task) / self.norm[task.index()]
    }
}

/// `combined = Σ λ_i · raw_i / norm_i` over tasks with non-zero weight.
pub fn combine_losses(raw: TaskLosses, weights: TaskWeights, norms: [f64; 4]) -> Result<LossBundle> {
    let mut combined = 0.0;
    for task in Task::ALL {
        let lambda = weights.get(task);
        if let Some(r) = raw.get(task) {
            if !r.is_finite() {
                return Err(RomError::Diverged(format!("{} loss is {r}", task.name())));
            }
        }
        if lambda == 0.0 {
            continue;
        }
        let n = norms[task.index()];
        if !(n > 0.0 && n.is_finite()) {
            return Err(RomError::invalid(format!("normalization factor for {} must be positive", task.name())));
        }
        let r = raw
            .get(task)
            .ok_or_else(|| RomError::invalid(format!("weighted task {} has no loss", task.name())))?;
        combined += lambda * r / n;
    }
    Ok(LossBundle {
        raw,
        norm: norms,
        weights,
        combined,
    })
}

/// Sums task gradients with the bundle's coefficients.
pub fn combine_gradients(bundle: &LossBundle, grads: &[(Task, &EncoderParams)], template: &EncoderParams) -> EncoderParams {
    let mut total = template.zeros_like();
    for (task, g) in grads {
        let c = bundle.coefficient(*task);
        if c != 0.0 {
            total.add_scaled(g, c);
        }
    }
    total
}

/// Running normalization factors: exponential average of each task's raw
/// loss until frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct LossNormalizer {
    enabled: bool,
    decay: f64,
    ema: [Option<f64>; 4],
    frozen: bool,
}

impl LossNormalizer {
    pub fn new(enabled: bool, decay: f64) -> Self {
        LossNormalizer {
            enabled,
            decay,
            ema: [None; 4],
            frozen: false,
        }
    }

    /// Current factors; 1 for tasks never observed or when disabled.
    pub fn factors(&self) -> [f64; 4] {
        let mut out = [1.0; 4];
        if self.enabled {
            for (o, e) in out.iter_mut().zip(self.ema) {
                if let Some(v) = e {
                    *o = v.abs().max(1e-8);
                }
            }
        }
        out
    }

    pub fn observe(&mut self, raw: &TaskLosses) {
        if self.frozen {
            return;
        }
        for task in Task::ALL {
            if let Some(r) = raw.get(task) {
                let e = &mut self.ema[task.index()];
                *e = Some(match *e {
                    None => r,
                    Some(prev) => self.decay * prev + (1.0 - self.decay) * r,
                });
            }
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}
