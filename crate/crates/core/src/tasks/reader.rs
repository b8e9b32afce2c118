use ndarray::{s, Array1, Array2};

use super::{backprop_all, forward_all, LossGrad};
use crate::corpus::{detokenize, Block, Vocab};
use crate::encoder::{EncoderParams, ForwardCache, ReaderInput};
use crate::error::{Result, RomError};
use crate::parallel;

/// One question with its M candidate passages, exactly one of them positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReaderSample {
    pub passages: Vec<ReaderInput>,
    pub positive: usize,
    /// Inclusive `(start, end)` indices into the positive passage body.
    pub gold_spans: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReaderBatch {
    pub samples: Vec<ReaderSample>,
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn log_softmax(x: &Array1<f64>) -> Array1<f64> {
    let lse = logsumexp(x.iter().copied());
    x.mapv(|v| v - lse)
}

/// Selection NLL of the positive passage plus the marginal span NLL
/// `-log Σ_gold p_start(s)·p_end(e)`, averaged over questions.
pub fn reader_loss(params: &EncoderParams, batch: &ReaderBatch, dropout_seed: Option<u64>) -> Result<LossGrad> {
    if batch.samples.is_empty() {
        return Err(RomError::invalid("empty reader batch"));
    }
    for smp in &batch.samples {
        if smp.positive >= smp.passages.len() {
            return Err(RomError::invalid("reader positive index out of range"));
        }
        let body_len = smp.passages[smp.positive].body_len;
        if smp.gold_spans.is_empty() || smp.gold_spans.iter().any(|&(s, e)| s > e || e >= body_len) {
            return Err(RomError::Unanswerable);
        }
    }

    let seqs: Vec<Vec<u32>> = batch
        .samples
        .iter()
        .flat_map(|s| s.passages.iter().map(|p| p.ids.clone()))
        .collect();
    let fwd = forward_all(params, &seqs, dropout_seed)?;
    let inv_n = 1.0 / batch.samples.len() as f64;

    let mut loss = 0.0;
    let mut d_hidden: Vec<Array2<f64>> = fwd.iter().map(|(h, _)| Array2::zeros(h.raw_dim())).collect();
    let mut g_sel = Array1::<f64>::zeros(params.config.d_model);
    let mut g_start = Array1::<f64>::zeros(params.config.d_model);
    let mut g_end = Array1::<f64>::zeros(params.config.d_model);

    let mut offset = 0;
    for smp in &batch.samples {
        let m = smp.passages.len();
        let sel = Array1::from_iter((0..m).map(|j| fwd[offset + j].0.row(0).dot(&params.w_sel)));
        let ls_sel = log_softmax(&sel);
        loss -= ls_sel[smp.positive];
        for j in 0..m {
            let d = (ls_sel[j].exp() - if j == smp.positive { 1.0 } else { 0.0 }) * inv_n;
            let h_cls = fwd[offset + j].0.row(0);
            g_sel.scaled_add(d, &h_cls);
            d_hidden[offset + j].row_mut(0).scaled_add(d, &params.w_sel);
        }

        let pi = offset + smp.positive;
        let inp = &smp.passages[smp.positive];
        let body = fwd[pi].0.slice(s![inp.body_offset..inp.body_offset + inp.body_len, ..]);
        let ls_start = log_softmax(&body.dot(&params.w_start));
        let ls_end = log_softmax(&body.dot(&params.w_end));
        let joint: Vec<f64> = smp.gold_spans.iter().map(|&(s, e)| ls_start[s] + ls_end[e]).collect();
        let log_z = logsumexp(joint.iter().copied());
        loss -= log_z;

        let mut d_start = ls_start.mapv(f64::exp);
        let mut d_end = ls_end.mapv(f64::exp);
        for (&(s, e), &lj) in smp.gold_spans.iter().zip(&joint) {
            let r = (lj - log_z).exp();
            d_start[s] -= r;
            d_end[e] -= r;
        }
        d_start *= inv_n;
        d_end *= inv_n;
        g_start += &body.t().dot(&d_start);
        g_end += &body.t().dot(&d_end);
        let mut dh_body = d_hidden[pi].slice_mut(s![inp.body_offset..inp.body_offset + inp.body_len, ..]);
        for (t, mut row) in dh_body.rows_mut().into_iter().enumerate() {
            row.scaled_add(d_start[t], &params.w_start);
            row.scaled_add(d_end[t], &params.w_end);
        }
        offset += m;
    }
    loss *= inv_n;
    if !loss.is_finite() {
        return Err(RomError::Diverged(format!("reader loss is {loss}")));
    }

    let caches: Vec<&ForwardCache> = fwd.iter().map(|(_, c)| c).collect();
    let mut grads = backprop_all(params, &caches, &d_hidden);
    grads.w_sel += &g_sel;
    grads.w_start += &g_start;
    grads.w_end += &g_end;
    Ok(LossGrad { loss, grads })
}

/// Reader logits for one passage: selection plus per-body-token start/end.
#[derive(Debug, Clone, PartialEq)]
pub struct PassageLogits {
    pub select: f64,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

pub fn reader_logits(params: &EncoderParams, inputs: &[ReaderInput]) -> Result<Vec<PassageLogits>> {
    parallel::map(inputs, |_, inp| {
        let out = params.forward(&inp.ids, None)?;
        let body = out.hidden.slice(s![inp.body_offset..inp.body_offset + inp.body_len, ..]);
        Ok(PassageLogits {
            select: out.h_cls().dot(&params.w_sel),
            start: body.dot(&params.w_start).to_vec(),
            end: body.dot(&params.w_end).to_vec(),
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanPrediction {
    /// Index into the input passage list.
    pub passage: usize,
    pub start: usize,
    pub end: usize,
    /// `P_sel · P_start · P_end`.
    pub score: f64,
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Best span over the `k_passages` passages with the highest selection
/// probability. Ties go to the better-ranked passage, then the earlier
/// start, then the earlier end.
pub fn best_span(logits: &[PassageLogits], k_passages: usize, max_span_len: usize) -> Option<SpanPrediction> {
    if logits.is_empty() || max_span_len == 0 {
        return None;
    }
    let sel: Vec<f64> = logits.iter().map(|l| l.select).collect();
    let p_sel = softmax(&sel);
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| p_sel[b].total_cmp(&p_sel[a]).then(a.cmp(&b)));

    let mut best: Option<SpanPrediction> = None;
    for &pi in order.iter().take(k_passages.max(1)) {
        let l = &logits[pi];
        if l.start.is_empty() {
            continue;
        }
        let ps = softmax(&l.start);
        let pe = softmax(&l.end);
        for s in 0..ps.len() {
            for (e, &pe_e) in pe.iter().enumerate().take(ps.len().min(s + max_span_len)).skip(s) {
                let score = p_sel[pi] * ps[s] * pe_e;
                if best.is_none_or(|b| score > b.score) {
                    best = Some(SpanPrediction {
                        passage: pi,
                        start: s,
                        end: e,
                        score,
                    });
                }
            }
        }
    }
    best
}

/// Extracts the highest-scoring answer span for `question` from `passages`.
pub fn reader_predict(
    params: &EncoderParams,
    vocab: &Vocab,
    question: &[u32],
    passages: &[&Block],
    k_passages: usize,
    max_span_len: usize,
) -> Result<(String, f64)> {
    if passages.is_empty() {
        return Err(RomError::invalid("reader needs at least one passage"));
    }
    let max_len = params.config.max_seq_len;
    let inputs: Vec<ReaderInput> = passages
        .iter()
        .map(|b| ReaderInput::new(question, &b.title, &b.body, max_len))
        .collect();
    let logits = reader_logits(params, &inputs)?;
    match best_span(&logits, k_passages, max_span_len) {
        Some(p) => {
            let body = &passages[p.passage].body;
            Ok((detokenize(&body[p.start..=p.end], vocab), p.score))
        }
        None => Ok((String::new(), 0.0)),
    }
}
