//! Shared test oracles: central finite differences and tiny fixtures.
#![allow(dead_code)]

pub mod checks;

use rom_core::corpus::{CLS, SEP};
use rom_core::encoder::{EncoderConfig, EncoderParams, ReaderInput};
use rom_core::tasks::{ReaderBatch, ReaderSample, RetrievalBatch};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 50,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 64,
        max_seq_len: 24,
        d_proj: 16,
        dropout: 0.0,
        tie_heads: false,
    }
}

/// Params with all heads randomized (the default init already is) and a
/// non-trivial layer-norm gain/bias so their gradients are exercised.
pub fn tiny_params(seed: u64) -> EncoderParams {
    let mut p = EncoderParams::init(&tiny_config(), seed).unwrap();
    // larger head weights make head gradients well away from zero
    p.w_ict.mapv_inplace(|x| x * 20.0);
    p.w_ret.mapv_inplace(|x| x * 20.0);
    p.w_start.mapv_inplace(|x| x * 20.0);
    p.w_end.mapv_inplace(|x| x * 20.0);
    p.w_sel.mapv_inplace(|x| x * 20.0);
    // sharper attention keeps query/key gradients well above roundoff
    for l in p.layers.iter_mut() {
        l.wq.mapv_inplace(|x| x * 15.0);
        l.wk.mapv_inplace(|x| x * 15.0);
        // at init scale the sublayers barely move [CLS], every sequence embeds
        // alike and the contrastive losses sit at ln(candidates)
        for w in [&mut l.wv, &mut l.wo, &mut l.w1, &mut l.w2] {
            w.mapv_inplace(|x| x * 5.0);
        }
    }
    let mut k = 0.0_f64;
    for (name, mut t) in p.tensors_mut() {
        if name.ends_with(".gain") || name.ends_with(".bias") {
            t.map_inplace(|x| {
                k += 0.37;
                *x += 0.1 * k.sin();
            });
        }
    }
    p
}

pub fn tiny_retrieval_batch(extra_negatives: usize) -> RetrievalBatch {
    let queries = vec![
        vec![CLS, 5, 6, 7, SEP],
        vec![CLS, 8, 9, SEP],
        vec![CLS, 10, 5, 11, 12, SEP],
    ];
    let mut passages = vec![
        vec![CLS, 20, SEP, 5, 6, 21, 22, SEP],
        vec![CLS, 23, SEP, 8, 24, 9, SEP],
        vec![CLS, 25, SEP, 26, 10, 11, 27, 12, SEP],
    ];
    for i in 0..extra_negatives {
        passages.push(vec![CLS, 30 + i as u32, SEP, 31, 32, 33 + i as u32, SEP]);
    }
    RetrievalBatch {
        queries,
        passages,
        positive_index: vec![0, 1, 2],
    }
}

pub fn tiny_reader_batch() -> ReaderBatch {
    let mk = |q: &[u32], bodies: &[&[u32]], positive: usize, spans: Vec<(usize, usize)>| ReaderSample {
        passages: bodies
            .iter()
            .enumerate()
            .map(|(j, b)| ReaderInput::new(q, &[40 + j as u32], b, 24))
            .collect(),
        positive,
        gold_spans: spans,
    };
    ReaderBatch {
        samples: vec![
            mk(&[5, 6], &[&[10, 11, 12, 13, 14], &[15, 16, 17], &[18, 19, 20, 21]], 0, vec![(1, 2), (3, 3)]),
            mk(&[7, 8, 9], &[&[22, 23, 24], &[25, 26, 27, 28, 29, 30]], 1, vec![(2, 4)]),
        ],
    }
}

/// Central-difference gradient of `loss` w.r.t. every parameter entry.
pub fn finite_difference(params: &EncoderParams, step: f64, loss: impl Fn(&EncoderParams) -> f64) -> EncoderParams {
    let mut out = params.zeros_like();
    let mut work = params.clone();
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for (ti, _) in names.iter().enumerate() {
        let len = params.tensors()[ti].1.len();
        for j in 0..len {
            let orig = {
                let mut ts = work.tensors_mut();
                let v = ts[ti].1.as_slice_mut().unwrap();
                let o = v[j];
                v[j] = o + step;
                o
            };
            let up = loss(&work);
            work.tensors_mut()[ti].1.as_slice_mut().unwrap()[j] = orig - step;
            let down = loss(&work);
            work.tensors_mut()[ti].1.as_slice_mut().unwrap()[j] = orig;
            out.tensors_mut()[ti].1.as_slice_mut().unwrap()[j] = (up - down) / (2.0 * step);
        }
    }
    out
}

/// Gradients whose norm stays below this are treated as exactly zero (e.g. key
/// biases, which cancel inside the softmax); differences there are roundoff.
pub const FD_ZERO_FLOOR: f64 = 1e-8;

/// Per-tensor relative error `‖a − f‖ / max(‖a‖, ‖f‖)`; 0 when both vanish.
pub fn relative_errors(analytic: &EncoderParams, numeric: &EncoderParams) -> Vec<(String, f64)> {
    analytic
        .tensors()
        .into_iter()
        .zip(numeric.tensors())
        .map(|((name, a), (_, f))| {
            let diff = (&a - &f).mapv(|x| x * x).sum().sqrt();
            let na = a.mapv(|x| x * x).sum().sqrt();
            let nf = f.mapv(|x| x * x).sum().sqrt();
            let scale = na.max(nf);
            let err = if scale < FD_ZERO_FLOOR { 0.0 } else { diff / scale };
            (name, err)
        })
        .collect()
}
