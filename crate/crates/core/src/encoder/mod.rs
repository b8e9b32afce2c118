//! Small post-norm transformer encoder with CLS pooling, three projection
//! heads and exact reverse-mode gradients.
//!
//! All arithmetic is `f64`. Parameters are kept representable in `f32`
//! (see [`EncoderParams::round_to_f32`]) so checkpoints, which store 32-bit
//! payloads, round-trip bit-exactly.

mod layers;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{CLS, PAD, SEP};
use crate::error::{Result, RomError};

pub use layers::{gelu, gelu_grad};
use layers::{layer_norm, layer_norm_backward, LnCache};

pub type DropoutRng = ChaCha8Rng;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub d_proj: usize,
    pub dropout: f64,
    /// Share one projection matrix between the ICT and retrieval heads.
    #[serde(default)]
    pub tie_heads: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 30_000,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_seq_len: 128,
            d_proj: 64,
            dropout: 0.1,
            tie_heads: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(RomError::InvalidConfig(m.to_string()));
        if self.vocab_size < 5 {
            return fail("vocab_size must be at least 5");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 || self.d_proj == 0 {
            return fail("model dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail("d_model must be divisible by n_heads");
        }
        if self.d_proj > self.d_model {
            return fail("d_proj must not exceed d_model");
        }
        if self.max_seq_len < 8 {
            return fail("max_seq_len must be at least 8");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Ict,
    Retrieval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
}

impl LayerParams {
    fn zeros(d: usize, ff: usize) -> Self {
        LayerParams {
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            w1: Array2::zeros((d, ff)),
            b1: Array1::zeros(ff),
            w2: Array2::zeros((ff, d)),
            b2: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
        }
    }
}

/// Encoder weights plus the ICT, retrieval and QA heads. The same type
/// holds gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub emb_ln_g: Array1<f64>,
    pub emb_ln_b: Array1<f64>,
    pub layers: Vec<LayerParams>,
    pub w_ret: Array2<f64>,
    pub w_ict: Array2<f64>,
    pub w_start: Array1<f64>,
    pub w_end: Array1<f64>,
    pub w_sel: Array1<f64>,
}

macro_rules! tensor_list {
    ($self:expr, $view:ident, $iter:ident) => {{
        let mut v = Vec::with_capacity(9 + 16 * $self.layers.len());
        v.push(("tok_emb".to_string(), $self.tok_emb.$view().into_dyn()));
        v.push(("pos_emb".to_string(), $self.pos_emb.$view().into_dyn()));
        v.push(("emb_ln.gain".to_string(), $self.emb_ln_g.$view().into_dyn()));
        v.push(("emb_ln.bias".to_string(), $self.emb_ln_b.$view().into_dyn()));
        for (i, l) in $self.layers.$iter().enumerate() {
            v.push((format!("layer{i}.attn.wq"), l.wq.$view().into_dyn()));
            v.push((format!("layer{i}.attn.bq"), l.bq.$view().into_dyn()));
            v.push((format!("layer{i}.attn.wk"), l.wk.$view().into_dyn()));
            v.push((format!("layer{i}.attn.bk"), l.bk.$view().into_dyn()));
            v.push((format!("layer{i}.attn.wv"), l.wv.$view().into_dyn()));
            v.push((format!("layer{i}.attn.bv"), l.bv.$view().into_dyn()));
            v.push((format!("layer{i}.attn.wo"), l.wo.$view().into_dyn()));
            v.push((format!("layer{i}.attn.bo"), l.bo.$view().into_dyn()));
            v.push((format!("layer{i}.ln1.gain"), l.ln1_g.$view().into_dyn()));
            v.push((format!("layer{i}.ln1.bias"), l.ln1_b.$view().into_dyn()));
            v.push((format!("layer{i}.ffn.w1"), l.w1.$view().into_dyn()));
            v.push((format!("layer{i}.ffn.b1"), l.b1.$view().into_dyn()));
            v.push((format!("layer{i}.ffn.w2"), l.w2.$view().into_dyn()));
            v.push((format!("layer{i}.ffn.b2"), l.b2.$view().into_dyn()));
            v.push((format!("layer{i}.ln2.gain"), l.ln2_g.$view().into_dyn()));
            v.push((format!("layer{i}.ln2.bias"), l.ln2_b.$view().into_dyn()));
        }
        v.push(("head.retrieval".to_string(), $self.w_ret.$view().into_dyn()));
        v.push(("head.ict".to_string(), $self.w_ict.$view().into_dyn()));
        v.push(("head.qa_start".to_string(), $self.w_start.$view().into_dyn()));
        v.push(("head.qa_end".to_string(), $self.w_end.$view().into_dyn()));
        v.push(("head.qa_select".to_string(), $self.w_sel.$view().into_dyn()));
        v
    }};
}

/// Per-token hidden states; row 0 is the CLS position.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Array2<f64>,
}

impl EncoderOutput {
    pub fn h_cls(&self) -> ArrayView1<'_, f64> {
        self.hidden.row(0)
    }
}

pub(crate) struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    ln1: LnCache,
    h1: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
    ln2: LnCache,
}

/// Activations retained by [`EncoderParams::forward_cached`] for backprop.
pub struct ForwardCache {
    ids: Vec<u32>,
    emb_ln: LnCache,
    emb_drop: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: Option<&mut DropoutRng>) -> Option<Array2<f64>> {
    use rand::Rng;
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_fn((rows, cols), |_| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

impl EncoderParams {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.d_model;
        EncoderParams {
            config: config.clone(),
            tok_emb: Array2::zeros((config.vocab_size, d)),
            pos_emb: Array2::zeros((config.max_seq_len, d)),
            emb_ln_g: Array1::zeros(d),
            emb_ln_b: Array1::zeros(d),
            layers: (0..config.n_layers).map(|_| LayerParams::zeros(d, config.d_ff)).collect(),
            w_ret: Array2::zeros((d, config.d_proj)),
            w_ict: Array2::zeros((d, config.d_proj)),
            w_start: Array1::zeros(d),
            w_end: Array1::zeros(d),
            w_sel: Array1::zeros(d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// N(0, 0.02²) weights, unit layer-norm gains, zero biases.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for (name, mut t) in p.tensors_mut() {
            if name.ends_with(".gain") {
                t.fill(1.0);
            } else if is_bias(&name) {
                t.fill(0.0);
            } else {
                t.map_inplace(|x| *x = normal.sample(&mut rng));
            }
        }
        p.round_to_f32();
        Ok(p)
    }

    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        tensor_list!(self, view, iter)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        tensor_list!(self, view_mut, iter_mut)
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn round_to_f32(&mut self) {
        for (_, mut t) in self.tensors_mut() {
            t.map_inplace(|x| *x = *x as f32 as f64);
        }
    }

    pub fn fill(&mut self, value: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(value);
        }
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(scale, &b);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn head_matrix(&self, head: Head) -> &Array2<f64> {
        match head {
            Head::Retrieval => &self.w_ret,
            Head::Ict if self.config.tie_heads => &self.w_ret,
            Head::Ict => &self.w_ict,
        }
    }

    pub fn head_matrix_grad_mut(&mut self, head: Head) -> &mut Array2<f64> {
        match head {
            Head::Retrieval => &mut self.w_ret,
            Head::Ict if self.config.tie_heads => &mut self.w_ret,
            Head::Ict => &mut self.w_ict,
        }
    }

    fn check_input(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(RomError::EmptySequence);
        }
        if ids.len() > self.config.max_seq_len {
            return Err(RomError::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(RomError::invalid(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// Forward pass. Dropout is applied only when `dropout_rng` is given.
    pub fn forward(&self, ids: &[u32], dropout_rng: Option<&mut DropoutRng>) -> Result<EncoderOutput> {
        self.forward_cached(ids, dropout_rng).map(|(o, _)| o)
    }

    pub fn forward_cached(
        &self,
        ids: &[u32],
        mut dropout_rng: Option<&mut DropoutRng>,
    ) -> Result<(EncoderOutput, ForwardCache)> {
        self.check_input(ids)?;
        let cfg = &self.config;
        let t_len = ids.len();
        let d = cfg.d_model;
        let p = cfg.dropout;

        let mut emb = Array2::zeros((t_len, d));
        for (t, &id) in ids.iter().enumerate() {
            let mut row = emb.row_mut(t);
            row.assign(&self.tok_emb.row(id as usize));
            row += &self.pos_emb.row(t);
        }
        let (mut h, emb_ln) = layer_norm(&emb, &self.emb_ln_g, &self.emb_ln_b);
        let emb_drop = dropout_mask(t_len, d, p, dropout_rng.as_deref_mut());
        if let Some(m) = &emb_drop {
            h *= m;
        }

        let key_mask: Vec<bool> = ids.iter().map(|&t| t == PAD).collect();
        let mut caches = Vec::with_capacity(cfg.n_layers);
        for layer in &self.layers {
            let (out, cache) = self.layer_forward(layer, h, &key_mask, dropout_rng.as_deref_mut());
            h = out;
            caches.push(cache);
        }
        Ok((
            EncoderOutput { hidden: h },
            ForwardCache {
                ids: ids.to_vec(),
                emb_ln,
                emb_drop,
                layers: caches,
            },
        ))
    }

    fn layer_forward(
        &self,
        l: &LayerParams,
        x: Array2<f64>,
        key_mask: &[bool],
        mut rng: Option<&mut DropoutRng>,
    ) -> (Array2<f64>, LayerCache) {
        let cfg = &self.config;
        let t_len = x.nrows();
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let q = x.dot(&l.wq) + &l.bq;
        let k = x.dot(&l.wk) + &l.bk;
        let v = x.dot(&l.wv) + &l.bv;

        let mut ctx = Array2::zeros((t_len, cfg.d_model));
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores *= scale;
            layers::masked_softmax_rows(&mut scores, key_mask);
            ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }

        let mut a = ctx.dot(&l.wo) + &l.bo;
        let attn_drop = dropout_mask(t_len, cfg.d_model, cfg.dropout, rng.as_deref_mut());
        if let Some(m) = &attn_drop {
            a *= m;
        }
        let r1 = &x + &a;
        let (h1, ln1) = layer_norm(&r1, &l.ln1_g, &l.ln1_b);

        let u = h1.dot(&l.w1) + &l.b1;
        let g = u.mapv(gelu);
        let mut f = g.dot(&l.w2) + &l.b2;
        let ffn_drop = dropout_mask(t_len, cfg.d_model, cfg.dropout, rng);
        if let Some(m) = &ffn_drop {
            f *= m;
        }
        let r2 = &h1 + &f;
        let (h2, ln2) = layer_norm(&r2, &l.ln2_g, &l.ln2_b);

        (
            h2,
            LayerCache {
                x,
                q,
                k,
                v,
                probs,
                ctx,
                attn_drop,
                ln1,
                h1,
                u,
                g,
                ffn_drop,
                ln2,
            },
        )
    }

    /// Accumulates parameter gradients of a scalar loss into `grads`, given
    /// `d_hidden` = ∂loss/∂hidden for the forward pass recorded in `cache`.
    pub fn backward(&self, cache: &ForwardCache, d_hidden: &Array2<f64>, grads: &mut EncoderParams) {
        let cfg = &self.config;
        let mut dh = d_hidden.clone();
        for (li, lc) in cache.layers.iter().enumerate().rev() {
            dh = self.layer_backward(&self.layers[li], lc, dh, &mut grads.layers[li]);
        }
        if let Some(m) = &cache.emb_drop {
            dh *= m;
        }
        let de = layer_norm_backward(&dh, &cache.emb_ln, &self.emb_ln_g, &mut grads.emb_ln_g, &mut grads.emb_ln_b);
        for (t, &id) in cache.ids.iter().enumerate() {
            let row = de.row(t);
            let mut tr = grads.tok_emb.row_mut(id as usize);
            tr += &row;
            let mut pr = grads.pos_emb.row_mut(t);
            pr += &row;
        }
        debug_assert_eq!(grads.config.d_model, cfg.d_model);
    }

    fn layer_backward(&self, l: &LayerParams, c: &LayerCache, dh2: Array2<f64>, g: &mut LayerParams) -> Array2<f64> {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let dr2 = layer_norm_backward(&dh2, &c.ln2, &l.ln2_g, &mut g.ln2_g, &mut g.ln2_b);
        let mut df = dr2.clone();
        if let Some(m) = &c.ffn_drop {
            df *= m;
        }
        layers::acc_matmul_tn(&mut g.w2, &c.g, &df);
        g.b2 += &df.sum_axis(Axis(0));
        let dg = df.dot(&l.w2.t());
        let du = dg * &c.u.mapv(gelu_grad);
        layers::acc_matmul_tn(&mut g.w1, &c.h1, &du);
        g.b1 += &du.sum_axis(Axis(0));
        let dh1 = dr2 + du.dot(&l.w1.t());

        let dr1 = layer_norm_backward(&dh1, &c.ln1, &l.ln1_g, &mut g.ln1_g, &mut g.ln1_b);
        let mut da = dr1.clone();
        if let Some(m) = &c.attn_drop {
            da *= m;
        }
        layers::acc_matmul_tn(&mut g.wo, &c.ctx, &da);
        g.bo += &da.sum_axis(Axis(0));
        let dctx = da.dot(&l.wo.t());

        let t_len = c.x.nrows();
        let mut dq = Array2::zeros((t_len, cfg.d_model));
        let mut dk = Array2::zeros((t_len, cfg.d_model));
        let mut dv = Array2::zeros((t_len, cfg.d_model));
        for hd in 0..cfg.n_heads {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let p = &c.probs[hd];
            let dctx_h = dctx.slice(cols);
            let dp = dctx_h.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let mut ds = (dp - &row_dot) * p;
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }

        layers::acc_matmul_tn(&mut g.wq, &c.x, &dq);
        layers::acc_matmul_tn(&mut g.wk, &c.x, &dk);
        layers::acc_matmul_tn(&mut g.wv, &c.x, &dv);
        g.bq += &dq.sum_axis(Axis(0));
        g.bk += &dk.sum_axis(Axis(0));
        g.bv += &dv.sum_axis(Axis(0));

        let mut dx = dr1;
        ndarray::linalg::general_mat_mul(1.0, &dq, &l.wq.t(), 1.0, &mut dx);
        ndarray::linalg::general_mat_mul(1.0, &dk, &l.wk.t(), 1.0, &mut dx);
        ndarray::linalg::general_mat_mul(1.0, &dv, &l.wv.t(), 1.0, &mut dx);
        dx
    }

    /// Projected CLS embedding: `h_cls · W_head`.
    pub fn project(&self, h_cls: ArrayView1<f64>, head: Head) -> Array1<f64> {
        h_cls.dot(self.head_matrix(head))
    }

    /// Embeds an already-assembled input sequence through `head`.
    pub fn embed_input(&self, ids: &[u32], head: Head) -> Result<Array1<f64>> {
        let out = self.forward(ids, None)?;
        Ok(self.project(out.h_cls(), head))
    }

    pub fn embed_query(&self, query: &[u32], head: Head) -> Result<Array1<f64>> {
        self.embed_input(&query_input(query, self.config.max_seq_len), head)
    }

    pub fn embed_passage(&self, title: &[u32], body: &[u32], head: Head) -> Result<Array1<f64>> {
        self.embed_input(&passage_input(title, body, self.config.max_seq_len), head)
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias") || [".bq", ".bk", ".bv", ".bo", ".b1", ".b2"].iter().any(|s| name.ends_with(s))
}

/// `[CLS] query [SEP]`, truncated to `max_len`.
pub fn query_input(query: &[u32], max_len: usize) -> Vec<u32> {
    let keep = query.len().min(max_len.saturating_sub(2));
    let mut v = Vec::with_capacity(keep + 2);
    v.push(CLS);
    v.extend_from_slice(&query[..keep]);
    v.push(SEP);
    v
}

/// `[CLS] title [SEP] body [SEP]`; the body is truncated first.
pub fn passage_input(title: &[u32], body: &[u32], max_len: usize) -> Vec<u32> {
    let budget = max_len.saturating_sub(3);
    let title_keep = title.len().min(budget);
    let body_keep = body.len().min(budget - title_keep);
    let mut v = Vec::with_capacity(3 + title_keep + body_keep);
    v.push(CLS);
    v.extend_from_slice(&title[..title_keep]);
    v.push(SEP);
    v.extend_from_slice(&body[..body_keep]);
    v.push(SEP);
    v
}

/// Reader input `[CLS] question [SEP] title [SEP] body [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReaderInput {
    pub ids: Vec<u32>,
    /// Position of the first body token in `ids`.
    pub body_offset: usize,
    /// Number of body tokens kept after truncation.
    pub body_len: usize,
}

impl ReaderInput {
    pub fn new(question: &[u32], title: &[u32], body: &[u32], max_len: usize) -> Self {
        let budget = max_len.saturating_sub(4);
        let q_keep = question.len().min(budget / 2);
        let t_keep = title.len().min((budget - q_keep) / 2);
        let b_keep = body.len().min(budget - q_keep - t_keep);
        let mut ids = Vec::with_capacity(4 + q_keep + t_keep + b_keep);
        ids.push(CLS);
        ids.extend_from_slice(&question[..q_keep]);
        ids.push(SEP);
        ids.extend_from_slice(&title[..t_keep]);
        ids.push(SEP);
        let body_offset = ids.len();
        ids.extend_from_slice(&body[..b_keep]);
        ids.push(SEP);
        ReaderInput {
            ids,
            body_offset,
            body_len: b_keep,
        }
    }
}
