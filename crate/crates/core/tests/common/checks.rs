//! Whole-criterion checks shared by the focused tests and the acceptance run.
//! Each returns a one-line summary on success and the first violation otherwise.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rom_core::checkpoint::Checkpoint;
use rom_core::config::{Config, LoadedConfig};
use rom_core::corpus::{build_corpus, make_ict_example, make_phrase_ict_example, Corpus, Document};
use rom_core::encoder::{EncoderParams, Head, ReaderInput};
use rom_core::index::{build_index, DenseIndex};
use rom_core::pipeline::{self, Datasets};
use rom_core::scheduler::{Schedule, ScheduleKind, Task};
use rom_core::synthetic::{self, SyntheticConfig};
use rom_core::tasks::{ict_loss, reader_loss, retrieval_loss, ReaderBatch, ReaderSample};
use rom_core::trainer::{METRICS_FILE, STEPS_FILE};
use rom_core::RomError;

use super::*;

pub type Check = std::result::Result<String, String>;

fn fail<T>(msg: impl Into<String>) -> std::result::Result<T, String> {
    Err(msg.into())
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Analytic gradients of the ICT, retrieval and reader losses against
/// central differences on the tiny encoder.
pub fn gradients() -> Check {
    let mut worst: f64 = 0.0;
    let mut tensors = 0;
    let cases: [(&str, u64); 3] = [("ict", 11), ("retrieval", 12), ("reader", 13)];
    for (label, seed) in cases {
        let p = tiny_params(seed);
        let errs = match label {
            "ict" => {
                let b = tiny_retrieval_batch(0);
                let a = ict_loss(&p, &b, None).map_err(e2s)?.grads;
                relative_errors(&a, &finite_difference(&p, FD_STEP, |q| ict_loss(q, &b, None).unwrap().loss))
            }
            "retrieval" => {
                let b = tiny_retrieval_batch(2);
                let a = retrieval_loss(&p, &b, None).map_err(e2s)?.grads;
                relative_errors(&a, &finite_difference(&p, FD_STEP, |q| retrieval_loss(q, &b, None).unwrap().loss))
            }
            _ => {
                let b = tiny_reader_batch();
                let a = reader_loss(&p, &b, None).map_err(e2s)?.grads;
                relative_errors(&a, &finite_difference(&p, FD_STEP, |q| reader_loss(q, &b, None).unwrap().loss))
            }
        };
        for (name, e) in errs {
            tensors += 1;
            if e >= FD_TOL {
                return fail(format!("{label}: {name} relative error {e:e}"));
            }
            worst = worst.max(e);
        }
    }
    Ok(format!("{tensors} tensor checks, max relative error {worst:.1e}"))
}

/// Zeroed projections make every score equal: the contrastive losses become
/// ln(candidates) and the reader loss ln(M) + 2 ln(T).
pub fn contrastive_identities() -> Check {
    let mut p = tiny_params(21);
    p.w_ict.fill(0.0);
    p.w_ret.fill(0.0);
    let mut worst: f64 = 0.0;
    for extra in [0, 1, 4] {
        let b = tiny_retrieval_batch(extra);
        let want = (b.passages.len() as f64).ln();
        for (label, got) in [
            ("ict", ict_loss(&p, &b, None).map_err(e2s)?.loss),
            ("retrieval", retrieval_loss(&p, &b, None).map_err(e2s)?.loss),
        ] {
            let d = (got - want).abs();
            if d > 1e-9 {
                return fail(format!("{label} with {} candidates: {got} vs ln = {want}", b.passages.len()));
            }
            worst = worst.max(d);
        }
    }

    p.w_sel.fill(0.0);
    p.w_start.fill(0.0);
    p.w_end.fill(0.0);
    let bodies: [&[u32]; 4] = [&[10, 11, 12, 13, 14, 15, 16], &[17, 18], &[19, 20, 21], &[22, 23, 24, 25, 26]];
    for m in 1..=bodies.len() {
        for positive in 0..m {
            let passages: Vec<ReaderInput> = bodies[..m]
                .iter()
                .enumerate()
                .map(|(j, b)| ReaderInput::new(&[5, 6], &[40 + j as u32], b, 24))
                .collect();
            let t = passages[positive].body_len;
            let batch = ReaderBatch {
                samples: vec![ReaderSample {
                    passages,
                    positive,
                    gold_spans: vec![(0, t - 1)],
                }],
            };
            let got = reader_loss(&p, &batch, None).map_err(e2s)?.loss;
            let want = (m as f64).ln() + 2.0 * (t as f64).ln();
            let d = (got - want).abs();
            if d > 1e-9 {
                return fail(format!("reader M={m} T={t}: {got} vs {want}"));
            }
            worst = worst.max(d);
        }
    }
    Ok(format!("max deviation {worst:.1e}"))
}

/// Full scan with an explicit sort; the reference for exact top-k.
pub fn brute_force_top_k(emb: &Array2<f64>, ids: &[u32], q: &Array1<f64>, k: usize) -> Vec<(u32, f64)> {
    let mut all: Vec<(u32, f64)> = emb
        .rows()
        .into_iter()
        .zip(ids)
        .map(|(row, &id)| (id, row.iter().zip(q.iter()).fold(0.0, |acc, (a, b)| acc + a * b)))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, integer: bool) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        if integer {
            rng.random_range(-2i32..=2) as f64
        } else {
            rng.random_range(-1.0f32..1.0) as f64
        }
    })
}

/// 1000 x 32 embeddings, 100 queries, k in {1, 5, 10}. The integer-valued
/// variant has many exact score ties plus duplicated rows, so tie-breaking by
/// block id is exercised.
pub fn mips_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut ties = 0;
    let mut compared = 0;
    for integer in [true, false] {
        let mut emb = random_matrix(&mut rng, 1000, 32, integer);
        if integer {
            for r in 0..50 {
                let src = emb.row(r).to_owned();
                emb.row_mut(999 - r).assign(&src);
            }
        }
        let mut ids: Vec<u32> = (0..1000).map(|i| 5000 + i).collect();
        for i in (1..ids.len()).rev() {
            ids.swap(i, rng.random_range(0..=i));
        }
        let index = DenseIndex::new(emb.clone(), ids.clone(), 0).map_err(e2s)?;
        let queries = random_matrix(&mut rng, 100, 32, integer);
        for k in [1, 5, 10] {
            let batch = index.top_k_batch(&queries, k).map_err(e2s)?;
            for (qi, q) in queries.rows().into_iter().enumerate() {
                let want = brute_force_top_k(&emb, &ids, &q.to_owned(), k);
                let got = index.top_k(q, k).map_err(e2s)?;
                if got != want || batch[qi] != want {
                    return fail(format!("query {qi} k={k} integer={integer}: {got:?} vs {want:?}"));
                }
                ties += want.windows(2).filter(|w| w[0].1 == w[1].1).count();
                compared += 1;
            }
        }
    }
    Ok(format!("{compared} query/k pairs exact, {ties} tied neighbours in results"))
}

/// Every schedule kind, T in {2, 4, 8, 100}, every epoch.
pub fn schedule_grid() -> Check {
    let mut cells = 0;
    for kind in ScheduleKind::ALL {
        for total in [2usize, 4, 8, 100] {
            let mut s = Schedule::new(kind, total);
            s.seed = 7;
            let mut prev_ret = f64::INFINITY;
            for t in 0..total {
                let w = s.weights_at(t).map_err(e2s)?;
                let (r, q) = (w.get(Task::Retrieval), w.get(Task::Reader));
                let at = format!("{kind} T={total} t={t}: ({r}, {q})");
                cells += 1;
                if ((r + q) - 1.0).abs() > 1e-12 || w.as_array().iter().any(|&x| x < 0.0) {
                    return fail(format!("{at} not a distribution"));
                }
                if w.get(Task::Ict) != 0.0 || w.get(Task::PhraseIct) != 0.0 {
                    return fail(format!("{at} pretraining weight set"));
                }
                let tf = t as f64;
                let tt = total as f64;
                let ok = match kind {
                    ScheduleKind::Pipeline => {
                        let boundary = total.div_ceil(2);
                        (r, q) == if t < boundary { (1.0, 0.0) } else { (0.0, 1.0) }
                    }
                    ScheduleKind::Equal => (r, q) == (0.5, 0.5),
                    ScheduleKind::Gradual => {
                        let endpoint = if tf < tt / 4.0 {
                            (r, q) == (1.0, 0.0)
                        } else if tf >= 3.0 * tt / 4.0 {
                            (r, q) == (0.0, 1.0)
                        } else {
                            true
                        };
                        let mid = 2 * t != total || ((r - 0.5).abs() < 1e-12 && (q - 0.5).abs() < 1e-12);
                        let monotone = r <= prev_ret;
                        endpoint && mid && monotone
                    }
                    ScheduleKind::Random => (0.0..=1.0).contains(&r),
                    ScheduleKind::Iterative => r.min(q) == s.epsilon,
                };
                if !ok {
                    return fail(at);
                }
                prev_ret = r;
            }
        }
    }
    Ok(format!("{cells} (kind, T, t) cells"))
}

fn docs(texts: &[&str]) -> Vec<Document> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| Document {
            id: i as u64,
            title: format!("doc{i}"),
            text: t.to_string(),
        })
        .collect()
}

/// Binomial 3σ band for `count` successes out of `n` at probability `p`.
pub fn within_3_sigma(count: usize, n: usize, p: f64) -> bool {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - mean).abs() <= 3.0 * sd
}

/// Span frequency oracle for PhraseICT: the expected probability of span
/// (n, start) is 1/4 times its summed TF-IDF over all spans of length n,
/// with TF-IDF recomputed here from raw block contents.
pub fn phrase_ict_fidelity(draws: usize, seed: u64) -> Check {
    const WORDS: [&str; 17] = [
        "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa", "lambda", "mu", "nu",
        "xi", "omicron", "pi", "rho",
    ];
    // doc i holds WORDS[i..i+8]; word j of doc 0 then occurs in j + 1 blocks
    let texts: Vec<String> = (0..10).map(|i| WORDS[i..i + 8].join(" ")).collect();
    let text_refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let corpus = build_corpus(&docs(&text_refs), 100, 1000).map_err(e2s)?;
    let block = &corpus.blocks[0];
    let n_blocks = corpus.n_blocks() as f64;
    let df = |tok: u32| corpus.blocks.iter().filter(|b| b.body.contains(&tok)).count() as f64;
    let score = |tok: u32| {
        let tf = block.body.iter().filter(|&&t| t == tok).count() as f64;
        tf * (n_blocks / (1.0 + df(tok))).ln()
    };
    let token_scores: Vec<f64> = block.body.iter().map(|&t| score(t)).collect();
    if token_scores.iter().any(|&s| s <= 0.0) {
        return fail("fixture should give every token a positive score");
    }
    let mut expected: HashMap<(usize, usize), f64> = HashMap::new();
    for n in 1..=4 {
        let spans: Vec<f64> = token_scores.windows(n).map(|w| w.iter().sum()).collect();
        let total: f64 = spans.iter().sum();
        for (start, s) in spans.iter().enumerate() {
            expected.insert((n, start), 0.25 * s / total);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for _ in 0..draws {
        let ex = make_phrase_ict_example(block, &corpus, &mut rng, true).map_err(e2s)?;
        let n = ex.pseudo_query.len();
        let start = block
            .body
            .iter()
            .position(|&t| t == ex.pseudo_query[0])
            .ok_or("query token not in block")?;
        if block.body[start..start + n] != ex.pseudo_query[..] {
            return fail("pseudo-query is not a contiguous span");
        }
        *counts.entry((n, start)).or_default() += 1;
    }
    for (&cell, &p) in &expected {
        let c = counts.get(&cell).copied().unwrap_or(0);
        if !within_3_sigma(c, draws, p) {
            return fail(format!("span {cell:?}: {c} draws, expected {:.1}", p * draws as f64));
        }
    }
    if counts.keys().any(|k| !expected.contains_key(k)) {
        return fail("span outside the enumerated set");
    }
    Ok(format!("{} spans within 3σ over {draws} draws", expected.len()))
}

/// ICT removal rate against 1 − keep_prob, and uniform sentence choice.
pub fn ict_removal_fidelity(draws: usize, seed: u64) -> Check {
    let corpus = build_corpus(
        &docs(&["one two three . four five six . seven eight nine . ten eleven twelve ."]),
        100,
        1000,
    )
    .map_err(e2s)?;
    let block = &corpus.blocks[0];
    let n_sent = block.n_sentences();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for keep_prob in [0.1, 0.5, 0.9] {
        let mut removed = 0;
        let mut chosen = vec![0usize; n_sent];
        for _ in 0..draws {
            let ex = make_ict_example(block, &mut rng, keep_prob).map_err(e2s)?;
            removed += ex.sentence_removed as usize;
            let i = (0..n_sent).find(|&i| block.sentence(i) == &ex.pseudo_query[..]).ok_or("query not a sentence")?;
            chosen[i] += 1;
            let expect_len = block.body.len() - if ex.sentence_removed { ex.pseudo_query.len() } else { 0 };
            if ex.evidence.len() != expect_len {
                return fail("evidence length inconsistent with removal flag");
            }
        }
        if !within_3_sigma(removed, draws, 1.0 - keep_prob) {
            return fail(format!("keep_prob {keep_prob}: removed {removed} of {draws}"));
        }
        if let Some(c) = chosen.iter().find(|&&c| !within_3_sigma(c, draws, 1.0 / n_sent as f64)) {
            return fail(format!("sentence chosen {c} times of {draws}"));
        }
    }
    Ok(format!("removal rate and sentence choice within 3σ over {draws} draws"))
}

pub fn sampling_fidelity() -> Check {
    let a = phrase_ict_fidelity(10_000, 51)?;
    let b = ict_removal_fidelity(10_000, 52)?;
    Ok(format!("{a}; {b}"))
}

/// A small synthetic workspace: data files, corpus and a config pointing at them.
pub struct Workspace {
    pub root: PathBuf,
    pub config: Config,
    pub corpus: Corpus,
    pub data: Datasets,
}

pub const TINY_TRAINING: &str = "
seed = 3
model.d_model = 16
model.n_heads = 2
model.n_layers = 1
model.d_ff = 32
model.max_seq_len = 40
model.d_proj = 8
model.dropout = 0.1
pretrain.epochs = 2
pretrain.steps_per_epoch = 6
pretrain.batch_size = 4
pretrain.lr = 1e-3
pretrain.warmup_steps = 2
retrieval.epochs = 1
retrieval.batch_size = 4
retrieval.lr = 1e-3
joint.epochs = 3
joint.steps_per_epoch = 3
joint.batch_size = 4
joint.lr = 1e-3
reader.batch_size = 2
reader.k_passages = 3
reader.passages = 3
eval.ks = 1,5,10
eval.em_ks = 5
";

impl Workspace {
    /// Synthetic data under `root/data` and a config built from `config_text`
    /// plus `overrides`, with every path inside `root`.
    pub fn new(root: &Path, synth: &SyntheticConfig, config_text: &str, overrides: &[(&str, &str)]) -> Result<Self, String> {
        let paths = synthetic::generate(synth).and_then(|d| d.write(&root.join("data"))).map_err(e2s)?;
        let mut loaded = LoadedConfig::parse_str(config_text).map_err(e2s)?;
        let corpus_path = root.join("data/corpus.bin");
        let runs = root.join("runs");
        let path_keys = [
            ("paths.docs", paths.docs.to_string_lossy().into_owned()),
            ("paths.train_qa", paths.train.to_string_lossy().into_owned()),
            ("paths.dev_qa", paths.dev.to_string_lossy().into_owned()),
            ("paths.corpus", corpus_path.to_string_lossy().into_owned()),
            ("paths.runs", runs.to_string_lossy().into_owned()),
        ];
        loaded
            .apply_overrides(path_keys.iter().map(|(k, v)| (*k, v.as_str())).chain(overrides.iter().copied()))
            .map_err(e2s)?;
        let config = loaded.config;
        let corpus = pipeline::build_corpus_file(&config).map_err(e2s)?;
        let data = pipeline::load_datasets(&config, &corpus).map_err(e2s)?;
        Ok(Workspace {
            root: root.to_path_buf(),
            config,
            corpus,
            data,
        })
    }

    pub fn tiny(root: &Path, overrides: &[(&str, &str)]) -> Result<Self, String> {
        let synth = SyntheticConfig {
            n_entities: 30,
            n_train: 12,
            n_dev: 6,
            n_negatives: 1,
            seed: 4,
        };
        Self::new(root, &synth, TINY_TRAINING, overrides)
    }

    pub fn with_run(&self, name: &str) -> Config {
        let mut c = self.config.clone();
        c.run_name = name.to_string();
        c
    }
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Result<(), String> {
    for name in names {
        if read(&a.join(name))? != read(&b.join(name))? {
            return fail(format!("{name} differs between runs"));
        }
    }
    Ok(())
}

/// Two identical 10-step runs, then two identical full three-phase runs.
pub fn determinism(root: &Path) -> Check {
    let ws = Workspace::tiny(root, &[])?;
    let mut dirs = Vec::new();
    for name in ["a", "b"] {
        let mut c = ws.with_run(name);
        c.max_steps = 10;
        pipeline::run_pretrain(&c, &ws.corpus, &c.run_dir()).map_err(e2s)?;
        dirs.push(c.run_dir());
    }
    same_files(&dirs[0], &dirs[1], &[STEPS_FILE, METRICS_FILE, "checkpoints/pretrain.ckpt"])?;
    let steps = std::fs::read_to_string(dirs[0].join(STEPS_FILE)).map_err(e2s)?;
    if steps.lines().count() != 11 {
        return fail(format!("expected 10 step rows, found {}", steps.lines().count() - 1));
    }
    let ckpt = Checkpoint::load(&dirs[0].join("checkpoints/pretrain.ckpt")).map_err(e2s)?;
    if ckpt.state.global_step != 10 {
        return fail(format!("checkpoint at step {}", ckpt.state.global_step));
    }

    let mut full = Vec::new();
    for name in ["c", "d"] {
        let c = ws.with_run(name);
        let dir = c.run_dir();
        pipeline::run_pretrain(&c, &ws.corpus, &dir).map_err(e2s)?;
        pipeline::run_retrieval(&c, &ws.corpus, &ws.data, &dir).map_err(e2s)?;
        pipeline::run_joint(&c, &ws.corpus, &ws.data, &dir).map_err(e2s)?;
        full.push(dir);
    }
    same_files(
        &full[0],
        &full[1],
        &[
            STEPS_FILE,
            METRICS_FILE,
            pipeline::EVAL_FILE,
            "checkpoints/pretrain.ckpt",
            "checkpoints/retrieval.ckpt",
            "checkpoints/joint.ckpt",
            "index/index.bin",
        ],
    )?;
    Ok("10-step CSVs and checkpoint identical; full three-phase runs identical".into())
}

fn flip_version(bytes: &[u8], magic: &str) -> Vec<u8> {
    let mut v = bytes.to_vec();
    let at = magic.len() - 1;
    assert_eq!(v[at], b'1');
    v[at] = b'2';
    v
}

/// Save/load round trips for checkpoint, corpus and index files, with
/// version-mismatch and shape rejections.
pub fn round_trips(root: &Path) -> Check {
    let ws = Workspace::tiny(root, &[("run.max_steps", "4")])?;
    let c = ws.with_run("rt");
    let dir = c.run_dir();
    pipeline::run_pretrain(&c, &ws.corpus, &dir).map_err(e2s)?;

    let ckpt_path = pipeline::checkpoint_path(&dir, "pretrain");
    let bytes = read(&ckpt_path)?;
    let ckpt = Checkpoint::load(&ckpt_path).map_err(e2s)?;
    if ckpt.optimizer.as_ref().is_none_or(|o| o.step != 4) {
        return fail("checkpoint lost optimizer state");
    }
    let mut again = Vec::new();
    ckpt.write_to(&mut again).map_err(e2s)?;
    if again != bytes {
        return fail("checkpoint re-save differs");
    }
    let copy = root.join("copy.ckpt");
    ckpt.save(&copy).map_err(e2s)?;
    if Checkpoint::load(&copy).map_err(e2s)? != ckpt {
        return fail("checkpoint reload differs");
    }
    let v2 = flip_version(&bytes, rom_core::checkpoint::CHECKPOINT_MAGIC);
    if !matches!(Checkpoint::read_from(&mut v2.as_slice()), Err(RomError::IncompatibleCheckpoint(_))) {
        return fail("checkpoint version 2 accepted");
    }

    let corpus_bytes = read(&ws.config.corpus_path)?;
    let corpus = Corpus::load(&ws.config.corpus_path).map_err(e2s)?;
    if corpus != ws.corpus {
        return fail("corpus reload differs");
    }
    let mut again = Vec::new();
    corpus.write_to(&mut again).map_err(e2s)?;
    if again != corpus_bytes {
        return fail("corpus re-save differs");
    }
    let v2 = flip_version(&corpus_bytes, rom_core::corpus::CORPUS_MAGIC);
    if !matches!(Corpus::read_from(&mut v2.as_slice()), Err(RomError::IncompatibleCorpus(_))) {
        return fail("corpus version 2 accepted");
    }

    let index = build_index(&ckpt.params, &corpus, Head::Retrieval, 7, 3).map_err(e2s)?;
    let index_path = root.join("index.bin");
    index.save(&index_path).map_err(e2s)?;
    let back = DenseIndex::load(&index_path, Some(ckpt.params.config.d_proj)).map_err(e2s)?;
    if back != index || back.snapshot_version() != 3 {
        return fail("index reload differs");
    }
    let index_bytes = read(&index_path)?;
    let v2 = flip_version(&index_bytes, rom_core::index::INDEX_MAGIC);
    if !matches!(DenseIndex::read_from(&mut v2.as_slice(), None), Err(RomError::IncompatibleIndex(_))) {
        return fail("index version 2 accepted");
    }
    if DenseIndex::load(&index_path, Some(ckpt.params.config.d_proj + 1)).is_ok() {
        return fail("index with wrong d_proj accepted");
    }
    let other = EncoderParams::init(&ckpt.params.config, 99).map_err(e2s)?;
    if build_index(&other, &corpus, Head::Retrieval, 7, 3).map_err(e2s)? == index {
        return fail("different parameters gave the same index");
    }
    Ok("checkpoint, corpus and index bit-exact; version 2 headers rejected".into())
}
