//! Exact match, top-k retrieval accuracy and schedule-comparison reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::corpus::{Block, Corpus, QaExample};
use crate::encoder::{EncoderParams, Head};
use crate::error::{Result, RomError};
use crate::index::{embed_queries, DenseIndex, Hits};
use crate::parallel;
use crate::tasks::reader_predict;

/// Lowercase, drop punctuation and the articles a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| c.is_alphanumeric() || c.is_whitespace()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Percentage of predictions whose normalized form equals any normalized gold.
pub fn exact_match(predictions: &[String], golds: &[Vec<String>]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(RomError::invalid(format!(
            "{} predictions for {} questions",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| {
            let p = normalize_answer(p);
            g.iter().any(|a| normalize_answer(a) == p)
        })
        .count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

/// Whether normalized `text` contains a normalized answer on word boundaries.
pub fn contains_answer(normalized_text: &str, answers: &[String]) -> bool {
    let padded = format!(" {normalized_text} ");
    answers.iter().any(|a| {
        let a = normalize_answer(a);
        !a.is_empty() && padded.contains(&format!(" {a} "))
    })
}

/// Per-question top-k accuracy: a question counts at `k` when any of its
/// first `k` blocks contains an answer. Percentages keyed by `k`.
pub fn topk_accuracy(
    results: &[Hits],
    answers: &[Vec<String>],
    corpus: &Corpus,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if results.len() != answers.len() {
        return Err(RomError::invalid(format!(
            "{} results for {} questions",
            results.len(),
            answers.len()
        )));
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let mut text_cache: HashMap<u32, String> = HashMap::new();
    let mut first_hit = Vec::with_capacity(results.len());
    for (hits, ans) in results.iter().zip(answers) {
        if hits.len() < max_k {
            return Err(RomError::invalid(format!("result of length {} shorter than k={max_k}", hits.len())));
        }
        let pos = hits.iter().take(max_k).position(|(id, _)| {
            let text = text_cache
                .entry(*id)
                .or_insert_with(|| normalize_answer(&corpus.block_text(*id)));
            contains_answer(text, ans)
        });
        first_hit.push(pos);
    }
    let n = results.len().max(1) as f64;
    Ok(ks
        .iter()
        .map(|&k| {
            let c = first_hit.iter().filter(|p| p.is_some_and(|p| p < k)).count();
            (k, 100.0 * c as f64 / n)
        })
        .collect())
}

/// Stable short hash of a resolved config, ignoring the run name.
pub fn config_fingerprint(config: &Config) -> String {
    let text: String = config
        .to_text()
        .lines()
        .filter(|l| !l.starts_with("run.name "))
        .map(|l| format!("{l}\n"))
        .collect();
    Sha256::digest(text.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub topk_accuracy: BTreeMap<usize, f64>,
    /// EM with the reader over the top `reader.passages` blocks.
    pub exact_match: f64,
    /// EM with the reader over the top `k` blocks.
    pub em_at_k: BTreeMap<usize, f64>,
    pub n_questions: usize,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(RomError::MissingPrerequisite(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Reader answer for `question` over the first `k` of `hits`.
pub fn predict_answer(
    params: &EncoderParams,
    corpus: &Corpus,
    question: &[u32],
    hits: &[u32],
    max_span_len: usize,
) -> Result<String> {
    let blocks: Vec<&Block> = hits.iter().filter_map(|&id| corpus.block(id)).collect();
    if blocks.is_empty() {
        return Ok(String::new());
    }
    Ok(reader_predict(params, &corpus.vocab, question, &blocks, blocks.len(), max_span_len)?.0)
}

/// Retrieval accuracy and reader EM for `questions` against `index`.
pub fn evaluate(
    params: &EncoderParams,
    corpus: &Corpus,
    index: &DenseIndex,
    questions: &[QaExample],
    config: &Config,
) -> Result<EvalReport> {
    let n = index.n_blocks();
    let clip = |k: usize| k.min(n);
    let em_ks: Vec<usize> = config.eval_em_ks.iter().map(|&k| clip(k)).collect();
    let deepest = config
        .eval_ks
        .iter()
        .chain(&em_ks)
        .chain([&config.reader_passages])
        .map(|&k| clip(k))
        .max()
        .unwrap_or(1)
        .max(1);
    let queries: Vec<Vec<u32>> = questions.iter().map(|q| q.question.clone()).collect();
    let q_emb = embed_queries(params, &queries, Head::Retrieval)?;
    let results = index.top_k_batch(&q_emb, deepest)?;
    let answers: Vec<Vec<String>> = questions.iter().map(|q| q.answers.clone()).collect();
    let ks: Vec<usize> = config.eval_ks.iter().map(|&k| clip(k)).collect();
    let topk = topk_accuracy(&results, &answers, corpus, &ks)?;
    let topk_accuracy = config.eval_ks.iter().copied().zip(ks.iter().map(|k| topk[k])).collect();

    let em_for = |k: usize| -> Result<f64> {
        let preds: Vec<Result<String>> = parallel::map(questions, |i, q| {
            let ids: Vec<u32> = results[i].iter().take(k).map(|h| h.0).collect();
            predict_answer(params, corpus, &q.question, &ids, config.max_span_len)
        });
        exact_match(&preds.into_iter().collect::<Result<Vec<_>>>()?, &answers)
    };
    let mut em_at_k = BTreeMap::new();
    for (&key, &k) in config.eval_em_ks.iter().zip(&em_ks) {
        em_at_k.insert(key, em_for(k)?);
    }
    let exact_match = match em_at_k.get(&config.reader_passages) {
        Some(&v) => v,
        None => em_for(clip(config.reader_passages))?,
    };
    Ok(EvalReport {
        topk_accuracy,
        exact_match,
        em_at_k,
        n_questions: questions.len(),
        fingerprint: config_fingerprint(config),
    })
}

/// One completed run as seen by the report.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub schedule: String,
    pub topk_accuracy: BTreeMap<usize, f64>,
    pub em_at_k: BTreeMap<usize, f64>,
}

pub const REPORT_TOPK: [usize; 5] = [1, 5, 10, 20, 100];
pub const REPORT_EM: [usize; 4] = [5, 10, 20, 100];

/// Metric rows by schedule columns, each cell the mean over runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleReport {
    pub schedules: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
    pub runs_per_schedule: Vec<usize>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Builds the comparison table. `schedules` fixes the column order; an
/// empty list uses every schedule found, sorted by name.
pub fn schedule_report(runs: &[RunSummary], schedules: &[String]) -> ScheduleReport {
    let schedules: Vec<String> = if schedules.is_empty() {
        let mut s: Vec<String> = runs.iter().map(|r| r.schedule.clone()).collect();
        s.sort();
        s.dedup();
        s
    } else {
        schedules.to_vec()
    };
    let by_schedule: Vec<Vec<&RunSummary>> = schedules
        .iter()
        .map(|s| runs.iter().filter(|r| &r.schedule == s).collect())
        .collect();
    let cell = |group: &[&RunSummary], pick: &dyn Fn(&RunSummary) -> Option<f64>| {
        mean(&group.iter().filter_map(|r| pick(r)).collect::<Vec<_>>())
    };
    let mut rows = Vec::new();
    for k in REPORT_TOPK {
        let v = by_schedule
            .iter()
            .map(|g| cell(g, &|r| r.topk_accuracy.get(&k).copied()))
            .collect();
        rows.push((format!("top-{k}"), v));
    }
    for k in REPORT_EM {
        let v = by_schedule
            .iter()
            .map(|g| cell(g, &|r| r.em_at_k.get(&k).copied()))
            .collect();
        rows.push((format!("EM@{k}"), v));
    }
    ScheduleReport {
        runs_per_schedule: by_schedule.iter().map(|g| g.len()).collect(),
        schedules,
        rows,
    }
}

impl ScheduleReport {
    fn best(cells: &[Option<f64>]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in cells.iter().enumerate() {
            if let Some(v) = *c {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
        }
        best.map(|(i, _)| i)
    }

    /// Aligned ASCII table; `*` marks the best cell of each row.
    pub fn to_text(&self) -> String {
        let mut header = vec!["metric".to_string()];
        header.extend(
            self.schedules
                .iter()
                .zip(&self.runs_per_schedule)
                .map(|(s, n)| format!("{s} (n={n})")),
        );
        let mut table = vec![header];
        for (label, cells) in &self.rows {
            let best = Self::best(cells);
            let mut line = vec![label.clone()];
            for (i, c) in cells.iter().enumerate() {
                line.push(match c {
                    Some(v) if Some(i) == best => format!("{v:.2}*"),
                    Some(v) => format!("{v:.2}"),
                    None => "absent".to_string(),
                });
            }
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (ri, row) in table.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if ri == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        out
    }

    /// `metric,<schedule>…,best`; absent cells are empty.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["metric".to_string()];
        header.extend(self.schedules.iter().cloned());
        header.push("best".to_string());
        w.write_record(&header)?;
        for (label, cells) in &self.rows {
            let mut rec = vec![label.clone()];
            rec.extend(cells.iter().map(|c| c.map(|v| format!("{v:.4}")).unwrap_or_default()));
            rec.push(Self::best(cells).map(|i| self.schedules[i].clone()).unwrap_or_default());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| RomError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
