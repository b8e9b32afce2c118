use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{tokenize, Corpus};
use crate::error::{Result, RomError};
use crate::eval::normalize_answer;

/// Longest answer span (in tokens) considered when locating gold spans.
const MAX_ANSWER_TOKENS: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub question_text: String,
    pub question: Vec<u32>,
    pub answers: Vec<String>,
    pub positive_block_id: u32,
    /// Inclusive `(start, end)` token indices into the positive block body.
    pub gold_spans: Vec<(usize, usize)>,
    pub negative_block_ids: Vec<u32>,
}

#[derive(Debug, Clone, Default)]
pub struct QaLoad {
    pub examples: Vec<QaExample>,
    /// Examples whose answer could not be located in the positive block,
    /// or whose positive passage is not in the corpus.
    pub dropped: usize,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum PassageRef {
    Id(u32),
    Inline { title: String, text: String },
}

#[derive(Debug, Deserialize)]
struct RawQa {
    question: String,
    answers: Vec<String>,
    positive: PassageRef,
    #[serde(default)]
    negatives: Vec<PassageRef>,
}

/// Every span of `body` whose normalized text equals a normalized answer.
/// Spans never begin or end on a token that normalizes to nothing
/// (punctuation, articles).
pub fn locate_answer_spans(body: &[u32], answers: &[String], corpus: &Corpus) -> Vec<(usize, usize)> {
    let targets: HashSet<String> = answers
        .iter()
        .map(|a| normalize_answer(a))
        .filter(|a| !a.is_empty())
        .collect();
    if targets.is_empty() {
        return Vec::new();
    }
    let toks: Vec<&str> = body.iter().map(|&t| corpus.vocab.token(t)).collect();
    let contentful: Vec<bool> = toks.iter().map(|t| !normalize_answer(t).is_empty()).collect();
    let mut spans = Vec::new();
    for s in 0..toks.len() {
        if !contentful[s] {
            continue;
        }
        for e in s..toks.len().min(s + MAX_ANSWER_TOKENS) {
            if !contentful[e] {
                continue;
            }
            if targets.contains(&normalize_answer(&toks[s..=e].join(" "))) {
                spans.push((s, e));
            }
        }
    }
    spans
}

/// Parses QA JSON-lines against `corpus`.
pub fn parse_qa_lines<B: BufRead>(reader: B, corpus: &Corpus) -> Result<QaLoad> {
    let lookup = corpus.content_lookup();
    let resolve = |p: &PassageRef| -> Option<u32> {
        match p {
            PassageRef::Id(id) => ((*id as usize) < corpus.n_blocks()).then_some(*id),
            PassageRef::Inline { title, text } => {
                let t = tokenize(title, &corpus.vocab);
                let b = tokenize(text, &corpus.vocab);
                lookup.get(&(t.as_slice(), b.as_slice())).copied()
            }
        }
    };

    let mut out = QaLoad::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawQa = serde_json::from_str(&line).map_err(|e| RomError::MalformedLine {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let Some(pos) = resolve(&raw.positive) else {
            out.dropped += 1;
            continue;
        };
        let block = &corpus.blocks[pos as usize];
        let gold_spans = locate_answer_spans(&block.body, &raw.answers, corpus);
        if gold_spans.is_empty() {
            out.dropped += 1;
            continue;
        }
        let mut negative_block_ids = Vec::new();
        for n in raw.negatives.iter().filter_map(resolve) {
            if n != pos && !negative_block_ids.contains(&n) {
                negative_block_ids.push(n);
            }
        }
        out.examples.push(QaExample {
            question: tokenize(&raw.question, &corpus.vocab),
            question_text: raw.question,
            answers: raw.answers,
            positive_block_id: pos,
            gold_spans,
            negative_block_ids,
        });
    }
    Ok(out)
}

pub fn load_qa_dataset(path: &Path, corpus: &Corpus) -> Result<QaLoad> {
    if !path.exists() {
        return Err(RomError::MissingPrerequisite(path.to_path_buf()));
    }
    parse_qa_lines(BufReader::new(File::open(path)?), corpus)
}

/// Seeded uniform subset of `⌈fraction · N⌉` items, kept in original order.
pub fn subsample_supervision<T: Clone>(examples: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(RomError::invalid(format!("supervision fraction {fraction} outside (0, 1]")));
    }
    let n = examples.len();
    // guard against 0.07 * 100 = 7.000000000000001
    let want = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let want = want.min(n);
    if want == n {
        return Ok(examples.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, want).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| examples[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, Document};

    fn corpus() -> Corpus {
        let docs = vec![
            Document {
                id: 0,
                title: "France".into(),
                text: "The capital of France is Paris. It is big.".into(),
            },
            Document {
                id: 1,
                title: "Spain".into(),
                text: "The capital of Spain is Madrid.".into(),
            },
        ];
        build_corpus(&docs, 100, 100).unwrap()
    }

    #[test]
    fn case_insensitive_span_found() {
        let c = corpus();
        let line = r#"{"question": "capital of france?", "answers": ["paris"], "positive": 0, "negatives": [1]}"#;
        let load = parse_qa_lines(line.as_bytes(), &c).unwrap();
        assert_eq!(load.dropped, 0);
        let ex = &load.examples[0];
        assert_eq!(ex.gold_spans.len(), 1);
        let (s, e) = ex.gold_spans[0];
        assert_eq!(c.vocab.token(c.blocks[0].body[s]), "paris");
        assert_eq!(s, e);
        assert_eq!(ex.negative_block_ids, vec![1]);
    }

    #[test]
    fn absent_answer_is_dropped() {
        let c = corpus();
        let line = r#"{"question": "q", "answers": ["berlin"], "positive": 0, "negatives": []}"#;
        let load = parse_qa_lines(line.as_bytes(), &c).unwrap();
        assert!(load.examples.is_empty());
        assert_eq!(load.dropped, 1);
    }

    #[test]
    fn inline_positive_is_resolved() {
        let c = corpus();
        let line = r#"{"question": "q", "answers": ["Madrid"], "positive": {"title": "Spain", "text": "The capital of Spain is Madrid."}, "negatives": [{"title": "France", "text": "nope"}]}"#;
        let load = parse_qa_lines(line.as_bytes(), &c).unwrap();
        assert_eq!(load.examples[0].positive_block_id, 1);
        assert!(load.examples[0].negative_block_ids.is_empty());
    }

    #[test]
    fn malformed_line_names_line_number() {
        let c = corpus();
        let text = "{\"question\": \"q\", \"answers\": [\"paris\"], \"positive\": 0}\n{not json\n";
        match parse_qa_lines(text.as_bytes(), &c) {
            Err(RomError::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn articles_are_not_span_edges() {
        let c = corpus();
        let spans = locate_answer_spans(&c.blocks[0].body, &["The Paris".to_string()], &c);
        assert_eq!(spans.len(), 1);
    }

    #[test]
    fn subsample_fraction_rules() {
        let xs: Vec<u32> = (0..58_880).collect();
        assert_eq!(subsample_supervision(&xs, 1.0, 0).unwrap(), xs);
        assert_eq!(subsample_supervision(&xs, 0.01, 0).unwrap().len(), 589);
        let a = subsample_supervision(&xs, 0.1, 42).unwrap();
        let b = subsample_supervision(&xs, 0.1, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(subsample_supervision(&(0..100).collect::<Vec<u32>>(), 0.07, 1).unwrap().len(), 7);
        assert!(subsample_supervision(&xs, 0.0, 0).is_err());
        assert!(subsample_supervision(&xs, 1.5, 0).is_err());
    }
}
