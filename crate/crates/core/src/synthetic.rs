//! Templated synthetic corpus and QA pairs for end-to-end checks.
//!
//! Every entity gets one short document titled with its (invented) name and
//! the four relation sentences in a fixed order, each holding a value word
//! that appears nowhere else. Questions are cloze-style restatements of one
//! relation sentence.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{write_documents, Document};
use crate::error::{Result, RomError};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_entities: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_negatives: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_entities: 400,
            n_train: 150,
            n_dev: 50,
            n_negatives: 2,
            seed: 0,
        }
    }
}

/// (fact template, question template); `{n}` is the entity, `{v}` the value.
const RELATIONS: [(&str, &str); 4] = [
    ("{n} was born in {v} .", "{n} was born in what place ?"),
    ("{n} works as a {v} .", "{n} works as a what ?"),
    ("{n} owns a pet named {v} .", "{n} owns a pet named what ?"),
    ("the favorite color of {n} is {v} .", "the favorite color of {n} is what ?"),
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InlinePassage {
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticQa {
    pub question: String,
    pub answers: Vec<String>,
    pub positive: InlinePassage,
    pub negatives: Vec<InlinePassage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub docs: Vec<Document>,
    pub train: Vec<SyntheticQa>,
    pub dev: Vec<SyntheticQa>,
}

fn fresh_word<R: Rng>(rng: &mut R, used: &mut HashSet<String>) -> String {
    loop {
        let w: String = (0..3)
            .flat_map(|_| {
                [
                    CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char,
                    VOWELS[rng.random_range(0..VOWELS.len())] as char,
                ]
            })
            .collect();
        if used.insert(w.clone()) {
            return w;
        }
    }
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.n_train + cfg.n_dev > cfg.n_entities {
        return Err(RomError::invalid("more questions than entities"));
    }
    if cfg.n_negatives >= cfg.n_entities {
        return Err(RomError::invalid("more negatives than other entities"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut used: HashSet<String> = HashSet::new();
    let mut docs = Vec::with_capacity(cfg.n_entities);
    let mut facts: Vec<Vec<(usize, String)>> = Vec::with_capacity(cfg.n_entities);
    for id in 0..cfg.n_entities {
        let name = fresh_word(&mut rng, &mut used);
        let mut sentences = Vec::new();
        let mut entity_facts = Vec::new();
        for (r, (fact, _)) in RELATIONS.iter().enumerate() {
            let value = fresh_word(&mut rng, &mut used);
            sentences.push(fact.replace("{n}", &name).replace("{v}", &value));
            entity_facts.push((r, value));
        }
        docs.push(Document {
            id: id as u64,
            title: name,
            text: sentences.join(" "),
        });
        facts.push(entity_facts);
    }
    let passage = |i: usize| InlinePassage {
        title: docs[i].title.clone(),
        text: docs[i].text.clone(),
    };
    let mut entities: Vec<usize> = (0..cfg.n_entities).collect();
    entities.shuffle(&mut rng);
    let mut qas = Vec::with_capacity(cfg.n_train + cfg.n_dev);
    for &e in entities.iter().take(cfg.n_train + cfg.n_dev) {
        let (r, value) = facts[e][rng.random_range(0..facts[e].len())].clone();
        let mut negatives = Vec::with_capacity(cfg.n_negatives);
        while negatives.len() < cfg.n_negatives {
            let n = rng.random_range(0..cfg.n_entities);
            if n != e && !negatives.contains(&n) {
                negatives.push(n);
            }
        }
        qas.push(SyntheticQa {
            question: RELATIONS[r].1.replace("{n}", &docs[e].title),
            answers: vec![value],
            positive: passage(e),
            negatives: negatives.into_iter().map(passage).collect(),
        });
    }
    let dev = qas.split_off(cfg.n_train);
    Ok(SyntheticData { docs, train: qas, dev })
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Paths written by [`SyntheticData::write`].
#[derive(Debug, Clone)]
pub struct SyntheticPaths {
    pub docs: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
}

impl SyntheticData {
    /// Writes `docs.jsonl`, `train.jsonl` and `dev.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<SyntheticPaths> {
        std::fs::create_dir_all(dir)?;
        let paths = SyntheticPaths {
            docs: dir.join("docs.jsonl"),
            train: dir.join("train.jsonl"),
            dev: dir.join("dev.jsonl"),
        };
        write_documents(&paths.docs, &self.docs)?;
        write_jsonl(&paths.train, &self.train)?;
        write_jsonl(&paths.dev, &self.dev)?;
        Ok(paths)
    }
}
