use rand::Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};

use super::{tfidf, Block, Corpus};
use crate::error::{Result, RomError};

/// A pseudo-query paired with the block it was cut from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IctExample {
    pub pseudo_query: Vec<u32>,
    pub target_block_id: u32,
    /// True when the query tokens were cut out of `evidence`.
    pub sentence_removed: bool,
    /// Block body as presented to the passage encoder.
    pub evidence: Vec<u32>,
}

/// Picks one sentence uniformly as the pseudo-query; with probability
/// `1 - keep_prob` that sentence is removed from the evidence.
pub fn make_ict_example<R: Rng + ?Sized>(block: &Block, rng: &mut R, keep_prob: f64) -> Result<IctExample> {
    if block.n_sentences() < 2 {
        return Err(RomError::BlockTooShortForIct);
    }
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(RomError::invalid(format!("keep_prob {keep_prob} outside [0,1]")));
    }
    let i = rng.random_range(0..block.n_sentences());
    let pseudo_query = block.sentence(i).to_vec();
    let remove = rng.random::<f64>() >= keep_prob;
    let evidence = if remove {
        let (s, e) = block.sentence_boundaries[i];
        let mut ev = block.body[..s as usize].to_vec();
        ev.extend_from_slice(&block.body[e as usize..]);
        ev
    } else {
        block.body.clone()
    };
    Ok(IctExample {
        pseudo_query,
        target_block_id: block.block_id,
        sentence_removed: remove,
        evidence,
    })
}

/// Summed TF-IDF score of every contiguous span of length `n`.
pub fn span_scores(block: &Block, corpus: &Corpus, n: usize) -> Vec<f64> {
    let token_scores: Vec<f64> = block.body.iter().map(|&t| tfidf(t, block, corpus)).collect();
    if n == 0 || n > token_scores.len() {
        return Vec::new();
    }
    token_scores.windows(n).map(|w| w.iter().sum()).collect()
}

/// Index drawn proportionally to `weights`; uniform when they are all zero.
pub fn sample_proportional<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    debug_assert!(!weights.is_empty());
    match WeightedIndex::new(weights) {
        Ok(dist) => dist.sample(rng),
        Err(_) => rng.random_range(0..weights.len()),
    }
}

/// Draws span length n ∈ {1,2,3,4} uniformly, then a span of that length
/// with probability proportional to its summed TF-IDF.
pub fn make_phrase_ict_example<R: Rng + ?Sized>(
    block: &Block,
    corpus: &Corpus,
    rng: &mut R,
    remove_span: bool,
) -> Result<IctExample> {
    if block.body.len() < 4 {
        return Err(RomError::BlockTooShortForPhraseIct);
    }
    let n = rng.random_range(1..=4usize);
    let scores = span_scores(block, corpus, n);
    let start = sample_proportional(&scores, rng);
    let pseudo_query = block.body[start..start + n].to_vec();
    let evidence = if remove_span {
        let mut ev = block.body[..start].to_vec();
        ev.extend_from_slice(&block.body[start + n..]);
        ev
    } else {
        block.body.clone()
    };
    Ok(IctExample {
        pseudo_query,
        target_block_id: block.block_id,
        sentence_removed: remove_span,
        evidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, Document};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus(texts: &[&str]) -> Corpus {
        let docs: Vec<Document> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document {
                id: i as u64,
                title: String::new(),
                text: t.to_string(),
            })
            .collect();
        build_corpus(&docs, 288, 1000).unwrap()
    }

    #[test]
    fn single_sentence_block_rejected() {
        let c = corpus(&["only one sentence here"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            make_ict_example(&c.blocks[0], &mut rng, 0.1),
            Err(RomError::BlockTooShortForIct)
        ));
    }

    #[test]
    fn forced_removal_leaves_other_sentence() {
        let c = corpus(&["alpha beta. gamma delta."]);
        let b = &c.blocks[0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let ex = make_ict_example(b, &mut rng, 0.0).unwrap();
            assert!(ex.sentence_removed);
            let other = if ex.pseudo_query == b.sentence(0) { b.sentence(1) } else { b.sentence(0) };
            assert_eq!(ex.evidence, other);
        }
    }

    #[test]
    fn keep_prob_one_never_removes() {
        let c = corpus(&["a b. c d. e f."]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let ex = make_ict_example(&c.blocks[0], &mut rng, 1.0).unwrap();
            assert!(!ex.sentence_removed);
            assert_eq!(ex.evidence, c.blocks[0].body);
        }
    }

    #[test]
    fn phrase_ict_too_short() {
        let c = corpus(&["a b c"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            make_phrase_ict_example(&c.blocks[0], &c, &mut rng, true),
            Err(RomError::BlockTooShortForPhraseIct)
        ));
    }

    #[test]
    fn degenerate_distribution_is_certain() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            assert_eq!(sample_proportional(&[0.0, 0.0, 2.5, 0.0], &mut rng), 2);
        }
    }

    #[test]
    fn all_zero_scores_fall_back_to_uniform() {
        // every token is shared by both blocks: idf = ln(2/3) clamps to 0
        let c = corpus(&["a b c d e", "a b c d e"]);
        for n in 1..=4 {
            assert!(span_scores(&c.blocks[0], &c, n).iter().all(|&s| s == 0.0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut hits = [0usize; 5];
        for _ in 0..5000 {
            hits[sample_proportional(&[0.0; 5], &mut rng)] += 1;
        }
        assert!(hits.iter().all(|&h| h > 850 && h < 1150), "{hits:?}");
    }

    #[test]
    fn phrase_query_is_contiguous_and_bounded() {
        let c = corpus(&["the quick brown fox jumps over the lazy dog.", "another block entirely."]);
        let b = &c.blocks[0];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let ex = make_phrase_ict_example(b, &c, &mut rng, true).unwrap();
            let n = ex.pseudo_query.len();
            assert!((1..=4).contains(&n));
            assert!(b.body.windows(n).any(|w| w == ex.pseudo_query.as_slice()));
            assert_eq!(ex.evidence.len(), b.body.len() - n);
        }
    }
}
