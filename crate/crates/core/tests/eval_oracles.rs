use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rom_core::corpus::{build_corpus, Document};
use rom_core::eval::{contains_answer, exact_match, normalize_answer, topk_accuracy};

proptest! {
    #[test]
    fn normalization_is_idempotent(s in "[ a-zA-Z0-9.,!?'-]{0,40}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once.clone());
        prop_assert!(!once.contains("  "));
        prop_assert!(once.split(' ').all(|w| !matches!(w, "a" | "an" | "the")));
    }

    #[test]
    fn exact_match_counts_normalized_equality(words in prop::collection::vec("[a-z]{1,6}", 1..12), flips in prop::collection::vec(any::<bool>(), 12)) {
        let golds: Vec<Vec<String>> = words.iter().map(|w| vec![format!("The {w}!")]).collect();
        let preds: Vec<String> = words
            .iter()
            .zip(&flips)
            .map(|(w, &f)| if f { w.to_uppercase() } else { format!("{w}x") })
            .collect();
        let hits = flips.iter().take(words.len()).filter(|&&f| f).count();
        let want = 100.0 * hits as f64 / words.len() as f64;
        prop_assert_eq!(exact_match(&preds, &golds).unwrap(), want);
    }
}

#[test]
fn worked_normalization_examples() {
    assert_eq!(normalize_answer("The Eiffel Tower!"), "eiffel tower");
    assert_eq!(normalize_answer("a  b"), "b");
    assert!(contains_answer("born in paris france", &["Paris".into()]));
    assert!(!contains_answer("born in parisian", &["paris".into()]));
}

/// One answer-bearing block among N; under random rankings a question is
/// correct at k with probability k/N, so the count is Binomial(Q, k/N).
#[test]
fn random_rankings_follow_the_hypergeometric_rate() {
    let n = 400;
    let docs: Vec<Document> = (0..n)
        .map(|i| Document {
            id: i as u64,
            title: format!("t{i}"),
            text: if i == 137 { "the needle is here .".into() } else { format!("filler words {i} .") },
        })
        .collect();
    let corpus = build_corpus(&docs, 100, 5000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let queries = 2000;
    let mut ids: Vec<u32> = corpus.blocks.iter().map(|b| b.block_id).collect();
    let results: Vec<Vec<(u32, f64)>> = (0..queries)
        .map(|_| {
            ids.shuffle(&mut rng);
            ids.iter().take(100).map(|&id| (id, 0.0)).collect()
        })
        .collect();
    let answers = vec![vec!["needle".to_string()]; queries];
    let ks = [1, 5, 20, 100];
    let acc = topk_accuracy(&results, &answers, &corpus, &ks).unwrap();
    for k in ks {
        let p = k as f64 / n as f64;
        let sd = (p * (1.0 - p) / queries as f64).sqrt() * 100.0;
        assert!((acc[&k] - 100.0 * p).abs() <= 3.0 * sd, "k={k}: {} vs {}", acc[&k], 100.0 * p);
    }
    let values: Vec<f64> = ks.iter().map(|k| acc[k]).collect();
    assert!(values.windows(2).all(|w| w[0] <= w[1]));
}
