mod common;

use common::checks;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rom_core::corpus::sample_proportional;

#[test]
fn pseudo_query_sampling_fidelity() {
    checks::sampling_fidelity().unwrap();
}

#[test]
fn three_to_one_scores_give_three_to_one_picks() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let draws = 10_000;
    let first = (0..draws).filter(|_| sample_proportional(&[3.0, 1.0], &mut rng) == 0).count();
    assert!(checks::within_3_sigma(first, draws, 0.75), "{first}");
}

#[test]
fn removal_rate_at_low_keep_probability() {
    let summary = checks::ict_removal_fidelity(10_000, 62).unwrap();
    assert!(summary.contains("10000 draws"));
}
