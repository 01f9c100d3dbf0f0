//! Property and oracle checks for the rate model, the SCA machinery, the
//! matching stage and the TDMA benchmark. Every oracle is computed
//! independently of the library code it checks.

mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsma_mec::rates::{group_rates, DecodingOrder, Part, PowerAllocation, SubMessage};
use rsma_mec::scenario::Scenario;

// Sum of all sub-message rates on one channel against the multiple-access
// sum capacity.
proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]
    #[test]
    fn sic_sum_rate_telescopes(
        gains in prop::collection::vec(1e-14f64..1e-8, 1..6),
        fractions in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 6),
        shuffle_seed in any::<u64>(),
    ) {
        let k = gains.len();
        let cfg = common::system(1, 1, k);
        let scenario = Scenario::from_gains(cfg.clone(), gains.clone()).unwrap();
        let mut powers = PowerAllocation::zeros(k);
        let mut seq = Vec::new();
        for d in 0..k {
            let (total, share) = fractions[d];
            let p = cfg.max_tx_power_w * total;
            powers.set(SubMessage::new(d, Part::First), p * share);
            powers.set(SubMessage::new(d, Part::Second), p * (1.0 - share));
            seq.push(SubMessage::new(d, Part::First));
            seq.push(SubMessage::new(d, Part::Second));
        }
        seq.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let order = DecodingOrder::new(seq).unwrap();
        let total: f64 = group_rates(&scenario, 0, 0, &order, &powers).iter().sum();
        let noise = cfg.noise_psd_w_per_hz * cfg.bandwidth_hz;
        let rx: f64 = (0..k).map(|d| gains[d] * powers.total(d)).sum();
        let expected = cfg.bandwidth_hz * (1.0 + rx / noise).log2();
        prop_assert!((total - expected).abs() <= 1e-10 * expected.max(1e-300), "{} vs {}", total, expected);
    }
}

#[test]
fn taylor_anchor_and_gradient() {
    common::taylor_anchor_and_gradient();
}

#[test]
fn two_device_inner_matches_grid_oracle() {
    common::two_device_inner_matches_grid_oracle();
}

#[test]
fn analytic_single_user_instances() {
    common::analytic_single_user_instances();
}

#[test]
fn tdma_minimal_times_agree_with_lp() {
    common::tdma_minimal_times_agree_with_lp();
}

#[test]
fn terminal_matchings_have_no_blocking_pair() {
    common::terminal_matchings_have_no_blocking_pair();
}

#[test]
fn schedules_and_traces_on_emitted_solutions() {
    common::schedules_and_traces_on_emitted_solutions();
}

#[test]
fn random_allocations_are_valid_and_uniform() {
    common::random_allocations_are_valid_and_uniform();
}
#[test]
fn sic_telescoping_random_groups() {
    common::sic_telescoping_random_groups();
}
