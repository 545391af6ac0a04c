mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dlora_sim::scenario::VehicleId;
use dlora_sim::scheduler::{self, MinBandwidth, Payload, DEFAULT_EPS};

/// Largest number of vehicles whose minimum bandwidths fit in `budget`, by
/// trying every subset.
fn max_fitting_subset(b_mins: &[f64], budget: f64) -> usize {
    let n = b_mins.len();
    (0u32..1 << n)
        .filter(|mask| {
            let total: f64 = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| b_mins[i])
                .sum();
            total <= budget
        })
        .map(|mask| mask.count_ones() as usize)
        .max()
        .unwrap_or(0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn min_bandwidth_never_falls_with_rank(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = common::random_env(&mut rng);
        let v = common::random_vehicle(0, &env.radio, &mut rng);
        let top = env.spec.min_layer_dim().min(8);
        let needed: Vec<f64> = (1..=top)
            .map(|r| scheduler::min_bandwidth(&v, r, &env, DEFAULT_EPS).hz().unwrap_or(f64::INFINITY))
            .collect();
        for pair in needed.windows(2) {
            prop_assert!(pair[1] >= pair[0], "{needed:?}");
        }
    }

    #[test]
    fn greedy_cardinality_matches_subset_search(
        b_mins in prop::collection::vec(prop_oneof![3 => 1.0f64..100.0, 1 => Just(f64::INFINITY)], 0..=12),
        budget in 0.0f64..400.0,
    ) {
        let tagged: Vec<(VehicleId, MinBandwidth)> = b_mins
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let status = if b.is_finite() {
                    MinBandwidth::Feasible(b)
                } else {
                    MinBandwidth::Infeasible(scheduler::Infeasibility::RateUnreachable)
                };
                (VehicleId(i as u64), status)
            })
            .collect();
        let selection = scheduler::greedy_select(&tagged, budget);
        let finite: Vec<f64> = b_mins.iter().copied().filter(|b| b.is_finite()).collect();
        prop_assert_eq!(selection.selected.len(), max_fitting_subset(&finite, budget));
        prop_assert!(selection.total_bandwidth <= budget);
    }

    #[test]
    fn arbvs_agrees_with_exhaustive_search(seed in any::<u64>(), n in 1usize..=7, cap in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = common::random_env(&mut rng);
        let params = common::random_params(&env.spec, &mut rng);
        let vehicles = common::random_fleet(n, &env.radio, &mut rng);
        let fast = scheduler::arbvs_schedule(&vehicles, &env, &params, cap, DEFAULT_EPS).unwrap();
        let exact = scheduler::brute_force_schedule(&vehicles, &env, &params, cap, DEFAULT_EPS).unwrap();
        prop_assert_eq!(fast.objective, exact.objective);
        prop_assert!(scheduler::validate_decision(&fast, &vehicles, &env, true).is_ok());
        prop_assert!(scheduler::validate_decision(&exact, &vehicles, &env, true).is_ok());
    }

    #[test]
    fn more_bandwidth_never_hurts(seed in any::<u64>(), n in 1usize..=15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut env = common::random_env(&mut rng);
        let params = common::random_params(&env.spec, &mut rng);
        let vehicles = common::random_fleet(n, &env.radio, &mut rng);
        let mut previous: Option<(usize, f64)> = None;
        for budget in [1e2, 1e3, 1e4, 1e5, 1e6, 1e7] {
            env.radio.total_bandwidth = budget;
            let d = scheduler::arbvs_schedule(&vehicles, &env, &params, 8, DEFAULT_EPS).unwrap();
            prop_assert!(scheduler::validate_decision(&d, &vehicles, &env, true).is_ok());
            if let Some((_, objective)) = previous {
                prop_assert!(d.objective <= objective);
            }
            previous = Some((d.selected.len(), d.objective));
        }
    }

    #[test]
    fn random_baseline_respects_budget_and_reports_stragglers(seed in any::<u64>(), n in 1usize..=20, fraction in 0.05f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = common::random_env(&mut rng);
        let params = common::random_params(&env.spec, &mut rng);
        let vehicles = common::random_fleet(n, &env.radio, &mut rng);
        let d = scheduler::random_schedule(&vehicles, fraction, Payload::Lora { rank: 1 }, &env, &params, seed).unwrap();
        let granted: f64 = d.bandwidth.values().sum();
        prop_assert!(granted <= env.radio.total_bandwidth * (1.0 + 1e-9));
        for id in &d.dropped {
            prop_assert!(!d.selected.contains(id));
        }
        prop_assert!(scheduler::validate_decision(&d, &vehicles, &env, false).is_ok());
    }
}
