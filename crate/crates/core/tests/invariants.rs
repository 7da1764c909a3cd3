use fedbatch::acquisition::{expected_improvement, latin_hypercube, ScheduleSpace};
use fedbatch::campaign::{run_random, Plant};
use fedbatch::dynamics::{profit, ProfitCoefficients, Recipe, RecipeBounds, Task};
use fedbatch::harness::HarnessConfig;
use fedbatch::rng;
use fedbatch::tasking::{sample_recipe, TaskDistribution};
use proptest::prelude::*;

fn unit(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..=1.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ei_is_non_negative_and_monotone(mu in -5.0..5.0f64, sigma in 0.0..3.0f64, g in -5.0..5.0f64, d in 0.0..2.0f64) {
        let ei = expected_improvement(mu, sigma, g);
        prop_assert!(ei >= 0.0);
        prop_assert!(ei >= (mu - g).max(0.0) - 1e-12);
        prop_assert!(expected_improvement(mu + d, sigma, g) >= ei - 1e-12);
        prop_assert!(expected_improvement(mu, sigma, g + d) <= ei + 1e-12);
        prop_assert!(expected_improvement(mu, sigma + d, g) >= ei - 1e-12);
    }

    #[test]
    fn decoded_schedules_are_feasible(u in unit(10), delta_t in 0.5..20.0f64) {
        let bounds = RecipeBounds::default();
        let space = ScheduleSpace::new(bounds, delta_t, 4);
        let c = space.decode(&u);
        prop_assert!(bounds.contains(&c.recipe));
        prop_assert!(c.is_feasible(0.0, delta_t, 4));
        let ev = c.evaluation_times();
        prop_assert!(ev.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn remaining_window_never_extends_stop_time(u in unit(4), frac in 0.0..1.0f64) {
        let bounds = RecipeBounds::default();
        let recipe = Recipe::nominal(120.0);
        let t_now = frac * 120.0;
        let space = ScheduleSpace::remaining(recipe, bounds, t_now, 5.0, 3);
        let c = space.decode(&u);
        prop_assert!(c.recipe.t_stop <= recipe.t_stop && c.recipe.t_stop >= t_now);
        prop_assert_eq!(c.recipe.to_array()[..5].to_vec(), recipe.to_array()[..5].to_vec());
        prop_assert!(c.is_feasible(t_now, 5.0, 3));
    }

    #[test]
    fn recipe_unit_round_trip(u in unit(6)) {
        let bounds = RecipeBounds::default();
        let back = bounds.to_unit(&bounds.from_unit(&u));
        for (a, b) in u.iter().zip(back) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn latin_hypercube_has_one_point_per_stratum(n in 1usize..30, dim in 1usize..7, seed in any::<u64>()) {
        let pts = latin_hypercube(n, dim, &mut rng::stream(seed, &[]));
        for d in 0..dim {
            let mut strata: Vec<usize> = pts.iter().map(|p| (p[d] * n as f64) as usize).collect();
            strata.sort_unstable();
            prop_assert_eq!(strata, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn sampled_tasks_lie_in_support(seed in any::<u64>(), offset in -0.5..0.5f64, window in 0.0..0.1f64) {
        let dist = TaskDistribution::new(offset, window);
        let task = dist.sample(&mut rng::stream(seed, &[])).unwrap();
        prop_assert!(dist.contains(&task));
        let r = sample_recipe(&RecipeBounds::default(), &mut rng::stream(seed, &[1]));
        prop_assert!(RecipeBounds::default().contains(&r));
    }

    #[test]
    fn config_round_trips_through_toml(seed in 0..=i64::MAX as u64, seeds in prop::collection::vec(any::<u32>(), 1..6), budget in 1usize..40) {
        let mut cfg = HarnessConfig {
            seed,
            seeds: seeds.into_iter().map(u64::from).collect(),
            ..HarnessConfig::default()
        };
        cfg.strategy.baseline_budget = budget;
        let text = cfg.to_toml().unwrap();
        prop_assert_eq!(HarnessConfig::from_toml(&text).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn random_search_incumbent_is_monotone(seed in any::<u64>(), budget in 1usize..6) {
        let c = run_random(&Plant::new(Task::nominal()), seed, budget).unwrap();
        prop_assert_eq!(c.records.len(), budget);
        prop_assert!(c.records.windows(2).all(|w| w[1].g_best_raw >= w[0].g_best_raw));
        prop_assert!(c.records.iter().all(|r| r.g_best_raw >= r.g_raw));
        prop_assert_eq!(c.best(), c.records.last().unwrap().g_best_raw);
    }
}

#[test]
fn profit_examples() {
    let c = ProfitCoefficients::default();
    assert_eq!(profit(0.0, 3.0, 0.0, 0.0, &c), 0.0);
    assert!((profit(1.0, 10.0, 100.0, 25.0, &c) - -16801.875).abs() < 1e-9);
}
