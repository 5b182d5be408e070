use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dosing_ope::annotate::{
    aggregate_sources, annotation_budget, parse_response, select_annotation_targets, unobserved_pairs, AggregationMode,
    Annotation, AnnotationSet, AverageStage,
};
use dosing_ope::bandit::{reward_of_lab, BehaviorDataset, RewardSpec, Task};
use dosing_ope::estimators::{dm_value, fit_reward_model, RewardModelConfig};
use dosing_ope::features::FeatureSet;
use dosing_ope::harness::{action_entropy, entropy_of_counts, paired_t_test};
use dosing_ope::llm::cache_key;
use dosing_ope::policy::{floor_probabilities, Policy};
use dosing_ope::sim::{generate_cohort, SimConfig};

fn small_cohort(n: usize, seed: u64) -> BehaviorDataset {
    generate_cohort(&SimConfig {
        n_patients: n,
        seed,
        ..SimConfig::default_for(Task::Potassium)
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reward_is_bounded_flat_and_symmetric(a in -50.0..50.0f64, width in 0.1..20.0f64, scale in 1.0..10.0f64, d in 0.0..30.0f64, t in 0.0..1.0f64) {
        let spec = RewardSpec::new(a, a + width, scale).unwrap();
        let inside = reward_of_lab(a + t * width, &spec).unwrap();
        prop_assert_eq!(inside, 1.0);
        let left = reward_of_lab(a - d, &spec).unwrap();
        let right = reward_of_lab(a + width + d, &spec).unwrap();
        prop_assert!((left - right).abs() <= 1e-12);
        prop_assert!(left > 0.0 && left <= 1.0);
        let further = reward_of_lab(a - d - 0.5, &spec).unwrap();
        prop_assert!(further <= left);
    }

    #[test]
    fn entropy_is_bounded_and_order_free(counts in prop::collection::vec(0usize..200, 1..8), seed in any::<u64>()) {
        let h = entropy_of_counts(&counts);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (counts.len() as f64).ln() + 1e-12);
        let mut shuffled = counts.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((entropy_of_counts(&shuffled) - h).abs() <= 1e-12);
    }

    #[test]
    fn dataset_entropy_ignores_record_order(seed in 0u64..1000) {
        let ds = small_cohort(60, seed);
        let h = action_entropy(&ds, None).unwrap();
        let mut samples = ds.samples.clone();
        samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = BehaviorDataset::new(Task::Potassium, samples).unwrap();
        prop_assert!((action_entropy(&shuffled, None).unwrap() - h).abs() <= 1e-12);
        prop_assert!(h <= 4f64.ln() + 1e-12);
    }

    #[test]
    fn selection_draws_distinct_unobserved_pairs(seed in any::<u64>(), frac in 0.0..1.0f64) {
        let ds = small_cohort(40, 1);
        let budget = annotation_budget(ds.len(), &ds.action_space());
        let k = (frac * budget as f64) as usize;
        let picked = select_annotation_targets(&ds, k, seed).unwrap();
        prop_assert_eq!(picked.len(), k);
        let all = unobserved_pairs(&ds);
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
        prop_assert!(sorted.iter().all(|p| all.binary_search(p).is_ok()));
        prop_assert!(select_annotation_targets(&ds, budget + 1, seed).is_err());
    }

    #[test]
    fn averaged_lab_reward_is_reward_of_mean(labs in prop::collection::vec((2.0..7.0f64, 2.0..7.0f64), 1..20)) {
        let task = Task::Potassium;
        let make = |src: &str, pick: fn(&(f64, f64)) -> f64| {
            AnnotationSet::new(
                task,
                labs.iter()
                    .enumerate()
                    .map(|(i, l)| Annotation::new(task, i as u64, 1, pick(l), src, "").unwrap())
                    .collect(),
            )
            .unwrap()
        };
        let sets = [make("a", |l| l.0), make("b", |l| l.1)];
        let avg = aggregate_sources(&sets, AggregationMode::Average, AverageStage::Lab).unwrap();
        let by_reward = aggregate_sources(&sets, AggregationMode::Average, AverageStage::Reward).unwrap();
        let spec = task.reward_spec();
        for ((a, r), l) in avg.iter().zip(by_reward.iter()).zip(&labs) {
            prop_assert!((a.predicted_lab - (l.0 + l.1) / 2.0).abs() <= 1e-12);
            prop_assert_eq!(a.reward, reward_of_lab(a.predicted_lab, &spec).unwrap());
            let mean_reward = (reward_of_lab(l.0, &spec).unwrap() + reward_of_lab(l.1, &spec).unwrap()) / 2.0;
            prop_assert!((r.reward - mean_reward).abs() <= 1e-12);
        }
        let pool = aggregate_sources(&sets, AggregationMode::Pool, AverageStage::Lab).unwrap();
        prop_assert_eq!(pool.len(), 2 * labs.len());
    }

    #[test]
    fn t_test_is_antisymmetric(pairs in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 3..40)) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        prop_assert!((ab.t + ba.t).abs() <= 1e-9 * ab.t.abs().max(1.0));
        prop_assert!((ab.p_two_sided - ba.p_two_sided).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.p_two_sided));
        prop_assert!(!(ab.significant && ba.significant));
    }

    #[test]
    fn floored_probabilities_stay_normalized(raw in prop::collection::vec(0.0..1.0f64, 2..8)) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-6);
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let floored = floor_probabilities(&p, 1e-3);
        let bound = 1e-3 / (1.0 + p.len() as f64 * 1e-3);
        prop_assert!(floored.iter().all(|v| *v >= bound - 1e-15));
        prop_assert!((floored.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn parse_round_trips_in_range_labs(lab in 1.5..9.0f64) {
        let raw = format!("{{\"predicted_lab\": {lab}, \"justification\": \"x\"}}");
        let (got, _) = parse_response(&raw, Task::Potassium).unwrap();
        prop_assert_eq!(got, lab);
    }

    #[test]
    fn cache_key_separates_inputs(prompt in ".{0,40}", t in 0.0..2.0f64) {
        let k = cache_key("m", &prompt, Some(t));
        prop_assert_eq!(&k, &cache_key("m", &prompt, Some(t)));
        prop_assert_ne!(&k, &cache_key("m", &prompt, None));
        prop_assert_ne!(&k, &cache_key("n", &prompt, Some(t)));
        prop_assert_eq!(k.len(), 64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dm_value_lies_in_unit_interval(seed in 0u64..500) {
        let ds = small_cohort(80, seed);
        let model = fit_reward_model(&ds, None, &RewardModelConfig::default()).unwrap();
        let policy = Policy::uniform(ds.action_space(), FeatureSet::CONTEXT_ONLY);
        let v = dm_value(&policy, &ds.contexts(), &model).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }
}
