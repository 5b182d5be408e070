use std::collections::HashMap;

use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dosing_ope::annotate::{annotate_targets, select_annotation_targets, AnnotationSet, OracleAnnotator};
use dosing_ope::bandit::{BehaviorDataset, ClinicalContext, Task};
use dosing_ope::estimators::{
    canonical_rows, dm_value, fit_reward_model, fit_rows, Design, RewardModelConfig, RewardPredictor, Ridge, Row,
};
use dosing_ope::exec::Execution;
use dosing_ope::features::FeatureSet;
use dosing_ope::harness::{replicate_estimate, BootstrapConfig, BootstrapPlan, Estimator, Resample};
use dosing_ope::policy::Policy;
use dosing_ope::sim::{generate_cohort, SimConfig};

fn cohort(n: usize, seed: u64) -> (BehaviorDataset, SimConfig) {
    let sim = SimConfig {
        n_patients: n,
        seed,
        ..SimConfig::default_for(Task::Potassium)
    };
    (generate_cohort(&sim).unwrap(), sim)
}

fn annotated(n: usize, k: usize, noise: f64) -> (BehaviorDataset, AnnotationSet) {
    let (ds, sim) = cohort(n, 3);
    let oracle = OracleAnnotator::new(sim.outcome_model(), noise, 1).unwrap();
    let targets = select_annotation_targets(&ds, k, 2).unwrap();
    let ann = annotate_targets(&ds, &targets, &oracle, Execution::Sequential, Some(0))
        .unwrap()
        .annotations;
    (ds, ann)
}

/// Population standardization over the dataset's own samples, the dummy
/// coded action (reference 0), an intercept and optional interactions.
fn oracle_design(ds: &BehaviorDataset, interactions: bool) -> impl Fn(&ClinicalContext, usize) -> Vec<f64> {
    let xs: Vec<Vec<f64>> = ds
        .samples
        .iter()
        .map(|s| FeatureSet::CONTEXT_ONLY.extract(&s.context))
        .collect();
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| {
            let v = (xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
            if v > 1e-12 {
                v
            } else {
                1.0
            }
        })
        .collect();
    let k = ds.action_space().len();
    move |ctx, a| {
        let z: Vec<f64> = FeatureSet::CONTEXT_ONLY
            .extract(ctx)
            .iter()
            .enumerate()
            .map(|(j, v)| (v - mean[j]) / sd[j])
            .collect();
        let mut row = z.clone();
        row.extend((1..k).map(|b| f64::from(u8::from(b == a))));
        row.push(1.0);
        if interactions {
            for b in 1..k {
                row.extend(z.iter().map(|v| if b == a { *v } else { 0.0 }));
            }
        }
        row
    }
}

fn svd_predictions(ds: &BehaviorDataset, ann: &AnnotationSet, interactions: bool) -> Vec<f64> {
    let design = oracle_design(ds, interactions);
    let rows = canonical_rows(ds, Some(ann)).unwrap();
    let x: Vec<Vec<f64>> = rows.iter().map(|r| design(r.context, r.action)).collect();
    let p = x[0].len();
    let xm = DMatrix::from_fn(x.len(), p, |i, j| x[i][j]);
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.reward));
    let w = xm.svd(true, true).solve(&y, 1e-12).unwrap();
    ds.samples
        .iter()
        .flat_map(|s| {
            (0..4)
                .map(|a| DVector::from_vec(design(&s.context, a)).dot(&w))
                .collect::<Vec<_>>()
        })
        .collect()
}

fn model_predictions(ds: &BehaviorDataset, model: &impl RewardPredictor) -> Vec<f64> {
    ds.samples
        .iter()
        .flat_map(|s| model.predict_all(&s.context).unwrap())
        .collect()
}

#[test]
fn linear_fit_matches_svd_least_squares() {
    let (ds, ann) = annotated(240, 300, 0.3);
    for interactions in [false, true] {
        let cfg = RewardModelConfig {
            design: Design::Linear { interactions },
            ridge: Ridge::Off,
            ..RewardModelConfig::default()
        };
        let model = fit_reward_model(&ds, Some(&ann), &cfg).unwrap();
        let got = model_predictions(&ds, &model);
        let want = svd_predictions(&ds, &ann, interactions);
        for (g, w) in got.iter().zip(&want) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-8);
        }
    }
}

#[test]
fn recovers_exact_linear_rewards() {
    let (ds, _) = cohort(200, 9);
    let design = oracle_design(&ds, false);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let beta: Vec<f64> = (0..15).map(|_| rng.random_range(-0.05..0.05)).collect();
    let effect = [0.0, 0.1, -0.07, 0.2];
    let truth = |ctx: &ClinicalContext, a: usize| {
        let x = design(ctx, a);
        0.5 + x[..15].iter().zip(&beta).map(|(v, b)| v * b).sum::<f64>() + effect[a]
    };
    let rows: Vec<Row> = ds
        .samples
        .iter()
        .flat_map(|s| (0..4).map(move |a| (s, a)))
        .map(|(s, a)| Row {
            context: &s.context,
            action: a,
            reward: truth(&s.context, a),
            weight: 1.0,
        })
        .collect();
    let base: Vec<Row> = rows.iter().step_by(4).copied().collect();
    let model = fit_rows(&rows, &base, 4, &RewardModelConfig::default()).unwrap();
    let w = model.weights();
    for j in 0..15 {
        assert_abs_diff_eq!(w[j], beta[j], epsilon = 1e-9);
    }
    for a in 1..4 {
        assert_abs_diff_eq!(w[14 + a], effect[a], epsilon = 1e-9);
    }
    assert_abs_diff_eq!(w[18], 0.5, epsilon = 1e-9);
    assert_eq!(model.ridge_used(), None);
}

#[test]
fn fit_does_not_depend_on_row_order() {
    let (ds, ann) = annotated(150, 200, 0.5);
    let rows = canonical_rows(&ds, Some(&ann)).unwrap();
    let base = &rows[..ds.len()];
    let cfg = RewardModelConfig::default();
    let reference = fit_rows(&rows, base, 4, &cfg).unwrap();
    let mut shuffled = rows.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
    let other = fit_rows(&shuffled, base, 4, &cfg).unwrap();
    for (a, b) in model_predictions(&ds, &reference)
        .iter()
        .zip(model_predictions(&ds, &other))
    {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-10);
    }
}

#[test]
fn saturated_model_is_cell_mean() {
    let (ds, ann) = annotated(80, 150, 1.0);
    let cfg = RewardModelConfig {
        design: Design::Saturated,
        ..RewardModelConfig::default()
    };
    let model = fit_reward_model(&ds, Some(&ann), &cfg).unwrap();
    let mut cells: HashMap<(u64, usize), (f64, f64)> = HashMap::new();
    for r in canonical_rows(&ds, Some(&ann)).unwrap() {
        let id = ds
            .samples
            .iter()
            .find(|s| std::ptr::eq(&s.context, r.context))
            .unwrap()
            .id;
        let e = cells.entry((id, r.action)).or_default();
        e.0 += r.reward;
        e.1 += 1.0;
    }
    for ((id, a), (sum, n)) in cells {
        let got = model.predict(&ds.get(id).unwrap().context, a).unwrap();
        assert_abs_diff_eq!(got, sum / n, epsilon = 1e-12);
    }
}

#[test]
fn identity_bootstrap_reproduces_point_estimate() {
    let (ds, ann) = annotated(120, 100, 0.0);
    let policy = Policy::uniform(ds.action_space(), FeatureSet::WITH_BASELINE_LAB);
    let cfg = RewardModelConfig::default();
    let model = fit_reward_model(&ds, Some(&ann), &cfg).unwrap();
    let point = dm_value(&policy, &ds.contexts(), &model).unwrap();
    let plan = BootstrapPlan::new(&ds, Some(&ann)).unwrap();
    let contexts: Vec<ClinicalContext> = plan.samples().iter().map(|s| s.context.clone()).collect();
    let boot = BootstrapConfig {
        n_boot: 3,
        resample: Resample::Identity,
        ..BootstrapConfig::default()
    };
    let estimates = plan
        .run(&boot, |rep| {
            replicate_estimate(rep, &contexts, Estimator::DmPlus, &policy, None, &cfg)
        })
        .unwrap();
    for e in estimates {
        assert_abs_diff_eq!(e, point, epsilon = 1e-12);
    }
}
