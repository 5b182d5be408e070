//! Evaluation protocol: error metrics, patient-level bootstrap, paired
//! t-tests, lab-category F1, action entropy and error stratification.

mod experiment;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::annotate::{Annotation, AnnotationSet};
use crate::bandit::{BehaviorDataset, ClinicalContext, Gender, Sample, Task};
use crate::error::{OpeError, Result};
use crate::estimators::{dm_value_weighted, fit_rows, is_value_weighted, RewardModel, RewardModelConfig, Row};
use crate::exec::{map_range, Execution};
use crate::policy::ActionPolicy;

pub use experiment::{
    run_experiment, Comparison, EstimatorSummary, EvalReport, ExperimentData, ExperimentSpec, F1Row, RmsePoint,
    StratumRow, TruthMode,
};

pub fn rmse(estimates: &[f64], truth: f64) -> Result<f64> {
    if estimates.is_empty() {
        return Err(OpeError::Empty("estimates"));
    }
    let mse = estimates.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / estimates.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    #[default]
    WithReplacement,
    /// Every replicate is the original dataset.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub n_boot: usize,
    pub seed: u64,
    pub resample: Resample,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_boot: 500,
            seed: 0,
            resample: Resample::WithReplacement,
            exec: Execution::default(),
        }
    }
}

/// A dataset prepared for patient-level resampling. Samples are held in id
/// order and each carries its annotations, so replicate `b` draws the same
/// patients whatever order the input was in.
pub struct BootstrapPlan<'a> {
    samples: Vec<&'a Sample>,
    annotations: Vec<Vec<&'a Annotation>>,
    n_actions: usize,
}

/// One resampled dataset: a multiplicity per canonical sample.
pub struct Replicate<'p, 'a> {
    plan: &'p BootstrapPlan<'a>,
    pub index: usize,
    pub counts: Vec<f64>,
}

impl<'a> BootstrapPlan<'a> {
    pub fn new(dataset: &'a BehaviorDataset, annotations: Option<&'a AnnotationSet>) -> Result<Self> {
        if dataset.is_empty() {
            return Err(OpeError::Empty("behavior dataset"));
        }
        let mut samples: Vec<&Sample> = dataset.samples.iter().collect();
        samples.sort_by_key(|s| s.id);
        let position: BTreeMap<u64, usize> = samples.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
        let mut attached: Vec<Vec<&Annotation>> = vec![Vec::new(); samples.len()];
        if let Some(set) = annotations {
            set.check_against(dataset)?;
            for a in set.iter() {
                attached[position[&a.sample_id]].push(a);
            }
            for v in &mut attached {
                v.sort_by(|a, b| (a.action_index, &a.source_id).cmp(&(b.action_index, &b.source_id)));
            }
        }
        Ok(BootstrapPlan {
            samples,
            annotations: attached,
            n_actions: dataset.action_space().len(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_annotations(&self) -> usize {
        self.annotations.iter().map(Vec::len).sum()
    }

    pub fn samples(&self) -> &[&'a Sample] {
        &self.samples
    }

    /// Replicate `index`: `n` draws with replacement from the stream
    /// `index` of a generator seeded with `seed`.
    pub fn replicate(&self, index: usize, seed: u64, resample: Resample) -> Replicate<'_, 'a> {
        let n = self.samples.len();
        let counts = match resample {
            Resample::Identity => vec![1.0; n],
            Resample::WithReplacement => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(index as u64);
                let mut counts = vec![0.0; n];
                for _ in 0..n {
                    counts[rng.random_range(0..n)] += 1.0;
                }
                counts
            }
        };
        Replicate {
            plan: self,
            index,
            counts,
        }
    }

    /// Evaluates `f` on every replicate; results are in replicate order.
    pub fn run<F>(&self, config: &BootstrapConfig, f: F) -> Result<Vec<f64>>
    where
        F: Fn(&Replicate<'_, 'a>) -> Result<f64> + Sync + Send,
    {
        if config.n_boot == 0 {
            return Err(OpeError::config("n_boot", "must be at least 1"));
        }
        map_range(config.exec, config.n_boot, |b| {
            f(&self.replicate(b, config.seed, config.resample))
        })
        .into_iter()
        .collect()
    }
}

impl<'a> Replicate<'_, 'a> {
    /// Regression rows, each weighted by its patient's multiplicity.
    pub fn rows(&self, with_annotations: bool) -> Vec<Row<'a>> {
        let plan = self.plan;
        let mut rows: Vec<Row<'a>> = plan
            .samples
            .iter()
            .zip(&self.counts)
            .filter(|(_, c)| **c > 0.0)
            .map(|(s, c)| Row {
                context: &s.context,
                action: s.action_index,
                reward: s.reward,
                weight: *c,
            })
            .collect();
        if with_annotations {
            for (i, anns) in plan.annotations.iter().enumerate() {
                let c = self.counts[i];
                if c == 0.0 {
                    continue;
                }
                rows.extend(anns.iter().map(|a| Row {
                    context: &plan.samples[i].context,
                    action: a.action_index,
                    reward: a.reward,
                    weight: c,
                }));
            }
        }
        rows
    }

    pub fn fit(&self, with_annotations: bool, config: &RewardModelConfig) -> Result<RewardModel> {
        let rows = self.rows(with_annotations);
        let n_base = self.counts.iter().filter(|c| **c > 0.0).count();
        fit_rows(&rows, &rows[..n_base], self.plan.n_actions, config)
    }

    pub fn contexts(&self) -> Vec<ClinicalContext> {
        self.plan.samples.iter().map(|s| s.context.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Dm,
    DmPlus,
    Is,
}

impl Estimator {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Dm => "DM",
            Estimator::DmPlus => "DM+",
            Estimator::Is => "IS",
        }
    }
}

/// Value estimate of `target` on one replicate. The direct methods average
/// over the replicate's contexts; IS needs `behavior`.
pub fn replicate_estimate(
    rep: &Replicate<'_, '_>,
    contexts: &[ClinicalContext],
    estimator: Estimator,
    target: &dyn ActionPolicy,
    behavior: Option<&dyn ActionPolicy>,
    reward: &RewardModelConfig,
) -> Result<f64> {
    match estimator {
        Estimator::Dm | Estimator::DmPlus => {
            let model = rep.fit(estimator == Estimator::DmPlus, reward)?;
            dm_value_weighted(target, contexts, Some(&rep.counts), &model)
        }
        Estimator::Is => {
            let behavior = behavior.ok_or_else(|| OpeError::InvalidInput("IS needs a behavior policy".into()))?;
            Ok(is_value_weighted(target, behavior, rep.plan.samples(), Some(&rep.counts))?.value)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub estimates: Vec<f64>,
    /// Absolute error of each replicate's estimate.
    pub errors: Vec<f64>,
    pub rmse: f64,
    /// Sample standard deviation of the replicate errors.
    pub standard_error: f64,
    /// `rmse - standard_error`, truncated at zero.
    pub lower: f64,
    pub upper: f64,
}

impl BootstrapSummary {
    pub fn from_estimates(estimates: Vec<f64>, truth: f64) -> Result<Self> {
        let rmse = rmse(&estimates, truth)?;
        let errors: Vec<f64> = estimates.iter().map(|v| (v - truth).abs()).collect();
        let n = errors.len() as f64;
        let se = if errors.len() > 1 {
            let m = errors.iter().sum::<f64>() / n;
            (errors.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(BootstrapSummary {
            estimates,
            errors,
            rmse,
            standard_error: se,
            lower: (rmse - se).max(0.0),
            upper: rmse + se,
        })
    }
}

#[allow(clippy::too_many_arguments)]
pub fn bootstrap_rmse(
    dataset: &BehaviorDataset,
    annotations: Option<&AnnotationSet>,
    estimator: Estimator,
    target: &dyn ActionPolicy,
    behavior: Option<&dyn ActionPolicy>,
    truth: f64,
    reward: &RewardModelConfig,
    config: &BootstrapConfig,
) -> Result<BootstrapSummary> {
    let plan = BootstrapPlan::new(dataset, annotations)?;
    let contexts: Vec<ClinicalContext> = plan.samples().iter().map(|s| s.context.clone()).collect();
    let estimates = plan.run(config, |rep| {
        replicate_estimate(rep, &contexts, estimator, target, behavior, reward)
    })?;
    BootstrapSummary::from_estimates(estimates, truth)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    /// Positive when the second list has the smaller values.
    pub t: f64,
    pub df: f64,
    pub p_two_sided: f64,
    /// p-value for the alternative that the second list is smaller.
    pub p_one_sided: f64,
    pub mean_difference: f64,
    pub significant: bool,
}

/// Paired t-test on `a[i] - b[i]`. Significant when the two-sided p is below
/// 0.05 and `t > 0`. Zero-variance differences give `t = ±inf, p = 0`, or
/// `t = 0, p = 1` when every difference is zero.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(OpeError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(OpeError::InvalidInput("paired t-test needs at least two pairs".into()));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = n - 1.0;
    let (t, p2, p1) = if var == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0, 0.5)
        } else if mean > 0.0 {
            (f64::INFINITY, 0.0, 0.0)
        } else {
            (f64::NEG_INFINITY, 0.0, 1.0)
        }
    } else {
        let t = mean / (var / n).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| OpeError::Numerical(e.to_string()))?;
        (t, (2.0 * dist.sf(t.abs())).min(1.0), dist.sf(t))
    };
    Ok(TTest {
        t,
        df,
        p_two_sided: p2,
        p_one_sided: p1,
        mean_difference: mean,
        significant: p2 < 0.05 && t > 0.0,
    })
}

/// Lower edges of the clinical lab categories (the first category is
/// unbounded below).
pub fn lab_category_edges(task: Task) -> &'static [f64] {
    match task {
        Task::Potassium => &[3.2, 5.0, 6.0],
        Task::Sodium => &[118.0, 135.0, 152.0, 169.0],
    }
}

pub fn lab_category(task: Task, lab: f64) -> usize {
    lab_category_edges(task).iter().filter(|&&e| lab >= e).count()
}

/// Support-weighted F1 over lab categories. Categories absent from the
/// truth carry no weight.
pub fn weighted_f1(predicted: &[f64], truth: &[f64], task: Task) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(OpeError::LengthMismatch(predicted.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(OpeError::Empty("labs"));
    }
    let k = lab_category_edges(task).len() + 1;
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for (p, t) in predicted.iter().zip(truth) {
        let (cp, ct) = (lab_category(task, *p), lab_category(task, *t));
        if cp == ct {
            tp[ct] += 1;
        } else {
            fp[cp] += 1;
            fn_[ct] += 1;
        }
    }
    let n = truth.len() as f64;
    Ok((0..k)
        .map(|c| {
            let support = tp[c] + fn_[c];
            if support == 0 {
                return 0.0;
            }
            let f1 = 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64;
            f1 * support as f64 / n
        })
        .sum())
}

/// Natural-log entropy of a count vector.
pub fn entropy_of_counts(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Entropy of the action frequencies over behavior samples plus
/// annotations.
pub fn action_entropy(dataset: &BehaviorDataset, annotations: Option<&AnnotationSet>) -> Result<f64> {
    let mut counts = vec![0usize; dataset.action_space().len()];
    for s in &dataset.samples {
        counts[s.action_index] += 1;
    }
    for a in annotations.into_iter().flat_map(|s| s.iter()) {
        counts[a.action_index] += 1;
    }
    if counts.iter().sum::<usize>() == 0 {
        return Err(OpeError::Empty("samples and annotations"));
    }
    Ok(entropy_of_counts(&counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyCurve {
    /// (annotations added, H(A)).
    pub points: Vec<(usize, f64)>,
    /// ln |A|.
    pub max_entropy: f64,
}

/// Entropy after every `step` annotations, taken in the order given, plus a
/// final point for any remainder.
pub fn entropy_curve(dataset: &BehaviorDataset, annotations: &[Annotation], step: usize) -> Result<EntropyCurve> {
    let actions: Vec<usize> = annotations.iter().map(|a| a.action_index).collect();
    entropy_curve_of_actions(dataset, &actions, step)
}

/// As [`entropy_curve`], from the annotated action indices alone.
pub fn entropy_curve_of_actions(dataset: &BehaviorDataset, actions: &[usize], step: usize) -> Result<EntropyCurve> {
    if step == 0 {
        return Err(OpeError::config("step", "must be at least 1"));
    }
    let n_actions = dataset.action_space().len();
    let mut counts = vec![0usize; n_actions];
    for s in &dataset.samples {
        counts[s.action_index] += 1;
    }
    let mut points = vec![(0, entropy_of_counts(&counts))];
    for (i, &a) in actions.iter().enumerate() {
        if a >= n_actions {
            return Err(OpeError::InvalidInput(format!("annotation action {a} out of range")));
        }
        counts[a] += 1;
        let added = i + 1;
        if added % step == 0 || added == actions.len() {
            points.push((added, entropy_of_counts(&counts)));
        }
    }
    Ok(EntropyCurve {
        points,
        max_entropy: (n_actions as f64).ln(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strata {
    /// Lower edges of consecutive age bins; the last bin is open-ended.
    AgeBins {
        edges: Vec<f64>,
    },
    Gender,
}

impl Strata {
    pub fn default_age_bins() -> Self {
        Strata::AgeBins {
            edges: vec![18.0, 40.0, 60.0, 80.0],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strata::AgeBins { .. } => "age",
            Strata::Gender => "gender",
        }
    }

    fn label(&self, ctx: &ClinicalContext) -> (usize, String) {
        match self {
            Strata::Gender => match ctx.gender {
                Gender::F => (0, "F".into()),
                Gender::M => (1, "M".into()),
            },
            Strata::AgeBins { edges } => {
                let fmt = |v: f64| format!("{v}");
                let i = edges.iter().filter(|&&e| ctx.age >= e).count();
                let label = if i == 0 {
                    format!("<{}", fmt(edges[0]))
                } else if i == edges.len() {
                    format!("{}+", fmt(edges[i - 1]))
                } else {
                    format!("{}-{}", fmt(edges[i - 1]), fmt(edges[i]))
                };
                (i, label)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumError {
    pub stratum: String,
    pub n: usize,
    pub mean_absolute_error: f64,
}

/// Mean absolute lab error per stratum, in stratum order. Strata with no
/// members are omitted.
pub fn stratified_error(
    predicted: &[f64],
    truth: &[f64],
    contexts: &[ClinicalContext],
    strata: &Strata,
) -> Result<Vec<StratumError>> {
    if predicted.len() != truth.len() {
        return Err(OpeError::LengthMismatch(predicted.len(), truth.len()));
    }
    if contexts.len() != truth.len() {
        return Err(OpeError::LengthMismatch(contexts.len(), truth.len()));
    }
    if let Strata::AgeBins { edges } = strata {
        if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(OpeError::config("strata.edges", "must be non-empty and increasing"));
        }
    }
    let mut acc: BTreeMap<usize, (String, usize, f64)> = BTreeMap::new();
    for ((p, t), ctx) in predicted.iter().zip(truth).zip(contexts) {
        let (key, label) = strata.label(ctx);
        let e = acc.entry(key).or_insert((label, 0, 0.0));
        e.1 += 1;
        e.2 += (p - t).abs();
    }
    Ok(acc
        .into_values()
        .map(|(stratum, n, sum)| StratumError {
            stratum,
            n,
            mean_absolute_error: sum / n as f64,
        })
        .collect())
}
