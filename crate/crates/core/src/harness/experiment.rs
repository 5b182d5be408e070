//! End-to-end protocol: split, clone both policies, annotate, bootstrap
//! every estimator and compare.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{
    entropy_curve, paired_t_test, replicate_estimate, stratified_error, weighted_f1, BootstrapConfig, BootstrapPlan,
    BootstrapSummary, EntropyCurve, Estimator, Resample, Strata, TTest,
};
use crate::annotate::{
    aggregate_sources, annotate_targets, annotation_budget, select_annotation_targets, AggregationMode, AnnotationSet,
    Annotator, AverageStage,
};
use crate::bandit::{policy_value_empirical, BehaviorDataset, ClinicalContext, Task};
use crate::error::{OpeError, Result};
use crate::estimators::{is_value, IsEstimate, RewardModelConfig};
use crate::exec::Execution;
use crate::policy::{clone_policy, CloneConfig, Policy};
use crate::sim::{generate_cohort, split_cohort, true_value, ContextSource, OutcomeModel, SimConfig, SplitKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TruthMode {
    /// Exact value of the target policy on the behavior contexts under the
    /// outcome model (needs a simulator).
    #[default]
    Oracle,
    /// Mean observed reward of the target cohort.
    TargetEmpirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub split: SplitKind,
    pub dosage_threshold: Option<f64>,
    pub clone: CloneConfig,
    pub reward: RewardModelConfig,
    /// Annotation counts (per source) at which DM⁺ is evaluated.
    pub schedule: Vec<usize>,
    /// Count used for the headline DM vs DM⁺ comparison; the largest
    /// scheduled count when absent.
    pub headline: Option<usize>,
    pub aggregation: AggregationMode,
    pub average_stage: AverageStage,
    pub bootstrap: BootstrapConfig,
    pub selection_seed: u64,
    pub truth: TruthMode,
    pub entropy_step: usize,
    pub include_is: bool,
    /// Timestamp stamped on annotations; the wall clock when absent.
    pub timestamp: Option<u64>,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            split: SplitKind::Dosage,
            dosage_threshold: None,
            clone: CloneConfig::default(),
            reward: RewardModelConfig::default(),
            schedule: vec![0, 100, 200, 300, 400, 500],
            headline: None,
            aggregation: AggregationMode::Pool,
            average_stage: AverageStage::Lab,
            bootstrap: BootstrapConfig::default(),
            selection_seed: 0,
            truth: TruthMode::Oracle,
            entropy_step: 50,
            include_is: true,
            timestamp: None,
            exec: Execution::default(),
        }
    }
}

pub enum ExperimentData {
    /// Generate a cohort and split it.
    Simulated(Box<SimConfig>),
    /// Pre-split datasets, with the outcome model when one is known.
    Split {
        behavior: BehaviorDataset,
        target: BehaviorDataset,
        model: Option<OutcomeModel>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: String,
    /// Annotations in the fit (after aggregation).
    pub annotations: usize,
    pub point_estimate: f64,
    pub rmse: f64,
    pub standard_error: f64,
    pub lower: f64,
    pub upper: f64,
    pub replicate_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub candidate: String,
    pub annotations: usize,
    /// Positive `t` means the candidate has the smaller errors.
    pub test: TTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsePoint {
    /// Scheduled annotation count per source.
    pub requested: usize,
    /// Annotations actually in the fit after drops and aggregation.
    pub realized: usize,
    pub rmse: f64,
    pub standard_error: f64,
    pub lower: f64,
    pub upper: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Row {
    pub source: String,
    pub n: usize,
    pub weighted_f1: f64,
    pub mean_absolute_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub source: String,
    pub strata: String,
    pub stratum: String,
    pub n: usize,
    pub mean_absolute_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub split: SplitKind,
    pub dosage_threshold: Option<f64>,
    pub n_behavior: usize,
    pub n_target: usize,
    pub truth_mode: TruthMode,
    pub truth: f64,
    pub behavior_policy_accuracy: f64,
    pub target_policy_accuracy: f64,
    pub budget: usize,
    pub sources: Vec<String>,
    pub annotations_requested: usize,
    pub annotations_dropped: usize,
    pub n_boot: usize,
    pub estimators: Vec<EstimatorSummary>,
    pub comparisons: Vec<Comparison>,
    pub rmse_curve: Vec<RmsePoint>,
    pub entropy_curve: EntropyCurve,
    pub f1: Vec<F1Row>,
    pub stratified: Vec<StratumRow>,
    pub is_diagnostics: Option<IsEstimate>,
}

impl EvalReport {
    pub fn estimator(&self, name: &str) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.estimator == name)
    }

    /// The DM vs DM⁺ comparison at the headline count.
    pub fn headline(&self) -> Option<&Comparison> {
        self.comparisons.first()
    }
}

struct Prepared {
    behavior: BehaviorDataset,
    target: BehaviorDataset,
    model: Option<OutcomeModel>,
    threshold: Option<f64>,
}

fn prepare(data: ExperimentData, spec: &ExperimentSpec) -> Result<Prepared> {
    match data {
        ExperimentData::Simulated(cfg) => {
            let cohort = generate_cohort(&cfg)?;
            let split = split_cohort(&cohort, spec.split, spec.dosage_threshold)?;
            Ok(Prepared {
                behavior: split.behavior,
                target: split.target,
                model: Some(cfg.outcome_model()),
                threshold: split.threshold,
            })
        }
        ExperimentData::Split {
            behavior,
            target,
            model,
        } => {
            if behavior.task != target.task {
                return Err(OpeError::MixedTasks(behavior.task.to_string(), target.task.to_string()));
            }
            Ok(Prepared {
                behavior,
                target,
                model,
                threshold: spec.dosage_threshold,
            })
        }
    }
}

fn summary(name: &str, annotations: usize, point: f64, boot: BootstrapSummary) -> EstimatorSummary {
    EstimatorSummary {
        estimator: name.to_string(),
        annotations,
        point_estimate: point,
        rmse: boot.rmse,
        standard_error: boot.standard_error,
        lower: boot.lower,
        upper: boot.upper,
        replicate_errors: boot.errors,
    }
}

pub fn run_experiment(
    spec: &ExperimentSpec,
    data: ExperimentData,
    annotators: &[&dyn Annotator],
) -> Result<EvalReport> {
    if spec.schedule.is_empty() {
        return Err(OpeError::config("schedule", "must list at least one annotation count"));
    }
    let p = prepare(data, spec)?;
    let task = p.behavior.task;
    let budget = annotation_budget(p.behavior.len(), &p.behavior.action_space());
    let max_count = *spec.schedule.iter().max().expect("non-empty");
    let headline = spec.headline.unwrap_or(max_count);
    if max_count > budget || headline > budget {
        return Err(OpeError::BudgetExceeded {
            requested: max_count.max(headline),
            n: p.behavior.len(),
            actions_minus_one: p.behavior.action_space().len() - 1,
            budget,
        });
    }
    if max_count > 0 && annotators.is_empty() {
        return Err(OpeError::config(
            "annotator",
            "annotation counts are scheduled but no annotator is configured",
        ));
    }

    let behavior_clone = clone_policy(&p.behavior, &spec.clone)?;
    let target_clone = clone_policy(&p.target, &spec.clone)?;
    let pi_b: &Policy = &behavior_clone.policy;
    let pi_e: &Policy = &target_clone.policy;

    let behavior_contexts: Vec<ClinicalContext> = {
        let mut s: Vec<_> = p.behavior.samples.iter().collect();
        s.sort_by_key(|s| s.id);
        s.into_iter().map(|s| s.context.clone()).collect()
    };
    let truth = match spec.truth {
        TruthMode::Oracle => {
            let model = p
                .model
                .as_ref()
                .ok_or_else(|| OpeError::config("truth", "oracle truth needs a simulator outcome model"))?;
            true_value(pi_e, model, ContextSource::Fixed(&behavior_contexts), 1, 0, spec.exec)?
        }
        TruthMode::TargetEmpirical => policy_value_empirical(&p.target)?,
    };

    // Annotate the largest prefix once per source; smaller counts reuse
    // the leading targets.
    let annotate_count = max_count.max(headline);
    let targets = select_annotation_targets(&p.behavior, annotate_count, spec.selection_seed)?;
    let position: HashMap<(u64, usize), usize> = targets.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let mut per_source = Vec::with_capacity(annotators.len());
    let mut dropped = 0;
    for annotator in annotators {
        let run = annotate_targets(&p.behavior, &targets, *annotator, spec.exec, spec.timestamp)?;
        dropped += run.dropped.len();
        per_source.push(run.annotations);
    }
    let prefix = |k: usize| -> Result<AnnotationSet> {
        let sets: Vec<AnnotationSet> = per_source
            .iter()
            .map(|s| AnnotationSet::new(task, s.iter().filter(|a| position[&a.key()] < k).cloned().collect()))
            .collect::<Result<_>>()?;
        if sets.is_empty() {
            return Ok(AnnotationSet::empty(task));
        }
        aggregate_sources(&sets, spec.aggregation, spec.average_stage)
    };

    let mut boot = spec.bootstrap;
    boot.exec = spec.exec;
    let point_cfg = BootstrapConfig {
        n_boot: 1,
        resample: Resample::Identity,
        ..boot
    };
    let evaluate = |annotations: Option<&AnnotationSet>, estimator: Estimator| -> Result<(f64, BootstrapSummary)> {
        let plan = BootstrapPlan::new(&p.behavior, annotations)?;
        let f = |rep: &super::Replicate<'_, '_>| {
            replicate_estimate(rep, &behavior_contexts, estimator, pi_e, Some(pi_b), &spec.reward)
        };
        let point = plan.run(&point_cfg, f)?[0];
        let estimates = plan.run(&boot, f)?;
        Ok((point, BootstrapSummary::from_estimates(estimates, truth)?))
    };

    let (dm_point, dm_boot) = evaluate(None, Estimator::Dm)?;
    let headline_set = prefix(headline)?;
    let (plus_point, plus_boot) = evaluate(Some(&headline_set), Estimator::DmPlus)?;
    let mut comparisons = vec![Comparison {
        baseline: "DM".into(),
        candidate: "DM+".into(),
        annotations: headline_set.len(),
        test: paired_t_test(&dm_boot.errors, &plus_boot.errors)?,
    }];

    let mut schedule = spec.schedule.clone();
    schedule.sort_unstable();
    schedule.dedup();
    let mut rmse_curve = Vec::with_capacity(schedule.len());
    for &k in &schedule {
        let set = prefix(k)?;
        let entropy = super::action_entropy(&p.behavior, Some(&set))?;
        let b = if k == 0 {
            dm_boot.clone()
        } else if k == headline {
            plus_boot.clone()
        } else {
            evaluate(Some(&set), Estimator::DmPlus)?.1
        };
        if k > 0 && k != headline {
            comparisons.push(Comparison {
                baseline: "DM".into(),
                candidate: "DM+".into(),
                annotations: set.len(),
                test: paired_t_test(&dm_boot.errors, &b.errors)?,
            });
        }
        rmse_curve.push(RmsePoint {
            requested: k,
            realized: set.len(),
            rmse: b.rmse,
            standard_error: b.standard_error,
            lower: b.lower,
            upper: b.upper,
            entropy,
        });
    }

    let mut estimators = vec![
        summary("DM", 0, dm_point, dm_boot),
        summary("DM+", headline_set.len(), plus_point, plus_boot),
    ];
    let mut is_diagnostics = None;
    if spec.include_is {
        let (is_point, is_boot) = evaluate(None, Estimator::Is)?;
        estimators.push(summary("IS", 0, is_point, is_boot));
        is_diagnostics = Some(is_value(pi_e, pi_b, &p.behavior)?);
    }

    let full = prefix(annotate_count)?;
    let entropy = entropy_curve(&p.behavior, full.as_slice(), spec.entropy_step.max(1))?;

    let (f1, stratified) = match &p.model {
        Some(model) => annotator_quality(&p.behavior, model, &per_source)?,
        None => (Vec::new(), Vec::new()),
    };

    Ok(EvalReport {
        task,
        split: spec.split,
        dosage_threshold: p.threshold,
        n_behavior: p.behavior.len(),
        n_target: p.target.len(),
        truth_mode: spec.truth,
        truth,
        behavior_policy_accuracy: behavior_clone.validation_accuracy,
        target_policy_accuracy: target_clone.validation_accuracy,
        budget,
        sources: annotators.iter().map(|a| a.source_id().to_string()).collect(),
        annotations_requested: targets.len() * annotators.len(),
        annotations_dropped: dropped,
        n_boot: boot.n_boot,
        estimators,
        comparisons,
        rmse_curve,
        entropy_curve: entropy,
        f1,
        stratified,
        is_diagnostics,
    })
}

/// Lab-prediction quality of each source against the noiseless outcome
/// model.
fn annotator_quality(
    dataset: &BehaviorDataset,
    model: &OutcomeModel,
    sources: &[AnnotationSet],
) -> Result<(Vec<F1Row>, Vec<StratumRow>)> {
    let by_id: HashMap<u64, &ClinicalContext> = dataset.samples.iter().map(|s| (s.id, &s.context)).collect();
    let mut f1 = Vec::new();
    let mut strat = Vec::new();
    for set in sources {
        if set.is_empty() {
            continue;
        }
        let source = set.as_slice()[0].source_id.clone();
        let mut predicted = Vec::with_capacity(set.len());
        let mut truth = Vec::with_capacity(set.len());
        let mut contexts = Vec::with_capacity(set.len());
        for a in set.iter() {
            let ctx = by_id[&a.sample_id];
            predicted.push(a.predicted_lab);
            truth.push(model.clamp_lab(model.expected_lab_for_action(ctx, a.action_index)?));
            contexts.push(ctx.clone());
        }
        let mae = predicted.iter().zip(&truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / predicted.len() as f64;
        f1.push(F1Row {
            source: source.clone(),
            n: predicted.len(),
            weighted_f1: weighted_f1(&predicted, &truth, dataset.task)?,
            mean_absolute_error: mae,
        });
        for strata in [Strata::default_age_bins(), Strata::Gender] {
            for row in stratified_error(&predicted, &truth, &contexts, &strata)? {
                strat.push(StratumRow {
                    source: source.clone(),
                    strata: strata.name().to_string(),
                    stratum: row.stratum,
                    n: row.n,
                    mean_absolute_error: row.mean_absolute_error,
                });
            }
        }
    }
    Ok((f1, strat))
}
