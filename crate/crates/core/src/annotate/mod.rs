//! Counterfactual annotations: target selection, annotator backends,
//! multi-source aggregation and JSONL persistence.

mod parse;
mod prompt;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bandit::{reward_of_lab, ActionSpace, BehaviorDataset, Sample, Task};
use crate::error::{OpeError, Result};
use crate::exec::{map_slice, Execution};
use crate::llm::LlmClient;
use crate::sim::OutcomeModel;

pub use parse::{parse_response, ParseError};
pub use prompt::{build_prompt, AnnotationRequest, DEFAULT_DOMAIN_TEXT, HORIZON_HOURS};

/// Predicted outcome of an action the patient did not receive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub sample_id: u64,
    pub action_index: usize,
    pub predicted_lab: f64,
    pub reward: f64,
    pub source_id: String,
    #[serde(default)]
    pub justification: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    /// Unix seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
    /// Reserved; the reward-model fit currently treats every row with weight 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

impl Annotation {
    pub fn new(
        task: Task,
        sample_id: u64,
        action_index: usize,
        predicted_lab: f64,
        source_id: impl Into<String>,
        justification: impl Into<String>,
    ) -> Result<Self> {
        task.action_space().dose(action_index)?;
        Ok(Annotation {
            sample_id,
            action_index,
            predicted_lab,
            reward: reward_of_lab(predicted_lab, &task.reward_spec())?,
            source_id: source_id.into(),
            justification: justification.into(),
            prompt_sha256: None,
            timestamp: None,
            weight: None,
        })
    }

    pub fn key(&self) -> (u64, usize) {
        (self.sample_id, self.action_index)
    }
}

/// Annotations for one task. At most one annotation per
/// (sample, action, source).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationSet {
    task: Option<Task>,
    annotations: Vec<Annotation>,
}

impl AnnotationSet {
    pub fn new(task: Task, annotations: Vec<Annotation>) -> Result<Self> {
        let n_actions = task.action_space().len();
        let mut seen = BTreeSet::new();
        for a in &annotations {
            if a.action_index >= n_actions {
                return Err(OpeError::InvalidInput(format!(
                    "annotation action index {} out of range for {task}",
                    a.action_index
                )));
            }
            if !(0.0..=1.0).contains(&a.reward) || !a.predicted_lab.is_finite() {
                return Err(OpeError::InvalidInput(format!(
                    "annotation for sample {} has reward {} / lab {}",
                    a.sample_id, a.reward, a.predicted_lab
                )));
            }
            if !seen.insert((a.sample_id, a.action_index, a.source_id.as_str())) {
                return Err(OpeError::DuplicateAnnotation {
                    sample_id: a.sample_id,
                    action_index: a.action_index,
                    source_id: a.source_id.clone(),
                });
            }
        }
        Ok(AnnotationSet {
            task: Some(task),
            annotations,
        })
    }

    pub fn empty(task: Task) -> Self {
        AnnotationSet {
            task: Some(task),
            annotations: Vec::new(),
        }
    }

    pub fn task(&self) -> Option<Task> {
        self.task
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Annotation> {
        self.annotations.iter()
    }

    pub fn as_slice(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn into_vec(self) -> Vec<Annotation> {
        self.annotations
    }

    /// First `n` annotations in stored order.
    pub fn truncated(&self, n: usize) -> AnnotationSet {
        AnnotationSet {
            task: self.task,
            annotations: self.annotations.iter().take(n).cloned().collect(),
        }
    }

    pub fn sources(&self) -> BTreeSet<&str> {
        self.annotations.iter().map(|a| a.source_id.as_str()).collect()
    }

    /// Checks every reward equals the reward of its lab.
    pub fn check_rewards(&self) -> Result<()> {
        let Some(task) = self.task else { return Ok(()) };
        let spec = task.reward_spec();
        for a in &self.annotations {
            let r = reward_of_lab(a.predicted_lab, &spec)?;
            if (r - a.reward).abs() > 1e-12 {
                return Err(OpeError::InvalidInput(format!(
                    "annotation ({}, {}) reward {} does not match lab {}",
                    a.sample_id, a.action_index, a.reward, a.predicted_lab
                )));
            }
        }
        Ok(())
    }

    /// Checks that every annotation names a known sample and an action that
    /// sample did not receive.
    pub fn check_against(&self, dataset: &BehaviorDataset) -> Result<()> {
        if let Some(task) = self.task {
            if task != dataset.task {
                return Err(OpeError::MixedTasks(task.to_string(), dataset.task.to_string()));
            }
        }
        let observed: HashMap<u64, usize> = dataset.samples.iter().map(|s| (s.id, s.action_index)).collect();
        for a in &self.annotations {
            match observed.get(&a.sample_id) {
                None => return Err(OpeError::UnknownSample(a.sample_id)),
                Some(&obs) if obs == a.action_index => {
                    return Err(OpeError::InvalidInput(format!(
                        "annotation for sample {} repeats its observed action {obs}",
                        a.sample_id
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Maximum number of distinct annotations, N·(|A|−1).
pub fn annotation_budget(n_samples: usize, action_space: &ActionSpace) -> usize {
    n_samples * action_space.len().saturating_sub(1)
}

/// Every (sample, unobserved action) pair, samples in id order.
pub fn unobserved_pairs(dataset: &BehaviorDataset) -> Vec<(u64, usize)> {
    let mut samples: Vec<&Sample> = dataset.samples.iter().collect();
    samples.sort_by_key(|s| s.id);
    let n_actions = dataset.action_space().len();
    samples
        .iter()
        .flat_map(|s| {
            (0..n_actions)
                .filter(move |&a| a != s.action_index)
                .map(move |a| (s.id, a))
        })
        .collect()
}

/// `k` distinct (sample, unobserved action) pairs drawn uniformly without
/// replacement, in draw order.
pub fn select_annotation_targets(dataset: &BehaviorDataset, k: usize, seed: u64) -> Result<Vec<(u64, usize)>> {
    let space = dataset.action_space();
    let budget = annotation_budget(dataset.len(), &space);
    if k > budget {
        return Err(OpeError::BudgetExceeded {
            requested: k,
            n: dataset.len(),
            actions_minus_one: space.len().saturating_sub(1),
            budget,
        });
    }
    let pairs = unobserved_pairs(dataset);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, pairs.len(), k)
        .into_iter()
        .map(|i| pairs[i])
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Keep every source's annotations side by side.
    #[default]
    Pool,
    /// One annotation per (sample, action), averaged across sources.
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AverageStage {
    /// Average the labs, then take the reward of the mean lab.
    #[default]
    Lab,
    /// Average the rewards. The stored lab is still the mean lab, so the
    /// reward no longer equals the reward of the stored lab.
    Reward,
}

pub fn aggregate_sources(sets: &[AnnotationSet], mode: AggregationMode, stage: AverageStage) -> Result<AnnotationSet> {
    let mut task = None;
    for s in sets {
        match (task, s.task) {
            (None, t) => task = t,
            (Some(a), Some(b)) if a != b => return Err(OpeError::MixedTasks(a.to_string(), b.to_string())),
            _ => {}
        }
    }
    let Some(task) = task else {
        return Ok(AnnotationSet::default());
    };
    if sets.len() == 1 {
        return Ok(sets[0].clone());
    }
    match mode {
        AggregationMode::Pool => {
            AnnotationSet::new(task, sets.iter().flat_map(|s| s.annotations.iter().cloned()).collect())
        }
        AggregationMode::Average => {
            let spec = task.reward_spec();
            // Keyed by (sample, action); first-seen order is preserved.
            let mut order = Vec::new();
            let mut groups: BTreeMap<(u64, usize), Vec<&Annotation>> = BTreeMap::new();
            for a in sets.iter().flat_map(|s| s.annotations.iter()) {
                let entry = groups.entry(a.key()).or_default();
                if entry.is_empty() {
                    order.push(a.key());
                }
                entry.push(a);
            }
            let mut out = Vec::with_capacity(order.len());
            for key in order {
                let group = &groups[&key];
                let n = group.len() as f64;
                let lab = group.iter().map(|a| a.predicted_lab).sum::<f64>() / n;
                let reward = match stage {
                    AverageStage::Lab => reward_of_lab(lab, &spec)?,
                    AverageStage::Reward => group.iter().map(|a| a.reward).sum::<f64>() / n,
                };
                let mut sources: Vec<&str> = group.iter().map(|a| a.source_id.as_str()).collect();
                sources.sort_unstable();
                sources.dedup();
                out.push(Annotation {
                    sample_id: key.0,
                    action_index: key.1,
                    predicted_lab: lab,
                    reward,
                    source_id: if group.len() == 1 {
                        group[0].source_id.clone()
                    } else {
                        format!("mean({})", sources.join(","))
                    },
                    justification: if group.len() == 1 {
                        group[0].justification.clone()
                    } else {
                        String::new()
                    },
                    prompt_sha256: None,
                    timestamp: group.iter().filter_map(|a| a.timestamp).max(),
                    weight: None,
                });
            }
            AnnotationSet::new(task, out)
        }
    }
}

pub fn write_jsonl<W: Write>(set: &AnnotationSet, mut out: W) -> Result<()> {
    for a in &set.annotations {
        serde_json::to_writer(&mut out, a)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(task: Task, input: R) -> Result<AnnotationSet> {
    let mut annotations = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation = serde_json::from_str(&line)
            .map_err(|e| OpeError::InvalidInput(format!("annotation line {}: {e}", i + 1)))?;
        annotations.push(a);
    }
    AnnotationSet::new(task, annotations)
}

/// A backend that predicts the lab a sample would have shown under another
/// action.
pub trait Annotator: Sync {
    fn source_id(&self) -> &str;
    fn annotate(&self, task: Task, sample: &Sample, action_index: usize) -> Result<Annotation>;
}

/// Simulator-backed annotator: the expected lab plus optional Gaussian
/// noise, clamped to the physiologic range.
#[derive(Debug, Clone)]
pub struct OracleAnnotator {
    pub model: OutcomeModel,
    pub noise_sd: f64,
    pub seed: u64,
    pub source_id: String,
}

impl OracleAnnotator {
    pub fn new(model: OutcomeModel, noise_sd: f64, seed: u64) -> Result<Self> {
        if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
            return Err(OpeError::config("annotator.noise_sd", "must be finite and >= 0"));
        }
        let source_id = if noise_sd == 0.0 {
            "oracle".to_string()
        } else {
            format!("oracle(sd={noise_sd})")
        };
        Ok(OracleAnnotator {
            model,
            noise_sd,
            seed,
            source_id,
        })
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }
}

impl Annotator for OracleAnnotator {
    fn source_id(&self) -> &str {
        &self.source_id
    }

    fn annotate(&self, task: Task, sample: &Sample, action_index: usize) -> Result<Annotation> {
        if task != self.model.task {
            return Err(OpeError::MixedTasks(task.to_string(), self.model.task.to_string()));
        }
        let mut lab = self.model.expected_lab_for_action(&sample.context, action_index)?;
        if self.noise_sd > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(sample.id.wrapping_mul(64).wrapping_add(action_index as u64));
            let normal = Normal::new(0.0, self.noise_sd).map_err(|e| OpeError::Numerical(e.to_string()))?;
            lab += normal.sample(&mut rng);
        }
        let lab = self.model.clamp_lab(lab);
        Annotation::new(task, sample.id, action_index, lab, self.source_id.clone(), "")
    }
}

/// Annotator that asks a chat model.
pub struct LlmAnnotator<'a> {
    pub client: &'a LlmClient,
    pub domain_text: String,
    pub source_id: String,
}

impl<'a> LlmAnnotator<'a> {
    pub fn new(client: &'a LlmClient, domain_text: impl Into<String>) -> Self {
        LlmAnnotator {
            source_id: client.config().model_name.clone(),
            client,
            domain_text: domain_text.into(),
        }
    }
}

impl Annotator for LlmAnnotator<'_> {
    fn source_id(&self) -> &str {
        &self.source_id
    }

    fn annotate(&self, task: Task, sample: &Sample, action_index: usize) -> Result<Annotation> {
        let dose = task.action_space().dose(action_index)?;
        let request = AnnotationRequest::new(task, sample.context.clone(), dose)?;
        let prompt = build_prompt(&request, &self.domain_text)?;
        let completion = self.client.complete_validated(&prompt, |text| {
            parse_response(text, task).map(|_| ()).map_err(|e| e.to_string())
        })?;
        let (lab, justification) = parse_response(&completion.text, task)?;
        let mut a = Annotation::new(
            task,
            sample.id,
            action_index,
            lab,
            self.source_id.clone(),
            justification,
        )?;
        a.prompt_sha256 = Some(completion.prompt_sha256);
        Ok(a)
    }
}

#[derive(Debug, Clone)]
pub struct AnnotationRun {
    pub annotations: AnnotationSet,
    pub requested: usize,
    /// Targets whose annotation failed after retries, with the reason.
    pub dropped: Vec<((u64, usize), String)>,
}

impl AnnotationRun {
    pub fn realized(&self) -> usize {
        self.annotations.len()
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Annotates each target. Backend and parse failures drop the target and
/// are reported; anything else aborts. Output order follows `targets`.
pub fn annotate_targets(
    dataset: &BehaviorDataset,
    targets: &[(u64, usize)],
    annotator: &dyn Annotator,
    exec: Execution,
    timestamp: Option<u64>,
) -> Result<AnnotationRun> {
    let by_id: HashMap<u64, &Sample> = dataset.samples.iter().map(|s| (s.id, s)).collect();
    for &(id, action) in targets {
        let s = by_id.get(&id).ok_or(OpeError::UnknownSample(id))?;
        if s.action_index == action {
            return Err(OpeError::InvalidInput(format!(
                "target ({id}, {action}) is the observed action"
            )));
        }
    }
    let results = map_slice(exec, targets, |&(id, action)| {
        annotator.annotate(dataset.task, by_id[&id], action)
    });
    let stamp = timestamp.unwrap_or_else(unix_now);
    let mut annotations = Vec::with_capacity(targets.len());
    let mut dropped = Vec::new();
    for (target, result) in targets.iter().zip(results) {
        match result {
            Ok(mut a) => {
                a.timestamp = Some(stamp);
                annotations.push(a);
            }
            Err(e @ (OpeError::Llm(_) | OpeError::Parse(_))) => {
                log::warn!("dropping annotation target {target:?}: {e}");
                dropped.push((*target, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    if !dropped.is_empty() {
        log::warn!("{} of {} annotation targets dropped", dropped.len(), targets.len());
    }
    Ok(AnnotationRun {
        annotations: AnnotationSet::new(dataset.task, annotations)?,
        requested: targets.len(),
        dropped,
    })
}
