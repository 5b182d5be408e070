//! Contextual-bandit domain types for electrolyte repletion and the
//! lab-value reward function.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};

/// Repletion task. Each task fixes its dose grid, reference range and
/// physiologic clamp range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Potassium,
    Sodium,
}

impl Task {
    pub fn action_space(self) -> ActionSpace {
        ActionSpace::for_task(self)
    }

    pub fn reward_spec(self) -> RewardSpec {
        match self {
            Task::Potassium => RewardSpec::new(3.5, 4.5, DEFAULT_DECAY_SCALE),
            Task::Sodium => RewardSpec::new(135.0, 145.0, DEFAULT_DECAY_SCALE),
        }
        .expect("built-in reference ranges are valid")
    }

    /// Range that simulated and predicted labs are clamped to (mEq/L).
    pub fn physiologic_range(self) -> (f64, f64) {
        match self {
            Task::Potassium => (1.5, 9.0),
            Task::Sodium => (100.0, 180.0),
        }
    }

    /// Infusion rate assumed when describing a dose (mEq/hr).
    pub fn infusion_rate(self) -> f64 {
        match self {
            Task::Potassium => 10.0,
            Task::Sodium => 30.0,
        }
    }

    pub fn lab_name(self) -> &'static str {
        match self {
            Task::Potassium => "serum potassium",
            Task::Sodium => "serum sodium",
        }
    }

    pub fn treatment_name(self) -> &'static str {
        match self {
            Task::Potassium => "IV potassium",
            Task::Sodium => "IV hypertonic (3%) saline",
        }
    }

    pub fn comorbidity_name(self) -> &'static str {
        match self {
            Task::Potassium => "renal disease",
            Task::Sodium => "cirrhosis",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Potassium => "potassium",
            Task::Sodium => "sodium",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = OpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "potassium" | "k" => Ok(Task::Potassium),
            "sodium" | "na" => Ok(Task::Sodium),
            other => Err(OpeError::InvalidInput(format!("unknown task `{other}`"))),
        }
    }
}

/// Ordered dose levels for a task; index 0 is no treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    task: Task,
    dosages: Vec<f64>,
}

impl ActionSpace {
    pub fn for_task(task: Task) -> Self {
        let dosages = match task {
            Task::Potassium => vec![0.0, 10.0, 20.0, 40.0],
            Task::Sodium => vec![0.0, 100.0, 200.0, 300.0, 400.0, 500.0],
        };
        ActionSpace { task, dosages }
    }

    /// Rebuilds an action space from serialized parts, checking that the
    /// dose grid is the one the task prescribes.
    pub fn from_parts(task: Task, dosages: Vec<f64>) -> Result<Self> {
        let expected = Self::for_task(task);
        if dosages != expected.dosages {
            return Err(OpeError::InvalidInput(format!(
                "dose grid {dosages:?} does not match the {task} action space {:?}",
                expected.dosages
            )));
        }
        Ok(expected)
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn len(&self) -> usize {
        self.dosages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dosages.is_empty()
    }

    pub fn dosages(&self) -> &[f64] {
        &self.dosages
    }

    pub fn dose(&self, index: usize) -> Result<f64> {
        self.dosages.get(index).copied().ok_or_else(|| {
            OpeError::InvalidInput(format!("action index {index} out of range for {} actions", self.len()))
        })
    }

    pub fn index_of(&self, dose: f64) -> Result<usize> {
        self.dosages
            .iter()
            .position(|&d| d == dose)
            .ok_or(OpeError::DoseNotInActionSpace {
                dose,
                task: self.task.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::F => "F",
            Gender::M => "M",
        }
    }

    fn indicator(self) -> f64 {
        match self {
            Gender::F => 0.0,
            Gender::M => 1.0,
        }
    }
}

/// Number of predictive context features.
pub const N_FEATURES: usize = 15;

/// Predictive feature names, in the order used by every feature vector and
/// by the dataset CSV.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "age",
    "gender",
    "weight",
    "height",
    "heart_rate",
    "respiratory_rate",
    "spo2",
    "systolic_bp",
    "diastolic_bp",
    "serum_creatinine",
    "nacl_09_given",
    "dextrose_5_given",
    "propofol_given",
    "norepinephrine_given",
    "insulin_given",
];

/// Patient state four hours before treatment. The fifteen predictive
/// features are followed by two cohort attributes used for splitting and
/// simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalContext {
    pub age: f64,
    pub gender: Gender,
    pub weight: f64,
    pub height: f64,
    pub heart_rate: f64,
    pub respiratory_rate: f64,
    pub spo2: f64,
    pub systolic_bp: f64,
    pub diastolic_bp: f64,
    pub serum_creatinine: f64,
    pub nacl_09_given: f64,
    pub dextrose_5_given: f64,
    pub propofol_given: f64,
    pub norepinephrine_given: f64,
    pub insulin_given: f64,
    pub comorbidity_flag: bool,
    pub baseline_lab: f64,
}

impl ClinicalContext {
    pub fn features(&self) -> [f64; N_FEATURES] {
        [
            self.age,
            self.gender.indicator(),
            self.weight,
            self.height,
            self.heart_rate,
            self.respiratory_rate,
            self.spo2,
            self.systolic_bp,
            self.diastolic_bp,
            self.serum_creatinine,
            self.nacl_09_given,
            self.dextrose_5_given,
            self.propofol_given,
            self.norepinephrine_given,
            self.insulin_given,
        ]
    }

    /// Names of numeric fields that are not finite, in feature order.
    pub fn missing_fields(&self) -> Vec<&'static str> {
        let mut missing: Vec<&'static str> = self
            .features()
            .iter()
            .zip(FEATURE_NAMES)
            .filter(|(v, _)| !v.is_finite())
            .map(|(_, name)| name)
            .collect();
        if !self.baseline_lab.is_finite() {
            missing.push("baseline_lab");
        }
        missing
    }

    pub fn validate(&self) -> Result<()> {
        let missing = self.missing_fields();
        if !missing.is_empty() {
            return Err(OpeError::InvalidInput(format!(
                "missing or non-finite fields: {}",
                missing.join(", ")
            )));
        }
        for (value, name) in self.features().iter().zip(FEATURE_NAMES) {
            if *value < 0.0 {
                return Err(OpeError::InvalidInput(format!("{name} is negative ({value})")));
            }
        }
        if self.spo2 > 100.0 {
            return Err(OpeError::InvalidInput(format!("spo2 {} exceeds 100", self.spo2)));
        }
        if self.baseline_lab < 0.0 {
            return Err(OpeError::InvalidInput("baseline_lab is negative".into()));
        }
        Ok(())
    }
}

/// Reference range and tail width of the lab reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    lower: f64,
    upper: f64,
    decay_scale: f64,
}

pub const DEFAULT_DECAY_SCALE: f64 = 2.5;

impl RewardSpec {
    pub fn new(lower: f64, upper: f64, decay_scale: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(OpeError::InvalidInput(format!(
                "reference range requires a < b, got ({lower}, {upper})"
            )));
        }
        if !(decay_scale.is_finite() && decay_scale > 0.0) {
            return Err(OpeError::InvalidInput(format!(
                "decay scale must be positive, got {decay_scale}"
            )));
        }
        Ok(RewardSpec {
            lower,
            upper,
            decay_scale,
        })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn decay_scale(&self) -> f64 {
        self.decay_scale
    }

    /// Reward for a lab value already known to be finite.
    #[inline]
    pub(crate) fn eval(&self, x: f64) -> f64 {
        if x < self.lower {
            let z = (x - self.lower) / self.decay_scale;
            (-0.5 * z * z).exp()
        } else if x > self.upper {
            let z = (x - self.upper) / self.decay_scale;
            (-0.5 * z * z).exp()
        } else {
            1.0
        }
    }
}

/// Maps a lab value to a reward in (0, 1]: flat at 1 inside the reference
/// range, Gaussian decay outside it.
pub fn reward_of_lab(x: f64, spec: &RewardSpec) -> Result<f64> {
    if !x.is_finite() {
        return Err(OpeError::InvalidInput(format!("lab value {x} is not finite")));
    }
    Ok(spec.eval(x))
}

/// One logged decision: context, dose index, the next observed lab and the
/// reward it induces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub context: ClinicalContext,
    pub action_index: usize,
    pub next_lab: f64,
    pub reward: f64,
}

impl Sample {
    pub fn new(
        id: u64,
        context: ClinicalContext,
        action_index: usize,
        next_lab: f64,
        spec: &RewardSpec,
    ) -> Result<Self> {
        let reward = reward_of_lab(next_lab, spec)?;
        Ok(Sample {
            id,
            context,
            action_index,
            next_lab,
            reward,
        })
    }
}

/// Samples logged under a single behavior policy for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorDataset {
    pub task: Task,
    pub samples: Vec<Sample>,
}

impl BehaviorDataset {
    pub fn new(task: Task, samples: Vec<Sample>) -> Result<Self> {
        let space = task.action_space();
        let spec = task.reward_spec();
        for s in &samples {
            if s.action_index >= space.len() {
                return Err(OpeError::InvalidInput(format!(
                    "sample {} has action index {} outside the {task} action space",
                    s.id, s.action_index
                )));
            }
            let expected = reward_of_lab(s.next_lab, &spec)?;
            if (expected - s.reward).abs() > 1e-12 {
                return Err(OpeError::InvalidInput(format!(
                    "sample {}: reward {} inconsistent with lab {} (expected {expected})",
                    s.id, s.reward, s.next_lab
                )));
            }
        }
        Ok(BehaviorDataset { task, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn action_space(&self) -> ActionSpace {
        self.task.action_space()
    }

    pub fn contexts(&self) -> Vec<ClinicalContext> {
        self.samples.iter().map(|s| s.context.clone()).collect()
    }

    pub fn get(&self, id: u64) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

/// Mean observed reward of a dataset.
pub fn policy_value_empirical(dataset: &BehaviorDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(OpeError::Empty("behavior dataset"));
    }
    Ok(dataset.samples.iter().map(|s| s.reward).sum::<f64>() / dataset.len() as f64)
}


#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn action_spaces_match_task_grids() {
        assert_eq!(Task::Potassium.action_space().dosages(), &[0.0, 10.0, 20.0, 40.0]);
        assert_eq!(
            Task::Sodium.action_space().dosages(),
            &[0.0, 100.0, 200.0, 300.0, 400.0, 500.0]
        );
        for task in [Task::Potassium, Task::Sodium] {
            let d = task.action_space();
            assert_eq!(d.dose(0).unwrap(), 0.0);
            assert!(d.dosages().windows(2).all(|w| w[0] < w[1]));
        }
        assert!(ActionSpace::from_parts(Task::Potassium, vec![0.0, 10.0]).is_err());
        assert!(Task::Potassium.action_space().index_of(30.0).is_err());
    }

    #[test]
    fn reward_examples() {
        let k = Task::Potassium.reward_spec();
        let na = Task::Sodium.reward_spec();
        assert_eq!(reward_of_lab(4.0, &k).unwrap(), 1.0);
        assert_eq!(reward_of_lab(3.5, &k).unwrap(), 1.0);
        assert_eq!(reward_of_lab(4.5, &k).unwrap(), 1.0);
        assert_abs_diff_eq!(
            reward_of_lab(1.0, &k).unwrap(),
            0.606_530_659_712_633_4,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            reward_of_lab(150.0, &na).unwrap(),
            0.135_335_283_236_612_7,
            epsilon = 1e-12
        );
        assert!(reward_of_lab(f64::NAN, &k).is_err());
        assert!(reward_of_lab(f64::INFINITY, &k).is_err());
    }

    #[test]
    fn reward_spec_rejects_bad_ranges() {
        assert!(RewardSpec::new(4.5, 3.5, 2.5).is_err());
        assert!(RewardSpec::new(3.5, 4.5, 0.0).is_err());
    }

    #[test]
    fn empirical_value() {
        let ds = fixtures::dataset(Task::Potassium, &[(0, 4.0), (1, 4.2)]);
        assert_eq!(policy_value_empirical(&ds).unwrap(), 1.0);

        let mut ds = fixtures::dataset(Task::Potassium, &[(0, 4.0), (1, 4.0), (2, 4.0)]);
        for (s, r) in ds.samples.iter_mut().zip([0.2, 0.4, 0.6]) {
            s.reward = r;
        }
        assert_abs_diff_eq!(policy_value_empirical(&ds).unwrap(), 0.4, epsilon = 1e-15);

        let empty = BehaviorDataset::new(Task::Potassium, vec![]).unwrap();
        assert!(policy_value_empirical(&empty).is_err());
    }

    #[test]
    fn dataset_rejects_inconsistent_reward() {
        let spec = Task::Potassium.reward_spec();
        let mut s = Sample::new(0, fixtures::context(3.2), 1, 2.0, &spec).unwrap();
        s.reward = 1.0;
        assert!(BehaviorDataset::new(Task::Potassium, vec![s]).is_err());
    }

    #[test]
    fn context_validation() {
        let mut c = fixtures::context(3.3);
        assert!(c.validate().is_ok());
        c.spo2 = 101.0;
        assert!(c.validate().is_err());
        let mut c = fixtures::context(3.3);
        c.weight = f64::NAN;
        assert_eq!(c.missing_fields(), vec!["weight"]);
        assert!(c.validate().is_err());
    }
}
