//! Synthetic repletion cohorts with a known dose-response model.
//!
//! Every patient `i` draws from its own ChaCha8 stream (`seed`, stream `i`),
//! so a cohort is reproducible across runs and platforms and patients can be
//! generated in any order. Gaussian draws use `rand_distr::StandardNormal`.
//!
//! Expected next lab for dose `d` (mEq):
//!
//! ```text
//! baseline_lab + drift + kappa * d * (1 + rho * comorbidity) * clamp(creatinine / cr_ref, g_min, g_max)
//! ```
//!
//! The observed lab adds `N(0, noise_sd²)` noise and is clamped to the task's
//! physiologic range.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bandit::{reward_of_lab, ActionSpace, BehaviorDataset, ClinicalContext, Gender, RewardSpec, Sample, Task};
use crate::error::{OpeError, Result};
use crate::exec::{self, Execution};
use crate::policy::{softmax, ActionPolicy};
use crate::quadrature::gaussian_expectation;

/// Normal draw clamped to `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampedNormal {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl ClampedNormal {
    const fn new(mean: f64, sd: f64, min: f64, max: f64) -> Self {
        ClampedNormal { mean, sd, min, max }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        (self.mean + self.sd * z).clamp(self.min, self.max)
    }

    fn validate(&self, field: &str) -> Result<()> {
        if !(self.sd >= 0.0 && self.sd.is_finite()) {
            return Err(OpeError::config(format!("{field}.sd"), "must be finite and >= 0"));
        }
        if self.min.is_nan() || self.max.is_nan() || self.min > self.max {
            return Err(OpeError::config(format!("{field}.min"), "must not exceed max"));
        }
        if !self.mean.is_finite() {
            return Err(OpeError::config(format!("{field}.mean"), "must be finite"));
        }
        Ok(())
    }
}

/// An infusion given with probability `prob`, volume drawn when given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Infusion {
    pub prob: f64,
    pub volume: ClampedNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDistribution {
    pub female_prob: f64,
    pub comorbidity_prob: f64,
    pub age: ClampedNormal,
    pub weight: ClampedNormal,
    pub height: ClampedNormal,
    pub heart_rate: ClampedNormal,
    pub respiratory_rate: ClampedNormal,
    pub spo2: ClampedNormal,
    pub systolic_bp: ClampedNormal,
    pub diastolic_bp: ClampedNormal,
    pub serum_creatinine: ClampedNormal,
    /// Added to creatinine when the comorbidity is present.
    pub comorbidity_creatinine_shift: f64,
    pub nacl_09: Infusion,
    pub dextrose_5: Infusion,
    pub propofol_prob: f64,
    pub norepinephrine_prob: f64,
    pub insulin_prob: f64,
    pub baseline_lab: ClampedNormal,
    /// Baseline shift per unit of creatinine above 1 mg/dL.
    pub baseline_creatinine_slope: f64,
    /// Baseline shift when insulin was given.
    pub baseline_insulin_shift: f64,
}

/// Dose-response coefficients; see the module docs for the formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeParams {
    pub drift: f64,
    pub kappa: f64,
    pub rho: f64,
    pub creatinine_ref: f64,
    pub gain_min: f64,
    pub gain_max: f64,
}

/// Heuristic clinician: softmax over
/// `(theta * need * u - u² / 2) / temperature`, with `u = dose / max_dose`,
/// `theta = 1 / (kappa * max_dose)` and
/// `need = target_lab - baseline_lab - creatinine_weight * (creatinine - 1)`.
/// The score is maximized near the dose that lifts the lab to `target_lab`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorParams {
    pub target_lab: f64,
    pub creatinine_weight: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub task: Task,
    pub n_patients: usize,
    pub seed: u64,
    pub features: FeatureDistribution,
    pub outcome: OutcomeParams,
    pub behavior: BehaviorParams,
    pub noise_sd: f64,
}

// Default parameter block. The coefficients are free parameters of the test
// bed, not clinical claims.
impl SimConfig {
    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Potassium => SimConfig {
                task,
                n_patients: 1622,
                seed: 7,
                features: FeatureDistribution {
                    baseline_lab: ClampedNormal::new(3.35, 0.3, 2.2, 4.6),
                    baseline_creatinine_slope: 0.15,
                    baseline_insulin_shift: -0.1,
                    ..common_features()
                },
                outcome: OutcomeParams {
                    drift: -0.05,
                    kappa: 0.02,
                    rho: 0.5,
                    creatinine_ref: 1.0,
                    gain_min: 0.5,
                    gain_max: 2.0,
                },
                behavior: BehaviorParams {
                    target_lab: 4.0,
                    creatinine_weight: 0.3,
                    temperature: 0.005,
                },
                noise_sd: 0.2,
            },
            Task::Sodium => SimConfig {
                task,
                n_patients: 1187,
                seed: 7,
                features: FeatureDistribution {
                    comorbidity_prob: 0.2,
                    comorbidity_creatinine_shift: 0.4,
                    baseline_lab: ClampedNormal::new(126.0, 3.5, 112.0, 136.0),
                    baseline_creatinine_slope: -0.5,
                    baseline_insulin_shift: 0.0,
                    ..common_features()
                },
                outcome: OutcomeParams {
                    drift: -0.05,
                    kappa: 0.01,
                    rho: -0.3,
                    creatinine_ref: 1.0,
                    gain_min: 0.5,
                    gain_max: 2.0,
                },
                behavior: BehaviorParams {
                    target_lab: 129.0,
                    creatinine_weight: 0.0,
                    temperature: 0.005,
                },
                noise_sd: 1.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(OpeError::config("n_patients", "must be positive"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(OpeError::config("noise_sd", "must be finite and >= 0"));
        }
        let f = &self.features;
        for (name, p) in [
            ("female_prob", f.female_prob),
            ("comorbidity_prob", f.comorbidity_prob),
            ("nacl_09.prob", f.nacl_09.prob),
            ("dextrose_5.prob", f.dextrose_5.prob),
            ("propofol_prob", f.propofol_prob),
            ("norepinephrine_prob", f.norepinephrine_prob),
            ("insulin_prob", f.insulin_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(OpeError::config(format!("features.{name}"), "must lie in [0, 1]"));
            }
        }
        for (name, d) in [
            ("age", f.age),
            ("weight", f.weight),
            ("height", f.height),
            ("heart_rate", f.heart_rate),
            ("respiratory_rate", f.respiratory_rate),
            ("spo2", f.spo2),
            ("systolic_bp", f.systolic_bp),
            ("diastolic_bp", f.diastolic_bp),
            ("serum_creatinine", f.serum_creatinine),
            ("nacl_09.volume", f.nacl_09.volume),
            ("dextrose_5.volume", f.dextrose_5.volume),
            ("baseline_lab", f.baseline_lab),
        ] {
            d.validate(&format!("features.{name}"))?;
            if d.min < 0.0 {
                return Err(OpeError::config(format!("features.{name}.min"), "must be >= 0"));
            }
        }
        if f.spo2.max > 100.0 {
            return Err(OpeError::config("features.spo2.max", "must not exceed 100"));
        }
        let o = &self.outcome;
        if o.kappa.is_nan() || o.kappa <= 0.0 {
            return Err(OpeError::config("outcome.kappa", "must be positive"));
        }
        if o.rho.is_nan() || o.rho <= -1.0 {
            return Err(OpeError::config(
                "outcome.rho",
                "must exceed -1 to keep the dose response increasing",
            ));
        }
        if !(o.creatinine_ref > 0.0 && o.gain_min > 0.0 && o.gain_min <= o.gain_max) {
            return Err(OpeError::config(
                "outcome.gain_min",
                "need 0 < gain_min <= gain_max and creatinine_ref > 0",
            ));
        }
        if self.behavior.temperature.is_nan() || self.behavior.temperature <= 0.0 {
            return Err(OpeError::config("behavior.temperature", "must be positive"));
        }
        Ok(())
    }

    pub fn outcome_model(&self) -> OutcomeModel {
        OutcomeModel {
            task: self.task,
            params: self.outcome,
            noise_sd: self.noise_sd,
        }
    }
}

fn common_features() -> FeatureDistribution {
    FeatureDistribution {
        female_prob: 0.5,
        comorbidity_prob: 0.3,
        age: ClampedNormal::new(64.0, 16.0, 18.0, 98.0),
        weight: ClampedNormal::new(78.0, 18.0, 35.0, 200.0),
        height: ClampedNormal::new(169.0, 10.0, 140.0, 205.0),
        heart_rate: ClampedNormal::new(84.0, 14.0, 40.0, 160.0),
        respiratory_rate: ClampedNormal::new(18.0, 3.0, 8.0, 40.0),
        spo2: ClampedNormal::new(96.5, 2.0, 80.0, 100.0),
        systolic_bp: ClampedNormal::new(126.0, 18.0, 70.0, 210.0),
        diastolic_bp: ClampedNormal::new(70.0, 11.0, 35.0, 120.0),
        serum_creatinine: ClampedNormal::new(1.0, 0.3, 0.3, 8.0),
        comorbidity_creatinine_shift: 1.0,
        nacl_09: Infusion {
            prob: 0.4,
            volume: ClampedNormal::new(750.0, 300.0, 50.0, 3000.0),
        },
        dextrose_5: Infusion {
            prob: 0.15,
            volume: ClampedNormal::new(500.0, 200.0, 50.0, 2000.0),
        },
        propofol_prob: 0.05,
        norepinephrine_prob: 0.05,
        insulin_prob: 0.2,
        baseline_lab: ClampedNormal::new(0.0, 0.0, 0.0, 0.0),
        baseline_creatinine_slope: 0.0,
        baseline_insulin_shift: 0.0,
    }
}

/// Ground-truth dose response for one task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeModel {
    pub task: Task,
    pub params: OutcomeParams,
    pub noise_sd: f64,
}

impl OutcomeModel {
    /// Expected next lab (before noise and clamping) for a dose in mEq.
    pub fn expected_lab(&self, ctx: &ClinicalContext, dose: f64) -> Result<f64> {
        self.task.action_space().index_of(dose)?;
        Ok(self.expected_lab_unchecked(ctx, dose))
    }

    pub fn expected_lab_for_action(&self, ctx: &ClinicalContext, action: usize) -> Result<f64> {
        let dose = self.task.action_space().dose(action)?;
        Ok(self.expected_lab_unchecked(ctx, dose))
    }

    fn expected_lab_unchecked(&self, ctx: &ClinicalContext, dose: f64) -> f64 {
        let p = &self.params;
        let gain = (ctx.serum_creatinine / p.creatinine_ref).clamp(p.gain_min, p.gain_max);
        let comorbidity = if ctx.comorbidity_flag { 1.0 } else { 0.0 };
        ctx.baseline_lab + p.drift + p.kappa * dose * (1.0 + p.rho * comorbidity) * gain
    }

    pub fn clamp_lab(&self, lab: f64) -> f64 {
        let (lo, hi) = self.task.physiologic_range();
        lab.clamp(lo, hi)
    }

    /// Noisy, clamped observation.
    pub fn observe<R: Rng>(&self, ctx: &ClinicalContext, action: usize, rng: &mut R) -> Result<f64> {
        let mean = self.expected_lab_for_action(ctx, action)?;
        let z: f64 = StandardNormal.sample(rng);
        Ok(self.clamp_lab(mean + self.noise_sd * z))
    }

    /// E[R | s, a], integrating the reward of the clamped noisy lab over the
    /// Gaussian noise.
    pub fn expected_reward(&self, ctx: &ClinicalContext, action: usize) -> Result<f64> {
        let mean = self.expected_lab_for_action(ctx, action)?;
        let spec = self.task.reward_spec();
        let (lo, hi) = self.task.physiologic_range();
        Ok(gaussian_expectation(
            mean,
            self.noise_sd,
            &[lo, spec.lower(), spec.upper(), hi],
            |x| spec.eval(x.clamp(lo, hi)),
        ))
    }
}

fn bernoulli(rng: &mut ChaCha8Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

fn patient_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn draw_context(f: &FeatureDistribution, rng: &mut ChaCha8Rng) -> ClinicalContext {
    let gender = if bernoulli(rng, f.female_prob) {
        Gender::F
    } else {
        Gender::M
    };
    let comorbidity_flag = bernoulli(rng, f.comorbidity_prob);
    let age = f.age.sample(rng);
    let weight = f.weight.sample(rng);
    let height = f.height.sample(rng);
    let heart_rate = f.heart_rate.sample(rng);
    let respiratory_rate = f.respiratory_rate.sample(rng);
    let spo2 = f.spo2.sample(rng);
    let systolic_bp = f.systolic_bp.sample(rng);
    let diastolic_bp = f.diastolic_bp.sample(rng).min(systolic_bp - 10.0).max(0.0);
    let mut serum_creatinine = f.serum_creatinine.sample(rng);
    if comorbidity_flag {
        serum_creatinine = (serum_creatinine + f.comorbidity_creatinine_shift).min(f.serum_creatinine.max);
    }
    let infusion = |inf: &Infusion, rng: &mut ChaCha8Rng| {
        let given = bernoulli(rng, inf.prob);
        let volume = inf.volume.sample(rng);
        if given {
            volume
        } else {
            0.0
        }
    };
    let nacl_09_given = infusion(&f.nacl_09, rng);
    let dextrose_5_given = infusion(&f.dextrose_5, rng);
    let propofol_given = f64::from(u8::from(bernoulli(rng, f.propofol_prob)));
    let norepinephrine_given = f64::from(u8::from(bernoulli(rng, f.norepinephrine_prob)));
    let insulin_given = f64::from(u8::from(bernoulli(rng, f.insulin_prob)));
    let baseline = f.baseline_lab.sample(rng)
        + f.baseline_creatinine_slope * (serum_creatinine - 1.0)
        + f.baseline_insulin_shift * insulin_given;
    ClinicalContext {
        age,
        gender,
        weight,
        height,
        heart_rate,
        respiratory_rate,
        spo2,
        systolic_bp,
        diastolic_bp,
        serum_creatinine,
        nacl_09_given,
        dextrose_5_given,
        propofol_given,
        norepinephrine_given,
        insulin_given,
        comorbidity_flag,
        baseline_lab: baseline.clamp(f.baseline_lab.min, f.baseline_lab.max),
    }
}

/// The simulator's clinician. Exposed so tests and benchmarks can compare
/// cloned policies against the generating rule.
#[derive(Debug, Clone, Copy)]
pub struct HeuristicBehavior {
    task: Task,
    params: BehaviorParams,
    kappa: f64,
}

impl HeuristicBehavior {
    pub fn new(config: &SimConfig) -> Self {
        HeuristicBehavior {
            task: config.task,
            params: config.behavior,
            kappa: config.outcome.kappa,
        }
    }

    fn scores(&self, ctx: &ClinicalContext) -> Vec<f64> {
        let space = self.task.action_space();
        let max_dose = *space.dosages().last().expect("non-empty action space");
        let theta = 1.0 / (self.kappa * max_dose);
        let need =
            self.params.target_lab - ctx.baseline_lab - self.params.creatinine_weight * (ctx.serum_creatinine - 1.0);
        space
            .dosages()
            .iter()
            .map(|d| {
                let u = d / max_dose;
                (theta * need * u - 0.5 * u * u) / self.params.temperature
            })
            .collect()
    }
}

impl ActionPolicy for HeuristicBehavior {
    fn n_actions(&self) -> usize {
        self.task.action_space().len()
    }

    fn action_probs(&self, ctx: &ClinicalContext) -> Result<Vec<f64>> {
        Ok(softmax(&self.scores(ctx)))
    }
}

fn draw_action(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Generates a cohort logged under the heuristic behavior policy. Patient ids
/// are `0..n_patients`.
pub fn generate_cohort(config: &SimConfig) -> Result<BehaviorDataset> {
    config.validate()?;
    let behavior = HeuristicBehavior::new(config);
    let model = config.outcome_model();
    let spec = config.task.reward_spec();
    let samples = (0..config.n_patients as u64)
        .map(|i| {
            let mut rng = patient_rng(config.seed, i);
            let context = draw_context(&config.features, &mut rng);
            let action = draw_action(&behavior.action_probs(&context)?, &mut rng);
            let lab = model.observe(&context, action, &mut rng)?;
            Sample::new(i, context, action, lab, &spec)
        })
        .collect::<Result<Vec<_>>>()?;
    BehaviorDataset::new(config.task, samples)
}

/// Draws `n` contexts from the population (stream offset keeps them disjoint
/// from the cohort's own patients for the same seed).
pub fn sample_contexts(config: &SimConfig, n: usize, seed: u64) -> Result<Vec<ClinicalContext>> {
    config.validate()?;
    Ok((0..n as u64)
        .map(|i| draw_context(&config.features, &mut patient_rng(seed, (1 << 40) + i)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Gender,
    Comorbidity,
    Dosage,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Gender, SplitKind::Comorbidity, SplitKind::Dosage];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Gender => "gender",
            SplitKind::Comorbidity => "comorbidity",
            SplitKind::Dosage => "dosage",
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = OpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gender" => Ok(SplitKind::Gender),
            "comorbidity" => Ok(SplitKind::Comorbidity),
            "dosage" => Ok(SplitKind::Dosage),
            other => Err(OpeError::InvalidInput(format!("unknown split `{other}`"))),
        }
    }
}

/// Disjoint behavior/target partition of a cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSplit {
    pub kind: SplitKind,
    /// Dose threshold for the dosage split (mEq); behavior doses are strictly
    /// below it.
    pub threshold: Option<f64>,
    pub behavior: BehaviorDataset,
    pub target: BehaviorDataset,
}

/// Splits a cohort: female → behavior / male → target; comorbidity absent /
/// present; dose below / at-or-above the threshold (cohort median dose when
/// `dosage_threshold` is `None`).
pub fn split_cohort(cohort: &BehaviorDataset, kind: SplitKind, dosage_threshold: Option<f64>) -> Result<CohortSplit> {
    let space = cohort.action_space();
    let threshold = match kind {
        SplitKind::Dosage => Some(match dosage_threshold {
            Some(t) => t,
            None => median_dose(cohort, &space)?,
        }),
        _ => None,
    };
    let (behavior, target): (Vec<Sample>, Vec<Sample>) = cohort.samples.iter().cloned().partition(|s| match kind {
        SplitKind::Gender => s.context.gender == Gender::F,
        SplitKind::Comorbidity => !s.context.comorbidity_flag,
        SplitKind::Dosage => space.dosages()[s.action_index] < threshold.expect("set for dosage"),
    });
    let name = kind.as_str().to_string();
    if behavior.is_empty() {
        return Err(OpeError::DegenerateSplit {
            split: name,
            side: "behavior",
        });
    }
    if target.is_empty() {
        return Err(OpeError::DegenerateSplit {
            split: name,
            side: "target",
        });
    }
    Ok(CohortSplit {
        kind,
        threshold,
        behavior: BehaviorDataset::new(cohort.task, behavior)?,
        target: BehaviorDataset::new(cohort.task, target)?,
    })
}

fn median_dose(cohort: &BehaviorDataset, space: &ActionSpace) -> Result<f64> {
    if cohort.is_empty() {
        return Err(OpeError::Empty("cohort"));
    }
    let mut doses: Vec<f64> = cohort.samples.iter().map(|s| space.dosages()[s.action_index]).collect();
    doses.sort_by(f64::total_cmp);
    let n = doses.len();
    Ok(if n % 2 == 1 {
        doses[n / 2]
    } else {
        0.5 * (doses[n / 2 - 1] + doses[n / 2])
    })
}

/// Where `true_value` takes its contexts from.
#[derive(Debug, Clone, Copy)]
pub enum ContextSource<'a> {
    /// Exactly these contexts, each weighted equally.
    Fixed(&'a [ClinicalContext]),
    /// Fresh draws from the simulator's population.
    Population(&'a SimConfig),
}

/// Exact value of a policy under the outcome model: the context average of
/// Σ_a π(a|s)·E[R | s, a], the inner expectation by quadrature.
pub fn true_value<P: ActionPolicy + ?Sized>(
    policy: &P,
    model: &OutcomeModel,
    source: ContextSource<'_>,
    n_mc: usize,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    if n_mc == 0 {
        return Err(OpeError::config("n_mc", "must be positive"));
    }
    let drawn;
    let contexts: &[ClinicalContext] = match source {
        ContextSource::Fixed(c) => c,
        ContextSource::Population(cfg) => {
            drawn = sample_contexts(cfg, n_mc, seed)?;
            &drawn
        }
    };
    if contexts.is_empty() {
        return Err(OpeError::Empty("contexts"));
    }
    let per_context = exec::map_slice(exec, contexts, |ctx| -> Result<f64> {
        let p = policy.action_probs(ctx)?;
        let mut v = 0.0;
        for (a, pa) in p.iter().enumerate() {
            if *pa > 0.0 {
                v += pa * model.expected_reward(ctx, a)?;
            }
        }
        Ok(v)
    });
    let mut total = 0.0;
    for v in per_context {
        total += v?;
    }
    Ok(total / contexts.len() as f64)
}

/// Reward of the noiseless expected lab (used when the noise is zero).
pub fn noiseless_reward(model: &OutcomeModel, ctx: &ClinicalContext, action: usize, spec: &RewardSpec) -> Result<f64> {
    let lab = model.clamp_lab(model.expected_lab_for_action(ctx, action)?);
    reward_of_lab(lab, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandit::fixtures;
    use crate::features::FeatureSet;
    use crate::policy::Policy;

    #[test]
    fn determinism() {
        let cfg = SimConfig {
            n_patients: 200,
            ..SimConfig::default_for(Task::Potassium)
        };
        let a = generate_cohort(&cfg).unwrap();
        let b = generate_cohort(&cfg).unwrap();
        assert_eq!(a, b);
        let other = generate_cohort(&SimConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn default_cohort_sizes() {
        assert_eq!(
            generate_cohort(&SimConfig::default_for(Task::Potassium)).unwrap().len(),
            1622
        );
        assert_eq!(
            generate_cohort(&SimConfig::default_for(Task::Sodium)).unwrap().len(),
            1187
        );
    }

    #[test]
    fn generated_contexts_are_valid() {
        for task in [Task::Potassium, Task::Sodium] {
            let ds = generate_cohort(&SimConfig::default_for(task)).unwrap();
            for s in &ds.samples {
                s.context.validate().unwrap();
            }
        }
    }

    #[test]
    fn invalid_config_names_field() {
        let mut cfg = SimConfig::default_for(Task::Potassium);
        cfg.features.age.sd = -1.0;
        match generate_cohort(&cfg) {
            Err(OpeError::Config { field, .. }) => assert_eq!(field, "features.age.sd"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = SimConfig {
            n_patients: 0,
            ..SimConfig::default_for(Task::Potassium)
        };
        assert!(generate_cohort(&cfg).is_err());
    }

    #[test]
    fn noiseless_zero_dose_equals_model() {
        let cfg = SimConfig {
            n_patients: 300,
            noise_sd: 0.0,
            ..SimConfig::default_for(Task::Potassium)
        };
        let model = cfg.outcome_model();
        let ds = generate_cohort(&cfg).unwrap();
        let zero_dose: Vec<_> = ds.samples.iter().filter(|s| s.action_index == 0).collect();
        assert!(!zero_dose.is_empty());
        for s in zero_dose {
            assert_eq!(s.next_lab, model.expected_lab(&s.context, 0.0).unwrap());
            assert_eq!(s.next_lab, s.context.baseline_lab - 0.05);
        }
    }

    #[test]
    fn outcome_golden_value() {
        // 3.0 - 0.05 + 0.02 * 40 * (1 + 0) * clamp(1.1 / 1.0, 0.5, 2.0) = 3.83
        let model = SimConfig::default_for(Task::Potassium).outcome_model();
        let mut ctx = fixtures::context(3.0);
        ctx.serum_creatinine = 1.1;
        let v = model.expected_lab(&ctx, 40.0).unwrap();
        assert!((v - 3.83).abs() < 1e-12, "{v}");
        assert!(model.expected_lab(&ctx, 30.0).is_err());
    }

    #[test]
    fn outcome_monotone_in_dose_and_comorbidity() {
        for task in [Task::Potassium, Task::Sodium] {
            let model = SimConfig::default_for(task).outcome_model();
            let space = task.action_space();
            for base in [2.5, 3.0, 3.5, 125.0, 130.0] {
                for cr in [0.3, 0.8, 1.0, 1.7, 2.5, 4.0] {
                    let mut ctx = fixtures::context(base);
                    ctx.serum_creatinine = cr;
                    let labs: Vec<f64> = space
                        .dosages()
                        .iter()
                        .map(|&d| model.expected_lab(&ctx, d).unwrap())
                        .collect();
                    assert!(labs.windows(2).all(|w| w[0] < w[1]));
                    if task == Task::Potassium {
                        let mut flagged = ctx.clone();
                        flagged.comorbidity_flag = true;
                        for &d in &space.dosages()[1..] {
                            assert!(model.expected_lab(&flagged, d).unwrap() > model.expected_lab(&ctx, d).unwrap());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gender_split_partitions() {
        let ds = generate_cohort(&SimConfig {
            n_patients: 400,
            ..SimConfig::default_for(Task::Potassium)
        })
        .unwrap();
        for kind in SplitKind::ALL {
            let split = split_cohort(&ds, kind, None).unwrap();
            assert_eq!(split.behavior.len() + split.target.len(), ds.len());
            let mut ids: Vec<u64> = split
                .behavior
                .samples
                .iter()
                .chain(&split.target.samples)
                .map(|s| s.id)
                .collect();
            ids.sort_unstable();
            assert_eq!(ids, (0..400).collect::<Vec<_>>());
        }
    }

    #[test]
    fn all_female_gender_split_is_degenerate() {
        let mut cfg = SimConfig {
            n_patients: 50,
            ..SimConfig::default_for(Task::Potassium)
        };
        cfg.features.female_prob = 1.0;
        let ds = generate_cohort(&cfg).unwrap();
        assert!(matches!(
            split_cohort(&ds, SplitKind::Gender, None),
            Err(OpeError::DegenerateSplit { side: "target", .. })
        ));
    }

    #[test]
    fn dosage_split_histogram() {
        let ds = generate_cohort(&SimConfig::default_for(Task::Potassium)).unwrap();
        let split = split_cohort(&ds, SplitKind::Dosage, None).unwrap();
        let hist = |d: &BehaviorDataset| {
            let mut h = [0usize; 4];
            for s in &d.samples {
                h[s.action_index] += 1;
            }
            h
        };
        let hb = hist(&split.behavior);
        let ht = hist(&split.target);
        assert_eq!(hb[3], 0, "behavior {hb:?}");
        assert_eq!(ht[0] + ht[1], 0, "target {ht:?}");
        assert!(ht[2] > 0 && ht[3] > 0);
    }

    #[test]
    fn uniform_policy_single_context_value() {
        let cfg = SimConfig {
            noise_sd: 0.0,
            ..SimConfig::default_for(Task::Potassium)
        };
        let model = cfg.outcome_model();
        let ctx = fixtures::context(3.0);
        // creatinine 1.1 → gain 1.1; labs 2.95, 3.17, 3.39, 3.83.
        let spec = Task::Potassium.reward_spec();
        let by_hand: f64 = [2.95, 3.17, 3.39, 3.83]
            .iter()
            .map(|x: &f64| {
                let z = (x - 3.5) / 2.5;
                if *x < 3.5 {
                    (-0.5 * z * z).exp()
                } else {
                    1.0
                }
            })
            .sum::<f64>()
            / 4.0;
        let policy = Policy::uniform(Task::Potassium.action_space(), FeatureSet::CONTEXT_ONLY);
        let contexts = [ctx.clone()];
        let v = true_value(
            &policy,
            &model,
            ContextSource::Fixed(&contexts),
            1,
            0,
            Execution::Sequential,
        )
        .unwrap();
        assert!((v - by_hand).abs() < 1e-12, "{v} vs {by_hand}");
        let _ = spec;
    }

    #[test]
    fn quadrature_matches_monte_carlo() {
        let cfg = SimConfig {
            noise_sd: 1.5,
            ..SimConfig::default_for(Task::Potassium)
        };
        let model = cfg.outcome_model();
        let mut ctx = fixtures::context(2.3);
        ctx.comorbidity_flag = true;
        ctx.serum_creatinine = 2.4;
        let spec = Task::Potassium.reward_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for action in 0..4 {
            let exact = model.expected_reward(&ctx, action).unwrap();
            let n = 1_000_000;
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..n {
                let r = spec.eval(model.observe(&ctx, action, &mut rng).unwrap());
                sum += r;
                sum_sq += r * r;
            }
            let mean = sum / n as f64;
            let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
            assert!(
                (exact - mean).abs() < 3.0 * se,
                "action {action}: {exact} vs {mean} ± {se}"
            );
        }
    }

    #[test]
    fn zero_noise_value_is_reward_of_expected_lab() {
        let cfg = SimConfig {
            n_patients: 50,
            noise_sd: 0.0,
            ..SimConfig::default_for(Task::Sodium)
        };
        let model = cfg.outcome_model();
        let ds = generate_cohort(&cfg).unwrap();
        let contexts = ds.contexts();
        let policy = Policy::point_mass(Task::Sodium.action_space(), FeatureSet::CONTEXT_ONLY, 3).unwrap();
        let v = true_value(
            &policy,
            &model,
            ContextSource::Fixed(&contexts),
            1,
            0,
            Execution::Sequential,
        )
        .unwrap();
        let spec = Task::Sodium.reward_spec();
        let direct: f64 = contexts
            .iter()
            .map(|c| noiseless_reward(&model, c, 3, &spec).unwrap())
            .sum::<f64>()
            / contexts.len() as f64;
        assert!((v - direct).abs() < 1e-14);
    }
}
