//! Discrete dosing policies and behavior cloning by multinomial logistic
//! regression.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bandit::{ActionSpace, BehaviorDataset, ClinicalContext};
use crate::error::{OpeError, Result};
use crate::features::{FeatureSet, Scaler};

/// Floor applied to propensities before they enter an importance ratio.
pub const PROPENSITY_FLOOR: f64 = 1e-3;

pub const POLICY_SCHEMA_VERSION: u32 = 1;

/// Anything that maps a context to a probability vector over actions.
pub trait ActionPolicy: Sync {
    fn n_actions(&self) -> usize;
    fn action_probs(&self, ctx: &ClinicalContext) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyModel {
    /// `weights[a]` holds the coefficients for action `a` over the
    /// standardized features followed by the intercept.
    Softmax {
        weights: Vec<Vec<f64>>,
    },
    PointMass {
        action: usize,
    },
}

/// Linear-softmax policy over standardized context features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    action_space: ActionSpace,
    features: FeatureSet,
    scaler: Scaler,
    model: PolicyModel,
}

#[derive(Serialize, Deserialize)]
struct PolicyDocument {
    schema_version: u32,
    policy: Policy,
}

impl Policy {
    pub fn from_weights(
        action_space: ActionSpace,
        features: FeatureSet,
        scaler: Scaler,
        weights: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let d = features.dim();
        if scaler.dim() != d {
            return Err(OpeError::DimensionMismatch {
                expected: d,
                got: scaler.dim(),
            });
        }
        if weights.len() != action_space.len() {
            return Err(OpeError::DimensionMismatch {
                expected: action_space.len(),
                got: weights.len(),
            });
        }
        if let Some(row) = weights.iter().find(|w| w.len() != d + 1) {
            return Err(OpeError::DimensionMismatch {
                expected: d + 1,
                got: row.len(),
            });
        }
        Ok(Policy {
            action_space,
            features,
            scaler,
            model: PolicyModel::Softmax { weights },
        })
    }

    /// Zero weights, hence uniform probabilities everywhere.
    pub fn uniform(action_space: ActionSpace, features: FeatureSet) -> Self {
        let d = features.dim();
        let weights = vec![vec![0.0; d + 1]; action_space.len()];
        Policy::from_weights(action_space, features, identity_scaler(d), weights)
            .expect("dimensions are consistent by construction")
    }

    pub fn point_mass(action_space: ActionSpace, features: FeatureSet, action: usize) -> Result<Self> {
        action_space.dose(action)?;
        Ok(Policy {
            scaler: identity_scaler(features.dim()),
            action_space,
            features,
            model: PolicyModel::PointMass { action },
        })
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.action_space
    }

    pub fn features(&self) -> FeatureSet {
        self.features
    }

    pub fn model(&self) -> &PolicyModel {
        &self.model
    }

    /// Unfloored action probabilities.
    pub fn prob(&self, ctx: &ClinicalContext) -> Result<Vec<f64>> {
        self.prob_from_features(&self.features.extract(ctx))
    }

    /// Action probabilities from a raw (unstandardized) feature vector.
    pub fn prob_from_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.scaler.transform(x)?;
        match &self.model {
            PolicyModel::PointMass { action } => {
                let mut p = vec![0.0; self.action_space.len()];
                p[*action] = 1.0;
                Ok(p)
            }
            PolicyModel::Softmax { weights } => {
                let scores: Vec<f64> = weights.iter().map(|w| linear_score(w, &z)).collect();
                Ok(softmax(&scores))
            }
        }
    }

    /// Probabilities floored at [`PROPENSITY_FLOOR`] and renormalized, for use
    /// in importance ratios.
    pub fn propensity(&self, ctx: &ClinicalContext) -> Result<Vec<f64>> {
        Ok(floor_probabilities(&self.prob(ctx)?, PROPENSITY_FLOOR))
    }

    /// Index of the most probable action (lowest index on ties).
    pub fn greedy_action(&self, ctx: &ClinicalContext) -> Result<usize> {
        Ok(argmax(&self.prob(ctx)?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&PolicyDocument {
            schema_version: POLICY_SCHEMA_VERSION,
            policy: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: PolicyDocument = serde_json::from_str(s)?;
        if doc.schema_version != POLICY_SCHEMA_VERSION {
            return Err(OpeError::InvalidInput(format!(
                "unsupported policy schema version {}",
                doc.schema_version
            )));
        }
        let p = doc.policy;
        let space = ActionSpace::from_parts(p.action_space.task(), p.action_space.dosages().to_vec())?;
        match p.model {
            PolicyModel::Softmax { weights } => Policy::from_weights(space, p.features, p.scaler, weights),
            PolicyModel::PointMass { action } => Policy::point_mass(space, p.features, action),
        }
    }
}

impl ActionPolicy for Policy {
    fn n_actions(&self) -> usize {
        self.action_space.len()
    }

    fn action_probs(&self, ctx: &ClinicalContext) -> Result<Vec<f64>> {
        self.prob(ctx)
    }
}

fn identity_scaler(d: usize) -> Scaler {
    Scaler {
        mean: vec![0.0; d],
        scale: vec![1.0; d],
    }
}

#[inline]
fn linear_score(w: &[f64], z: &[f64]) -> f64 {
    let d = z.len();
    w[..d].iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + w[d]
}

pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Raises every entry to at least `eps`, then renormalizes.
pub fn floor_probabilities(p: &[f64], eps: f64) -> Vec<f64> {
    let floored: Vec<f64> = p.iter().map(|v| v.max(eps)).collect();
    let total: f64 = floored.iter().sum();
    floored.into_iter().map(|v| v / total).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CloneConfig {
    pub train_frac: f64,
    pub seed: u64,
    pub l2: f64,
    pub features: FeatureSet,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for CloneConfig {
    fn default() -> Self {
        CloneConfig {
            train_frac: 0.8,
            seed: 0,
            l2: 1e-4,
            features: FeatureSet::WITH_BASELINE_LAB,
            max_iter: 10_000,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClonedPolicy {
    pub policy: Policy,
    pub validation_accuracy: f64,
    /// Set when the dataset contains a single action and a point-mass policy
    /// was returned instead of a fitted model.
    pub degenerate: bool,
    pub converged: bool,
    pub iterations: usize,
    pub n_train: usize,
    pub n_validation: usize,
}

/// Fits a multinomial logistic policy to the dataset's (context, action)
/// pairs and reports top-1 accuracy on a seeded held-out split.
pub fn clone_policy(dataset: &BehaviorDataset, config: &CloneConfig) -> Result<ClonedPolicy> {
    if !(config.train_frac > 0.0 && config.train_frac < 1.0) {
        return Err(OpeError::config("train_frac", "must lie strictly between 0 and 1"));
    }
    if config.l2.is_nan() || config.l2 <= 0.0 {
        return Err(OpeError::config("l2", "must be positive"));
    }
    if dataset.is_empty() {
        return Err(OpeError::Empty("behavior dataset"));
    }
    let space = dataset.action_space();
    let first = dataset.samples[0].action_index;
    if dataset.samples.iter().all(|s| s.action_index == first) {
        log::warn!("single-action dataset: returning a point-mass policy on action {first}");
        return Ok(ClonedPolicy {
            policy: Policy::point_mass(space, config.features, first)?,
            validation_accuracy: 1.0,
            degenerate: true,
            converged: true,
            iterations: 0,
            n_train: dataset.len(),
            n_validation: 0,
        });
    }
    let n = dataset.len();
    if n < 2 {
        return Err(OpeError::InvalidInput(
            "need at least two samples to clone a policy".into(),
        ));
    }

    // Canonical order before shuffling so the split depends only on the seed.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| dataset.samples[i].id);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    order.shuffle(&mut rng);
    let n_train = ((config.train_frac * n as f64).round() as usize).clamp(1, n - 1);
    let (train_idx, valid_idx) = order.split_at(n_train);

    let raw: Vec<Vec<f64>> = dataset
        .samples
        .iter()
        .map(|s| config.features.extract(&s.context))
        .collect();
    let d = config.features.dim();
    let scaler = Scaler::fit(train_idx.iter().map(|&i| raw[i].as_slice()), d)?;
    let design = |i: usize| -> Vec<f64> {
        let mut z = scaler.transform(&raw[i]).expect("dimension checked");
        z.push(1.0);
        z
    };
    let x_train: Vec<Vec<f64>> = train_idx.iter().map(|&i| design(i)).collect();
    let y_train: Vec<usize> = train_idx.iter().map(|&i| dataset.samples[i].action_index).collect();

    let fit = fit_multinomial(&x_train, &y_train, space.len(), config)?;
    if !fit.converged {
        log::warn!(
            "behavior cloning stopped after {} iterations without reaching gradient tolerance",
            fit.iterations
        );
    }
    let policy = Policy::from_weights(space, config.features, scaler, fit.weights)?;
    let correct = valid_idx
        .iter()
        .filter(|&&i| {
            let p = policy.prob_from_features(&raw[i]).expect("dimension checked");
            argmax(&p) == dataset.samples[i].action_index
        })
        .count();
    Ok(ClonedPolicy {
        policy,
        validation_accuracy: correct as f64 / valid_idx.len() as f64,
        degenerate: false,
        converged: fit.converged,
        iterations: fit.iterations,
        n_train,
        n_validation: valid_idx.len(),
    })
}

struct MultinomialFit {
    weights: Vec<Vec<f64>>,
    converged: bool,
    iterations: usize,
}

/// Minimizes mean negative log-likelihood + (l2/2)·‖W‖² by damped Newton.
fn fit_multinomial(x: &[Vec<f64>], y: &[usize], k: usize, config: &CloneConfig) -> Result<MultinomialFit> {
    let n = x.len();
    let d = x[0].len();
    let p_dim = k * d;
    let inv_n = 1.0 / n as f64;
    let mut theta = vec![0.0; p_dim];

    let objective = |theta: &[f64]| -> f64 {
        let mut nll = 0.0;
        for (row, &label) in x.iter().zip(y) {
            let scores: Vec<f64> = (0..k)
                .map(|a| theta[a * d..(a + 1) * d].iter().zip(row).map(|(w, v)| w * v).sum())
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
            nll += lse - scores[label];
        }
        nll * inv_n + 0.5 * config.l2 * theta.iter().map(|t| t * t).sum::<f64>()
    };

    let mut f = objective(&theta);
    for iter in 0..config.max_iter {
        let mut grad = vec![0.0; p_dim];
        let mut hess = DMatrix::<f64>::zeros(p_dim, p_dim);
        for (row, &label) in x.iter().zip(y) {
            let scores: Vec<f64> = (0..k)
                .map(|a| theta[a * d..(a + 1) * d].iter().zip(row).map(|(w, v)| w * v).sum())
                .collect();
            let p = softmax(&scores);
            for a in 0..k {
                let r = p[a] - if a == label { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[a * d + j] += r * row[j] * inv_n;
                }
                for b in a..k {
                    let c = if a == b { p[a] * (1.0 - p[a]) } else { -p[a] * p[b] } * inv_n;
                    if c == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        let cj = c * row[j];
                        for l in 0..d {
                            hess[(a * d + j, b * d + l)] += cj * row[l];
                        }
                    }
                }
            }
        }
        for (g, t) in grad.iter_mut().zip(&theta) {
            *g += config.l2 * t;
        }
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax < config.grad_tol {
            return Ok(MultinomialFit {
                weights: unflatten(&theta, k, d),
                converged: true,
                iterations: iter,
            });
        }
        // Only the upper block triangle was accumulated.
        for a in 0..k {
            for b in (a + 1)..k {
                for j in 0..d {
                    for l in 0..d {
                        hess[(b * d + l, a * d + j)] = hess[(a * d + j, b * d + l)];
                    }
                }
            }
        }
        for i in 0..p_dim {
            hess[(i, i)] += config.l2;
        }
        let g = DVector::from_vec(grad.clone());
        let step = match hess.cholesky() {
            Some(ch) => ch.solve(&g),
            None => g.clone(),
        };
        let slope: f64 = step.iter().zip(&grad).map(|(s, g)| s * g).sum();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate: Vec<f64> = theta.iter().zip(step.iter()).map(|(th, s)| th - t * s).collect();
            let fc = objective(&candidate);
            if fc <= f - 1e-4 * t * slope {
                theta = candidate;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No further decrease representable in floating point.
            return Ok(MultinomialFit {
                weights: unflatten(&theta, k, d),
                converged: gmax < config.grad_tol * 1e3,
                iterations: iter + 1,
            });
        }
    }
    Ok(MultinomialFit {
        weights: unflatten(&theta, k, d),
        converged: false,
        iterations: config.max_iter,
    })
}

fn unflatten(theta: &[f64], k: usize, d: usize) -> Vec<Vec<f64>> {
    (0..k).map(|a| theta[a * d..(a + 1) * d].to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandit::{fixtures, Sample, Task};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn zero_weights_are_uniform() {
        let p = Policy::uniform(Task::Potassium.action_space(), FeatureSet::CONTEXT_ONLY);
        let probs = p.prob(&fixtures::context(3.0)).unwrap();
        assert!(probs.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn point_mass_flooring() {
        let p = Policy::point_mass(Task::Potassium.action_space(), FeatureSet::CONTEXT_ONLY, 0).unwrap();
        let prop = p.propensity(&fixtures::context(3.0)).unwrap();
        let eps = PROPENSITY_FLOOR / (1.0 + 3.0 * PROPENSITY_FLOOR);
        assert!((prop[0] - (1.0 - 3.0 * eps)).abs() < 1e-15);
        for v in &prop[1..] {
            assert!((v - eps).abs() < 1e-15);
        }
        assert!((prop.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn golden_softmax_vector() {
        // Scores for the fixture below are [0.5, -0.5, 1.0, 2.0]; the expected
        // vector was computed independently as exp(s) / sum(exp(s)).
        let space = Task::Potassium.action_space();
        let scaler = Scaler {
            mean: vec![0.0; 15],
            scale: vec![1.0; 15],
        };
        let mut weights = vec![vec![0.0; 16]; 4];
        weights[0][15] = 0.5;
        weights[1][15] = -0.5;
        weights[2][0] = 0.01; // age 100 → +1.0
        weights[3][9] = 2.0; // creatinine 1.0 → +2.0
        let p = Policy::from_weights(space, FeatureSet::CONTEXT_ONLY, scaler, weights).unwrap();
        let mut ctx = fixtures::context(3.0);
        ctx.age = 100.0;
        ctx.serum_creatinine = 1.0;
        let probs = p.prob(&ctx).unwrap();
        let expected = [0.133_363_744_1, 0.049_061_779_7, 0.219_879_641_7, 0.597_694_834_5];
        for (a, b) in probs.iter().zip(expected) {
            assert!((a - b).abs() < 1e-9, "{probs:?}");
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = Policy::uniform(Task::Potassium.action_space(), FeatureSet::CONTEXT_ONLY);
        assert!(matches!(
            p.prob_from_features(&[1.0; 16]),
            Err(OpeError::DimensionMismatch { expected: 15, got: 16 })
        ));
        assert!(Policy::from_weights(
            Task::Potassium.action_space(),
            FeatureSet::CONTEXT_ONLY,
            Scaler {
                mean: vec![0.0; 15],
                scale: vec![1.0; 15]
            },
            vec![vec![0.0; 16]; 3],
        )
        .is_err());
    }

    #[test]
    fn single_action_dataset_is_degenerate() {
        let ds = fixtures::dataset(Task::Potassium, &[(2, 4.0), (2, 4.1), (2, 3.9)]);
        let out = clone_policy(&ds, &CloneConfig::default()).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.validation_accuracy, 1.0);
        assert_eq!(out.policy.model(), &PolicyModel::PointMass { action: 2 });
    }

    #[test]
    fn json_round_trip() {
        let p = Policy::uniform(Task::Sodium.action_space(), FeatureSet::WITH_BASELINE_LAB);
        let s = p.to_json().unwrap();
        assert_eq!(Policy::from_json(&s).unwrap(), p);
        let bad = s.replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(Policy::from_json(&bad).is_err());
    }

    #[test]
    fn recovers_known_logistic_generator() {
        // Two informative features (age, creatinine), two used actions.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = Task::Potassium.reward_spec();
        let true_score = |age: f64, cr: f64| 1.5 * (age - 60.0) / 15.0 - 2.0 * (cr - 1.2) / 0.4;
        let mut samples = Vec::new();
        for i in 0..10_000u64 {
            let mut ctx = fixtures::context(3.4);
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            ctx.age = 60.0 + 15.0 * z1;
            ctx.serum_creatinine = 1.2 + 0.4 * z2;
            let p1 = 1.0 / (1.0 + (-true_score(ctx.age, ctx.serum_creatinine)).exp());
            let a = if rng.random::<f64>() < p1 { 1 } else { 0 };
            samples.push(Sample::new(i, ctx, a, 4.0, &spec).unwrap());
        }
        let ds = BehaviorDataset::new(Task::Potassium, samples).unwrap();
        let out = clone_policy(&ds, &CloneConfig::default()).unwrap();
        assert!(out.converged);
        for (age, cr) in [(45.0, 1.0), (60.0, 1.2), (75.0, 1.6), (50.0, 0.8)] {
            let mut ctx = fixtures::context(3.4);
            ctx.age = age;
            ctx.serum_creatinine = cr;
            let p = out.policy.prob(&ctx).unwrap();
            let p1 = 1.0 / (1.0 + (-true_score(age, cr)).exp());
            assert!((p[1] - p1).abs() < 0.05, "age {age} cr {cr}: {} vs {p1}", p[1]);
            assert!(p[2] < 0.01 && p[3] < 0.01);
        }
    }

    #[test]
    fn cloning_is_deterministic() {
        let rows: Vec<(usize, f64)> = (0..60).map(|i| (i % 3, 4.0)).collect();
        let mut ds = fixtures::dataset(Task::Potassium, &rows);
        for (i, s) in ds.samples.iter_mut().enumerate() {
            s.context.age = 30.0 + (i % 3) as f64 * 20.0 + (i as f64 * 0.37).sin();
        }
        let a = clone_policy(&ds, &CloneConfig::default()).unwrap();
        let b = clone_policy(&ds, &CloneConfig::default()).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.n_train, 48);
        assert_eq!(a.n_validation, 12);
    }
}
