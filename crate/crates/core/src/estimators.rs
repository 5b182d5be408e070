//! Off-policy value estimators: direct method with a linear reward model,
//! the annotation-augmented direct method, and importance sampling.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::annotate::{Annotation, AnnotationSet};
use crate::bandit::{BehaviorDataset, ClinicalContext, Sample};
use crate::error::{OpeError, Result};
use crate::features::{FeatureSet, Scaler};
use crate::policy::{floor_probabilities, ActionPolicy, PROPENSITY_FLOOR};

/// Penalty added to the normal equations when the design is rank deficient.
pub const RIDGE_LAMBDA: f64 = 1e-6;

const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Design {
    /// Standardized features, dummy-coded action (action 0 is the
    /// reference level) and an intercept; optionally feature × action
    /// interactions.
    Linear { interactions: bool },
    /// One indicator per (distinct context, action) cell. Every cell gets
    /// its own mean, so the fit is exact on tabulated rewards.
    Saturated,
}

impl Default for Design {
    fn default() -> Self {
        Design::Linear { interactions: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ridge {
    /// Add [`RIDGE_LAMBDA`] only when the design is rank deficient.
    #[default]
    Auto,
    /// Rank-deficient designs are an error.
    Off,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardModelConfig {
    pub design: Design,
    pub features: FeatureSet,
    pub ridge: Ridge,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        RewardModelConfig {
            design: Design::default(),
            features: FeatureSet::CONTEXT_ONLY,
            ridge: Ridge::Auto,
        }
    }
}

/// One regression row. `weight` multiplies the row's contribution to the
/// normal equations (used for bootstrap multiplicities).
#[derive(Debug, Clone, Copy)]
pub struct Row<'a> {
    pub context: &'a ClinicalContext,
    pub action: usize,
    pub reward: f64,
    pub weight: f64,
}

pub trait RewardPredictor: Sync {
    fn n_actions(&self) -> usize;

    /// Unclipped prediction.
    fn predict(&self, ctx: &ClinicalContext, action: usize) -> Result<f64>;

    fn predict_all(&self, ctx: &ClinicalContext) -> Result<Vec<f64>> {
        (0..self.n_actions()).map(|a| self.predict(ctx, a)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    design: Design,
    features: FeatureSet,
    n_actions: usize,
    scaler: Option<Scaler>,
    /// Saturated design only: sorted feature bit patterns, one per cell.
    cells: Vec<Vec<u64>>,
    weights: Vec<f64>,
    ridge_used: Option<f64>,
    n_rows: usize,
}

fn cell_key(features: FeatureSet, ctx: &ClinicalContext) -> Vec<u64> {
    features.extract(ctx).iter().map(|v| v.to_bits()).collect()
}

impl RewardModel {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn design(&self) -> Design {
        self.design
    }

    /// Ridge penalty that was applied, if any.
    pub fn ridge_used(&self) -> Option<f64> {
        self.ridge_used
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_coefficients(&self) -> usize {
        self.weights.len()
    }

    fn linear_row(&self, ctx: &ClinicalContext, action: usize, out: &mut Vec<f64>) -> Result<()> {
        let scaler = self.scaler.as_ref().expect("linear models carry a scaler");
        let z = scaler.transform(&self.features.extract(ctx))?;
        linear_columns(&z, action, self.n_actions, self.design, out);
        Ok(())
    }
}

fn n_linear_columns(d: usize, n_actions: usize, design: Design) -> usize {
    let k = n_actions - 1;
    match design {
        Design::Linear { interactions: false } => d + k + 1,
        Design::Linear { interactions: true } => d + k + 1 + d * k,
        Design::Saturated => unreachable!(),
    }
}

fn linear_columns(z: &[f64], action: usize, n_actions: usize, design: Design, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(z);
    for a in 1..n_actions {
        out.push(if a == action { 1.0 } else { 0.0 });
    }
    out.push(1.0);
    if let Design::Linear { interactions: true } = design {
        for a in 1..n_actions {
            let on = if a == action { 1.0 } else { 0.0 };
            out.extend(z.iter().map(|v| v * on));
        }
    }
}

impl RewardPredictor for RewardModel {
    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn predict(&self, ctx: &ClinicalContext, action: usize) -> Result<f64> {
        if action >= self.n_actions {
            return Err(OpeError::InvalidInput(format!("action index {action} out of range")));
        }
        match self.design {
            Design::Saturated => {
                let key = cell_key(self.features, ctx);
                let cell = self.cells.binary_search(&key).map_err(|_| {
                    OpeError::InvalidInput("context was not seen when fitting the saturated model".into())
                })?;
                Ok(self.weights[cell * self.n_actions + action])
            }
            Design::Linear { .. } => {
                let mut x = Vec::with_capacity(self.weights.len());
                self.linear_row(ctx, action, &mut x)?;
                Ok(x.iter().zip(&self.weights).map(|(a, b)| a * b).sum())
            }
        }
    }
}

/// Regression rows for a dataset and optional annotations, in canonical
/// order: samples by id, then annotations by (sample, action, source).
pub fn canonical_rows<'a>(
    dataset: &'a BehaviorDataset,
    annotations: Option<&'a AnnotationSet>,
) -> Result<Vec<Row<'a>>> {
    let mut samples: Vec<&Sample> = dataset.samples.iter().collect();
    samples.sort_by_key(|s| s.id);
    let mut rows: Vec<Row<'a>> = samples
        .iter()
        .map(|s| Row {
            context: &s.context,
            action: s.action_index,
            reward: s.reward,
            weight: 1.0,
        })
        .collect();
    if let Some(set) = annotations {
        set.check_against(dataset)?;
        let by_id: HashMap<u64, &Sample> = dataset.samples.iter().map(|s| (s.id, s)).collect();
        let mut anns: Vec<&Annotation> = set.iter().collect();
        anns.sort_by(|a, b| {
            (a.sample_id, a.action_index, &a.source_id).cmp(&(b.sample_id, b.action_index, &b.source_id))
        });
        rows.extend(anns.into_iter().map(|a| Row {
            context: &by_id[&a.sample_id].context,
            action: a.action_index,
            reward: a.reward,
            weight: 1.0,
        }));
    }
    Ok(rows)
}

/// Least-squares reward model on the union of behavior samples and
/// annotations, every row weighted equally.
pub fn fit_reward_model(
    dataset: &BehaviorDataset,
    annotations: Option<&AnnotationSet>,
    config: &RewardModelConfig,
) -> Result<RewardModel> {
    let rows = canonical_rows(dataset, annotations)?;
    // The scaler sees each patient once, however many rows it contributes.
    let n_base = dataset.len();
    fit_rows(&rows, &rows[..n_base], dataset.action_space().len(), config)
}

/// Fits on explicit rows. `scaler_rows` determine the feature
/// standardization (weights act as multiplicities there too). Rows are
/// accumulated in the order given.
pub fn fit_rows(
    rows: &[Row<'_>],
    scaler_rows: &[Row<'_>],
    n_actions: usize,
    config: &RewardModelConfig,
) -> Result<RewardModel> {
    if rows.is_empty() {
        return Err(OpeError::Empty("regression rows"));
    }
    if n_actions < 1 {
        return Err(OpeError::Empty("action space"));
    }
    for r in rows {
        if r.action >= n_actions {
            return Err(OpeError::InvalidInput(format!("row action {} out of range", r.action)));
        }
        if !(r.weight >= 0.0 && r.weight.is_finite()) || !r.reward.is_finite() {
            return Err(OpeError::InvalidInput(
                "row reward and weight must be finite, weight >= 0".into(),
            ));
        }
    }
    let features = config.features;
    let n_rows = rows.iter().filter(|r| r.weight > 0.0).count();

    let (scaler, cells, p) = match config.design {
        Design::Saturated => {
            let mut cells: Vec<Vec<u64>> = rows
                .iter()
                .filter(|r| r.weight > 0.0)
                .map(|r| cell_key(features, r.context))
                .collect();
            cells.sort_unstable();
            cells.dedup();
            let p = cells.len() * n_actions;
            (None, cells, p)
        }
        Design::Linear { .. } => {
            let extracted: Vec<(Vec<f64>, usize)> = scaler_rows
                .iter()
                .filter(|r| r.weight > 0.0)
                .map(|r| (features.extract(r.context), r.weight.round() as usize))
                .collect();
            let scaler = Scaler::fit(
                extracted
                    .iter()
                    .flat_map(|(x, m)| std::iter::repeat_n(x.as_slice(), (*m).max(1))),
                features.dim(),
            )?;
            (
                Some(scaler),
                Vec::new(),
                n_linear_columns(features.dim(), n_actions, config.design),
            )
        }
    };

    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    match config.design {
        Design::Saturated => {
            // Indicator columns: the normal equations are diagonal.
            for r in rows.iter().filter(|r| r.weight > 0.0) {
                let cell = cells
                    .binary_search(&cell_key(features, r.context))
                    .expect("cell collected above");
                let j = cell * n_actions + r.action;
                xtx[(j, j)] += r.weight;
                xty[j] += r.weight * r.reward;
            }
        }
        Design::Linear { .. } => {
            let scaler = scaler.as_ref().expect("linear design has a scaler");
            let mut x = Vec::with_capacity(p);
            for r in rows.iter().filter(|r| r.weight > 0.0) {
                let z = scaler.transform(&features.extract(r.context))?;
                linear_columns(&z, r.action, n_actions, config.design, &mut x);
                for i in 0..p {
                    let wi = r.weight * x[i];
                    if wi == 0.0 {
                        continue;
                    }
                    xty[i] += wi * r.reward;
                    for j in i..p {
                        xtx[(i, j)] += wi * x[j];
                    }
                }
            }
            for i in 0..p {
                for j in 0..i {
                    xtx[(i, j)] = xtx[(j, i)];
                }
            }
        }
    }

    if config.design == Design::Saturated {
        // Diagonal system: each observed column is its cell mean, empty
        // columns take the minimum-norm value 0.
        let empty = (0..p).filter(|&j| xtx[(j, j)] == 0.0).count();
        let lambda = match config.ridge {
            Ridge::Fixed(l) if l >= 0.0 && l.is_finite() => (l > 0.0).then_some(l),
            Ridge::Fixed(l) => {
                return Err(OpeError::config(
                    "ridge",
                    format!("penalty must be finite and >= 0, got {l}"),
                ))
            }
            Ridge::Off if empty > 0 => {
                return Err(OpeError::RankDeficient {
                    rank: p - empty,
                    cols: p,
                })
            }
            _ => None,
        };
        let l = lambda.unwrap_or(0.0);
        let weights = (0..p)
            .map(|j| {
                let d = xtx[(j, j)] + l;
                if d > 0.0 {
                    xty[j] / d
                } else {
                    0.0
                }
            })
            .collect();
        return Ok(RewardModel {
            design: config.design,
            features,
            n_actions,
            scaler,
            cells,
            weights,
            ridge_used: lambda,
            n_rows,
        });
    }

    let rank = numerical_rank(&xtx);
    let lambda = match config.ridge {
        Ridge::Fixed(l) if l >= 0.0 && l.is_finite() => (l > 0.0).then_some(l),
        Ridge::Fixed(l) => {
            return Err(OpeError::config(
                "ridge",
                format!("penalty must be finite and >= 0, got {l}"),
            ))
        }
        _ if rank == p => None,
        Ridge::Off => return Err(OpeError::RankDeficient { rank, cols: p }),
        Ridge::Auto => {
            log::info!("reward design has rank {rank} of {p} columns; adding ridge penalty {RIDGE_LAMBDA}");
            Some(RIDGE_LAMBDA)
        }
    };
    if let Some(l) = lambda {
        for i in 0..p {
            xtx[(i, i)] += l;
        }
    }
    let w = solve_spd(xtx, &xty)?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(OpeError::Numerical("reward model coefficients are not finite".into()));
    }
    Ok(RewardModel {
        design: config.design,
        features,
        n_actions,
        scaler,
        cells,
        weights: w.iter().copied().collect(),
        ridge_used: lambda,
        n_rows,
    })
}

fn numerical_rank(xtx: &DMatrix<f64>) -> usize {
    if xtx.nrows() == 0 {
        return 0;
    }
    let eig = SymmetricEigen::new(xtx.clone()).eigenvalues;
    let max = eig.iter().copied().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return 0;
    }
    eig.iter().filter(|&&v| v > RANK_TOL * max).count()
}

fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    a.lu()
        .solve(b)
        .ok_or_else(|| OpeError::Numerical("normal equations are singular".into()))
}

/// Direct-method value: the mean over `contexts` of
/// `Σ_a π(a|s) clip(R̂(s, a), 0, 1)`.
pub fn dm_value<P, M>(policy: &P, contexts: &[ClinicalContext], model: &M) -> Result<f64>
where
    P: ActionPolicy + ?Sized,
    M: RewardPredictor + ?Sized,
{
    dm_value_weighted(policy, contexts, None, model)
}

/// As [`dm_value`] with a non-negative weight per context.
pub fn dm_value_weighted<P, M>(
    policy: &P,
    contexts: &[ClinicalContext],
    weights: Option<&[f64]>,
    model: &M,
) -> Result<f64>
where
    P: ActionPolicy + ?Sized,
    M: RewardPredictor + ?Sized,
{
    if contexts.is_empty() {
        return Err(OpeError::Empty("contexts"));
    }
    if let Some(w) = weights {
        if w.len() != contexts.len() {
            return Err(OpeError::LengthMismatch(w.len(), contexts.len()));
        }
    }
    if policy.n_actions() != model.n_actions() {
        return Err(OpeError::DimensionMismatch {
            expected: model.n_actions(),
            got: policy.n_actions(),
        });
    }
    let mut total = 0.0;
    let mut mass = 0.0;
    for (i, ctx) in contexts.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let probs = policy.action_probs(ctx)?;
        let preds = model.predict_all(ctx)?;
        let v: f64 = probs.iter().zip(&preds).map(|(p, r)| p * r.clamp(0.0, 1.0)).sum();
        total += w * v;
        mass += w;
    }
    if mass <= 0.0 {
        return Err(OpeError::Empty("context weights"));
    }
    Ok(total / mass)
}

/// Direct method with the reward model fit on behavior samples plus
/// annotations.
pub fn dm_plus_value<P: ActionPolicy + ?Sized>(
    policy: &P,
    contexts: &[ClinicalContext],
    dataset: &BehaviorDataset,
    annotations: &AnnotationSet,
    config: &RewardModelConfig,
) -> Result<f64> {
    let model = fit_reward_model(dataset, Some(annotations), config)?;
    dm_value(policy, contexts, &model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsEstimate {
    pub value: f64,
    /// Kish effective sample size of the importance weights.
    pub effective_sample_size: f64,
    pub max_weight: f64,
    pub mean_weight: f64,
    /// Set when the weights indicate poor overlap between the policies.
    pub high_variance: bool,
}

/// Inverse-propensity estimate with both policies' probabilities floored.
/// Flagged as high variance when the effective sample size falls below a
/// tenth of the data or the mean weight is far from one.
pub fn is_value<E, B>(target: &E, behavior: &B, dataset: &BehaviorDataset) -> Result<IsEstimate>
where
    E: ActionPolicy + ?Sized,
    B: ActionPolicy + ?Sized,
{
    if dataset.is_empty() {
        return Err(OpeError::Empty("behavior dataset"));
    }
    if target.n_actions() != behavior.n_actions() {
        return Err(OpeError::DimensionMismatch {
            expected: behavior.n_actions(),
            got: target.n_actions(),
        });
    }
    let mut samples: Vec<&Sample> = dataset.samples.iter().collect();
    samples.sort_by_key(|s| s.id);
    is_value_weighted(target, behavior, &samples, None)
}

/// As [`is_value`] over explicit samples, each counted `weights[i]` times.
pub fn is_value_weighted<E, B>(
    target: &E,
    behavior: &B,
    samples: &[&Sample],
    weights: Option<&[f64]>,
) -> Result<IsEstimate>
where
    E: ActionPolicy + ?Sized,
    B: ActionPolicy + ?Sized,
{
    if let Some(w) = weights {
        if w.len() != samples.len() {
            return Err(OpeError::LengthMismatch(w.len(), samples.len()));
        }
    }
    let mut n = 0.0;
    let mut sum_wr = 0.0;
    let mut sum_w = 0.0;
    let mut sum_w2 = 0.0;
    let mut max_w = 0.0_f64;
    for (i, s) in samples.iter().enumerate() {
        let m = weights.map_or(1.0, |w| w[i]);
        if m == 0.0 {
            continue;
        }
        let pe = floor_probabilities(&target.action_probs(&s.context)?, PROPENSITY_FLOOR);
        let pb = floor_probabilities(&behavior.action_probs(&s.context)?, PROPENSITY_FLOOR);
        let w = pe[s.action_index] / pb[s.action_index];
        n += m;
        sum_wr += m * w * s.reward;
        sum_w += m * w;
        sum_w2 += m * w * w;
        max_w = max_w.max(w);
    }
    if n <= 0.0 {
        return Err(OpeError::Empty("behavior samples"));
    }
    let ess = if sum_w2 > 0.0 { sum_w * sum_w / sum_w2 } else { 0.0 };
    let mean_w = sum_w / n;
    Ok(IsEstimate {
        value: sum_wr / n,
        effective_sample_size: ess,
        max_weight: max_w,
        mean_weight: mean_w,
        high_variance: ess < 0.1 * n || (mean_w - 1.0).abs() > 0.5,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandit::{fixtures, Task};
    use crate::policy::Policy;

    struct Fixed(Vec<f64>);

    impl ActionPolicy for Fixed {
        fn n_actions(&self) -> usize {
            self.0.len()
        }
        fn action_probs(&self, _ctx: &ClinicalContext) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    struct Table(Vec<f64>);

    impl RewardPredictor for Table {
        fn n_actions(&self) -> usize {
            self.0.len()
        }
        fn predict(&self, _ctx: &ClinicalContext, a: usize) -> Result<f64> {
            Ok(self.0[a])
        }
    }

    #[test]
    fn dm_hand_enumeration() {
        let ctx = [fixtures::context(4.0)];
        let v = dm_value(&Fixed(vec![0.25, 0.75]), &ctx, &Table(vec![0.4, 0.8])).unwrap();
        assert!((v - 0.7).abs() < 1e-15);
        let c = dm_value(&Fixed(vec![0.1, 0.2, 0.7]), &ctx, &Table(vec![0.3; 3])).unwrap();
        assert!((c - 0.3).abs() < 1e-15);
        // Clipping at the estimator.
        let clipped = dm_value(&Fixed(vec![0.5, 0.5]), &ctx, &Table(vec![-0.2, 1.4])).unwrap();
        assert!((clipped - 0.5).abs() < 1e-15);
        assert!(matches!(
            dm_value(&Fixed(vec![1.0]), &[], &Table(vec![0.0])),
            Err(OpeError::Empty(_))
        ));
    }

    #[test]
    fn is_three_sample_fixture() {
        // Behavior (0.5, 0.25, 0.25, 0), target (0.25, 0.25, 0.5, 0); the
        // zero entries are floored and both vectors renormalized.
        let ds = fixtures::dataset(Task::Potassium, &[(0, 3.0), (1, 4.0), (2, 5.5)]);
        let b = Fixed(vec![0.5, 0.25, 0.25, 0.0]);
        let e = Fixed(vec![0.25, 0.25, 0.5, 0.0]);
        let est = is_value(&e, &b, &ds).unwrap();
        let z = 1.0 + PROPENSITY_FLOOR;
        let w = [(0.25 / z) / (0.5 / z), 1.0, (0.5 / z) / (0.25 / z)];
        let r: Vec<f64> = ds.samples.iter().map(|s| s.reward).collect();
        let expected = (w[0] * r[0] + w[1] * r[1] + w[2] * r[2]) / 3.0;
        assert!((est.value - expected).abs() < 1e-12);
        let same = is_value(&b, &b, &ds).unwrap();
        assert!((same.value - crate::bandit::policy_value_empirical(&ds).unwrap()).abs() < 1e-12);
        assert!(!same.high_variance);
    }

    #[test]
    fn is_flags_unsupported_point_mass() {
        let ds = fixtures::dataset(Task::Potassium, &[(0, 3.0), (1, 4.0), (0, 3.5), (1, 3.9)]);
        let b = Fixed(vec![0.5, 0.5, 0.0, 0.0]);
        let e = Policy::point_mass(Task::Potassium.action_space(), FeatureSet::CONTEXT_ONLY, 3).unwrap();
        assert!(is_value(&e, &b, &ds).unwrap().high_variance);
    }

    #[test]
    fn rank_deficient_design() {
        // Every sample shares one context, so the feature columns are all
        // constant after standardization.
        let ds = fixtures::dataset(Task::Potassium, &[(0, 3.0), (1, 4.0), (2, 4.4), (3, 5.0)]);
        let off = RewardModelConfig {
            ridge: Ridge::Off,
            ..Default::default()
        };
        assert!(matches!(
            fit_reward_model(&ds, None, &off),
            Err(OpeError::RankDeficient { .. })
        ));
        let auto = fit_reward_model(&ds, None, &RewardModelConfig::default()).unwrap();
        assert_eq!(auto.ridge_used(), Some(RIDGE_LAMBDA));
        let ctx = &ds.samples[0].context;
        for s in &ds.samples {
            assert!((auto.predict(ctx, s.action_index).unwrap() - s.reward).abs() < 1e-5);
        }
    }

    #[test]
    fn saturated_model_returns_cell_means() {
        let ds = fixtures::dataset(Task::Potassium, &[(0, 3.0), (0, 3.2), (2, 4.0)]);
        let cfg = RewardModelConfig {
            design: Design::Saturated,
            ..Default::default()
        };
        let m = fit_reward_model(&ds, None, &cfg).unwrap();
        let ctx = &ds.samples[0].context;
        let mean0 = (ds.samples[0].reward + ds.samples[1].reward) / 2.0;
        assert!((m.predict(ctx, 0).unwrap() - mean0).abs() < 1e-15);
        assert_eq!(m.predict(ctx, 2).unwrap(), ds.samples[2].reward);
        assert_eq!(m.predict(ctx, 1).unwrap(), 0.0);
        assert_eq!(m.ridge_used(), None);
        let off = RewardModelConfig {
            ridge: Ridge::Off,
            ..cfg
        };
        assert!(matches!(
            fit_reward_model(&ds, None, &off),
            Err(OpeError::RankDeficient { .. })
        ));
        let mut unseen = fixtures::context(3.4);
        unseen.age = 30.0;
        assert!(m.predict(&unseen, 0).is_err());
    }
}
