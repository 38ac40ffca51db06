//! Linear Bradley–Terry preference models, linear scalarization weights and
//! the accuracy metrics built on them.
//!
//! A model scores a response as `s(x) = θ · ψ(φ(x)) + b`, where `ψ` is a
//! [`FeatureMap`]. Pairwise likelihood only sees score differences, so the
//! bias cancels and is kept at zero.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ComparisonRecord, Label, Target};
use crate::error::{Error, Result};
use crate::logistic::{fit_logistic, SolverConfig};
use crate::rng;
use crate::scalarization::CheckedSpec;
use crate::world::{dot, ResponseSpace, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureMap {
    Identity,
    /// Linear projection to fewer features (`rows` is `d' × d`).
    Projection { rows: Vec<Vec<f64>> },
    /// `tanh(W φ)`, a nonlinear lift for misspecification studies.
    TanhLift { rows: Vec<Vec<f64>> },
}

impl FeatureMap {
    /// Random Gaussian projection to `out_dim` features, entries `N(0, 1/d)`.
    pub fn random_projection(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        FeatureMap::Projection {
            rows: gaussian_rows(in_dim, out_dim, seed, "projection"),
        }
    }

    pub fn random_tanh_lift(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        FeatureMap::TanhLift {
            rows: gaussian_rows(in_dim, out_dim, seed, "tanh-lift"),
        }
    }

    pub fn apply(&self, phi: &[f64]) -> Vec<f64> {
        match self {
            FeatureMap::Identity => phi.to_vec(),
            FeatureMap::Projection { rows } => rows.iter().map(|r| dot(r, phi)).collect(),
            FeatureMap::TanhLift { rows } => rows.iter().map(|r| dot(r, phi).tanh()).collect(),
        }
    }

    pub fn output_dim(&self, in_dim: usize) -> usize {
        match self {
            FeatureMap::Identity => in_dim,
            FeatureMap::Projection { rows } | FeatureMap::TanhLift { rows } => rows.len(),
        }
    }
}

fn gaussian_rows(in_dim: usize, out_dim: usize, seed: u64, tag: &str) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, tag, 0);
    let scale = 1.0 / (in_dim as f64).sqrt();
    (0..out_dim)
        .map(|_| {
            (0..in_dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub iterations: usize,
    pub final_loss: f64,
    pub grad_norm: f64,
    pub regularization: f64,
    pub n_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceModel {
    pub target: Target,
    pub theta_hat: Vec<f64>,
    pub bias: f64,
    pub feature_map: FeatureMap,
    pub calibration: Option<Calibration>,
    pub fit_meta: FitMeta,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    #[serde(flatten)]
    pub solver: SolverConfig,
}

/// Pairwise design rows `ψ(A) - ψ(B)` and soft targets; unlabeled records
/// are skipped.
fn pair_design(
    records: &[ComparisonRecord],
    space: &ResponseSpace,
    map: &FeatureMap,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut x = Vec::with_capacity(records.len());
    let mut t = Vec::with_capacity(records.len());
    for rec in records {
        let Some(label) = rec.label else { continue };
        let (p, a, b) = rec.synthetic_pair().ok_or_else(|| {
            Error::Config(format!("record {} does not reference the synthetic space", rec.pair_id))
        })?;
        space.check(p, a)?;
        space.check(p, b)?;
        let fa = map.apply(space.phi(p, a));
        let fb = map.apply(space.phi(p, b));
        x.push(fa.iter().zip(&fb).map(|(u, v)| u - v).collect());
        t.push(label.target());
    }
    Ok((x, t))
}

pub fn fit_pm(
    records: &[ComparisonRecord],
    space: &ResponseSpace,
    feature_map: &FeatureMap,
    config: &FitConfig,
) -> Result<PreferenceModel> {
    let first = records.first().ok_or(Error::Empty("preference dataset"))?;
    let target = first.target.clone();
    if records.iter().any(|r| r.target != target) {
        return Err(Error::Config("records mix several targets".into()));
    }
    let (x, t) = pair_design(records, space, feature_map)?;
    if x.len() < 2 {
        return Err(Error::Empty("preference dataset (need at least 2 labeled records)"));
    }
    let has_a = t.iter().any(|&v| v > 0.5);
    let has_b = t.iter().any(|&v| v < 0.5);
    if config.solver.l2 <= 0.0 && !(has_a && has_b) {
        return Err(Error::Degenerate(
            "only one label present and no regularization".into(),
        ));
    }
    let fit = fit_logistic(&x, &t, &config.solver)?;
    Ok(PreferenceModel {
        target,
        theta_hat: fit.coef,
        bias: 0.0,
        feature_map: feature_map.clone(),
        calibration: None,
        fit_meta: FitMeta {
            iterations: fit.iterations,
            final_loss: fit.loss,
            grad_norm: fit.grad_norm,
            regularization: config.solver.l2,
            n_records: x.len(),
        },
    })
}

impl PreferenceModel {
    /// Error-free scorer for one principle: `θ = Θ_i`, calibrated with the
    /// population moments of `g_i` under the feature distribution.
    pub fn oracle(world: &World, principle: usize, name: &str) -> Self {
        PreferenceModel {
            target: Target::Principle(name.to_string()),
            theta_hat: world.principle_params[principle].clone(),
            bias: 0.0,
            feature_map: FeatureMap::Identity,
            calibration: Some(Calibration {
                mean: 0.0,
                std: world.config.feature_scale,
            }),
            fit_meta: FitMeta {
                iterations: 0,
                final_loss: 0.0,
                grad_norm: 0.0,
                regularization: 0.0,
                n_records: 0,
            },
        }
    }

    pub fn raw_score_features(&self, phi: &[f64]) -> f64 {
        dot(&self.theta_hat, &self.feature_map.apply(phi)) + self.bias
    }

    pub fn standardized_score_features(&self, phi: &[f64]) -> Result<f64> {
        let c = self
            .calibration
            .ok_or_else(|| Error::Uncalibrated(self.target.to_string()))?;
        Ok((self.raw_score_features(phi) - c.mean) / c.std)
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibration.is_some()
    }

    /// Standardizes with the mean and population std of raw scores over every
    /// response appearing in `records`.
    pub fn calibrate(&mut self, space: &ResponseSpace, records: &[ComparisonRecord]) -> Result<()> {
        let mut scores = Vec::with_capacity(2 * records.len());
        for rec in records {
            let (p, a, b) = rec.synthetic_pair().ok_or_else(|| {
                Error::Config(format!("record {} does not reference the synthetic space", rec.pair_id))
            })?;
            scores.push(self.raw_score_features(space.phi(p, a)));
            scores.push(self.raw_score_features(space.phi(p, b)));
        }
        if scores.is_empty() {
            return Err(Error::Empty("calibration split"));
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(std > 1e-12) {
            return Err(Error::Degenerate(format!(
                "{} scores are constant on the calibration split",
                self.target
            )));
        }
        self.calibration = Some(Calibration { mean, std });
        Ok(())
    }
}

pub fn score(
    pm: &PreferenceModel,
    space: &ResponseSpace,
    prompt: usize,
    response: usize,
    standardized: bool,
) -> Result<f64> {
    space.check(prompt, response)?;
    let phi = space.phi(prompt, response);
    if standardized {
        pm.standardized_score_features(phi)
    } else {
        Ok(pm.raw_score_features(phi))
    }
}

/// Agreement between predicted and recorded preferences. Ties in the
/// prediction count one half; TIE-labeled and unlabeled records are skipped.
pub fn accuracy_by<F>(records: &[ComparisonRecord], mut predict: F) -> Result<f64>
where
    F: FnMut(&ComparisonRecord) -> Result<f64>,
{
    let mut hits = 0.0;
    let mut n = 0usize;
    for rec in records {
        let want = match rec.label {
            Some(Label::A) => 1.0,
            Some(Label::B) => -1.0,
            _ => continue,
        };
        let margin = predict(rec)?;
        n += 1;
        if margin == 0.0 {
            hits += 0.5;
        } else if margin * want > 0.0 {
            hits += 1.0;
        }
    }
    if n == 0 {
        return Err(Error::Empty("test set (no A/B-labeled records)"));
    }
    Ok(hits / n as f64)
}

fn pair_of(rec: &ComparisonRecord) -> Result<(usize, usize, usize)> {
    rec.synthetic_pair().ok_or_else(|| {
        Error::Config(format!("record {} does not reference the synthetic space", rec.pair_id))
    })
}

pub fn pm_accuracy(pm: &PreferenceModel, space: &ResponseSpace, records: &[ComparisonRecord]) -> Result<f64> {
    accuracy_by(records, |rec| {
        let (p, a, b) = pair_of(rec)?;
        space.check(p, a)?;
        space.check(p, b)?;
        Ok(pm.raw_score_features(space.phi(p, a)) - pm.raw_score_features(space.phi(p, b)))
    })
}

/// Standardized score vector of one response under a set of models.
pub fn score_vector(pms: &[PreferenceModel], phi: &[f64]) -> Result<Vec<f64>> {
    pms.iter().map(|pm| pm.standardized_score_features(phi)).collect()
}

pub fn multiobjective_accuracy(
    pms: &[PreferenceModel],
    spec: &CheckedSpec,
    space: &ResponseSpace,
    records: &[ComparisonRecord],
) -> Result<f64> {
    if pms.len() != spec.n_principles() {
        return Err(Error::LengthMismatch {
            expected: spec.n_principles(),
            got: pms.len(),
        });
    }
    accuracy_by(records, |rec| {
        let (p, a, b) = pair_of(rec)?;
        space.check(p, a)?;
        space.check(p, b)?;
        let ra = spec.reward(&score_vector(pms, space.phi(p, a))?)?;
        let rb = spec.reward(&score_vector(pms, space.phi(p, b))?)?;
        Ok(ra - rb)
    })
}

pub fn oracle_pms(world: &World, names: &[String]) -> Vec<PreferenceModel> {
    (0..world.n_principles())
        .map(|i| PreferenceModel::oracle(world, i, &names[i]))
        .collect()
}

/// Accuracy of the same aggregation when every principle scorer is exact.
pub fn ceiling_accuracy(
    world: &World,
    names: &[String],
    spec: &CheckedSpec,
    space: &ResponseSpace,
    records: &[ComparisonRecord],
) -> Result<f64> {
    multiobjective_accuracy(&oracle_pms(world, names), spec, space, records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsMeta {
    pub regularization: f64,
    pub train_accuracy: f64,
    pub heldout_accuracy: Option<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearWeights {
    pub principles: Arc<[String]>,
    pub w: Vec<f64>,
    pub fit_meta: WeightsMeta,
}

fn diff_design(
    pms: &[PreferenceModel],
    space: &ResponseSpace,
    records: &[ComparisonRecord],
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut x = Vec::with_capacity(records.len());
    let mut t = Vec::with_capacity(records.len());
    for rec in records {
        let Some(label) = rec.label else { continue };
        let (p, a, b) = pair_of(rec)?;
        let za = score_vector(pms, space.phi(p, a))?;
        let zb = score_vector(pms, space.phi(p, b))?;
        x.push(za.iter().zip(&zb).map(|(u, v)| u - v).collect());
        t.push(label.target());
    }
    Ok((x, t))
}

fn linear_margin_accuracy(x: &[Vec<f64>], t: &[f64], w: &[f64]) -> f64 {
    let mut hits = 0.0;
    let mut n = 0;
    for (xi, &ti) in x.iter().zip(t) {
        if ti == 0.5 {
            continue;
        }
        n += 1;
        let m = dot(w, xi);
        if m == 0.0 {
            hits += 0.5;
        } else if (m > 0.0) == (ti > 0.5) {
            hits += 1.0;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        hits / n as f64
    }
}

/// Logistic regression of OVERALL labels on standardized score differences.
pub fn fit_linear_weights(
    pms: &[PreferenceModel],
    space: &ResponseSpace,
    records: &[ComparisonRecord],
    heldout: Option<&[ComparisonRecord]>,
    solver: &SolverConfig,
) -> Result<LinearWeights> {
    if pms.is_empty() {
        return Err(Error::Empty("preference model set"));
    }
    if let Some(pm) = pms.iter().find(|pm| !pm.is_calibrated()) {
        return Err(Error::Uncalibrated(pm.target.to_string()));
    }
    if records.iter().any(|r| r.target != Target::Overall) {
        return Err(Error::Config("weight fitting needs OVERALL records".into()));
    }
    let (x, t) = diff_design(pms, space, records)?;
    if x.is_empty() {
        return Err(Error::Empty("overall preference dataset"));
    }
    let fit = fit_logistic(&x, &t, solver)?;
    let heldout_accuracy = match heldout {
        Some(h) => {
            let (hx, ht) = diff_design(pms, space, h)?;
            Some(linear_margin_accuracy(&hx, &ht, &fit.coef))
        }
        None => None,
    };
    Ok(LinearWeights {
        principles: pms.iter().map(|pm| pm.target.to_string()).collect(),
        w: fit.coef.clone(),
        fit_meta: WeightsMeta {
            regularization: solver.l2,
            train_accuracy: linear_margin_accuracy(&x, &t, &fit.coef),
            heldout_accuracy,
            iterations: fit.iterations,
        },
    })
}
