//! Synthetic ground truth: latent principle scores, judge utility, candidate
//! responses and tabular softmax policies.
//!
//! Each prompt owns `K` candidate responses with fixed feature vectors
//! `φ ∈ R^d`. Principle `i` scores a response as `g_i = Θ_i · φ` with unit-norm
//! rows `Θ_i`; the judge's utility is `u = v · g`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

/// Target correlation between principle scores over random responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum CorrelationTarget {
    Identity,
    Equicorrelated { rho: f64 },
    Matrix { rows: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum AnnotatorTemps {
    /// Evenly spaced between `min` and `max`, assigned to principles in a
    /// seed-shuffled order.
    Spread { min: f64, max: f64 },
    Explicit { temps: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_principles: usize,
    pub feature_dim: usize,
    pub n_prompts: usize,
    pub n_templates: usize,
    /// Standard deviation of each template feature.
    pub feature_scale: f64,
    pub correlation: CorrelationTarget,
    pub annotator_temps: AnnotatorTemps,
    pub judge_temp: f64,
    /// Judge weights are drawn as `|1 + spread * N(0, 1)|` before normalization.
    pub judge_weight_spread: f64,
    pub sycophancy_mode: bool,
    pub sycophancy_principle: usize,
    /// Correlation of the sycophancy principle with every other principle.
    pub sycophancy_correlation: f64,
    /// Raw judge weight of the sycophancy principle (before normalization).
    pub sycophancy_weight: f64,
    /// Scale of the reference policy's random logits.
    pub reference_logit_scale: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_principles: 12,
            feature_dim: 16,
            n_prompts: 64,
            n_templates: 16,
            feature_scale: 3.0,
            correlation: CorrelationTarget::Equicorrelated { rho: 0.6 },
            annotator_temps: AnnotatorTemps::Spread { min: 0.3, max: 0.9 },
            judge_temp: 2.5,
            judge_weight_spread: 0.5,
            sycophancy_mode: false,
            sycophancy_principle: 4,
            sycophancy_correlation: -0.3,
            sycophancy_weight: -1.0,
            reference_logit_scale: 1.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidWorld(msg));
        if self.n_principles == 0 || self.feature_dim == 0 || self.n_prompts == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.n_templates < 2 {
            return bad(format!("need at least 2 templates per prompt, got {}", self.n_templates));
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return bad(format!("feature_scale must be positive, got {}", self.feature_scale));
        }
        if !(self.judge_temp > 0.0 && self.judge_temp.is_finite()) {
            return bad(format!("judge_temp must be positive, got {}", self.judge_temp));
        }
        match &self.annotator_temps {
            AnnotatorTemps::Spread { min, max } => {
                if !(*min > 0.0 && max >= min && max.is_finite()) {
                    return bad(format!("annotator temperature range [{min}, {max}] invalid"));
                }
            }
            AnnotatorTemps::Explicit { temps } => {
                if temps.len() != self.n_principles {
                    return bad(format!(
                        "{} annotator temperatures for {} principles",
                        temps.len(),
                        self.n_principles
                    ));
                }
                if temps.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
                    return bad("annotator temperatures must be positive".into());
                }
            }
        }
        if self.sycophancy_mode && self.sycophancy_principle >= self.n_principles {
            return bad(format!(
                "sycophancy_principle {} out of range",
                self.sycophancy_principle
            ));
        }
        if self.sycophancy_mode && self.sycophancy_weight >= 0.0 {
            return bad("sycophancy_weight must be negative".into());
        }
        Ok(())
    }

    /// The correlation matrix the principle directions are sampled to match.
    pub fn target_correlation(&self) -> Result<Vec<Vec<f64>>> {
        let n = self.n_principles;
        let mut c = match &self.correlation {
            CorrelationTarget::Identity => identity(n),
            CorrelationTarget::Equicorrelated { rho } => {
                let mut c = vec![vec![*rho; n]; n];
                for (i, row) in c.iter_mut().enumerate() {
                    row[i] = 1.0;
                }
                c
            }
            CorrelationTarget::Matrix { rows } => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::InfeasibleCorrelation(format!(
                        "matrix must be {n}x{n}"
                    )));
                }
                rows.clone()
            }
        };
        if self.sycophancy_mode {
            let s = self.sycophancy_principle;
            for j in 0..n {
                if j != s {
                    c[s][j] = self.sycophancy_correlation;
                    c[j][s] = self.sycophancy_correlation;
                }
            }
        }
        Ok(c)
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    /// `n × d`, unit-norm rows.
    pub principle_params: Vec<Vec<f64>>,
    pub principle_corr: Vec<Vec<f64>>,
    pub judge_weights: Vec<f64>,
    pub annotator_temps: Vec<f64>,
    pub judge_temp: f64,
}

/// Candidate responses for every prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSpace {
    pub n_prompts: usize,
    pub n_templates: usize,
    pub feature_dim: usize,
    pub prompt_features: Vec<Vec<f64>>,
    /// Row-major `[prompt][template][feature]`.
    template_features: Vec<f64>,
}

impl ResponseSpace {
    pub fn phi(&self, prompt: usize, response: usize) -> &[f64] {
        let start = (prompt * self.n_templates + response) * self.feature_dim;
        &self.template_features[start..start + self.feature_dim]
    }

    pub fn check(&self, prompt: usize, response: usize) -> Result<()> {
        if prompt >= self.n_prompts {
            return Err(Error::IndexOutOfRange {
                kind: "prompt",
                index: prompt,
                len: self.n_prompts,
            });
        }
        if response >= self.n_templates {
            return Err(Error::IndexOutOfRange {
                kind: "response",
                index: response,
                len: self.n_templates,
            });
        }
        Ok(())
    }

    pub fn n_responses(&self) -> usize {
        self.n_prompts * self.n_templates
    }

    /// Builds a space from explicit template features, `[prompt][template] -> φ`.
    pub fn from_features(features: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let n_prompts = features.len();
        let n_templates = features.first().map_or(0, Vec::len);
        let feature_dim = features
            .first()
            .and_then(|p| p.first())
            .map_or(0, Vec::len);
        if n_prompts == 0 || feature_dim == 0 {
            return Err(Error::InvalidWorld("empty response space".into()));
        }
        let mut flat = Vec::with_capacity(n_prompts * n_templates * feature_dim);
        for p in &features {
            if p.len() != n_templates || n_templates < 2 {
                return Err(Error::InvalidWorld(
                    "every prompt needs the same number (>= 2) of templates".into(),
                ));
            }
            for phi in p {
                if phi.len() != feature_dim {
                    return Err(Error::InvalidWorld("ragged feature vectors".into()));
                }
                flat.extend_from_slice(phi);
            }
        }
        Ok(ResponseSpace {
            n_prompts,
            n_templates,
            feature_dim,
            prompt_features: vec![vec![0.0; feature_dim]; n_prompts],
            template_features: flat,
        })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn make_world(config: &WorldConfig, seed: u64) -> Result<(World, ResponseSpace)> {
    config.validate()?;
    let n = config.n_principles;
    let d = config.feature_dim;
    let corr = config.target_correlation()?;
    let factor = correlation_factor(&corr, d)?;

    let mut rng = rng::stream(seed, "world", 0);
    let rotation = random_orthogonal(d, &mut rng);
    let theta_m = &factor * &rotation;
    let principle_params: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row: Vec<f64> = theta_m.row(i).iter().copied().collect();
            let norm = dot(&row, &row).sqrt();
            row.into_iter().map(|x| x / norm).collect()
        })
        .collect();

    let mut judge_weights: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (1.0 + config.judge_weight_spread * z).abs()
        })
        .collect();
    if config.sycophancy_mode {
        judge_weights[config.sycophancy_principle] = config.sycophancy_weight;
    }
    // Normalize so the utility direction Θᵀv has unit norm; u then has the same
    // spread as a single principle score.
    let direction = utility_direction_of(&principle_params, &judge_weights);
    let norm = dot(&direction, &direction).sqrt();
    if norm <= 1e-12 {
        return Err(Error::InvalidWorld("judge utility direction is degenerate".into()));
    }
    for w in &mut judge_weights {
        *w /= norm;
    }

    let annotator_temps = match &config.annotator_temps {
        AnnotatorTemps::Explicit { temps } => temps.clone(),
        AnnotatorTemps::Spread { min, max } => {
            let mut t: Vec<f64> = (0..n)
                .map(|i| {
                    if n == 1 {
                        *min
                    } else {
                        min + (max - min) * i as f64 / (n - 1) as f64
                    }
                })
                .collect();
            t.shuffle(&mut rng);
            t
        }
    };

    let mut rng = rng::stream(seed, "responses", 0);
    let mut normal = |scale: f64| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        scale * z
    };
    let prompt_features = (0..config.n_prompts)
        .map(|_| (0..d).map(|_| normal(1.0)).collect())
        .collect();
    let template_features = (0..config.n_prompts * config.n_templates * d)
        .map(|_| normal(config.feature_scale))
        .collect();

    let world = World {
        config: config.clone(),
        seed,
        principle_params,
        principle_corr: corr,
        judge_weights,
        annotator_temps,
        judge_temp: config.judge_temp,
    };
    let space = ResponseSpace {
        n_prompts: config.n_prompts,
        n_templates: config.n_templates,
        feature_dim: d,
        prompt_features,
        template_features,
    };
    Ok((world, space))
}

fn utility_direction_of(theta: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let d = theta[0].len();
    let mut out = vec![0.0; d];
    for (row, w) in theta.iter().zip(v) {
        for (o, t) in out.iter_mut().zip(row) {
            *o += w * t;
        }
    }
    out
}

/// `F` (n × d) with `F Fᵀ = C`, or an error if `C` is not a feasible
/// correlation matrix in `d` dimensions.
fn correlation_factor(c: &[Vec<f64>], d: usize) -> Result<DMatrix<f64>> {
    let n = c.len();
    for i in 0..n {
        if (c[i][i] - 1.0).abs() > 1e-12 {
            return Err(Error::InfeasibleCorrelation(format!(
                "diagonal entry {i} is {} (must be 1)",
                c[i][i]
            )));
        }
        for j in 0..n {
            if (c[i][j] - c[j][i]).abs() > 1e-12 || c[i][j].abs() > 1.0 + 1e-12 {
                return Err(Error::InfeasibleCorrelation(format!(
                    "entry ({i}, {j}) is not a valid symmetric correlation"
                )));
            }
        }
    }
    let m = DMatrix::from_fn(n, n, |i, j| c[i][j]);
    let eig = SymmetricEigen::new(m);
    let tol = 1e-9;
    let min_ev = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min_ev < -tol {
        return Err(Error::InfeasibleCorrelation(format!(
            "matrix is not positive semi-definite (min eigenvalue {min_ev:.3e})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let rank = order.iter().filter(|&&k| eig.eigenvalues[k] > tol).count();
    if rank > d {
        return Err(Error::InfeasibleCorrelation(format!(
            "rank {rank} exceeds feature dimension {d}"
        )));
    }
    let mut f = DMatrix::zeros(n, d);
    for (col, &k) in order.iter().take(rank).enumerate() {
        let s = eig.eigenvalues[k].max(0.0).sqrt();
        for i in 0..n {
            f[(i, col)] = eig.eigenvectors[(i, k)] * s;
        }
    }
    Ok(f)
}

/// Haar-distributed orthogonal matrix via QR of a Gaussian matrix.
fn random_orthogonal(d: usize, rng: &mut StreamRng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

impl World {
    pub fn n_principles(&self) -> usize {
        self.principle_params.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// `Θᵀ v`: true utility is `utility_direction · φ`.
    pub fn utility_direction(&self) -> Vec<f64> {
        utility_direction_of(&self.principle_params, &self.judge_weights)
    }

    pub fn score_features(&self, phi: &[f64], principle: usize) -> f64 {
        dot(&self.principle_params[principle], phi)
    }

    pub fn principle_scores_of(&self, phi: &[f64]) -> Vec<f64> {
        self.principle_params.iter().map(|row| dot(row, phi)).collect()
    }

    pub fn utility_of(&self, phi: &[f64]) -> f64 {
        dot(&self.judge_weights, &self.principle_scores_of(phi))
    }
}

pub fn principle_score(
    world: &World,
    space: &ResponseSpace,
    prompt: usize,
    response: usize,
    principle: usize,
) -> Result<f64> {
    space.check(prompt, response)?;
    if principle >= world.n_principles() {
        return Err(Error::IndexOutOfRange {
            kind: "principle",
            index: principle,
            len: world.n_principles(),
        });
    }
    Ok(world.score_features(space.phi(prompt, response), principle))
}

pub fn true_utility(
    world: &World,
    space: &ResponseSpace,
    prompt: usize,
    response: usize,
) -> Result<f64> {
    space.check(prompt, response)?;
    Ok(world.utility_of(space.phi(prompt, response)))
}

/// Principle scores for every response, `[prompt][template][principle]`.
pub fn principle_table(world: &World, space: &ResponseSpace) -> Vec<Vec<Vec<f64>>> {
    (0..space.n_prompts)
        .map(|p| {
            (0..space.n_templates)
                .map(|k| world.principle_scores_of(space.phi(p, k)))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyTag {
    SftReference,
    Trained,
    Oracle,
}

/// Tabular softmax policy over each prompt's templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub logits: Vec<Vec<f64>>,
    pub tag: PolicyTag,
}

impl Policy {
    pub fn uniform(n_prompts: usize, n_templates: usize, tag: PolicyTag) -> Self {
        Policy {
            logits: vec![vec![0.0; n_templates]; n_prompts],
            tag,
        }
    }

    /// Random-logit stand-in for a supervised fine-tuned starting point.
    pub fn reference(space: &ResponseSpace, scale: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "reference-policy", 0);
        let logits = (0..space.n_prompts)
            .map(|_| {
                (0..space.n_templates)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Policy {
            logits,
            tag: PolicyTag::SftReference,
        }
    }

    pub fn n_prompts(&self) -> usize {
        self.logits.len()
    }

    pub fn log_probs(&self, prompt: usize) -> Vec<f64> {
        log_softmax(&self.logits[prompt])
    }

    pub fn probs(&self, prompt: usize) -> Vec<f64> {
        self.log_probs(prompt).into_iter().map(f64::exp).collect()
    }

    pub fn argmax(&self, prompt: usize) -> usize {
        argmax_lowest(&self.logits[prompt])
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let hi = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = hi + logits.iter().map(|l| (l - hi).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Index of the maximum, ties going to the lowest index.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Draws a response from `softmax(logits[prompt])`, returning its log-probability.
pub fn sample_response<R: Rng + ?Sized>(
    policy: &Policy,
    prompt: usize,
    rng: &mut R,
) -> Result<(usize, f64)> {
    if prompt >= policy.n_prompts() {
        return Err(Error::IndexOutOfRange {
            kind: "prompt",
            index: prompt,
            len: policy.n_prompts(),
        });
    }
    let lp = policy.log_probs(prompt);
    let idx = sample_categorical(&lp, rng);
    Ok((idx, lp[idx]))
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the cumulative sum; take the last
    // index with nonzero mass.
    log_probs
        .iter()
        .rposition(|lp| lp.is_finite())
        .unwrap_or(log_probs.len() - 1)
}
