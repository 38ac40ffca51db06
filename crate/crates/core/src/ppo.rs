//! Clipped-surrogate PPO over tabular softmax policies with KL-to-reference
//! reward shaping, plus exact enumeration oracles.
//!
//! Episodes are single-step: a prompt is drawn uniformly, a template sampled,
//! and the scalarized preference-model reward observed.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pm::{score_vector, PreferenceModel};
use crate::rng;
use crate::scalarization::CheckedSpec;
use crate::world::{argmax_lowest, log_softmax, sample_categorical, Policy, PolicyTag, ResponseSpace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum KlControl {
    Fixed { beta: f64 },
    /// Proportional controller moving β toward a target KL.
    Adaptive { initial_beta: f64, target: f64, horizon: f64 },
}

impl KlControl {
    pub fn initial_beta(&self) -> f64 {
        match *self {
            KlControl::Fixed { beta } => beta,
            KlControl::Adaptive { initial_beta, .. } => initial_beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub kl: KlControl,
    pub epochs_per_batch: usize,
    pub batch_size: usize,
    pub n_iterations: usize,
    /// Discount; inert for single-step episodes.
    pub gamma: f64,
    /// Step size of the per-prompt running-mean baseline.
    pub baseline_rate: f64,
    pub normalize_advantages: bool,
    /// Decay the learning rate linearly to zero over the run.
    pub anneal_learning_rate: bool,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_epsilon: 0.2,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Adam,
            kl: KlControl::Fixed { beta: 0.1 },
            epochs_per_batch: 4,
            batch_size: 4096,
            n_iterations: 200,
            gamma: 1.0,
            baseline_rate: 0.1,
            normalize_advantages: true,
            anneal_learning_rate: true,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ppo: {m}")));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.epochs_per_batch == 0 {
            return bad("batch_size and epochs_per_batch must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.baseline_rate > 0.0 && self.baseline_rate <= 1.0) {
            return bad("baseline_rate must lie in (0, 1]");
        }
        match self.kl {
            KlControl::Fixed { beta } if !(beta >= 0.0 && beta.is_finite()) => bad("kl beta must be nonnegative"),
            KlControl::Adaptive { initial_beta, target, horizon }
                if !(initial_beta >= 0.0 && target > 0.0 && horizon > 0.0) =>
            {
                bad("adaptive kl needs initial_beta >= 0, target > 0, horizon > 0")
            }
            _ => Ok(()),
        }
    }
}

/// Frozen per-(prompt, template) reward lookup: clamped standardized PM
/// scores and their scalarization.
#[derive(Debug, Clone)]
pub struct RewardModel {
    pub principle_ids: Arc<[String]>,
    pub spec: CheckedSpec,
    scores: Vec<Vec<Vec<f64>>>,
    rewards: Vec<Vec<f64>>,
}

impl RewardModel {
    pub fn new(pms: &[PreferenceModel], spec: &CheckedSpec, space: &ResponseSpace) -> Result<Self> {
        if pms.len() != spec.n_principles() {
            return Err(Error::LengthMismatch {
                expected: spec.n_principles(),
                got: pms.len(),
            });
        }
        let mut scores = Vec::with_capacity(space.n_prompts);
        let mut rewards = Vec::with_capacity(space.n_prompts);
        for p in 0..space.n_prompts {
            let mut row_s = Vec::with_capacity(space.n_templates);
            let mut row_r = Vec::with_capacity(space.n_templates);
            for k in 0..space.n_templates {
                let mut z = score_vector(pms, space.phi(p, k))?;
                spec.clamp_values(&mut z);
                row_r.push(spec.eval(&z)?);
                row_s.push(z);
            }
            scores.push(row_s);
            rewards.push(row_r);
        }
        Ok(RewardModel {
            principle_ids: pms.iter().map(|pm| pm.target.to_string()).collect(),
            spec: spec.clone(),
            scores,
            rewards,
        })
    }

    /// Reward table given directly, e.g. a ground-truth utility.
    pub fn from_table(rewards: Vec<Vec<f64>>) -> Result<Self> {
        let spec = crate::scalarization::validate_spec(
            &crate::scalarization::ScalarizationSpec::weighted_linear(vec![1.0]),
            1,
        )?;
        let scores = rewards
            .iter()
            .map(|row| row.iter().map(|&r| vec![r]).collect())
            .collect();
        Ok(RewardModel {
            principle_ids: Arc::from(vec!["reward".to_string()]),
            spec,
            scores,
            rewards,
        })
    }

    pub fn n_prompts(&self) -> usize {
        self.rewards.len()
    }

    pub fn n_templates(&self) -> usize {
        self.rewards.first().map_or(0, Vec::len)
    }

    pub fn scores(&self, prompt: usize, template: usize) -> &[f64] {
        &self.scores[prompt][template]
    }

    pub fn reward(&self, prompt: usize, template: usize) -> f64 {
        self.rewards[prompt][template]
    }

    pub fn table(&self) -> &[Vec<f64>] {
        &self.rewards
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub prompt: usize,
    pub response: usize,
    pub old_logp: f64,
    pub ref_logp: f64,
    pub scores: Vec<f64>,
    pub reward: f64,
    pub shaped_reward: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub principle_ids: Arc<[String]>,
    pub beta: f64,
    pub samples: Vec<Sample>,
}

impl RolloutBatch {
    pub fn mean_reward(&self) -> f64 {
        mean(self.samples.iter().map(|s| s.reward))
    }

    /// Monte-Carlo estimate of KL(π ∥ π_ref) averaged over prompts.
    pub fn mean_log_ratio(&self) -> f64 {
        mean(self.samples.iter().map(|s| s.old_logp - s.ref_logp))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn check_shapes(policy: &Policy, reference: &Policy, rewards: &RewardModel) -> Result<()> {
    let ok = policy.n_prompts() == rewards.n_prompts()
        && reference.n_prompts() == rewards.n_prompts()
        && policy.logits.iter().chain(&reference.logits).all(|l| l.len() == rewards.n_templates());
    if ok && rewards.n_prompts() > 0 {
        Ok(())
    } else {
        Err(Error::Config("policy, reference and reward table shapes differ".into()))
    }
}

/// Samples `n` single-step episodes. Advantages are left equal to the shaped
/// reward; see [`Baseline::assign`].
pub fn collect_rollouts<R: Rng + ?Sized>(
    policy: &Policy,
    reference: &Policy,
    rewards: &RewardModel,
    beta: f64,
    n: usize,
    rng: &mut R,
) -> Result<RolloutBatch> {
    check_shapes(policy, reference, rewards)?;
    let base: u64 = rng.random();
    let lp: Vec<Vec<f64>> = (0..policy.n_prompts()).map(|p| policy.log_probs(p)).collect();
    let lr: Vec<Vec<f64>> = (0..reference.n_prompts()).map(|p| reference.log_probs(p)).collect();
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(base, "rollout", i as u64);
            let prompt = r.random_range(0..rewards.n_prompts());
            let response = sample_categorical(&lp[prompt], &mut r);
            let old_logp = lp[prompt][response];
            let ref_logp = lr[prompt][response];
            let reward = rewards.reward(prompt, response);
            let shaped_reward = reward - beta * (old_logp - ref_logp);
            Sample {
                prompt,
                response,
                old_logp,
                ref_logp,
                scores: rewards.scores(prompt, response).to_vec(),
                reward,
                shaped_reward,
                advantage: shaped_reward,
            }
        })
        .collect();
    Ok(RolloutBatch {
        principle_ids: rewards.principle_ids.clone(),
        beta,
        samples,
    })
}

/// Per-prompt running-mean value baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub values: Vec<Option<f64>>,
    pub rate: f64,
}

impl Baseline {
    pub fn new(n_prompts: usize, rate: f64) -> Self {
        Baseline {
            values: vec![None; n_prompts],
            rate,
        }
    }

    /// Sets advantages to shaped reward minus the baseline, then updates the
    /// baseline with the batch's per-prompt means.
    pub fn assign(&mut self, batch: &mut RolloutBatch, normalize: bool) {
        let mut sums = vec![(0.0, 0usize); self.values.len()];
        for s in &mut batch.samples {
            let b = self.values[s.prompt].unwrap_or(0.0);
            s.advantage = s.shaped_reward - b;
            sums[s.prompt].0 += s.shaped_reward;
            sums[s.prompt].1 += 1;
        }
        for (v, (sum, cnt)) in self.values.iter_mut().zip(sums) {
            if cnt > 0 {
                let m = sum / cnt as f64;
                *v = Some(match *v {
                    Some(old) => old + self.rate * (m - old),
                    None => m,
                });
            }
        }
        if normalize {
            normalize_advantages(&mut batch.samples);
        }
    }
}

/// Centers advantages to zero mean and, when they are not constant, scales
/// them to unit standard deviation.
pub fn normalize_advantages(samples: &mut [Sample]) {
    if samples.is_empty() {
        return;
    }
    let m = mean(samples.iter().map(|s| s.advantage));
    let var = mean(samples.iter().map(|s| (s.advantage - m).powi(2)));
    let sd = var.sqrt();
    for s in samples {
        s.advantage -= m;
        if sd > 1e-12 {
            s.advantage /= sd;
        }
    }
}

/// Clipped surrogate objective (to be maximized).
pub fn surrogate(policy: &Policy, batch: &RolloutBatch, clip_epsilon: f64) -> f64 {
    let lp: Vec<Vec<f64>> = (0..policy.n_prompts()).map(|p| policy.log_probs(p)).collect();
    mean(batch.samples.iter().map(|s| {
        let ratio = (lp[s.prompt][s.response] - s.old_logp).exp();
        let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
        (ratio * s.advantage).min(clipped * s.advantage)
    }))
}

/// Gradient of [`surrogate`] with respect to every logit.
pub fn surrogate_gradient(policy: &Policy, batch: &RolloutBatch, clip_epsilon: f64) -> Vec<Vec<f64>> {
    let probs: Vec<Vec<f64>> = (0..policy.n_prompts()).map(|p| policy.probs(p)).collect();
    let mut grad: Vec<Vec<f64>> = policy.logits.iter().map(|l| vec![0.0; l.len()]).collect();
    let n = batch.samples.len() as f64;
    for s in &batch.samples {
        let pi = &probs[s.prompt];
        let ratio = (pi[s.response].ln() - s.old_logp).exp();
        let active = if s.advantage >= 0.0 {
            ratio < 1.0 + clip_epsilon
        } else {
            ratio > 1.0 - clip_epsilon
        };
        if !active {
            continue;
        }
        let c = s.advantage * ratio / n;
        let g = &mut grad[s.prompt];
        for (k, gk) in g.iter_mut().enumerate() {
            let indicator = if k == s.response { 1.0 } else { 0.0 };
            *gk += c * (indicator - pi[k]);
        }
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient ascent.
    Sgd,
}

/// Optimizer state for tabular logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, shape_of: &Policy, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = shape_of.logits.iter().map(|l| vec![0.0; l.len()]).collect();
        Optimizer {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One ascent step along `grad`.
    pub fn step(&mut self, logits: &mut [Vec<f64>], grad: &[Vec<f64>]) {
        self.t += 1;
        if self.kind == OptimizerKind::Sgd {
            for (row, g) in logits.iter_mut().zip(grad) {
                for (x, gk) in row.iter_mut().zip(g) {
                    *x += self.learning_rate * gk;
                }
            }
            return;
        }
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((row, g), (m, v)) in logits.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..row.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / b1t;
                let vh = v[k] / b2t;
                row[k] += self.learning_rate * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub mean_surrogate: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

pub fn ppo_update(
    policy: &Policy,
    batch: &RolloutBatch,
    config: &PpoConfig,
    optimizer: &mut Optimizer,
) -> Result<(Policy, UpdateStats)> {
    if batch.samples.is_empty() {
        return Err(Error::Empty("rollout batch"));
    }
    let mut next = policy.clone();
    next.tag = PolicyTag::Trained;
    let mut surr = 0.0;
    for _ in 0..config.epochs_per_batch {
        surr = surrogate(&next, batch, config.clip_epsilon);
        let grad = surrogate_gradient(&next, batch, config.clip_epsilon);
        if let Some((p, k)) = grad
            .iter()
            .enumerate()
            .find_map(|(p, g)| g.iter().position(|x| !x.is_finite()).map(|k| (p, k)))
        {
            return Err(Error::NonFiniteGradient(format!(
                "logit ({p}, {k}) after step {}",
                optimizer.t
            )));
        }
        optimizer.step(&mut next.logits, &grad);
    }
    let lp: Vec<Vec<f64>> = (0..next.n_prompts()).map(|p| next.log_probs(p)).collect();
    let mut kl = 0.0;
    let mut clipped = 0usize;
    for s in &batch.samples {
        let log_ratio = lp[s.prompt][s.response] - s.old_logp;
        let ratio = log_ratio.exp();
        kl += (ratio - 1.0) - log_ratio;
        if (ratio - 1.0).abs() > config.clip_epsilon {
            clipped += 1;
        }
    }
    let n = batch.samples.len() as f64;
    Ok((
        next,
        UpdateStats {
            mean_surrogate: surr,
            approx_kl: kl / n,
            clip_fraction: clipped as f64 / n,
        },
    ))
}

pub fn kl_categorical(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .filter(|(lp, _)| lp.is_finite())
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum()
}

pub fn entropy(log_p: &[f64]) -> f64 {
    -log_p
        .iter()
        .filter(|lp| lp.is_finite())
        .map(|lp| lp.exp() * lp)
        .sum::<f64>()
}

/// Mean over prompts of the exact KL(π ∥ π_ref).
pub fn mean_kl(policy: &Policy, reference: &Policy) -> f64 {
    mean((0..policy.n_prompts()).map(|p| kl_categorical(&policy.log_probs(p), &reference.log_probs(p))))
}

pub fn mean_entropy(policy: &Policy) -> f64 {
    mean((0..policy.n_prompts()).map(|p| entropy(&policy.log_probs(p))))
}

pub fn total_variation(policy: &Policy, reference: &Policy, prompt: usize) -> f64 {
    let p = policy.probs(prompt);
    let q = reference.probs(prompt);
    0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Expected reward of a policy under a reward table, averaged over prompts.
pub fn expected_reward(policy: &Policy, table: &[Vec<f64>]) -> f64 {
    mean((0..policy.n_prompts()).map(|p| {
        policy
            .probs(p)
            .iter()
            .zip(&table[p])
            .map(|(pi, r)| pi * r)
            .sum::<f64>()
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean_reward: f64,
    pub kl: f64,
    pub entropy: f64,
    pub beta: f64,
}

pub const CURVE_HEADER: &str = "iteration,mean_reward,kl,entropy,beta";

impl CurvePoint {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iteration, self.mean_reward, self.kl, self.entropy, self.beta
        )
    }
}

/// Runs PPO from a copy of `reference`. Calibration of the reward model is
/// frozen for the whole run.
pub fn train(rewards: &RewardModel, config: &PpoConfig, reference: &Policy) -> Result<(Policy, Vec<CurvePoint>)> {
    config.validate()?;
    check_shapes(reference, reference, rewards)?;
    let mut policy = reference.clone();
    policy.tag = PolicyTag::Trained;
    let mut optimizer = Optimizer::new(config.optimizer, &policy, config.learning_rate);
    let mut baseline = Baseline::new(rewards.n_prompts(), config.baseline_rate);
    let mut rng = rng::stream(config.seed, "ppo", 0);
    let mut beta = config.kl.initial_beta();
    let mut curve = Vec::with_capacity(config.n_iterations);
    for iteration in 0..config.n_iterations {
        if config.anneal_learning_rate {
            optimizer.learning_rate =
                config.learning_rate * (1.0 - iteration as f64 / config.n_iterations as f64);
        }
        let mut batch = collect_rollouts(&policy, reference, rewards, beta, config.batch_size, &mut rng)?;
        baseline.assign(&mut batch, config.normalize_advantages);
        curve.push(CurvePoint {
            iteration,
            mean_reward: batch.mean_reward(),
            kl: mean_kl(&policy, reference),
            entropy: mean_entropy(&policy),
            beta,
        });
        let (next, _) = ppo_update(&policy, &batch, config, &mut optimizer)
            .map_err(|e| Error::Stage {
                stage: format!("ppo iteration {iteration}"),
                source: Box::new(e),
            })?;
        policy = next;
        if let KlControl::Adaptive { target, horizon, .. } = config.kl {
            let err = (mean_kl(&policy, reference) / target - 1.0).clamp(-0.2, 0.2);
            beta *= 1.0 + err * config.batch_size as f64 / horizon;
        }
    }
    Ok((policy, curve))
}

/// Deterministic argmax policy; ties go to the lowest template index.
pub fn exact_best_response<F>(space: &ResponseSpace, mut reward: F) -> Policy
where
    F: FnMut(usize, usize) -> f64,
{
    let logits = (0..space.n_prompts)
        .map(|p| {
            let r: Vec<f64> = (0..space.n_templates).map(|k| reward(p, k)).collect();
            let best = argmax_lowest(&r);
            (0..space.n_templates)
                .map(|k| if k == best { 0.0 } else { -1e3 })
                .collect()
        })
        .collect();
    Policy {
        logits,
        tag: PolicyTag::Oracle,
    }
}

/// Fraction of prompts on which two policies share the same argmax.
pub fn argmax_agreement(a: &Policy, b: &Policy) -> f64 {
    mean((0..a.n_prompts()).map(|p| if a.argmax(p) == b.argmax(p) { 1.0 } else { 0.0 }))
}

/// Optimal KL-regularized policy `π ∝ π_ref exp(r / β)` for a reward table.
pub fn kl_regularized_optimum(reference: &Policy, table: &[Vec<f64>], beta: f64) -> Policy {
    let logits = reference
        .logits
        .iter()
        .zip(table)
        .map(|(l, r)| {
            let lr = log_softmax(l);
            lr.iter().zip(r).map(|(a, b)| a + b / beta).collect()
        })
        .collect();
    Policy {
        logits,
        tag: PolicyTag::Oracle,
    }
}
