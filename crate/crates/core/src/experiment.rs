//! The experiment stages as in-memory computations: simulate the world and
//! datasets, fit preference models and weights, train policies, evaluate.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Baseline, ExperimentConfig};
use crate::data::{generate_pairs, Annotators, ComparisonRecord, Pair};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_curve, calibrate_tie_band, mean_off_diagonal, principle_correlations, win_rate, winrate_matrix,
    AblationInputs, AblationPoint, Protocol, WinRateMatrix, WinRateResult,
};
use crate::pm::{
    fit_linear_weights, fit_pm, multiobjective_accuracy, oracle_pms, pm_accuracy, FeatureMap, FitConfig,
    LinearWeights, PreferenceModel,
};
use crate::ppo::{self, CurvePoint, PpoConfig, RewardModel};
use crate::rng;
use crate::scalarization::{validate_spec, CheckedSpec, ScalarizationSpec, Variant};
use crate::world::{make_world, Policy, ResponseSpace, World};

pub const SINGLE_OBJECTIVE: &str = "single_objective";
pub const WEAK_LINEAR: &str = "weak_weighted_linear";

#[derive(Debug, Clone)]
pub struct Simulated {
    pub world: World,
    pub space: ResponseSpace,
    pub reference: Policy,
    pub names: Arc<[String]>,
    /// Per principle, labels on the shared training pairs.
    pub pm_train: Vec<Vec<ComparisonRecord>>,
    /// One constitution-sampled OVERALL label per training pair.
    pub constitution_train: Vec<ComparisonRecord>,
    pub calibration: Vec<ComparisonRecord>,
    pub pm_test: Vec<Vec<ComparisonRecord>>,
    pub judge_train: Vec<ComparisonRecord>,
    pub judge_test: Vec<ComparisonRecord>,
    /// Larger judge-labeled set for weighting the exact scorers.
    pub ceiling_train: Vec<ComparisonRecord>,
}

fn pairs_for(cfg: &ExperimentConfig, space: &ResponseSpace, reference: &Policy, tag: &str, n: usize) -> Result<Vec<Pair>> {
    generate_pairs(space, reference, n, &mut rng::stream(cfg.seed, &format!("pairs/{tag}"), 0))
}

fn label_seed(cfg: &ExperimentConfig, tag: &str) -> u64 {
    rng::derive_seed(cfg.seed, &format!("labels/{tag}"), 0)
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulated> {
    cfg.validate()?;
    let (world, space) = make_world(&cfg.world, cfg.seed)?;
    let reference = Policy::reference(
        &space,
        cfg.world.reference_logit_scale,
        rng::derive_seed(cfg.seed, "reference", 0),
    );
    let names: Arc<[String]> = cfg.principles.iter().cloned().collect();
    let all: Vec<usize> = (0..names.len()).collect();
    let d = &cfg.data;

    let train_pairs = pairs_for(cfg, &space, &reference, "pm-train", d.pm_train_pairs)?;
    let ann = Annotators::new(&world, &space, names.clone())?.with_prefix("pm-train");
    let pm_train = ann.label_all_principles(&train_pairs, label_seed(cfg, "pm-train"));
    let constitution_train = ann.label_constitution(&train_pairs, &all, label_seed(cfg, "constitution"))?;

    let calib_pairs = pairs_for(cfg, &space, &reference, "calibration", d.calibration_pairs)?;
    let calibration = Annotators::new(&world, &space, names.clone())?
        .with_prefix("calibration")
        .label_judge(&calib_pairs, false, 0.0, label_seed(cfg, "calibration"))?;

    let test_pairs = pairs_for(cfg, &space, &reference, "pm-test", d.pm_test_pairs)?;
    let pm_test = Annotators::new(&world, &space, names.clone())?
        .with_prefix("pm-test")
        .label_all_principles(&test_pairs, label_seed(cfg, "pm-test"));

    let jt_pairs = pairs_for(cfg, &space, &reference, "judge-train", d.judge_train_pairs)?;
    let judge_train = Annotators::new(&world, &space, names.clone())?
        .with_prefix("judge-train")
        .label_judge(&jt_pairs, false, 0.0, label_seed(cfg, "judge-train"))?;
    let je_pairs = pairs_for(cfg, &space, &reference, "judge-test", d.judge_test_pairs)?;
    let judge_test = Annotators::new(&world, &space, names.clone())?
        .with_prefix("judge-test")
        .label_judge(&je_pairs, false, 0.0, label_seed(cfg, "judge-test"))?;
    let ce_pairs = pairs_for(cfg, &space, &reference, "ceiling", d.ceiling_pairs)?;
    let ceiling_train = Annotators::new(&world, &space, names.clone())?
        .with_prefix("ceiling")
        .label_judge(&ce_pairs, false, 0.0, label_seed(cfg, "ceiling"))?;

    Ok(Simulated {
        world,
        space,
        reference,
        names,
        pm_train,
        constitution_train,
        calibration,
        pm_test,
        judge_train,
        judge_test,
        ceiling_train,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fitted {
    pub principle_pms: Vec<PreferenceModel>,
    pub weights: LinearWeights,
    pub oracle_weights: LinearWeights,
    pub single: PreferenceModel,
    pub weak_pms: Option<Vec<PreferenceModel>>,
    pub weak_weights: Option<LinearWeights>,
    pub ensemble: Option<Vec<PreferenceModel>>,
}

fn fit_calibrated(
    records: &[ComparisonRecord],
    sim: &Simulated,
    map: &FeatureMap,
    fc: &FitConfig,
) -> Result<PreferenceModel> {
    let mut pm = fit_pm(records, &sim.space, map, fc)?;
    pm.calibrate(&sim.space, &sim.calibration)?;
    Ok(pm)
}

pub fn fit_principle_pms(sim: &Simulated, map: &FeatureMap, fc: &FitConfig) -> Result<Vec<PreferenceModel>> {
    sim.pm_train
        .par_iter()
        .map(|recs| fit_calibrated(recs, sim, map, fc))
        .collect()
}

/// Models fit on bootstrap resamples of the constitution-sampled data.
pub fn fit_ensemble(cfg: &ExperimentConfig, sim: &Simulated, fc: &FitConfig) -> Result<Vec<PreferenceModel>> {
    let n = sim.constitution_train.len();
    (0..cfg.fit.ensemble_size)
        .into_par_iter()
        .map(|e| {
            let mut r = rng::stream(cfg.seed, "bootstrap", e as u64);
            let sample: Vec<ComparisonRecord> = (0..n)
                .map(|_| sim.constitution_train[r.random_range(0..n)].clone())
                .collect();
            fit_calibrated(&sample, sim, &FeatureMap::Identity, fc)
        })
        .collect()
}

pub fn weak_feature_map(cfg: &ExperimentConfig) -> FeatureMap {
    FeatureMap::random_projection(
        cfg.world.feature_dim,
        cfg.weak_dim(),
        rng::derive_seed(cfg.seed, "weak-projection", 0),
    )
}

pub fn fit(cfg: &ExperimentConfig, sim: &Simulated) -> Result<Fitted> {
    let fc = FitConfig { solver: cfg.fit.pm };
    let principle_pms = fit_principle_pms(sim, &FeatureMap::Identity, &fc)?;
    let weights = fit_linear_weights(
        &principle_pms,
        &sim.space,
        &sim.judge_train,
        Some(&sim.judge_test),
        &cfg.fit.weights,
    )?;
    let oracle_weights = fit_linear_weights(
        &oracle_pms(&sim.world, &sim.names),
        &sim.space,
        &sim.ceiling_train,
        Some(&sim.judge_test),
        &cfg.fit.weights,
    )?;
    let single = fit_calibrated(&sim.constitution_train, sim, &FeatureMap::Identity, &fc)?;
    let (weak_pms, weak_weights) = if cfg.fit.weak_pm {
        let pms = fit_principle_pms(sim, &weak_feature_map(cfg), &fc)?;
        let w = fit_linear_weights(&pms, &sim.space, &sim.judge_train, Some(&sim.judge_test), &cfg.fit.weights)?;
        (Some(pms), Some(w))
    } else {
        (None, None)
    };
    let ensemble = if cfg.baselines.contains(&Baseline::Ensemble12) {
        Some(fit_ensemble(cfg, sim, &fc)?)
    } else {
        None
    };
    Ok(Fitted {
        principle_pms,
        weights,
        oracle_weights,
        single,
        weak_pms,
        weak_weights,
        ensemble,
    })
}

#[derive(Debug, Clone)]
pub struct ResolvedSpec {
    pub label: String,
    pub spec: CheckedSpec,
    /// Weights came from the fitted logistic regression.
    pub fitted_weights: bool,
}

/// The configured sweep, with fitted weights filled into weight-less
/// `weighted_linear` entries. Labels are variant names, suffixed on repeats.
pub fn resolve_specs(cfg: &ExperimentConfig, weights: &LinearWeights) -> Result<Vec<ResolvedSpec>> {
    let mut out: Vec<ResolvedSpec> = Vec::new();
    for spec in &cfg.scalarizations {
        let fitted_weights = spec.variant == Variant::WeightedLinear && spec.weights.is_none();
        let spec = if fitted_weights {
            ScalarizationSpec::weighted_linear(weights.w.clone())
        } else {
            spec.clone()
        };
        let checked = validate_spec(&spec, cfg.principles.len())?;
        let base = spec.variant.as_str().to_string();
        let mut label = base.clone();
        let mut k = 2;
        while out.iter().any(|r| r.label == label) {
            label = format!("{base}_{k}");
            k += 1;
        }
        out.push(ResolvedSpec {
            label,
            spec: checked,
            fitted_weights,
        });
    }
    Ok(out)
}

fn linear(w: &[f64]) -> Result<CheckedSpec> {
    validate_spec(&ScalarizationSpec::weighted_linear(w.to_vec()), w.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedAccuracy {
    pub name: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveAccuracy {
    pub name: String,
    pub accuracy: f64,
    /// Same aggregation over error-free principle scorers.
    pub ceiling: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroedWeight {
    pub principle: String,
    pub weight: f64,
    pub accuracy: f64,
    pub accuracy_zeroed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Held-out accuracy of each principle model on its own principle's labels.
    pub per_principle: Vec<NamedAccuracy>,
    /// Single constitution-trained model on the judge test set.
    pub single: f64,
    pub objectives: Vec<ObjectiveAccuracy>,
    /// Linear aggregation of error-free scorers with refit weights.
    pub ceiling: f64,
    pub ensemble: Vec<NamedAccuracy>,
    pub weak_linear: Option<f64>,
    /// The most negatively weighted principle, if any, with and without it.
    pub negative_weight: Option<ZeroedWeight>,
}

pub fn ensemble_specs(m: usize) -> Result<Vec<(String, CheckedSpec)>> {
    Ok(vec![
        (
            "ensemble_uncertainty_weighted".into(),
            validate_spec(&ScalarizationSpec::new(Variant::UncertaintyWeighted), m)?,
        ),
        (
            "ensemble_worst_case".into(),
            validate_spec(&ScalarizationSpec::new(Variant::WorstCase), m)?,
        ),
        ("ensemble_mean".into(), linear(&vec![1.0 / m as f64; m])?),
    ])
}

pub fn accuracies(cfg: &ExperimentConfig, sim: &Simulated, fitted: &Fitted) -> Result<AccuracyReport> {
    let space = &sim.space;
    let per_principle = fitted
        .principle_pms
        .iter()
        .zip(&sim.pm_test)
        .zip(sim.names.iter())
        .map(|((pm, test), name)| {
            Ok(NamedAccuracy {
                name: name.clone(),
                accuracy: pm_accuracy(pm, space, test)?,
            })
        })
        .collect::<Result<_>>()?;
    let single = pm_accuracy(&fitted.single, space, &sim.judge_test)?;
    let oracles = oracle_pms(&sim.world, &sim.names);
    let specs = resolve_specs(cfg, &fitted.weights)?;
    let objectives = specs
        .par_iter()
        .map(|r| {
            // fitted weights are refit on the exact scorers for the ceiling
            let ceiling_spec = if r.fitted_weights {
                linear(&fitted.oracle_weights.w)?
            } else {
                r.spec.clone()
            };
            Ok(ObjectiveAccuracy {
                name: r.label.clone(),
                accuracy: multiobjective_accuracy(&fitted.principle_pms, &r.spec, space, &sim.judge_test)?,
                ceiling: multiobjective_accuracy(&oracles, &ceiling_spec, space, &sim.judge_test)?,
            })
        })
        .collect::<Result<_>>()?;
    let ceiling = multiobjective_accuracy(&oracles, &linear(&fitted.oracle_weights.w)?, space, &sim.judge_test)?;
    let ensemble = match &fitted.ensemble {
        Some(pms) => ensemble_specs(pms.len())?
            .into_iter()
            .map(|(name, spec)| {
                Ok(NamedAccuracy {
                    name,
                    accuracy: multiobjective_accuracy(pms, &spec, space, &sim.judge_test)?,
                })
            })
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let weak_linear = match (&fitted.weak_pms, &fitted.weak_weights) {
        (Some(pms), Some(w)) => Some(multiobjective_accuracy(pms, &linear(&w.w)?, space, &sim.judge_test)?),
        _ => None,
    };
    let w = &fitted.weights.w;
    let negative_weight = match (0..w.len()).min_by(|&a, &b| w[a].total_cmp(&w[b])) {
        Some(i) if w[i] < 0.0 => {
            let mut zeroed = w.clone();
            zeroed[i] = 0.0;
            Some(ZeroedWeight {
                principle: sim.names[i].clone(),
                weight: w[i],
                accuracy: multiobjective_accuracy(&fitted.principle_pms, &linear(w)?, space, &sim.judge_test)?,
                accuracy_zeroed: multiobjective_accuracy(&fitted.principle_pms, &linear(&zeroed)?, space, &sim.judge_test)?,
            })
        }
        _ => None,
    };
    Ok(AccuracyReport {
        per_principle,
        single,
        objectives,
        ceiling,
        ensemble,
        weak_linear,
        negative_weight,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedPolicy {
    pub name: String,
    pub policy: Policy,
    pub curve: Vec<CurvePoint>,
    pub ppo: PpoConfig,
}

#[derive(Debug, Clone)]
pub struct RewardTask {
    pub name: String,
    pub rewards: RewardModel,
}

/// One reward model per policy to train: each scalarization over the
/// principle models, the single-objective baseline, and the weak-model run.
pub fn reward_tasks(cfg: &ExperimentConfig, sim: &Simulated, fitted: &Fitted) -> Result<Vec<RewardTask>> {
    let mut tasks = Vec::new();
    for r in resolve_specs(cfg, &fitted.weights)? {
        tasks.push(RewardTask {
            name: r.label,
            rewards: RewardModel::new(&fitted.principle_pms, &r.spec, &sim.space)?,
        });
    }
    tasks.push(RewardTask {
        name: SINGLE_OBJECTIVE.into(),
        rewards: RewardModel::new(std::slice::from_ref(&fitted.single), &linear(&[1.0])?, &sim.space)?,
    });
    if let (Some(pms), Some(w)) = (&fitted.weak_pms, &fitted.weak_weights) {
        tasks.push(RewardTask {
            name: WEAK_LINEAR.into(),
            rewards: RewardModel::new(pms, &linear(&w.w)?, &sim.space)?,
        });
    }
    Ok(tasks)
}

pub fn ppo_config_for(cfg: &ExperimentConfig, index: usize) -> PpoConfig {
    PpoConfig {
        seed: rng::derive_seed(cfg.seed ^ cfg.ppo.seed, "ppo", index as u64),
        ..cfg.ppo.clone()
    }
}

pub fn train_all(cfg: &ExperimentConfig, sim: &Simulated, tasks: &[RewardTask]) -> Result<Vec<TrainedPolicy>> {
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let ppo_cfg = ppo_config_for(cfg, i);
            let (policy, curve) = ppo::train(&task.rewards, &ppo_cfg, &sim.reference).map_err(|e| Error::Stage {
                stage: format!("train {}", task.name),
                source: Box::new(e),
            })?;
            Ok(TrainedPolicy {
                name: task.name.clone(),
                policy,
                curve,
                ppo: ppo_cfg,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersusBaseline {
    pub name: String,
    /// Utility band counted as a tie, calibrated on this pair of policies.
    pub tie_band: f64,
    pub judge: WinRateResult,
    pub human: WinRateResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub versus_baseline: Vec<VersusBaseline>,
    pub matrix_names: Vec<String>,
    pub matrix: WinRateMatrix,
    pub reward_gain: Vec<NamedAccuracy>,
}

pub fn evaluate_policies(cfg: &ExperimentConfig, sim: &Simulated, trained: &[TrainedPolicy]) -> Result<PolicyEval> {
    let base = trained
        .iter()
        .find(|t| t.name == SINGLE_OBJECTIVE)
        .ok_or_else(|| Error::Config("no single-objective policy to compare against".into()))?;
    let others: Vec<&TrainedPolicy> = trained.iter().filter(|t| t.name != SINGLE_OBJECTIVE).collect();
    let versus_baseline = others
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let seed = rng::derive_seed(cfg.seed, "versus-baseline", i as u64);
            let tie_band = calibrate_tie_band(
                &t.policy,
                &base.policy,
                &sim.world,
                &sim.space,
                cfg.eval.tie_rate,
                cfg.eval.tie_calibration_samples,
                rng::derive_seed(cfg.seed, "tie-band", i as u64),
            )?;
            Ok(VersusBaseline {
                name: t.name.clone(),
                tie_band,
                judge: win_rate(&t.policy, &base.policy, &sim.world, &sim.space, Protocol::WithoutTie, cfg.eval.win_rate_trials, seed)?,
                human: win_rate(
                    &t.policy,
                    &base.policy,
                    &sim.world,
                    &sim.space,
                    Protocol::WithTie { tie_band },
                    cfg.eval.win_rate_trials,
                    seed,
                )?,
            })
        })
        .collect::<Result<_>>()?;
    let in_matrix: Vec<&TrainedPolicy> = trained.iter().filter(|t| t.name != WEAK_LINEAR).collect();
    let matrix = winrate_matrix(
        &in_matrix.iter().map(|t| t.policy.clone()).collect::<Vec<_>>(),
        &sim.world,
        &sim.space,
        Protocol::WithoutTie,
        cfg.eval.matrix_trials,
        rng::derive_seed(cfg.seed, "matrix", 0),
    )?;
    let reward_gain = trained
        .iter()
        .map(|t| NamedAccuracy {
            name: t.name.clone(),
            accuracy: t.curve.last().map_or(0.0, |c| c.mean_reward) - t.curve.first().map_or(0.0, |c| c.mean_reward),
        })
        .collect();
    Ok(PolicyEval {
        versus_baseline,
        matrix_names: in_matrix.iter().map(|t| t.name.clone()).collect(),
        matrix,
        reward_gain,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureEval {
    pub correlations: Vec<Vec<Option<f64>>>,
    pub mean_off_diagonal: Vec<Option<f64>>,
    pub ablation: Vec<AblationPoint>,
}

pub fn evaluate_structure(cfg: &ExperimentConfig, sim: &Simulated, fitted: &Fitted) -> Result<StructureEval> {
    let correlations = principle_correlations(&sim.pm_test)?;
    let ablation = ablation_curve(
        &AblationInputs {
            pms: &fitted.principle_pms,
            weights: &fitted.weights,
            world: &sim.world,
            space: &sim.space,
            names: &sim.names,
            train: &sim.judge_train,
            ceiling_train: &sim.ceiling_train,
            test: &sim.judge_test,
            solver: cfg.fit.weights,
        },
        None,
    )?;
    Ok(StructureEval {
        mean_off_diagonal: mean_off_diagonal(&correlations),
        correlations,
        ablation,
    })
}
