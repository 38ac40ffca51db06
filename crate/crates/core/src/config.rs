//! Experiment configuration: the world, dataset sizes, fitting, the
//! scalarization sweep, PPO and evaluation settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logistic::SolverConfig;
use crate::ppo::PpoConfig;
use crate::scalarization::{validate_spec, ScalarizationSpec, Variant};
use crate::world::WorldConfig;

/// Every principle name in the constitution catalog.
pub const PRINCIPLE_CATALOG: [&str; 13] = [
    "helpfulness",
    "ethicality",
    "factuality",
    "toxicity",
    "sycophancy",
    "empathy",
    "relevance",
    "context",
    "bias",
    "understandability",
    "repetitiveness",
    "detail",
    "conciseness",
];

/// The twelve principles used by default; `context` is left out.
pub fn default_principles() -> Vec<String> {
    PRINCIPLE_CATALOG
        .iter()
        .filter(|&&p| p != "context")
        .map(|p| p.to_string())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    SingleObjective,
    #[serde(rename = "ensemble_12")]
    Ensemble12,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Pairs labeled under every principle (and once by constitution sampling).
    pub pm_train_pairs: usize,
    pub calibration_pairs: usize,
    pub pm_test_pairs: usize,
    /// Judge-labeled pairs used to fit linear weights.
    pub judge_train_pairs: usize,
    pub judge_test_pairs: usize,
    /// Judge-labeled pairs used only to weight the exact scorers.
    pub ceiling_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            pm_train_pairs: 48,
            calibration_pairs: 200,
            pm_test_pairs: 2000,
            judge_train_pairs: 1000,
            judge_test_pairs: 4000,
            ceiling_pairs: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub pm: SolverConfig,
    pub weights: SolverConfig,
    /// Also fit preference models on a random projection of the features.
    pub weak_pm: bool,
    /// Projection width; half the feature dimension when absent.
    pub weak_dim: Option<usize>,
    pub ensemble_size: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            pm: SolverConfig::default(),
            weights: SolverConfig::default(),
            weak_pm: true,
            weak_dim: None,
            ensemble_size: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub win_rate_trials: u64,
    pub matrix_trials: u64,
    /// Target tie rate for the human-style protocol.
    pub tie_rate: f64,
    pub tie_calibration_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            win_rate_trials: 10_000,
            matrix_trials: 2_000,
            tie_rate: 0.2,
            tie_calibration_samples: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub principles: Vec<String>,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub fit: FitSection,
    pub scalarizations: Vec<ScalarizationSpec>,
    pub ppo: PpoConfig,
    pub baselines: Vec<Baseline>,
    pub eval: EvalConfig,
}

pub fn default_scalarizations() -> Vec<ScalarizationSpec> {
    Variant::ALL.iter().map(|&v| ScalarizationSpec::new(v)).collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            principles: default_principles(),
            world: WorldConfig::default(),
            data: DataConfig::default(),
            fit: FitSection::default(),
            scalarizations: default_scalarizations(),
            ppo: PpoConfig::default(),
            baselines: vec![Baseline::SingleObjective, Baseline::Ensemble12],
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Two principles on an 8 × 4 world with small datasets.
    pub fn minimal() -> Self {
        let mut cfg = ExperimentConfig {
            principles: vec!["helpfulness".into(), "factuality".into()],
            ..Default::default()
        };
        cfg.world.n_principles = 2;
        cfg.world.feature_dim = 8;
        cfg.world.n_prompts = 8;
        cfg.world.n_templates = 4;
        cfg.world.sycophancy_principle = 1;
        cfg.data = DataConfig {
            pm_train_pairs: 200,
            calibration_pairs: 100,
            pm_test_pairs: 500,
            judge_train_pairs: 300,
            judge_test_pairs: 500,
            ceiling_pairs: 2000,
        };
        cfg.fit.ensemble_size = 4;
        cfg.ppo.n_iterations = 50;
        cfg.ppo.batch_size = 64;
        cfg.eval = EvalConfig {
            win_rate_trials: 2000,
            matrix_trials: 500,
            tie_rate: 0.2,
            tie_calibration_samples: 2000,
        };
        cfg
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "minimal" => Some(Self::minimal()),
            _ => None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A preset name, a TOML file, or a run manifest (JSON with a `config`
    /// field).
    pub fn load(arg: &str) -> Result<Self> {
        if let Some(cfg) = Self::preset(arg) {
            return Ok(cfg);
        }
        let path = Path::new(arg);
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("`{arg}` is not a preset and cannot be read: {e}"))
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            #[derive(Deserialize)]
            struct ManifestConfig {
                config: ExperimentConfig,
            }
            let m: ManifestConfig = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            m.config.validate()?;
            Ok(m.config)
        } else {
            Self::from_toml(&text).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                other => other,
            })
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.world.validate()?;
        self.ppo.validate()?;
        if self.principles.len() != self.world.n_principles {
            return bad(format!(
                "{} principles listed for a world with n_principles = {}",
                self.principles.len(),
                self.world.n_principles
            ));
        }
        for (i, p) in self.principles.iter().enumerate() {
            if !PRINCIPLE_CATALOG.contains(&p.as_str()) {
                return bad(format!("unknown principle `{p}`"));
            }
            if self.principles[..i].contains(p) {
                return bad(format!("principle `{p}` listed twice"));
            }
        }
        let d = &self.data;
        for (name, v) in [
            ("pm_train_pairs", d.pm_train_pairs),
            ("calibration_pairs", d.calibration_pairs),
            ("pm_test_pairs", d.pm_test_pairs),
            ("judge_train_pairs", d.judge_train_pairs),
            ("judge_test_pairs", d.judge_test_pairs),
            ("ceiling_pairs", d.ceiling_pairs),
        ] {
            if v < 2 {
                return bad(format!("data.{name} must be at least 2"));
            }
        }
        if self.scalarizations.is_empty() {
            return bad("no scalarizations to sweep".into());
        }
        for spec in &self.scalarizations {
            // weighted_linear without weights is filled in with fitted weights
            if spec.variant == Variant::WeightedLinear && spec.weights.is_none() {
                continue;
            }
            validate_spec(spec, self.world.n_principles)?;
        }
        if let Some(k) = self.fit.weak_dim {
            if k == 0 || k >= self.world.feature_dim {
                return bad(format!(
                    "fit.weak_dim must lie in [1, {}), got {k}",
                    self.world.feature_dim
                ));
            }
        }
        if self.baselines.contains(&Baseline::Ensemble12) && self.fit.ensemble_size < 2 {
            return bad("fit.ensemble_size must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.eval.tie_rate) {
            return bad(format!("eval.tie_rate must lie in [0, 1), got {}", self.eval.tie_rate));
        }
        if self.eval.win_rate_trials == 0 || self.eval.matrix_trials == 0 || self.eval.tie_calibration_samples == 0 {
            return bad("evaluation trial counts must be positive".into());
        }
        Ok(())
    }

    pub fn weak_dim(&self) -> usize {
        self.fit.weak_dim.unwrap_or((self.world.feature_dim / 2).max(1))
    }

    /// Warnings worth surfacing in the manifest.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.principles.len() < PRINCIPLE_CATALOG.len() {
            let missing: Vec<&str> = PRINCIPLE_CATALOG
                .iter()
                .copied()
                .filter(|p| !self.principles.iter().any(|q| q == p))
                .collect();
            w.push(format!(
                "the principle catalog lists {} names; this run uses {} (omitted: {})",
                PRINCIPLE_CATALOG.len(),
                self.principles.len(),
                missing.join(", ")
            ));
        }
        w
    }
}
