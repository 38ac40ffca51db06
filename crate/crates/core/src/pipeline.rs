//! Run directories: each pipeline stage reads its inputs from and writes its
//! outputs to one directory, so stages can run separately and a run can be
//! repeated from its manifest.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{read_records, write_records, ComparisonRecord};
use crate::error::{Error, Result};
use crate::eval::{AblationPoint, Protocol, WinRateResult};
use crate::experiment::{
    self, accuracies, evaluate_policies, evaluate_structure, reward_tasks, train_all, AccuracyReport, Fitted,
    PolicyEval, Simulated, StructureEval, TrainedPolicy,
};
use crate::pm::{LinearWeights, PreferenceModel};
use crate::ppo::CURVE_HEADER;
use crate::prompts::TEMPLATE_VERSION;
use crate::rng;
use crate::scalarization::{validate_spec, ScalarizationSpec, Variant};
use crate::world::{Policy, ResponseSpace, World};

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = "run.lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    FitPms,
    Train,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Simulate, Stage::FitPms, Stage::Train, Stage::Eval, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::FitPms => "fit-pms",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    /// Directories the stage owns; `world/` and `data/` both belong to simulate.
    pub fn dirs(self) -> &'static [&'static str] {
        match self {
            Stage::Simulate => &["world", "data"],
            Stage::FitPms => &["pms"],
            Stage::Train => &["policies"],
            Stage::Eval => &["eval"],
            Stage::Report => &["report"],
        }
    }

    fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Simulate => None,
            Stage::FitPms => Some(Stage::Simulate),
            Stage::Train => Some(Stage::FitPms),
            Stage::Eval => Some(Stage::Train),
            Stage::Report => Some(Stage::Eval),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecDesign {
    pub spec: ScalarizationSpec,
    /// Symmetric input clamp applied on the reward path.
    pub clamp: Option<f64>,
    pub positivity_map: bool,
}

/// Conventions and derived parameters that the config alone does not pin down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub scalarizations: Vec<SpecDesign>,
    pub quantile_rank: String,
    pub median: String,
    pub softmin_monotone_domain: String,
    pub calibration: String,
    pub pm_bias: f64,
    pub weak_dim: usize,
    pub ceiling: String,
    pub tie_band: String,
    pub tie_rate_target: f64,
    pub ensemble: String,
}

impl Design {
    fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let n = cfg.principles.len();
        let scalarizations = cfg
            .scalarizations
            .iter()
            .map(|s| {
                if s.variant == Variant::WeightedLinear && s.weights.is_none() {
                    return Ok(SpecDesign {
                        spec: s.clone(),
                        clamp: None,
                        positivity_map: false,
                    });
                }
                let c = validate_spec(s, n)?;
                Ok(SpecDesign {
                    spec: s.clone(),
                    clamp: c.clamp_range(),
                    positivity_map: c.positivity_map(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Design {
            scalarizations,
            quantile_rank: "k = ceil(alpha * n), k-th smallest, 1-based".into(),
            median: "mean of the two middle values when n is even".into(),
            softmin_monotone_domain: "max(r) - min(r) <= T".into(),
            calibration: "frozen: population mean and std of raw scores over the calibration responses, fixed before RL".into(),
            pm_bias: 0.0,
            weak_dim: cfg.weak_dim(),
            ceiling: "exact principle scorers, linear weights refit on the ceiling split".into(),
            tie_band: "|du| quantile at the target tie rate, calibrated per compared pair (eval/versus_baseline.csv)".into(),
            tie_rate_target: cfg.eval.tie_rate,
            ensemble: format!(
                "{} models on bootstrap resamples of the constitution-sampled data",
                cfg.fit.ensemble_size
            ),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSeed {
    pub name: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub base: u64,
    pub reference: u64,
    /// Filled in by the train stage.
    #[serde(default)]
    pub ppo: Vec<NamedSeed>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub template_version: String,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub design: Design,
    pub warnings: Vec<String>,
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub failed: Option<Failure>,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Manifest {
            version: env!("CARGO_PKG_VERSION").into(),
            template_version: TEMPLATE_VERSION.into(),
            config: cfg.clone(),
            seeds: Seeds {
                base: cfg.seed,
                reference: rng::derive_seed(cfg.seed, "reference", 0),
                ppo: Vec::new(),
            },
            design: Design::from_config(cfg)?,
            warnings: cfg.warnings(),
            stages: Vec::new(),
            failed: None,
        })
    }

    pub fn has(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }
}

/// Exclusive ownership of a run directory; released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn lock(&self) -> Result<RunLock> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.path(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(self.root.clone())),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn read_manifest(&self) -> Result<Manifest> {
        let path = self.path(MANIFEST);
        if !path.exists() {
            return Err(Error::MissingStage {
                stage: Stage::Simulate.name(),
                path: self.root.clone(),
            });
        }
        read_json(&path)
    }

    pub fn write_manifest(&self, m: &Manifest) -> Result<()> {
        write_json(&self.path(MANIFEST), m)
    }

    /// Fails with the first missing upstream stage.
    pub fn require(&self, m: &Manifest, stage: Stage) -> Result<()> {
        let mut s = stage.prerequisite();
        let mut missing = None;
        while let Some(p) = s {
            let present = m.has(p) && p.dirs().iter().all(|d| self.path(d).is_dir());
            if !present {
                missing = Some(p);
            }
            s = p.prerequisite();
        }
        match missing {
            Some(p) => Err(Error::MissingStage {
                stage: p.name(),
                path: self.root.clone(),
            }),
            None => Ok(()),
        }
    }

    /// Clears the outputs of `stage` and everything downstream of it.
    fn reset_from(&self, m: &mut Manifest, stage: Stage) -> Result<()> {
        for s in Stage::ALL.into_iter().filter(|&s| s >= stage) {
            for d in s.dirs() {
                let p = self.path(d);
                if p.exists() {
                    fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
        m.stages.retain(|&s| s < stage);
        m.failed = None;
        if stage <= Stage::Train {
            m.seeds.ppo.clear();
        }
        self.write_manifest(m)
    }

    fn mkdir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Serde(format!("{}: {e}", path.display()))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn stage_error(stage: Stage, e: Error) -> Error {
    match e {
        e @ (Error::MissingStage { .. } | Error::Locked(_) | Error::Stage { .. }) => e,
        e => Error::Stage {
            stage: stage.name().into(),
            source: Box::new(e),
        },
    }
}

/// Runs one stage body, recording success or failure in the manifest.
fn stage<T>(dir: &RunDir, m: &mut Manifest, s: Stage, body: impl FnOnce(&mut Manifest) -> Result<T>) -> Result<T> {
    if s != Stage::Simulate {
        dir.require(m, s)?;
    }
    dir.reset_from(m, s)?;
    match body(m) {
        Ok(v) => {
            m.stages.push(s);
            dir.write_manifest(m)?;
            Ok(v)
        }
        Err(e) => {
            let e = stage_error(s, e);
            m.failed = Some(Failure {
                stage: s,
                message: e.to_string(),
            });
            dir.write_manifest(m)?;
            Err(e)
        }
    }
}

const SPLITS: [&str; 5] = ["constitution-train", "calibration", "judge-train", "judge-test", "ceiling-train"];

fn write_simulated(dir: &RunDir, sim: &Simulated) -> Result<()> {
    let world = dir.mkdir("world")?;
    write_json(&world.join("world.json"), &sim.world)?;
    write_json(&world.join("space.json"), &sim.space)?;
    write_json(&world.join("reference.json"), &sim.reference)?;
    let data = dir.mkdir("data")?;
    for (sub, sets) in [("pm-train", &sim.pm_train), ("pm-test", &sim.pm_test)] {
        let d = dir.mkdir(&format!("data/{sub}"))?;
        for (name, recs) in sim.names.iter().zip(sets.iter()) {
            write_records(&d.join(format!("{name}.jsonl")), recs)?;
        }
    }
    let flat: [&Vec<ComparisonRecord>; 5] = [
        &sim.constitution_train,
        &sim.calibration,
        &sim.judge_train,
        &sim.judge_test,
        &sim.ceiling_train,
    ];
    for (name, recs) in SPLITS.iter().zip(flat) {
        write_records(&data.join(format!("{name}.jsonl")), recs)?;
    }
    Ok(())
}

pub fn load_simulated(dir: &RunDir, cfg: &ExperimentConfig) -> Result<Simulated> {
    let world: World = read_json(&dir.path("world/world.json"))?;
    let space: ResponseSpace = read_json(&dir.path("world/space.json"))?;
    let reference: Policy = read_json(&dir.path("world/reference.json"))?;
    let names: Arc<[String]> = cfg.principles.iter().cloned().collect();
    let per_principle = |sub: &str| -> Result<Vec<Vec<ComparisonRecord>>> {
        names
            .iter()
            .map(|n| read_records(&dir.path(format!("data/{sub}/{n}.jsonl"))))
            .collect()
    };
    let split = |name: &str| read_records(&dir.path(format!("data/{name}.jsonl")));
    Ok(Simulated {
        pm_train: per_principle("pm-train")?,
        pm_test: per_principle("pm-test")?,
        constitution_train: split("constitution-train")?,
        calibration: split("calibration")?,
        judge_train: split("judge-train")?,
        judge_test: split("judge-test")?,
        ceiling_train: split("ceiling-train")?,
        world,
        space,
        reference,
        names,
    })
}

fn write_pm_set(dir: &Path, names: &[String], pms: &[PreferenceModel]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, pm) in names.iter().zip(pms) {
        write_json(&dir.join(format!("{name}.json")), pm)?;
    }
    Ok(())
}

fn read_pm_set(dir: &Path, names: &[String]) -> Result<Vec<PreferenceModel>> {
    names.iter().map(|n| read_json(&dir.join(format!("{n}.json")))).collect()
}

fn ensemble_names(m: usize) -> Vec<String> {
    (0..m).map(|i| format!("member-{i:02}")).collect()
}

fn write_fitted(dir: &RunDir, names: &[String], f: &Fitted) -> Result<()> {
    let pms = dir.mkdir("pms")?;
    write_pm_set(&pms.join("principles"), names, &f.principle_pms)?;
    write_json(&pms.join("weights.json"), &f.weights)?;
    write_json(&pms.join("oracle-weights.json"), &f.oracle_weights)?;
    write_json(&pms.join("single.json"), &f.single)?;
    if let (Some(weak), Some(w)) = (&f.weak_pms, &f.weak_weights) {
        write_pm_set(&pms.join("weak"), names, weak)?;
        write_json(&pms.join("weak/weights.json"), w)?;
    }
    if let Some(ens) = &f.ensemble {
        write_pm_set(&pms.join("ensemble"), &ensemble_names(ens.len()), ens)?;
    }
    write_csv(
        &pms.join("weights.csv"),
        &["principle", "weight", "oracle_weight"],
        names.iter().enumerate().map(|(i, n)| {
            vec![n.clone(), f.weights.w[i].to_string(), f.oracle_weights.w[i].to_string()]
        }),
    )
}

pub fn load_fitted(dir: &RunDir, cfg: &ExperimentConfig) -> Result<Fitted> {
    let names = &cfg.principles;
    let pms = dir.path("pms");
    let weak_pms = if cfg.fit.weak_pm {
        Some(read_pm_set(&pms.join("weak"), names)?)
    } else {
        None
    };
    let weak_weights: Option<LinearWeights> = if cfg.fit.weak_pm {
        Some(read_json(&pms.join("weak/weights.json"))?)
    } else {
        None
    };
    let ensemble = if pms.join("ensemble").is_dir() {
        Some(read_pm_set(&pms.join("ensemble"), &ensemble_names(cfg.fit.ensemble_size))?)
    } else {
        None
    };
    Ok(Fitted {
        principle_pms: read_pm_set(&pms.join("principles"), names)?,
        weights: read_json(&pms.join("weights.json"))?,
        oracle_weights: read_json(&pms.join("oracle-weights.json"))?,
        single: read_json(&pms.join("single.json"))?,
        weak_pms,
        weak_weights,
        ensemble,
    })
}

fn write_trained(dir: &RunDir, trained: &[TrainedPolicy]) -> Result<()> {
    let p = dir.mkdir("policies")?;
    for t in trained {
        write_json(&p.join(format!("{}.json", t.name)), t)?;
        let mut text = String::from(CURVE_HEADER);
        text.push('\n');
        for c in &t.curve {
            text.push_str(&c.csv_row());
            text.push('\n');
        }
        let path = p.join(format!("{}.curve.csv", t.name));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    let names: Vec<&str> = trained.iter().map(|t| t.name.as_str()).collect();
    write_json(&p.join("index.json"), &names)
}

pub fn load_trained(dir: &RunDir) -> Result<Vec<TrainedPolicy>> {
    let p = dir.path("policies");
    let names: Vec<String> = read_json(&p.join("index.json"))?;
    names.iter().map(|n| read_json(&p.join(format!("{n}.json")))).collect()
}

/// Everything the eval stage measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub principles: Vec<String>,
    pub accuracy: AccuracyReport,
    pub weights: Vec<f64>,
    pub oracle_weights: Vec<f64>,
    pub policies: PolicyEval,
    pub structure: StructureEval,
}

fn win_row(name: &str, band: Option<f64>, r: &WinRateResult) -> Vec<String> {
    let protocol = match r.protocol {
        Protocol::WithoutTie => "without_tie",
        Protocol::WithTie { .. } => "with_tie",
    };
    vec![
        name.into(),
        protocol.into(),
        r.wins.to_string(),
        r.losses.to_string(),
        r.ties.to_string(),
        r.n.to_string(),
        r.win_rate.to_string(),
        r.tie_rate.to_string(),
        r.ci95.to_string(),
        opt(band),
    ]
}

fn kept_names(p: &AblationPoint, names: &[String]) -> String {
    p.kept.iter().map(|&i| names[i].as_str()).collect::<Vec<_>>().join(";")
}

fn write_eval(dir: &RunDir, s: &EvalSummary) -> Result<()> {
    let e = dir.mkdir("eval")?;
    let a = &s.accuracy;
    let mut rows: Vec<Vec<String>> = a
        .per_principle
        .iter()
        .map(|p| vec!["principle".into(), p.name.clone(), p.accuracy.to_string(), String::new()])
        .collect();
    rows.extend(
        a.objectives
            .iter()
            .map(|o| vec!["objective".into(), o.name.clone(), o.accuracy.to_string(), o.ceiling.to_string()]),
    );
    rows.push(vec!["baseline".into(), experiment::SINGLE_OBJECTIVE.into(), a.single.to_string(), String::new()]);
    rows.extend(
        a.ensemble
            .iter()
            .map(|o| vec!["ensemble".into(), o.name.clone(), o.accuracy.to_string(), String::new()]),
    );
    if let Some(w) = a.weak_linear {
        rows.push(vec!["weak".into(), experiment::WEAK_LINEAR.into(), w.to_string(), String::new()]);
    }
    rows.push(vec!["ceiling".into(), "ceiling".into(), a.ceiling.to_string(), String::new()]);
    write_csv(&e.join("accuracy.csv"), &["group", "name", "accuracy", "ceiling"], rows)?;

    write_csv(
        &e.join("negative_weight.csv"),
        &["principle", "weight", "accuracy", "accuracy_zeroed"],
        a.negative_weight.iter().map(|z| {
            vec![
                z.principle.clone(),
                z.weight.to_string(),
                z.accuracy.to_string(),
                z.accuracy_zeroed.to_string(),
            ]
        }),
    )?;

    let p = &s.policies;
    let header = [
        "policy", "protocol", "wins", "losses", "ties", "n", "win_rate", "tie_rate", "ci95", "tie_band",
    ];
    write_csv(
        &e.join("versus_baseline.csv"),
        &header,
        p.versus_baseline
            .iter()
            .flat_map(|v| [win_row(&v.name, None, &v.judge), win_row(&v.name, Some(v.tie_band), &v.human)]),
    )?;
    let mut header = vec!["policy"];
    header.extend(p.matrix_names.iter().map(String::as_str));
    write_csv(
        &e.join("winrate_matrix.csv"),
        &header,
        p.matrix_names.iter().zip(&p.matrix.rates).map(|(n, row)| {
            let mut r = vec![n.clone()];
            r.extend(row.iter().map(|x| x.to_string()));
            r
        }),
    )?;
    write_csv(
        &e.join("reward_gain.csv"),
        &["policy", "reward_gain"],
        p.reward_gain.iter().map(|g| vec![g.name.clone(), g.accuracy.to_string()]),
    )?;

    let st = &s.structure;
    let mut header = vec!["principle"];
    header.extend(s.principles.iter().map(String::as_str));
    header.push("mean_off_diagonal");
    write_csv(
        &e.join("correlations.csv"),
        &header,
        s.principles.iter().enumerate().map(|(i, n)| {
            let mut r = vec![n.clone()];
            r.extend(st.correlations[i].iter().map(|&v| opt(v)));
            r.push(opt(st.mean_off_diagonal[i]));
            r
        }),
    )?;
    write_csv(
        &e.join("ablation.csv"),
        &["k", "accuracy", "ceiling", "kept"],
        st.ablation.iter().map(|pt| {
            vec![
                pt.k.to_string(),
                pt.accuracy.to_string(),
                pt.ceiling.to_string(),
                kept_names(pt, &s.principles),
            ]
        }),
    )?;
    write_json(&e.join("summary.json"), s)
}

fn write_report(dir: &RunDir, s: &EvalSummary, trained: &[TrainedPolicy]) -> Result<()> {
    let r = dir.mkdir("report")?;
    let a = &s.accuracy;
    let mut bars: Vec<Vec<String>> = a
        .per_principle
        .iter()
        .map(|p| vec![p.name.clone(), p.accuracy.to_string()])
        .collect();
    bars.extend(a.objectives.iter().map(|o| vec![o.name.clone(), o.accuracy.to_string()]));
    bars.push(vec![experiment::SINGLE_OBJECTIVE.into(), a.single.to_string()]);
    bars.push(vec!["ceiling".into(), a.ceiling.to_string()]);
    write_csv(&r.join("accuracy_bars.csv"), &["bar", "accuracy"], bars)?;

    write_csv(
        &r.join("win_rates.csv"),
        &["policy", "judge_win_rate", "judge_ci95", "human_win_rate", "human_tie_rate"],
        s.policies.versus_baseline.iter().map(|v| {
            vec![
                v.name.clone(),
                v.judge.win_rate.to_string(),
                v.judge.ci95.to_string(),
                v.human.win_rate.to_string(),
                v.human.tie_rate.to_string(),
            ]
        }),
    )?;
    write_csv(
        &r.join("ablation.csv"),
        &["k", "accuracy", "ceiling"],
        s.structure
            .ablation
            .iter()
            .rev()
            .map(|p| vec![p.k.to_string(), p.accuracy.to_string(), p.ceiling.to_string()]),
    )?;
    write_csv(
        &r.join("curves.csv"),
        &["policy", "iteration", "mean_reward", "kl", "entropy", "beta"],
        trained.iter().flat_map(|t| {
            t.curve.iter().map(move |c| {
                vec![
                    t.name.clone(),
                    c.iteration.to_string(),
                    c.mean_reward.to_string(),
                    c.kl.to_string(),
                    c.entropy.to_string(),
                    c.beta.to_string(),
                ]
            })
        }),
    )?;
    let path = r.join("summary.md");
    fs::write(&path, summary_markdown(s)).map_err(|e| Error::io(&path, e))
}

fn summary_markdown(s: &EvalSummary) -> String {
    use std::fmt::Write as _;
    let a = &s.accuracy;
    let mut out = String::from("# Run summary\n\n## Preference model accuracy\n\n| model | accuracy | ceiling |\n|---|---|---|\n");
    for p in &a.per_principle {
        let _ = writeln!(out, "| {} | {:.4} | |", p.name, p.accuracy);
    }
    for o in &a.objectives {
        let _ = writeln!(out, "| {} | {:.4} | {:.4} |", o.name, o.accuracy, o.ceiling);
    }
    let _ = writeln!(out, "| {} | {:.4} | |", experiment::SINGLE_OBJECTIVE, a.single);
    for o in &a.ensemble {
        let _ = writeln!(out, "| {} | {:.4} | |", o.name, o.accuracy);
    }
    if let Some(w) = a.weak_linear {
        let _ = writeln!(out, "| {} | {w:.4} | |", experiment::WEAK_LINEAR);
    }
    let _ = writeln!(out, "| ceiling | {:.4} | |", a.ceiling);
    if let Some(z) = &a.negative_weight {
        let _ = writeln!(
            out,
            "\n`{}` has weight {:.4}; zeroing it moves accuracy from {:.4} to {:.4}.",
            z.principle, z.weight, z.accuracy, z.accuracy_zeroed
        );
    }
    out.push_str("\n## Win rates against the single-objective policy\n\n| policy | judge | ±95% | human | ties |\n|---|---|---|---|---|\n");
    for v in &s.policies.versus_baseline {
        let _ = writeln!(
            out,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} |",
            v.name, v.judge.win_rate, v.judge.ci95, v.human.win_rate, v.human.tie_rate
        );
    }
    out.push_str("\n## Principle ablation\n\n| k | accuracy | ceiling |\n|---|---|---|\n");
    for p in s.structure.ablation.iter().rev() {
        let _ = writeln!(out, "| {} | {:.4} | {:.4} |", p.k, p.accuracy, p.ceiling);
    }
    out
}

fn simulate_body(dir: &RunDir, m: &Manifest) -> Result<Simulated> {
    let sim = experiment::simulate(&m.config)?;
    write_simulated(dir, &sim)?;
    Ok(sim)
}

fn fit_body(dir: &RunDir, m: &Manifest) -> Result<Fitted> {
    let sim = load_simulated(dir, &m.config)?;
    let fitted = experiment::fit(&m.config, &sim)?;
    write_fitted(dir, &m.config.principles, &fitted)?;
    Ok(fitted)
}

fn train_body(dir: &RunDir, m: &mut Manifest) -> Result<Vec<TrainedPolicy>> {
    let sim = load_simulated(dir, &m.config)?;
    let fitted = load_fitted(dir, &m.config)?;
    let tasks = reward_tasks(&m.config, &sim, &fitted)?;
    let trained = train_all(&m.config, &sim, &tasks)?;
    write_trained(dir, &trained)?;
    m.seeds.ppo = trained
        .iter()
        .map(|t| NamedSeed {
            name: t.name.clone(),
            seed: t.ppo.seed,
        })
        .collect();
    Ok(trained)
}

fn eval_body(dir: &RunDir, m: &Manifest) -> Result<EvalSummary> {
    let cfg = &m.config;
    let sim = load_simulated(dir, cfg)?;
    let fitted = load_fitted(dir, cfg)?;
    let trained = load_trained(dir)?;
    let summary = EvalSummary {
        principles: cfg.principles.clone(),
        accuracy: accuracies(cfg, &sim, &fitted)?,
        weights: fitted.weights.w.clone(),
        oracle_weights: fitted.oracle_weights.w.clone(),
        policies: evaluate_policies(cfg, &sim, &trained)?,
        structure: evaluate_structure(cfg, &sim, &fitted)?,
    };
    write_eval(dir, &summary)?;
    Ok(summary)
}

fn report_body(dir: &RunDir) -> Result<()> {
    let summary: EvalSummary = read_json(&dir.path("eval/summary.json"))?;
    let trained = load_trained(dir)?;
    write_report(dir, &summary, &trained)
}

/// Starts a run: writes the manifest, the world and all labeled data.
pub fn simulate(dir: &RunDir, cfg: &ExperimentConfig) -> Result<Simulated> {
    let _lock = dir.lock()?;
    let mut m = Manifest::new(cfg)?;
    dir.write_manifest(&m)?;
    stage(dir, &mut m, Stage::Simulate, |m| simulate_body(dir, m))
}

fn with_manifest<T>(dir: &RunDir, s: Stage, body: impl FnOnce(&mut Manifest) -> Result<T>) -> Result<T> {
    let _lock = dir.lock()?;
    let mut m = dir.read_manifest()?;
    stage(dir, &mut m, s, body)
}

pub fn fit_pms(dir: &RunDir) -> Result<Fitted> {
    with_manifest(dir, Stage::FitPms, |m| fit_body(dir, m))
}

pub fn train(dir: &RunDir) -> Result<Vec<TrainedPolicy>> {
    with_manifest(dir, Stage::Train, |m| train_body(dir, m))
}

pub fn evaluate(dir: &RunDir) -> Result<EvalSummary> {
    with_manifest(dir, Stage::Eval, |m| eval_body(dir, m))
}

pub fn report(dir: &RunDir) -> Result<()> {
    with_manifest(dir, Stage::Report, |_| report_body(dir))
}

/// Every stage in order, holding the lock throughout.
pub fn run(dir: &RunDir, cfg: &ExperimentConfig) -> Result<EvalSummary> {
    let _lock = dir.lock()?;
    let mut m = Manifest::new(cfg)?;
    dir.write_manifest(&m)?;
    stage(dir, &mut m, Stage::Simulate, |m| simulate_body(dir, m))?;
    stage(dir, &mut m, Stage::FitPms, |m| fit_body(dir, m))?;
    stage(dir, &mut m, Stage::Train, |m| train_body(dir, m))?;
    let summary = stage(dir, &mut m, Stage::Eval, |m| eval_body(dir, m))?;
    stage(dir, &mut m, Stage::Report, |_| report_body(dir))?;
    Ok(summary)
}

/// Files under the metric directories, relative to the run root, sorted.
pub fn metric_files(dir: &RunDir) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(p, e))?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let path = e.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    for d in ["pms", "policies", "eval", "report"] {
        let p = dir.path(d);
        if p.is_dir() {
            walk(dir.root(), &p, &mut out)?;
        }
    }
    Ok(out)
}

/// Writes a file inside the run directory, creating parent directories.
pub fn write_file(dir: &RunDir, rel: impl AsRef<Path>, contents: &[u8]) -> Result<PathBuf> {
    let path = dir.path(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_stages_name_the_missing_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::new(tmp.path().join("run"));
        match evaluate(&dir) {
            Err(Error::MissingStage { stage, .. }) => assert_eq!(stage, "simulate"),
            other => panic!("{other:?}"),
        }
        simulate(&dir, &ExperimentConfig::minimal()).unwrap();
        match evaluate(&dir) {
            Err(e @ Error::MissingStage { .. }) => {
                assert!(e.is_validation());
                assert!(e.to_string().contains("fit-pms"), "{e}");
            }
            other => panic!("{other:?}"),
        }
        fit_pms(&dir).unwrap();
        match evaluate(&dir) {
            Err(Error::MissingStage { stage, .. }) => assert_eq!(stage, "train"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::new(tmp.path());
        let held = dir.lock().unwrap();
        assert!(matches!(dir.lock(), Err(Error::Locked(_))));
        assert!(matches!(simulate(&dir, &ExperimentConfig::minimal()), Err(Error::Locked(_))));
        drop(held);
        assert!(!dir.path(LOCK).exists());
        dir.lock().unwrap();
    }

    #[test]
    fn simulated_data_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::new(tmp.path());
        let cfg = ExperimentConfig::minimal();
        let sim = simulate(&dir, &cfg).unwrap();
        let back = load_simulated(&dir, &cfg).unwrap();
        assert_eq!(back.world, sim.world);
        assert_eq!(back.space, sim.space);
        assert_eq!(back.pm_train, sim.pm_train);
        assert_eq!(back.judge_test, sim.judge_test);
        let fitted = fit_pms(&dir).unwrap();
        assert_eq!(load_fitted(&dir, &cfg).unwrap(), fitted);
        let m = dir.read_manifest().unwrap();
        assert_eq!(m.stages, vec![Stage::Simulate, Stage::FitPms]);
        assert_eq!(m.config, cfg);
    }

    #[test]
    fn rerunning_a_stage_drops_downstream_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::new(tmp.path());
        let mut cfg = ExperimentConfig::minimal();
        cfg.ppo.n_iterations = 5;
        run(&dir, &cfg).unwrap();
        assert!(dir.path("report/summary.md").exists());
        fit_pms(&dir).unwrap();
        assert!(!dir.path("policies").exists());
        assert!(!dir.path("report").exists());
        let m = dir.read_manifest().unwrap();
        assert_eq!(m.stages, vec![Stage::Simulate, Stage::FitPms]);
        assert!(m.seeds.ppo.is_empty());
    }
}
