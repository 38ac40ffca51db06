//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::io::{BufRead, BufReader};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use morlaif_core::config::ExperimentConfig;
use morlaif_core::data::{generate_pairs, Annotators, Label, ResponseRef};
use morlaif_core::experiment::{
    accuracies, evaluate_policies, evaluate_structure, fit, reward_tasks, simulate, train_all, AccuracyReport,
    Fitted, Simulated, StructureEval, SINGLE_OBJECTIVE, WEAK_LINEAR,
};
use morlaif_core::logistic::objective;
use morlaif_core::pipeline::{metric_files, RunDir};
use morlaif_core::pm::{fit_pm, pm_accuracy, FeatureMap, FitConfig};
use morlaif_core::ppo::{argmax_agreement, exact_best_response, total_variation, train, KlControl, PpoConfig};
use morlaif_core::prompts::TemplateId;
use morlaif_core::rng;
use morlaif_core::scalarization::{logistic, validate_spec, CheckedSpec, ScalarizationSpec, Variant};
use morlaif_core::world::{make_world, AnnotatorTemps, Policy, PolicyTag, WorldConfig};
use rand::Rng;
use serde_json::{json, Value};

type Check = Result<String, String>;
type Criterion = (&'static str, fn(&mut Lab) -> Check);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

struct SeedRun {
    cfg: ExperimentConfig,
    sim: Simulated,
    fitted: Fitted,
    acc: AccuracyReport,
    structure: StructureEval,
}

fn seed_runs(seeds: u64, sycophancy: bool) -> Vec<SeedRun> {
    (0..seeds)
        .map(|seed| {
            let mut cfg = ExperimentConfig {
                seed,
                ..Default::default()
            };
            cfg.world.sycophancy_mode = sycophancy;
            let sim = simulate(&cfg).unwrap();
            let fitted = fit(&cfg, &sim).unwrap();
            let acc = accuracies(&cfg, &sim, &fitted).unwrap();
            let structure = evaluate_structure(&cfg, &sim, &fitted).unwrap();
            SeedRun {
                cfg,
                sim,
                fitted,
                acc,
                structure,
            }
        })
        .collect()
}

#[derive(Default)]
struct Lab {
    default: Option<Vec<SeedRun>>,
    sycophancy: Option<Vec<SeedRun>>,
}

impl Lab {
    fn default_runs(&mut self) -> &[SeedRun] {
        self.default.get_or_insert_with(|| seed_runs(10, false))
    }

    fn sycophancy_runs(&mut self) -> &[SeedRun] {
        self.sycophancy.get_or_insert_with(|| seed_runs(10, true))
    }
}

// 1 -------------------------------------------------------------------------

fn check(spec: ScalarizationSpec, n: usize) -> CheckedSpec {
    validate_spec(&spec, n).unwrap()
}

fn sort_oracle(r: &[f64]) -> Vec<f64> {
    let mut v = r.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

fn scalarization_suite(_: &mut Lab) -> Check {
    const N: usize = 12;
    const TRIALS: usize = 100_000;
    let start = Instant::now();
    let mut r = rng::stream(1, "acceptance-scalarization", 0);
    let mut violations = Vec::new();

    for v in Variant::ALL {
        let mut bad = 0;
        for _ in 0..TRIALS {
            let i = r.random_range(0..N);
            let (f, x, delta) = match v {
                Variant::WeightedLinear => {
                    let w = (0..N).map(|_| r.random_range(0.0..5.0)).collect();
                    let x: Vec<f64> = (0..N).map(|_| r.random_range(-10.0..10.0)).collect();
                    (check(ScalarizationSpec::weighted_linear(w), N), x, r.random_range(1e-9..5.0))
                }
                Variant::SoftMaxMin => {
                    let t = r.random_range(0.05..5.0);
                    let base = r.random_range(-10.0..10.0);
                    let x: Vec<f64> = (0..N).map(|_| base + 0.5 * t * r.random::<f64>()).collect();
                    (check(ScalarizationSpec::soft_max_min(t), N), x, 0.5 * t * r.random::<f64>())
                }
                Variant::UncertaintyWeighted => {
                    let lambda = r.random_range(0.01..4.0);
                    let c = N as f64 / (4.0 * lambda * (N as f64 - 1.0));
                    let x: Vec<f64> = (0..N).map(|_| c * r.random_range(-1.0..1.0)).collect();
                    let delta = (c - x[i]) * r.random::<f64>();
                    (check(ScalarizationSpec::uncertainty_weighted(lambda), N), x, delta)
                }
                Variant::BernoulliNash => {
                    let x: Vec<f64> = (0..N).map(|_| r.random_range(-6.0..6.0)).collect();
                    (check(ScalarizationSpec::new(v), N), x, r.random_range(1e-9..5.0))
                }
                Variant::LowerQuantile => {
                    let x: Vec<f64> = (0..N).map(|_| r.random_range(-10.0..10.0)).collect();
                    (check(ScalarizationSpec::lower_quantile(1.0 / 3.0), N), x, r.random_range(1e-9..5.0))
                }
                _ => {
                    let x: Vec<f64> = (0..N).map(|_| r.random_range(-10.0..10.0)).collect();
                    (check(ScalarizationSpec::new(v), N), x, r.random_range(1e-9..5.0))
                }
            };
            let mut up = x.clone();
            up[i] += delta;
            if f.eval(&up).unwrap() < f.eval(&x).unwrap() - 1e-12 {
                bad += 1;
            }
            // the clamped reward path is monotone on the whole line
            if v == Variant::UncertaintyWeighted {
                let wide: Vec<f64> = (0..N).map(|_| r.random_range(-20.0..20.0)).collect();
                let mut up = wide.clone();
                up[i] += r.random_range(1e-9..20.0);
                if f.reward(&up).unwrap() < f.reward(&wide).unwrap() - 1e-12 {
                    bad += 1;
                }
            }
        }
        if bad > 0 {
            violations.push(format!("{v} monotonicity x{bad}"));
        }
    }

    let mut count = |name: &str, bad: usize| {
        if bad > 0 {
            violations.push(format!("{name} x{bad}"));
        }
    };
    let vec_of = |r: &mut rng::StreamRng, lo: f64, hi: f64| -> Vec<f64> {
        let n = r.random_range(1..=N);
        (0..n).map(|_| r.random_range(lo..hi)).collect()
    };

    let mut bad = 0;
    for _ in 0..1000 {
        let x = vec_of(&mut r, -1.0, 1.0);
        let n = x.len();
        let min = x.iter().copied().fold(f64::INFINITY, f64::min);
        let cold = check(ScalarizationSpec::soft_max_min(1e-4), n).eval(&x).unwrap();
        let hot = check(ScalarizationSpec::soft_max_min(1e4), n).eval(&x).unwrap();
        bad += usize::from((cold - min).abs() > 1e-3) + usize::from((hot - mean(x.iter().copied())).abs() > 1e-3);
    }
    count("softmin limits", bad);

    let mut bad = 0;
    for _ in 0..1000 {
        let x = vec_of(&mut r, -50.0, 50.0);
        let f = check(ScalarizationSpec::uncertainty_weighted(0.0), x.len());
        let m = x.iter().sum::<f64>() / x.len() as f64;
        bad += usize::from(f.eval(&x).unwrap() != m);
    }
    count("uwo lambda 0", bad);

    let mut bad = 0;
    for _ in 0..1000 {
        let x = vec_of(&mut r, -10.0, 10.0);
        let n = x.len();
        let den = r.random_range(1..=12usize);
        let num = r.random_range(1..=den);
        let k = (num * n).div_ceil(den).max(1);
        let f = check(ScalarizationSpec::lower_quantile(num as f64 / den as f64), n);
        bad += usize::from(f.eval(&x).unwrap() != sort_oracle(&x)[k - 1]);
        let s = sort_oracle(&x);
        let med = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
        bad += usize::from(check(ScalarizationSpec::new(Variant::MaxMedian), n).eval(&x).unwrap() != med);
    }
    count("quantile/median vs sort", bad);

    let f = check(ScalarizationSpec::new(Variant::BernoulliNash), N);
    let mut bad = 0;
    let mut compared = 0;
    for _ in 0..10_000 {
        let u: Vec<f64> = (0..N).map(|_| r.random_range(-4.0..4.0)).collect();
        let v: Vec<f64> = (0..N).map(|_| r.random_range(-4.0..4.0)).collect();
        let c: Vec<f64> = (0..N).map(|_| r.random_range(-3.0f64..3.0).exp()).collect();
        let pu: Vec<f64> = u.iter().map(|&x| logistic(x)).collect();
        let pv: Vec<f64> = v.iter().map(|&x| logistic(x)).collect();
        // shrink c by a common factor so the scaled points stay in (0, 1)
        let top = (0..N).map(|i| c[i] * pu[i].max(pv[i])).fold(0.0, f64::max);
        let scaled = |p: &[f64]| -> Vec<f64> {
            (0..N)
                .map(|i| {
                    let q = 0.99 * c[i] * p[i] / top;
                    (q / (1.0 - q)).ln()
                })
                .collect()
        };
        let (a, b) = (f.eval(&u).unwrap(), f.eval(&v).unwrap());
        if (a - b).abs() <= 1e-9 * a.max(b) {
            continue;
        }
        compared += 1;
        let (ca, cb) = (f.eval(&scaled(&pu)).unwrap(), f.eval(&scaled(&pv)).unwrap());
        bad += usize::from((a - b).signum() != (ca - cb).signum());
    }
    count("bernoulli-nash scale invariance", bad);

    let elapsed = start.elapsed();
    ensure(violations.is_empty(), format!("violations: {}", violations.join(", ")))?;
    ensure(elapsed < Duration::from_secs(30), format!("took {elapsed:?}"))?;
    Ok(format!(
        "0 violations ({TRIALS} monotonicity trials per variant, {compared} scale-invariance triples) in {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// 2 -------------------------------------------------------------------------

fn pm_recovery(_: &mut Lab) -> Check {
    let (mut min_acc, mut min_cos) = (1.0f64, 1.0f64);
    for seed in 0..5 {
        let cfg = WorldConfig {
            annotator_temps: AnnotatorTemps::Explicit { temps: vec![0.5; 12] },
            ..Default::default()
        };
        let (world, space) = make_world(&cfg, seed).unwrap();
        let uniform = Policy::uniform(space.n_prompts, space.n_templates, PolicyTag::SftReference);
        let mut r = rng::stream(seed, "acceptance-recover", 0);
        let pairs = generate_pairs(&space, &uniform, 15_000, &mut r).unwrap();
        let names: Arc<[String]> = (0..12).map(|i| format!("p{i}")).collect();
        let labels = Annotators::new(&world, &space, names).unwrap().label_all_principles(&pairs, seed);
        for (i, recs) in labels.iter().enumerate() {
            let (train, test) = recs.split_at(10_000);
            let pm = fit_pm(train, &space, &FeatureMap::Identity, &FitConfig::default()).unwrap();
            min_acc = min_acc.min(pm_accuracy(&pm, &space, test).unwrap());
            let truth = &world.principle_params[i];
            let dot: f64 = pm.theta_hat.iter().zip(truth).map(|(a, b)| a * b).sum();
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            min_cos = min_cos.min(dot / (norm(&pm.theta_hat) * norm(truth)));
        }
    }

    let mut r = rng::stream(2, "acceptance-fd", 0);
    let x: Vec<Vec<f64>> = (0..200).map(|_| (0..6).map(|_| r.random_range(-4.0..4.0)).collect()).collect();
    let t: Vec<f64> = (0..200).map(|_| [0.0, 0.5, 1.0][r.random_range(0..3)]).collect();
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let coef: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let l2 = if trial % 2 == 0 { 0.0 } else { 0.1 };
        let (_, grad) = objective(&coef, &x, &t, l2);
        for j in 0..6 {
            let h = 1e-5;
            let (mut up, mut down) = (coef.clone(), coef.clone());
            up[j] += h;
            down[j] -= h;
            let fd = (objective(&up, &x, &t, l2).0 - objective(&down, &x, &t, l2).0) / (2.0 * h);
            worst = worst.max((fd - grad[j]).abs() / grad[j].abs().max(1e-3));
        }
    }
    let detail = format!("min accuracy {min_acc:.4}, min cosine {min_cos:.4}, max gradient rel. error {worst:.1e}");
    ensure(min_acc >= 0.9 && min_cos >= 0.95 && worst <= 1e-6, detail.clone())?;
    Ok(detail)
}

// 3 -------------------------------------------------------------------------

fn accuracy_ordering(lab: &mut Lab) -> Check {
    let runs = lab.default_runs();
    let single = mean(runs.iter().map(|r| r.acc.single));
    let ceiling = mean(runs.iter().map(|r| r.acc.ceiling));
    let n_principles = runs[0].acc.per_principle.len();
    let principle_min = (0..n_principles)
        .map(|i| mean(runs.iter().map(|r| r.acc.per_principle[i].accuracy)))
        .fold(f64::INFINITY, f64::min);
    let objectives: Vec<(String, f64)> = (0..runs[0].acc.objectives.len())
        .map(|j| (runs[0].acc.objectives[j].name.clone(), mean(runs.iter().map(|r| r.acc.objectives[j].accuracy))))
        .collect();
    let ensembles: Vec<f64> = (0..runs[0].acc.ensemble.len())
        .map(|j| mean(runs.iter().map(|r| r.acc.ensemble[j].accuracy)))
        .collect();
    let listing: Vec<String> = objectives.iter().map(|(n, a)| format!("{n} {a:.3}")).collect();
    let detail = format!(
        "single {single:.3}, weakest principle {principle_min:.3}, ceiling {ceiling:.3}; {}",
        listing.join(", ")
    );
    ensure(principle_min > single, format!("principle PMs do not beat single: {detail}"))?;
    for (name, a) in &objectives {
        ensure(*a > single, format!("{name} does not beat single: {detail}"))?;
        ensure(ceiling >= *a, format!("ceiling below {name}: {detail}"))?;
    }
    ensure(ensembles.iter().all(|&e| ceiling >= e) && ceiling >= single, format!("ceiling below a baseline: {detail}"))?;
    Ok(detail)
}

// 4 -------------------------------------------------------------------------

fn negative_weight(lab: &mut Lab) -> Check {
    let runs = lab.sycophancy_runs();
    let idx = runs[0].cfg.world.sycophancy_principle;
    let name = runs[0].cfg.principles[idx].clone();
    let negative = runs.iter().filter(|r| r.fitted.weights.w[idx] < 0.0).count();
    let deltas: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.acc.negative_weight.as_ref())
        .filter(|z| z.principle == name)
        .map(|z| z.accuracy - z.accuracy_zeroed)
        .collect();
    let d = mean(deltas.iter().copied());
    let detail = format!(
        "`{name}` weighted negative in {negative}/10 seeds; zeroing it lowers accuracy by {d:.4} on average ({} seeds)",
        deltas.len()
    );
    ensure(negative >= 9, detail.clone())?;
    ensure(d > 0.0 && d < 0.02, format!("zeroing effect not a small reduction: {detail}"))?;
    Ok(detail)
}

// 5 -------------------------------------------------------------------------

fn ppo_oracle(lab: &mut Lab) -> Check {
    let runs = lab.default_runs();
    let (mut min_agree, mut max_tv) = (1.0f64, 0.0f64);
    let mut failures = Vec::new();
    for (seed, run) in runs.iter().take(3).enumerate() {
        let tasks = reward_tasks(&run.cfg, &run.sim, &run.fitted).unwrap();
        for task in tasks.iter().filter(|t| t.name != SINGLE_OBJECTIVE && t.name != WEAK_LINEAR) {
            let greedy = PpoConfig {
                kl: KlControl::Fixed { beta: 0.0 },
                n_iterations: 500,
                seed: seed as u64,
                ..Default::default()
            };
            let (policy, _) = train(&task.rewards, &greedy, &run.sim.reference).unwrap();
            let oracle = exact_best_response(&run.sim.space, |p, k| task.rewards.reward(p, k));
            let agree = argmax_agreement(&policy, &oracle);
            min_agree = min_agree.min(agree);
            if agree < 0.95 {
                failures.push(format!("seed {seed} {} agreement {agree:.3}", task.name));
            }

            let anchored = PpoConfig {
                kl: KlControl::Fixed { beta: 100.0 },
                seed: seed as u64,
                ..Default::default()
            };
            let (policy, _) = train(&task.rewards, &anchored, &run.sim.reference).unwrap();
            let tv = (0..run.sim.space.n_prompts)
                .map(|p| total_variation(&policy, &run.sim.reference, p))
                .fold(0.0, f64::max);
            max_tv = max_tv.max(tv);
            if tv > 0.05 {
                failures.push(format!("seed {seed} {} TV {tv:.4}", task.name));
            }
        }
    }
    ensure(failures.is_empty(), failures.join("; "))?;
    Ok(format!(
        "beta=0: min argmax agreement {min_agree:.3}; beta=100: max TV {max_tv:.4} (3 seeds, every scalarization)"
    ))
}

// 6 -------------------------------------------------------------------------

fn win_rates(lab: &mut Lab) -> Check {
    let runs = lab.default_runs();
    let (mut linear, mut weak) = (Vec::new(), Vec::new());
    let mut asymmetric = 0;
    let mut n_cmp = u64::MAX;
    for run in runs.iter().take(5) {
        let tasks = reward_tasks(&run.cfg, &run.sim, &run.fitted).unwrap();
        let trained = train_all(&run.cfg, &run.sim, &tasks).unwrap();
        let ev = evaluate_policies(&run.cfg, &run.sim, &trained).unwrap();
        for v in &ev.versus_baseline {
            n_cmp = n_cmp.min(v.judge.n);
            match v.name.as_str() {
                "weighted_linear" => linear.push(v.judge.win_rate),
                WEAK_LINEAR => weak.push(v.judge.win_rate),
                _ => {}
            }
        }
        let m = &ev.matrix.rates;
        for i in 0..m.len() {
            for j in 0..m.len() {
                if i != j && m[i][j] + m[j][i] != 1.0 {
                    asymmetric += 1;
                }
            }
        }
    }
    let (l, w) = (mean(linear), mean(weak));
    let detail = format!(
        "weighted_linear vs single {l:.3}, weak-PM run vs single {w:.3} (judge, n={n_cmp}, 5 seeds); e_ij+e_ji != 1 in {asymmetric} cells"
    );
    ensure(n_cmp >= 10_000, detail.clone())?;
    ensure(l >= 0.55, detail.clone())?;
    ensure((w - 0.5).abs() <= 0.05, detail.clone())?;
    ensure(asymmetric == 0, detail.clone())?;
    Ok(detail)
}

// 7 -------------------------------------------------------------------------

fn ensemble_baseline(lab: &mut Lab) -> Check {
    let runs = lab.default_runs();
    let single = mean(runs.iter().map(|r| r.acc.single));
    let ens: Vec<(String, f64)> = (0..runs[0].acc.ensemble.len())
        .map(|j| (runs[0].acc.ensemble[j].name.clone(), mean(runs.iter().map(|r| r.acc.ensemble[j].accuracy))))
        .collect();
    let weakest_decomposed = (0..runs[0].acc.objectives.len())
        .map(|j| mean(runs.iter().map(|r| r.acc.objectives[j].accuracy)))
        .fold(f64::INFINITY, f64::min);
    let uwo = ens.iter().find(|(n, _)| n == "ensemble_uncertainty_weighted").unwrap().1;
    let best_ens = ens.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    let listing: Vec<String> = ens.iter().map(|(n, a)| format!("{n} {:+.4}", a - single)).collect();
    let detail = format!(
        "vs single {single:.4}: {}; weakest decomposed objective {:+.4} over best ensemble",
        listing.join(", "),
        weakest_decomposed - best_ens
    );
    ensure(uwo > single, detail.clone())?;
    ensure(weakest_decomposed > best_ens, detail.clone())?;
    Ok(detail)
}

// 8 -------------------------------------------------------------------------

fn ablation_and_correlation(lab: &mut Lab) -> Check {
    let runs = lab.sycophancy_runs();
    let n = runs[0].cfg.principles.len();
    let syc = runs[0].cfg.world.sycophancy_principle;
    let mut fitted = vec![0.0; n];
    let mut ceiling = vec![0.0; n];
    let mut argmin_hits = 0;
    for run in runs {
        let ks: Vec<usize> = run.structure.ablation.iter().map(|p| p.k).collect();
        ensure(ks == (1..=n).rev().collect::<Vec<_>>(), format!("ablation covers k = {ks:?}"))?;
        for p in &run.structure.ablation {
            fitted[p.k - 1] += p.accuracy / runs.len() as f64;
            ceiling[p.k - 1] += p.ceiling / runs.len() as f64;
        }
        let c = &run.structure.correlations;
        for i in 0..n {
            ensure(c[i][i] == Some(1.0), format!("diagonal entry {i} is {:?}", c[i][i]))?;
            for j in 0..n {
                ensure(c[i][j] == c[j][i], format!("correlation ({i},{j}) is not symmetric"))?;
            }
        }
        let m: Vec<f64> = run.structure.mean_off_diagonal.iter().map(|v| v.unwrap()).collect();
        let argmin = (0..n).min_by(|&a, &b| m[a].total_cmp(&m[b])).unwrap();
        argmin_hits += usize::from(argmin == syc);
    }
    let min_gap = (0..n).map(|k| ceiling[k] - fitted[k]).fold(f64::INFINITY, f64::min);
    let detail = format!(
        "ceiling - fitted >= {min_gap:+.4} over k = {n}..1; anti-aligned principle has the lowest mean correlation in {argmin_hits}/{} seeds",
        runs.len()
    );
    ensure(min_gap >= 0.0, detail.clone())?;
    ensure(argmin_hits == runs.len(), detail.clone())?;
    Ok(detail)
}

// 9 -------------------------------------------------------------------------

fn morlaif() -> Command {
    Command::new(env!("CARGO_BIN_EXE_morlaif"))
}

fn run_cli(args: &[&str]) -> Result<Duration, String> {
    let start = Instant::now();
    let out = morlaif().args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(start.elapsed())
}

fn reproducibility(_: &mut Lab) -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    let minimal = run_cli(&["run", "--config", "minimal", "--out", &p("minimal")])?;
    let manifest = tmp.path().join("minimal/manifest.json");
    run_cli(&["run", "--config", manifest.to_str().unwrap(), "--out", &p("rerun")])?;
    let default = run_cli(&["run", "--config", "default", "--out", &p("default")])?;
    let default_manifest = tmp.path().join("default/manifest.json");
    run_cli(&["run", "--config", default_manifest.to_str().unwrap(), "--out", &p("default-rerun")])?;

    let mut compared = 0;
    for (a, b) in [("minimal", "rerun"), ("default", "default-rerun")] {
        let (da, db) = (RunDir::new(tmp.path().join(a)), RunDir::new(tmp.path().join(b)));
        let files = metric_files(&da).map_err(|e| e.to_string())?;
        ensure(files == metric_files(&db).map_err(|e| e.to_string())?, "metric file sets differ")?;
        for f in &files {
            let same = std::fs::read(da.path(f)).ok() == std::fs::read(db.path(f)).ok();
            ensure(same, format!("{} differs after rerun of {a}", f.display()))?;
        }
        compared += files.len();
    }
    let detail = format!(
        "{compared} metric files byte-identical on rerun; minimal {:.1}s, default {:.1}s",
        minimal.as_secs_f64(),
        default.as_secs_f64()
    );
    ensure(minimal < Duration::from_secs(60), detail.clone())?;
    ensure(default < Duration::from_secs(15 * 60), detail.clone())?;
    Ok(detail)
}

// 10 ------------------------------------------------------------------------

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_server(dir: &Path, seed: u64) -> Result<(Server, String), String> {
    let (x, y) = (dir.join("x.txt"), dir.join("y.txt"));
    let lines = |p: &str| (0..20).map(|i| format!("{p}{i}\n")).collect::<String>();
    std::fs::write(&x, lines("x")).map_err(|e| e.to_string())?;
    std::fs::write(&y, lines("y")).map_err(|e| e.to_string())?;
    let mut child = morlaif()
        .args(["serve", "--addr", "127.0.0.1:0", "--seed", &seed.to_string(), "--out"])
        .arg(dir.join("labels"))
        .arg("--queue")
        .args([&x, &y])
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).map_err(|e| e.to_string())?;
    let base = line
        .trim()
        .strip_prefix("listening on ")
        .ok_or_else(|| format!("unexpected banner `{line}`"))?
        .to_string();
    Ok((Server(child), base))
}

struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.http.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }
}

async fn labeling_session(base: String, seed: u64) -> Check {
    let c = Client {
        base,
        http: reqwest::Client::new(),
    };
    let (_, s) = c.post("/sessions", json!({ "worker_id": "worker-1" })).await;
    let id = s["session_id"].as_str().ok_or("no session id")?.to_string();
    let (_, g) = c.post(&format!("/sessions/{id}/gate"), json!({ "answer": "They row across together." })).await;
    ensure(g["passed"] == true, "gate rejected the plain answer")?;

    let choices = ["A", "TIE", "B", "TIE", "A", "B", "TIE", "A", "TIE", "B"];
    let mut expected = Vec::new();
    let mut ties_checked = 0;
    for (t, choice) in choices.iter().enumerate() {
        let (code, o) = c.post(&format!("/sessions/{id}/turns"), json!({ "message": format!("m{t}") })).await;
        ensure(code == 200, format!("turn {t}: status {code}"))?;
        let a = o["option_a"].as_str().unwrap_or_default().to_string();
        let b = o["option_b"].as_str().unwrap_or_default().to_string();
        let (_, ack) = c.post(&format!("/sessions/{id}/choice"), json!({ "choice": choice, "turn": t + 1 })).await;
        // a duplicate submission is absorbed
        let (code, again) = c.post(&format!("/sessions/{id}/choice"), json!({ "choice": choice, "turn": t + 1 })).await;
        ensure(code == 200 && again == ack, "duplicate choice changed state")?;
        if *choice == "TIE" {
            let coin: bool = rng::stream(seed, &format!("tie/{id}"), t as u64).random();
            let want = if coin { &b } else { &a };
            ensure(ack["continuation"] == want.as_str(), format!("tie at turn {t} continued with {}", ack["continuation"]))?;
            ties_checked += 1;
        }
        let label: Label = choice.parse().unwrap();
        expected.push(if a.starts_with('y') { label.flipped() } else { label });
    }
    let (code, _) = c.post(&format!("/sessions/{id}/turns"), json!({ "message": "one more" })).await;
    ensure(code == 409, format!("11th turn returned {code}"))?;

    for i in 2..=10 {
        let (code, _) = c.post(&format!("/sessions/{id}/close"), json!({})).await;
        ensure(code == 200, format!("conversation {i} refused with {code}"))?;
    }
    let (close_code, _) = c.post(&format!("/sessions/{id}/close"), json!({})).await;
    let (new_code, _) = c.post("/sessions", json!({ "worker_id": "worker-1" })).await;
    ensure(close_code == 409 && new_code == 409, format!("11th conversation: close {close_code}, new session {new_code}"))?;

    let body = c.http.get(format!("{}/export", c.base)).send().await.unwrap().text().await.unwrap();
    let records: Vec<morlaif_core::data::ComparisonRecord> =
        body.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    ensure(records.len() == choices.len(), format!("export has {} records", records.len()))?;
    for (r, want) in records.iter().zip(&expected) {
        let ResponseRef::Text { id, .. } = &r.response_a else {
            return Err("export holds a non-text response".into());
        };
        ensure(id.starts_with("x/") && !r.position_swapped && r.label == Some(*want), format!("record {} not unswapped", r.pair_id))?;
    }
    Ok(format!("10-turn and 10-conversation caps return 409, {ties_checked} ties followed the seeded coin, {} records unswapped", records.len()))
}

fn protocol(_: &mut Lab) -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let prompts = tmp.path().join("prompts");
    run_cli(&["export-prompts", "--out", prompts.to_str().unwrap()])?;
    let assets = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/assets/prompts");
    for t in TemplateId::ALL {
        let same = std::fs::read(prompts.join(t.file_name())).ok() == std::fs::read(assets.join(t.file_name())).ok();
        ensure(same, format!("{} differs from the shipped asset", t.file_name()))?;
    }
    let seed = 17;
    let (_server, base) = spawn_server(tmp.path(), seed)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let detail = runtime.block_on(labeling_session(base, seed))?;
    Ok(format!("3 templates byte-identical; {detail}"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("scalarization property suite", scalarization_suite),
        ("PM generate-and-recover", pm_recovery),
        ("accuracy: decomposed PMs beat the single PM", accuracy_ordering),
        ("negative weight on the anti-aligned principle", negative_weight),
        ("PPO matches the exact best response", ppo_oracle),
        ("policy win rates", win_rates),
        ("bootstrap ensemble baseline", ensemble_baseline),
        ("principle ablation and correlations", ablation_and_correlation),
        ("reproducibility and run time", reproducibility),
        ("prompt export and labeling protocol", protocol),
    ];
    let mut lab = Lab::default();
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut lab))).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
