use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use morlaif_core::config::ExperimentConfig;
use morlaif_core::pipeline::{self, EvalSummary, RunDir};
use morlaif_core::prompts::TemplateId;
use morlaif_core::world::{make_world, Policy, PolicyTag};
use morlaif_core::{rng, Error};
use morlaif_labeling::{Generator, Service, ServiceConfig, ServiceError};

#[derive(Debug, Parser)]
#[command(name = "morlaif", version, about = "Multi-objective RLAIF on synthetic worlds")]
struct Cli {
    /// Preset name (`default`, `minimal`), TOML file, or a run's manifest.json.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<String>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Run directory, or output directory for export-prompts and serve.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the world and label every dataset.
    Simulate,
    /// Fit principle, weight, single-objective and ensemble models.
    FitPms,
    /// Train one policy per configured reward.
    Train,
    /// Score policies and models.
    Eval,
    /// Render plot-ready tables and a markdown summary.
    Report,
    /// Write the feedback and win-rate prompt templates.
    ExportPrompts,
    /// Serve the human labeling protocol over HTTP.
    Serve(ServeArgs),
    /// All stages in order.
    Run,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Compare a trained policy from this run against its reference policy.
    #[arg(long, value_name = "DIR", conflicts_with = "queue")]
    run: Option<PathBuf>,
    /// Policy name within `--run`; defaults to the first trained policy.
    #[arg(long, requires = "run")]
    policy: Option<String>,
    /// Two files of replies, one per line, replayed in order.
    #[arg(long, num_args = 2, value_name = "FILE")]
    queue: Vec<PathBuf>,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Invalid(_) => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn out_dir(cli: &Cli) -> Result<&Path, Failure> {
    cli.out
        .as_deref()
        .ok_or_else(|| Failure::Validation("`--out <DIR>` is required".into()))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref().unwrap_or("default"))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.validate()?;
    }
    Ok(cfg)
}

/// Later stages take everything from the run manifest.
fn manifest_only(cli: &Cli, stage: &str) -> Result<RunDir, Failure> {
    if cli.config.is_some() || cli.seed.is_some() {
        return Err(Failure::Validation(format!(
            "`{stage}` reads its config from the run manifest; `--config` and `--seed` apply to simulate and run"
        )));
    }
    Ok(RunDir::new(out_dir(cli)?))
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Simulate => {
            let cfg = load_config(&cli)?;
            let dir = RunDir::new(out_dir(&cli)?);
            let sim = pipeline::simulate(&dir, &cfg)?;
            println!(
                "simulated {} principles, {} prompts x {} templates into {}",
                sim.names.len(),
                sim.space.n_prompts,
                sim.space.n_templates,
                dir.root().display()
            );
        }
        Command::FitPms => {
            let dir = manifest_only(&cli, "fit-pms")?;
            let fitted = pipeline::fit_pms(&dir)?;
            println!("fitted {} principle models", fitted.principle_pms.len());
        }
        Command::Train => {
            let dir = manifest_only(&cli, "train")?;
            for t in pipeline::train(&dir)? {
                println!("trained {}", t.name);
            }
        }
        Command::Eval => {
            let dir = manifest_only(&cli, "eval")?;
            print_summary(&pipeline::evaluate(&dir)?);
        }
        Command::Report => {
            let dir = manifest_only(&cli, "report")?;
            pipeline::report(&dir)?;
            println!("wrote {}", dir.path("report").display());
        }
        Command::ExportPrompts => {
            let out = out_dir(&cli)?;
            std::fs::create_dir_all(out).map_err(|e| Failure::from(Error::io(out, e)))?;
            for t in TemplateId::ALL {
                let path = out.join(t.file_name());
                std::fs::write(&path, t.text()).map_err(|e| Failure::from(Error::io(&path, e)))?;
                println!("{}", path.display());
            }
        }
        Command::Serve(args) => serve(&cli, args)?,
        Command::Run => {
            let cfg = load_config(&cli)?;
            let dir = RunDir::new(out_dir(&cli)?);
            print_summary(&pipeline::run(&dir, &cfg)?);
            println!("run directory: {}", dir.root().display());
        }
    }
    Ok(())
}

fn print_summary(s: &EvalSummary) {
    let a = &s.accuracy;
    println!("accuracy: single {:.3}, ceiling {:.3}", a.single, a.ceiling);
    for o in &a.objectives {
        println!("  {:<24} {:.3}", o.name, o.accuracy);
    }
    println!("win rate vs single objective (judge / human):");
    for v in &s.policies.versus_baseline {
        println!(
            "  {:<24} {:.3} / {:.3}",
            v.name, v.judge.win_rate, v.human.win_rate
        );
    }
}

fn read_lines(path: &Path) -> Result<Generator, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::from(Error::io(path, e)))?;
    let texts: Vec<String> = text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect();
    if texts.is_empty() {
        return Err(Failure::Validation(format!("{} has no replies", path.display())));
    }
    let name = path.file_stem().map_or("queue".into(), |s| s.to_string_lossy().into_owned());
    Ok(Generator::Queue { name, texts })
}

fn generators(cli: &Cli, args: &ServeArgs) -> Result<[Generator; 2], Failure> {
    if let [a, b] = args.queue.as_slice() {
        return Ok([read_lines(a)?, read_lines(b)?]);
    }
    if let Some(run) = &args.run {
        let dir = RunDir::new(run);
        let m = dir.read_manifest()?;
        let sim = pipeline::load_simulated(&dir, &m.config)?;
        let trained = pipeline::load_trained(&dir)?;
        let chosen = match &args.policy {
            Some(name) => trained
                .into_iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| Failure::Validation(format!("no trained policy named `{name}`")))?,
            None => trained
                .into_iter()
                .next()
                .ok_or_else(|| Failure::Validation("run has no trained policies".into()))?,
        };
        let space = Arc::new(sim.space);
        return Ok([
            Generator::Policy {
                name: "reference".into(),
                policy: sim.reference,
                space: space.clone(),
            },
            Generator::Policy {
                name: chosen.name,
                policy: chosen.policy,
                space,
            },
        ]);
    }
    let cfg = if cli.config.is_some() { load_config(cli)? } else { cfg_minimal(cli) };
    let (_, space) = make_world(&cfg.world, cfg.seed).map_err(Failure::from)?;
    let reference = Policy::reference(
        &space,
        cfg.world.reference_logit_scale,
        rng::derive_seed(cfg.seed, "reference", 0),
    );
    let uniform = Policy::uniform(space.n_prompts, space.n_templates, PolicyTag::SftReference);
    let space = Arc::new(space);
    Ok([
        Generator::Policy {
            name: "reference".into(),
            policy: reference,
            space: space.clone(),
        },
        Generator::Policy {
            name: "uniform".into(),
            policy: uniform,
            space,
        },
    ])
}

fn cfg_minimal(cli: &Cli) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::minimal();
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg
}

fn serve(cli: &Cli, args: &ServeArgs) -> Result<(), Failure> {
    let out = out_dir(cli)?;
    let addr: std::net::SocketAddr = args
        .addr
        .parse()
        .map_err(|e| Failure::Validation(format!("bad --addr `{}`: {e}", args.addr)))?;
    let generators = generators(cli, args)?;
    let config = ServiceConfig {
        seed: cli.seed.unwrap_or(0),
        ..Default::default()
    };
    let svc = Service::open(config, generators, out)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Failure::Runtime(format!("bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| Failure::Runtime(e.to_string()))?;
        println!("listening on http://{local}");
        morlaif_labeling::serve_on(listener, svc, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Failure::Runtime(e.to_string()))
    })
}
