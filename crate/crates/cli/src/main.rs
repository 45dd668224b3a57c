//! `pguide`: command-line driver for the toy personalization-guidance lab.
//!
//! Exit codes: 0 success, 1 invariant or runtime failure, 2 config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use pguide_core::config::ExperimentConfig;
use pguide_core::evaluation::{evaluate, EvalTarget};
use pguide_core::guidance::{GuidanceConfig, Method, MethodSpec};
use pguide_core::io::{parse_csv, write_atomic};
use pguide_core::pipeline::{self, Pipeline, PipelineRun, StageName, Store, STORE_ENV};
use pguide_core::sampler::{samples_csv, trajectories_csv, SampleTag};
use pguide_core::{plot, verify, Error};

#[derive(Parser, Debug)]
#[command(name = "pguide", version, about = "Toy lab for guidance of personalized diffusion models")]
struct Cli {
    /// Experiment config (TOML); the shipped default when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory receiving outputs and the run manifest.
    #[arg(long, global = true, default_value = "pguide-out")]
    out_dir: PathBuf,

    /// Artifact-store root; defaults to `<out-dir>/store`.
    #[arg(long, global = true, env = STORE_ENV)]
    store: Option<PathBuf>,

    /// Log stage progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GuidanceArgs {
    /// cfg, ag or pg.
    #[arg(long)]
    method: Option<Method>,
    /// Guidance scale (>= 1); the method's configured default when omitted.
    #[arg(long)]
    lambda: Option<f64>,
    /// Interpolation scale in [0, 1] for pg.
    #[arg(long)]
    omega: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the conditional denoiser with condition dropout.
    Train,
    /// Fine-tune the pretrained denoiser on the target concept.
    Finetune,
    /// Draw guided samples of the requested target condition.
    Sample {
        #[command(flatten)]
        guidance: GuidanceArgs,
        /// Also write every sampler state.
        #[arg(long)]
        trajectories: bool,
        /// Override the configured sample count.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Sweep the interpolation scale of the weak model.
    SweepOmega {
        /// Guidance scale held fixed during the sweep.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Sweep the guidance scale for one or all configured methods.
    SweepLambda {
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        omega: Option<f64>,
    },
    /// Run the whole pipeline and the method comparison table.
    Compare,
    /// Render an SVG from a sweep, comparison or sample CSV.
    Plot {
        /// CSV written by a sweep, `compare` or `sample`.
        input: PathBuf,
        /// Output file; the input path with an `.svg` extension when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the deterministic invariant suite and write its CSVs.
    Verify,
}

enum Failure {
    Config(String),
    Invariant(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let is_config = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_config));
        if is_config {
            Failure::Config(format!("{e:#}"))
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::from(anyhow::Error::new(e))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Invariant(msg)) => {
            eprintln!("invariant failure: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::shipped(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn pipeline(cli: &Cli, cfg: ExperimentConfig) -> Result<Pipeline, Failure> {
    let store = cli.store.clone().unwrap_or_else(|| cli.out_dir.join("store"));
    Ok(Pipeline::new(cfg, Store::new(store), &cli.out_dir)?)
}

fn report_run(run: &PipelineRun) {
    let ran: Vec<&str> = run.executed.iter().map(StageName::as_str).collect();
    println!(
        "stages executed: {}",
        if ran.is_empty() { "none (all cached)".to_string() } else { ran.join(", ") }
    );
    for s in &run.manifest.stages {
        for o in &s.outputs {
            println!("  {}", run.out_dir.join(&o.path).display());
        }
    }
}

fn validated(cfg: ExperimentConfig) -> Result<ExperimentConfig, Failure> {
    cfg.validate()?;
    Ok(cfg)
}

/// Guidance from the flags, falling back to the configured per-method defaults.
fn guidance_from(args: &GuidanceArgs, cfg: &ExperimentConfig) -> Result<GuidanceConfig, Failure> {
    let method = args.method.unwrap_or(Method::Pg);
    let omega = match (method, args.omega) {
        (Method::Pg, Some(w)) => w,
        (Method::Pg, None) => cfg.guidance.pg_omega,
        (_, Some(_)) => return Err(Failure::Config("--omega only applies to --method pg".into())),
        (Method::Cfg, None) => 1.0,
        (Method::Ag, None) => 0.0,
    };
    let mut g = cfg.guidance.for_method(MethodSpec { method, omega });
    if let Some(l) = args.lambda {
        g.lambda = l;
    }
    g.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(g)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Train => {
            let p = pipeline(&cli, load_config(&cli)?)?;
            report_run(&p.run(&[StageName::Pretrain])?);
        }
        Command::Finetune => {
            let p = pipeline(&cli, load_config(&cli)?)?;
            report_run(&p.run(&[StageName::Finetune])?);
        }
        Command::Sample { guidance, trajectories, n } => {
            let mut cfg = load_config(&cli)?;
            if let Some(n) = n {
                cfg.sampling.n_samples = *n;
            }
            let cfg = validated(cfg)?;
            let g = guidance_from(guidance, &cfg)?;
            let p = pipeline(&cli, cfg)?;
            let run = p.sample(g, *trajectories)?;
            let exp = p.experiment();
            let dir = cli.out_dir.join("samples");
            let tag = SampleTag {
                cond: exp.requested(),
                guidance: Some(g),
                seed: exp.config.seed,
            };
            write_atomic(&dir.join("samples.csv"), samples_csv(&run.samples, &tag).as_bytes())?;
            let title = format!("{g} {}", exp.requested());
            let svg = plot::scatter(&title, &run.samples, &[&exp.pretrain_spec, &exp.target_spec])?;
            write_atomic(&dir.join("samples.svg"), svg.as_bytes())?;
            if let Some(t) = &run.trajectories {
                write_atomic(&dir.join("trajectories.csv"), trajectories_csv(t).as_bytes())?;
            }
            let target = EvalTarget::new(&exp.target_spec, exp.requested())?;
            let r = evaluate(&run.samples, &target, exp.config.seed)?;
            println!("{g}: {} samples of {}", run.samples.len(), exp.requested());
            println!(
                "subject fidelity {:.4}  attribute fidelity {:.4}  energy distance {:.4}",
                r.subject_fidelity, r.attribute_fidelity, r.energy_distance
            );
            println!("  {}", dir.display());
        }
        Command::SweepOmega { lambda } => {
            let mut cfg = load_config(&cli)?;
            if let Some(l) = lambda {
                cfg.sweep_omega.lambda = *l;
            }
            let p = pipeline(&cli, validated(cfg)?)?;
            let run = p.run(&[StageName::SweepOmega])?;
            report_run(&run);
            print_table(&run.path(StageName::SweepOmega, "sweep_omega.csv"))?;
        }
        Command::SweepLambda { method, omega } => {
            let mut cfg = load_config(&cli)?;
            if let Some(m) = method {
                let w = match m {
                    Method::Cfg => 1.0,
                    Method::Ag => 0.0,
                    Method::Pg => omega.unwrap_or(cfg.guidance.pg_omega),
                };
                cfg.sweep_lambda.methods = vec![MethodSpec { method: *m, omega: w }];
            } else if omega.is_some() {
                return Err(Failure::Config("--omega needs --method pg".into()));
            }
            let p = pipeline(&cli, validated(cfg)?)?;
            let run = p.run(&[StageName::SweepLambda])?;
            report_run(&run);
            print_table(&run.path(StageName::SweepLambda, "sweep_lambda.csv"))?;
        }
        Command::Compare => {
            let p = pipeline(&cli, load_config(&cli)?)?;
            let run = p.run(&[StageName::Report])?;
            report_run(&run);
            let summary = std::fs::read_to_string(run.path(StageName::Report, "summary.txt"))
                .context("reading summary")?;
            println!("\n{summary}");
        }
        Command::Plot { input, output } => {
            let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
            let svg = render_plot(&cli, &text)?;
            let out = output.clone().unwrap_or_else(|| input.with_extension("svg"));
            write_atomic(&out, svg.as_bytes())?;
            println!("{}", out.display());
        }
        Command::Verify => {
            let cfg = load_config(&cli)?;
            let report = verify::run(&cfg)?;
            let dir = cli.out_dir.join("verify");
            report.write(&dir)?;
            for c in &report.checks {
                println!(
                    "[{}] {:<44} {:>12.3e} {} {:.0e}",
                    if c.passed() { "pass" } else { "FAIL" },
                    c.name,
                    c.statistic,
                    c.relation,
                    c.threshold
                );
            }
            println!("  {}", dir.display());
            if !report.all_passed() {
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
                return Err(Failure::Invariant(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn print_table(path: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    println!("\n{:<22} {:>7} {:>10} {:>10} {:>10}", "series", "value", "subject", "attribute", "energy");
    for r in pipeline::parse_sweep_csv(&text)? {
        println!(
            "{:<22} {:>7} {:>10.4} {:>10.4} {:>10.4}",
            r.series(),
            r.value,
            r.subject_fidelity,
            r.attribute_fidelity,
            r.energy_distance
        );
    }
    Ok(())
}

/// Sweep-layout CSVs become line panels; sample CSVs become a scatter over
/// the config's mixture components.
fn render_plot(cli: &Cli, text: &str) -> Result<String, Failure> {
    let (header, rows) = parse_csv(text)?;
    if header.iter().any(|h| h == "swept") {
        return Ok(plot::line_panels(&pipeline::sweep_panels(text)?)?);
    }
    let (Some(x0), Some(x1)) = (
        header.iter().position(|h| h == "x0"),
        header.iter().position(|h| h == "x1"),
    ) else {
        return Err(anyhow!("csv has neither a `swept` column nor `x0`/`x1` columns").into());
    };
    let points = rows
        .iter()
        .map(|r| Ok([r[x0].parse::<f64>()?, r[x1].parse::<f64>()?]))
        .collect::<Result<Vec<_>, std::num::ParseFloatError>>()
        .context("parsing sample coordinates")?;
    let exp = pipeline::Experiment::new(load_config(cli)?)?;
    Ok(plot::scatter("samples", &points, &[&exp.pretrain_spec, &exp.target_spec])?)
}
