use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use instructforge_core::dataset::Category;
use instructforge_core::gateway::mock::WorldConfig;
use instructforge_core::gateway::ErrorClass;
use instructforge_core::pipeline::stats::{render_report, run_stats};
use instructforge_core::pipeline::{BackendConfig, Pipeline, PipelineError, RunConfig, StageOutcome};
use instructforge_core::template::{PLACEHOLDER_1, PLACEHOLDER_2};
use instructforge_core::{answers_equivalent, parse_answer, TemplateId, TemplateSet};

#[derive(Parser)]
#[command(name = "instructforge", version, about = "Generate and curate synthetic instructions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config key, e.g. `--set k_rollout=8` or `--set gateway.max_in_flight=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the configured backend: `mock` for the built-in synthetic world.
    #[arg(long)]
    backend: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw seed pairs, render prompts and collect well-formed instructions.
    Generate(RunArgs),
    /// Sample K responses per generated record.
    Rollout(RunArgs),
    /// Score rollout samples with the reward endpoint.
    Score(RunArgs),
    /// Apply the configured filter chain.
    Filter(RunArgs),
    /// Build preference pairs for kept instruction-following records.
    Pairs(RunArgs),
    /// Every stage the config needs, then the stats report.
    Run(RunArgs),
    /// Report over run directories or record files.
    Stats {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Print the machine-readable report instead.
        #[arg(long)]
        json: bool,
    },
    /// Decide whether two final answers are equivalent: exit 0 if so, 1 if
    /// not, 4 if either does not parse.
    Verify { a: String, b: String },
    /// Print a template, optionally rendered with two seed texts.
    RenderTemplate {
        template: TemplateId,
        #[arg(long)]
        first: Option<String>,
        #[arg(long)]
        second: Option<String>,
        /// Directory with replacement template files.
        #[arg(long)]
        templates_dir: Option<PathBuf>,
    },
    /// List the instruction categories.
    Taxonomy,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|kv| match kv.split_once('=') {
            Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
            None => bail!(PipelineError::Config(format!("--set expects KEY=VALUE, got {kv:?}"))),
        })
        .collect()
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let overrides = parse_overrides(&args.overrides)?;
    let mut config = RunConfig::load(&args.config, &overrides)?;
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    match args.backend.as_deref() {
        None => {}
        Some("mock") => config.backend = BackendConfig::Mock { world: WorldConfig::default() },
        Some(other) => bail!(PipelineError::Config(format!("unknown --backend {other:?}; only `mock` is accepted"))),
    }
    config.apply_env(|k| std::env::var(k).ok())?;
    if config.output_dir.as_os_str().is_empty() {
        bail!(PipelineError::Config("no output directory: set output_dir or pass --out".into()));
    }
    Ok(config)
}

fn report(outcomes: &[StageOutcome]) {
    for o in outcomes {
        let state = if o.ran { "done" } else { "already complete" };
        println!("{:<9} {state:<17} {} produced", o.stage.as_str(), o.produced);
    }
}

fn run_stage(args: &RunArgs, stage: impl Fn(&Pipeline) -> Result<Vec<StageOutcome>, PipelineError>) -> Result<()> {
    let config = load_config(args)?;
    let pipeline = Pipeline::from_config(config)?;
    report(&stage(&pipeline)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate(a) => run_stage(&a, |p| p.run_generate().map(|o| vec![o]))?,
        Command::Rollout(a) => run_stage(&a, |p| p.run_rollout().map(|o| vec![o]))?,
        Command::Score(a) => run_stage(&a, |p| p.run_score().map(|o| vec![o]))?,
        Command::Filter(a) => run_stage(&a, |p| p.run_filter().map(|o| vec![o]))?,
        Command::Pairs(a) => run_stage(&a, |p| p.run_pairs().map(|o| vec![o]))?,
        Command::Run(a) => run_stage(&a, Pipeline::run_all)?,
        Command::Stats { paths, json } => {
            let r = run_stats(&paths)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                print!("{}", render_report(&r));
            }
        }
        Command::Verify { a, b } => {
            let (Some(fa), Some(fb)) = (parse_answer(&a), parse_answer(&b)) else {
                let bad = if parse_answer(&a).is_none() { &a } else { &b };
                eprintln!("error: cannot parse {bad:?} as an answer");
                return Ok(ExitCode::from(4));
            };
            println!("{} ({}) vs {} ({})", fa.canonical(), fa.kind(), fb.canonical(), fb.kind());
            if answers_equivalent(&fa, &fb) {
                println!("equivalent");
            } else {
                println!("not equivalent");
                return Ok(ExitCode::from(1));
            }
        }
        Command::RenderTemplate { template, first, second, templates_dir } => {
            let set = match templates_dir {
                Some(dir) => TemplateSet::from_dir(&dir).map_err(PipelineError::from)?,
                None => TemplateSet::builtin(),
            };
            let first = first.as_deref().unwrap_or(PLACEHOLDER_1);
            let second = second.as_deref().unwrap_or(PLACEHOLDER_2);
            let rendered = set.render_texts(template, first, second).map_err(PipelineError::from)?;
            println!("{}", rendered.text);
        }
        Command::Taxonomy => {
            for c in Category::ALL {
                println!("{c:?}\t{}", c.name());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let class = err.chain().find_map(|e| e.downcast_ref::<PipelineError>()).map(PipelineError::class);
    match class {
        Some(ErrorClass::Transport) => 3,
        Some(ErrorClass::Data) => 4,
        Some(ErrorClass::Config) | None => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli).context("instructforge failed") {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
