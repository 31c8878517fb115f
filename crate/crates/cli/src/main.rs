use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use wwas_cli::{load_config, pipeline, report, CliError, RunConfig, Stage};

/// Water-wide association screening of drinking-water analytes against mortality.
#[derive(Parser)]
#[command(name = "wwas", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat key = value config file, or a report.json whose config is reused.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Directory holding the raw input tables.
    #[arg(short, long, global = true)]
    input: Option<PathBuf>,

    /// Directory receiving every output table.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (defaults to $WWAS_THREADS, then all cores).
    #[arg(short, long, global = true)]
    threads: Option<usize>,

    /// Drop censored death rows instead of keeping them as zero counts.
    #[arg(long, global = true)]
    drop_censored: bool,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic raw inputs with planted effects to the input directory.
    Synth,
    /// Aggregate raw inputs into the zip-year panel and apply column filters.
    BuildPanel,
    /// Screen every analyte, apply BH correction and the robustness ladder.
    Screen,
    /// Distributed lag models with a lead term for every analyte.
    Dlm,
    /// Correlations, network, MDS and quantile g-computation mixtures.
    Mixtures,
    /// Penalized-spline exposure-response curves for significant analytes.
    Doseresponse,
    /// Collect stage records into report.json.
    Report,
    /// Run several stages in order and write report.json.
    Run {
        /// Generate synthetic inputs first.
        #[arg(long)]
        synth: bool,
        /// Stages to run (default: all analysis stages).
        #[arg(long, value_enum, value_delimiter = ',')]
        stages: Vec<StageArg>,
    },
    /// Print the effective configuration in config-file format.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Synth,
    BuildPanel,
    Screen,
    Dlm,
    Mixtures,
    Doseresponse,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Synth => Stage::Synth,
            StageArg::BuildPanel => Stage::BuildPanel,
            StageArg::Screen => Stage::Screen,
            StageArg::Dlm => Stage::Dlm,
            StageArg::Mixtures => Stage::Mixtures,
            StageArg::Doseresponse => Stage::DoseResponse,
        }
    }
}

fn config_from(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut overrides = Vec::new();
    if let Some(p) = &cli.input {
        overrides.push(format!("input_dir={}", p.display()));
    }
    if let Some(p) = &cli.out {
        overrides.push(format!("out_dir={}", p.display()));
    }
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(t) = cli.threads {
        overrides.push(format!("threads={t}"));
    }
    if cli.drop_censored {
        overrides.push("drop_censored=true".into());
    }
    overrides.extend(cli.set.iter().cloned());
    load_config(cli.config.as_deref(), &overrides)
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let config = config_from(cli)?;
    let single = |stage: Stage| -> anyhow::Result<()> {
        pipeline::with_pool(&config, || pipeline::run_stage(stage, &config))??;
        Ok(())
    };
    match &cli.command {
        Command::Synth => single(Stage::Synth)?,
        Command::BuildPanel => single(Stage::BuildPanel)?,
        Command::Screen => single(Stage::Screen)?,
        Command::Dlm => single(Stage::Dlm)?,
        Command::Mixtures => single(Stage::Mixtures)?,
        Command::Doseresponse => single(Stage::DoseResponse)?,
        Command::Report => {
            let r = report::write_report(&config)?;
            let stale: Vec<&str> = r.stages.iter().filter(|s| s.stale).map(|s| s.stage.as_str()).collect();
            println!("{}", config.out_dir.join("report.json").display());
            if !stale.is_empty() {
                eprintln!("stale stages: {}", stale.join(", "));
            }
        }
        Command::Run { synth, stages } => {
            let mut list: Vec<Stage> = if stages.is_empty() {
                vec![Stage::BuildPanel, Stage::Screen, Stage::Dlm, Stage::Mixtures, Stage::DoseResponse]
            } else {
                stages.iter().map(|&s| s.into()).collect()
            };
            if *synth {
                list.push(Stage::Synth);
            }
            pipeline::with_pool(&config, || pipeline::run_pipeline(&config, &list))??;
        }
        Command::Config => print!("{}", config.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match execute(&cli).context("wwas failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let err = e
                .downcast_ref::<CliError>()
                .map(|c| CliError {
                    category: c.category,
                    stage: c.stage.clone(),
                    message: c.message.clone(),
                })
                .unwrap_or_else(|| CliError::new(wwas_cli::Category::Stage, format!("{e:#}")));
            eprintln!("{}", err.to_json());
            ExitCode::from(err.category.exit_code() as u8)
        }
    }
}
