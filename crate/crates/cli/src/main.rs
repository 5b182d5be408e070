use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dosing_ope::annotate::AggregationMode;
use dosing_ope_cli::commands;
use dosing_ope_cli::config::{AnnotatorKind, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "dosing-ope",
    version,
    about = "Off-policy evaluation of dosing policies with counterfactual annotations"
)]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for simulation, selection, cloning and bootstrap.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    annotator: Option<AnnotatorKind>,
    /// How annotations from several sources are combined.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Pool,
    Average,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a cohort and its behavior/target split.
    Simulate,
    /// Fit behavior and target policies on the split.
    ClonePolicy,
    /// Query the annotator for counterfactual labs.
    Annotate,
    /// Run the full bootstrap comparison and write the report.
    Evaluate,
    /// Action entropy as annotations are added.
    EntropyCurve {
        /// Use the whole annotation budget instead of the schedule maximum.
        #[arg(long)]
        full_budget: bool,
    },
    /// Re-render tables and charts from an existing report.json.
    Report,
    /// Print the effective configuration as TOML.
    PrintConfig,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    if let Some(kind) = cli.annotator {
        cfg.annotator.kind = kind;
    }
    if let Some(mode) = cli.mode {
        cfg.aggregation = match mode {
            Mode::Pool => AggregationMode::Pool,
            Mode::Average => AggregationMode::Average,
        };
    }
    cfg.validate()?;

    let written = match cli.command {
        Command::Simulate => commands::cmd_simulate(&cfg)?,
        Command::ClonePolicy => commands::cmd_clone_policy(&cfg)?,
        Command::Annotate => {
            let (paths, summary) = commands::cmd_annotate(&cfg)?;
            eprintln!(
                "annotated {} target(s) per source; {} dropped; {} annotation(s) after aggregation",
                summary.requested_per_source,
                summary.dropped.len(),
                summary.aggregated
            );
            paths
        }
        Command::Evaluate => {
            let (paths, report) = commands::cmd_evaluate(&cfg)?;
            for e in &report.estimators {
                eprintln!("{:<4} RMSE {:.6} (SE {:.6})", e.estimator, e.rmse, e.standard_error);
            }
            if let Some(h) = report.headline() {
                eprintln!(
                    "DM vs DM+ ({} annotations): t = {:.3}, p = {:.3e}, significant = {}",
                    h.annotations, h.test.t, h.test.p_two_sided, h.test.significant
                );
            }
            paths
        }
        Command::EntropyCurve { full_budget } => commands::cmd_entropy_curve(&cfg, full_budget)?.0,
        Command::Report => commands::cmd_report(&cfg)?,
        Command::PrintConfig => {
            print!("{}", cfg.to_toml()?);
            Vec::new()
        }
    };
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
