//! Command-line front end: calibrate artifacts, run policies, sweep grids,
//! rescore stored logs and emit cost/violation frontier data.
//!
//! The seed comes from `DRIFT2ACT_SEED` (default 1) for every subcommand.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use drift2act::belief::{deserialize_model, serialize_model};
use drift2act::controller::GainTable;
use drift2act::harness::export::{
    export_log, export_report, import_log, metrics_to_csv, pareto_to_csv, read_text, sweep_to_csv, write_text,
    LogFormat,
};
use drift2act::harness::sweep::replica_seed;
use drift2act::harness::{episode_config, run_stream, run_sweep, Artifacts, MetricsReport, Policy, RunConfig, SweepGrid};
use drift2act::simenv::calibrate::{calibrate_gain_table, CalibrationConfig};
use drift2act::simenv::DriftPattern;
use drift2act::{Error, Result};

const SEED_VAR: &str = "DRIFT2ACT_SEED";
const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Parser)]
#[command(name = "drift2act", version, about = "Certified drift response on synthetic streams")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set stream.delay=25`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the belief model and write it with a gain table.
    Calibrate {
        /// Output directory for `belief.txt`, `gains.txt` and `config.txt`.
        #[arg(long)]
        out: PathBuf,
        /// Estimate gains from paired counterfactual interventions instead of
        /// writing the reference table.
        #[arg(long)]
        counterfactual_gains: bool,
    },
    /// Run one policy on one stream.
    Run {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        #[arg(long)]
        log: PathBuf,
        /// `jsonl` or `csv`.
        #[arg(long, default_value = "jsonl")]
        format: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Grid runs with per-cell replicas.
    Sweep {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        #[arg(long, value_delimiter = ',')]
        delays: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        label_costs: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        monitor_noise: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        patterns: Vec<String>,
        #[arg(long, default_value_t = 5)]
        replicas: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics from a stored JSON-lines log.
    Report {
        #[arg(long)]
        log: PathBuf,
        /// Write JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cost and violation count of every policy over replica seeds.
    Pareto {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        #[arg(long, default_value_t = 5)]
        replicas: usize,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-run metrics table.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ArtifactArgs {
    /// Belief model from `calibrate`; fitted on the fly when absent.
    #[arg(long)]
    belief: Option<PathBuf>,
    /// Gain table from `calibrate`; the reference table when absent.
    #[arg(long)]
    gains: Option<PathBuf>,
}

fn seed_from_env() -> Result<u64> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|e| Error::Parse {
                context: SEED_VAR.into(),
                detail: format!("{v:?}: {e}"),
            }),
        Err(std::env::VarError::NotPresent) => Ok(DEFAULT_SEED),
        Err(e) => Err(Error::Parse {
            context: SEED_VAR.into(),
            detail: e.to_string(),
        }),
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_text(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_artifacts(cfg: &RunConfig, args: &ArtifactArgs, seed: u64) -> Result<Artifacts> {
    let mut artifacts = match &args.belief {
        Some(p) => {
            let (emission, transition) = deserialize_model(&read_text(p)?)?;
            Artifacts {
                emission,
                transition,
                gains: GainTable::default(),
            }
        }
        None => Artifacts::fit(cfg, &episode_config(cfg), seed)?.0,
    };
    if let Some(p) = &args.gains {
        artifacts.gains = GainTable::from_text(&read_text(p)?)?;
    }
    Ok(artifacts)
}

fn execute(cli: Cli) -> Result<()> {
    let seed = seed_from_env()?;
    let cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Calibrate {
            out,
            counterfactual_gains,
        } => {
            let (artifacts, _) = Artifacts::fit(&cfg, &episode_config(&cfg), seed)?;
            let gains = if counterfactual_gains {
                calibrate_gain_table(&cfg.stream, &CalibrationConfig::default(), seed)?
            } else {
                artifacts.gains.clone()
            };
            write_text(
                &out.join("belief.txt"),
                &serialize_model(&artifacts.emission, &artifacts.transition),
            )?;
            write_text(&out.join("gains.txt"), &gains.to_text())?;
            write_text(&out.join("config.txt"), &cfg.to_text())?;
        }
        Command::Run {
            artifacts,
            log,
            format,
            report,
        } => {
            let format = LogFormat::parse(&format)?;
            let artifacts = load_artifacts(&cfg, &artifacts, seed)?;
            let out = run_stream(&cfg, &artifacts, seed)?;
            export_log(&out.log, &log, format)?;
            match report {
                Some(p) => export_report(&out.report, &p)?,
                None => println!("{}", report_json(&out.report)?),
            }
        }
        Command::Sweep {
            artifacts,
            delays,
            budgets,
            label_costs,
            monitor_noise,
            patterns,
            replicas,
            out,
        } => {
            let grid = SweepGrid {
                delays,
                budgets,
                label_costs,
                monitor_noise,
                patterns: patterns
                    .iter()
                    .map(|p| DriftPattern::parse(p))
                    .collect::<Result<_>>()?,
            };
            let artifacts = load_artifacts(&cfg, &artifacts, seed)?;
            let rows = run_sweep(&cfg, &grid, &artifacts, replicas, seed)?;
            write_text(&out, &sweep_to_csv(&rows))?;
        }
        Command::Report { log, out } => {
            let entries = import_log(&log)?;
            let report = MetricsReport::from_log(&entries, &cfg.stream.onsets(), cfg.controller.tau);
            match out {
                Some(p) => export_report(&report, &p)?,
                None => println!("{}", report_json(&report)?),
            }
        }
        Command::Pareto {
            artifacts,
            replicas,
            out,
            metrics,
        } => {
            if replicas == 0 {
                return Err(Error::Invalid {
                    what: "replicas",
                    detail: "need at least one replica".into(),
                });
            }
            let artifacts = load_artifacts(&cfg, &artifacts, seed)?;
            let mut runs = Vec::new();
            for policy in Policy::ALL {
                let run_cfg = RunConfig { policy, ..cfg.clone() };
                for r in 0..replicas {
                    let s = replica_seed(seed, r);
                    runs.push((policy, s, run_stream(&run_cfg, &artifacts, s)?.report));
                }
            }
            let points: Vec<_> = runs
                .iter()
                .map(|(p, s, rep)| (*p, *s, rep.total_cost, rep.violations))
                .collect();
            write_text(&out, &pareto_to_csv(&points))?;
            if let Some(p) = metrics {
                let rows: Vec<_> = runs.iter().map(|(p, s, rep)| (*p, *s, rep)).collect();
                write_text(&p, &metrics_to_csv(&rows))?;
            }
        }
    }
    Ok(())
}

fn report_json(report: &MetricsReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::Parse {
        context: "metrics report".into(),
        detail: e.to_string(),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
