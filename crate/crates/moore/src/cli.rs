//! Command-line entry point: train / transfer / sweep / analyze /
//! gradcheck / verify over the experiment manager. Exit codes: 0 success,
//! 1 invariant or run failure, 2 usage error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::expman::{
    apply_overrides, comparison_table, load_checkpoint, pca_task_weights, run_many,
    sweep, EarlyStop, ExpError, ExperimentConfig, HeadChoice, ReprChoice, SweepAxis,
};
use crate::logging;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser)]
#[command(name = "moore", about = "Multi-task RL lab with orthogonal mixtures of experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Path to a JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a suite's published defaults instead of a file.
    #[arg(long)]
    suite: Option<String>,
    /// Dotted-path overrides, e.g. k=4 or ppo.clip_eps=0.3 (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seeds to run (repeatable); defaults to the config's seed list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Raise an error on near-degenerate Gram-Schmidt columns.
    #[arg(long)]
    strict_gs: bool,
}

#[derive(Args, Clone)]
struct OutArgs {
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration across its seed list.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train novel tasks on top of frozen experts from a source checkpoint.
    Transfer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Source checkpoint with the trained expert stack.
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Run one axis across its values and the seed list, then aggregate.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Axis spec: k=2,4 | representation=moore,moe |
        /// head_mode=multi,single | permutation=0-1-2,1-2-0
        #[arg(long)]
        axis: String,
    },
    /// Principal-component coordinates of a checkpoint's task weights.
    Analyze {
        /// Checkpoint to analyze.
        checkpoint: PathBuf,
        /// Optional output directory for the CSV (stdout otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference check through the full actor pipeline.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![6, 12])]
        channels: Vec<usize>,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run the invariant suite and print one line per check.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn run() -> i32 {
    let args: Vec<String> = std::env::args().collect();
    dispatch(&args)
}

/// Parses and executes one invocation; the entry point for both `main`
/// and the CLI tests.
pub fn dispatch(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version as "errors" with success status
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            logging::error(msg);
            EXIT_USAGE
        }
        Err(CliError::Failure(msg)) => {
            logging::error(msg);
            EXIT_FAILURE
        }
    }
}

enum CliError {
    Usage(String),
    Failure(String),
}

impl From<ExpError> for CliError {
    fn from(e: ExpError) -> Self {
        match e {
            ExpError::Config(_) | ExpError::Env(_) => CliError::Usage(e.to_string()),
            other => CliError::Failure(other.to_string()),
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match (&args.config, &args.suite) {
        (Some(path), _) => {
            let body = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {path:?}: {e}")))?;
            ExperimentConfig::from_json(&body)?
        }
        (None, Some(suite)) => ExperimentConfig::defaults_for(suite)?,
        (None, None) => {
            return Err(CliError::Usage(
                "provide --config PATH or --suite NAME".into(),
            ))
        }
    };
    let mut pairs = Vec::new();
    for o in &args.overrides {
        let Some((k, v)) = o.split_once('=') else {
            return Err(CliError::Usage(format!(
                "override {o:?} is not KEY=VALUE"
            )));
        };
        pairs.push((k.to_string(), v.to_string()));
    }
    if !pairs.is_empty() {
        cfg = apply_overrides(&cfg, &pairs)?;
    }
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    }
    if args.strict_gs {
        cfg.strict_gs = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(out: &OutArgs) -> Result<(), CliError> {
    if out.out.exists() {
        let non_empty = std::fs::read_dir(&out.out)
            .map_err(|e| CliError::Failure(e.to_string()))?
            .next()
            .is_some();
        if non_empty && !out.force {
            return Err(CliError::Usage(format!(
                "output directory {:?} is not empty; pass --force to reuse it",
                out.out
            )));
        }
    } else {
        std::fs::create_dir_all(&out.out).map_err(|e| CliError::Failure(e.to_string()))?;
    }
    Ok(())
}

fn execute(cmd: Command) -> Result<i32, CliError> {
    match cmd {
        Command::Train { cfg, out } => {
            let config = load_config(&cfg)?;
            prepare_out(&out)?;
            run_all_seeds(&config, &out.out)
        }
        Command::Transfer { cfg, out, source } => {
            let mut config = load_config(&cfg)?;
            if let Some(src) = source {
                config.transfer_source = Some(src.to_string_lossy().into_owned());
            }
            if config.transfer_source.is_none() {
                return Err(CliError::Usage(
                    "transfer needs --source or transfer_source in the config".into(),
                ));
            }
            config.validate()?;
            prepare_out(&out)?;
            run_all_seeds(&config, &out.out)
        }
        Command::Sweep { cfg, out, axis } => {
            let config = load_config(&cfg)?;
            prepare_out(&out)?;
            let axis = parse_axis(&axis)?;
            let report = sweep(&config, &axis, &out.out, EarlyStop::None)?;
            print!("{}", comparison_table(&report));
            logging::info(format!("aggregate written to {:?}", report.csv_path));
            Ok(EXIT_OK)
        }
        Command::Analyze {
            checkpoint,
            out,
            force,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let coords = pca_task_weights(&ck)?;
            let mut csv = String::from("task,x,y\n");
            for (name, x, y) in &coords {
                csv.push_str(&format!("{name},{x},{y}\n"));
            }
            match out {
                Some(dir) => {
                    prepare_out(&OutArgs {
                        out: dir.clone(),
                        force,
                    })?;
                    let path = dir.join("task_weight_pca.csv");
                    std::fs::write(&path, csv).map_err(|e| CliError::Failure(e.to_string()))?;
                    println!("{}", path.display());
                }
                None => print!("{csv}"),
            }
            Ok(EXIT_OK)
        }
        Command::Gradcheck {
            k,
            channels,
            step,
            tol,
            seed,
        } => {
            let report = crate::verify::actor_gradcheck(k, &channels, step, tol, seed)
                .map_err(|e| CliError::Failure(e.to_string()))?;
            println!(
                "gradcheck: {} coordinates, max rel err {:.3e} (tol {:.1e}) -> {}",
                report.coords,
                report.max_rel_err,
                report.tol,
                if report.pass { "PASS" } else { "FAIL" }
            );
            Ok(if report.pass { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::Verify { seed } => {
            let outcomes = crate::verify::run_all(seed);
            let mut all_pass = true;
            for o in &outcomes {
                println!(
                    "{}: {} ({})",
                    o.name,
                    if o.pass { "PASS" } else { "FAIL" },
                    o.detail
                );
                all_pass &= o.pass;
            }
            Ok(if all_pass { EXIT_OK } else { EXIT_FAILURE })
        }
    }
}

fn run_all_seeds(config: &ExperimentConfig, out: &Path) -> Result<i32, CliError> {
    let jobs: Vec<_> = config
        .seeds
        .iter()
        .map(|&seed| (config.clone(), seed, out.to_path_buf(), EarlyStop::None))
        .collect();
    let results = run_many(jobs);
    let mut failures = 0;
    for res in results {
        match res {
            Ok(art) => {
                let last = art.records.last().expect("at least the step-0 evaluation");
                println!(
                    "{}: steps {} avg_return {:.4} avg_success {:.3} (baseline {:.4}) -> {}",
                    art.run_id,
                    art.steps_taken,
                    last.avg_return,
                    last.avg_success,
                    art.baseline.avg_return,
                    art.metrics_path.display()
                );
            }
            Err(e) => {
                logging::error(e.to_string());
                failures += 1;
            }
        }
    }
    Ok(if failures == 0 { EXIT_OK } else { EXIT_FAILURE })
}

fn parse_axis(spec: &str) -> Result<SweepAxis, CliError> {
    let Some((name, values)) = spec.split_once('=') else {
        return Err(CliError::Usage(format!(
            "axis {spec:?} is not NAME=V1,V2,..."
        )));
    };
    let items: Vec<&str> = values.split(',').filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(CliError::Usage("axis has no values".into()));
    }
    match name {
        "k" => {
            let ks = items
                .iter()
                .map(|s| s.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Usage(format!("bad k value: {e}")))?;
            Ok(SweepAxis::K(ks))
        }
        "representation" => {
            let reprs = items
                .iter()
                .map(|s| match *s {
                    "moore" => Ok(ReprChoice::Moore),
                    "moe" => Ok(ReprChoice::Moe),
                    "cosine_sim" => Ok(ReprChoice::CosineSim),
                    other => Err(CliError::Usage(format!("unknown representation {other:?}"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SweepAxis::Representation(reprs))
        }
        "head_mode" => {
            let modes = items
                .iter()
                .map(|s| match *s {
                    "multi" => Ok(HeadChoice::Multi),
                    "single" => Ok(HeadChoice::Single),
                    other => Err(CliError::Usage(format!("unknown head mode {other:?}"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SweepAxis::HeadMode(modes))
        }
        "permutation" => {
            let perms = items
                .iter()
                .map(|s| {
                    s.split('-')
                        .map(|t| t.parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| CliError::Usage(format!("bad permutation {s:?}: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SweepAxis::Permutation(perms))
        }
        other => Err(CliError::Usage(format!("unknown sweep axis {other:?}"))),
    }
}
