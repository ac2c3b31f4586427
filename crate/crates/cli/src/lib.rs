//! Command dispatch for the `deepiv` binary.
//!
//! Every command is deterministic given its arguments and seed: identical
//! invocations write identical artifacts (the benchmark table's wall-time
//! column aside). The master seed comes from `--seed`, then the config
//! file, then the `DEEPIV_SEED` environment variable, then 0.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use deepiv_core::archive::{load_outcome, load_treatment, save_model, ModelArchive};
use deepiv_core::error::{Error, Result};
use deepiv_core::inference::{
    counterfactual_ci, dropout_posterior_predict, split_two_stage,
};
use deepiv_core::io::{
    load_dataset, load_queries, normalized_json, parse_config, save_dataset, save_intervals,
    save_results_table, write_text, IntervalRow,
};
use deepiv_core::outcome::{oos_causal_loss, train_second_stage, SecondStageConfig};
use deepiv_core::rng::RngStream;
use deepiv_core::sim::{run_sweep, simulate, SimConfig, SweepConfig};
use deepiv_core::treatment::{
    oos_deviance, relevance_diagnostic, train_first_stage, FirstStageConfig,
};

#[derive(Parser)]
#[command(
    name = "deepiv",
    version,
    about = "Counterfactual prediction with instrumental variables via two-stage neural networks"
)]
struct Cli {
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from the simulated pricing economy.
    Simulate {
        /// Number of observations.
        #[arg(long)]
        n: usize,
        /// Endogeneity level in [0, 1].
        #[arg(long)]
        rho: f64,
        /// Master seed (falls back to DEEPIV_SEED, then 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the treatment-distribution network by maximum likelihood.
    TrainFirst {
        /// Training dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// First-stage JSON config.
        #[arg(long)]
        config: PathBuf,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Output model archive (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the outcome network against the integral loss.
    TrainSecond {
        /// Training dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// Trained first-stage model archive.
        #[arg(long)]
        first_stage: PathBuf,
        /// Second-stage JSON config.
        #[arg(long)]
        config: PathBuf,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Output model archive (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score trained models on held-out data (deviance, integral loss,
    /// optional instrument-relevance p-value).
    Validate {
        /// Held-out dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// Trained first-stage model archive.
        #[arg(long)]
        first_stage: PathBuf,
        /// Trained second-stage model archive (enables the integral loss).
        #[arg(long)]
        second_stage: Option<PathBuf>,
        /// Monte-Carlo draws per evaluation integral.
        #[arg(long, default_value_t = 500)]
        b_eval: usize,
        /// Permutations for the relevance diagnostic (0 skips it).
        #[arg(long, default_value_t = 0)]
        relevance_permutations: usize,
        /// Master seed (relevance permutations only).
        #[arg(long)]
        seed: Option<u64>,
        /// Output report (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Split-sample IV inference on the outcome network's final layer.
    InferSplit {
        /// Left-out dataset CSV (never used in training).
        #[arg(long)]
        data: PathBuf,
        /// Trained first-stage model archive.
        #[arg(long)]
        first_stage: PathBuf,
        /// Trained second-stage model archive.
        #[arg(long)]
        second_stage: PathBuf,
        /// Query points CSV (columns p, x_<name>...).
        #[arg(long)]
        queries: PathBuf,
        /// Monte-Carlo draws per instrument-feature integral.
        #[arg(long, default_value_t = 500)]
        b_eval: usize,
        /// Confidence level.
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        /// Master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output intervals CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Posterior-predictive bands from dropout resampling.
    InferBayes {
        /// Trained first-stage model archive.
        #[arg(long)]
        first_stage: PathBuf,
        /// Trained second-stage model archive (dropout-trained).
        #[arg(long)]
        second_stage: PathBuf,
        /// Query points CSV (columns p, x_<name>...).
        #[arg(long)]
        queries: PathBuf,
        /// Posterior draws.
        #[arg(long, default_value_t = 500)]
        draws: usize,
        /// Band level.
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        /// Master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output intervals CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the estimator-comparison sweep over the simulated economy.
    Benchmark {
        /// Sweep JSON config.
        #[arg(long)]
        config: PathBuf,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Output results CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse arguments and run; returns the process exit code.
/// 0 = success, 1 = usage error, 2 = compute error.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("DEEPIV_SEED") {
        Ok(text) => text
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("DEEPIV_SEED: not an unsigned integer: {text:?}"))),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>, config_seed: Option<u64>) -> Result<u64> {
    Ok(flag.or(config_seed).or(env_seed()?).unwrap_or(0))
}

macro_rules! note {
    ($quiet:expr, $($arg:tt)*) => {
        if !$quiet {
            eprintln!($($arg)*);
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Simulate { n, rho, seed, out } => {
            let seed = resolve_seed(seed, None)?;
            let config = SimConfig::new(n, rho, seed);
            config.validate()?;
            note!(quiet, "simulating {n} rows at rho={rho} seed={seed}");
            let data = simulate(&config)?;
            save_dataset(&data, &out)?;
            note!(quiet, "wrote {}", out.display());
            Ok(())
        }
        Command::TrainFirst {
            data,
            config,
            seed,
            out,
        } => {
            let mut cfg: FirstStageConfig = parse_config(&config)?;
            cfg.seed = Some(resolve_seed(seed, cfg.seed)?);
            note!(quiet, "first-stage config:\n{}", normalized_json(&cfg)?);
            let dataset = load_dataset(&data)?;
            note!(quiet, "training on {} rows", dataset.n());
            let model = train_first_stage(&dataset, &cfg)?;
            note!(
                quiet,
                "ran {} epochs, best validation deviance at epoch {}",
                model.training.epochs_run,
                model.training.best_epoch
            );
            save_model(&ModelArchive::Treatment(model), &out)?;
            note!(quiet, "wrote {}", out.display());
            Ok(())
        }
        Command::TrainSecond {
            data,
            first_stage,
            config,
            seed,
            out,
        } => {
            let mut cfg: SecondStageConfig = parse_config(&config)?;
            cfg.seed = Some(resolve_seed(seed, cfg.seed)?);
            note!(quiet, "second-stage config:\n{}", normalized_json(&cfg)?);
            let dataset = load_dataset(&data)?;
            let tmodel = load_treatment(&first_stage)?;
            note!(quiet, "training on {} rows", dataset.n());
            let model = train_second_stage(&dataset, &tmodel, &cfg)?;
            note!(
                quiet,
                "final training loss {:.6}",
                model.training.train_loss.last().copied().unwrap_or(f64::NAN)
            );
            save_model(&ModelArchive::Outcome(model), &out)?;
            note!(quiet, "wrote {}", out.display());
            Ok(())
        }
        Command::Validate {
            data,
            first_stage,
            second_stage,
            b_eval,
            relevance_permutations,
            seed,
            out,
        } => {
            let dataset = load_dataset(&data)?;
            let tmodel = load_treatment(&first_stage)?;
            let deviance = oos_deviance(&tmodel, &dataset)?;
            let causal_loss = match &second_stage {
                Some(path) => {
                    let omodel = load_outcome(path)?;
                    Some(oos_causal_loss(&omodel, &tmodel, &dataset, b_eval)?)
                }
                None => None,
            };
            let relevance = if relevance_permutations > 0 {
                let seed = resolve_seed(seed, None)?;
                let mut stream = RngStream::root(seed).derive(&[0x0BE1]);
                Some(relevance_diagnostic(
                    &tmodel,
                    &dataset,
                    relevance_permutations,
                    &mut stream,
                )?)
            } else {
                None
            };
            let report = serde_json::json!({
                "n": dataset.n(),
                "b_eval": b_eval,
                "oos_deviance": deviance,
                "oos_causal_loss": causal_loss,
                "relevance_p_value": relevance,
            });
            write_text(&out, &format!("{:#}\n", report))?;
            note!(quiet, "oos deviance {deviance:.6}");
            if let Some(loss) = causal_loss {
                note!(quiet, "oos causal loss {loss:.6}");
            }
            note!(quiet, "wrote {}", out.display());
            Ok(())
        }
        Command::InferSplit {
            data,
            first_stage,
            second_stage,
            queries,
            b_eval,
            level,
            seed,
            out,
        } => {
            let dataset = load_dataset(&data)?;
            let tmodel = load_treatment(&first_stage)?;
            let omodel = load_outcome(&second_stage)?;
            let query_points = load_queries(&queries, &omodel.layout)?;
            let seed = resolve_seed(seed, None)?;
            let mut stream = RngStream::root(seed).derive(&[0x5711]);
            note!(
                quiet,
                "split inference on {} left-out rows, {} queries",
                dataset.n(),
                query_points.len()
            );
            let result = split_two_stage(&omodel, &tmodel, &dataset, b_eval, &mut stream)?;
            if result.ridged {
                note!(
                    quiet,
                    "note: near-collinear features (condition {:.3e}), ridge applied",
                    result.condition_number
                );
            }
            let mut rows = Vec::with_capacity(query_points.len());
            for (p, x) in &query_points {
                let (est, half) = counterfactual_ci(&result, &omodel, *p, x, level)?;
                rows.push(IntervalRow {
                    p: *p,
                    x: x.clone(),
                    estimate: est,
                    lower: est - half,
                    upper: est + half,
                    method: "split".into(),
                });
            }
            save_intervals(&rows, &omodel.layout, &out)?;
            note!(quiet, "wrote {}", out.display());
            Ok(())
        }
        Command::InferBayes {
            first_stage,
            second_stage,
            queries,
            draws,
            level,
            seed,
            out,
        } => {
            let tmodel = load_treatment(&first_stage)?;
            let omodel = load_outcome(&second_stage)?;
            let query_points = load_queries(&queries, &omodel.layout)?;
            let seed = resolve_seed(seed, None)?;
            let mut stream = RngStream::root(seed).derive(&[0xBA7E]);
            note!(
                quiet,
                "posterior bands over {} queries, {draws} draws",
                query_points.len()
            );
            let band =
                dropout_posterior_predict(&omodel, &tmodel, &query_points, draws, level, &mut stream)?;
            let rows: Vec<IntervalRow> = query_points
                .iter()
                .enumerate()
                .map(|(i, (p, x))| IntervalRow {
                    p: *p,
                    x: x.clone(),
                    estimate: band.mean[i],
                    lower: band.lower[i],
                    upper: band.upper[i],
                    method: "vb".into(),
                })
                .collect();
            save_intervals(&rows, &omodel.layout, &out)?;
            note!(quiet, "wrote {}", out.display());
            Ok(())
        }
        Command::Benchmark { config, seed, out } => {
            let mut cfg: SweepConfig = parse_config(&config)?;
            if let Some(s) = seed.or(env_seed()?) {
                cfg.master_seed = s;
            }
            note!(quiet, "sweep config:\n{}", normalized_json(&cfg)?);
            let table = run_sweep(&cfg)?;
            let failures = table.rows.iter().filter(|r| r.status != "ok").count();
            note!(
                quiet,
                "finished {} cells ({failures} failures)",
                table.rows.len()
            );
            save_results_table(&table, &out)?;
            note!(quiet, "wrote {}", out.display());
            Ok(())
        }
    }
}
