use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ipmo::backtest::{run_backtest, select_and_backtest, StrategyKind};
use ipmo::bench::{bench_runtime, BenchConfig};
use ipmo::forecast::{save_checkpoint, train_ipmo, train_two_stage, IpmoSettings, LinearPredictor, TrainingWindow};
use ipmo::io::{load_returns_csv, write_returns_csv, RunConfig, SyntheticSpec};
use ipmo::{Error, RealizedPanel};

#[derive(Parser)]
#[command(name = "ipmo", version, about = "Integrated prediction and multi-period portfolio optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMode {
    Ipmo,
    TwoStage,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a returns CSV and print a summary.
    Ingest {
        /// CSV to check; defaults to the config's `[data] csv`.
        input: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic returns panel and write it as CSV.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Without a config: number of assets of the built-in two-regime market.
        #[arg(long, default_value_t = 7)]
        assets: usize,
        #[arg(long, default_value_t = 2000)]
        days: usize,
        /// Days per regime block.
        #[arg(long, default_value_t = 250)]
        block: usize,
    },
    /// Fit a forecaster at the last decision date and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = TrainMode::Ipmo)]
        mode: TrainMode,
    },
    /// Run the walk-forward backtest and export NAV, weights and metrics.
    Backtest {
        #[command(flatten)]
        common: Common,
        /// Select hyperparameters over the config grid on decision rows
        /// before this panel row, then report the chosen point from it on.
        #[arg(long)]
        select_split: Option<usize>,
    },
    /// Cross-check sensitivities and the end-to-end training gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        interior: usize,
        #[arg(long, default_value_t = 20)]
        boundary: usize,
    },
    /// Time one training epoch per horizon with both backward methods.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [10, 50, 100])]
        horizons: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
}

/// Exit codes by failure category; clap uses 2 for usage errors.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) => match e.category() {
            "config-error" => 3,
            "load-error" | "io-error" => 4,
            "invalid-parameter" | "shape-error" | "insufficient-data" | "precondition-error" => 5,
            "numeric-error" | "divergence-error" | "oracle-error" | "degenerate-instance" => 6,
            "training-error" => 7,
            _ => 1,
        },
        None => 1,
    }
}

fn load_config(common: &Common) -> anyhow::Result<Option<RunConfig>> {
    let Some(path) = &common.config else { return Ok(None) };
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(Some(cfg))
}

fn require_config(common: &Common) -> anyhow::Result<RunConfig> {
    load_config(common)?.ok_or_else(|| Error::Config("this command needs --config".into()).into())
}

fn out_dir(common: &Common, default: &str) -> anyhow::Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&dir).map_err(Error::from).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn describe(panel: &RealizedPanel) -> String {
    format!(
        "{} rows x {} assets ({}), {} .. {}",
        panel.len(),
        panel.n_assets(),
        panel.tickers.join(","),
        panel.dates[0],
        panel.dates[panel.len() - 1]
    )
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value).map_err(Error::from)?).map_err(Error::from)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest { input, common } => {
            let path = match input {
                Some(p) => p,
                None => require_config(&common)?
                    .data
                    .csv
                    .ok_or_else(|| Error::Config("no input file given and no `[data] csv` in the config".into()))?,
            };
            let panel = load_returns_csv(&path)?;
            println!("ok: {}", describe(&panel));
        }
        Command::Synth { common, assets, days, block } => {
            let (spec, seed) = match load_config(&common)? {
                Some(cfg) => (
                    cfg.data
                        .synthetic
                        .clone()
                        .ok_or_else(|| Error::Config("config has no `[data] synthetic` section".into()))?,
                    cfg.seed,
                ),
                None => (SyntheticSpec::two_regime(assets, days, block), common.seed.unwrap_or(0)),
            };
            let panel = ipmo::io::generate_synthetic(&spec, seed)?;
            let dir = out_dir(&common, "out")?;
            let path = dir.join("returns.csv");
            write_returns_csv(&panel, std::fs::File::create(&path).map_err(Error::from)?)?;
            println!("wrote {}: {}", path.display(), describe(&panel));
        }
        Command::Train { common, mode } => {
            let cfg = require_config(&common)?;
            let panel = cfg.load_panel()?;
            let bt = cfg.backtest_config();
            let t = panel.len() - 1;
            let window = TrainingWindow::build(&panel.returns, t, bt.lookback_train, bt.input_len, bt.horizon, &bt.ewma)?;
            let model = LinearPredictor::new(panel.n_assets(), bt.horizon, bt.input_len, bt.features, bt.l2_beta, bt.hyper.clone())?
                .randomized(cfg.seed, bt.init_scale);
            let outcome = match mode {
                TrainMode::TwoStage => train_two_stage(&window, &model)?,
                TrainMode::Ipmo => {
                    let settings = IpmoSettings::new(bt.problem(panel.n_assets(), bt.horizon)?, bt.solver.clone(), bt.neumann.clone());
                    train_ipmo(&window, &model, &settings)?
                }
            };
            let dir = out_dir(&common, "out")?;
            let path = dir.join("model.json");
            save_checkpoint(&outcome.model, Some(&window.fingerprint()), &path)?;
            let losses = &outcome.trace.epoch_losses;
            println!(
                "trained on {} samples, loss {:.6e} -> {:.6e}, skipped {}, wrote {}",
                window.len(),
                losses.first().copied().unwrap_or(f64::NAN),
                losses.last().copied().unwrap_or(f64::NAN),
                outcome.trace.skipped_samples,
                path.display()
            );
        }
        Command::Backtest { common, select_split } => {
            let cfg = require_config(&common)?;
            let panel = cfg.load_panel()?;
            let bt = cfg.backtest_config();
            let dir = out_dir(&common, "out")?;
            let report = match select_split {
                None => run_backtest(&panel, &bt, cfg.seed)?,
                Some(split) => {
                    let outcome = select_and_backtest(&panel, &bt, &cfg.grid.points(), split, cfg.seed)?;
                    let rows: Vec<serde_json::Value> = outcome
                        .candidates
                        .iter()
                        .map(|c| serde_json::json!({ "point": c.item, "in_sample_net": c.metrics }))
                        .collect();
                    write_json(&dir.join("selection.json"), &serde_json::json!({ "chosen": outcome.chosen, "candidates": rows }))?;
                    println!(
                        "selected learning_rate={} lambda={} horizon={}",
                        outcome.chosen.learning_rate, outcome.chosen.lambda, outcome.chosen.horizon
                    );
                    outcome.report
                }
            };
            report.export(&dir)?;
            let m = &report.metrics_net;
            println!(
                "{}: net return {:.4}, vol {:.4}, sharpe {}, mdd {:.4}, turnover {:.5}; {} warnings; wrote {}",
                report.strategy.name(),
                m.ann_return,
                m.ann_vol,
                m.sharpe.map_or("undefined".to_string(), |s| format!("{s:.3}")),
                m.mdd,
                m.turnover,
                report.warnings.len(),
                dir.display()
            );
            if bt.strategy == StrategyKind::Ipmo && report.fits == 0 {
                log::warn!("no successful fit; all decisions held the initial weights");
            }
        }
        Command::Gradcheck { common, interior, boundary } => {
            let seed = common.seed.or(load_config(&common)?.map(|c| c.seed)).unwrap_or(0);
            let tri = ipmo::gradcheck::oracle_triangle(seed, interior, boundary)?;
            println!("interior instances     {}", tri.interior_cases);
            println!("  mdfp vs kkt          {:.3e}", tri.mdfp_vs_kkt);
            println!("  mdfp vs fd           {:.3e}", tri.mdfp_vs_fd);
            println!("  kkt vs fd            {:.3e}", tri.kkt_vs_fd);
            println!("  neumann vs dense     {:.3e}", tri.neumann_vs_dense);
            println!("  max neumann residual {:.3e}", tri.max_neumann_residual);
            println!("boundary instances     {}", tri.boundary_cases);
            println!("  worst discrepancy    {:.3e}", tri.boundary_worst);
            println!("  min multiplier gap   {:.3e}", tri.min_complementarity_gap);
            println!("  active blocks zero   {}", tri.active_blocks_zero);
            let pipe = ipmo::gradcheck::pipeline_gradcheck(seed)?;
            println!("pipeline gradient      {} parameters, worst relative error {:.3e}", pipe.parameters, pipe.worst_relative_error);
            if let Some(dir) = &common.out {
                std::fs::create_dir_all(dir).map_err(Error::from)?;
                write_json(&dir.join("gradcheck.json"), &serde_json::json!({ "triangle": tri, "pipeline": pipe }))?;
            }
        }
        Command::Bench { common, horizons, reps } => {
            let mut bcfg = BenchConfig::default();
            if let Some(cfg) = load_config(&common)? {
                bcfg.seed = cfg.seed;
                bcfg.delta = cfg.problem.delta;
                bcfg.lambda = cfg.problem.lambda;
                bcfg.kappa = cfg.problem.kappa;
                bcfg.solver = cfg.solver.clone();
                bcfg.neumann = cfg.neumann.clone();
            }
            if let Some(seed) = common.seed {
                bcfg.seed = seed;
            }
            let result = bench_runtime(&horizons, &bcfg, reps)?;
            result.write_csv(std::io::stdout())?;
            if let Some(dir) = &common.out {
                std::fs::create_dir_all(dir).map_err(Error::from)?;
                result.write_csv(std::fs::File::create(dir.join("bench.csv")).map_err(Error::from)?)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let category = err.downcast_ref::<Error>().map_or("error", |e| e.category());
            eprintln!("error [{category}]: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
