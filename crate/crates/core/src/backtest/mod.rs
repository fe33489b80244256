//! Walk-forward model-predictive backtest: re-plan every day, execute only
//! the first stage, retrain the forecaster periodically, charge
//! proportional costs on traded weight.

mod metrics;
mod select;

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::domain::{AllocationPath, ForecastPath, ProblemParams, RealizedPanel, StageMatrix};
use crate::error::{Error, Result};
use crate::forecast::{covariance_path, train_ipmo_cached, train_two_stage, EwmaConfig, FeatureMode, Hyper, IpmoSettings, LinearPredictor, TrainingWindow};
use crate::mdfp::NeumannConfig;
use crate::solver::{solve_fixed_point, SolverConfig};

pub use metrics::{compute_metrics, drawdowns, total_variation, MetricSet};
pub use select::{select_and_backtest, select_config, GridPoint, SelectionCandidate, SelectionOutcome};

pub const PERIODS_PER_YEAR: f64 = 252.0;

/// A plan that stalls short of the solver tolerance is still executed when
/// its fixed-point residual is below this; weights are only traded to a few
/// decimals anyway.
pub const EXECUTION_TOL: f64 = 1e-6;

/// Days per total-variation block.
pub const TV_WINDOW: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    /// Forecaster trained on the decision loss through the optimizer.
    Ipmo,
    /// Forecaster trained on MSE, then fed to the same optimizer.
    TwoStage,
    /// Constant 1/N.
    Ew,
    /// Single-period mean-variance with the sample mean.
    Mv,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Ipmo => "ipmo",
            StrategyKind::TwoStage => "two-stage",
            StrategyKind::Ew => "ew",
            StrategyKind::Mv => "mv",
        }
    }

    fn learns(self) -> bool {
        matches!(self, StrategyKind::Ipmo | StrategyKind::TwoStage)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub strategy: StrategyKind,
    /// Training samples per fit.
    pub lookback_train: usize,
    pub retrain_every: usize,
    /// Input window length `L` in days.
    pub input_len: usize,
    pub horizon: usize,
    /// One-way proportional cost in basis points of traded weight.
    pub cost_bps: f64,
    pub delta: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub ewma: EwmaConfig,
    /// Days in the sample mean used by the MV baseline.
    pub mv_mean_window: usize,
    pub solver: SolverConfig,
    pub neumann: NeumannConfig,
    pub hyper: Hyper,
    pub l2_beta: f64,
    pub features: FeatureMode,
    /// Epochs for refits after the first; `None` reuses `hyper.epochs`.
    /// Refits start from the previous parameters.
    pub refit_epochs: Option<usize>,
    /// Half-width of the uniform initial weights of the predictor.
    pub init_scale: f64,
    /// First decision row; defaults to the earliest row with enough history.
    pub start_row: Option<usize>,
    /// Last decision row (inclusive); defaults to the second-to-last row.
    pub end_row: Option<usize>,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Ipmo,
            lookback_train: 250,
            retrain_every: 20,
            input_len: 120,
            horizon: 5,
            cost_bps: 20.0,
            delta: 1.0,
            lambda: 0.001,
            kappa: crate::objective::DEFAULT_KAPPA,
            ewma: EwmaConfig::default(),
            mv_mean_window: 120,
            solver: SolverConfig::default(),
            neumann: NeumannConfig::default(),
            hyper: Hyper::default(),
            l2_beta: 0.0,
            features: FeatureMode::BlockMean,
            refit_epochs: None,
            init_scale: 0.01,
            start_row: None,
            end_row: None,
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookback_train == 0 || self.retrain_every == 0 || self.input_len == 0 || self.horizon == 0 || self.mv_mean_window == 0 {
            return Err(Error::InvalidParameter("backtest window sizes must be positive".into()));
        }
        if !(self.cost_bps >= 0.0 && self.cost_bps.is_finite()) {
            return Err(Error::InvalidParameter(format!("cost_bps must be >= 0, got {}", self.cost_bps)));
        }
        self.ewma.validate()?;
        self.solver.validate()?;
        self.neumann.validate()?;
        ProblemParams::new(self.delta, self.lambda, self.kappa, self.horizon, 2)?;
        Ok(())
    }

    pub fn cost_rate(&self) -> f64 {
        self.cost_bps * 1e-4
    }

    pub fn problem(&self, n_assets: usize, horizon: usize) -> Result<ProblemParams> {
        let mut p = ProblemParams::new(self.delta, self.lambda, self.kappa, horizon, n_assets)?;
        p.cov_jitter = self.ewma.jitter;
        Ok(p)
    }

    /// Earliest decision row every strategy can trade on.
    pub fn first_decision_row(&self) -> usize {
        let learned = TrainingWindow::first_decision_row(self.lookback_train, self.input_len, self.horizon, &self.ewma);
        learned.max(self.mv_mean_window - 1).max(self.ewma.window - 1)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BacktestReport {
    pub strategy: StrategyKind,
    pub tickers: Vec<String>,
    /// NAV dates: the first decision date, then each realized day.
    pub dates: Vec<NaiveDate>,
    pub nav_gross: Vec<f64>,
    pub nav_net: Vec<f64>,
    /// Weights held over each NAV interval; row 0 is the initial holding.
    pub weights: StageMatrix,
    pub metrics_gross: MetricSet,
    pub metrics_net: MetricSet,
    /// Total variation over consecutive non-overlapping 20-day blocks.
    pub tv_series: Vec<f64>,
    pub warnings: Vec<String>,
    /// Number of forecaster fits performed.
    pub fits: usize,
}

#[derive(Serialize)]
struct MetricsDocument<'a> {
    strategy: &'a str,
    turnover_convention: &'a str,
    gross: &'a MetricSet,
    net: &'a MetricSet,
    warnings: usize,
}

impl BacktestReport {
    /// Writes `nav.csv`, `weights.csv`, `tv.csv` and `metrics.json` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut nav = csv::Writer::from_path(dir.join("nav.csv"))?;
        nav.write_record(["date", "nav_gross", "nav_net"])?;
        for ((d, g), n) in self.dates.iter().zip(&self.nav_gross).zip(&self.nav_net) {
            nav.write_record([d.to_string(), g.to_string(), n.to_string()])?;
        }
        nav.flush()?;

        let mut w = csv::Writer::from_path(dir.join("weights.csv"))?;
        let mut header = vec!["date".to_string()];
        header.extend(self.tickers.iter().cloned());
        w.write_record(&header)?;
        for (k, d) in self.dates.iter().enumerate() {
            let mut rec = vec![d.to_string()];
            rec.extend(self.weights.row(k).iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;

        let mut tv = csv::Writer::from_path(dir.join("tv.csv"))?;
        tv.write_record(["block", "total_variation"])?;
        for (k, v) in self.tv_series.iter().enumerate() {
            tv.write_record([k.to_string(), v.to_string()])?;
        }
        tv.flush()?;

        let doc = MetricsDocument {
            strategy: self.strategy.name(),
            turnover_convention: "mean daily one-way turnover 0.5*||z_t - z_(t-1)||_1",
            gross: &self.metrics_gross,
            net: &self.metrics_net,
            warnings: self.warnings.len(),
        };
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }
}

/// Weights of a non-learning baseline at decision row `t`.
pub fn baseline_weights(kind: StrategyKind, panel: &RealizedPanel, t: usize, cfg: &BacktestConfig) -> Result<Vec<f64>> {
    let n = panel.n_assets();
    match kind {
        StrategyKind::Ew => Ok(vec![1.0 / n as f64; n]),
        StrategyKind::Mv => {
            if t >= panel.len() || t + 1 < cfg.mv_mean_window {
                return Err(Error::InsufficientData(format!(
                    "MV at row {t} needs {} rows of history",
                    cfg.mv_mean_window
                )));
            }
            let hist = panel.window(t + 1 - cfg.mv_mean_window, t + 1);
            let mut mean = vec![0.0; n];
            for row in hist.iter_rows() {
                for (m, r) in mean.iter_mut().zip(row) {
                    *m += r / cfg.mv_mean_window as f64;
                }
            }
            let cov = covariance_path(&panel.returns, t, 1, &cfg.ewma)?;
            mean_variance_weights(&mean, &cov, cfg)
        }
        other => Err(Error::InvalidParameter(format!("{} is not a baseline strategy", other.name()))),
    }
}

/// Single-period mean-variance solve on the simplex (no turnover term).
pub fn mean_variance_weights(mean: &[f64], cov: &crate::domain::CovariancePath, cfg: &BacktestConfig) -> Result<Vec<f64>> {
    let n = mean.len();
    let params = cfg.problem(n, 1)?.with_lambda(0.0);
    let fc = ForecastPath::new(StageMatrix::from_rows(&[mean.to_vec()])?)?;
    let sol = solve_fixed_point(&AllocationPath::uniform(1, n), &params, &fc, cov, &cfg.solver)?;
    if !sol.converged {
        return Err(Error::Numeric(format!("MV solve did not converge (residual {:.2e})", sol.residual)));
    }
    Ok(sol.path.stage(0).to_vec())
}

/// Solves today's plan from the executed holdings. The solve starts from
/// yesterday's plan shifted one stage forward when there is one; the
/// minimizer is unique, so this only saves iterations.
fn plan(
    model: &LinearPredictor,
    panel: &RealizedPanel,
    t: usize,
    z_prev: &[f64],
    previous_plan: Option<&AllocationPath>,
    cfg: &BacktestConfig,
) -> Result<AllocationPath> {
    let n = panel.n_assets();
    let x = panel.window(t + 1 - cfg.input_len, t + 1);
    let fc = model.predict(&x)?;
    let cov = covariance_path(&panel.returns, t, cfg.horizon, &cfg.ewma)?;
    let params = cfg.problem(n, cfg.horizon)?;
    let start = match previous_plan {
        Some(p) if p.horizon() == cfg.horizon => {
            let h = cfg.horizon;
            let rows: Vec<Vec<f64>> = (0..h).map(|s| p.stage((s + 1).min(h - 1)).to_vec()).collect();
            AllocationPath::new(z_prev.to_vec(), StageMatrix::from_rows(&rows)?)?
        }
        _ => AllocationPath::replicated(z_prev, cfg.horizon),
    };
    let sol = solve_fixed_point(&start, &params, &fc, &cov, &cfg.solver)?;
    if !sol.converged && sol.residual > EXECUTION_TOL {
        return Err(Error::Numeric(format!("solver did not converge (residual {:.2e})", sol.residual)));
    }
    Ok(sol.path)
}

fn fit(
    model: &LinearPredictor,
    panel: &RealizedPanel,
    t: usize,
    cfg: &BacktestConfig,
    cache: &mut BTreeMap<usize, AllocationPath>,
) -> Result<LinearPredictor> {
    let window = TrainingWindow::build(&panel.returns, t, cfg.lookback_train, cfg.input_len, cfg.horizon, &cfg.ewma)?;
    match cfg.strategy {
        StrategyKind::TwoStage => Ok(train_two_stage(&window, model)?.model),
        StrategyKind::Ipmo => {
            let settings = IpmoSettings::new(
                cfg.problem(panel.n_assets(), cfg.horizon)?,
                cfg.solver.clone(),
                cfg.neumann.clone(),
            );
            let out = train_ipmo_cached(&window, model, &settings, cache)?;
            if out.trace.skipped_samples > 0 || out.trace.truncated_backward > 0 {
                info!(
                    "fit at row {t}: {} samples skipped, {} truncated backward passes",
                    out.trace.skipped_samples, out.trace.truncated_backward
                );
            }
            Ok(out.model)
        }
        _ => unreachable!("baselines are not trained"),
    }
}

/// Runs the walk-forward backtest. `seed` fixes the predictor's initial
/// weights; everything else is deterministic.
pub fn run_backtest(panel: &RealizedPanel, cfg: &BacktestConfig, seed: u64) -> Result<BacktestReport> {
    cfg.validate()?;
    let n = panel.n_assets();
    if n < 2 {
        return Err(Error::Shape(format!("backtest needs at least 2 assets, got {n}")));
    }
    let first = cfg.first_decision_row();
    let start = cfg.start_row.unwrap_or(first);
    if start < first {
        return Err(Error::InsufficientData(format!("start row {start} is before the first usable row {first}")));
    }
    if panel.len() < 2 || start + 1 >= panel.len() {
        return Err(Error::InsufficientData(format!(
            "panel of {} rows is too short for a backtest starting at row {start}",
            panel.len()
        )));
    }
    let end = cfg.end_row.unwrap_or(panel.len() - 2).min(panel.len() - 2);
    if end < start {
        return Err(Error::InvalidParameter(format!("end row {end} precedes start row {start}")));
    }

    let cost = cfg.cost_rate();
    let base_model = LinearPredictor::new(n, cfg.horizon, cfg.input_len, cfg.features, cfg.l2_beta, cfg.hyper.clone())?
        .randomized(seed, cfg.init_scale);
    let mut model: Option<LinearPredictor> = None;
    let mut fits = 0usize;
    let mut warnings = Vec::new();
    let mut cache = BTreeMap::new();
    let mut last_plan: Option<AllocationPath> = None;

    let days = end - start + 1;
    let mut z_prev = vec![1.0 / n as f64; n];
    let mut dates = Vec::with_capacity(days + 1);
    let mut nav_gross = Vec::with_capacity(days + 1);
    let mut nav_net = Vec::with_capacity(days + 1);
    let mut weights = Vec::with_capacity((days + 1) * n);
    dates.push(panel.dates[start]);
    nav_gross.push(1.0);
    nav_net.push(1.0);
    weights.extend_from_slice(&z_prev);

    for t in start..=end {
        if cfg.strategy.learns() && (t - start) % cfg.retrain_every == 0 {
            let init = match &model {
                Some(m) => {
                    let mut m = m.clone();
                    if let Some(e) = cfg.refit_epochs {
                        m.hyper.epochs = e;
                    }
                    m
                }
                None => base_model.clone(),
            };
            match fit(&init, panel, t, cfg, &mut cache) {
                Ok(m) => {
                    model = Some(m);
                    fits += 1;
                }
                Err(e) => {
                    let msg = format!("{}: training failed, keeping previous model: {e}", panel.dates[t]);
                    warn!("{msg}");
                    warnings.push(msg);
                }
            }
        }
        let target = match cfg.strategy {
            StrategyKind::Ew | StrategyKind::Mv => baseline_weights(cfg.strategy, panel, t, cfg),
            _ => match &model {
                Some(m) => plan(m, panel, t, &z_prev, last_plan.as_ref(), cfg).map(|p| {
                    let z = p.stage(0).to_vec();
                    last_plan = Some(p);
                    z
                }),
                None => Err(Error::Training("no trained model available".into())),
            },
        };
        let z = match target {
            Ok(z) => z,
            Err(e) => {
                let msg = format!("{}: holding previous weights: {e}", panel.dates[t]);
                warn!("{msg}");
                warnings.push(msg);
                z_prev.clone()
            }
        };
        let y = panel.returns.row(t + 1);
        let gross: f64 = z.iter().zip(y).map(|(w, r)| w * r).sum();
        let traded: f64 = z.iter().zip(&z_prev).map(|(a, b)| (a - b).abs()).sum();
        let net = gross - cost * traded;
        nav_gross.push(nav_gross.last().unwrap() * (1.0 + gross));
        nav_net.push(nav_net.last().unwrap() * (1.0 + net));
        dates.push(panel.dates[t + 1]);
        weights.extend_from_slice(&z);
        z_prev = z;
    }

    let weights = StageMatrix::from_vec(days + 1, n, weights)?;
    let metrics_gross = compute_metrics(&nav_gross, &weights, PERIODS_PER_YEAR)?;
    let metrics_net = compute_metrics(&nav_net, &weights, PERIODS_PER_YEAR)?;
    let tv_series = if weights.rows() > TV_WINDOW {
        total_variation(&weights, TV_WINDOW)?
    } else {
        Vec::new()
    };
    Ok(BacktestReport {
        strategy: cfg.strategy,
        tickers: panel.tickers.clone(),
        dates,
        nav_gross,
        nav_net,
        weights,
        metrics_gross,
        metrics_net,
        tv_series,
        warnings,
        fits,
    })
}
