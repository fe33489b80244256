//! Hyperparameter selection: in-sample backtests over a grid, the
//! highest-Sharpe-then-lowest-turnover rule, and an out-of-sample run of the
//! chosen point.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::RealizedPanel;
use crate::error::{Error, Result};

use super::{run_backtest, BacktestConfig, BacktestReport, MetricSet};

/// One point of the (learning rate, turnover penalty, horizon) grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub learning_rate: f64,
    pub lambda: f64,
    pub horizon: usize,
}


#[derive(Clone, Debug)]
pub struct SelectionCandidate<T> {
    pub item: T,
    pub metrics: MetricSet,
}

/// Among the ten candidates with the highest Sharpe ratio, the one with the
/// lowest turnover. Undefined Sharpe ratios rank last; ties keep input order.
pub fn select_config<T>(candidates: &[SelectionCandidate<T>]) -> Option<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    let sharpe = |i: usize| candidates[i].metrics.sharpe.unwrap_or(f64::NEG_INFINITY);
    order.sort_by(|&a, &b| sharpe(b).total_cmp(&sharpe(a)));
    order.truncate(10);
    order
        .into_iter()
        .min_by(|&a, &b| {
            candidates[a]
                .metrics
                .turnover
                .total_cmp(&candidates[b].metrics.turnover)
                .then(a.cmp(&b))
        })
}

impl GridPoint {
    pub fn apply(&self, base: &BacktestConfig) -> BacktestConfig {
        let mut cfg = base.clone();
        cfg.hyper.learning_rate = self.learning_rate;
        cfg.lambda = self.lambda;
        cfg.horizon = self.horizon;
        cfg
    }
}

#[derive(Clone, Debug)]
pub struct SelectionOutcome {
    pub chosen: GridPoint,
    /// In-sample net metrics of every grid point, in grid order.
    pub candidates: Vec<SelectionCandidate<GridPoint>>,
    /// Out-of-sample backtest of the chosen point.
    pub report: BacktestReport,
}

/// Backtests every grid point on decision rows before `split_row`, picks one
/// with [`select_config`] on net metrics, then backtests it from `split_row`
/// to `base.end_row`. Grid points run in parallel; results do not depend on
/// the thread count.
pub fn select_and_backtest(
    panel: &RealizedPanel,
    base: &BacktestConfig,
    points: &[GridPoint],
    split_row: usize,
    seed: u64,
) -> Result<SelectionOutcome> {
    if points.is_empty() {
        return Err(Error::InvalidParameter("empty hyperparameter grid".into()));
    }
    let in_sample: Vec<Result<SelectionCandidate<GridPoint>>> = points
        .par_iter()
        .map(|p| {
            let cfg = BacktestConfig {
                start_row: None,
                end_row: Some(split_row.saturating_sub(1)),
                ..p.apply(base)
            };
            let r = run_backtest(panel, &cfg, seed)?;
            Ok(SelectionCandidate { item: *p, metrics: r.metrics_net })
        })
        .collect();
    let candidates = in_sample.into_iter().collect::<Result<Vec<_>>>()?;
    let k = select_config(&candidates).expect("nonempty grid");
    let chosen = candidates[k].item;
    let cfg = BacktestConfig {
        start_row: Some(split_row),
        ..chosen.apply(base)
    };
    let report = run_backtest(panel, &cfg, seed)?;
    Ok(SelectionOutcome { chosen, candidates, report })
}
