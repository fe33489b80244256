use serde::{Deserialize, Serialize};

use crate::domain::StageMatrix;
use crate::error::{Error, Result};

/// Annualized performance statistics. Ratios whose denominator is zero are
/// `None` (serialized as `null`) rather than infinite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub ann_return: f64,
    pub ann_vol: f64,
    pub sharpe: Option<f64>,
    pub mdd: f64,
    pub calmar: Option<f64>,
    pub ret_over_avg_dd: Option<f64>,
    /// Mean daily one-way turnover, `0.5 * ||z_t - z_{t-1}||_1`.
    pub turnover: f64,
}

/// Drawdown from the running peak at each point.
pub fn drawdowns(nav: &[f64]) -> Vec<f64> {
    let mut peak = f64::NEG_INFINITY;
    nav.iter()
        .map(|&v| {
            peak = peak.max(v);
            1.0 - v / peak
        })
        .collect()
}

fn l1_change(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Metrics of a NAV series and the weights held along it (one weight row
/// per NAV point, so `weights.rows()` changes are compared).
pub fn compute_metrics(nav: &[f64], weights: &StageMatrix, periods_per_year: f64) -> Result<MetricSet> {
    if nav.len() < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 NAV points, got {}", nav.len())));
    }
    if nav.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Numeric("NAV must be positive and finite".into()));
    }
    let days = (nav.len() - 1) as f64;
    let ann_return = (nav[nav.len() - 1] / nav[0]).powf(periods_per_year / days) - 1.0;
    let rets: Vec<f64> = nav.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
    let ann_vol = if rets.len() < 2 {
        0.0
    } else {
        let mean = rets.iter().sum::<f64>() / rets.len() as f64;
        let var = rets.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (rets.len() - 1) as f64;
        var.sqrt() * periods_per_year.sqrt()
    };
    let dd = drawdowns(nav);
    let mdd = dd.iter().fold(0.0_f64, |m, &d| m.max(d));
    let avg_dd = dd.iter().sum::<f64>() / dd.len() as f64;
    let ratio = |den: f64| if den > 0.0 { Some(ann_return / den) } else { None };
    let turnover = if weights.rows() < 2 {
        0.0
    } else {
        (1..weights.rows())
            .map(|k| 0.5 * l1_change(weights.row(k), weights.row(k - 1)))
            .sum::<f64>()
            / (weights.rows() - 1) as f64
    };
    Ok(MetricSet {
        ann_return,
        ann_vol,
        sharpe: ratio(ann_vol),
        mdd,
        calmar: ratio(mdd),
        ret_over_avg_dd: ratio(avg_dd),
        turnover,
    })
}

/// Sums of daily L1 weight changes over consecutive non-overlapping blocks
/// of `window` changes; a trailing partial block is dropped.
pub fn total_variation(weights: &StageMatrix, window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::InvalidParameter("window must be >= 1".into()));
    }
    if weights.rows() < window + 1 {
        return Err(Error::InsufficientData(format!(
            "total variation over {window} changes needs {} rows, got {}",
            window + 1,
            weights.rows()
        )));
    }
    let changes: Vec<f64> = (1..weights.rows())
        .map(|k| l1_change(weights.row(k), weights.row(k - 1)))
        .collect();
    Ok(changes.chunks_exact(window).map(|c| c.iter().sum()).collect())
}
