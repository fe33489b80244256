use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::domain::{CovariancePath, StageMatrix};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EwmaConfig {
    /// Number of most recent days used.
    pub window: usize,
    /// Per-day decay; 1 gives equal weights.
    pub decay: f64,
    /// Ridge added to the diagonal.
    pub jitter: f64,
}

impl Default for EwmaConfig {
    fn default() -> Self {
        Self {
            window: 20,
            decay: 0.94,
            jitter: 1e-6,
        }
    }
}

impl EwmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::InvalidParameter(format!("EWMA window must be >= 2, got {}", self.window)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidParameter(format!("EWMA decay must lie in (0, 1], got {}", self.decay)));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::InvalidParameter("EWMA jitter must be >= 0".into()));
        }
        Ok(())
    }
}

/// Exponentially weighted covariance of the last `cfg.window` rows of
/// `returns` (oldest first). Weights `decay^age` are normalized to sum to
/// one, so `decay = 1` gives the equal-weight (1/n) covariance.
pub fn ewma_covariance(returns: &StageMatrix, cfg: &EwmaConfig) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    let rows = returns.rows();
    if rows < 2 {
        return Err(Error::InsufficientData(format!("EWMA needs at least 2 rows, got {rows}")));
    }
    let n = returns.cols();
    let used = rows.min(cfg.window);
    let first = rows - used;
    let mut weights: Vec<f64> = (0..used).map(|k| cfg.decay.powi((used - 1 - k) as i32)).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);

    // center on the oldest row first; this is exact for constant data
    let origin = returns.row(first);
    let mut mean = vec![0.0; n];
    for (k, w) in weights.iter().enumerate() {
        for (m, (r, o)) in mean.iter_mut().zip(returns.row(first + k).iter().zip(origin)) {
            *m += w * (r - o);
        }
    }
    let mut cov = DMatrix::zeros(n, n);
    let mut dev = vec![0.0; n];
    for (k, w) in weights.iter().enumerate() {
        for (i, d) in dev.iter_mut().enumerate() {
            *d = returns.row(first + k)[i] - origin[i] - mean[i];
        }
        for i in 0..n {
            for j in 0..=i {
                cov[(i, j)] += w * dev[i] * dev[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            cov[(j, i)] = cov[(i, j)];
        }
        cov[(i, i)] += cfg.jitter;
    }
    Ok(cov)
}

/// Covariance path for a plan made at row `t`: the EWMA estimate over rows
/// `t - window + 1 ..= t`, repeated for every stage.
pub fn covariance_path(returns: &StageMatrix, t: usize, horizon: usize, cfg: &EwmaConfig) -> Result<CovariancePath> {
    cfg.validate()?;
    if t >= returns.rows() {
        return Err(Error::InsufficientData(format!("row {t} beyond panel of {} rows", returns.rows())));
    }
    if t + 1 < cfg.window {
        return Err(Error::InsufficientData(format!(
            "covariance at row {t} needs {} rows of history",
            cfg.window
        )));
    }
    let n = returns.cols();
    let start = t + 1 - cfg.window;
    let slice = StageMatrix::from_vec(cfg.window, n, returns.as_slice()[start * n..(t + 1) * n].to_vec())?;
    CovariancePath::constant(ewma_covariance(&slice, cfg)?, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_returns_give_jitter_only() {
        let r = StageMatrix::from_rows(&vec![vec![0.013, -0.007, 0.1]; 20]).unwrap();
        let cov = ewma_covariance(&r, &EwmaConfig::default()).unwrap();
        assert_eq!(cov, DMatrix::identity(3, 3) * 1e-6);
    }

    #[test]
    fn unit_decay_is_equal_weight_covariance() {
        let r = StageMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.0], vec![2.0, 4.0]]).unwrap();
        let cfg = EwmaConfig {
            window: 3,
            decay: 1.0,
            jitter: 0.0,
        };
        let cov = ewma_covariance(&r, &cfg).unwrap();
        // means (2, 2); deviations (-1,0), (1,-2), (0,2)
        let expected = DMatrix::from_row_slice(2, 2, &[2.0 / 3.0, -2.0 / 3.0, -2.0 / 3.0, 8.0 / 3.0]);
        assert!((cov - expected).amax() < 1e-15);
    }

    #[test]
    fn two_observation_hand_computation() {
        // weights 0.5/1.5 = 1/3 (older) and 1/1.5 = 2/3 (newer)
        let r = StageMatrix::from_rows(&[vec![0.0, 1.0], vec![3.0, 1.0]]).unwrap();
        let cfg = EwmaConfig {
            window: 2,
            decay: 0.5,
            jitter: 1e-6,
        };
        let cov = ewma_covariance(&r, &cfg).unwrap();
        // mean of asset 0 = 2; variance = 1/3 * 4 + 2/3 * 1 = 2
        assert!((cov[(0, 0)] - (2.0 + 1e-6)).abs() < 1e-15);
        assert_eq!(cov[(0, 1)], 0.0);
        assert_eq!(cov[(1, 1)], 1e-6);
    }

    #[test]
    fn too_few_rows() {
        let r = StageMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert!(matches!(ewma_covariance(&r, &EwmaConfig::default()), Err(Error::InsufficientData(_))));
        let panel = StageMatrix::zeros(10, 2);
        assert!(matches!(
            covariance_path(&panel, 5, 2, &EwmaConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn path_repeats_single_estimate() {
        let data: Vec<f64> = (0..60).map(|k| ((k * 37 % 11) as f64 - 5.0) * 0.01).collect();
        let panel = StageMatrix::from_vec(30, 2, data).unwrap();
        let cfg = EwmaConfig::default();
        let path = covariance_path(&panel, 25, 3, &cfg).unwrap();
        let direct = ewma_covariance(&StageMatrix::from_vec(20, 2, panel.as_slice()[12..52].to_vec()).unwrap(), &cfg).unwrap();
        assert_eq!(path.horizon(), 3);
        for m in path.iter() {
            assert_eq!(*m, direct);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn smallest_eigenvalue_at_least_jitter(
            data in proptest::collection::vec(-0.05f64..0.05, 20 * 4),
            decay in 0.5f64..=1.0,
        ) {
            let r = StageMatrix::from_vec(20, 4, data).unwrap();
            let cfg = EwmaConfig { decay, ..EwmaConfig::default() };
            let cov = ewma_covariance(&r, &cfg).unwrap();
            prop_assert!(cov.clone().cholesky().is_some());
            let min = nalgebra::SymmetricEigen::new(cov).eigenvalues.min();
            prop_assert!(min >= cfg.jitter * (1.0 - 1e-12), "min eigenvalue {}", min);
        }
    }
}
