use chrono::{Datelike, NaiveDate, Weekday};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{RealizedPanel, StageMatrix};
use crate::error::{Error, Result};

/// One stationary Gaussian regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub length: usize,
    pub mean: Vec<f64>,
    /// Row-major `N x N` covariance.
    pub cov: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub regimes: Vec<Regime>,
    #[serde(default)]
    pub tickers: Option<Vec<String>>,
    /// First business day of the panel.
    #[serde(default = "default_start")]
    pub start_date: NaiveDate,
}

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2010, 1, 4).unwrap()
}

impl SyntheticSpec {
    pub fn n_assets(&self) -> usize {
        self.regimes.first().map_or(0, |r| r.mean.len())
    }

    pub fn total_len(&self) -> usize {
        self.regimes.iter().map(|r| r.length).sum()
    }

    /// Two alternating regimes over `n` assets: a calm one where the first
    /// half of the assets lead, and a stressed one with higher correlation
    /// where the ranking flips. Regimes switch every `block` days.
    pub fn two_regime(n: usize, days: usize, block: usize) -> Self {
        let calm_vol = 0.008;
        let stress_vol = 0.014;
        let mut calm = Regime {
            length: 0,
            mean: (0..n).map(|i| if i < n / 2 { 0.0012 } else { -0.0002 }).collect(),
            cov: factor_cov(n, calm_vol, 0.2),
        };
        let mut stress = Regime {
            length: 0,
            mean: (0..n).map(|i| if i < n / 2 { -0.0010 } else { 0.0008 }).collect(),
            cov: factor_cov(n, stress_vol, 0.5),
        };
        let mut regimes = Vec::new();
        let mut left = days;
        let mut k = 0;
        while left > 0 {
            let len = block.min(left);
            let r = if k % 2 == 0 { &mut calm } else { &mut stress };
            r.length = len;
            regimes.push(r.clone());
            left -= len;
            k += 1;
        }
        Self {
            regimes,
            tickers: None,
            start_date: default_start(),
        }
    }
}

fn factor_cov(n: usize, vol: f64, rho: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| vol * vol * if i == j { 1.0 } else { rho }).collect())
        .collect()
}

fn next_business_day(d: NaiveDate) -> NaiveDate {
    let mut d = d.succ_opt().expect("date overflow");
    while matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
        d = d.succ_opt().expect("date overflow");
    }
    d
}

/// Square-root factor of a symmetric PSD matrix via its eigendecomposition.
fn psd_factor(cov: &[Vec<f64>], n: usize, regime: usize) -> Result<DMatrix<f64>> {
    if cov.len() != n || cov.iter().any(|r| r.len() != n) {
        return Err(Error::Shape(format!("regime {regime}: covariance must be {n}x{n}")));
    }
    let m = DMatrix::from_fn(n, n, |i, j| cov[i][j]);
    let scale = m.amax().max(1e-300);
    if (&m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::InvalidParameter(format!("regime {regime}: covariance is not symmetric")));
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter(format!("regime {regime}: covariance is not finite")));
    }
    let eig = SymmetricEigen::new(m);
    let min = eig.eigenvalues.min();
    if min < -1e-12 * scale {
        return Err(Error::InvalidParameter(format!(
            "regime {regime}: covariance is not positive semidefinite (min eigenvalue {min:.3e})"
        )));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// Concatenated Gaussian regimes on consecutive business days, fully
/// determined by `spec` and `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<RealizedPanel> {
    let n = spec.n_assets();
    if spec.regimes.is_empty() || n == 0 {
        return Err(Error::InvalidParameter("synthetic spec needs at least one regime with assets".into()));
    }
    let tickers = match &spec.tickers {
        Some(t) if t.len() != n => {
            return Err(Error::Shape(format!("{} tickers for {n} assets", t.len())));
        }
        Some(t) => t.clone(),
        None => (1..=n).map(|i| format!("A{i}")).collect(),
    };
    let mut factors = Vec::with_capacity(spec.regimes.len());
    for (k, r) in spec.regimes.iter().enumerate() {
        if r.mean.len() != n {
            return Err(Error::Shape(format!("regime {k}: mean has {} entries, expected {n}", r.mean.len())));
        }
        if !r.mean.iter().all(|m| m.is_finite()) {
            return Err(Error::InvalidParameter(format!("regime {k}: mean is not finite")));
        }
        factors.push(psd_factor(&r.cov, n, k)?);
    }
    let total = spec.total_len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(total * n);
    let mut eps = nalgebra::DVector::zeros(n);
    for (r, f) in spec.regimes.iter().zip(&factors) {
        for _ in 0..r.length {
            for e in eps.iter_mut() {
                *e = StandardNormal.sample(&mut rng);
            }
            let shock = f * &eps;
            data.extend(r.mean.iter().zip(shock.iter()).map(|(m, s)| m + s));
        }
    }
    let mut dates = Vec::with_capacity(total);
    let mut d = spec.start_date;
    while matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
        d = next_business_day(d);
    }
    for _ in 0..total {
        dates.push(d);
        d = next_business_day(d);
    }
    RealizedPanel::new(dates, tickers, StageMatrix::from_vec(total, n, data)?)
}
