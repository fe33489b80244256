//! Domain types shared by every module, plus the simplex utilities.
//!
//! Stage-indexed quantities (allocation paths, forecasts, gradients) are
//! stored as row-major `H x N` grids: row `s` holds stage `s + 1` relative to
//! the decision date, column `i` holds asset `i`.

use std::ops::{Index, IndexMut};

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used for simplex feasibility checks.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Default coordinate floor applied to allocation paths.
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// Row-major `rows x cols` grid of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl StageMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "expected {} entries for a {rows}x{cols} grid, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Shape(format!(
                    "row {r} has {} entries, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Repeats `row` `rows` times.
    pub fn replicate(row: &[f64], rows: usize) -> Self {
        let mut data = Vec::with_capacity(rows * row.len());
        for _ in 0..rows {
            data.extend_from_slice(row);
        }
        Self {
            rows,
            cols: row.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    /// `self += factor * other`
    pub fn axpy(&mut self, factor: f64, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        let mut out = Self::zeros(m.nrows(), m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out[(r, c)] = m[(r, c)];
            }
        }
        out
    }
}

impl Index<(usize, usize)> for StageMatrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for StageMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Parameters of the smoothed multi-period mean-variance program.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemParams {
    /// Risk aversion.
    pub delta: f64,
    /// Turnover penalty weight.
    pub lambda: f64,
    /// Smoothing of the absolute value in the turnover penalty.
    pub kappa: f64,
    /// Number of planning stages.
    pub horizon: usize,
    pub n_assets: usize,
    /// Jitter added to covariance diagonals.
    pub cov_jitter: f64,
}

impl ProblemParams {
    pub fn new(delta: f64, lambda: f64, kappa: f64, horizon: usize, n_assets: usize) -> Result<Self> {
        let p = Self {
            delta,
            lambda,
            kappa,
            horizon,
            n_assets,
            cov_jitter: 1e-6,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidParameter(format!("delta must be > 0, got {}", self.delta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidParameter(format!("kappa must be > 0, got {}", self.kappa)));
        }
        if self.horizon < 1 {
            return Err(Error::InvalidParameter("horizon must be >= 1".into()));
        }
        if self.n_assets < 2 {
            return Err(Error::InvalidParameter(format!(
                "at least 2 assets required, got {}",
                self.n_assets
            )));
        }
        if !(self.cov_jitter >= 0.0) {
            return Err(Error::InvalidParameter("cov_jitter must be >= 0".into()));
        }
        Ok(())
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }

    pub fn with_horizon(&self, horizon: usize) -> Self {
        Self { horizon, ..self.clone() }
    }
}

/// Planned allocation path: pre-trade weights plus one simplex vector per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct AllocationPath {
    pub z_init: Vec<f64>,
    pub stages: StageMatrix,
}

impl AllocationPath {
    pub fn new(z_init: Vec<f64>, stages: StageMatrix) -> Result<Self> {
        if z_init.len() != stages.cols() {
            return Err(Error::Shape(format!(
                "z_init has {} assets but stages have {}",
                z_init.len(),
                stages.cols()
            )));
        }
        Ok(Self { z_init, stages })
    }

    /// Every stage equal to `z_init`.
    pub fn replicated(z_init: &[f64], horizon: usize) -> Self {
        Self {
            z_init: z_init.to_vec(),
            stages: StageMatrix::replicate(z_init, horizon),
        }
    }

    pub fn uniform(horizon: usize, n: usize) -> Self {
        let w = vec![1.0 / n as f64; n];
        Self::replicated(&w, horizon)
    }

    pub fn horizon(&self) -> usize {
        self.stages.rows()
    }

    pub fn n_assets(&self) -> usize {
        self.stages.cols()
    }

    /// Stage `s` weights, 0-based. `s == usize::MAX` is never used; the
    /// pre-trade vector is reached through [`AllocationPath::previous`].
    pub fn stage(&self, s: usize) -> &[f64] {
        self.stages.row(s)
    }

    /// Weights preceding stage `s` (0-based): `z_init` for the first stage.
    pub fn previous(&self, s: usize) -> &[f64] {
        if s == 0 {
            &self.z_init
        } else {
            self.stages.row(s - 1)
        }
    }

    pub fn with_stages(&self, stages: StageMatrix) -> Self {
        Self {
            z_init: self.z_init.clone(),
            stages,
        }
    }
}

/// Per-stage predicted simple returns, `H x N`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastPath {
    pub y_hat: StageMatrix,
}

impl ForecastPath {
    pub fn new(y_hat: StageMatrix) -> Result<Self> {
        if !y_hat.is_finite() {
            return Err(Error::Numeric("forecast contains non-finite entries".into()));
        }
        Ok(Self { y_hat })
    }

    pub fn zeros(horizon: usize, n: usize) -> Self {
        Self {
            y_hat: StageMatrix::zeros(horizon, n),
        }
    }

    pub fn horizon(&self) -> usize {
        self.y_hat.rows()
    }
}

/// Per-stage covariance forecasts, each symmetric positive definite.
#[derive(Clone, Debug, PartialEq)]
pub struct CovariancePath {
    mats: Vec<DMatrix<f64>>,
}

impl CovariancePath {
    pub fn new(mats: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = mats.first().map_or(0, |m| m.nrows());
        for (s, m) in mats.iter().enumerate() {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::Shape(format!("covariance {s} is {}x{}, expected {n}x{n}", m.nrows(), m.ncols())));
            }
            check_spd(m).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("covariance {s}: {msg}")),
                other => other,
            })?;
        }
        Ok(Self { mats })
    }

    /// Same matrix repeated for every stage.
    pub fn constant(m: DMatrix<f64>, horizon: usize) -> Result<Self> {
        Self::new(vec![m; horizon])
    }

    pub fn identity(horizon: usize, n: usize) -> Self {
        Self {
            mats: vec![DMatrix::identity(n, n); horizon],
        }
    }

    pub fn stage(&self, s: usize) -> &DMatrix<f64> {
        &self.mats[s]
    }

    pub fn horizon(&self) -> usize {
        self.mats.len()
    }

    pub fn n_assets(&self) -> usize {
        self.mats.first().map_or(0, |m| m.nrows())
    }

    pub fn iter(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.mats.iter()
    }
}

/// Symmetry (within `SIMPLEX_TOL` relative) and Cholesky-based definiteness check.
pub fn check_spd(m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SIMPLEX_TOL * scale {
                return Err(Error::Numeric(format!("not symmetric at ({i},{j})")));
            }
        }
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite entries".into()));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::Numeric("not positive definite".into()));
    }
    Ok(())
}

/// Realized daily simple returns, `T x N`, indexed by strictly increasing dates.
#[derive(Clone, Debug, PartialEq)]
pub struct RealizedPanel {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    pub returns: StageMatrix,
}

impl RealizedPanel {
    pub fn new(dates: Vec<NaiveDate>, tickers: Vec<String>, returns: StageMatrix) -> Result<Self> {
        if dates.len() != returns.rows() {
            return Err(Error::Shape(format!(
                "{} dates for {} return rows",
                dates.len(),
                returns.rows()
            )));
        }
        if tickers.len() != returns.cols() {
            return Err(Error::Shape(format!(
                "{} tickers for {} return columns",
                tickers.len(),
                returns.cols()
            )));
        }
        if let Some(w) = dates.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(format!(
                "dates not strictly increasing at row {}",
                w + 1
            )));
        }
        if !returns.is_finite() {
            return Err(Error::Numeric("panel contains non-finite returns".into()));
        }
        Ok(Self { dates, tickers, returns })
    }

    pub fn len(&self) -> usize {
        self.returns.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.rows() == 0
    }

    pub fn n_assets(&self) -> usize {
        self.returns.cols()
    }

    /// Rows `start..end` as a new grid.
    pub fn window(&self, start: usize, end: usize) -> StageMatrix {
        let n = self.n_assets();
        StageMatrix::from_vec(end - start, n, self.returns.as_slice()[start * n..end * n].to_vec())
            .expect("window bounds checked by caller")
    }
}

/// Clamps every stage coordinate to at least `floor` and renormalizes each
/// stage to sum to one. Coordinates pinned at the floor stay exactly at the
/// floor; the remaining coordinates are rescaled to absorb the pinned mass.
pub fn clamp_floor(path: &AllocationPath, floor: f64) -> Result<AllocationPath> {
    let n = path.n_assets();
    if !(floor > 0.0 && floor < 1.0 / n as f64) {
        return Err(Error::InvalidParameter(format!(
            "floor {floor} outside (0, 1/{n})"
        )));
    }
    let mut stages = path.stages.clone();
    for s in 0..stages.rows() {
        clamp_row(stages.row_mut(s), floor);
    }
    Ok(path.with_stages(stages))
}

/// In-place floor clamp of one simplex row. `floor` must lie in `(0, 1/N)`.
pub(crate) fn clamp_row(row: &mut [f64], floor: f64) {
    let below = row.iter().any(|&x| x < floor);
    let sum: f64 = row.iter().sum();
    if !below && (sum - 1.0).abs() <= SIMPLEX_TOL {
        return;
    }
    if !below {
        row.iter_mut().for_each(|x| *x /= sum);
        if row.iter().all(|&x| x >= floor) {
            return;
        }
    }
    if row.iter().all(|&x| x < floor) {
        let n = row.len() as f64;
        row.iter_mut().for_each(|x| *x = 1.0 / n);
        return;
    }
    // Pin coordinates below the floor, rescale the rest; rescaling can push
    // further coordinates under the floor, so repeat until stable.
    let mut pinned = vec![false; row.len()];
    loop {
        let mut changed = false;
        for (x, p) in row.iter().zip(pinned.iter_mut()) {
            if !*p && *x < floor {
                *p = true;
                changed = true;
            }
        }
        let n_pinned = pinned.iter().filter(|&&p| p).count();
        let free_mass: f64 = row
            .iter()
            .zip(&pinned)
            .filter(|(_, &p)| !p)
            .map(|(x, _)| x)
            .sum();
        let target = 1.0 - n_pinned as f64 * floor;
        let factor = target / free_mass;
        for (x, &p) in row.iter_mut().zip(&pinned) {
            if p {
                *x = floor;
            } else {
                *x *= factor;
            }
        }
        if !changed || row.iter().zip(&pinned).all(|(x, &p)| p || *x >= floor) {
            break;
        }
    }
}

/// Feasibility gap of a path: the largest per-stage value of
/// `|sum of positive parts - 1| + magnitude of the most negative entry`.
/// Zero exactly when every stage lies on the simplex.
pub fn simplex_residual(path: &AllocationPath) -> f64 {
    path.stages.iter_rows().map(row_residual).fold(0.0, f64::max)
}

pub(crate) fn row_residual(row: &[f64]) -> f64 {
    let positive: f64 = row.iter().filter(|&&x| x > 0.0).sum();
    let most_negative = row.iter().fold(0.0_f64, |m, &x| m.max(-x));
    (positive - 1.0).abs() + most_negative
}

/// Symmetric matrix times slice: `out = m * x`.
pub(crate) fn symv(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let n = x.len();
    debug_assert_eq!(m.nrows(), n);
    out.iter_mut().for_each(|o| *o = 0.0);
    // column j of a symmetric matrix equals row j; columns are contiguous
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = m.column(j);
        for (o, &mij) in out.iter_mut().zip(col.iter()) {
            *o += mij * xj;
        }
    }
}
