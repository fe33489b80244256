//! Forward solver: stagewise entropic mirror descent run to its fixed point.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::domain::{clamp_row, AllocationPath, CovariancePath, ForecastPath, ProblemParams, StageMatrix, DEFAULT_FLOOR};
use crate::error::{Error, Result};
use crate::objective::{check_problem, eval_into, hessian_block, inner_objective, turnover_curvature};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Step size. `None` picks half the coupled step-size bound at the
    /// starting point and re-checks it at the solution.
    pub eta: Option<f64>,
    /// Fixed-point residual tolerance, infinity norm.
    pub tol: f64,
    pub max_iters: usize,
    pub floor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eta: None,
            tol: 1e-10,
            max_iters: 50_000,
            floor: DEFAULT_FLOOR,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(eta) = self.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::InvalidParameter(format!("eta must be > 0, got {eta}")));
            }
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if !(self.floor > 0.0) {
            return Err(Error::InvalidParameter("floor must be > 0".into()));
        }
        Ok(())
    }

    pub fn with_eta(&self, eta: f64) -> Self {
        Self {
            eta: Some(eta),
            ..self.clone()
        }
    }

    pub fn with_tol(&self, tol: f64) -> Self {
        Self { tol, ..self.clone() }
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    /// Fixed point `z*` (floor-clamped).
    pub path: AllocationPath,
    /// `||Phi(z*) - z*||_inf` at the last iteration.
    pub residual: f64,
    pub iters: usize,
    pub converged: bool,
    /// Step size actually used.
    pub eta: f64,
}

/// Closed-form entropic mirror step on one simplex row.
pub fn md_update_row(z: &[f64], g: &[f64], eta: f64, out: &mut [f64]) {
    // exp(-eta g) is shift invariant after normalization; shift by the
    // largest exponent to avoid overflow
    let shift = g.iter().fold(f64::INFINITY, |m, &x| m.min(x));
    let mut total = 0.0;
    for ((o, &zi), &gi) in out.iter_mut().zip(z).zip(g) {
        *o = zi * (-eta * (gi - shift)).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// One simultaneous mirror-descent step across all stages, with gradients
/// taken at the input path.
pub fn md_step(
    path: &AllocationPath,
    params: &ProblemParams,
    fc: &ForecastPath,
    cov: &CovariancePath,
    eta: f64,
) -> Result<AllocationPath> {
    check_problem(path, params, fc, cov)?;
    if !(eta > 0.0) {
        return Err(Error::InvalidParameter(format!("eta must be > 0, got {eta}")));
    }
    let mut grads = StageMatrix::zeros(path.horizon(), path.n_assets());
    let mut next = path.stages.clone();
    step_into(path, params, fc, cov, eta, &mut grads, &mut next)?;
    Ok(path.with_stages(next))
}

fn step_into(
    path: &AllocationPath,
    params: &ProblemParams,
    fc: &ForecastPath,
    cov: &CovariancePath,
    eta: f64,
    grads: &mut StageMatrix,
    next: &mut StageMatrix,
) -> Result<()> {
    eval_into(path, params, fc, cov, grads, false);
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite objective gradient".into()));
    }
    for s in 0..path.horizon() {
        md_update_row(path.stage(s), grads.row(s), eta, next.row_mut(s));
    }
    Ok(())
}

fn largest_eigenvalue(m: nalgebra::DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m).eigenvalues.max()
}

/// Contraction bound on the step size: `min_s 2 / (||Q_s||_2 * max_i z_s,i)`
/// where `Q_s` is the diagonal Hessian block of stage `s`.
pub fn step_size_bound(path: &AllocationPath, params: &ProblemParams, cov: &CovariancePath) -> f64 {
    let c = turnover_curvature(path, params);
    (0..path.horizon())
        .map(|s| {
            let q = largest_eigenvalue(hessian_block(&c, s, params, cov));
            let zmax = path.stage(s).iter().fold(0.0_f64, |m, &x| m.max(x));
            2.0 / (q * zmax)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Like [`step_size_bound`] but with each stage's Hessian norm replaced by
/// its block-row norm bound `||Q_s|| + max c_s + max c_{s+1}`, which also
/// covers the off-diagonal turnover coupling between adjacent stages.
pub fn coupled_step_size_bound(path: &AllocationPath, params: &ProblemParams, cov: &CovariancePath) -> f64 {
    let c = turnover_curvature(path, params);
    let h = path.horizon();
    let row_max = |s: usize| c.row(s).iter().fold(0.0_f64, |m, &x| m.max(x));
    (0..h)
        .map(|s| {
            let mut q = largest_eigenvalue(hessian_block(&c, s, params, cov));
            if s > 0 {
                q += row_max(s);
            }
            if s + 1 < h {
                q += row_max(s + 1);
            }
            let zmax = path.stage(s).iter().fold(0.0_f64, |m, &x| m.max(x));
            2.0 / (q * zmax)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Iterates the floor-clamped mirror-descent map until the fixed-point
/// residual drops below `config.tol` or `config.max_iters` is reached.
/// Non-convergence is reported through [`SolveResult::converged`].
pub fn solve_fixed_point(
    init: &AllocationPath,
    params: &ProblemParams,
    fc: &ForecastPath,
    cov: &CovariancePath,
    config: &SolverConfig,
) -> Result<SolveResult> {
    config.validate()?;
    check_problem(init, params, fc, cov)?;
    let mut start = init.clone();
    for s in 0..start.horizon() {
        clamp_row(start.stages.row_mut(s), config.floor);
    }
    match config.eta {
        Some(eta) => iterate(start, params, fc, cov, config, eta),
        None => {
            let mut eta = 0.5 * coupled_step_size_bound(&start, params, cov);
            let mut result = iterate(start, params, fc, cov, config, eta)?;
            // the bound depends on z*; shrink and continue if it was violated
            for _ in 0..4 {
                let bound = coupled_step_size_bound(&result.path, params, cov);
                if eta < bound {
                    break;
                }
                eta = 0.5 * bound;
                let iters = result.iters;
                result = iterate(result.path, params, fc, cov, config, eta)?;
                result.iters += iters;
            }
            Ok(result)
        }
    }
}

/// Starts from `z_init` replicated across the horizon.
pub fn solve_from_holdings(
    z_init: &[f64],
    params: &ProblemParams,
    fc: &ForecastPath,
    cov: &CovariancePath,
    config: &SolverConfig,
) -> Result<SolveResult> {
    solve_fixed_point(&AllocationPath::replicated(z_init, params.horizon), params, fc, cov, config)
}

fn iterate(
    mut path: AllocationPath,
    params: &ProblemParams,
    fc: &ForecastPath,
    cov: &CovariancePath,
    config: &SolverConfig,
    eta: f64,
) -> Result<SolveResult> {
    let (h, n) = path.stages.shape();
    let mut grads = StageMatrix::zeros(h, n);
    let mut next = StageMatrix::zeros(h, n);
    let mut residual = f64::INFINITY;
    for iter in 1..=config.max_iters {
        step_into(&path, params, fc, cov, eta, &mut grads, &mut next)?;
        for s in 0..h {
            clamp_row(next.row_mut(s), config.floor);
        }
        residual = next.max_abs_diff(&path.stages);
        std::mem::swap(&mut path.stages, &mut next);
        if !residual.is_finite() {
            return Err(Error::Numeric("mirror descent produced non-finite iterate".into()));
        }
        if residual <= config.tol {
            return Ok(SolveResult {
                path,
                residual,
                iters: iter,
                converged: true,
                eta,
            });
        }
    }
    Ok(SolveResult {
        path,
        residual,
        iters: config.max_iters,
        converged: false,
        eta,
    })
}

/// Objective value at a path; used by callers checking descent.
pub fn objective_at(path: &AllocationPath, params: &ProblemParams, fc: &ForecastPath, cov: &CovariancePath) -> Result<f64> {
    Ok(inner_objective(path, params, fc, cov)?.value)
}
