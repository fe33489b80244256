//! Implicit differentiation through the mirror-descent fixed point.
//!
//! At a fixed point `z* = Phi(z*, y)` of the stagewise map
//! `Phi_s(z) = normalize(z_s * exp(-eta * grad_s F(z)))`, the sensitivity of
//! `z*` to the forecast `y` is `(I - d_z Phi)^{-1} d_y Phi`. Vector-Jacobian
//! products with it are computed by a truncated Neumann series in which every
//! term costs one transposed Jacobian-vector product of `Phi`; no
//! `(NH) x (NH)` matrix is ever formed.
//!
//! Coordinates sitting at the floor are held fixed by the clamped map the
//! solver actually iterates, so their rows and columns of the sensitivity
//! are zero and the remaining coordinates of that stage are renormalized.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{clamp_row, AllocationPath, CovariancePath, ForecastPath, ProblemParams, StageMatrix};
use crate::error::{Error, Result};
use crate::objective::{check_problem, eval_into, hessian_apply, turnover_curvature};

/// Which Hessian couples the stages inside the Jacobian of `Phi`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMode {
    /// Full block-tridiagonal Hessian, including the turnover coupling
    /// between adjacent stages.
    #[default]
    Exact,
    /// Only the per-stage diagonal Hessian blocks.
    BlockDiagonal,
}

impl JacobianMode {
    fn coupled(self) -> bool {
        matches!(self, JacobianMode::Exact)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeumannConfig {
    /// Hard cap on the number of series terms after the zeroth.
    pub max_order: usize,
    /// Stop once the latest term's infinity norm is at most this.
    pub term_tol: f64,
    /// Coordinates at or below this value are treated as pinned to the floor.
    pub active_tol: f64,
    /// Solver tolerance the fixed point was computed with; inputs whose
    /// residual exceeds ten times this are rejected.
    pub fixed_point_tol: f64,
    pub mode: JacobianMode,
}

impl Default for NeumannConfig {
    fn default() -> Self {
        Self {
            max_order: 200,
            term_tol: 1e-6,
            active_tol: 1e-6,
            fixed_point_tol: 1e-10,
            mode: JacobianMode::Exact,
        }
    }
}

impl NeumannConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.term_tol > 0.0) {
            return Err(Error::InvalidParameter("term_tol must be > 0".into()));
        }
        if !(self.active_tol >= 0.0) || !(self.fixed_point_tol > 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Intermediate quantities of one application of `Phi` at a point.
///
/// `exp_weights` and `normalizers` are stored with a common per-stage scale
/// factor `exp(-max_i a_s,i)` to keep them finite; `phi` and every
/// derivative are invariant to that scale.
#[derive(Clone, Debug)]
pub struct MirrorMapEvaluation<'a> {
    /// `r_s,i = z_s,i * exp(a_s,i)` (scaled).
    pub exp_weights: StageMatrix,
    /// `M_s = sum_i r_s,i` (scaled).
    pub normalizers: Vec<f64>,
    /// `a = -eta * grad F`.
    pub scaled_grads: StageMatrix,
    /// `Phi(z) = r / M`.
    pub phi: StageMatrix,
    /// `exp(a_s,i) / M_s`
    ratio: StageMatrix,
    curvature: StageMatrix,
    path: AllocationPath,
    params: &'a ProblemParams,
    cov: &'a CovariancePath,
    eta: f64,
}

impl<'a> MirrorMapEvaluation<'a> {
    /// Evaluates `Phi` and caches what its derivatives need. No fixed-point
    /// check is made.
    pub fn at_point(
        path: &AllocationPath,
        params: &'a ProblemParams,
        fc: &ForecastPath,
        cov: &'a CovariancePath,
        eta: f64,
    ) -> Result<Self> {
        check_problem(path, params, fc, cov)?;
        if !(eta > 0.0) {
            return Err(Error::InvalidParameter(format!("eta must be > 0, got {eta}")));
        }
        let (h, n) = path.stages.shape();
        let mut a = StageMatrix::zeros(h, n);
        eval_into(path, params, fc, cov, &mut a, false);
        if !a.is_finite() {
            return Err(Error::Numeric("non-finite objective gradient".into()));
        }
        a.scale(-eta);
        let mut r = StageMatrix::zeros(h, n);
        let mut ratio = StageMatrix::zeros(h, n);
        let mut phi = StageMatrix::zeros(h, n);
        let mut normalizers = Vec::with_capacity(h);
        for s in 0..h {
            let amax = a.row(s).iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let z = path.stage(s);
            let mut m = 0.0;
            for i in 0..n {
                let e = (a[(s, i)] - amax).exp();
                ratio[(s, i)] = e;
                r[(s, i)] = z[i] * e;
                m += r[(s, i)];
            }
            for i in 0..n {
                ratio[(s, i)] /= m;
                phi[(s, i)] = r[(s, i)] / m;
            }
            normalizers.push(m);
        }
        Ok(Self {
            exp_weights: r,
            normalizers,
            scaled_grads: a,
            phi,
            ratio,
            curvature: turnover_curvature(path, params),
            path: path.clone(),
            params,
            cov,
            eta,
        })
    }

    /// Fixed-point residual `||clamp(Phi(z)) - z||_inf`.
    pub fn residual(&self, floor: f64) -> f64 {
        let mut worst = 0.0_f64;
        let mut row = vec![0.0; self.phi.cols()];
        for s in 0..self.phi.rows() {
            row.copy_from_slice(self.phi.row(s));
            clamp_row(&mut row, floor);
            for (x, z) in row.iter().zip(self.path.stage(s)) {
                worst = worst.max((x - z).abs());
            }
        }
        worst
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn path(&self) -> &AllocationPath {
        &self.path
    }

    /// `(d_z Phi) v`.
    pub fn jvp_z(&self, v: &StageMatrix, mode: JacobianMode) -> StageMatrix {
        let (h, n) = v.shape();
        let mut hv = StageMatrix::zeros(h, n);
        hessian_apply(&self.curvature, self.params, self.cov, v, mode.coupled(), &mut hv);
        let mut out = StageMatrix::zeros(h, n);
        for s in 0..h {
            let z = self.path.stage(s);
            let o = out.row_mut(s);
            let mut total = 0.0;
            for i in 0..n {
                // dr/M = ratio * (dz + z * da),  da = -eta * Hess dz
                let t = self.ratio[(s, i)] * (v[(s, i)] - self.eta * z[i] * hv[(s, i)]);
                o[i] = t;
                total += t;
            }
            for i in 0..n {
                o[i] -= self.phi[(s, i)] * total;
            }
        }
        out
    }

    /// `(d_z Phi)' u`.
    pub fn vjp_z(&self, u: &StageMatrix, mode: JacobianMode) -> StageMatrix {
        let (h, n) = u.shape();
        let mut out = StageMatrix::zeros(h, n);
        let mut abar = StageMatrix::zeros(h, n);
        for s in 0..h {
            let phi = self.phi.row(s);
            let proj: f64 = phi.iter().zip(u.row(s)).map(|(p, x)| p * x).sum();
            for i in 0..n {
                let q = u[(s, i)] - proj;
                out[(s, i)] = self.ratio[(s, i)] * q;
                abar[(s, i)] = phi[i] * q;
            }
        }
        let mut hv = StageMatrix::zeros(h, n);
        hessian_apply(&self.curvature, self.params, self.cov, &abar, mode.coupled(), &mut hv);
        out.axpy(-self.eta, &hv);
        out
    }

    /// `(d_y Phi) w` for a forecast perturbation `w`.
    pub fn jvp_forecast(&self, w: &StageMatrix) -> StageMatrix {
        let (h, n) = w.shape();
        let mut out = StageMatrix::zeros(h, n);
        for s in 0..h {
            let phi = self.phi.row(s);
            let o = out.row_mut(s);
            let mut total = 0.0;
            for i in 0..n {
                o[i] = self.eta * phi[i] * w[(s, i)];
                total += o[i];
            }
            for i in 0..n {
                o[i] -= phi[i] * total;
            }
        }
        out
    }

    /// `(d_y Phi)' u`; stage `s` equals `eta * diag(phi_s) (u_s - 1 phi_s' u_s)`.
    pub fn vjp_forecast(&self, u: &StageMatrix) -> StageMatrix {
        let (h, n) = u.shape();
        let mut out = StageMatrix::zeros(h, n);
        for s in 0..h {
            let phi = self.phi.row(s);
            let proj: f64 = phi.iter().zip(u.row(s)).map(|(p, x)| p * x).sum();
            for i in 0..n {
                out[(s, i)] = self.eta * phi[i] * (u[(s, i)] - proj);
            }
        }
        out
    }

    /// Dense `(NH) x (NH)` Jacobian of `Phi` with respect to `z`, assembled
    /// from JVPs. For tests and small instances only.
    pub fn dense_jacobian(&self, mode: JacobianMode) -> DMatrix<f64> {
        let (h, n) = self.phi.shape();
        let dim = h * n;
        let mut jac = DMatrix::zeros(dim, dim);
        let mut e = StageMatrix::zeros(h, n);
        for k in 0..dim {
            e.as_mut_slice()[k] = 1.0;
            let col = self.jvp_z(&e, mode);
            jac.column_mut(k).copy_from_slice(col.as_slice());
            e.as_mut_slice()[k] = 0.0;
        }
        jac
    }

    /// Dense `(NH) x (NH)` Jacobian of `Phi` with respect to the forecast.
    pub fn dense_forecast_jacobian(&self) -> DMatrix<f64> {
        let (h, n) = self.phi.shape();
        let dim = h * n;
        let mut jac = DMatrix::zeros(dim, dim);
        let mut e = StageMatrix::zeros(h, n);
        for k in 0..dim {
            e.as_mut_slice()[k] = 1.0;
            let col = self.jvp_forecast(&e);
            jac.column_mut(k).copy_from_slice(col.as_slice());
            e.as_mut_slice()[k] = 0.0;
        }
        jac
    }
}

/// Per-stage linearization of the clamp-and-renormalize step at `z*`:
/// pinned coordinates get zero, free ones are projected so each stage's
/// free entries sum to zero. Stages without pinned coordinates pass
/// through unchanged.
#[derive(Clone, Debug)]
pub struct ActiveSet {
    pinned: Vec<Vec<bool>>,
    free_mass: Vec<f64>,
    z: StageMatrix,
}

impl ActiveSet {
    pub fn detect(path: &AllocationPath, active_tol: f64) -> Self {
        let (h, _) = path.stages.shape();
        let mut pinned = Vec::with_capacity(h);
        let mut free_mass = Vec::with_capacity(h);
        for s in 0..h {
            let row = path.stage(s);
            let p: Vec<bool> = row.iter().map(|&x| x <= active_tol).collect();
            free_mass.push(row.iter().zip(&p).filter(|(_, &a)| !a).map(|(x, _)| x).sum());
            pinned.push(p);
        }
        Self {
            pinned,
            free_mass,
            z: path.stages.clone(),
        }
    }

    pub fn is_pinned(&self, s: usize, i: usize) -> bool {
        self.pinned[s][i]
    }

    pub fn count(&self) -> usize {
        self.pinned.iter().flatten().filter(|&&p| p).count()
    }

    fn stage_has_pins(&self, s: usize) -> bool {
        self.pinned[s].iter().any(|&p| p)
    }

    /// Applies the linearized clamp in place.
    pub fn project(&self, x: &mut StageMatrix) {
        for s in 0..x.rows() {
            if !self.stage_has_pins(s) {
                continue;
            }
            let pins = &self.pinned[s];
            let row = x.row_mut(s);
            let free_sum: f64 = row.iter().zip(pins).filter(|(_, &p)| !p).map(|(v, _)| v).sum();
            let scale = free_sum / self.free_mass[s];
            for (i, v) in row.iter_mut().enumerate() {
                *v = if pins[i] { 0.0 } else { *v - self.z[(s, i)] * scale };
            }
        }
    }

    /// Applies the transpose of [`ActiveSet::project`] in place.
    pub fn project_transpose(&self, u: &mut StageMatrix) {
        for s in 0..u.rows() {
            if !self.stage_has_pins(s) {
                continue;
            }
            let pins = &self.pinned[s];
            let z = self.z.row(s);
            let row = u.row_mut(s);
            let weighted: f64 = row
                .iter()
                .zip(z)
                .zip(pins)
                .filter(|(_, &p)| !p)
                .map(|((v, zi), _)| v * zi)
                .sum();
            let shift = weighted / self.free_mass[s];
            for (i, v) in row.iter_mut().enumerate() {
                *v = if pins[i] { 0.0 } else { *v - shift };
            }
        }
    }

    /// Sets pinned entries to exactly zero.
    pub fn zero_pinned(&self, x: &mut StageMatrix) {
        for s in 0..x.rows() {
            for (i, v) in x.row_mut(s).iter_mut().enumerate() {
                if self.pinned[s][i] {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Gradient with respect to the forecast plus Neumann diagnostics.
#[derive(Clone, Debug)]
pub struct ImplicitGradient {
    pub grad: StageMatrix,
    /// Infinity norm of the last series term added.
    pub residual: f64,
    /// Geometric estimate of the norm of the truncated remainder.
    pub tail_estimate: f64,
    /// Number of terms after the zeroth.
    pub terms: usize,
    /// Infinity norms of every term, starting with the zeroth.
    pub term_norms: Vec<f64>,
}

fn fixed_point_evaluation<'a>(
    zstar: &AllocationPath,
    params: &'a ProblemParams,
    fc: &ForecastPath,
    cov: &'a CovariancePath,
    eta: f64,
    fixed_point_tol: f64,
    floor: f64,
) -> Result<MirrorMapEvaluation<'a>> {
    let ev = MirrorMapEvaluation::at_point(zstar, params, fc, cov, eta)?;
    let residual = ev.residual(floor);
    if residual > 10.0 * fixed_point_tol {
        return Err(Error::Precondition(format!(
            "input is not a fixed point: residual {residual:.3e} exceeds {:.3e}",
            10.0 * fixed_point_tol
        )));
    }
    Ok(ev)
}

/// `(d_z Phi) v` at a converged fixed point.
pub fn phi_jvp_z(
    zstar: &AllocationPath,
    v: &StageMatrix,
    params: &ProblemParams,
    fc: &ForecastPath,
    cov: &CovariancePath,
    eta: f64,
    ncfg: &NeumannConfig,
) -> Result<StageMatrix> {
    let ev = fixed_point_evaluation(zstar, params, fc, cov, eta, ncfg.fixed_point_tol, crate::domain::DEFAULT_FLOOR)?;
    check_shape(v, zstar)?;
    Ok(ev.jvp_z(v, ncfg.mode))
}

/// `u' (d_y Phi)` at a converged fixed point.
pub fn phi_vjp_forecast(
    zstar: &AllocationPath,
    u: &StageMatrix,
    params: &ProblemParams,
    fc: &ForecastPath,
    cov: &CovariancePath,
    eta: f64,
    ncfg: &NeumannConfig,
) -> Result<StageMatrix> {
    let ev = fixed_point_evaluation(zstar, params, fc, cov, eta, ncfg.fixed_point_tol, crate::domain::DEFAULT_FLOOR)?;
    check_shape(u, zstar)?;
    Ok(ev.vjp_forecast(u))
}

fn check_shape(v: &StageMatrix, z: &AllocationPath) -> Result<()> {
    if v.shape() != z.stages.shape() {
        return Err(Error::Shape(format!(
            "direction {:?} does not match path {:?}",
            v.shape(),
            z.stages.shape()
        )));
    }
    Ok(())
}

/// Gradient of a loss with respect to the forecast, given the loss gradient
/// with respect to the fixed point `z*`.
pub fn implicit_vjp(
    zstar: &AllocationPath,
    loss_grad: &StageMatrix,
    params: &ProblemParams,
    fc: &ForecastPath,
    cov: &CovariancePath,
    eta: f64,
    ncfg: &NeumannConfig,
) -> Result<ImplicitGradient> {
    ncfg.validate()?;
    check_shape(loss_grad, zstar)?;
    let ev = fixed_point_evaluation(zstar, params, fc, cov, eta, ncfg.fixed_point_tol, crate::domain::DEFAULT_FLOOR)?;
    let active = ActiveSet::detect(zstar, ncfg.active_tol);
    implicit_vjp_with(&ev, &active, loss_grad, ncfg)
}

/// [`implicit_vjp`] on a prepared evaluation; skips the fixed-point check.
pub fn implicit_vjp_with(
    ev: &MirrorMapEvaluation<'_>,
    active: &ActiveSet,
    loss_grad: &StageMatrix,
    ncfg: &NeumannConfig,
) -> Result<ImplicitGradient> {
    let mut acc = loss_grad.clone();
    let mut term = loss_grad.clone();
    let first = term.max_abs();
    let mut term_norms = vec![first];
    let mut residual = first;
    let mut tail = first;
    let mut terms = 0;
    if first > ncfg.term_tol {
        for b in 1..=ncfg.max_order {
            active.project_transpose(&mut term);
            term = ev.vjp_z(&term, ncfg.mode);
            let prev = residual;
            residual = term.max_abs();
            term_norms.push(residual);
            acc.axpy(1.0, &term);
            terms = b;
            if !residual.is_finite() {
                return Err(Error::Divergence { terms: b, last_norm: residual });
            }
            // geometric estimate of the remaining terms; a small last term
            // alone is not enough when the series contracts slowly
            let ratio = if prev > 0.0 { residual / prev } else { 0.0 };
            tail = if ratio < 1.0 {
                residual * ratio / (1.0 - ratio)
            } else {
                f64::INFINITY
            };
            if residual <= ncfg.term_tol && tail <= ncfg.term_tol {
                break;
            }
        }
        if residual > ncfg.term_tol && residual >= first {
            return Err(Error::Divergence {
                terms,
                last_norm: residual,
            });
        }
    }
    active.project_transpose(&mut acc);
    let mut grad = ev.vjp_forecast(&acc);
    active.zero_pinned(&mut grad);
    Ok(ImplicitGradient {
        grad,
        residual,
        tail_estimate: if terms == 0 { 0.0 } else { tail },
        terms,
        term_norms,
    })
}

/// Dense sensitivity `dz*/dy` (rows: path entries, columns: forecast
/// entries) assembled row by row from [`implicit_vjp_with`].
pub fn assemble_sensitivity(ev: &MirrorMapEvaluation<'_>, active: &ActiveSet, ncfg: &NeumannConfig) -> Result<DMatrix<f64>> {
    let (h, n) = ev.phi.shape();
    let dim = h * n;
    let mut jac = DMatrix::zeros(dim, dim);
    let mut e = StageMatrix::zeros(h, n);
    for k in 0..dim {
        e.as_mut_slice()[k] = 1.0;
        let row = implicit_vjp_with(ev, active, &e, ncfg)?;
        for (j, &g) in row.grad.as_slice().iter().enumerate() {
            jac[(k, j)] = g;
        }
        e.as_mut_slice()[k] = 0.0;
    }
    Ok(jac)
}

/// Fraction of the coupled step-size bound used by [`backward_step_size`].
pub const BACKWARD_STEP_FRACTION: f64 = 0.9;

/// Step size for differentiating at `zstar`.
///
/// `z*` is a fixed point of the mirror map for every `eta > 0`, and the
/// implicit sensitivity does not depend on `eta`; only the Neumann decay
/// rate does. The backward pass can therefore run closer to the contraction
/// bound than the forward solve, which needs margin while `z` moves.
pub fn backward_step_size(zstar: &AllocationPath, params: &ProblemParams, cov: &CovariancePath) -> f64 {
    BACKWARD_STEP_FRACTION * crate::solver::coupled_step_size_bound(zstar, params, cov)
}

/// Power-iteration estimate of the spectral radius of `d_z Phi` at `z*`.
pub fn spectral_radius_estimate(
    zstar: &AllocationPath,
    params: &ProblemParams,
    fc: &ForecastPath,
    cov: &CovariancePath,
    eta: f64,
    mode: JacobianMode,
) -> Result<f64> {
    let ev = MirrorMapEvaluation::at_point(zstar, params, fc, cov, eta)?;
    Ok(spectral_radius_of(&ev, mode))
}

pub(crate) fn spectral_radius_of(ev: &MirrorMapEvaluation<'_>, mode: JacobianMode) -> f64 {
    let (h, n) = ev.phi.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = StageMatrix::from_vec(h, n, (0..h * n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape matches");
    let norm2 = |m: &StageMatrix| m.dot(m).sqrt();
    let n0 = norm2(&v);
    v.scale(1.0 / n0);
    // two steps per round so a dominant +/- eigenvalue pair still yields
    // a stable norm ratio
    let mut estimate = 0.0;
    for _ in 0..200 {
        let w = ev.jvp_z(&v, mode);
        let mut x = ev.jvp_z(&w, mode);
        let nx = norm2(&x);
        if nx == 0.0 || !nx.is_finite() {
            return if nx == 0.0 { 0.0 } else { f64::INFINITY };
        }
        let next = nx.sqrt();
        x.scale(1.0 / nx);
        v = x;
        if (next - estimate).abs() < 1e-10 {
            return next;
        }
        estimate = next;
    }
    estimate
}
