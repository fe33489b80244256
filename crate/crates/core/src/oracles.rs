//! Independent reference computations used by tests and benchmarks:
//! finite-difference and KKT sensitivities of the fixed point, and a
//! Euclidean projected-gradient forward solver.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::domain::{AllocationPath, CovariancePath, ForecastPath, ProblemParams, StageMatrix};
use crate::error::{Error, Result};
use crate::mdfp::{ActiveSet, JacobianMode, MirrorMapEvaluation};
use crate::objective::{check_problem, eval_into, turnover_curvature};

/// Minimum multiplier gap required of every active coordinate.
pub const COMPLEMENTARITY_GAP: f64 = 1e-6;

/// Coordinates at or below this are treated as active (at zero).
pub const ACTIVE_TOL: f64 = 1e-6;

const PG_MAX_ITERS: usize = 1_000_000;

/// Euclidean projection of `v` onto the probability simplex, in place.
pub fn project_simplex(v: &mut [f64]) {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter_mut().for_each(|x| *x = (*x - theta).max(0.0));
}

/// Lipschitz constant of the objective gradient.
fn gradient_lipschitz(params: &ProblemParams, cov: &CovariancePath) -> f64 {
    let risk = cov
        .iter()
        .map(|v| SymmetricEigen::new(v.clone()).eigenvalues.max())
        .fold(0.0_f64, f64::max);
    params.delta * risk + 4.0 * params.lambda / params.kappa.sqrt()
}

/// Projected-gradient descent with step `1/L`, run until the infinity norm
/// of the gradient mapping is at most `tol`.
pub fn projected_gradient_solve(
    params: &ProblemParams,
    fc: &ForecastPath,
    cov: &CovariancePath,
    z_init: &[f64],
    tol: f64,
) -> Result<AllocationPath> {
    let start = AllocationPath::replicated(z_init, params.horizon);
    projected_gradient_from(&start, params, fc, cov, tol)
}

/// [`projected_gradient_solve`] warm-started at `start`; `start.z_init`
/// is the pre-trade allocation.
pub fn projected_gradient_from(
    start: &AllocationPath,
    params: &ProblemParams,
    fc: &ForecastPath,
    cov: &CovariancePath,
    tol: f64,
) -> Result<AllocationPath> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be > 0, got {tol}")));
    }
    check_problem(start, params, fc, cov)?;
    let (h, n) = start.stages.shape();
    let step = 1.0 / gradient_lipschitz(params, cov);
    let mut path = start.clone();
    for s in 0..h {
        project_simplex(path.stages.row_mut(s));
    }
    let mut grads = StageMatrix::zeros(h, n);
    let mut next = StageMatrix::zeros(h, n);
    for _ in 0..PG_MAX_ITERS {
        eval_into(&path, params, fc, cov, &mut grads, false);
        if !grads.is_finite() {
            return Err(Error::Oracle("non-finite gradient in projected-gradient solve".into()));
        }
        next.as_mut_slice().copy_from_slice(path.stages.as_slice());
        next.axpy(-step, &grads);
        for s in 0..h {
            project_simplex(next.row_mut(s));
        }
        let mapping = next.max_abs_diff(&path.stages) / step;
        std::mem::swap(&mut path.stages, &mut next);
        if mapping <= tol {
            return Ok(path);
        }
    }
    Err(Error::Oracle(format!(
        "projected gradient did not reach tolerance {tol:.1e} in {PG_MAX_ITERS} iterations"
    )))
}

/// Central finite-difference Jacobian of `z*` with respect to the forecast;
/// rows index path entries and columns forecast entries, both stage-major.
pub fn fd_sensitivity(
    params: &ProblemParams,
    fc: &ForecastPath,
    cov: &CovariancePath,
    z_init: &[f64],
    eps: f64,
) -> Result<DMatrix<f64>> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::InvalidParameter(format!("eps must lie in [1e-7, 1e-4], got {eps}")));
    }
    let (h, n) = fc.y_hat.shape();
    if h * n > 30 {
        return Err(Error::InvalidParameter(format!("instance too large for finite differences: N*H = {}", h * n)));
    }
    let tol = 1e-12;
    let base = projected_gradient_solve(params, fc, cov, z_init, tol)?;
    let dim = h * n;
    let mut jac = DMatrix::zeros(dim, dim);
    for k in 0..dim {
        let solve_at = |sign: f64| -> Result<AllocationPath> {
            let mut y = fc.y_hat.clone();
            y.as_mut_slice()[k] += sign * eps;
            projected_gradient_from(&base, params, &ForecastPath::new(y)?, cov, tol)
        };
        let plus = solve_at(1.0)?;
        let minus = solve_at(-1.0)?;
        for (r, (p, m)) in plus.stages.as_slice().iter().zip(minus.stages.as_slice()).enumerate() {
            jac[(r, k)] = (p - m) / (2.0 * eps);
        }
    }
    Ok(jac)
}

/// Linearized KKT system of the inner program at a solution, restricted to
/// the free coordinates of each stage.
///
/// Stationarity reads `grad_s F = mu_s 1 + nu_s` with `nu_s >= 0` vanishing
/// on the free set. Differentiating it together with `1' dz_s = 0` gives a
/// bordered system in `(dz_B, dxi)` whose right-hand side is `-K`, where
/// `K = d(grad F)/d y = -I`.
#[derive(Clone, Debug)]
pub struct SensitivitySystem {
    /// Free coordinates of each stage.
    pub free_sets: Vec<Vec<usize>>,
    /// Diagonal Hessian blocks (full `N x N`).
    pub stage_hessians: Vec<DMatrix<f64>>,
    /// `c[s][i]`: turnover curvature coupling stage `s-1` and `s`.
    pub cross_curvature: StageMatrix,
    /// Equality multipliers `mu_s` (mean gradient over the free set).
    pub multipliers: Vec<f64>,
    /// Smallest multiplier gap `grad_i - mu_s` over active coordinates,
    /// `+inf` when nothing is active.
    pub min_gap: f64,
    pub mode: JacobianMode,
    n_assets: usize,
    offsets: Vec<usize>,
    matrix: DMatrix<f64>,
}

impl SensitivitySystem {
    pub fn build(
        zstar: &AllocationPath,
        params: &ProblemParams,
        fc: &ForecastPath,
        cov: &CovariancePath,
        mode: JacobianMode,
    ) -> Result<Self> {
        check_problem(zstar, params, fc, cov)?;
        let (h, n) = zstar.stages.shape();
        let mut grads = StageMatrix::zeros(h, n);
        eval_into(zstar, params, fc, cov, &mut grads, false);
        let c = turnover_curvature(zstar, params);

        let mut free_sets = Vec::with_capacity(h);
        let mut multipliers = Vec::with_capacity(h);
        let mut min_gap = f64::INFINITY;
        for s in 0..h {
            let z = zstar.stage(s);
            let free: Vec<usize> = (0..n).filter(|&i| z[i] > ACTIVE_TOL).collect();
            if free.is_empty() {
                return Err(Error::DegenerateInstance(format!("stage {s} has no free coordinate")));
            }
            let g = grads.row(s);
            let mu = free.iter().map(|&i| g[i]).sum::<f64>() / free.len() as f64;
            for i in (0..n).filter(|i| !free.contains(i)) {
                min_gap = min_gap.min(g[i] - mu);
            }
            free_sets.push(free);
            multipliers.push(mu);
        }
        if min_gap < COMPLEMENTARITY_GAP {
            return Err(Error::DegenerateInstance(format!(
                "strict complementarity violated: multiplier gap {min_gap:.3e} < {COMPLEMENTARITY_GAP:.0e}"
            )));
        }

        let stage_hessians: Vec<DMatrix<f64>> = (0..h)
            .map(|s| crate::objective::hessian_block(&c, s, params, cov))
            .collect();
        let mut offsets = Vec::with_capacity(h + 1);
        let mut m = 0;
        for f in &free_sets {
            offsets.push(m);
            m += f.len();
        }
        offsets.push(m);

        // unknowns: free dz entries stage by stage, then one xi per stage
        let dim = m + h;
        let mut a = DMatrix::zeros(dim, dim);
        for s in 0..h {
            let f = &free_sets[s];
            let q = &stage_hessians[s];
            for (p, &i) in f.iter().enumerate() {
                for (r, &j) in f.iter().enumerate() {
                    a[(offsets[s] + p, offsets[s] + r)] = q[(i, j)];
                }
                a[(offsets[s] + p, m + s)] = 1.0;
                a[(m + s, offsets[s] + p)] = 1.0;
            }
            if mode == JacobianMode::Exact && s + 1 < h {
                let g = &free_sets[s + 1];
                for (p, &i) in f.iter().enumerate() {
                    if let Some(r) = g.iter().position(|&j| j == i) {
                        let v = -c[(s + 1, i)];
                        a[(offsets[s] + p, offsets[s + 1] + r)] = v;
                        a[(offsets[s + 1] + r, offsets[s] + p)] = v;
                    }
                }
            }
        }

        Ok(Self {
            free_sets,
            stage_hessians,
            cross_curvature: c,
            multipliers,
            min_gap,
            mode,
            n_assets: n,
            offsets,
            matrix: a,
        })
    }

    /// The bordered matrix `[H_BB 1; 1' 0]`.
    pub fn bordered_matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    fn flat(&self, s: usize, i: usize) -> usize {
        s * self.n_assets + i
    }

    fn free_dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn lu_solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.matrix
            .clone()
            .lu()
            .solve(rhs)
            .filter(|x| x.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::Numeric("singular bordered KKT system".into()))
    }

    /// Full `(HN) x (HN)` sensitivity `dz*/dy`; rows and columns of active
    /// coordinates are zero.
    pub fn jacobian(&self) -> Result<DMatrix<f64>> {
        let h = self.free_sets.len();
        let dim = h * self.n_assets;
        let m = self.free_dim();
        // -K = I on the free coordinates
        let mut rhs = DMatrix::zeros(m + h, m);
        for k in 0..m {
            rhs[(k, k)] = 1.0;
        }
        let sol = self.lu_solve(&rhs)?;
        let mut jac = DMatrix::zeros(dim, dim);
        for s in 0..h {
            for (p, &i) in self.free_sets[s].iter().enumerate() {
                let row = self.flat(s, i);
                for t in 0..h {
                    for (r, &j) in self.free_sets[t].iter().enumerate() {
                        jac[(row, self.flat(t, j))] = sol[(self.offsets[s] + p, self.offsets[t] + r)];
                    }
                }
            }
        }
        Ok(jac)
    }

    /// `(dz*/dy)' g` with one solve of the (symmetric) bordered system.
    pub fn vjp(&self, loss_grad: &StageMatrix) -> Result<StageMatrix> {
        let h = self.free_sets.len();
        let m = self.free_dim();
        let mut rhs = DVector::zeros(m + h);
        for s in 0..h {
            for (p, &i) in self.free_sets[s].iter().enumerate() {
                rhs[self.offsets[s] + p] = loss_grad[(s, i)];
            }
        }
        let rhs = DMatrix::from_column_slice(m + h, 1, rhs.as_slice());
        let sol = self.lu_solve(&rhs)?;
        let mut out = StageMatrix::zeros(h, self.n_assets);
        for s in 0..h {
            for (p, &i) in self.free_sets[s].iter().enumerate() {
                out[(s, i)] = sol[(self.offsets[s] + p, 0)];
            }
        }
        Ok(out)
    }
}

/// KKT sensitivity `dz*/dy` at a solution `zstar`.
pub fn kkt_sensitivity(
    zstar: &AllocationPath,
    params: &ProblemParams,
    fc: &ForecastPath,
    cov: &CovariancePath,
    mode: JacobianMode,
) -> Result<DMatrix<f64>> {
    SensitivitySystem::build(zstar, params, fc, cov, mode)?.jacobian()
}

/// Dense reference for the implicit gradient: solves
/// `(I - P J)' w = g` directly, where `J` is the Jacobian of the mirror map
/// and `P` the linearized clamp, then maps `P' w` into the forecast.
pub fn dense_fixed_point_vjp(
    ev: &MirrorMapEvaluation<'_>,
    active: &ActiveSet,
    loss_grad: &StageMatrix,
    mode: JacobianMode,
) -> Result<StageMatrix> {
    let (h, n) = loss_grad.shape();
    let dim = h * n;
    let jac = ev.dense_jacobian(mode);
    let mut proj = DMatrix::zeros(dim, dim);
    let mut e = StageMatrix::zeros(h, n);
    for k in 0..dim {
        e.as_mut_slice().fill(0.0);
        e.as_mut_slice()[k] = 1.0;
        active.project(&mut e);
        proj.column_mut(k).copy_from_slice(e.as_slice());
    }
    let system = (DMatrix::identity(dim, dim) - &proj * jac).transpose();
    let w = system
        .lu()
        .solve(&DVector::from_column_slice(loss_grad.as_slice()))
        .ok_or_else(|| Error::Numeric("singular fixed-point system".into()))?;
    let mut w = StageMatrix::from_vec(h, n, w.as_slice().to_vec())?;
    active.project_transpose(&mut w);
    let mut grad = ev.vjp_forecast(&w);
    active.zero_pinned(&mut grad);
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::objective_value;
    use crate::solver::{solve_from_holdings, SolverConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let m = &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.5;
        (&m + m.transpose()) * 0.5
    }

    #[test]
    fn simplex_projection_cases() {
        let mut v = vec![0.2, 0.3, 0.5];
        project_simplex(&mut v);
        assert_eq!(v, vec![0.2, 0.3, 0.5]);
        let mut v = vec![2.0, 0.0];
        project_simplex(&mut v);
        assert_eq!(v, vec![1.0, 0.0]);
        let mut v = vec![1.0, 1.0, 1.0];
        project_simplex(&mut v);
        for x in v {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut v = vec![-5.0, 0.5, 0.7];
        project_simplex(&mut v);
        assert!((v[0]).abs() < 1e-15 && (v[1] - 0.4).abs() < 1e-12 && (v[2] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn projection_is_closest_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(2..7);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut p = v.clone();
            project_simplex(&mut p);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&x| x >= 0.0));
            // variational inequality: (v - p)'(q - p) <= 0 for simplex vertices q
            for k in 0..n {
                let ip: f64 = (0..n).map(|i| (v[i] - p[i]) * (if i == k { 1.0 } else { 0.0 } - p[i])).sum();
                assert!(ip <= 1e-12);
            }
        }
    }

    fn two_asset() -> (ProblemParams, ForecastPath, CovariancePath) {
        (
            ProblemParams::new(1.0, 0.0, 1e-4, 1, 2).unwrap(),
            ForecastPath::new(StageMatrix::from_rows(&[vec![0.1, 0.0]]).unwrap()).unwrap(),
            CovariancePath::identity(1, 2),
        )
    }

    #[test]
    fn analytic_two_asset_sensitivities() {
        let (params, fc, cov) = two_asset();
        let z = projected_gradient_solve(&params, &fc, &cov, &[0.5, 0.5], 1e-13).unwrap();
        assert!((z.stages[(0, 0)] - 0.55).abs() < 1e-12);
        let expected = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        let kkt = kkt_sensitivity(&z, &params, &fc, &cov, JacobianMode::Exact).unwrap();
        assert!((kkt - &expected).amax() < 1e-12);
        let fd = fd_sensitivity(&params, &fc, &cov, &[0.5, 0.5], 1e-5).unwrap();
        assert!((fd - &expected).amax() < 1e-6);
    }

    #[test]
    fn one_active_coordinate() {
        // asset 2 has a forecast far below the others, so it is held at zero
        let params = ProblemParams::new(1.0, 0.0, 1e-4, 1, 3).unwrap();
        let fc = ForecastPath::new(StageMatrix::from_rows(&[vec![0.1, 0.0, -1.0]]).unwrap()).unwrap();
        let cov = CovariancePath::identity(1, 3);
        let z = projected_gradient_solve(&params, &fc, &cov, &[1.0 / 3.0; 3], 1e-13).unwrap();
        assert_eq!(z.stages[(0, 2)], 0.0);
        let jac = kkt_sensitivity(&z, &params, &fc, &cov, JacobianMode::Exact).unwrap();
        // reduced two-asset system with identity Hessian: I - 11'/2
        let expected = DMatrix::from_row_slice(3, 3, &[0.5, -0.5, 0.0, -0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
        assert!((jac - &expected).amax() < 1e-12);
        let fd = fd_sensitivity(&params, &fc, &cov, &[1.0 / 3.0; 3], 1e-5).unwrap();
        assert!((fd - &expected).amax() < 1e-6);
    }

    #[test]
    fn degenerate_complementarity_is_rejected() {
        let params = ProblemParams::new(1.0, 0.0, 1e-4, 1, 2).unwrap();
        // solution (1, 0) exactly at the kink: gradient gap is zero
        let fc = ForecastPath::new(StageMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        let cov = CovariancePath::identity(1, 2);
        let z = AllocationPath::new(vec![0.5, 0.5], StageMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        let err = kkt_sensitivity(&z, &params, &fc, &cov, JacobianMode::Exact);
        assert!(matches!(err, Err(Error::DegenerateInstance(_))));
    }

    #[test]
    fn symmetric_instance_gives_uniform_weights() {
        let params = ProblemParams::new(2.0, 0.01, 1e-4, 2, 4).unwrap();
        let fc = ForecastPath::zeros(2, 4);
        let v = DMatrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.3 });
        let cov = CovariancePath::constant(v, 2).unwrap();
        let start = AllocationPath::new(
            vec![0.25; 4],
            StageMatrix::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![0.7, 0.1, 0.1, 0.1]]).unwrap(),
        )
        .unwrap();
        let z = projected_gradient_from(&start, &params, &fc, &cov, 1e-12).unwrap();
        for x in z.stages.as_slice() {
            assert!((x - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn projected_gradient_agrees_with_mirror_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for case in 0..50 {
            let (h, n) = (1 + case % 3, 2 + case % 4);
            let lambda = if case % 2 == 0 { 0.0 } else { 0.01 };
            let params = ProblemParams::new(1.0, lambda, 1e-2, h, n).unwrap();
            let fc = ForecastPath::new(
                StageMatrix::from_vec(h, n, (0..h * n).map(|_| rng.random_range(-0.2..0.2)).collect()).unwrap(),
            )
            .unwrap();
            let cov = CovariancePath::new((0..h).map(|_| random_spd(&mut rng, n)).collect()).unwrap();
            let z0 = vec![1.0 / n as f64; n];
            let pg = projected_gradient_solve(&params, &fc, &cov, &z0, 1e-12).unwrap();
            let md = solve_from_holdings(&z0, &params, &fc, &cov, &SolverConfig::default().with_tol(1e-13)).unwrap();
            assert!(md.converged);
            let gap = pg.stages.max_abs_diff(&md.path.stages);
            assert!(gap < 1e-7, "case {case}: {gap}");
            let fp = objective_value(&pg, &params, &fc, &cov).unwrap();
            let fm = objective_value(&md.path, &params, &fc, &cov).unwrap();
            // a coordinate held at the 1e-8 floor instead of zero shifts the
            // value by about floor * gap, so only interior solutions are
            // held to the tight tolerance
            let interior = md.path.stages.as_slice().iter().all(|&x| x > 1e-6);
            let tol = if interior { 1e-10 } else { 1e-7 };
            assert!((fp - fm).abs() < tol, "case {case}: {fp} vs {fm}");
        }
    }

    #[test]
    fn zero_turnover_separates_stages() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = ProblemParams::new(1.0, 0.0, 1e-4, 2, 3).unwrap();
        let rows = vec![vec![0.1, -0.05, 0.02], vec![-0.1, 0.2, 0.0]];
        let fc = ForecastPath::new(StageMatrix::from_rows(&rows).unwrap()).unwrap();
        let mats: Vec<_> = (0..2).map(|_| random_spd(&mut rng, 3)).collect();
        let cov = CovariancePath::new(mats.clone()).unwrap();
        let joint = projected_gradient_solve(&params, &fc, &cov, &[1.0 / 3.0; 3], 1e-12).unwrap();
        for s in 0..2 {
            let single = projected_gradient_solve(
                &params.with_horizon(1),
                &ForecastPath::new(StageMatrix::from_rows(&[rows[s].clone()]).unwrap()).unwrap(),
                &CovariancePath::new(vec![mats[s].clone()]).unwrap(),
                &[1.0 / 3.0; 3],
                1e-12,
            )
            .unwrap();
            for i in 0..3 {
                assert!((single.stages[(0, i)] - joint.stages[(s, i)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn kkt_vjp_matches_jacobian_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let params = ProblemParams::new(1.0, 0.01, 1e-2, 3, 3).unwrap();
        let fc = ForecastPath::new(
            StageMatrix::from_vec(3, 3, (0..9).map(|_| rng.random_range(-0.1..0.1)).collect()).unwrap(),
        )
        .unwrap();
        let cov = CovariancePath::new((0..3).map(|_| random_spd(&mut rng, 3)).collect()).unwrap();
        let z = projected_gradient_solve(&params, &fc, &cov, &[1.0 / 3.0; 3], 1e-12).unwrap();
        let sys = SensitivitySystem::build(&z, &params, &fc, &cov, JacobianMode::Exact).unwrap();
        let jac = sys.jacobian().unwrap();
        let g = StageMatrix::from_vec(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let expected = jac.transpose() * DVector::from_column_slice(g.as_slice());
        let got = sys.vjp(&g).unwrap();
        for (a, b) in got.as_slice().iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // columns of the sensitivity are tangent to each stage simplex
        for col in 0..9 {
            for s in 0..3 {
                let sum: f64 = (0..3).map(|i| jac[(s * 3 + i, col)]).sum();
                assert!(sum.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fd_rejects_bad_eps() {
        let (params, fc, cov) = two_asset();
        assert!(matches!(
            fd_sensitivity(&params, &fc, &cov, &[0.5, 0.5], 1e-2),
            Err(Error::InvalidParameter(_))
        ));
    }
}
