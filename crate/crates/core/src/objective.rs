//! Smoothed multi-period mean-variance objective.
//!
//! For a path `z_1..z_H` with pre-trade weights `z_0`:
//!
//! ```text
//! F(z) = sum_s (delta/2) z_s' V_s z_s - y_s' z_s + lambda * sum_i rho(z_s,i - z_{s-1},i)
//! rho(x) = sqrt(x^2 + kappa)
//! ```

use nalgebra::DMatrix;

use crate::domain::{symv, AllocationPath, CovariancePath, ForecastPath, ProblemParams, StageMatrix};
use crate::error::{Error, Result};

/// Default smoothing parameter for the turnover penalty.
pub const DEFAULT_KAPPA: f64 = 1e-4;

/// Objective value and its gradient with respect to every stage.
#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    pub value: f64,
    pub stage_grads: StageMatrix,
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("kappa must be > 0, got {kappa}")))
    }
}

/// `sqrt(x^2 + kappa)`
pub fn smooth_abs(x: f64, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    Ok(rho(x, kappa))
}

/// `x / sqrt(x^2 + kappa)`
pub fn smooth_abs_grad(x: f64, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    Ok(rho_prime(x, kappa))
}

/// `kappa / (x^2 + kappa)^{3/2}`
pub fn smooth_abs_curvature(x: f64, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    Ok(rho_second(x, kappa))
}

#[inline]
pub(crate) fn rho(x: f64, kappa: f64) -> f64 {
    (x * x + kappa).sqrt()
}

#[inline]
pub(crate) fn rho_prime(x: f64, kappa: f64) -> f64 {
    x / (x * x + kappa).sqrt()
}

#[inline]
pub(crate) fn rho_second(x: f64, kappa: f64) -> f64 {
    let q = x * x + kappa;
    kappa / (q * q.sqrt())
}

pub(crate) fn check_problem(
    path: &AllocationPath,
    params: &ProblemParams,
    fc: &ForecastPath,
    cov: &CovariancePath,
) -> Result<()> {
    let (h, n) = path.stages.shape();
    if h != params.horizon || n != params.n_assets {
        return Err(Error::Shape(format!(
            "path is {h}x{n} but params declare H={} N={}",
            params.horizon, params.n_assets
        )));
    }
    if fc.y_hat.shape() != (h, n) {
        return Err(Error::Shape(format!(
            "forecast is {:?}, expected ({h}, {n})",
            fc.y_hat.shape()
        )));
    }
    if cov.horizon() != h || cov.n_assets() != n {
        return Err(Error::Shape(format!(
            "covariance path has {} stages of size {}, expected {h} of size {n}",
            cov.horizon(),
            cov.n_assets()
        )));
    }
    Ok(())
}

/// Evaluates the smoothed objective and its stage gradients.
pub fn inner_objective(
    path: &AllocationPath,
    params: &ProblemParams,
    fc: &ForecastPath,
    cov: &CovariancePath,
) -> Result<ObjectiveEval> {
    check_problem(path, params, fc, cov)?;
    let mut grads = StageMatrix::zeros(path.horizon(), path.n_assets());
    let value = eval_into(path, params, fc, cov, &mut grads, true);
    Ok(ObjectiveEval {
        value,
        stage_grads: grads,
    })
}

/// Objective value only.
pub fn objective_value(
    path: &AllocationPath,
    params: &ProblemParams,
    fc: &ForecastPath,
    cov: &CovariancePath,
) -> Result<f64> {
    check_problem(path, params, fc, cov)?;
    let (h, n) = path.stages.shape();
    let mut vz = vec![0.0; n];
    let mut value = 0.0;
    for s in 0..h {
        let z = path.stage(s);
        let prev = path.previous(s);
        symv(cov.stage(s), z, &mut vz);
        for i in 0..n {
            value += 0.5 * params.delta * z[i] * vz[i] - fc.y_hat[(s, i)] * z[i]
                + params.lambda * rho(z[i] - prev[i], params.kappa);
        }
    }
    Ok(value)
}

/// Writes stage gradients into `grads`; returns the objective value when
/// `with_value` is set (otherwise 0). Shapes must already be validated.
pub(crate) fn eval_into(
    path: &AllocationPath,
    params: &ProblemParams,
    fc: &ForecastPath,
    cov: &CovariancePath,
    grads: &mut StageMatrix,
    with_value: bool,
) -> f64 {
    let (h, n) = path.stages.shape();
    let (delta, lambda, kappa) = (params.delta, params.lambda, params.kappa);
    let mut value = 0.0;
    for s in 0..h {
        let z = path.stage(s);
        let prev = path.previous(s);
        let g = grads.row_mut(s);
        symv(cov.stage(s), z, g);
        for i in 0..n {
            let vz = g[i];
            let d = z[i] - prev[i];
            if with_value {
                value += 0.5 * delta * z[i] * vz - fc.y_hat[(s, i)] * z[i] + lambda * rho(d, kappa);
            }
            let mut gi = delta * vz - fc.y_hat[(s, i)];
            if lambda != 0.0 {
                gi += lambda * rho_prime(d, kappa);
                if s + 1 < h {
                    gi -= lambda * rho_prime(path.stages[(s + 1, i)] - z[i], kappa);
                }
            }
            g[i] = gi;
        }
    }
    value
}

/// Turnover curvature `c[s][i] = lambda * rho''(z_s,i - z_{s-1},i)`.
///
/// The full Hessian of the objective is block tridiagonal with diagonal
/// blocks `delta V_s + diag(c_s) + diag(c_{s+1})` (the last term absent for
/// the final stage) and off-diagonal blocks `-diag(c_{s+1})` between stages
/// `s` and `s+1`.
pub fn turnover_curvature(path: &AllocationPath, params: &ProblemParams) -> StageMatrix {
    let (h, n) = path.stages.shape();
    let mut c = StageMatrix::zeros(h, n);
    if params.lambda == 0.0 {
        return c;
    }
    for s in 0..h {
        let z = path.stage(s);
        let prev = path.previous(s);
        for i in 0..n {
            c[(s, i)] = params.lambda * rho_second(z[i] - prev[i], params.kappa);
        }
    }
    c
}

/// Diagonal Hessian block of stage `s` (0-based).
pub fn stage_hessian(
    path: &AllocationPath,
    s: usize,
    params: &ProblemParams,
    cov: &CovariancePath,
) -> Result<DMatrix<f64>> {
    let h = path.horizon();
    if s >= h {
        return Err(Error::InvalidParameter(format!("stage {s} out of range 0..{h}")));
    }
    if cov.horizon() != h || cov.n_assets() != path.n_assets() {
        return Err(Error::Shape("covariance path does not match allocation path".into()));
    }
    let c = turnover_curvature(path, params);
    Ok(hessian_block(&c, s, params, cov))
}

pub(crate) fn hessian_block(c: &StageMatrix, s: usize, params: &ProblemParams, cov: &CovariancePath) -> DMatrix<f64> {
    let mut q = cov.stage(s) * params.delta;
    for i in 0..c.cols() {
        q[(i, i)] += c[(s, i)];
        if s + 1 < c.rows() {
            q[(i, i)] += c[(s + 1, i)];
        }
    }
    q
}

/// Diagonal of the off-diagonal Hessian block coupling stages `s` and
/// `s + 1` (0-based): `-lambda * rho''(z_{s+1} - z_s)`.
pub fn cross_stage_curvature(path: &AllocationPath, s: usize, params: &ProblemParams) -> Result<Vec<f64>> {
    let h = path.horizon();
    if s + 1 >= h {
        return Err(Error::InvalidParameter(format!("no stage after {s} (H={h})")));
    }
    let c = turnover_curvature(path, params);
    Ok(c.row(s + 1).iter().map(|x| -x).collect())
}

/// Hessian-vector product `out = Hess * v` using precomputed curvature.
/// With `coupled == false` the off-diagonal stage blocks are dropped.
pub(crate) fn hessian_apply(
    c: &StageMatrix,
    params: &ProblemParams,
    cov: &CovariancePath,
    v: &StageMatrix,
    coupled: bool,
    out: &mut StageMatrix,
) {
    let (h, n) = v.shape();
    for s in 0..h {
        let o = out.row_mut(s);
        symv(cov.stage(s), v.row(s), o);
        for i in 0..n {
            let vi = v[(s, i)];
            let mut acc = params.delta * o[i] + c[(s, i)] * vi;
            if coupled && s > 0 {
                acc -= c[(s, i)] * v[(s - 1, i)];
            }
            if s + 1 < h {
                acc += c[(s + 1, i)] * vi;
                if coupled {
                    acc -= c[(s + 1, i)] * v[(s + 1, i)];
                }
            }
            o[i] = acc;
        }
    }
}

/// Outer decision loss `(1/H) sum_k [-z_k' y_k + (delta/2) z_k' V_k z_k]`
/// against realized returns, with its gradient with respect to the path.
pub fn decision_loss(
    path: &AllocationPath,
    realized: &StageMatrix,
    cov: &CovariancePath,
    params: &ProblemParams,
) -> Result<(f64, StageMatrix)> {
    let (h, n) = path.stages.shape();
    if realized.shape() != (h, n) {
        return Err(Error::Shape(format!(
            "realized returns {:?} do not match path ({h}, {n})",
            realized.shape()
        )));
    }
    if cov.horizon() != h || cov.n_assets() != n {
        return Err(Error::Shape("covariance path does not match allocation path".into()));
    }
    let inv_h = 1.0 / h as f64;
    let mut grad = StageMatrix::zeros(h, n);
    let mut loss = 0.0;
    for s in 0..h {
        let z = path.stage(s);
        let g = grad.row_mut(s);
        symv(cov.stage(s), z, g);
        for i in 0..n {
            let vz = g[i];
            loss += -z[i] * realized[(s, i)] + 0.5 * params.delta * z[i] * vz;
            g[i] = (-realized[(s, i)] + params.delta * vz) * inv_h;
        }
    }
    Ok((loss * inv_h, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let m = &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.5;
        (&m + m.transpose()) * 0.5
    }

    fn random_simplex(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }

    fn random_instance(
        rng: &mut impl Rng,
        h: usize,
        n: usize,
        lambda: f64,
    ) -> (AllocationPath, ProblemParams, ForecastPath, CovariancePath) {
        let params = ProblemParams::new(rng.random_range(0.5..2.0), lambda, 1e-2, h, n).unwrap();
        let rows: Vec<Vec<f64>> = (0..h).map(|_| random_simplex(rng, n)).collect();
        let path = AllocationPath::new(random_simplex(rng, n), StageMatrix::from_rows(&rows).unwrap()).unwrap();
        let fc = ForecastPath::new(StageMatrix::from_vec(h, n, (0..h * n).map(|_| rng.random_range(-0.2..0.2)).collect()).unwrap()).unwrap();
        let cov = CovariancePath::new((0..h).map(|_| random_spd(rng, n)).collect()).unwrap();
        (path, params, fc, cov)
    }

    #[test]
    fn smooth_abs_examples() {
        assert!((smooth_abs(0.0, 1e-4).unwrap() - 0.01).abs() < 1e-15);
        assert!((smooth_abs(0.3, 1e-16).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(smooth_abs(3.0, 16.0).unwrap(), 5.0);
        assert!(smooth_abs(1.0, 0.0).is_err());
        assert_eq!(smooth_abs_grad(0.0, 1e-4).unwrap(), 0.0);
        assert!((smooth_abs_grad(3.0, 16.0).unwrap() - 0.6).abs() < 1e-15);
        assert!((smooth_abs_grad(1e9, 1e-4).unwrap() - 1.0).abs() < 1e-12);
        assert!(smooth_abs_grad(1.0, -1.0).is_err());
    }

    #[test]
    fn smooth_abs_gap_bounded() {
        for k in [1e-6, 1e-4, 1e-2, 1.0] {
            for x in [-10.0, -0.3, -1e-3, 0.0, 1e-5, 0.2, 7.0] {
                let gap = smooth_abs(x, k).unwrap() - f64::abs(x);
                assert!(gap > 0.0 && gap <= k.sqrt() * (1.0 + 1e-12), "x={x} k={k} gap={gap}");
            }
        }
    }

    #[test]
    fn single_stage_value() {
        let params = ProblemParams::new(1.0, 0.0, DEFAULT_KAPPA, 1, 2).unwrap();
        let path = AllocationPath::uniform(1, 2);
        let eval = inner_objective(&path, &params, &ForecastPath::zeros(1, 2), &CovariancePath::identity(1, 2)).unwrap();
        assert!((eval.value - 0.25).abs() < 1e-15);
    }

    #[test]
    fn idle_path_turnover_value() {
        let (h, n, lambda, kappa) = (3, 4, 0.7, DEFAULT_KAPPA);
        let params = ProblemParams::new(1.0, lambda, kappa, h, n).unwrap();
        let z0 = vec![0.1, 0.2, 0.3, 0.4];
        let path = AllocationPath::replicated(&z0, h);
        let cov = CovariancePath::identity(h, n);
        let fc = ForecastPath::zeros(h, n);
        let with = inner_objective(&path, &params, &fc, &cov).unwrap().value;
        let without = inner_objective(&path, &params.with_lambda(0.0), &fc, &cov).unwrap().value;
        assert!((with - without - lambda * (h * n) as f64 * kappa.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn two_stage_hand_value() {
        let params = ProblemParams::new(1.0, 1.0, 1e-4, 2, 2).unwrap();
        let path = AllocationPath::new(vec![1.0, 0.0], StageMatrix::filled(2, 2, 0.5)).unwrap();
        let v = inner_objective(&path, &params, &ForecastPath::zeros(2, 2), &CovariancePath::identity(2, 2)).unwrap().value;
        let expected = 0.25 + 0.25 + 2.0 * (0.25f64 + 1e-4).sqrt() + 2.0 * 1e-4f64.sqrt();
        assert!((v - expected).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..50 {
            let h = 1 + case % 4;
            let n = 2 + case % 4;
            let lambda = if case % 3 == 0 { 0.0 } else { 0.05 };
            let (path, params, fc, cov) = random_instance(&mut rng, h, n, lambda);
            let eval = inner_objective(&path, &params, &fc, &cov).unwrap();
            let step = 1e-6;
            for s in 0..h {
                for i in 0..n {
                    let mut plus = path.clone();
                    plus.stages[(s, i)] += step;
                    let mut minus = path.clone();
                    minus.stages[(s, i)] -= step;
                    let fd = (objective_value(&plus, &params, &fc, &cov).unwrap()
                        - objective_value(&minus, &params, &fc, &cov).unwrap())
                        / (2.0 * step);
                    let g = eval.stage_grads[(s, i)];
                    let rel = (fd - g).abs() / g.abs().max(1.0);
                    assert!(rel < 1e-5, "case {case} ({s},{i}): fd {fd} vs {g}");
                }
            }
        }
    }

    #[test]
    fn hessian_blocks() {
        let params = ProblemParams::new(2.0, 0.0, 1e-4, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cov = CovariancePath::new(vec![random_spd(&mut rng, 3), random_spd(&mut rng, 3)]).unwrap();
        let path = AllocationPath::uniform(2, 3);
        let q = stage_hessian(&path, 1, &params, &cov).unwrap();
        assert_eq!(q, cov.stage(1) * 2.0);
        assert!(stage_hessian(&path, 2, &params, &cov).is_err());

        // idle final stage: rho''(0) = kappa^{-1/2}
        let params = ProblemParams::new(1.0, 1.0, 1e-4, 1, 3).unwrap();
        let cov = CovariancePath::identity(1, 3);
        let path = AllocationPath::uniform(1, 3);
        let q = stage_hessian(&path, 0, &params, &cov).unwrap();
        let expected = DMatrix::identity(3, 3) * (1.0 + 100.0);
        assert!((q - expected).amax() < 1e-9);
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..20 {
            let h = 1 + case % 3;
            let n = 2 + case % 3;
            let (path, params, fc, cov) = random_instance(&mut rng, h, n, 0.05);
            let grad = |p: &AllocationPath| inner_objective(p, &params, &fc, &cov).unwrap().stage_grads;
            let step = 1e-6;
            for s in 0..h {
                let q = stage_hessian(&path, s, &params, &cov).unwrap();
                for j in 0..n {
                    let mut plus = path.clone();
                    plus.stages[(s, j)] += step;
                    let mut minus = path.clone();
                    minus.stages[(s, j)] -= step;
                    let (gp, gm) = (grad(&plus), grad(&minus));
                    for i in 0..n {
                        let fd = (gp[(s, i)] - gm[(s, i)]) / (2.0 * step);
                        let rel = (fd - q[(i, j)]).abs() / q[(i, j)].abs().max(1.0);
                        assert!(rel < 1e-5, "case {case}: Q[{i},{j}] {} vs fd {fd}", q[(i, j)]);
                    }
                    if s + 1 < h {
                        let cross = cross_stage_curvature(&path, s, &params).unwrap();
                        let fd = (gp[(s + 1, j)] - gm[(s + 1, j)]) / (2.0 * step);
                        assert!((fd - cross[j]).abs() / cross[j].abs().max(1.0) < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn convexity_along_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let (a, params, fc, cov) = random_instance(&mut rng, 3, 4, 0.1);
            let rows: Vec<Vec<f64>> = (0..3).map(|_| random_simplex(&mut rng, 4)).collect();
            let b = a.with_stages(StageMatrix::from_rows(&rows).unwrap());
            let t: f64 = rng.random_range(0.0..1.0);
            let mut mix = a.stages.clone();
            mix.scale(t);
            mix.axpy(1.0 - t, &b.stages);
            let fm = objective_value(&a.with_stages(mix), &params, &fc, &cov).unwrap();
            let fa = objective_value(&a, &params, &fc, &cov).unwrap();
            let fb = objective_value(&b, &params, &fc, &cov).unwrap();
            assert!(fm <= t * fa + (1.0 - t) * fb + 1e-12);
        }
    }

    #[test]
    fn zero_turnover_decomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (path, params, fc, cov) = random_instance(&mut rng, 3, 3, 0.0);
        let total = objective_value(&path, &params, &fc, &cov).unwrap();
        let mut sum = 0.0;
        for s in 0..3 {
            let single = AllocationPath::new(path.z_init.clone(), StageMatrix::from_rows(&[path.stage(s).to_vec()]).unwrap()).unwrap();
            let fcs = ForecastPath::new(StageMatrix::from_rows(&[fc.y_hat.row(s).to_vec()]).unwrap()).unwrap();
            let covs = CovariancePath::new(vec![cov.stage(s).clone()]).unwrap();
            sum += objective_value(&single, &params.with_horizon(1), &fcs, &covs).unwrap();
        }
        assert!((total - sum).abs() <= 1e-14 * total.abs().max(1.0));
    }

    #[test]
    fn decision_loss_examples() {
        let params = ProblemParams::new(1.0, 0.0, 1e-4, 1, 2).unwrap();
        let path = AllocationPath::uniform(1, 2);
        let y = StageMatrix::from_rows(&[vec![0.02, 0.02]]).unwrap();
        let (loss, _) = decision_loss(&path, &y, &CovariancePath::identity(1, 2), &params).unwrap();
        assert!((loss - 0.23).abs() < 1e-15);

        let tiny = ProblemParams::new(1e-300, 0.0, 1e-4, 1, 2).unwrap();
        let (loss, _) = decision_loss(&path, &StageMatrix::zeros(1, 2), &CovariancePath::identity(1, 2), &tiny).unwrap();
        assert!(loss.abs() < 1e-299);

        assert!(decision_loss(&path, &StageMatrix::zeros(2, 2), &CovariancePath::identity(1, 2), &params).is_err());
    }

    #[test]
    fn decision_loss_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (path, params, _, cov) = random_instance(&mut rng, 3, 4, 0.0);
        let y = StageMatrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-0.05..0.05)).collect()).unwrap();
        let (_, grad) = decision_loss(&path, &y, &cov, &params).unwrap();
        let step = 1e-6;
        for s in 0..3 {
            for i in 0..4 {
                let mut p = path.clone();
                p.stages[(s, i)] += step;
                let mut m = path.clone();
                m.stages[(s, i)] -= step;
                let fd = (decision_loss(&p, &y, &cov, &params).unwrap().0 - decision_loss(&m, &y, &cov, &params).unwrap().0) / (2.0 * step);
                assert!((fd - grad[(s, i)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let params = ProblemParams::new(1.0, 0.0, 1e-4, 2, 2).unwrap();
        let err = inner_objective(&AllocationPath::uniform(2, 2), &params, &ForecastPath::zeros(1, 2), &CovariancePath::identity(2, 2));
        assert!(matches!(err, Err(Error::Shape(_))));
    }
}
