//! Random test instances and the gradient cross-checks behind the
//! `gradcheck` command: the sensitivity oracle triangle and an end-to-end
//! finite-difference check of the training gradient.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::domain::{CovariancePath, ForecastPath, ProblemParams, StageMatrix};
use crate::error::{Error, Result};
use crate::forecast::{ipmo_objective, EwmaConfig, FeatureMode, Hyper, IpmoSettings, LinearPredictor, TrainTrace, TrainingWindow};
use crate::mdfp::{assemble_sensitivity, backward_step_size, implicit_vjp, ActiveSet, JacobianMode, MirrorMapEvaluation, NeumannConfig};
use crate::oracles::{dense_fixed_point_vjp, fd_sensitivity, SensitivitySystem};
use crate::solver::{solve_from_holdings, SolveResult, SolverConfig};

/// `A A' / n + I / 2` with `A` uniform in [-1, 1].
pub fn random_spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let m = &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.5;
    (&m + m.transpose()) * 0.5
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub params: ProblemParams,
    pub fc: ForecastPath,
    pub cov: CovariancePath,
    pub z0: Vec<f64>,
}

pub fn random_weights(rng: &mut impl Rng, n: usize, lo: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// `delta = 1`, forecasts uniform in `[-spread, spread]`.
pub fn random_instance(rng: &mut impl Rng, h: usize, n: usize, lambda: f64, kappa: f64, spread: f64) -> Instance {
    let params = ProblemParams::new(1.0, lambda, kappa, h, n).expect("valid generator parameters");
    let y = (0..h * n).map(|_| rng.random_range(-spread..spread)).collect();
    Instance {
        params,
        fc: ForecastPath::new(StageMatrix::from_vec(h, n, y).expect("shape")).expect("finite"),
        cov: CovariancePath::new((0..h).map(|_| random_spd(rng, n)).collect()).expect("spd"),
        z0: random_weights(rng, n, 0.2),
    }
}

/// Forward solve to 1e-12; fails if it does not get there.
pub fn tight_solve(inst: &Instance) -> Result<SolveResult> {
    let res = solve_from_holdings(&inst.z0, &inst.params, &inst.fc, &inst.cov, &SolverConfig::default().with_tol(1e-12))?;
    if !res.converged {
        return Err(Error::Numeric(format!("forward solve stalled at residual {:.2e}", res.residual)));
    }
    Ok(res)
}

/// Instance whose solution keeps every coordinate above 1e-3.
pub fn interior_instance(rng: &mut impl Rng, h: usize, n: usize, lambda: f64) -> Result<(Instance, SolveResult)> {
    loop {
        let inst = random_instance(rng, h, n, lambda, 1e-2, 0.05);
        let sol = tight_solve(&inst)?;
        if sol.path.stages.as_slice().iter().all(|&x| x > 1e-3) {
            return Ok((inst, sol));
        }
    }
}

/// Instance with one asset pushed to zero in every stage by a strongly
/// negative forecast while the other coordinates stay above 1e-3. Returns
/// the index of the zeroed asset.
pub fn boundary_instance(rng: &mut impl Rng, h: usize, n: usize, lambda: f64) -> Result<(Instance, SolveResult, usize)> {
    loop {
        let mut inst = random_instance(rng, h, n, lambda, 1e-2, 0.1);
        let k = rng.random_range(0..n);
        for s in 0..h {
            inst.fc.y_hat[(s, k)] = -1.5;
        }
        let sol = tight_solve(&inst)?;
        let ok = (0..h).all(|s| {
            sol.path
                .stage(s)
                .iter()
                .enumerate()
                .all(|(i, &x)| if i == k { x <= 1e-8 } else { x > 1e-3 })
        });
        if ok {
            return Ok((inst, sol, k));
        }
    }
}

fn backward_settings() -> NeumannConfig {
    NeumannConfig {
        fixed_point_tol: 1e-12,
        ..NeumannConfig::default()
    }
}

/// Largest discrepancies seen by [`oracle_triangle`].
#[derive(Clone, Debug, Default, Serialize)]
pub struct TriangleReport {
    pub interior_cases: usize,
    pub boundary_cases: usize,
    pub mdfp_vs_kkt: f64,
    pub mdfp_vs_fd: f64,
    pub kkt_vs_fd: f64,
    /// Neumann VJP against a dense solve of the same linear system.
    pub neumann_vs_dense: f64,
    pub max_neumann_residual: f64,
    /// Worst pairwise discrepancy on boundary instances.
    pub boundary_worst: f64,
    pub min_complementarity_gap: f64,
    /// Whether every active row and column came out exactly zero in the
    /// MDFP and KKT Jacobians.
    pub active_blocks_zero: bool,
}

/// Runs the three sensitivity computations (assembled MDFP Jacobian, KKT
/// solve, finite differences) on random interior and boundary instances
/// with `N <= 4`, `H <= 3`.
pub fn oracle_triangle(seed: u64, interior: usize, boundary: usize) -> Result<TriangleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ncfg = backward_settings();
    let mut r = TriangleReport {
        interior_cases: interior,
        boundary_cases: boundary,
        min_complementarity_gap: f64::INFINITY,
        active_blocks_zero: true,
        ..TriangleReport::default()
    };
    for case in 0..interior {
        let (h, n) = (1 + case % 3, 2 + case % 3);
        let lambda = if case % 2 == 0 { 0.0 } else { 0.01 };
        let (inst, sol) = interior_instance(&mut rng, h, n, lambda)?;
        let beta = backward_step_size(&sol.path, &inst.params, &inst.cov);
        let ev = MirrorMapEvaluation::at_point(&sol.path, &inst.params, &inst.fc, &inst.cov, beta)?;
        let active = ActiveSet::detect(&sol.path, ncfg.active_tol);
        let mdfp = assemble_sensitivity(&ev, &active, &ncfg)?;
        let kkt = SensitivitySystem::build(&sol.path, &inst.params, &inst.fc, &inst.cov, JacobianMode::Exact)?.jacobian()?;
        let fd = fd_sensitivity(&inst.params, &inst.fc, &inst.cov, &inst.z0, 1e-5)?;
        r.mdfp_vs_kkt = r.mdfp_vs_kkt.max((&mdfp - &kkt).amax());
        r.mdfp_vs_fd = r.mdfp_vs_fd.max((&mdfp - &fd).amax());
        r.kkt_vs_fd = r.kkt_vs_fd.max((&kkt - &fd).amax());

        let g = StageMatrix::from_vec(h, n, (0..h * n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let neu = implicit_vjp(&sol.path, &g, &inst.params, &inst.fc, &inst.cov, beta, &ncfg)?;
        let dense = dense_fixed_point_vjp(&ev, &active, &g, JacobianMode::Exact)?;
        r.max_neumann_residual = r.max_neumann_residual.max(neu.residual);
        r.neumann_vs_dense = r.neumann_vs_dense.max(neu.grad.max_abs_diff(&dense));
    }
    for case in 0..boundary {
        let (h, n) = (1 + case % 3, 3 + case % 2);
        let lambda = if case % 2 == 0 { 0.0 } else { 0.01 };
        let (inst, sol, k) = boundary_instance(&mut rng, h, n, lambda)?;
        let sys = SensitivitySystem::build(&sol.path, &inst.params, &inst.fc, &inst.cov, JacobianMode::Exact)?;
        r.min_complementarity_gap = r.min_complementarity_gap.min(sys.min_gap);
        let kkt = sys.jacobian()?;
        let beta = backward_step_size(&sol.path, &inst.params, &inst.cov);
        let ev = MirrorMapEvaluation::at_point(&sol.path, &inst.params, &inst.fc, &inst.cov, beta)?;
        let active = ActiveSet::detect(&sol.path, ncfg.active_tol);
        let mdfp = assemble_sensitivity(&ev, &active, &ncfg)?;
        let fd = fd_sensitivity(&inst.params, &inst.fc, &inst.cov, &inst.z0, 1e-5)?;
        for s in 0..h {
            let idx = s * n + k;
            for j in 0..h * n {
                if mdfp[(idx, j)] != 0.0 || mdfp[(j, idx)] != 0.0 || kkt[(idx, j)] != 0.0 || kkt[(j, idx)] != 0.0 {
                    r.active_blocks_zero = false;
                }
            }
        }
        r.boundary_worst = r
            .boundary_worst
            .max((&mdfp - &kkt).amax())
            .max((&mdfp - &fd).amax())
            .max((&kkt - &fd).amax());
    }
    Ok(r)
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineReport {
    pub parameters: usize,
    pub max_abs_gradient: f64,
    /// Worst `|fd - analytic| / max(|fd|, |analytic|)` over all parameters.
    pub worst_relative_error: f64,
}

fn synthetic_returns(rows: usize, n: usize, seed: u64) -> StageMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * n).map(|k| 0.0005 * (k % n) as f64 + rng.random_range(-0.02..0.02)).collect();
    StageMatrix::from_vec(rows, n, data).expect("shape")
}

/// Decision-loss gradient of a small predictor (N=3, H=2, L=10, eight
/// training samples) against central differences over every parameter.
/// Solves and the backward series run to tight tolerances so the
/// differences are not dominated by solver noise.
pub fn pipeline_gradcheck(seed: u64) -> Result<PipelineReport> {
    let (n, h, l, lookback) = (3, 2, 10, 8);
    let returns = synthetic_returns(80, n, seed);
    let ewma = EwmaConfig::default();
    let t = TrainingWindow::first_decision_row(lookback, l, h, &ewma);
    let window = TrainingWindow::build(&returns, t, lookback, l, h, &ewma)?;
    let model = LinearPredictor::new(n, h, l, FeatureMode::BlockMean, 0.0, Hyper::default())?.randomized(seed.wrapping_add(1), 0.1);
    let settings = IpmoSettings::new(
        ProblemParams::new(50.0, 1e-4, 1e-4, h, n)?,
        SolverConfig::default().with_tol(1e-13),
        NeumannConfig {
            term_tol: 1e-10,
            fixed_point_tol: 1e-13,
            ..NeumannConfig::default()
        },
    );
    let loss_at = |m: &LinearPredictor| -> Result<(f64, Vec<f64>)> {
        let mut warm = vec![None; window.len()];
        let mut trace = TrainTrace::default();
        let out = ipmo_objective(&window, 0..window.len(), m, &settings, &mut warm, &mut trace)?;
        if trace.skipped_samples > 0 {
            return Err(Error::Numeric(format!("{} samples skipped during gradcheck", trace.skipped_samples)));
        }
        Ok(out)
    };
    let (_, grad) = loss_at(&model)?;
    let n_weights = model.params().len() - n * h;
    let mut worst = 0.0_f64;
    for k in 0..grad.len() {
        // biases move the forecast directly, weights only through ~1e-3 features
        let eps = if k < n_weights { 1e-5 } else { 1e-7 };
        let mut plus = model.clone();
        plus.params_mut()[k] += eps;
        let mut minus = model.clone();
        minus.params_mut()[k] -= eps;
        let fd = (loss_at(&plus)?.0 - loss_at(&minus)?.0) / (2.0 * eps);
        let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(PipelineReport {
        parameters: grad.len(),
        max_abs_gradient: grad.iter().fold(0.0, |m, g| m.max(g.abs())),
        worst_relative_error: worst,
    })
}
