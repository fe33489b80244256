use std::collections::BTreeMap;

use log::debug;

use crate::domain::{AllocationPath, ForecastPath, ProblemParams};
use crate::error::{Error, Result};
use crate::mdfp::{backward_step_size, implicit_vjp, NeumannConfig};
use crate::objective::decision_loss;
use crate::oracles::SensitivitySystem;
use crate::solver::{solve_fixed_point, SolverConfig};

use super::predictor::LinearPredictor;
use super::window::TrainingWindow;

/// Adam with the usual moment decays 0.9 / 0.999 and epsilon 1e-8.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(dim: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Call counts and per-epoch losses of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub solver_calls: usize,
    pub mse_evals: usize,
    /// Mean data loss over the window at the start of each epoch's updates
    /// (regularizer excluded).
    pub epoch_losses: Vec<f64>,
    /// Samples dropped because the forward solve or the backward series
    /// failed.
    pub skipped_samples: usize,
    /// Backward passes that hit the term cap before reaching the Neumann
    /// tolerance; their truncated gradients are still used.
    pub truncated_backward: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: LinearPredictor,
    pub trace: TrainTrace,
}

/// How the decision-loss gradient is pulled back through the solver.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackwardMethod {
    /// Neumann series on the mirror-descent fixed point.
    #[default]
    Mdfp,
    /// One dense solve of the bordered KKT system; used as the runtime baseline.
    DenseKkt,
}

/// Inner-problem settings for integrated training. `params.horizon` and
/// `params.n_assets` must match the predictor.
#[derive(Clone, Debug)]
pub struct IpmoSettings {
    pub params: ProblemParams,
    pub solver: SolverConfig,
    pub neumann: NeumannConfig,
    pub backward: BackwardMethod,
}

impl IpmoSettings {
    pub fn new(params: ProblemParams, solver: SolverConfig, neumann: NeumannConfig) -> Self {
        Self {
            params,
            solver,
            neumann,
            backward: BackwardMethod::Mdfp,
        }
    }
}

fn batches(len: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let size = if batch_size == 0 { len } else { batch_size.min(len) };
    (0..len).step_by(size.max(1)).map(|s| s..(s + size).min(len)).collect()
}

fn check_window(window: &TrainingWindow, model: &LinearPredictor) -> Result<()> {
    if window.is_empty() {
        return Err(Error::InsufficientData("empty training window".into()));
    }
    window.check_no_lookahead()?;
    let s = &window.samples[0];
    if s.x.shape() != (model.input_len(), model.n_assets()) || s.y.shape() != (model.horizon(), model.n_assets()) {
        return Err(Error::Shape(format!(
            "window samples ({:?} -> {:?}) do not fit the predictor (L={}, H={}, N={})",
            s.x.shape(),
            s.y.shape(),
            model.input_len(),
            model.horizon(),
            model.n_assets()
        )));
    }
    Ok(())
}

fn add_l2(model: &LinearPredictor, grad: &mut [f64]) {
    if model.l2_beta > 0.0 {
        for (g, p) in grad.iter_mut().zip(model.params()) {
            *g += 2.0 * model.l2_beta * p;
        }
    }
}

/// Mean squared error over the given samples and its parameter gradient
/// (regularizer excluded).
pub fn mse_objective(
    window: &TrainingWindow,
    range: std::ops::Range<usize>,
    model: &LinearPredictor,
    trace: &mut TrainTrace,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; model.params().len()];
    let count = range.len() as f64;
    let mut loss = 0.0;
    for sample in &window.samples[range] {
        let feats = model.features(&sample.x)?;
        let mut resid = model.predict_features(&feats);
        resid.axpy(-1.0, &sample.y);
        let cells = (resid.rows() * resid.cols()) as f64;
        loss += resid.dot(&resid) / cells / count;
        model.accumulate_grad(&feats, &resid, 2.0 / cells / count, &mut grad);
        trace.mse_evals += 1;
    }
    Ok((loss, grad))
}

/// Two-stage training: fit the predictor on forecast error alone.
pub fn train_two_stage(window: &TrainingWindow, model: &LinearPredictor) -> Result<TrainOutcome> {
    check_window(window, model)?;
    let mut model = model.clone();
    let mut trace = TrainTrace::default();
    let mut adam = Adam::new(model.params().len(), model.hyper.learning_rate);
    for epoch in 0..model.hyper.epochs {
        let mut epoch_loss = 0.0;
        for range in batches(window.len(), model.hyper.batch_size) {
            let share = range.len() as f64 / window.len() as f64;
            let (loss, mut grad) = mse_objective(window, range, &model, &mut trace)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
            }
            epoch_loss += share * loss;
            add_l2(&model, &mut grad);
            adam.step(model.params_mut(), &grad);
        }
        trace.epoch_losses.push(epoch_loss);
    }
    Ok(TrainOutcome { model, trace })
}

/// Decision loss averaged over the given samples and its gradient with
/// respect to the predictor parameters (regularizer excluded).
///
/// Each sample's fixed point is started from `warm[k]` when present and
/// stored back for the next call. Samples whose forward solve does not
/// converge or whose backward series fails are skipped; if more than 10%
/// of them are, the call fails.
pub fn ipmo_objective(
    window: &TrainingWindow,
    range: std::ops::Range<usize>,
    model: &LinearPredictor,
    settings: &IpmoSettings,
    warm: &mut [Option<AllocationPath>],
    trace: &mut TrainTrace,
) -> Result<(f64, Vec<f64>)> {
    let params = &settings.params;
    if params.horizon != model.horizon() || params.n_assets != model.n_assets() {
        return Err(Error::Shape("problem parameters do not match the predictor".into()));
    }
    let n = model.n_assets();
    let uniform = vec![1.0 / n as f64; n];
    let mut grad = vec![0.0; model.params().len()];
    let mut loss = 0.0;
    let mut used = 0usize;
    let mut failures = Vec::new();
    let mut per_sample = Vec::with_capacity(range.len());
    for k in range.clone() {
        let sample = &window.samples[k];
        let feats = model.features(&sample.x)?;
        let fc = ForecastPath::new(model.predict_features(&feats))?;
        let init = match &warm[k] {
            Some(p) => p.clone(),
            None => AllocationPath::replicated(&uniform, params.horizon),
        };
        trace.solver_calls += 1;
        let sol = solve_fixed_point(&init, params, &fc, &sample.cov, &settings.solver)?;
        if !sol.converged {
            failures.push(format!("row {}: residual {:.2e}", sample.anchor, sol.residual));
            continue;
        }
        let (l, dl) = decision_loss(&sol.path, &sample.y, &sample.cov, params)?;
        let back = match settings.backward {
            BackwardMethod::Mdfp => {
                let eta = backward_step_size(&sol.path, params, &sample.cov);
                implicit_vjp(&sol.path, &dl, params, &fc, &sample.cov, eta, &settings.neumann).map(|g| {
                    if g.residual > settings.neumann.term_tol {
                        trace.truncated_backward += 1;
                    }
                    g.grad
                })
            }
            BackwardMethod::DenseKkt => SensitivitySystem::build(&sol.path, params, &fc, &sample.cov, settings.neumann.mode)
                .and_then(|sys| sys.vjp(&dl)),
        };
        match back {
            Ok(g) => {
                warm[k] = Some(sol.path);
                per_sample.push((l, feats, g));
                used += 1;
            }
            Err(e @ (Error::Divergence { .. } | Error::Precondition(_) | Error::DegenerateInstance(_))) => {
                failures.push(format!("row {}: {e}", sample.anchor));
            }
            Err(e) => return Err(e),
        }
    }
    trace.skipped_samples += failures.len();
    if failures.len() * 10 > range.len() {
        return Err(Error::Training(format!(
            "{} of {} samples failed: {}",
            failures.len(),
            range.len(),
            failures.join("; ")
        )));
    }
    if !failures.is_empty() {
        debug!("skipped {} samples: {}", failures.len(), failures.join("; "));
    }
    let scale = 1.0 / used as f64;
    for (l, feats, g) in &per_sample {
        loss += l * scale;
        model.accumulate_grad(feats, g, scale, &mut grad);
    }
    Ok((loss, grad))
}

/// Integrated training: fit the predictor on the decision loss of the
/// allocations its forecasts induce.
pub fn train_ipmo(window: &TrainingWindow, model: &LinearPredictor, settings: &IpmoSettings) -> Result<TrainOutcome> {
    train_ipmo_cached(window, model, settings, &mut BTreeMap::new())
}

/// [`train_ipmo`] with forward solves warm-started from `cache`, which maps
/// a sample's anchor row to its last solution. The cache is refreshed with
/// this run's solutions and pruned to the window's anchors, so consecutive
/// refits on overlapping windows share their work.
pub fn train_ipmo_cached(
    window: &TrainingWindow,
    model: &LinearPredictor,
    settings: &IpmoSettings,
    cache: &mut BTreeMap<usize, AllocationPath>,
) -> Result<TrainOutcome> {
    check_window(window, model)?;
    settings.params.validate()?;
    settings.solver.validate()?;
    settings.neumann.validate()?;
    let mut model = model.clone();
    let mut trace = TrainTrace::default();
    let mut adam = Adam::new(model.params().len(), model.hyper.learning_rate);
    let mut warm: Vec<Option<AllocationPath>> = window
        .samples
        .iter()
        .map(|s| cache.get(&s.anchor).filter(|p| p.stages.shape() == (settings.params.horizon, settings.params.n_assets)).cloned())
        .collect();
    for epoch in 0..model.hyper.epochs {
        let mut epoch_loss = 0.0;
        for range in batches(window.len(), model.hyper.batch_size) {
            let share = range.len() as f64 / window.len() as f64;
            let (loss, mut grad) = ipmo_objective(window, range, &model, settings, &mut warm, &mut trace)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!("non-finite decision loss at epoch {epoch}")));
            }
            epoch_loss += share * loss;
            add_l2(&model, &mut grad);
            adam.step(model.params_mut(), &grad);
        }
        trace.epoch_losses.push(epoch_loss);
    }
    cache.clear();
    for (sample, path) in window.samples.iter().zip(warm) {
        if let Some(p) = path {
            cache.insert(sample.anchor, p);
        }
    }
    Ok(TrainOutcome { model, trace })
}
