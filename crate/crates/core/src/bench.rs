//! Runtime scaling of one integrated-training epoch across planning horizons,
//! with the MDFP backward pass against the dense KKT solve.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::domain::AllocationPath;
use crate::error::{Error, Result};
use crate::forecast::{BackwardMethod, EwmaConfig, FeatureMode, Hyper, LinearPredictor, TrainingWindow};
use crate::io::{generate_synthetic, SyntheticSpec};
use crate::mdfp::{backward_step_size, implicit_vjp, NeumannConfig};
use crate::objective::decision_loss;
use crate::oracles::SensitivitySystem;
use crate::solver::{solve_fixed_point, SolverConfig};
use crate::{ForecastPath, ProblemParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_assets: usize,
    /// Training samples per epoch.
    pub samples: usize,
    pub input_len: usize,
    pub delta: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub seed: u64,
    pub solver: SolverConfig,
    pub neumann: NeumannConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_assets: 7,
            samples: 8,
            input_len: 20,
            delta: 50.0,
            lambda: 1e-4,
            kappa: crate::objective::DEFAULT_KAPPA,
            seed: 7,
            solver: SolverConfig::default(),
            neumann: NeumannConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub horizon: usize,
    pub median_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub horizons: Vec<usize>,
    /// Methods `mdfp` and `kkt` time a whole epoch (forward solves, backward
    /// pass, gradient accumulation); `*-backward` time the backward pass alone.
    pub rows: Vec<BenchRow>,
}

impl BenchResult {
    pub fn median(&self, method: &str, horizon: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.horizon == horizon)
            .map(|r| r.median_seconds)
    }

    /// `T(hi) / T(lo)` for one method.
    pub fn ratio(&self, method: &str, lo: usize, hi: usize) -> Option<f64> {
        Some(self.median(method, hi)? / self.median(method, lo)?)
    }

    /// CSV with columns `method,horizon,median_seconds`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "horizon", "median_seconds"])?;
        for r in &self.rows {
            w.write_record([r.method.clone(), r.horizon.to_string(), format!("{:.6}", r.median_seconds)])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        0.5 * (xs[k / 2 - 1] + xs[k / 2])
    }
}

struct Setup {
    window: TrainingWindow,
    model: LinearPredictor,
    params: ProblemParams,
}

fn setup(cfg: &BenchConfig, horizon: usize) -> Result<Setup> {
    let ewma = EwmaConfig::default();
    let t = TrainingWindow::first_decision_row(cfg.samples, cfg.input_len, horizon, &ewma);
    let spec = SyntheticSpec::two_regime(cfg.n_assets, t + 1, 250);
    let panel = generate_synthetic(&spec, cfg.seed)?;
    let window = TrainingWindow::build(&panel.returns, t, cfg.samples, cfg.input_len, horizon, &ewma)?;
    let model = LinearPredictor::new(cfg.n_assets, horizon, cfg.input_len, FeatureMode::BlockMean, 0.0, Hyper::default())?
        .randomized(cfg.seed, 0.1);
    let mut params = ProblemParams::new(cfg.delta, cfg.lambda, cfg.kappa, horizon, cfg.n_assets)?;
    params.cov_jitter = ewma.jitter;
    Ok(Setup { window, model, params })
}

/// One epoch over the window: forward solve (warm-started), decision loss,
/// backward pass, gradient accumulation. Returns (epoch, backward) seconds.
/// Samples whose backward pass fails still count their time.
fn time_epoch(s: &Setup, cfg: &BenchConfig, method: BackwardMethod, warm: &mut [Option<AllocationPath>]) -> Result<(f64, f64)> {
    let n = s.params.n_assets;
    let uniform = vec![1.0 / n as f64; n];
    let mut grad = vec![0.0; s.model.params().len()];
    let mut backward = 0.0;
    let start = Instant::now();
    for (sample, slot) in s.window.samples.iter().zip(warm.iter_mut()) {
        let feats = s.model.features(&sample.x)?;
        let fc = ForecastPath::new(s.model.predict_features(&feats))?;
        let init = slot.clone().unwrap_or_else(|| AllocationPath::replicated(&uniform, s.params.horizon));
        let sol = solve_fixed_point(&init, &s.params, &fc, &sample.cov, &cfg.solver)?;
        let (_, dl) = decision_loss(&sol.path, &sample.y, &sample.cov, &s.params)?;
        let b0 = Instant::now();
        let g = match method {
            BackwardMethod::Mdfp => {
                let eta = backward_step_size(&sol.path, &s.params, &sample.cov);
                implicit_vjp(&sol.path, &dl, &s.params, &fc, &sample.cov, eta, &cfg.neumann).map(|g| g.grad)
            }
            BackwardMethod::DenseKkt => SensitivitySystem::build(&sol.path, &s.params, &fc, &sample.cov, cfg.neumann.mode)
                .and_then(|sys| sys.vjp(&dl)),
        };
        backward += b0.elapsed().as_secs_f64();
        match g {
            Ok(g) => s.model.accumulate_grad(&feats, &g, 1.0, &mut grad),
            Err(Error::DegenerateInstance(_) | Error::Divergence { .. } | Error::Precondition(_)) => {}
            Err(e) => return Err(e),
        }
        *slot = Some(sol.path);
    }
    let epoch = start.elapsed().as_secs_f64();
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite epoch gradient".into()));
    }
    Ok((epoch, backward))
}

/// Median wall time of one training epoch per horizon for both backward
/// methods. Each horizon gets one untimed warm-up epoch so all timed epochs
/// start their forward solves from the previous solution, as in training.
pub fn bench_runtime(horizons: &[usize], cfg: &BenchConfig, repetitions: usize) -> Result<BenchResult> {
    if horizons.is_empty() || repetitions == 0 {
        return Err(Error::InvalidParameter("bench needs at least one horizon and one repetition".into()));
    }
    if horizons.windows(2).any(|w| w[1] <= w[0]) || horizons[0] == 0 {
        return Err(Error::InvalidParameter("bench horizons must be positive and ascending".into()));
    }
    let mut result = BenchResult {
        horizons: horizons.to_vec(),
        rows: Vec::new(),
    };
    for &h in horizons {
        let s = setup(cfg, h)?;
        for (name, method) in [("mdfp", BackwardMethod::Mdfp), ("kkt", BackwardMethod::DenseKkt)] {
            let mut warm = vec![None; s.window.len()];
            time_epoch(&s, cfg, method, &mut warm)?;
            let (epochs, backward): (Vec<f64>, Vec<f64>) = (0..repetitions)
                .map(|_| time_epoch(&s, cfg, method, &mut warm))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            log::info!("H={h} {name}: epoch {:.4}s, backward {:.4}s", median(epochs.clone()), median(backward.clone()));
            result.rows.push(BenchRow {
                method: name.to_string(),
                horizon: h,
                median_seconds: median(epochs),
            });
            result.rows.push(BenchRow {
                method: format!("{name}-backward"),
                horizon: h,
                median_seconds: median(backward),
            });
        }
    }
    Ok(result)
}
