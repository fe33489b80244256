use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backtest::{BacktestConfig, GridPoint};
use crate::domain::{ProblemParams, RealizedPanel};
use crate::error::{Error, Result};
use crate::mdfp::NeumannConfig;
use crate::solver::SolverConfig;

use super::{generate_synthetic, load_returns_csv, SyntheticSpec};

/// Exactly one of `csv` or `synthetic`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub csv: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    pub delta: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub horizon: usize,
}

impl Default for ProblemSection {
    fn default() -> Self {
        let b = BacktestConfig::default();
        Self {
            delta: b.delta,
            lambda: b.lambda,
            kappa: b.kappa,
            horizon: b.horizon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub learning_rates: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub horizons: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            learning_rates: vec![0.001, 0.002, 0.005, 0.01],
            lambdas: vec![0.0001, 0.0005, 0.001, 0.005, 0.01],
            horizons: vec![1, 5, 10, 20, 50],
        }
    }
}

impl Grid {
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rates {
            for &lambda in &self.lambdas {
                for &horizon in &self.horizons {
                    out.push(GridPoint { learning_rate, lambda, horizon });
                }
            }
        }
        out
    }
}

/// One experiment, loaded from a sectioned TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub problem: ProblemSection,
    pub solver: SolverConfig,
    pub neumann: NeumannConfig,
    pub backtest: BacktestConfig,
    pub grid: Grid,
}

/// Keys owned by other sections; rejected in `[backtest]` so a value can
/// only be set in one place.
const SHADOWED: [(&str, &str); 6] = [
    ("delta", "problem"),
    ("lambda", "problem"),
    ("kappa", "problem"),
    ("horizon", "problem"),
    ("solver", "solver"),
    ("neumann", "neumann"),
];

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(toml::Value::Table(bt)) = raw.get("backtest") {
            for (key, section) in SHADOWED {
                if bt.contains_key(key) {
                    return Err(Error::Config(format!("`backtest.{key}` is not allowed; set it in [{section}]")));
                }
            }
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path`; relative CSV paths resolve against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(csv) = &cfg.data.csv {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.data.csv = Some(dir.join(csv));
                }
            }
        }
        cfg.check_files()?;
        Ok(cfg)
    }

    /// Serializes in the form accepted by [`RunConfig::from_toml_str`].
    pub fn to_toml_string(&self) -> Result<String> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(toml::Value::Table(bt)) = table.get_mut("backtest") {
            for (key, _) in SHADOWED {
                bt.remove(key);
            }
        }
        toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.csv, &self.data.synthetic) {
            (Some(_), Some(_)) => return Err(Error::Config("[data] sets both `csv` and `synthetic`".into())),
            (None, None) => return Err(Error::Config("[data] needs `csv` or `synthetic`".into())),
            _ => {}
        }
        if self.grid.learning_rates.is_empty() || self.grid.lambdas.is_empty() || self.grid.horizons.is_empty() {
            return Err(Error::Config("hyperparameter grids must be nonempty".into()));
        }
        if self.grid.learning_rates.iter().any(|&g| !(g > 0.0)) || self.grid.lambdas.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config("grid learning rates must be > 0 and lambdas >= 0".into()));
        }
        if self.grid.horizons.contains(&0) {
            return Err(Error::Config("grid horizons must be >= 1".into()));
        }
        self.problem_params(2)?;
        self.backtest_config().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn check_files(&self) -> Result<()> {
        if let Some(csv) = &self.data.csv {
            if !csv.is_file() {
                return Err(Error::Config(format!("data file {} does not exist", csv.display())));
            }
        }
        Ok(())
    }

    pub fn problem_params(&self, n_assets: usize) -> Result<ProblemParams> {
        let p = &self.problem;
        let mut params = ProblemParams::new(p.delta, p.lambda, p.kappa, p.horizon, n_assets)
            .map_err(|e| Error::Config(e.to_string()))?;
        params.cov_jitter = self.backtest.ewma.jitter;
        Ok(params)
    }

    /// Backtest settings with the problem, solver and Neumann sections applied.
    pub fn backtest_config(&self) -> BacktestConfig {
        BacktestConfig {
            delta: self.problem.delta,
            lambda: self.problem.lambda,
            kappa: self.problem.kappa,
            horizon: self.problem.horizon,
            solver: self.solver.clone(),
            neumann: self.neumann.clone(),
            ..self.backtest.clone()
        }
    }

    /// Backtest settings at one grid point.
    pub fn at_grid_point(&self, point: &GridPoint) -> BacktestConfig {
        point.apply(&self.backtest_config())
    }

    pub fn load_panel(&self) -> Result<RealizedPanel> {
        match (&self.data.csv, &self.data.synthetic) {
            (Some(path), None) => load_returns_csv(path),
            (None, Some(spec)) => generate_synthetic(spec, self.seed),
            _ => Err(Error::Config("[data] needs exactly one of `csv` or `synthetic`".into())),
        }
    }
}
