use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ForecastPath, StageMatrix};
use crate::error::{Error, Result};

/// Days averaged into one input feature.
pub const BLOCK_LEN: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Means over consecutive five-day blocks of the input window.
    #[default]
    BlockMean,
    /// Every day of the window is a feature.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Samples per parameter update; 0 means the whole window.
    pub batch_size: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            epochs: 200,
            batch_size: 0,
        }
    }
}

/// Per-asset affine map from the asset's own input features to its `H`
/// forecasts. There are no cross-asset weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPredictor {
    n_assets: usize,
    horizon: usize,
    input_len: usize,
    mode: FeatureMode,
    /// Weights `[asset][stage][feature]` followed by biases `[asset][stage]`.
    theta: Vec<f64>,
    pub l2_beta: f64,
    pub hyper: Hyper,
}

impl LinearPredictor {
    /// All-zero parameters.
    pub fn new(n_assets: usize, horizon: usize, input_len: usize, mode: FeatureMode, l2_beta: f64, hyper: Hyper) -> Result<Self> {
        if n_assets == 0 || horizon == 0 || input_len == 0 {
            return Err(Error::InvalidParameter("predictor dimensions must be positive".into()));
        }
        if mode == FeatureMode::BlockMean && input_len % BLOCK_LEN != 0 {
            return Err(Error::InvalidParameter(format!(
                "input length {input_len} is not a multiple of {BLOCK_LEN}"
            )));
        }
        if !(l2_beta >= 0.0) {
            return Err(Error::InvalidParameter("l2_beta must be >= 0".into()));
        }
        let features = match mode {
            FeatureMode::BlockMean => input_len / BLOCK_LEN,
            FeatureMode::Raw => input_len,
        };
        Ok(Self {
            n_assets,
            horizon,
            input_len,
            mode,
            theta: vec![0.0; n_assets * horizon * (features + 1)],
            l2_beta,
            hyper,
        })
    }

    /// Replaces the weights (not the biases) with uniform draws in
    /// `[-scale, scale]`.
    pub fn randomized(mut self, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nw = self.n_weights();
        for w in &mut self.theta[..nw] {
            *w = rng.random_range(-scale..=scale);
        }
        self
    }

    pub fn n_assets(&self) -> usize {
        self.n_assets
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn mode(&self) -> FeatureMode {
        self.mode
    }

    pub fn n_features(&self) -> usize {
        match self.mode {
            FeatureMode::BlockMean => self.input_len / BLOCK_LEN,
            FeatureMode::Raw => self.input_len,
        }
    }

    fn n_weights(&self) -> usize {
        self.n_assets * self.horizon * self.n_features()
    }

    /// Flat parameter vector: weights then biases.
    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn weight_index(&self, asset: usize, stage: usize, feature: usize) -> usize {
        (asset * self.horizon + stage) * self.n_features() + feature
    }

    pub fn bias_index(&self, asset: usize, stage: usize) -> usize {
        self.n_weights() + asset * self.horizon + stage
    }

    pub fn weight(&self, asset: usize, stage: usize, feature: usize) -> f64 {
        self.theta[self.weight_index(asset, stage, feature)]
    }

    pub fn set_weight(&mut self, asset: usize, stage: usize, feature: usize, value: f64) {
        let k = self.weight_index(asset, stage, feature);
        self.theta[k] = value;
    }

    pub fn bias(&self, asset: usize, stage: usize) -> f64 {
        self.theta[self.bias_index(asset, stage)]
    }

    pub fn set_bias(&mut self, asset: usize, stage: usize, value: f64) {
        let k = self.bias_index(asset, stage);
        self.theta[k] = value;
    }

    pub fn squared_norm(&self) -> f64 {
        self.theta.iter().map(|x| x * x).sum()
    }

    /// Feature grid `N x F` from an `L x N` input window (oldest row first).
    pub fn features(&self, x: &StageMatrix) -> Result<StageMatrix> {
        if x.shape() != (self.input_len, self.n_assets) {
            return Err(Error::Shape(format!(
                "input window is {:?}, expected ({}, {})",
                x.shape(),
                self.input_len,
                self.n_assets
            )));
        }
        let f = self.n_features();
        let mut out = StageMatrix::zeros(self.n_assets, f);
        match self.mode {
            FeatureMode::Raw => {
                for d in 0..self.input_len {
                    for a in 0..self.n_assets {
                        out[(a, d)] = x[(d, a)];
                    }
                }
            }
            FeatureMode::BlockMean => {
                for k in 0..f {
                    for d in k * BLOCK_LEN..(k + 1) * BLOCK_LEN {
                        for a in 0..self.n_assets {
                            out[(a, k)] += x[(d, a)];
                        }
                    }
                }
                out.scale(1.0 / BLOCK_LEN as f64);
            }
        }
        Ok(out)
    }

    /// Forecasts `H x N` from precomputed features.
    pub fn predict_features(&self, feats: &StageMatrix) -> StageMatrix {
        let f = self.n_features();
        let mut y = StageMatrix::zeros(self.horizon, self.n_assets);
        for a in 0..self.n_assets {
            let xa = feats.row(a);
            for s in 0..self.horizon {
                let k = self.weight_index(a, s, 0);
                let w = &self.theta[k..k + f];
                y[(s, a)] = w.iter().zip(xa).map(|(w, x)| w * x).sum::<f64>() + self.bias(a, s);
            }
        }
        y
    }

    pub fn predict(&self, x: &StageMatrix) -> Result<ForecastPath> {
        let feats = self.features(x)?;
        ForecastPath::new(self.predict_features(&feats))
    }

    /// Adds `scale * (d yhat / d theta)' g` to `grad`, where `g` is a
    /// gradient with respect to the `H x N` forecast.
    pub fn accumulate_grad(&self, feats: &StageMatrix, g: &StageMatrix, scale: f64, grad: &mut [f64]) {
        let f = self.n_features();
        for a in 0..self.n_assets {
            let xa = feats.row(a);
            for s in 0..self.horizon {
                let gs = scale * g[(s, a)];
                if gs == 0.0 {
                    continue;
                }
                let k = self.weight_index(a, s, 0);
                for (gw, x) in grad[k..k + f].iter_mut().zip(xa) {
                    *gw += gs * x;
                }
                grad[self.bias_index(a, s)] += gs;
            }
        }
    }
}

const CHECKPOINT_FORMAT: &str = "ipmo-linear-predictor";
const CHECKPOINT_VERSION: u32 = 1;

/// Floats are stored as hexadecimal bit patterns so a save/load round
/// trip is bit-exact.
#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    n_assets: usize,
    horizon: usize,
    input_len: usize,
    mode: FeatureMode,
    l2_beta: String,
    learning_rate: String,
    epochs: usize,
    batch_size: usize,
    fingerprint: Option<String>,
    theta: Vec<String>,
}

fn bits(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

fn unbits(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|e| Error::Config(format!("bad float encoding {s:?}: {e}")))
}

pub fn save_checkpoint(model: &LinearPredictor, fingerprint: Option<&str>, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        n_assets: model.n_assets,
        horizon: model.horizon,
        input_len: model.input_len,
        mode: model.mode,
        l2_beta: bits(model.l2_beta),
        learning_rate: bits(model.hyper.learning_rate),
        epochs: model.hyper.epochs,
        batch_size: model.hyper.batch_size,
        fingerprint: fingerprint.map(str::to_owned),
        theta: model.theta.iter().map(|&x| bits(x)).collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`], returning the model
/// and the stored training-window fingerprint.
pub fn load_checkpoint(path: &Path) -> Result<(LinearPredictor, Option<String>)> {
    let file: CheckpointFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    let hyper = Hyper {
        learning_rate: unbits(&file.learning_rate)?,
        epochs: file.epochs,
        batch_size: file.batch_size,
    };
    let mut model = LinearPredictor::new(file.n_assets, file.horizon, file.input_len, file.mode, unbits(&file.l2_beta)?, hyper)?;
    if file.theta.len() != model.theta.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, expected {}",
            file.theta.len(),
            model.theta.len()
        )));
    }
    for (t, s) in model.theta.iter_mut().zip(&file.theta) {
        *t = unbits(s)?;
    }
    Ok((model, file.fingerprint))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(rows: usize, n: usize, f: impl Fn(usize, usize) -> f64) -> StageMatrix {
        let mut m = StageMatrix::zeros(rows, n);
        for d in 0..rows {
            for a in 0..n {
                m[(d, a)] = f(d, a);
            }
        }
        m
    }

    #[test]
    fn zero_weights_return_bias() {
        let mut m = LinearPredictor::new(2, 3, 10, FeatureMode::BlockMean, 0.0, Hyper::default()).unwrap();
        for a in 0..2 {
            for s in 0..3 {
                m.set_bias(a, s, 0.01 * (a + 1) as f64);
            }
        }
        let y = m.predict(&window(10, 2, |d, a| (d * a) as f64)).unwrap();
        for s in 0..3 {
            assert_eq!(y.y_hat.row(s), &[0.01, 0.02]);
        }
    }

    #[test]
    fn constant_input_gives_weight_sum() {
        let mut m = LinearPredictor::new(2, 2, 15, FeatureMode::BlockMean, 0.0, Hyper::default()).unwrap();
        for a in 0..2 {
            for s in 0..2 {
                for f in 0..3 {
                    m.set_weight(a, s, f, 0.5 + f as f64);
                }
                m.set_bias(a, s, 0.25);
            }
        }
        let y = m.predict(&window(15, 2, |_, _| 2.0)).unwrap();
        // (0.5 + 1.5 + 2.5) * 2 + 0.25
        for &v in y.y_hat.as_slice() {
            assert!((v - 9.25).abs() < 1e-14);
        }
    }

    #[test]
    fn block_means_are_oldest_first() {
        let m = LinearPredictor::new(1, 1, 10, FeatureMode::BlockMean, 0.0, Hyper::default()).unwrap();
        let f = m.features(&window(10, 1, |d, _| d as f64)).unwrap();
        assert_eq!(f.row(0), &[2.0, 7.0]);
        let raw = LinearPredictor::new(1, 1, 3, FeatureMode::Raw, 0.0, Hyper::default()).unwrap();
        assert_eq!(raw.features(&window(3, 1, |d, _| d as f64)).unwrap().row(0), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn shape_and_parameter_errors() {
        assert!(LinearPredictor::new(2, 2, 12, FeatureMode::BlockMean, 0.0, Hyper::default()).is_err());
        let m = LinearPredictor::new(2, 2, 10, FeatureMode::BlockMean, 0.0, Hyper::default()).unwrap();
        assert!(matches!(m.predict(&StageMatrix::zeros(9, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn assets_are_independent() {
        let m = LinearPredictor::new(3, 2, 10, FeatureMode::BlockMean, 0.0, Hyper::default()).unwrap().randomized(3, 1.0);
        let x = window(10, 3, |d, a| (d as f64 - a as f64) * 0.01);
        let base = m.predict(&x).unwrap();
        let mut x2 = x.clone();
        for d in 0..10 {
            x2[(d, 1)] += 0.5;
        }
        let moved = m.predict(&x2).unwrap();
        for s in 0..2 {
            assert_eq!(base.y_hat[(s, 0)], moved.y_hat[(s, 0)]);
            assert_eq!(base.y_hat[(s, 2)], moved.y_hat[(s, 2)]);
            assert_ne!(base.y_hat[(s, 1)], moved.y_hat[(s, 1)]);
        }
    }

    #[test]
    fn gradient_matches_differences() {
        let m = LinearPredictor::new(2, 2, 10, FeatureMode::BlockMean, 0.0, Hyper::default()).unwrap().randomized(5, 0.3);
        let x = window(10, 2, |d, a| ((d * 7 + a * 3) % 5) as f64 * 0.01);
        let g = StageMatrix::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5]]).unwrap();
        let feats = m.features(&x).unwrap();
        let mut grad = vec![0.0; m.params().len()];
        m.accumulate_grad(&feats, &g, 1.0, &mut grad);
        for k in 0..grad.len() {
            let mut p = m.clone();
            p.params_mut()[k] += 1e-6;
            let mut q = m.clone();
            q.params_mut()[k] -= 1e-6;
            let fp = p.predict_features(&feats).dot(&g);
            let fm = q.predict_features(&feats).dot(&g);
            assert!(((fp - fm) / 2e-6 - grad[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut m = LinearPredictor::new(3, 2, 10, FeatureMode::BlockMean, 1e-3, Hyper::default()).unwrap().randomized(9, 1.0);
        m.set_bias(1, 1, std::f64::consts::PI * 1e-17);
        m.hyper.learning_rate = 0.1 + 0.2;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&m, Some("abc123"), &path).unwrap();
        let (back, fp) = load_checkpoint(&path).unwrap();
        assert_eq!(fp.as_deref(), Some("abc123"));
        assert_eq!(back.hyper, m.hyper);
        assert_eq!(back.l2_beta.to_bits(), m.l2_beta.to_bits());
        for (a, b) in back.params().iter().zip(m.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    proptest::proptest! {
        // without biases the forecast is linear in the input window
        #[test]
        fn forecast_is_linear_in_inputs(
            seed in 0u64..1000,
            c in -3.0f64..3.0,
            xs in proptest::collection::vec(-0.05f64..0.05, 40),
            ys in proptest::collection::vec(-0.05f64..0.05, 40),
        ) {
            for mode in [FeatureMode::BlockMean, FeatureMode::Raw] {
                let m = LinearPredictor::new(4, 2, 10, mode, 0.0, Hyper::default()).unwrap().randomized(seed, 1.0);
                let x1 = StageMatrix::from_vec(10, 4, xs.clone()).unwrap();
                let x2 = StageMatrix::from_vec(10, 4, ys.clone()).unwrap();
                let mut mix = x1.clone();
                mix.axpy(c, &x2);
                let lhs = m.predict(&mix).unwrap().y_hat;
                let mut rhs = m.predict(&x1).unwrap().y_hat;
                rhs.axpy(c, &m.predict(&x2).unwrap().y_hat);
                let scale = 1.0 + lhs.max_abs();
                proptest::prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12 * scale);
            }
        }
    }
}
