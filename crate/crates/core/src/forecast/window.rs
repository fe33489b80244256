use crate::domain::{CovariancePath, StageMatrix};
use crate::error::{Error, Result};

use super::covariance::{covariance_path, EwmaConfig};

/// One supervised example anchored at panel row `anchor`.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Input rows `anchor - L + 1 ..= anchor`, oldest first.
    pub x: StageMatrix,
    /// Realized returns on rows `anchor + 1 ..= anchor + H`.
    pub y: StageMatrix,
    /// Risk estimate available at `anchor`.
    pub cov: CovariancePath,
    pub anchor: usize,
}

impl Sample {
    /// Last row the inputs (and covariance) read.
    pub fn input_end(&self) -> usize {
        self.anchor
    }

    /// First row of the targets.
    pub fn target_start(&self) -> usize {
        self.anchor + 1
    }
}

/// Rolling training set for a model used at decision row `t`: the
/// `lookback` most recent samples whose targets are fully observed by `t`.
#[derive(Clone, Debug)]
pub struct TrainingWindow {
    pub samples: Vec<Sample>,
    pub decision_row: usize,
    fingerprint: String,
}

impl TrainingWindow {
    /// Earliest decision row with enough history for a full window.
    pub fn first_decision_row(lookback: usize, input_len: usize, horizon: usize, ewma: &EwmaConfig) -> usize {
        let history = input_len.max(ewma.window);
        lookback + horizon + history - 2
    }

    pub fn build(
        returns: &StageMatrix,
        t: usize,
        lookback: usize,
        input_len: usize,
        horizon: usize,
        ewma: &EwmaConfig,
    ) -> Result<Self> {
        if lookback == 0 || input_len == 0 || horizon == 0 {
            return Err(Error::InvalidParameter("window sizes must be positive".into()));
        }
        if t >= returns.rows() {
            return Err(Error::InsufficientData(format!(
                "decision row {t} beyond panel of {} rows",
                returns.rows()
            )));
        }
        let first = Self::first_decision_row(lookback, input_len, horizon, ewma);
        if t < first {
            return Err(Error::InsufficientData(format!(
                "decision row {t} needs at least {} rows of history",
                first + 1
            )));
        }
        let n = returns.cols();
        let rows = |a: usize, b: usize| StageMatrix::from_vec(b - a, n, returns.as_slice()[a * n..b * n].to_vec());
        let mut samples = Vec::with_capacity(lookback);
        for anchor in (t + 1 - horizon - lookback)..=(t - horizon) {
            samples.push(Sample {
                x: rows(anchor + 1 - input_len, anchor + 1)?,
                y: rows(anchor + 1, anchor + 1 + horizon)?,
                cov: covariance_path(returns, anchor, horizon, ewma)?,
                anchor,
            });
        }
        let fingerprint = fingerprint_of(returns, samples[0].anchor + 1 - input_len.max(ewma.window), t, &[lookback, input_len, horizon]);
        let window = Self {
            samples,
            decision_row: t,
            fingerprint,
        };
        window.check_no_lookahead()?;
        Ok(window)
    }

    /// Window over hand-made samples (for example noiseless synthetic
    /// targets). The fingerprint covers the sample contents.
    pub fn from_samples(samples: Vec<Sample>, decision_row: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InsufficientData("no samples".into()));
        }
        let mut h = Vec::new();
        for s in &samples {
            h.extend_from_slice(s.x.as_slice());
            h.extend_from_slice(s.y.as_slice());
        }
        let flat = StageMatrix::from_vec(h.len(), 1, h)?;
        let rows = flat.rows();
        let window = Self {
            samples,
            decision_row,
            fingerprint: fingerprint_of(&flat, 0, rows.saturating_sub(1), &[decision_row]),
        };
        window.check_no_lookahead()?;
        Ok(window)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Every sample's inputs end before its targets begin, and no target
    /// lies after the decision row.
    pub fn check_no_lookahead(&self) -> Result<()> {
        for s in &self.samples {
            if s.input_end() >= s.target_start() || s.anchor + s.y.rows() > self.decision_row {
                return Err(Error::Precondition(format!("sample at row {} looks ahead", s.anchor)));
            }
        }
        Ok(())
    }

    /// Hash of the panel rows and sizes the window was built from.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

fn fingerprint_of(returns: &StageMatrix, start: usize, end: usize, sizes: &[usize]) -> String {
    // 64-bit FNV-1a; stable across platforms and toolchains
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for s in sizes {
        eat(&(*s as u64).to_le_bytes());
    }
    eat(&(start as u64).to_le_bytes());
    eat(&(end as u64).to_le_bytes());
    let n = returns.cols();
    for x in &returns.as_slice()[start * n..(end + 1) * n] {
        eat(&x.to_bits().to_le_bytes());
    }
    format!("{h:016x}")
}
