//! Return forecasting: the linear multi-horizon predictor, EWMA risk
//! estimates, rolling training windows, and the two training loops.

mod covariance;
mod predictor;
mod train;
mod window;

pub use covariance::{covariance_path, ewma_covariance, EwmaConfig};
pub use predictor::{load_checkpoint, save_checkpoint, FeatureMode, Hyper, LinearPredictor, BLOCK_LEN};
pub use train::{
    ipmo_objective, mse_objective, train_ipmo, train_ipmo_cached, train_two_stage, Adam, BackwardMethod, IpmoSettings, TrainOutcome, TrainTrace,
};
pub use window::{Sample, TrainingWindow};
