pub mod burgers;
pub mod linear_gaussian;

pub use burgers::{generate_dataset, simulate_burgers, BurgersConfig, BurgersDataset};
pub use linear_gaussian::{kalman_filter, KalmanOutput, LinearGaussianSsm};
