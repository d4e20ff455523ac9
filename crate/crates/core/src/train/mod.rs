pub mod ablation;
pub mod augment;
pub mod config;
pub mod data;
pub mod manifest;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use config::{Precision, TrainConfig};
pub use trainer::{evaluate, train, train_with, EpochRecord, RunHistory};
