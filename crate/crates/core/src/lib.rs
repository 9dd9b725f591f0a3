pub mod checkpoint;
pub mod cli;
pub mod env;
pub mod error;
pub mod grad;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod oracle;
pub mod pretrain;
pub mod rng;
pub mod rollout;
pub mod schedules;

pub use error::{Error, Result};
