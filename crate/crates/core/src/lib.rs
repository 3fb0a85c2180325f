pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod defenses;
pub mod error;
pub mod flsim;
pub mod harness;
pub mod imageio;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;
pub mod spoofl;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
