pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod evalreport;
pub mod hyperpinn;
pub mod ode;
pub mod rng;
pub mod wgan;

pub use error::{Error, Result};
