pub mod cli;
pub mod copula;
pub mod elbo;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod numerics;
pub mod recognition;
pub mod smf;
pub mod svi;

pub use error::{Error, Result};
