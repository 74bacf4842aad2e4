pub mod bands;
pub mod cli;
pub mod error;
pub mod expansion;
pub mod floquet;
pub mod galerkin;
pub mod linalg;
pub mod ode;
pub mod operator;
pub mod pipeline;
pub mod poly;
pub mod quad;
pub mod singular;
pub mod testfn;
pub mod trig;

pub use error::{Error, Result};
