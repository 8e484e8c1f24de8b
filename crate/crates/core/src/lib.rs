pub mod acg;
pub mod assignment;
pub mod baselines;
pub mod checkpoint;
pub mod classifier;
pub mod error;
pub mod eval;
pub mod io;
pub mod modularity;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Element, Tape, Tensor, Var};
