pub mod checkpoint;
pub mod csta;
pub mod data;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod usta;

pub use error::{HstaError, Result};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
