pub mod data;
pub mod distill;
pub mod error;
pub mod importance;
pub mod model;
pub mod pipeline;
pub mod surgeon;
pub mod tape;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Precision, Tensor};
