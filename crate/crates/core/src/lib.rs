pub mod attention;
pub mod datapipe;
pub mod inference;
pub mod network;
pub mod objectives;
pub mod tensor;
pub mod trainer;

pub use tensor::{Graph, Mode, Tensor, TensorError, Var};
