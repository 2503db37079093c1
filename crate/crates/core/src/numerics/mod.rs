//! Dense f64 tensors, a single-use gradient tape, and named parameter storage.

mod params;
mod tape;
mod tensor;

pub use params::{BoundParams, Param, ParamStore};
pub use tape::{concat_cols, concat_rows, Gradients, Tape, Var};
pub use tensor::{argmax, cosine_matrix, cosine_similarity, dot, log_sum_exp, softmax, Tensor};
