//! Small-tensor arithmetic, reverse-mode autodiff and the two optimizers.

mod adam;
mod lbfgs;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use lbfgs::{lbfgs_minimize, LbfgsConfig, LbfgsResult, LbfgsStatus};
pub use tape::{Tape, Var};
pub use tensor::{cosine_similarity, dot, l2_normalize, norm, squared_distance, Tensor};
