//! Dense arrays with reverse-mode automatic differentiation.

mod array;
mod gradcheck;
mod tape;

pub use array::{DiffArray, Precision, Real};
pub use gradcheck::finite_diff_check;
pub use tape::{BatchStats, BinaryOp, Padding, ReduceOp, Tape, UnaryOp, Var};
