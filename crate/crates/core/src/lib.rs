//! Learnable token selection with a differentiable Top-K operator.
//!
//! A scorer assigns one importance score per token; during training a
//! sigmoid-threshold relaxation of Top-K turns the scores into a soft mask
//! whose gradient comes from implicit differentiation, and at inference a
//! hard Top-K keeps exactly `k` tokens. A curriculum-weighted BCE term pulls
//! the soft mask toward the hard one as training progresses.

// `!(x > 0.0)` style checks are deliberate: NaN must fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
mod binio;
pub mod checkpoint;
pub mod difftopk;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod objective;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod scorer;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
