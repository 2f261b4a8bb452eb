#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]
extern crate alloc;

pub mod autograd;
pub mod error;
pub mod eval;
pub mod image;
pub mod inference;
pub mod kernels;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod survey;
pub mod tensor;
pub mod toy;
pub mod train;
pub mod wsi;

pub use error::{Error, Result};
