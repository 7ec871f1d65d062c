//! Sequential variational autoencoder with split content/style latents for
//! binned spike-count data.
//!
//! Content latents are deterministic per-step codes; style latents are
//! Gaussian with a learned prior conditioned on the previous recurrent state.
//! Both are generated chronologically, one time bin at a time.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::single_range_in_vec_init, clippy::needless_range_loop, clippy::type_complexity))]

pub mod evaluation;
pub mod format;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod synthdata;
pub mod training;
