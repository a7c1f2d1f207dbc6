//! Attention-based neural radiance fields on a small reverse-mode autodiff.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod cli;
pub mod diffcore;
pub mod evalviz;
pub mod model;
pub mod sampling;
pub mod scenes;
pub mod trainer;
pub mod vr_oracle;
