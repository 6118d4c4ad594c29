//! Instance segmentation with instance-aware deformable transformers.
//!
//! The crate is organized bottom-up: [`numeric`] provides tensors and
//! reverse-mode gradients; [`geometry`], [`posenc`], [`backbone`],
//! [`deformable`], [`heads`] and [`iat`] build the network; [`matching`]
//! holds the assignment solver and losses; [`data`] generates synthetic
//! scenes and evaluates predictions; [`model`], [`train`], [`infer`] and
//! [`config`] tie everything together for the command-line tool, and
//! [`check`] holds the invariant suites it runs.

// fallible `add`/`mul`/... on Var and NaN-rejecting `!(x > 0.0)` checks are deliberate
#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments, clippy::type_complexity)]

pub mod backbone;
pub mod check;
pub mod config;
pub mod data;
pub mod deformable;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod heads;
pub mod iat;
pub mod infer;
pub mod layers;
pub mod matching;
pub mod model;
pub mod numeric;
pub mod params;
pub mod posenc;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use numeric::{Real, Tape, Tensor, Var};
