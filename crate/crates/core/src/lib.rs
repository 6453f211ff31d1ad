//! Video deblurring with a learned blur operator, a learned pseudo-inverse
//! trained on Moore-Penrose identities, and a variational restoration network.
//!
//! The pipeline trains in three frozen-in-order stages:
//! [`blur`] (estimate and apply H), [`pinv`] (estimate and apply H⁺) and
//! [`vdn`] (restore the sharp centre frame from `y` and `H⁺y`).
//! [`oracle`] provides exact circulant pseudo-inverses for known uniform blurs.

pub mod blocks;
pub mod blur;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod oracle;
pub mod pinv;
pub mod pyramid;
pub mod tensor;
pub mod types;
pub mod vdn;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamStore, Real, Tensor, Var};
