//! Multi-source knowledge transfer through task-vector SVD components.
//!
//! Source task vectors are decomposed into rank-one SVD components, the
//! globally strongest K components per layer are summed into a merged
//! delta, that delta is re-orthogonalized with a final SVD, and a target
//! model is adapted by training only the leading singular values.

pub mod adapt;
pub mod bench;
pub mod calibrate;
pub mod error;
pub mod io;
pub mod linalg;
pub mod merge;
pub mod net;
pub mod params;
pub mod perturb;

pub use error::{Error, Result};
