//! Spectral representation learning on exact finite joint distributions.
//!
//! Every self-supervised objective family here (direct spectral losses,
//! power-iteration learners, energy-based and latent-variable models,
//! multi-modal contrastive losses, classical component analysis) is trained
//! on a small, exactly specified joint table and judged against the exact
//! SVD of the normalized operator `T = P / √(Px Py)`.

pub mod classic;
pub mod dist;
pub mod ebm;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod latent;
pub mod linalg;
pub mod linobj;
pub mod mm;
pub mod nce;
pub mod oracle;
pub mod power;
pub mod selftest;
pub mod tasks;
pub mod train;

pub use dist::{JointTable, PairBatch, RatioMatrix, TMatrix};
pub use error::{Error, Result};
pub use oracle::{SpectralBasis, SubspaceMetric};
