//! Nested high-order Markov-Gibbs random field (MGRF) texture models.
//!
//! A texture is described by the normalized histograms of a set of feature
//! functions, each applied over a translation-invariant clique family. The
//! model is built greedily: starting from a base model of grey-level marginals
//! and nearest-neighbour grey-level differences, new potentials are nested on
//! top of the current model wherever model samples disagree most with the
//! training image.
//!
//! The crate is organised as:
//!
//! - [`image`]: grey-level lattices, file I/O, CLAHE quantization, training pieces.
//! - [`features`]: feature functions, clique geometry, histogram collection and
//!   candidate generators for the selector families.
//! - [`filterbank`]: Laplacian-of-Gaussian and Gabor filters used as
//!   quantized-response features.
//! - [`model`]: potentials, the nested model, energies, local conditionals and
//!   the text model format.
//! - [`sampling`]: Gibbs sweeps, controllable simulated annealing (CSA / ACSA),
//!   synthesis and inpainting.
//! - [`learning`]: Jensen-Shannon scoring, windowed selection objectives,
//!   second-order initialization and the nesting driver.
//! - [`eval`]: MSSIM, exact enumeration for tiny lattices and the inpainting
//!   benchmark harness.

pub mod error;
pub mod eval;
pub mod features;
pub mod filterbank;
pub mod image;
pub mod learning;
pub mod model;
pub mod sampling;

pub use crate::error::{Error, Result};
pub use crate::features::{FeatureKind, HistogramStats, Offset, OffsetList};
pub use crate::image::{GreyImage, PieceSet};
pub use crate::model::{NestedModel, Potential};
