//! Source-free test-time adaptation for multi-sequence volumetric segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`volume`]: volumes, masks and prediction maps plus Z-score normalisation
//! - [`io`]: the `MSVOL1` container used for volumes, predictions and checkpoints
//! - [`backbone`]: a compact 3D encoder-decoder with hand-written backward passes
//! - [`isig`]: inter-sequence intervention views (spectral and entropy-patch swaps)
//! - [`cdpl`]: disagreement variance, gated pseudo-label loss, consistency loss
//! - [`engine`]: the online teacher-student adaptation loop and baselines
//! - [`phantom`]: synthetic nested-structure phantoms with controllable shifts
//! - [`metrics`]: Dice, HD95 and sensitivity over nested subregions

pub mod backbone;
pub mod cdpl;
pub mod config;
pub mod engine;
pub mod error;
pub mod io;
pub mod isig;
pub mod metrics;
pub mod phantom;
pub mod volume;


pub use config::VistaConfig;
pub use error::{Error, Result};
pub use volume::{BinaryMask3D, LabelVolume, LogitMap, MultiSequenceVolume, ProbabilityMap};
