//! Anatomy-prior segmentation of cardiac pathology in LGE MRI.
//!
//! The crate is organised around the training pipeline:
//!
//! * [`data_io`]: NIfTI case loading, slice extraction, splits and synthetic phantoms.
//! * [`augmentation`]: registration-based pathology mix-up.
//! * [`losses`]: automated weighted cross-entropy and the inclusion (neighborhood) penalty,
//!   with analytic gradients.
//! * [`model`]: the attention dense U-net, the weight generator and checkpoints.
//! * [`training`]: schedule, batching, Adam and the epoch loop.
//! * [`evaluation`]: Dice statistics, reports and the ablation runner.
//!
//! Label coding follows EMIDEC: 0 background, 1 LV cavity, 2 myocardium,
//! 3 infarction, 4 no-reflow.

pub mod augmentation;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod probmap;
pub mod render;
pub mod training;

pub use error::{Error, Result};
pub use probmap::{ProbMap, NUM_CLASSES};

/// Class index of the left-ventricular cavity.
pub const LV: u8 = 1;
/// Class index of healthy myocardium.
pub const MYO: u8 = 2;
/// Class index of infarcted myocardium.
pub const INFARCTION: u8 = 3;
/// Class index of the no-reflow (microvascular obstruction) core.
pub const NO_REFLOW: u8 = 4;
