//! Volumetric retinal-OCT fluid segmentation: a self-configuring U-Net
//! pipeline with an optional residual + atrous-pyramid variant, trained with
//! Dice + cross-entropy and evaluated with Dice, absolute volume difference
//! and detection ROC/AUC.

pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod net;
pub mod plan;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
