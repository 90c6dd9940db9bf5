//! Semi-supervised volumetric segmentation trainer.
//!
//! One shared encoder feeds three decoders: a diffusion-denoising decoder
//! trained on labeled volumes, a difficulty-weighted supervised decoder, and
//! an unlabeled-flow decoder taught by two teachers (a reparameterize-and-
//! smooth ensemble of the first two branches and an EMA mean teacher).
//! Consistency losses (cross-set CutMix, patch-masked modeling, masked
//! reconstruction, soft-dice distillation) and voxel-level label propagation
//! through a correlation map supply the unlabeled training signal.
//!
//! The crate ships its own synthetic multi-domain dataset generator, a
//! deterministic f64 autodiff tape sized for desk-scale volumes, and the
//! evaluation stack (Dice, Jaccard, HD95, ASD).

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod masking;
pub mod network;
pub mod params;
pub mod propagation;
pub mod pseudo;
pub mod rng;
pub mod training;
pub mod vol;

pub use error::{Error, Result};
