//! Hyperbolic image-gene pretraining on spatial transcriptomics spots.
//!
//! The library couples a contrastive image-gene alignment objective with two
//! entailment objectives expressed through hyperbolic entailment cones on the
//! Lorentz hyperboloid:
//!
//! * cross-modal: each image embedding is pushed inside the cone of its
//!   paired gene embedding,
//! * intra-modal: spots with few expressed genes (low NGEC) are pushed toward
//!   wider cones than spots with many expressed genes (high NGEC), in both
//!   modalities.
//!
//! Everything trains at desk scale on synthetic spot data with a verified
//! reverse-mode gradient engine; see the `cli` module for the command-line
//! surface.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod encoders;
pub mod eval;
pub mod lorentz;
pub mod losses;
pub mod rng;
pub mod trainer;

pub use lorentz::{ConeConstants, Curvature, HyperPoint, TangentVec};
pub use losses::{BatchEmbeddings, LossBreakdown, LossWeights, SimMode};
