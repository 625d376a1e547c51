//! Skeleton-points interaction learning for video violence recognition.
//!
//! Pose sequences become 3D skeleton point clouds (`x`, `y`, frame index),
//! which a stack of local interaction layers and global self-attention layers
//! classifies as violent or non-violent.

pub mod error;
pub mod global_spil;
pub mod ingest;
pub mod layers;
pub mod local_spil;
pub mod model;
pub mod numerics;
pub mod sampling;

pub use error::{Result, SpilError};
