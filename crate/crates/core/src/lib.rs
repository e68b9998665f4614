//! Self-supervised SAR/optical fusion for pixel-level land-cover mapping.
//!
//! Two views of a scene are compared at the superpixel and image level with
//! an InfoNCE objective, using early, intermediate or late fusion of the
//! radar and optical inputs. A rule-based pseudo-labeller built on spectral
//! indices and per-scene k-means then drives a two-step self-training run
//! that produces dense land-cover maps without manual labels.

pub mod augment;
pub mod cli;
pub mod cluster;
pub mod contrastive;
pub mod error;
pub mod fusionnet;
pub mod pipeline;
pub mod pseudolabel;
pub mod scenedata;
pub mod spectral;

pub use error::{Error, Result};
