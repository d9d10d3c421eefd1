//! Learned contrast synthesis for multi-modal 3D registration.
//!
//! The crate is organised around a [`Volume`](volume::Volume) with physical
//! voxel geometry. On top of it sit landmark transforms ([`xform`]), per-voxel
//! feature extraction ([`features`]), tree ensembles ([`ensemble`]), decile
//! synthesis ([`synth`]), an intensity registration engine ([`registration`]),
//! landmark error evaluation ([`evaluation`]), a synthetic phantom generator
//! ([`phantom`]) and the batch workflow driven by a config file ([`pipeline`]).

pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod io;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod rng;
pub mod synth;
pub mod volume;
pub mod xform;

pub use error::{Error, Result};
pub use volume::{Geometry, PreprocessParams, Volume};
