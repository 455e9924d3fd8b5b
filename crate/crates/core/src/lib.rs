//! Synthetic Bragg coherent diffraction imaging toolkit.
//!
//! Three interchangeable ways of inverting a 3D diffraction magnitude to a
//! real-space shape and strain phase are provided: iterative ER/HIO phase
//! retrieval with shrink-wrap ([`retrieval`]), a trainable 3D encoder with two
//! decoders ([`nn`]), and adjoint-gradient refinement of any estimate against
//! the forward model ([`refine`]). [`crystalgen`] and [`dataset`] synthesize
//! strained faceted nanocrystals to train and test them on.

pub mod error;
pub mod volume;

pub use error::{Error, Result};
pub mod crystalgen;
pub mod forward;
pub mod retrieval;
pub mod eval;
pub mod refine;
pub mod nn;
pub mod dataset;
