//! Personalized group-level preference alignment on a synthetic world.
//!
//! The crate contains a small `f64` reverse-mode differentiation engine
//! ([`numerics`]), a feature-crossing user representation with zero-initialised
//! adaptive injectors ([`personalization`]), a two-tower reward model with
//! per-layer personalized plug-ins ([`reward`]), a toy DDPM over item vectors
//! with a ControlNet-style personalized branch ([`diffusion`]), the
//! Plackett–Luce group preference objective ([`groupdpo`]) and the synthetic
//! preference world the models are trained and judged on ([`synthdata`]).

pub mod diffusion;
pub mod error;
pub mod groupdpo;
pub mod numerics;
pub mod personalization;
pub mod reward;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
