//! Moving planned segments between workers.
//!
//! [`wire`] defines the framed byte format both movers speak. [`sim`]
//! prices a plan analytically with an alpha-beta cost model; [`tcp`]
//! executes it for real over a full TCP mesh with a barrier per phase.

pub mod sim;
pub mod tcp;
pub mod wire;
