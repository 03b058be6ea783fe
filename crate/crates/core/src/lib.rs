//! Unpaired singing style transfer with cycle-consistent generators and
//! boundary-equilibrium auto-encoder discriminators over log-magnitude
//! spectrograms, with Griffin-Lim resynthesis.

pub mod audio;
pub mod dataset;
pub mod eval;
pub mod models;
pub mod nn;
pub mod spectral;
pub mod training;
