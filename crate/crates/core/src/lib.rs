//! Multi-agent placement scoring for container clusters: per-node actor
//! networks over a shared graph encoder, a stress-aware lexicographic
//! selector, MADDPG training, and a discrete-event cluster simulator.

pub mod agent;
pub mod analysis;
pub mod autodiff;
pub mod cluster;
pub mod error;
pub mod gnn;
pub mod lexico;
pub mod model;
pub mod scenario;
pub mod seed;
pub mod sim;
pub mod svg;
pub mod training;
pub mod weights;
pub mod workload;

pub use error::{Error, Result};
