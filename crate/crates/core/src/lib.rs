//! Hierarchical concept models: sampling, support-based composability
//! certificates, identifiability diagnostics, structure recovery and the
//! diffusion-side attention kernels.

pub mod composability;
pub mod error;
pub mod fixtures;
pub mod identifiability;
pub mod kernels;
pub mod model;
pub mod par;
pub mod sampler;
pub mod spec_format;
pub mod stats;
pub mod structure;
pub mod support;

pub use error::{HierError, Result};
pub use model::{DiscreteCombination, HierModel, VariableId};
