//! File formats, training pipeline and command line for topology-aware
//! retinal image fusion. The numerical core is re-exported as
//! [`tagat_core`].

pub mod checkpoint;
pub mod formats;
pub mod io;
pub mod pipeline;

pub use tagat_core;
