//! Desk-scale laboratory for secure deletion on flash: a NAND medium model,
//! a YAFFS-style log-structured file system, purging / ballooning / zero
//! overwriting, and a discrete-event workload that measures how long deleted
//! data survives on the medium.

pub mod config;
pub mod experiment;
pub mod fs;
pub mod medium;
pub mod metrics;
pub mod secdel;
pub mod workload;

pub use fs::{FileSystem, FsConfig, FsError};
pub use medium::{Geometry, Medium, MediumError};
