//! Forward-pass semantic occupancy pipeline over desk-scale synthetic
//! scenes: optical-flow temporal alignment with occlusion gating,
//! curriculum-scheduled depth fusion, depth-distribution voxel lifting with
//! deformable attention refinement, and the full loss/metric suite.

pub mod depth;
pub mod error;
pub mod flow;
pub mod grid;
pub mod io;
pub mod nn;
pub mod voxel;

pub use error::{Error, Result};
