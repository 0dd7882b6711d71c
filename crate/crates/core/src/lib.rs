//! Two-stage RGB + LiDAR multi-person 3D pose estimation trained from 2D pose
//! labels, together with its metrics, a synthetic oracle dataset and the
//! command-line harness.

pub mod anchors;
pub mod assignment;
pub mod bev;
pub mod cli;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod losses;
pub mod synthgen;
pub mod toynet;

pub use error::{Error, Result};
