//! Simulation and analysis stack for a 7-DOF laparoscopic arm that holds its
//! instrument on a software (virtual) remote center of motion.

pub mod kinematics;
pub mod rcm;
pub mod report;
pub mod sim;
pub mod stats;
pub mod teleop;

pub use kinematics::{FramePoint, JointDef, JointVector, KinematicChain, Pose};

/// Version of this library, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
