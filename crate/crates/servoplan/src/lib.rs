//! Robot-agnostic visual servoing toolkit.
//!
//! The pipeline decouples *where to go* from *how to move*: a detector
//! (real or simulated) reports an oriented bounding box in image space,
//! [`geometry`] turns it into a normalized, vicinity-damped direction and
//! rotation command, [`filter`] smooths the command stream, and
//! [`planner`] converts the filtered command into a quintic velocity
//! trajectory that respects the velocity/acceleration/jerk limits of the
//! robot at hand. Because the detector never touches the control law,
//! swapping the robot-camera profile is a pure data change.
//!
//! [`servo_loop`] closes the loop at two rates (detection cycle and robot
//! controller cycle), [`sim`] provides a deterministic 3-DoF kinematic
//! robot and synthetic eye-in-hand detector, and [`harness`] reproduces
//! the full experimental protocol (initial-error grids, normal/clutter
//! scenes, per-episode metrics) behind the `servoplan` CLI.

pub mod config;
pub mod filter;
pub mod geometry;
pub mod harness;
pub mod planner;
pub mod record;
pub mod servo_loop;
pub mod sim;
pub mod stream;

pub use geometry::{ImagePoint, NormalizationParams, NormalizedCommand, ObbDetection};
pub use planner::{KinematicLimits, Timing};
pub use sim::{CameraModel, NoiseModel, RobotState, SimConfig};
