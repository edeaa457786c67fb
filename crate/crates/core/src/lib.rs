//! Task-oriented velocity manipulability of a serial arm along an object
//! path, its gradient with respect to the grasp pose, and haptic cues built
//! from that gradient.

pub mod se3;
pub mod kinematics;
pub mod path;
pub mod tov;
pub mod haptics;
pub mod metrics;
pub mod scenario;
pub mod experiment;
