//! Hierarchical supervisory control for a two-loop fluoride-salt reactor plant.
//!
//! The crate is organised around the closed control loop:
//!
//! * [`plant`]: lumped-parameter plant simulator with six-group point kinetics.
//! * [`pid`]: the low-level tracking/regulation layer.
//! * [`sysid`]: dynamic mode decomposition with control (DMDc) for the linear
//!   surrogate used by the governor.
//! * [`sffs`]: sequential forward floating selection of surrogate states.
//! * [`ukf`]: unscented Kalman filter estimating precursor concentrations.
//! * [`sgf`]: Savitzky-Golay smoothing of noisy measurements.
//! * [`governor`]: scalar reference governor over the maximal output
//!   admissible set.
//! * [`scenario`]: configuration, the tick loop, logging and training data.
//! * [`ops`]: operator command messages, tick-boundary application and
//!   telemetry frames for the live service.

pub mod error;
pub mod governor;
pub mod kinetics;
pub mod linalg;
pub mod ops;
pub mod pid;
pub mod plant;
pub mod scenario;
pub mod sffs;
pub mod sgf;
pub mod sysid;
pub mod trajectory;
pub mod ukf;

pub use error::{Error, Result};
