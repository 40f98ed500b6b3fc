//! Simulation and control library for table-edge pivot reorientation with an
//! asynchronous perception/control runtime.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`]: silhouettes, centroid and rim anchors, boundary tangents.
//! * [`kinematics`]: 6-DoF serial arm FK, Jacobians, damped least-squares IK.
//! * [`dynamics`]: quasi-static torque bookkeeping about the pivot line.
//! * [`primitives`]: pick-and-place and pivot-flip plan construction.
//! * [`runtime`]: discrete-event dual-stream scheduler, spline kernel, soft sync.
//! * [`perception`]: synthetic masks, fixed features and few-shot anchor regression.
//! * [`metrics`]: jitter, jerk, collisions, singularity rate and success.
//! * [`scenario`] and [`pipeline`]: scenario files and end-to-end runs.

pub mod dynamics;
pub mod geometry;
pub mod kinematics;
pub mod metrics;
pub mod perception;
pub mod pipeline;
pub mod primitives;
pub mod runtime;
pub mod scenario;
mod textio;
