//! Black-box controller verification: closed-loop simulation under actuator
//! limits and perturbations, step-response and effort metrics, empirical and
//! analytic stability margins, and a scenario benchmark runner.

pub mod bench;
pub mod bridge;
pub mod controllers;
pub mod lti;
pub mod metrics;
pub mod robustness;
pub mod sim;
