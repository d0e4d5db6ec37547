//! Nonlinear model predictive control for automated-driving path and
//! trajectory tracking.

pub mod model;
pub mod dynamics;
pub mod reference;
pub mod ftocp;
pub mod nas;
pub mod controller;
pub mod sim;
