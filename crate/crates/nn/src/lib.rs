//! Minimal CPU building blocks for small convolutional networks.
//!
//! Every model keeps its parameters in one flat buffer described by a
//! [`ParamLayout`]; layers only store the slot they own. Forward passes return
//! explicit caches and backward passes accumulate into a gradient buffer of
//! the same length as the parameters. All code is generic over [`Real`] so the
//! same network can be evaluated in `f32` for training and in `f64` for
//! finite-difference gradient checks.

pub mod conv;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod params;
pub mod real;
pub mod resnet;
pub mod unet;

pub use conv::{Conv2d, ConvCache};
pub use optim::{Adam, Optimizer, Sgd};
pub use params::{Init, ParamLayout, Slot};
pub use real::Real;
pub use resnet::{BlockSpec, ResidualPass, ResidualSpec, TinyResidual};
pub use unet::{TinyUNet, UNetPass, UNetSpec};
