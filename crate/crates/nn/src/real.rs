use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar usable by every layer in this crate.
pub trait Real:
    LinalgScalar
    + Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}
