//! Scalar abstraction for the numeric kernels (cosine selection, Gaussian
//! statistics, FID). Wire types stay `f64`; the math is generic so it can run
//! in `f32` for large feature sets.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar usable by the selection and FID kernels.
pub trait Real:
    RealField + FromPrimitive + ToPrimitive + Copy + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; exact for `f64` itself.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
