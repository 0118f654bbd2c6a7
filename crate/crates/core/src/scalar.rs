//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate is generic over [`Real`], which is any
//! floating-point scalar nalgebra can run linear algebra on (`f32`, `f64`).
//! The blanket impl means downstream code never has to implement the trait;
//! it exists to give the crate a single bound to name and two conversion
//! helpers that generic code needs constantly.

use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar usable throughout the numeric core.
pub trait Real: nalgebra::RealField + Copy + FromPrimitive + ToPrimitive {
    /// Converts an `f64` constant into the working scalar type.
    ///
    /// Used for literals, configuration defaults, and physical constants;
    /// the conversion is lossy for `f32` in the usual way.
    #[inline]
    fn c(value: f64) -> Self {
        Self::from_f64(value).expect("finite f64 constant")
    }

    /// Converts the working scalar to `f64` (reporting, file I/O).
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl<T> Real for T where T: nalgebra::RealField + Copy + FromPrimitive + ToPrimitive {}
