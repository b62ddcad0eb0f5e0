use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point element type of parameter vectors: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Serialize + DeserializeOwned + 'static
{
    /// Lossy conversion from an `f64` constant.
    fn of(value: f64) -> Self {
        Self::from_f64(value).expect("f64 constant representable")
    }

    fn of_count(count: usize) -> Self {
        Self::from_usize(count).expect("count representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
