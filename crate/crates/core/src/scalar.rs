use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of all tensor math.
///
/// The engine runs in one of two precision modes: `f64` for gradient checks
/// and oracle tests, `f32` for training and benchmarks. Everything numeric is
/// generic over this trait; concrete aliases live at the crate root.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn cast_from(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 -> scalar cast")
    }

    fn cast_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("scalar -> f64 cast")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
