//! Working-scalar abstraction: every numeric routine in the crate is generic
//! over `Scalar`, implemented for `f32` and `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

pub trait Scalar:
    Float + FromPrimitive + Sum + Debug + Display + Default + serde::Serialize + Send + Sync + 'static
{
    /// Shorthand for converting an `f64` literal (tolerances, defaults).
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    /// Lossy view as f64, for reports and binary formats.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    fn two() -> Self {
        Self::one() + Self::one()
    }

    fn half() -> Self {
        Self::one() / Self::two()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literals_convert_exactly_for_f64() {
        assert_eq!(f64::lit(0.25), 0.25);
        assert_eq!(f64::two(), 2.0);
        assert_eq!(f64::half(), 0.5);
    }

    #[test]
    fn f32_instantiates() {
        let x = f32::lit(1.5);
        assert_eq!(x.as_f64(), 1.5);
    }
}
