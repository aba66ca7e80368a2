//! Scalar abstraction: training runs at f32, gradient checks at f64.

use num_traits::Float;

/// Floating-point scalar the engine is generic over.
///
/// `f32` is the training type; finite-difference gradient checks need the
/// f64 instantiation (1e-4 relative tolerance is unreachable in f32).
pub trait Real:
    Float
    + core::fmt::Debug
    + core::fmt::Display
    + core::iter::Sum
    + core::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// The next representable value from `self` toward `toward`.
    fn next_toward(self, toward: Self) -> Self;
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn next_toward(self, toward: Self) -> Self {
        if self == toward || self.is_nan() {
            return toward;
        }
        if self == 0.0 {
            return if toward > 0.0 { f32::from_bits(1) } else { -f32::from_bits(1) };
        }
        let bits = self.to_bits();
        let next = if (self < toward) == (self >= 0.0) { bits + 1 } else { bits - 1 };
        f32::from_bits(next)
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    fn next_toward(self, toward: Self) -> Self {
        if self == toward || self.is_nan() {
            return toward;
        }
        if self == 0.0 {
            return if toward > 0.0 { f64::from_bits(1) } else { -f64::from_bits(1) };
        }
        let bits = self.to_bits();
        let next = if (self < toward) == (self >= 0.0) { bits + 1 } else { bits - 1 };
        f64::from_bits(next)
    }
}

#[cfg(test)]
mod tests {
    use super::Real;

    #[test]
    fn next_toward_steps_one_ulp() {
        let x = 1.0f32;
        assert!(x.next_toward(2.0) > x);
        assert!(x.next_toward(0.0) < x);
        assert_eq!(x.next_toward(1.0), 1.0);
        let y = -0.5f64;
        assert!(y.next_toward(0.0) > y);
        assert!(y.next_toward(-1.0) < y);
        assert!(0.0f32.next_toward(1.0) > 0.0);
        assert!(0.0f32.next_toward(-1.0) < 0.0);
    }
}
