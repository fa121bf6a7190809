//! Payload scalar abstraction.
//!
//! Timing state is always integer nanoseconds; only the *values* carried by
//! functional runs are scalar-typed. Integer payloads give exact, orderless
//! reduction results (overflow is a hard error); float payloads accumulate
//! with ordinary IEEE adds.

use std::fmt::Debug;

use num_traits::{NumAssign, Zero};

/// Element type carried by functional payloads.
pub trait Scalar: Copy + Debug + PartialEq + NumAssign + Zero + Send + Sync + 'static {
    /// Accumulate `rhs` into `self`, reporting overflow where the type can.
    fn accumulate(self, rhs: Self) -> Option<Self>;
}

macro_rules! int_scalar {
    ($($t:ty),*) => {$(
        impl Scalar for $t {
            fn accumulate(self, rhs: Self) -> Option<Self> {
                self.checked_add(rhs)
            }
        }
    )*};
}

macro_rules! float_scalar {
    ($($t:ty),*) => {$(
        impl Scalar for $t {
            fn accumulate(self, rhs: Self) -> Option<Self> {
                Some(self + rhs)
            }
        }
    )*};
}

int_scalar!(i32, i64);
float_scalar!(f32, f64);
