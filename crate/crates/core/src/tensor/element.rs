//! Scalar element types a [`Tensor`](super::Tensor) can hold.
//!
//! Besides `f32` and `f64` there is [`Counted`], an `f64` wrapper whose
//! multiplication bumps a thread-local counter. Running a forward pass with
//! `Counted` elements yields the exact number of multiplies the kernels
//! perform, which is what the static MAC formulas are checked against.

use std::cell::Cell;
use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Storage tag written into checkpoint headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub trait Element:
    Copy
    + Debug
    + Display
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + Default
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;

    #[inline]
    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    #[inline]
    fn one() -> Self {
        Self::from_f64(1.0)
    }

    #[inline]
    fn is_finite(self) -> bool {
        self.to_f64().is_finite()
    }

    #[inline]
    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

/// Elements that can be written to and read from the checkpoint container.
pub trait StorageElement: Element {
    const DTYPE: DType;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! float_element {
    ($t:ty, $name:literal, $dtype:expr) => {
        impl Element for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }

        impl StorageElement for $t {
            const DTYPE: DType = $dtype;

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

float_element!(f32, "f32", DType::F32);
float_element!(f64, "f64", DType::F64);

thread_local! {
    static MULTIPLIES: Cell<u64> = const { Cell::new(0) };
}

/// `f64` whose `*` is counted. See [`count_multiplies`].
#[derive(Debug, Clone, Copy, Default, PartialEq, PartialOrd)]
pub struct Counted(pub f64);

impl Display for Counted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        Display::fmt(&self.0, f)
    }
}

impl Add for Counted {
    type Output = Counted;
    #[inline]
    fn add(self, rhs: Counted) -> Counted {
        Counted(self.0 + rhs.0)
    }
}

impl AddAssign for Counted {
    #[inline]
    fn add_assign(&mut self, rhs: Counted) {
        self.0 += rhs.0;
    }
}

impl Sub for Counted {
    type Output = Counted;
    #[inline]
    fn sub(self, rhs: Counted) -> Counted {
        Counted(self.0 - rhs.0)
    }
}

impl Mul for Counted {
    type Output = Counted;
    #[inline]
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn mul(self, rhs: Counted) -> Counted {
        MULTIPLIES.with(|c| c.set(c.get() + 1));
        Counted(self.0 * rhs.0)
    }
}

impl Div for Counted {
    type Output = Counted;
    #[inline]
    fn div(self, rhs: Counted) -> Counted {
        Counted(self.0 / rhs.0)
    }
}

impl Neg for Counted {
    type Output = Counted;
    #[inline]
    fn neg(self) -> Counted {
        Counted(-self.0)
    }
}

impl Element for Counted {
    const NAME: &'static str = "counted";

    fn from_f64(v: f64) -> Self {
        Counted(v)
    }
    fn to_f64(self) -> f64 {
        self.0
    }
    fn exp(self) -> Self {
        Counted(self.0.exp())
    }
    fn ln(self) -> Self {
        Counted(self.0.ln())
    }
    fn sqrt(self) -> Self {
        Counted(self.0.sqrt())
    }
    fn tanh(self) -> Self {
        Counted(self.0.tanh())
    }
    fn abs(self) -> Self {
        Counted(self.0.abs())
    }
}

/// Runs `f` and returns its result together with the number of [`Counted`]
/// multiplications it performed on this thread.
pub fn count_multiplies<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = MULTIPLIES.with(Cell::get);
    let out = f();
    let after = MULTIPLIES.with(Cell::get);
    (out, after - before)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counted_multiplies_only() {
        let ((), n) = count_multiplies(|| {
            let a = Counted(2.0);
            let b = Counted(3.0);
            let _ = a * b;
            let _ = a + b;
            let _ = a / b;
            let _ = (a * b) * a;
        });
        assert_eq!(n, 3);
    }

    #[test]
    fn storage_roundtrip_bits() {
        let mut buf = Vec::new();
        1.25f32.write_le(&mut buf);
        (-3.5f64).write_le(&mut buf);
        assert_eq!(f32::read_le(&buf[..4]), 1.25);
        assert_eq!(f64::read_le(&buf[4..]), -3.5);
    }
}
