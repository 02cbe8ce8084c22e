//! IEEE 754 binary16 rounding emulation.
//!
//! Values stay in `f32`/`f64` storage but are snapped to the nearest
//! half-precision value (ties to even), including subnormals.

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Largest finite half-precision value.
pub const F16_MAX: f64 = 65504.0;
/// Magnitudes at or above this round to infinity (the tie at 65520 goes to the even 2^16).
const F16_OVERFLOW: f64 = 65520.0;
const F16_MIN_NORMAL: f64 = 6.103_515_625e-5; // 2^-14
const F16_SUBNORMAL_QUANTUM_EXP: i32 = -24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Full,
    MixedEmulated,
}

fn pow2(e: i32) -> f64 {
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// Rounds to the nearest binary16 value; overflow gives ±infinity.
pub fn fp16_round_f64(x: f64) -> f64 {
    if x.is_nan() || x.is_infinite() || x == 0.0 {
        return x;
    }
    let a = x.abs();
    let r = if a >= F16_OVERFLOW {
        f64::INFINITY
    } else {
        let quantum_exp = if a < F16_MIN_NORMAL {
            F16_SUBNORMAL_QUANTUM_EXP
        } else {
            let e = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
            e - 10
        };
        // scaling by powers of two is exact here
        (a * pow2(-quantum_exp)).round_ties_even() * pow2(quantum_exp)
    };
    r.copysign(x)
}

pub fn fp16_round<T: Scalar>(x: T) -> T {
    T::from_f64_lossy(fp16_round_f64(x.to_f64_exact()))
}

/// Like [`fp16_round`] but clamps overflow to the largest finite half value.
pub fn fp16_round_saturating<T: Scalar>(x: T) -> T {
    let r = fp16_round_f64(x.to_f64_exact());
    let r = if r.is_infinite() && x.is_finite() {
        F16_MAX.copysign(r)
    } else {
        r
    };
    T::from_f64_lossy(r)
}

pub fn fp16_round_slice<T: Scalar>(xs: &mut [T]) {
    for x in xs {
        *x = fp16_round(*x);
    }
}

pub fn fp16_round_matrix<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    m.map(fp16_round)
}

/// Static loss scaling that halves itself when a step overflows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossScaler {
    pub scale: f64,
    pub skipped_steps: u64,
}

impl Default for LossScaler {
    fn default() -> Self {
        Self::new(1024.0)
    }
}

impl LossScaler {
    pub fn new(scale: f64) -> Self {
        Self {
            scale,
            skipped_steps: 0,
        }
    }

    /// Records an overflowing step: the step is skipped and the scale halved.
    pub fn on_overflow(&mut self) {
        self.skipped_steps += 1;
        self.scale = (self.scale / 2.0).max(1.0);
    }
}
