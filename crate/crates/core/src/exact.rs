//! Order-independent exact summation of `f64` values.
//!
//! Every finite `f64` is an integer multiple of 2^-1074, so a wide enough
//! fixed-point register holds any sum of them without rounding. Addition into
//! the register is associative and commutative, which makes cross-shard
//! reductions bitwise identical regardless of how the classes are split or in
//! what order partial results arrive. The value is rounded to the nearest
//! `f64` (ties to even) only when read out.

use crate::scalar::Scalar;

const LIMB_BITS: u32 = 32;
// Positions 0..=2098 cover every finite f64 (bit 0 is 2^-1074); two spare
// limbs absorb carries from up to 2^31 maximal addends.
const LIMBS: usize = 68;
const NORMALIZE_EVERY: u32 = 1 << 30;
const MIN_POSITIVE_SUBNORMAL_EXP: i32 = -1074;

/// Exact accumulator for a sum of `f64` values.
#[derive(Clone, PartialEq, Eq)]
pub struct ExactSum {
    limbs: [i64; LIMBS],
    pending: u32,
    nan: bool,
    pos_inf: bool,
    neg_inf: bool,
}

impl Default for ExactSum {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for ExactSum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("ExactSum").field(&self.value()).finish()
    }
}

impl ExactSum {
    pub fn new() -> Self {
        Self {
            limbs: [0; LIMBS],
            pending: 0,
            nan: false,
            pos_inf: false,
            neg_inf: false,
        }
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let bits = x.to_bits();
        let biased = ((bits >> 52) & 0x7ff) as u32;
        let frac = bits & ((1u64 << 52) - 1);
        if biased == 0x7ff {
            if frac != 0 {
                self.nan = true;
            } else if x > 0.0 {
                self.pos_inf = true;
            } else {
                self.neg_inf = true;
            }
            return;
        }
        let (mant, pos) = if biased == 0 {
            (frac, 0u32)
        } else {
            (frac | (1u64 << 52), biased - 1)
        };
        if mant == 0 {
            return;
        }
        let idx = (pos / LIMB_BITS) as usize;
        let wide = (mant as u128) << (pos % LIMB_BITS);
        let mask = (1u64 << LIMB_BITS) - 1;
        // sign is 0 or -1: (p ^ sign) - sign negates p when x is negative
        let sign = (bits as i64) >> 63;
        let limbs = &mut self.limbs[idx..idx + 3];
        limbs[0] += (((wide as u64) & mask) as i64 ^ sign) - sign;
        limbs[1] += ((((wide >> LIMB_BITS) as u64) & mask) as i64 ^ sign) - sign;
        limbs[2] += (((wide >> (2 * LIMB_BITS)) as u64 as i64) ^ sign) - sign;
        self.pending += 1;
        if self.pending >= NORMALIZE_EVERY {
            self.normalize();
        }
    }

    pub fn add_scalar<T: Scalar>(&mut self, x: T) {
        self.add(x.to_f64_exact());
    }

    /// Folds another partial sum into this one.
    pub fn merge(&mut self, other: &ExactSum) {
        let mut other = other.clone();
        other.normalize();
        self.normalize();
        for (a, b) in self.limbs.iter_mut().zip(other.limbs.iter()) {
            *a += b;
        }
        self.pending = 2;
        self.nan |= other.nan;
        self.pos_inf |= other.pos_inf;
        self.neg_inf |= other.neg_inf;
    }

    fn normalize(&mut self) {
        for i in 0..LIMBS - 1 {
            let carry = self.limbs[i] >> LIMB_BITS;
            self.limbs[i] -= carry << LIMB_BITS;
            self.limbs[i + 1] += carry;
        }
        self.pending = 0;
    }

    /// Correctly rounded value of the exact sum.
    pub fn value(&self) -> f64 {
        if self.nan || (self.pos_inf && self.neg_inf) {
            return f64::NAN;
        }
        if self.pos_inf {
            return f64::INFINITY;
        }
        if self.neg_inf {
            return f64::NEG_INFINITY;
        }
        let mut limbs = self.limbs;
        normalize_limbs(&mut limbs);
        let negative = limbs[LIMBS - 1] < 0;
        if negative {
            for l in limbs.iter_mut() {
                *l = -*l;
            }
            normalize_limbs(&mut limbs);
        }
        let magnitude = round_to_f64(&limbs);
        if negative {
            -magnitude
        } else {
            magnitude
        }
    }

    pub fn to_scalar<T: Scalar>(&self) -> T {
        T::from_f64_lossy(self.value())
    }
}

fn normalize_limbs(limbs: &mut [i64; LIMBS]) {
    for i in 0..LIMBS - 1 {
        let carry = limbs[i] >> LIMB_BITS;
        limbs[i] -= carry << LIMB_BITS;
        limbs[i + 1] += carry;
    }
}

#[inline]
fn bit(limbs: &[i64; LIMBS], p: u32) -> bool {
    (limbs[(p / LIMB_BITS) as usize] >> (p % LIMB_BITS)) & 1 == 1
}

fn any_below(limbs: &[i64; LIMBS], p: u32) -> bool {
    let whole = (p / LIMB_BITS) as usize;
    if limbs[..whole].iter().any(|&l| l != 0) {
        return true;
    }
    let rem = p % LIMB_BITS;
    rem > 0 && (limbs[whole] & ((1i64 << rem) - 1)) != 0
}

fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

// `limbs` is normalized and non-negative.
fn round_to_f64(limbs: &[i64; LIMBS]) -> f64 {
    let Some(top_limb) = (0..LIMBS).rev().find(|&i| limbs[i] != 0) else {
        return 0.0;
    };
    let top = top_limb as u32 * LIMB_BITS + (63 - limbs[top_limb].leading_zeros());
    if top >= 2098 {
        return f64::INFINITY;
    }
    let low = top.saturating_sub(52);
    let mut mant: u64 = 0;
    for p in (low..=top).rev() {
        mant = (mant << 1) | bit(limbs, p) as u64;
    }
    if low > 0 {
        let round = bit(limbs, low - 1);
        let sticky = any_below(limbs, low - 1);
        if round && (sticky || mant & 1 == 1) {
            mant += 1;
        }
    }
    let e = low as i32 + MIN_POSITIVE_SUBNORMAL_EXP;
    let m = mant as f64;
    // a product reaching 2^1024 overflows to infinity, which is the correct rounding
    if e >= -1022 {
        m * pow2(e)
    } else {
        m * pow2(e + 52) * pow2(-52)
    }
}

/// Exact sum of a sequence, rounded once.
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = ExactSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cancellation_is_exact() {
        assert_eq!(exact_sum([1e100, 1.0, -1e100]), 1.0);
        // 0.1 + 0.2 - 0.3 over the binary values is exactly 2^-55
        assert_eq!(exact_sum([0.1, 0.2, -0.3]), 2f64.powi(-55));
    }

    #[test]
    fn subnormals_and_extremes() {
        let tiny = f64::from_bits(1);
        assert_eq!(exact_sum([tiny, tiny, tiny]), 3.0 * tiny);
        assert_eq!(exact_sum([f64::MAX, -f64::MAX, tiny]), tiny);
        assert_eq!(exact_sum([f64::MAX, f64::MAX]), f64::INFINITY);
        assert_eq!(exact_sum([-f64::MAX, -f64::MAX]), f64::NEG_INFINITY);
        assert_eq!(exact_sum([f64::MIN_POSITIVE, -tiny]), f64::MIN_POSITIVE - tiny);
        assert!(exact_sum([f64::INFINITY, f64::NEG_INFINITY]).is_nan());
        assert_eq!(exact_sum([]), 0.0);
    }

    #[test]
    fn ties_round_to_even() {
        // 2^53 + 1 is a tie between 2^53 and 2^53 + 2
        assert_eq!(exact_sum([2f64.powi(53), 1.0]), 2f64.powi(53));
        // 2^53 + 3 is a tie between 2^53 + 2 and 2^53 + 4
        assert_eq!(exact_sum([2f64.powi(53), 3.0]), 2f64.powi(53) + 4.0);
        // just above the tie rounds up
        assert_eq!(
            exact_sum([2f64.powi(53), 1.0, 2f64.powi(-20)]),
            2f64.powi(53) + 2.0
        );
    }

    #[test]
    fn merge_matches_single_accumulator() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1000) as f64 * 1.1e-3 - 0.5).collect();
        let whole = exact_sum(xs.iter().copied());
        let mut a = ExactSum::new();
        let mut b = ExactSum::new();
        for (i, &x) in xs.iter().enumerate() {
            if i % 3 == 0 { a.add(x) } else { b.add(x) }
        }
        b.merge(&a);
        assert_eq!(b.value(), whole);
    }

    proptest! {
        #[test]
        fn order_independent(mut xs in proptest::collection::vec(-1e6f64..1e6, 0..64), seed in any::<u64>()) {
            let a = exact_sum(xs.iter().copied());
            let n = xs.len();
            if n > 1 {
                let mut s = seed;
                for i in (1..n).rev() {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    xs.swap(i, (s >> 33) as usize % (i + 1));
                }
            }
            prop_assert_eq!(a.to_bits(), exact_sum(xs.iter().copied()).to_bits());
        }

        #[test]
        fn two_terms_match_ieee(a in any::<f64>(), b in any::<f64>()) {
            prop_assume!(a.is_finite() && b.is_finite() && (a + b).is_finite());
            // a single IEEE addition is correctly rounded, so it must agree
            let s = exact_sum([a, b]);
            prop_assert!(s == a + b, "{} + {} -> {} vs {}", a, b, s, a + b);
        }
    }
}
