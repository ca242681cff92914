//! Floating-point scalar abstraction shared by the analytic models.
//!
//! The timing, attribution and power models are written once against
//! [`Scalar`] and instantiated for `f32` and `f64`. The event simulator itself
//! always runs on `f64` virtual time.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A real scalar usable by the analytic models: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Smallest representable value strictly greater than `self`.
    fn next_up(self) -> Self;
    /// Largest representable value strictly smaller than `self`.
    fn next_down(self) -> Self;

    /// Lossless-enough conversion from a count.
    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("count representable as float")
    }

    /// Conversion from an f64 literal or config value.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            fn next_up(self) -> Self {
                if self.is_nan() || self == <$t>::INFINITY {
                    return self;
                }
                if self == 0.0 {
                    return <$t>::from_bits(1);
                }
                let bits = self.to_bits();
                if self > 0.0 {
                    <$t>::from_bits(bits + 1)
                } else {
                    <$t>::from_bits(bits - 1)
                }
            }

            fn next_down(self) -> Self {
                -(-self).next_up()
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Returns the addend `s >= 0` with `base + s == target` exactly, if one
/// exists.
///
/// Requires `0 <= base <= target`. When `base` sits on a finer grid than
/// `target`, round-half-to-even can make some targets unreachable.
pub fn exact_complement<T: Scalar>(base: T, target: T) -> Option<T> {
    debug_assert!(base >= T::zero() && target >= base);
    if base == target {
        return Some(T::zero());
    }
    let mut addend = target - base;
    for _ in 0..64 {
        let sum = base + addend;
        if sum == target {
            return Some(addend);
        }
        addend = if sum < target {
            addend.next_up()
        } else {
            let down = addend.next_down();
            if down < T::zero() {
                return None;
            }
            down
        };
    }
    None
}

/// Splits `cumulative.last()` into non-negative parts whose left-to-right
/// sum equals it exactly.
///
/// `cumulative` must be nondecreasing and non-negative; the running sum of
/// the first `i + 1` parts lands within a few ulps of `cumulative[i]`.
pub fn exact_partition<T: Scalar>(cumulative: &[T]) -> Vec<T> {
    let n = cumulative.len();
    if n == 0 {
        return Vec::new();
    }
    let total = cumulative[n - 1];
    let mut parts = Vec::with_capacity(n);
    let mut sums = Vec::with_capacity(n);
    let mut acc = T::zero();
    for &t in &cumulative[..n - 1] {
        let t = t.max(acc).min(total);
        let s = exact_complement(acc, t).unwrap_or_else(|| (t - acc).max(T::zero()));
        parts.push(s);
        acc = acc + s;
        sums.push(acc);
    }
    if let Some(last) = exact_complement(acc, total) {
        parts.push(last);
        return parts;
    }
    // The last running sum cannot reach the total: move it a few ulps by
    // adjusting the part before it.
    let before = if n >= 3 { sums[n - 3] } else { T::zero() };
    let mut lo = acc;
    let mut hi = acc;
    for _ in 0..16 {
        lo = lo.next_down().max(before);
        hi = hi.next_up().min(total);
        for candidate in [lo, hi] {
            if let (Some(prev), Some(last)) = (exact_complement(before, candidate), exact_complement(candidate, total)) {
                parts[n - 2] = prev;
                parts.push(last);
                return parts;
            }
        }
    }
    unreachable!("no exact partition found near {acc:?} for total {total:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn next_up_and_down_are_adjacent() {
        assert!(1.0f64.next_up() > 1.0);
        assert_eq!(1.0f64.next_up().next_down(), 1.0);
        assert_eq!(0.0f32.next_up(), f32::from_bits(1));
        assert!((-1.0f64).next_up() > -1.0);
    }

    #[test]
    fn complement_of_representable_difference() {
        assert_eq!(exact_complement(10.0f64, 30.5), Some(20.5));
        assert_eq!(exact_complement(3.0f64, 3.0), Some(0.0));
    }

    #[test]
    fn complement_can_be_unreachable() {
        // The exact sum always falls on a tie that rounds to the even neighbor.
        assert_eq!(exact_complement(320346.8877247832f64, 884364.0369441606), None);
    }

    #[test]
    fn partition_recovers_from_unreachable_total() {
        let parts = exact_partition(&[320346.8877247832f64, 884364.0369441606]);
        assert_eq!(parts[0] + parts[1], 884364.0369441606);
        assert!(parts.iter().all(|&p| p >= 0.0));
    }

    fn sorted(mut v: Vec<f64>) -> Vec<f64> {
        v.sort_by(f64::total_cmp);
        v
    }

    proptest! {
        #[test]
        fn complement_is_exact_when_found(a in 0.0f64..1e6, b in 0.0f64..1e6) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            if let Some(s) = exact_complement(lo, hi) {
                prop_assert!(s >= 0.0);
                prop_assert_eq!(lo + s, hi);
            }
        }

        #[test]
        fn partition_sums_exactly_f64(levels in proptest::collection::vec(0.0f64..1e6, 1..8)) {
            let cumulative = sorted(levels);
            let parts = exact_partition(&cumulative);
            prop_assert_eq!(parts.len(), cumulative.len());
            prop_assert!(parts.iter().all(|&p| p >= 0.0));
            prop_assert_eq!(parts.iter().fold(0.0, |a, &p| a + p), *cumulative.last().unwrap());
        }

        #[test]
        fn partition_sums_exactly_f32(levels in proptest::collection::vec(0.0f32..1e7, 1..8)) {
            let mut cumulative = levels;
            cumulative.sort_by(f32::total_cmp);
            let parts = exact_partition(&cumulative);
            prop_assert!(parts.iter().all(|&p| p >= 0.0));
            prop_assert_eq!(parts.iter().fold(0.0f32, |a, &p| a + p), *cumulative.last().unwrap());
        }
    }
}
