//! Natural-log weights for the log and tropical semirings.

use std::fmt;
use std::ops::{Add, AddAssign};

/// A natural-log probability-like score. `-inf` is the additive identity
/// (probability zero); `0.0` is the multiplicative identity (probability
/// one). Semiring plus is [`log_add`]; semiring times is ordinary `+`.
#[derive(Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct LogWeight(f64);

impl LogWeight {
    /// Additive identity: probability zero.
    pub const ZERO: LogWeight = LogWeight(f64::NEG_INFINITY);
    /// Multiplicative identity: probability one.
    pub const ONE: LogWeight = LogWeight(0.0);

    #[inline]
    pub const fn new(value: f64) -> Self {
        LogWeight(value)
    }

    #[inline]
    pub const fn value(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn from_prob(p: f64) -> Self {
        LogWeight(p.ln())
    }

    #[inline]
    pub fn to_prob(self) -> f64 {
        self.0.exp()
    }

    #[inline]
    pub fn is_zero(self) -> bool {
        self.0 == f64::NEG_INFINITY
    }

    /// Log-domain sum: `ln(e^self + e^other)`.
    #[inline]
    pub fn log_add(self, other: Self) -> Self {
        LogWeight(log_add(self.0, other.0))
    }
}

/// `ln(e^a + e^b)`, stable for large `|a - b|`. `-inf` acts as the
/// additive identity.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    let d = lo - hi;
    // exp(d) underflows to 0 below ~-745, where ln_1p returns exactly 0.
    hi + d.exp().ln_1p()
}

impl Add for LogWeight {
    type Output = LogWeight;
    #[inline]
    fn add(self, rhs: LogWeight) -> LogWeight {
        LogWeight(self.0 + rhs.0)
    }
}

impl AddAssign for LogWeight {
    #[inline]
    fn add_assign(&mut self, rhs: LogWeight) {
        self.0 += rhs.0;
    }
}

impl fmt::Debug for LogWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LogWeight({})", self.0)
    }
}

impl fmt::Display for LogWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
