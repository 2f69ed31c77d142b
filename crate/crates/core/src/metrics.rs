//! Exact flexibility ratios.

use num_rational::Ratio;
use serde::Serialize;
use std::fmt;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("metric undefined for {0} operators (need at least 2)")]
pub struct UndefinedMetric(pub usize);

/// A ratio of operator pairs, kept exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PairRatio(pub Ratio<u64>);

impl PairRatio {
    /// `count` pairs out of all unordered pairs of `n` operators.
    pub fn of_pairs(count: u64, n: usize) -> Result<Self, UndefinedMetric> {
        if n < 2 {
            return Err(UndefinedMetric(n));
        }
        let n = n as u64;
        Ok(PairRatio(Ratio::new(count, n * (n - 1) / 2)))
    }

    pub fn num(&self) -> u64 {
        *self.0.numer()
    }

    pub fn den(&self) -> u64 {
        *self.0.denom()
    }

    pub fn value(&self) -> f64 {
        self.num() as f64 / self.den() as f64
    }
}

impl fmt::Display for PairRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} ({:.4})", self.num(), self.den(), self.value())
    }
}

impl Serialize for PairRatio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("PairRatio", 3)?;
        st.serialize_field("num", &self.num())?;
        st.serialize_field("den", &self.den())?;
        st.serialize_field("value", &self.value())?;
        st.end()
    }
}
