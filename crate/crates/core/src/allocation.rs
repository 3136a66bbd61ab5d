//! Service-rate series under a total capacity budget.

use crate::error::{Error, Result};

/// Relative slack tolerated when checking the capacity budget.
const CAPACITY_SLACK: f64 = 1e-12;

/// A service-rate series: an explicit prefix `μ_1..μ_M` and, optionally, a
/// geometric tail `μ_n = μ_M · r^(n-M)` for `n > M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    capacity: f64,
    prefix: Vec<f64>,
    tail_ratio: Option<f64>,
}

impl Allocation {
    /// Finite prefix without a tail. Rates must be positive, non-increasing
    /// and sum to at most `capacity`.
    pub fn new(capacity: f64, prefix: Vec<f64>) -> Result<Self> {
        Self::build(capacity, prefix, None, true)
    }

    /// Prefix followed by a geometric tail with decay ratio `ratio ∈ (0,1)`.
    pub fn with_geometric_tail(capacity: f64, prefix: Vec<f64>, ratio: f64) -> Result<Self> {
        Self::build(capacity, prefix, Some(ratio), true)
    }

    /// Like [`new`](Self::new) but accepts out-of-order rates. Only meant for
    /// diagnostics such as interchange experiments.
    pub fn new_unordered(capacity: f64, prefix: Vec<f64>) -> Result<Self> {
        Self::build(capacity, prefix, None, false)
    }

    fn build(
        capacity: f64,
        prefix: Vec<f64>,
        tail_ratio: Option<f64>,
        require_order: bool,
    ) -> Result<Self> {
        if !(capacity.is_finite() && capacity > 0.0) {
            return Err(Error::InvalidAllocation(format!(
                "total capacity must be positive, got {capacity}"
            )));
        }
        if let Some((i, &m)) = prefix
            .iter()
            .enumerate()
            .find(|(_, m)| !(m.is_finite() && **m > 0.0))
        {
            return Err(Error::InvalidAllocation(format!(
                "rate mu_{} = {m} is not strictly positive",
                i + 1
            )));
        }
        if require_order {
            if let Some(i) = prefix.windows(2).position(|w| w[1] > w[0]) {
                return Err(Error::InvalidAllocation(format!(
                    "rates must be non-increasing: mu_{} = {} < mu_{} = {}",
                    i + 1,
                    prefix[i],
                    i + 2,
                    prefix[i + 1]
                )));
            }
        }
        let mut used: f64 = prefix.iter().sum();
        if let Some(r) = tail_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::InvalidAllocation(format!(
                    "tail ratio must lie in (0,1), got {r}"
                )));
            }
            let last = *prefix.last().ok_or_else(|| {
                Error::InvalidAllocation("a geometric tail needs a non-empty prefix".into())
            })?;
            used += last * r / (1.0 - r);
        }
        if used > capacity * (1.0 + CAPACITY_SLACK) {
            return Err(Error::InvalidAllocation(format!(
                "rates use {used} which exceeds the capacity {capacity}"
            )));
        }
        Ok(Allocation {
            capacity,
            prefix,
            tail_ratio,
        })
    }

    /// Total capacity `μ`.
    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn prefix(&self) -> &[f64] {
        &self.prefix
    }

    pub fn tail_ratio(&self) -> Option<f64> {
        self.tail_ratio
    }

    /// Number of rates available, `None` when a tail makes it unbounded.
    pub fn depth(&self) -> Option<usize> {
        match self.tail_ratio {
            Some(_) => None,
            None => Some(self.prefix.len()),
        }
    }

    /// Rate of server `n` (1-based), extending the geometric tail if needed.
    pub fn rate(&self, n: usize) -> Result<f64> {
        if n == 0 {
            return Err(Error::Domain("servers are numbered from 1".into()));
        }
        if n <= self.prefix.len() {
            return Ok(self.prefix[n - 1]);
        }
        match self.tail_ratio {
            Some(r) => {
                let last = self.prefix[self.prefix.len() - 1];
                Ok(last * r.powi((n - self.prefix.len()) as i32))
            }
            None => Err(Error::Level {
                requested: n,
                available: self.prefix.len(),
            }),
        }
    }

    /// The first `m` rates.
    pub fn rates(&self, m: usize) -> Result<Vec<f64>> {
        (1..=m).map(|n| self.rate(n)).collect()
    }

    /// `s_n = μ_1 + … + μ_n`.
    pub fn partial_sum(&self, n: usize) -> Result<f64> {
        let mut s = 0.0;
        for i in 1..=n {
            s += self.rate(i)?;
        }
        Ok(s)
    }

    /// Capacity left for servers beyond `n`, `μ − s_n`.
    pub fn remaining_capacity(&self, n: usize) -> Result<f64> {
        Ok(self.capacity - self.partial_sum(n)?)
    }

    pub fn is_non_increasing(&self) -> bool {
        self.prefix.windows(2).all(|w| w[1] <= w[0])
    }

    /// Capacity consumed by the prefix and, if present, the tail.
    pub fn allocated(&self) -> f64 {
        let s: f64 = self.prefix.iter().sum();
        match (self.tail_ratio, self.prefix.last()) {
            (Some(r), Some(&last)) => s + last * r / (1.0 - r),
            _ => s,
        }
    }
}
