//! Blocking probabilities, the fastest-idle-server law, blocking ratios and
//! the expected delay of an allocation.
//!
//! All quantities are arrival-epoch (Palm) probabilities:
//!
//! * `p_n`: an arrival finds servers `1..n` busy; `p_n = ℓ_1 ⋯ ℓ_n`, `p_0 = 1`.
//! * `q_n = p_{n−1} − p_n`: server `n` is the fastest idle one.
//! * `ℓ_n = L_{n−1}(μ_n)` and its lower bound `ℓ̲_n = L_{n−1}(μ − s_{n−1})`.
//! * `ρ_n = λ p_n / (μ − s_n)`: utilisation of the sub-system beyond `n`.
//!
//! The expected delay is truncated at depth `M` and completed by the tail
//! residual `r_M = p_M (1 + √ℓ_M) / (μ_M √ℓ_M)`, which assumes the servers past
//! `M` follow a geometric series with ratio `√ℓ_M`.

use std::fmt;
use std::ops::Add;

use crate::allocation::Allocation;
use crate::arrival::ArrivalModel;
use crate::error::{Error, Result};
use crate::overflow::OverflowChain;

/// A non-negative quantity that may be infinite (divergent tail).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Extended {
    Finite(f64),
    Infinite,
}

impl Extended {
    /// Wraps `x`, mapping `+∞` to [`Extended::Infinite`].
    pub fn from_f64(x: f64) -> Self {
        if x.is_finite() {
            Extended::Finite(x)
        } else {
            Extended::Infinite
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Extended::Finite(_))
    }

    /// Value as `f64`, with `f64::INFINITY` for the infinite case.
    pub fn value(self) -> f64 {
        match self {
            Extended::Finite(x) => x,
            Extended::Infinite => f64::INFINITY,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Extended::Finite(x) => Some(x),
            Extended::Infinite => None,
        }
    }
}

impl Add for Extended {
    type Output = Extended;

    fn add(self, rhs: Extended) -> Extended {
        match (self, rhs) {
            (Extended::Finite(a), Extended::Finite(b)) => Extended::from_f64(a + b),
            _ => Extended::Infinite,
        }
    }
}

impl Add<f64> for Extended {
    type Output = Extended;

    fn add(self, rhs: f64) -> Extended {
        self + Extended::from_f64(rhs)
    }
}

impl fmt::Display for Extended {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extended::Finite(x) => write!(f, "{x}"),
            Extended::Infinite => f.write_str("inf"),
        }
    }
}

/// Blocking probabilities `p_1..p_M`.
pub fn blocking_probabilities(chain: &mut OverflowChain, depth: usize) -> Result<Vec<f64>> {
    if depth > chain.rates().len() {
        return Err(Error::Level {
            requested: depth,
            available: chain.rates().len(),
        });
    }
    let mut p = Vec::with_capacity(depth);
    let mut acc = 1.0;
    for n in 1..=depth {
        acc *= chain.ell(n)?;
        p.push(acc);
    }
    Ok(p)
}

/// `q_n = p_{n−1} − p_n` for `n = 1..M`, with `p_0 = 1` implied.
pub fn fastest_idle_distribution(p: &[f64]) -> Result<Vec<f64>> {
    let mut prev = 1.0;
    let mut q = Vec::with_capacity(p.len());
    for (i, &pn) in p.iter().enumerate() {
        if !(0.0..=1.0).contains(&pn) || pn > prev {
            return Err(Error::Invariant(format!(
                "blocking probabilities must be non-increasing in [0,1]: p_{} = {prev}, p_{} = {pn}",
                i,
                i + 1
            )));
        }
        q.push(prev - pn);
        prev = pn;
    }
    Ok(q)
}

/// `(ℓ_1..ℓ_M, ℓ̲_1..ℓ̲_M)` for an allocation with total capacity `capacity`.
pub fn ell_series(chain: &mut OverflowChain, capacity: f64, depth: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut ell = Vec::with_capacity(depth);
    let mut lower = Vec::with_capacity(depth);
    let mut partial = 0.0;
    for n in 1..=depth {
        if partial >= capacity {
            return Err(Error::Capacity {
                level: n - 1,
                partial_sum: partial,
                capacity,
            });
        }
        ell.push(chain.ell(n)?);
        lower.push(chain.lst(n - 1, capacity - partial)?);
        partial += chain.rates()[n - 1];
    }
    Ok((ell, lower))
}

/// `ρ_0..ρ_M` where `ρ_n = λ p_n / (μ − s_n)`; `p` holds `p_1..p_M`.
pub fn effective_utilization(lambda: f64, allocation: &Allocation, p: &[f64]) -> Result<Vec<f64>> {
    let capacity = allocation.capacity();
    let mut rho = Vec::with_capacity(p.len() + 1);
    rho.push(lambda / capacity);
    let mut partial = 0.0;
    for (i, &pn) in p.iter().enumerate() {
        let n = i + 1;
        partial += allocation.rate(n)?;
        let remaining = capacity - partial;
        if remaining <= 0.0 {
            return Err(Error::Capacity {
                level: n,
                partial_sum: partial,
                capacity,
            });
        }
        rho.push(lambda * pn / remaining);
    }
    Ok(rho)
}

/// Tail residual `r_M = p_M (1 + √ℓ_M) / (μ_M √ℓ_M)`; infinite when `ℓ_M ≥ 1`.
pub fn residual_tail(p_m: f64, mu_m: f64, ell_m: f64) -> Result<Extended> {
    if !(mu_m > 0.0) {
        return Err(Error::Domain(format!("mu_M must be positive, got {mu_m}")));
    }
    if !(p_m >= 0.0) || ell_m.is_nan() || ell_m < 0.0 {
        return Err(Error::Domain(format!(
            "invalid residual inputs p_M = {p_m}, ell_M = {ell_m}"
        )));
    }
    if ell_m >= 1.0 {
        return Ok(Extended::Infinite);
    }
    if p_m == 0.0 {
        return Ok(Extended::Finite(0.0));
    }
    let root = ell_m.sqrt();
    Ok(Extended::from_f64(p_m * (1.0 + root) / (mu_m * root)))
}

/// Truncated delay, tail residual and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayBreakdown {
    pub truncated: f64,
    pub residual: Extended,
    pub total: Extended,
}

/// `Σ_{n≤M} q_n/μ_n + r_M`.
pub fn expected_delay(chain: &mut OverflowChain, allocation: &Allocation, depth: usize) -> Result<DelayBreakdown> {
    if depth == 0 {
        return Err(Error::Domain("delay needs at least one server".into()));
    }
    let used = allocation.partial_sum(depth)?;
    if used > allocation.capacity() * (1.0 + 1e-12) {
        return Err(Error::Capacity {
            level: depth,
            partial_sum: used,
            capacity: allocation.capacity(),
        });
    }
    let p = blocking_probabilities(chain, depth)?;
    let q = fastest_idle_distribution(&p)?;
    let rates = chain.rates();
    let truncated: f64 = q.iter().zip(rates).map(|(q, mu)| q / mu).sum();
    let ell_m = chain.ell(depth)?;
    let residual = residual_tail(p[depth - 1], chain.rates()[depth - 1], ell_m)?;
    Ok(DelayBreakdown {
        truncated,
        residual,
        total: residual + truncated,
    })
}

/// Every per-level quantity of an allocation up to depth `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMetrics {
    /// Rates `μ_1..μ_M`.
    pub rates: Vec<f64>,
    /// `p_0..p_M` with `p_0 = 1`.
    pub p: Vec<f64>,
    /// `q_1..q_M`.
    pub q: Vec<f64>,
    /// `ℓ_1..ℓ_M`.
    pub ell: Vec<f64>,
    /// `ℓ̲_1..ℓ̲_M`.
    pub ell_lower: Vec<f64>,
    /// `ρ_0..ρ_M`.
    pub rho_eff: Vec<f64>,
    pub delay_truncated: f64,
    pub residual: Extended,
    pub delay_total: Extended,
}

impl SystemMetrics {
    pub fn compute(model: ArrivalModel, allocation: &Allocation, depth: usize) -> Result<Self> {
        let mut chain = OverflowChain::from_allocation(model, allocation, depth)?;
        Self::from_chain(&mut chain, allocation, depth)
    }

    pub fn from_chain(chain: &mut OverflowChain, allocation: &Allocation, depth: usize) -> Result<Self> {
        let p_tail = blocking_probabilities(chain, depth)?;
        let q = fastest_idle_distribution(&p_tail)?;
        let (ell, ell_lower) = ell_series(chain, allocation.capacity(), depth)?;
        let rho_eff = effective_utilization(chain.model().rate(), allocation, &p_tail)?;
        let delay = expected_delay(chain, allocation, depth)?;
        let mut p = Vec::with_capacity(depth + 1);
        p.push(1.0);
        p.extend_from_slice(&p_tail);
        Ok(SystemMetrics {
            rates: chain.rates()[..depth].to_vec(),
            p,
            q,
            ell,
            ell_lower,
            rho_eff,
            delay_truncated: delay.truncated,
            residual: delay.residual,
            delay_total: delay.total,
        })
    }

    pub fn depth(&self) -> usize {
        self.q.len()
    }

    /// `P(server n busy | arrival reaches server n)`, which equals `ℓ_n`.
    pub fn conditional_busy_probability(&self, n: usize) -> Option<f64> {
        n.checked_sub(1).and_then(|i| self.ell.get(i).copied())
    }

    /// `ℓ_M`, the running estimate of the limiting blocking ratio.
    pub fn ell_estimate(&self) -> Option<f64> {
        self.ell.last().copied()
    }

    /// `(ℓ_M − ℓ̲_M) / ℓ_M`.
    pub fn lower_bound_gap(&self) -> Option<f64> {
        match (self.ell.last(), self.ell_lower.last()) {
            (Some(&l), Some(&lo)) => Some((l - lo) / l),
            _ => None,
        }
    }
}
