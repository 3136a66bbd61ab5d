//! Feasibility of an allocation and finite-delay diagnostics.
//!
//! An allocation is feasible when, for every `n`, the overflow rate past the
//! first `n` servers is below the capacity left for them:
//! `λ p_n < μ − s_n`. Finite expected delay additionally needs the blocking
//! ratio limit `ℓ < 1` and rates that decay slower than `ℓ^n`; only finite
//! prefixes are ever computed, so the verdicts here are heuristics.

use crate::allocation::Allocation;
use crate::arrival::ArrivalModel;
use crate::error::{Error, Result};
use crate::overflow::OverflowChain;
use crate::search::bisect;

const ROOT_TOL: f64 = 1e-15;
const ROOT_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Feasible,
    /// First level whose margin is non-negative.
    Infeasible(usize),
    /// No violation up to the depth that could be evaluated, but the
    /// requested depth was not reached.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    /// Deepest level up to which every margin is negative.
    pub feasible_up_to: usize,
    /// `λ p_n − (μ − s_n)` for `n = 1..N`; negative means feasible.
    pub margins: Vec<f64>,
    /// `ℓ_N`.
    pub ell_estimate: f64,
    /// `μ_n / ℓ_N^n` for `n = 1..N`.
    pub decay_comparison: Vec<f64>,
    pub verdict: Verdict,
}

/// Checks `λ p_n < μ − s_n` for `n = 1..depth`.
///
/// The chain must be built over the same rates as `allocation`; levels the
/// chain cannot reach make the verdict [`Verdict::Inconclusive`].
pub fn is_feasible(chain: &mut OverflowChain, allocation: &Allocation, depth: usize) -> Result<StabilityReport> {
    let lambda = chain.model().rate();
    let capacity = allocation.capacity();
    let reachable = depth.min(chain.depth());
    let mut margins = Vec::with_capacity(reachable);
    let mut p = 1.0;
    let mut partial = 0.0;
    let mut ell = f64::NAN;
    let mut first_violation = None;
    for n in 1..=reachable {
        ell = chain.ell(n)?;
        p *= ell;
        partial += chain.rates()[n - 1];
        let margin = lambda * p - (capacity - partial);
        if margin >= 0.0 && first_violation.is_none() {
            first_violation = Some(n);
        }
        margins.push(margin);
    }
    let decay_comparison = chain.rates()[..reachable]
        .iter()
        .enumerate()
        .map(|(i, mu)| mu / ell.powi(i as i32 + 1))
        .collect();
    let (verdict, feasible_up_to) = match first_violation {
        Some(n) => (Verdict::Infeasible(n), n - 1),
        None if reachable < depth => (Verdict::Inconclusive, reachable),
        None => (Verdict::Feasible, reachable),
    };
    Ok(StabilityReport {
        feasible_up_to,
        margins,
        ell_estimate: ell,
        decay_comparison,
        verdict,
    })
}

/// Convenience wrapper building the chain from the allocation.
pub fn check_allocation(model: ArrivalModel, allocation: &Allocation, depth: usize) -> Result<StabilityReport> {
    let levels = allocation.depth().map_or(depth, |d| d.min(depth));
    let mut chain = OverflowChain::from_allocation(model, allocation, levels)?.with_max_level(depth.max(1));
    is_feasible(&mut chain, allocation, depth)
}

/// Largest feasible first rate: the root of `x = μ − λ L_0(x)` on `(0, μ)`.
pub fn max_first_rate(model: &ArrivalModel, capacity: f64) -> Result<f64> {
    let lambda = model.rate();
    if !(lambda < capacity) {
        return Err(Error::NoRoot(format!(
            "arrival rate {lambda} is not below the capacity {capacity}"
        )));
    }
    bisect(
        |x| Ok(x - capacity + lambda * model.lst_unchecked(x)),
        0.0,
        capacity,
        ROOT_TOL,
        ROOT_MAX_ITER,
    )
}

/// Output of [`feasible_construction`].
#[derive(Debug, Clone, PartialEq)]
pub struct Construction {
    pub allocation: Allocation,
    /// Upper feasibility bounds `m_1..m_N` found at each step.
    pub roots: Vec<f64>,
}

/// Builds a non-increasing, feasible prefix of length `depth` by taking
/// `μ_{n+1} = α · min(m_{n+1}, μ_n)`, where `m_{n+1}` solves
/// `x = μ − s_n − λ p_n L_n(x)`.
pub fn feasible_construction(model: ArrivalModel, capacity: f64, alpha: f64, depth: usize) -> Result<Construction> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0,1), got {alpha}")));
    }
    let lambda = model.rate();
    if !(lambda < capacity) {
        return Err(Error::NoRoot(format!(
            "arrival rate {lambda} is not below the capacity {capacity}"
        )));
    }
    let mut chain = OverflowChain::new(model, Vec::with_capacity(depth))?.with_max_level(depth.max(1));
    let mut roots = Vec::with_capacity(depth);
    let mut p = 1.0;
    let mut partial = 0.0;
    let mut previous = f64::INFINITY;
    for n in 0..depth {
        let remaining = capacity - partial;
        let overflow = lambda * p;
        let root = bisect(
            |x| Ok(x - remaining + overflow * chain.lst(n, x)?),
            0.0,
            remaining,
            ROOT_TOL,
            ROOT_MAX_ITER,
        )
        .map_err(|e| {
            Error::NoRoot(format!(
                "construction step {}: remaining {remaining}, overflow rate {overflow}: {e}",
                n + 1
            ))
        })?;
        let rate = alpha * root.min(previous);
        chain.push_rate(rate)?;
        p *= chain.ell(n + 1)?;
        partial += rate;
        previous = rate;
        roots.push(root);
    }
    let allocation = Allocation::new(capacity, chain.rates().to_vec())?;
    Ok(Construction { allocation, roots })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdVerdict {
    Plausible,
    Implausible,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDelayReport {
    /// `ℓ_M`, standing in for the limit `ℓ`.
    pub ell_estimate: f64,
    /// Decay ratio of the rate tail (declared tail, else `μ_M / μ_{M−1}`).
    pub tail_ratio: Option<f64>,
    /// Partial sums of `ℓ_M^n / μ_n`: `M` explicit terms followed by
    /// terms of the modelled geometric tail.
    pub partial_sums: Vec<f64>,
    /// Heuristic label: the underlying conditions concern limits.
    pub verdict: FdVerdict,
}

/// Number of modelled tail terms appended to the partial sums.
const TAIL_TERMS: usize = 50;

/// Compares the decay of the rates with `ℓ_M^n`.
pub fn finite_delay_diagnostics(chain: &mut OverflowChain, allocation: &Allocation, depth: usize) -> Result<FiniteDelayReport> {
    if depth == 0 {
        return Err(Error::Domain("diagnostics need at least one level".into()));
    }
    let ell = chain.ell(depth)?;
    let rates = &chain.rates()[..depth];
    let tail_ratio = allocation
        .tail_ratio()
        .or_else(|| (depth >= 2).then(|| rates[depth - 1] / rates[depth - 2]));
    let mut partial_sums = Vec::with_capacity(depth + TAIL_TERMS);
    let mut acc = 0.0;
    let mut power = 1.0;
    for &mu in rates {
        power *= ell;
        acc += power / mu;
        partial_sums.push(acc);
    }
    if let Some(r) = tail_ratio {
        let mut mu = rates[depth - 1];
        for _ in 0..TAIL_TERMS {
            mu *= r;
            power *= ell;
            acc += power / mu;
            partial_sums.push(acc);
        }
    }
    let verdict = match tail_ratio {
        _ if ell >= 1.0 => FdVerdict::Implausible,
        Some(r) if r > ell * (1.0 + 1e-9) => FdVerdict::Plausible,
        Some(r) if r < ell * (1.0 - 1e-9) => FdVerdict::Implausible,
        _ => FdVerdict::Inconclusive,
    };
    Ok(FiniteDelayReport {
        ell_estimate: ell,
        tail_ratio,
        partial_sums,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn poisson(lam: f64) -> ArrivalModel {
        ArrivalModel::poisson(lam).unwrap()
    }

    /// Upper end of the feasible first-rate interval for Poisson arrivals.
    fn poisson_m1(lam: f64, mu: f64) -> f64 {
        0.5 * (mu - lam + ((mu - lam) * (mu + 3.0 * lam)).sqrt())
    }

    #[test]
    fn max_first_rate_poisson_closed_form() {
        let m1 = max_first_rate(&poisson(0.2), 1.0).unwrap();
        assert_relative_eq!(m1, poisson_m1(0.2, 1.0), max_relative = 1e-12);
        assert!((m1 - 0.965685).abs() < 1e-6);
    }

    #[test]
    fn max_first_rate_residual_generic_shape() {
        for &(k, lam) in &[(0.5, 0.3), (2.0, 0.6), (5.0, 0.9)] {
            let m = ArrivalModel::gamma(k, lam).unwrap();
            let x = max_first_rate(&m, 1.0).unwrap();
            let residual = x - 1.0 + lam * m.base_lst(x).unwrap();
            assert!(residual.abs() < 1e-10, "k={k} residual {residual}");
        }
    }

    #[test]
    fn max_first_rate_small_lambda() {
        let x = max_first_rate(&poisson(1e-9), 1.0).unwrap();
        assert!((x - 1.0).abs() < 1e-8);
        assert!(max_first_rate(&poisson(1.0), 1.0).is_err());
    }

    #[test]
    fn boundary_of_first_rate() {
        let m1 = poisson_m1(0.2, 1.0);
        let over = Allocation::new(1.0, vec![m1 + 1e-6]).unwrap();
        let r = check_allocation(poisson(0.2), &over, 1).unwrap();
        assert_eq!(r.verdict, Verdict::Infeasible(1));
        let under = Allocation::new(1.0, vec![m1 - 1e-6]).unwrap();
        let r = check_allocation(poisson(0.2), &under, 1).unwrap();
        assert_eq!(r.verdict, Verdict::Feasible);
    }

    #[test]
    fn all_capacity_on_first_server() {
        let a = Allocation::new(1.0, vec![1.0]).unwrap();
        let r = check_allocation(poisson(0.2), &a, 1).unwrap();
        assert_eq!(r.verdict, Verdict::Infeasible(1));
        assert_eq!(r.feasible_up_to, 0);
    }

    #[test]
    fn geometric_half_is_feasible() {
        let a = Allocation::with_geometric_tail(1.0, vec![0.5], 0.5).unwrap();
        let r = check_allocation(poisson(0.2), &a, 10).unwrap();
        assert_eq!(r.verdict, Verdict::Feasible);
        assert_eq!(r.margins.len(), 10);
        assert!(r.margins.iter().all(|m| *m < 0.0));
    }

    #[test]
    fn short_prefix_is_inconclusive() {
        let a = Allocation::new(1.0, vec![0.5, 0.25]).unwrap();
        let r = check_allocation(poisson(0.2), &a, 5).unwrap();
        assert_eq!(r.verdict, Verdict::Inconclusive);
        assert_eq!(r.feasible_up_to, 2);
    }

    #[test]
    fn construction_first_step() {
        let c = feasible_construction(poisson(0.2), 1.0, 0.5, 1).unwrap();
        assert_relative_eq!(c.allocation.prefix()[0], 0.5 * poisson_m1(0.2, 1.0), max_relative = 1e-12);
        assert!((c.allocation.prefix()[0] - 0.482843).abs() < 1e-6);
    }

    #[test]
    fn construction_is_feasible_and_ordered() {
        for &(k, lam, alpha) in &[(1.0, 0.2, 0.5), (0.5, 0.6, 0.7), (2.0, 0.8, 0.3)] {
            let model = ArrivalModel::gamma(k, lam).unwrap();
            let c = feasible_construction(model, 1.0, alpha, 10).unwrap();
            assert!(c.allocation.is_non_increasing());
            let r = check_allocation(model, &c.allocation, 10).unwrap();
            assert_eq!(r.verdict, Verdict::Feasible, "k={k} lam={lam}");
        }
    }

    #[test]
    fn construction_rejects_bad_alpha() {
        assert!(feasible_construction(poisson(0.2), 1.0, 1.0, 3).is_err());
        assert!(feasible_construction(poisson(0.2), 1.0, 0.0, 3).is_err());
    }

    #[test]
    fn fd_verdicts_follow_tail_ratio() {
        let model = poisson(0.2);
        let slow = Allocation::with_geometric_tail(1.0, vec![0.5, 0.25], 0.5).unwrap();
        let mut c = OverflowChain::from_allocation(model, &slow, 8).unwrap();
        let r = finite_delay_diagnostics(&mut c, &slow, 8).unwrap();
        assert!(r.tail_ratio.unwrap() > r.ell_estimate);
        assert_eq!(r.verdict, FdVerdict::Plausible);
        assert_eq!(r.partial_sums.len(), 8 + TAIL_TERMS);

        // prefix whose tail ratio is far below the blocking ratio
        let fast = Allocation::with_geometric_tail(1.0, vec![0.9, 0.009], 0.01).unwrap();
        let mut c = OverflowChain::from_allocation(model, &fast, 4).unwrap();
        let r = finite_delay_diagnostics(&mut c, &fast, 4).unwrap();
        assert!(r.tail_ratio.unwrap() < r.ell_estimate);
        assert_eq!(r.verdict, FdVerdict::Implausible);
    }

    #[test]
    fn fd_inconclusive_without_tail_information() {
        let a = Allocation::new(1.0, vec![0.5]).unwrap();
        let mut c = OverflowChain::from_allocation(poisson(0.2), &a, 1).unwrap();
        let r = finite_delay_diagnostics(&mut c, &a, 1).unwrap();
        assert_eq!(r.verdict, FdVerdict::Inconclusive);
    }
}
