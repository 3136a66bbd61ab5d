//! Geometric allocations, `ℓ_n(α)` curves and the tail-approximation optimum.
//!
//! With `μ_n = μ α (1 − α)^{n−1}` the capacity left after `n` servers is
//! `μ (1 − α)^n`. If the blocking ratio were a constant `ℓ` the delay would
//! reduce to `(1 − ℓ)/ℓ · Σ ℓ^n / μ_n`, which is minimized by the geometric
//! series with first share `1 − √ℓ` and ratio `√ℓ`.

use crate::allocation::Allocation;
use crate::arrival::ArrivalModel;
use crate::error::{Error, Result};
use crate::overflow::OverflowChain;
use crate::search::bisect;

fn check_share(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("alpha must lie in (0,1), got {alpha}")))
    }
}

/// First `depth` rates of the geometric series with first share `alpha`.
pub fn geometric_rates(alpha: f64, capacity: f64, depth: usize) -> Vec<f64> {
    let mut rates = Vec::with_capacity(depth);
    let mut rate = capacity * alpha;
    for _ in 0..depth {
        rates.push(rate);
        rate *= 1.0 - alpha;
    }
    rates
}

/// `μ_n = μ α (1 − α)^{n−1}`: explicit for `n ≤ depth`, geometric tail after.
pub fn geometric_allocation(alpha: f64, capacity: f64, depth: usize) -> Result<Allocation> {
    check_share(alpha)?;
    if depth == 0 {
        return Err(Error::Domain("depth must be at least 1".into()));
    }
    Allocation::with_geometric_tail(capacity, geometric_rates(alpha, capacity, depth), 1.0 - alpha)
}

/// `ℓ_n(α) = L_{n−1}(μ α (1 − α)^{n−1})` for each `α` of the grid.
pub fn ell_alpha_curve(model: ArrivalModel, capacity: f64, alphas: &[f64], level: usize) -> Result<Vec<f64>> {
    if level == 0 {
        return Err(Error::Domain("curve level must be at least 1".into()));
    }
    alphas
        .iter()
        .map(|&alpha| {
            check_share(alpha)?;
            let mut chain = OverflowChain::new(model, geometric_rates(alpha, capacity, level))?;
            chain.ell(level)
        })
        .collect()
}

/// The share `ᾱ` at which `ℓ_1(α) = ℓ_2(α)`, by bisection on `[0.01, 0.99]`.
pub fn crossing_alpha(model: ArrivalModel, capacity: f64) -> Result<f64> {
    bisect(
        |alpha| {
            let v = ell_alpha_curve(model, capacity, &[alpha], 1)?[0]
                - ell_alpha_curve(model, capacity, &[alpha], 2)?[0];
            Ok(v)
        },
        0.01,
        0.99,
        1e-8,
        200,
    )
}

/// Optimum of the tail approximation program for blocking ratio `ell`:
/// `μ_n = μ (1 − √ℓ) ℓ^{(n−1)/2}`.
pub fn tap_solution(ell: f64, capacity: f64, depth: usize) -> Result<Allocation> {
    if !(ell > 0.0 && ell < 1.0) {
        return Err(Error::Domain(format!("ell must lie in (0,1), got {ell}")));
    }
    geometric_allocation(1.0 - ell.sqrt(), capacity, depth)
}

/// `(1 − ℓ)/ℓ · Σ_n ℓ^n / μ_n` over the given rates.
pub fn tap_objective(ell: f64, rates: &[f64]) -> f64 {
    let mut power = 1.0;
    let sum: f64 = rates
        .iter()
        .map(|mu| {
            power *= ell;
            power / mu
        })
        .sum();
    (1.0 - ell) / ell * sum
}

/// Closed-form value of [`tap_objective`] over the whole infinite TAP
/// optimum with unit capacity: `(1 + √ℓ)/(1 − √ℓ)`.
pub fn tap_optimal_value(ell: f64) -> f64 {
    let root = ell.sqrt();
    (1.0 + root) / (1.0 - root)
}
