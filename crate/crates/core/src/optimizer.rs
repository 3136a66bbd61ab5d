//! Finite-horizon capacity optimizer.
//!
//! The rates `μ_1..μ_{M−1}` are chosen by cyclic coordinate descent while
//! `μ_M` is pinned to the tail fixed point
//! `μ_M = (1 − √L_{M−1}(μ_M)) (μ − s_{M−1})`, so that the servers beyond `M`
//! form a geometric tail with ratio `√ℓ_M` that uses the remaining capacity
//! exactly. The objective is the truncated cost plus the cost of that tail.
//!
//! Coordinates are parametrized as shares of the remaining capacity,
//! `μ_n = x_n (μ − s_{n−1})` with `x_n ∈ (0,1)`. Moving one share rescales
//! every later rate, which keeps the tail in proportion and converges in far
//! fewer sweeps than moving absolute rates.

use std::fmt;
use std::sync::Arc;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::allocation::Allocation;
use crate::arrival::ArrivalModel;
use crate::error::{Error, Result};
use crate::geometric::geometric_allocation;
use crate::metrics::{blocking_probabilities, fastest_idle_distribution, residual_tail, Extended, SystemMetrics};
use crate::overflow::OverflowChain;
use crate::search::{golden_section, newton_bracketed};

/// Per-rate cost `g(μ)`.
pub type CostFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// What a customer served at rate `μ` costs.
#[derive(Clone)]
pub enum Objective {
    /// Expected service time, `g(μ) = 1/μ`.
    Delay,
    /// Probability that service exceeds `tau`, `g(μ) = e^{−μ τ}`.
    Deadline { tau: f64 },
    /// Any convex per-rate cost.
    Custom(CostFn),
}

impl fmt::Debug for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Objective::Delay => write!(f, "Delay"),
            Objective::Deadline { tau } => write!(f, "Deadline {{ tau: {tau} }}"),
            Objective::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl Objective {
    pub fn cost(&self, mu: f64) -> f64 {
        match self {
            Objective::Delay => 1.0 / mu,
            Objective::Deadline { tau } => (-mu * tau).exp(),
            Objective::Custom(g) => g(mu),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Objective::Deadline { tau } if !(*tau >= 0.0 && tau.is_finite()) => {
                Err(Error::Domain(format!("deadline tau must be finite and >= 0, got {tau}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    /// Horizon `M`.
    pub horizon: usize,
    /// Scalar search tolerance on rates.
    pub tol_rate: f64,
    /// Relative improvement below which a sweep counts as converged.
    pub tol_obj: f64,
    pub max_sweeps: usize,
    /// Number of starts; the first is the unperturbed warm start.
    pub restarts: usize,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            horizon: 15,
            tol_rate: 1e-6,
            tol_obj: 1e-8,
            max_sweeps: 50,
            restarts: 3,
            seed: 0,
            objective: Objective::Delay,
        }
    }
}

impl OptimizerConfig {
    fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.horizon > crate::overflow::DEFAULT_MAX_LEVEL {
            return Err(Error::Domain(format!(
                "horizon must lie in 1..={}, got {}",
                crate::overflow::DEFAULT_MAX_LEVEL,
                self.horizon
            )));
        }
        if !(self.tol_rate > 0.0 && self.tol_obj > 0.0) {
            return Err(Error::Domain("tolerances must be positive".into()));
        }
        if self.max_sweeps == 0 || self.restarts == 0 {
            return Err(Error::Domain("max_sweeps and restarts must be at least 1".into()));
        }
        self.objective.validate()
    }
}

/// How the rate of server `M` and the tail ratio were chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailFit {
    /// `μ_M = (1 − √ℓ_M)(μ − s_{M−1})` with ratio `√ℓ_M`.
    FixedPoint,
    /// No positive fixed point; see [`fitted_tail_rate`].
    Fitted,
}

#[derive(Debug, Clone)]
pub struct OptimizationResult {
    /// `μ_1..μ_M` followed by the geometric tail.
    pub allocation: Allocation,
    pub objective_value: f64,
    /// Tail part of the objective.
    pub residual: f64,
    pub tail_fit: TailFit,
    pub sweeps: usize,
    /// Objective after the warm start and after each sweep.
    pub trace: Vec<f64>,
    /// Index of the start that produced the result.
    pub start: usize,
    pub metrics: SystemMetrics,
}

const ROOT_MAX_ITER: usize = 200;

/// Solves `x = (1 − √L_{M−1}(x)) (μ − s_{M−1})` for the rate of server `M`,
/// where the chain holds `μ_1..μ_{M−1}`.
///
/// `x = 0` always solves the equation. A positive root is sought only when the
/// right-hand side starts out steeper than the identity,
/// `μ − s_{M−1} > 2 λ p_{M−1}`, which guarantees one; otherwise
/// [`Error::NoRoot`] is returned.
pub fn tail_pinned_rate(chain: &mut OverflowChain, capacity: f64, tol: f64) -> Result<f64> {
    let level = chain.depth();
    let used: f64 = chain.rates().iter().sum();
    let remaining = capacity - used;
    if !(remaining > 0.0) {
        return Err(Error::Capacity {
            level,
            partial_sum: used,
            capacity,
        });
    }
    // slope of the right-hand side at 0 is −R L'(0)/2 = R/(2 λ p_{M−1})
    let slope = -remaining * chain.lst_derivative(level, 0.0)? / 2.0;
    if !(slope > 1.0) {
        return Err(Error::NoRoot(format!(
            "tail fixed point at level {} has only the trivial root (slope {slope})",
            level + 1
        )));
    }
    let mut residual = |x: f64| -> Result<(f64, f64)> {
        let (l, dl) = chain.lst_with_derivative(level, x)?;
        let root = l.sqrt();
        let f = x - (1.0 - root) * remaining;
        let df = if root > 0.0 { 1.0 + remaining * dl / (2.0 * root) } else { 1.0 };
        Ok((f, df))
    };
    let lo = positive_side_start(&mut residual, remaining, |f| f < 0.0)?
        .ok_or_else(|| Error::NoRoot(format!("no sign change of the tail fixed point at level {}", level + 1)))?;
    // f(R) = R √L(R) > 0
    newton_bracketed(residual, lo, remaining, tol * remaining, ROOT_MAX_ITER)
}

/// Halves `R/1000` until `accept(f(x))`, for functions that vanish at 0 and
/// leave it with a known sign.
fn positive_side_start<F, A>(f: &mut F, remaining: f64, accept: A) -> Result<Option<f64>>
where
    F: FnMut(f64) -> Result<(f64, f64)>,
    A: Fn(f64) -> bool,
{
    let mut x = remaining * 1e-3;
    for _ in 0..200 {
        if accept(f(x)?.0) {
            return Ok(Some(x));
        }
        x *= 0.5;
    }
    Ok(None)
}

/// Tail cost `Σ_{j≥1} p_M ℓ^{j−1} (1 − ℓ) g(μ_M r^j)`, summed until the
/// terms no longer move the total.
fn numeric_tail(objective: &Objective, p_m: f64, mu_m: f64, ell: f64, r: f64) -> f64 {
    let mut total = 0.0;
    let mut weight = p_m * (1.0 - ell);
    let mut rate = mu_m * r;
    for _ in 0..1_000_000 {
        let term = weight * objective.cost(rate);
        total += term;
        if !total.is_finite() {
            return f64::INFINITY;
        }
        if term.abs() <= 1e-17 * total.abs() || weight == 0.0 {
            break;
        }
        weight *= ell;
        rate *= r;
        if rate == 0.0 {
            return if matches!(objective, Objective::Deadline { .. }) {
                total + weight / (1.0 - ell)
            } else {
                f64::INFINITY
            };
        }
    }
    total
}

/// Cost of the servers beyond `M` when their rates continue geometrically
/// with ratio `r` and each blocks with probability `ℓ`. Infinite unless
/// `ℓ < r`.
pub fn tail_cost(objective: &Objective, p_m: f64, mu_m: f64, ell: f64, r: f64) -> Result<Extended> {
    if !(mu_m > 0.0 && r > 0.0 && r < 1.0) || !(p_m >= 0.0) || ell.is_nan() {
        return Err(Error::Domain(format!(
            "invalid tail p_M = {p_m}, mu_M = {mu_m}, ell = {ell}, ratio = {r}"
        )));
    }
    if ell >= 1.0 || ell >= r {
        return Ok(Extended::Infinite);
    }
    Ok(match objective {
        Objective::Delay => Extended::from_f64(p_m * (1.0 - ell) / (mu_m * (r - ell))),
        _ => Extended::from_f64(numeric_tail(objective, p_m, mu_m, ell, r)),
    })
}

/// Objective of the rates held by the chain, `μ_1..μ_M`, split into the
/// truncated cost and the tail cost. The tail continues with ratio `ratio`,
/// or `√ℓ_M` when `None`.
pub fn objective_parts(chain: &mut OverflowChain, objective: &Objective, ratio: Option<f64>) -> Result<(f64, Extended)> {
    let depth = chain.depth();
    if depth == 0 {
        return Err(Error::Domain("objective needs at least one server".into()));
    }
    let p = blocking_probabilities(chain, depth)?;
    let q = fastest_idle_distribution(&p)?;
    let truncated: f64 = q.iter().zip(chain.rates()).map(|(q, &mu)| q * objective.cost(mu)).sum();
    let mu_m = chain.rates()[depth - 1];
    let ell = chain.ell(depth)?;
    let p_m = p[depth - 1];
    let tail = match (objective, ratio) {
        (Objective::Delay, None) => residual_tail(p_m, mu_m, ell)?,
        (_, None) if ell >= 1.0 => Extended::Infinite,
        (_, None) => tail_cost(objective, p_m, mu_m, ell, ell.sqrt())?,
        (_, Some(r)) => tail_cost(objective, p_m, mu_m, ell, r)?,
    };
    Ok((truncated, tail))
}

/// Truncated cost plus the cost of a `√ℓ_M` geometric tail; infinite when
/// `ℓ_M ≥ 1`.
pub fn objective_value(chain: &mut OverflowChain, objective: &Objective) -> Result<Extended> {
    let (truncated, tail) = objective_parts(chain, objective, None)?;
    Ok(tail + truncated)
}

/// Rate of server `M` and tail ratio when the `√ℓ_M` fixed point has no
/// positive root.
///
/// The tail ratio is tied to `μ_M` by spending the remaining capacity
/// exactly, `r = 1 − μ_M/(μ − s_{M−1})`, and `μ_M` minimizes the cost of
/// server `M` plus the tail over the range where `ℓ_M < r`. For a fixed `ℓ`
/// this minimization lands on `r = √ℓ`, so it extends the fixed point rather
/// than replacing it. A range exists exactly when `λ p_{M−1} < μ − s_{M−1}`.
/// The search is capped at `μ_{M−1}` so the series stays non-increasing.
pub fn fitted_tail_rate(chain: &mut OverflowChain, capacity: f64, objective: &Objective) -> Result<(f64, f64)> {
    let level = chain.depth();
    let used: f64 = chain.rates().iter().sum();
    let remaining = capacity - used;
    if !(remaining > 0.0) {
        return Err(Error::Capacity {
            level,
            partial_sum: used,
            capacity,
        });
    }
    let p_prev = chain.blocking(level)?;
    // h(x) = R (1 − L(x)) − x is concave with h(0) = 0; its positive root
    // bounds the admissible rates
    let slope = -remaining * chain.lst_derivative(level, 0.0)?;
    if !(slope > 1.0) {
        return Err(Error::NoRoot(format!(
            "no tail fits the capacity left after level {level} (slope {slope})"
        )));
    }
    let mut admissible = |x: f64| -> Result<(f64, f64)> {
        let (l, dl) = chain.lst_with_derivative(level, x)?;
        Ok((remaining * (1.0 - l) - x, -remaining * dl - 1.0))
    };
    let lo = positive_side_start(&mut admissible, remaining, |h| h > 0.0)?
        .ok_or_else(|| Error::NoRoot(format!("no admissible tail rate after level {level}")))?;
    // h(R) = −R L(R) < 0
    let x_max = newton_bracketed(admissible, lo, remaining, 1e-15 * remaining, ROOT_MAX_ITER)?;
    let x_max = match chain.rates().last() {
        Some(&prev) => x_max.min(prev),
        None => x_max,
    };
    let mut cost = |t: f64| -> Result<f64> {
        let x = t * x_max;
        let ell = chain.lst(level, x)?;
        let r = 1.0 - x / remaining;
        let head = p_prev * (1.0 - ell) * objective.cost(x);
        Ok(tail_cost(objective, p_prev * ell, x, ell, r)?.value() + head)
    };
    let (t, value) = golden_section(&mut cost, 1e-9, 1.0 - 1e-12, 1e-7, 200)?;
    if !value.is_finite() {
        return Err(Error::NoRoot(format!("every admissible tail after level {level} has infinite cost")));
    }
    let mu = t * x_max;
    Ok((mu, 1.0 - mu / remaining))
}

/// Geometric series with `α = 1 − √ρ`, the rough optimum for Poisson arrivals.
pub fn sqrt_rho_heuristic(model: &ArrivalModel, capacity: f64, depth: usize) -> Result<Allocation> {
    if !model.is_poisson() {
        return Err(Error::Domain(format!(
            "the square-root heuristic needs Poisson arrivals, got shape {}",
            model.shape()
        )));
    }
    let rho = model.rate() / capacity;
    if !(rho < 1.0) {
        return Err(Error::Domain(format!("utilization {rho} must be below 1")));
    }
    geometric_allocation(1.0 - rho.sqrt(), capacity, depth)
}

/// Share `α` of the warm start.
fn warm_start_share(model: &ArrivalModel, capacity: f64) -> Result<f64> {
    if model.is_poisson() {
        Ok(1.0 - (model.rate() / capacity).sqrt())
    } else {
        let ell1 = model.base_lst(0.5 * capacity)?;
        Ok(1.0 - ell1.sqrt())
    }
}

const SHARE_FLOOR: f64 = 1e-9;
const PIN_TOL: f64 = 1e-14;

struct Problem<'a> {
    model: ArrivalModel,
    capacity: f64,
    horizon: usize,
    config: &'a OptimizerConfig,
}

struct Evaluation {
    value: f64,
    rates: Vec<f64>,
    /// `None` for the `√ℓ_M` fixed point.
    ratio: Option<f64>,
}

impl Problem<'_> {
    fn rates(&self, shares: &[f64]) -> Vec<f64> {
        let mut remaining = self.capacity;
        shares
            .iter()
            .map(|&x| {
                let mu = x * remaining;
                remaining -= mu;
                mu
            })
            .collect()
    }

    /// Full rate vector with `μ_M` set by the tail, or `None` when no tail
    /// fits. The fixed point is used when it exists and keeps `μ_M ≤ μ_{M−1}`,
    /// the fitted tail otherwise.
    fn completed(&self, shares: &[f64]) -> Result<Option<(Vec<f64>, Option<f64>)>> {
        let rates = self.rates(shares);
        let mut chain = OverflowChain::new(self.model, rates)?.without_memo();
        let previous = chain.rates().last().copied().unwrap_or(f64::INFINITY);
        let (mu_m, ratio) = match tail_pinned_rate(&mut chain, self.capacity, PIN_TOL) {
            Ok(mu_m) if mu_m <= previous => (mu_m, None),
            Ok(_) | Err(Error::NoRoot(_)) => {
                match fitted_tail_rate(&mut chain, self.capacity, &self.config.objective) {
                    Ok((mu_m, r)) => (mu_m, Some(r)),
                    Err(Error::NoRoot(_)) | Err(Error::Capacity { .. }) => return Ok(None),
                    Err(e) => return Err(e),
                }
            }
            Err(Error::Capacity { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        if chain.push_rate(mu_m).is_err() {
            return Ok(None);
        }
        Ok(Some((chain.rates().to_vec(), ratio)))
    }

    fn evaluate(&self, shares: &[f64]) -> Result<Evaluation> {
        let Some((rates, ratio)) = self.completed(shares)? else {
            return Ok(Evaluation {
                value: f64::INFINITY,
                rates: Vec::new(),
                ratio: None,
            });
        };
        let mut chain = OverflowChain::new(self.model, rates.clone())?.without_memo();
        let value = match objective_parts(&mut chain, &self.config.objective, ratio) {
            Ok((truncated, tail)) => tail.value() + truncated,
            Err(Error::NumericDegeneracy { .. }) | Err(Error::Invariant(_)) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        Ok(Evaluation { value, rates, ratio })
    }

    /// Equal shares `α`: the heuristic value, or the best single share when
    /// that does better (for instance when the heuristic leaves no room for
    /// a tail at high load).
    fn warm_start(&self, heuristic: f64) -> Result<Vec<f64>> {
        let n = self.horizon - 1;
        let at_heuristic = self.evaluate(&vec![heuristic; n])?.value;
        let (alpha, value) = golden_section(
            |a| Ok(self.evaluate(&vec![a; n])?.value),
            1e-3,
            1.0 - 1e-3,
            1e-4,
            100,
        )?;
        debug!("warm start: heuristic share {heuristic} -> {at_heuristic}, best share {alpha} -> {value}");
        Ok(vec![if value < at_heuristic { alpha } else { heuristic }; n])
    }

    /// Search interval and tolerance for share `i`. The interval keeps
    /// `μ_{i+1} ≤ μ_i` and `μ_{i+2} ≤ μ_{i+1}`, so the search never leaves the
    /// non-increasing series, where the optimum lies.
    fn bounds(&self, shares: &[f64], i: usize) -> Option<(f64, f64, f64)> {
        let rates = self.rates(&shares[..i]);
        let remaining = self.capacity - rates.iter().sum::<f64>();
        let mut hi = 1.0 - SHARE_FLOOR;
        if let Some(&prev) = rates.last() {
            hi = hi.min(prev / remaining);
        }
        let mut lo = SHARE_FLOOR;
        if let Some(&next) = shares.get(i + 1) {
            lo = lo.max(next / (1.0 + next));
        }
        let tol = (self.config.tol_rate / remaining).max(1e-13);
        (hi - lo > tol).then_some((lo, hi, tol))
    }

    /// Coordinate descent from `shares`. Returns the final shares, the trace
    /// and the number of sweeps.
    fn descend(&self, mut shares: Vec<f64>) -> Result<(Vec<f64>, Vec<f64>, usize)> {
        let mut current = self.evaluate(&shares)?.value;
        let mut trace = vec![current];
        let mut sweeps = 0;
        if shares.is_empty() {
            return Ok((shares, trace, 0));
        }
        for _ in 0..self.config.max_sweeps {
            sweeps += 1;
            let start = current;
            for i in 0..shares.len() {
                let Some((lo, hi, tol)) = self.bounds(&shares, i) else {
                    continue;
                };
                let mut trial = shares.clone();
                let (x, fx) = golden_section(
                    |x| {
                        trial[i] = x;
                        Ok(self.evaluate(&trial)?.value)
                    },
                    lo,
                    hi,
                    tol,
                    500,
                )?;
                if fx < current {
                    shares[i] = x;
                    current = fx;
                }
            }
            trace.push(current);
            debug!("sweep {sweeps}: objective {current}");
            if !current.is_finite() {
                continue;
            }
            if start - current <= self.config.tol_obj * current.abs() {
                break;
            }
        }
        Ok((shares, trace, sweeps))
    }
}

fn shares_of(rates: &[f64], capacity: f64) -> Vec<f64> {
    let mut remaining = capacity;
    rates
        .iter()
        .map(|&mu| {
            let x = mu / remaining;
            remaining -= mu;
            x.clamp(SHARE_FLOOR, 1.0 - SHARE_FLOOR)
        })
        .collect()
}

/// Minimizes the objective over non-increasing `μ_1..μ_M` with `μ_M` set by
/// the tail.
///
/// Starts from a geometric series (the square-root heuristic for Poisson
/// arrivals) and from `restarts − 1` randomly perturbed copies of it, run in
/// parallel; the best result wins, ties going to the earliest start.
pub fn optimize_allocation(model: ArrivalModel, capacity: f64, config: &OptimizerConfig) -> Result<OptimizationResult> {
    config.validate()?;
    if !(capacity > 0.0 && capacity.is_finite()) {
        return Err(Error::Domain(format!("capacity must be positive, got {capacity}")));
    }
    if !(model.rate() < capacity) {
        return Err(Error::Domain(format!(
            "arrival rate {} must be below the capacity {capacity}",
            model.rate()
        )));
    }
    let horizon = config.horizon;
    let problem = Problem {
        model,
        capacity,
        horizon,
        config,
    };
    let base = problem.warm_start(warm_start_share(&model, capacity)?)?;
    let starts: Vec<Vec<f64>> = (0..config.restarts)
        .map(|i| {
            if i == 0 {
                return base.clone();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(i as u64));
            let perturbed: Vec<f64> = base
                .iter()
                .map(|&x| (x * rng.random_range(-0.3f64..0.3).exp()).clamp(0.01, 0.99))
                .collect();
            let mut rates = problem.rates(&perturbed);
            rates.sort_by(|a, b| b.total_cmp(a));
            shares_of(&rates, capacity)
        })
        .collect();
    let runs: Vec<Result<(Vec<f64>, Vec<f64>, usize)>> =
        starts.into_par_iter().map(|s| problem.descend(s)).collect();
    let mut best: Option<(usize, Vec<f64>, Vec<f64>, usize)> = None;
    for (i, run) in runs.into_iter().enumerate() {
        let (shares, trace, sweeps) = run?;
        let value = *trace.last().expect("trace is never empty");
        debug!("start {i}: objective {value} after {sweeps} sweeps");
        let better = match &best {
            None => true,
            Some((_, _, t, _)) => value < *t.last().expect("trace is never empty"),
        };
        if better {
            best = Some((i, shares, trace, sweeps));
        }
    }
    let (start, shares, trace, sweeps) = best.expect("at least one start");
    let evaluation = problem.evaluate(&shares)?;
    if !evaluation.value.is_finite() {
        return Err(Error::Optimizer(format!(
            "no start reached a finite objective (k = {}, lambda = {})",
            model.shape(),
            model.rate()
        )));
    }
    if evaluation.rates.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::Optimizer(format!(
            "optimized rates are not non-increasing: {:?}",
            evaluation.rates
        )));
    }
    let Evaluation { rates, ratio, .. } = evaluation;
    let mut chain = OverflowChain::new(model, rates.clone())?.without_memo();
    let (truncated, tail) = objective_parts(&mut chain, &config.objective, ratio)?;
    let ell_m = chain.ell(horizon)?;
    let (tail_fit, tail_ratio) = match ratio {
        None => (TailFit::FixedPoint, ell_m.sqrt()),
        Some(r) => (TailFit::Fitted, r),
    };
    let allocation = Allocation::with_geometric_tail(capacity, rates, tail_ratio)?;
    let metrics = SystemMetrics::compute(model, &allocation, horizon)?;
    let objective_value = tail.value() + truncated;
    info!(
        "optimized k = {}, lambda = {}: objective {objective_value} after {sweeps} sweeps ({tail_fit:?} tail)",
        model.shape(),
        model.rate()
    );
    Ok(OptimizationResult {
        allocation,
        objective_value,
        residual: tail.value(),
        tail_fit,
        sweeps,
        trace,
        start,
        metrics,
    })
}
