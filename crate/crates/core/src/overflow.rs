//! Overflow processes of the ordered sub-systems.
//!
//! `T_n` is the time between consecutive arrivals that find servers `1..n`
//! all busy, `T_0` being the external inter-arrival time. Its transform obeys
//!
//! ```text
//! L_n(s) = L_{n-1}(μ_n + s) / (1 − L_{n-1}(s) + L_{n-1}(μ_n + s))
//! ```
//!
//! Evaluating `L_n` expands a binary tree with `2^n` leaves, so the chain
//! caches `(L_n(s), L_n'(s))` pairs keyed by level and the exact bit pattern
//! of `s`.

use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hasher};

use crate::arrival::ArrivalModel;
use crate::allocation::Allocation;
use crate::error::{Error, Result};

/// Default deepest level the chain agrees to evaluate.
pub const DEFAULT_MAX_LEVEL: usize = 25;

const DENOMINATOR_FLOOR: f64 = 1e-300;

/// Multiplicative hasher for the `(level, bits)` memo keys.
#[derive(Default, Clone, Copy)]
struct KeyHasher(u64);

impl Hasher for KeyHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.write_u64(b as u64);
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = (self.0.rotate_left(5) ^ v).wrapping_mul(0x51_7c_c1_b7_27_22_0a_95);
    }

    fn write_usize(&mut self, v: usize) {
        self.write_u64(v as u64);
    }
}

type Memo = HashMap<(usize, u64), (f64, f64), BuildHasherDefault<KeyHasher>>;

/// Evaluator of `L_n(s)` and `L_n'(s)` for one arrival model and rate prefix.
#[derive(Clone)]
pub struct OverflowChain {
    model: ArrivalModel,
    rates: Vec<f64>,
    max_level: usize,
    memoize: bool,
    memo: Memo,
}

impl std::fmt::Debug for OverflowChain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OverflowChain")
            .field("model", &self.model)
            .field("rates", &self.rates)
            .field("max_level", &self.max_level)
            .field("memoize", &self.memoize)
            .field("cached", &self.memo.len())
            .finish()
    }
}

impl OverflowChain {
    /// Chain over `rates = (μ_1, …, μ_N)`; levels `0..=N` are available.
    pub fn new(model: ArrivalModel, rates: Vec<f64>) -> Result<Self> {
        if let Some((i, &m)) = rates
            .iter()
            .enumerate()
            .find(|(_, m)| !(m.is_finite() && **m > 0.0))
        {
            return Err(Error::InvalidAllocation(format!(
                "rate mu_{} = {m} is not strictly positive",
                i + 1
            )));
        }
        Ok(OverflowChain {
            model,
            rates,
            max_level: DEFAULT_MAX_LEVEL,
            memoize: true,
            memo: Memo::default(),
        })
    }

    /// Chain over the first `levels` rates of an allocation.
    pub fn from_allocation(model: ArrivalModel, allocation: &Allocation, levels: usize) -> Result<Self> {
        Self::new(model, allocation.rates(levels)?)
    }

    pub fn with_max_level(mut self, max_level: usize) -> Self {
        self.max_level = max_level;
        self
    }

    /// Turns the cache off; results are bit-identical either way.
    pub fn without_memo(mut self) -> Self {
        self.memoize = false;
        self.memo.clear();
        self
    }

    pub fn model(&self) -> &ArrivalModel {
        &self.model
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    /// Deepest level that can be evaluated.
    pub fn depth(&self) -> usize {
        self.rates.len().min(self.max_level)
    }

    pub fn cached_entries(&self) -> usize {
        self.memo.len()
    }

    /// Appends `μ_{N+1}`. Cached values stay valid.
    pub fn push_rate(&mut self, rate: f64) -> Result<()> {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(Error::InvalidAllocation(format!("rate {rate} is not strictly positive")));
        }
        self.rates.push(rate);
        Ok(())
    }

    /// Drops rates beyond `len`, with their cached levels.
    pub fn truncate(&mut self, len: usize) {
        if len < self.rates.len() {
            self.rates.truncate(len);
            self.memo.retain(|&(level, _), _| level <= len);
        }
    }

    /// Replaces `μ_n` (1-based) and invalidates every level that depends on it.
    pub fn set_rate(&mut self, n: usize, rate: f64) -> Result<()> {
        if n == 0 || n > self.rates.len() {
            return Err(Error::Level {
                requested: n,
                available: self.rates.len(),
            });
        }
        if !(rate.is_finite() && rate > 0.0) {
            return Err(Error::InvalidAllocation(format!("rate {rate} is not strictly positive")));
        }
        if self.rates[n - 1].to_bits() != rate.to_bits() {
            self.rates[n - 1] = rate;
            self.memo.retain(|&(level, _), _| level < n);
        }
        Ok(())
    }

    fn check(&self, n: usize, s: f64) -> Result<()> {
        if !(s >= 0.0) {
            return Err(Error::Domain(format!("LST argument must be >= 0, got {s}")));
        }
        let available = self.depth();
        if n > available {
            return Err(Error::Level {
                requested: n,
                available,
            });
        }
        Ok(())
    }

    /// `L_n(s)`.
    pub fn lst(&mut self, n: usize, s: f64) -> Result<f64> {
        Ok(self.lst_with_derivative(n, s)?.0)
    }

    /// `L_n'(s)`.
    pub fn lst_derivative(&mut self, n: usize, s: f64) -> Result<f64> {
        Ok(self.lst_with_derivative(n, s)?.1)
    }

    /// `(L_n(s), L_n'(s))`, computed in a single pass.
    pub fn lst_with_derivative(&mut self, n: usize, s: f64) -> Result<(f64, f64)> {
        self.check(n, s)?;
        self.eval(n, s)
    }

    fn eval(&mut self, n: usize, s: f64) -> Result<(f64, f64)> {
        if n == 0 {
            return Ok((
                self.model.lst_unchecked(s),
                self.model.lst_derivative_unchecked(s),
            ));
        }
        let key = (n, s.to_bits());
        if self.memoize {
            if let Some(&v) = self.memo.get(&key) {
                return Ok(v);
            }
        }
        let mu = self.rates[n - 1];
        let (shifted, d_shifted) = self.eval(n - 1, mu + s)?;
        let (plain, d_plain) = self.eval(n - 1, s)?;
        let den = 1.0 - plain + shifted;
        if !(den > DENOMINATOR_FLOOR) {
            return Err(Error::NumericDegeneracy {
                level: n,
                s,
                detail: format!("denominator 1 - L(s) + L(mu+s) = {den}"),
            });
        }
        let value = shifted / den;
        let derivative = (d_shifted * (1.0 - plain) + d_plain * shifted) / (den * den);
        if self.memoize {
            self.memo.insert(key, (value, derivative));
        }
        Ok((value, derivative))
    }

    /// `ℓ_n = L_{n-1}(μ_n)`, the probability that an arrival reaching server
    /// `n` finds it busy.
    pub fn ell(&mut self, n: usize) -> Result<f64> {
        if n == 0 || n > self.rates.len() {
            return Err(Error::Level {
                requested: n,
                available: self.rates.len(),
            });
        }
        let mu = self.rates[n - 1];
        self.lst(n - 1, mu)
    }

    /// `p_n = ℓ_1 ⋯ ℓ_n` with `p_0 = 1`.
    pub fn blocking(&mut self, n: usize) -> Result<f64> {
        let mut p = 1.0;
        for i in 1..=n {
            p *= self.ell(i)?;
        }
        Ok(p)
    }

    /// `E T_n = 1/(λ p_n)`; equals `−L_n'(0)`.
    pub fn mean_overflow_time(&mut self, n: usize) -> Result<f64> {
        let p = self.blocking(n)?;
        if p <= 0.0 || !p.is_finite() {
            return Err(Error::InfiniteOverflowTime(n));
        }
        let t = 1.0 / (self.model.rate() * p);
        if !t.is_finite() {
            return Err(Error::InfiniteOverflowTime(n));
        }
        Ok(t)
    }

    /// `ℓ_n` through the telescoped product
    /// `L_0(μ_1+…+μ_n) / ∏_{i<n} [1 − L_{i−1}(μ_{i+1}+…+μ_n) + L_{i−1}(μ_i+…+μ_n)]`.
    /// Only a cross-check of [`ell`](Self::ell).
    pub fn ell_product_form(&mut self, n: usize) -> Result<f64> {
        if n == 0 || n > self.rates.len() {
            return Err(Error::Level {
                requested: n,
                available: self.rates.len(),
            });
        }
        // suffix[i] = μ_i + … + μ_n (1-based i), suffix[n+1] = 0
        let mut suffix = vec![0.0; n + 2];
        for i in (1..=n).rev() {
            suffix[i] = suffix[i + 1] + self.rates[i - 1];
        }
        let numerator = self.model.lst_unchecked(suffix[1]);
        let mut denominator = 1.0;
        for i in 1..n {
            let a = self.lst(i - 1, suffix[i + 1])?;
            let b = self.lst(i - 1, suffix[i])?;
            denominator *= 1.0 - a + b;
        }
        Ok(numerator / denominator)
    }
}
