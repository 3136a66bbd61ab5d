//! Renewal arrival processes driving the system.
//!
//! Only the Gamma family is provided. It is parameterized as
//! `Gamma(k, k·λ)` (shape `k`, rate `k·λ`) so the mean inter-arrival time is
//! `1/λ` for every shape and the squared coefficient of variation is `1/k`.
//! Poisson arrivals are the `k = 1` member.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};

/// Distribution family of the external inter-arrival times.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrivalFamily {
    Gamma,
}

impl std::str::FromStr for ArrivalFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gamma" => Ok(ArrivalFamily::Gamma),
            // Poisson is Gamma with k = 1; the shape is checked by the caller.
            "poisson" | "exponential" => Ok(ArrivalFamily::Gamma),
            other => Err(Error::Domain(format!("unknown arrival family `{other}`"))),
        }
    }
}

/// Exogenous renewal arrival process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrivalModel {
    family: ArrivalFamily,
    shape: f64,
    rate: f64,
}

impl ArrivalModel {
    /// Gamma inter-arrival times with shape `k` and mean `1/lambda`.
    pub fn gamma(shape: f64, lambda: f64) -> Result<Self> {
        if !(shape.is_finite() && shape > 0.0) {
            return Err(Error::Domain(format!("shape k must be positive, got {shape}")));
        }
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::Domain(format!(
                "arrival rate lambda must be positive, got {lambda}"
            )));
        }
        Ok(ArrivalModel {
            family: ArrivalFamily::Gamma,
            shape,
            rate: lambda,
        })
    }

    /// Poisson arrivals with rate `lambda`.
    pub fn poisson(lambda: f64) -> Result<Self> {
        Self::gamma(1.0, lambda)
    }

    pub fn family(&self) -> ArrivalFamily {
        self.family
    }

    /// Shape parameter `k`.
    pub fn shape(&self) -> f64 {
        self.shape
    }

    /// Arrival rate `λ`.
    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Rate parameter of the underlying Gamma law, `k·λ`.
    pub fn scale_rate(&self) -> f64 {
        self.shape * self.rate
    }

    pub fn is_poisson(&self) -> bool {
        self.shape == 1.0
    }

    pub fn mean(&self) -> f64 {
        1.0 / self.rate
    }

    pub fn variance(&self) -> f64 {
        1.0 / (self.shape * self.rate * self.rate)
    }

    /// Laplace-Stieltjes transform of the inter-arrival time, `(kλ/(kλ+s))^k`.
    pub fn base_lst(&self, s: f64) -> Result<f64> {
        if !(s >= 0.0) {
            return Err(Error::Domain(format!("LST argument must be >= 0, got {s}")));
        }
        Ok(self.lst_unchecked(s))
    }

    /// Derivative of [`base_lst`](Self::base_lst) with respect to `s`.
    pub fn base_lst_derivative(&self, s: f64) -> Result<f64> {
        if !(s >= 0.0) {
            return Err(Error::Domain(format!("LST argument must be >= 0, got {s}")));
        }
        Ok(self.lst_derivative_unchecked(s))
    }

    #[inline]
    pub(crate) fn lst_unchecked(&self, s: f64) -> f64 {
        let b = self.scale_rate();
        let ratio = b / (b + s);
        if self.shape == 1.0 {
            ratio
        } else {
            ratio.powf(self.shape)
        }
    }

    #[inline]
    pub(crate) fn lst_derivative_unchecked(&self, s: f64) -> f64 {
        // d/ds (b/(b+s))^k = -k/(b+s) * (b/(b+s))^k
        let b = self.scale_rate();
        -self.shape / (b + s) * self.lst_unchecked(s)
    }

    /// Draws one inter-arrival time using the caller's generator.
    pub fn sample_interarrival<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.sampler().sample(rng)
    }

    /// Reusable sampler; cheaper than [`sample_interarrival`](Self::sample_interarrival)
    /// inside hot loops.
    pub fn sampler(&self) -> InterarrivalSampler {
        InterarrivalSampler {
            gamma: Gamma::new(self.shape, 1.0 / self.scale_rate())
                .expect("validated gamma parameters"),
        }
    }
}

/// Precomputed Gamma sampler for an [`ArrivalModel`].
#[derive(Debug, Clone, Copy)]
pub struct InterarrivalSampler {
    gamma: Gamma<f64>,
}

impl InterarrivalSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let x = self.gamma.sample(rng);
            // Gamma draws with small shape can round to exactly zero.
            if x > 0.0 {
                return x;
            }
        }
    }
}
