//! Discrete-event simulation of the first `n` servers.
//!
//! Each arrival takes the lowest-indexed idle server and never moves; an
//! arrival that finds all `n` servers busy is lost. Everything is recorded at
//! arrival epochs, which is where the analytic probabilities live. Standard
//! errors come from batch means over the post-warmup arrivals.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;

use crate::arrival::ArrivalModel;
use crate::error::{Error, Result};

/// Fewest overflow gaps accepted by [`overflow_times`].
pub const MIN_OVERFLOW_EVENTS: u64 = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub model: ArrivalModel,
    /// `μ_1..μ_n`, fastest first.
    pub rates: Vec<f64>,
    /// Total arrivals, warmup included.
    pub arrivals: u64,
    pub warmup: u64,
    pub seed: u64,
    pub batches: usize,
}

impl SimConfig {
    pub fn new(model: ArrivalModel, rates: Vec<f64>) -> Self {
        SimConfig {
            model,
            rates,
            arrivals: 1_000_000,
            warmup: 10_000,
            seed: 0,
            batches: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.is_empty() {
            return Err(Error::Domain("simulation needs at least one server".into()));
        }
        if let Some(mu) = self.rates.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
            return Err(Error::InvalidAllocation(format!("rate {mu} is not strictly positive")));
        }
        if self.batches < 2 {
            return Err(Error::Domain("batch means need at least 2 batches".into()));
        }
        if self.arrivals <= self.warmup || self.arrivals - self.warmup < self.batches as u64 {
            return Err(Error::Domain(format!(
                "{} arrivals leave fewer than {} recorded arrivals after a warmup of {}",
                self.arrivals, self.batches, self.warmup
            )));
        }
        Ok(())
    }
}

/// Estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    /// Mean and standard error of the mean of equally weighted batch values.
    fn from_batches(values: &[f64]) -> Self {
        let b = values.len() as f64;
        let mean = values.iter().sum::<f64>() / b;
        if values.len() < 2 {
            return Estimate { mean, se: f64::NAN };
        }
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (b - 1.0);
        Estimate {
            mean,
            se: (var / b).sqrt(),
        }
    }

    /// Whether `value` lies within `k` standard errors.
    pub fn covers(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.se
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    /// `p̂_1..p̂_n`.
    pub p: Vec<Estimate>,
    /// `q̂_j = p̂_{j−1} − p̂_j` for `j = 1..n`.
    pub q: Vec<f64>,
    /// Mean service time of the customers that were served.
    pub delay: Estimate,
    /// Mean gap between arrivals that find servers `1..j` busy, `j = 0..n`;
    /// `NaN` when no gap was seen.
    pub overflow_mean: Vec<f64>,
    /// Gaps observed at each level `j = 0..n`.
    pub overflow_count: Vec<u64>,
    /// Recorded arrivals that found every server busy.
    pub blocked: u64,
    /// Arrivals after the warmup.
    pub recorded: u64,
}

/// Gap statistics of the overflow stream at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct OverflowStats {
    pub level: usize,
    pub count: u64,
    pub mean: Estimate,
    /// `(s, Ê e^{−sT})` for each requested `s`.
    pub lst: Vec<(f64, Estimate)>,
}

#[derive(Clone, Copy, PartialEq)]
struct Completion(f64, usize);

impl Eq for Completion {}

impl PartialOrd for Completion {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Completion {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

#[derive(Clone, Default)]
struct Batch {
    arrivals: u64,
    /// `busy_prefix[j]`: arrivals finding servers `1..=j+1` busy.
    busy_prefix: Vec<u64>,
    served: u64,
    service_sum: f64,
    /// Per level: gap count, gap sum and `Σ e^{−s gap}` per probe point.
    gaps: Vec<(u64, f64, Vec<f64>)>,
}

struct Run {
    batches: Vec<Batch>,
    blocked: u64,
    recorded: u64,
}

/// Runs one replication, probing overflow gaps at level `probe_level` for
/// the transform points `s_points`.
fn run(config: &SimConfig, probe_level: Option<usize>, s_points: &[f64]) -> Result<Run> {
    config.validate()?;
    let n = config.rates.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let interarrival = config.model.sampler();
    let services: Vec<Exp<f64>> = config
        .rates
        .iter()
        .map(|&mu| Exp::new(mu).map_err(|e| Error::Domain(e.to_string())))
        .collect::<Result<_>>()?;
    let mut idle: BTreeSet<usize> = (0..n).collect();
    let mut completions: BinaryHeap<Reverse<Completion>> = BinaryHeap::with_capacity(n);
    let mut last_overflow: Vec<Option<f64>> = vec![None; n + 1];
    let n_batches = config.batches;
    let recorded = config.arrivals - config.warmup;
    let mut batches = vec![
        Batch {
            busy_prefix: vec![0; n],
            gaps: vec![(0, 0.0, vec![0.0; s_points.len()]); n + 1],
            ..Batch::default()
        };
        n_batches
    ];
    let mut blocked = 0;
    let mut clock = 0.0;
    for i in 0..config.arrivals {
        clock += interarrival.sample(&mut rng);
        while let Some(&Reverse(Completion(t, server))) = completions.peek() {
            if t > clock {
                break;
            }
            completions.pop();
            idle.insert(server);
        }
        // servers 0..depth are busy
        let target = idle.iter().next().copied();
        let depth = target.unwrap_or(n);
        let record = i >= config.warmup;
        let batch = if record {
            let k = ((i - config.warmup) as u128 * n_batches as u128 / recorded as u128) as usize;
            Some(&mut batches[k])
        } else {
            None
        };
        if let Some(batch) = batch {
            batch.arrivals += 1;
            for slot in &mut batch.busy_prefix[..depth] {
                *slot += 1;
            }
            for level in 0..=depth {
                if let Some(prev) = last_overflow[level] {
                    let gap = clock - prev;
                    let entry = &mut batch.gaps[level];
                    entry.0 += 1;
                    entry.1 += gap;
                    if probe_level == Some(level) {
                        for (acc, &s) in entry.2.iter_mut().zip(s_points) {
                            *acc += (-s * gap).exp();
                        }
                    }
                }
            }
            match target {
                Some(server) => {
                    let service = services[server].sample(&mut rng);
                    batch.served += 1;
                    batch.service_sum += service;
                    idle.remove(&server);
                    completions.push(Reverse(Completion(clock + service, server)));
                }
                None => blocked += 1,
            }
        } else if let Some(server) = target {
            let service = services[server].sample(&mut rng);
            idle.remove(&server);
            completions.push(Reverse(Completion(clock + service, server)));
        }
        for slot in &mut last_overflow[..=depth] {
            *slot = Some(clock);
        }
    }
    Ok(Run {
        batches,
        blocked,
        recorded,
    })
}

/// Simulates `config.arrivals` arrivals and estimates blocking, delay and
/// overflow statistics.
pub fn simulate(config: &SimConfig) -> Result<SimResult> {
    let run = run(config, None, &[])?;
    let n = config.rates.len();
    let p: Vec<Estimate> = (0..n)
        .map(|j| {
            let values: Vec<f64> = run
                .batches
                .iter()
                .map(|b| b.busy_prefix[j] as f64 / b.arrivals as f64)
                .collect();
            Estimate::from_batches(&values)
        })
        .collect();
    let served: Vec<f64> = run
        .batches
        .iter()
        .filter(|b| b.served > 0)
        .map(|b| b.service_sum / b.served as f64)
        .collect();
    if served.is_empty() {
        return Err(Error::InsufficientData("no customer was served".into()));
    }
    let total_served: u64 = run.batches.iter().map(|b| b.served).sum();
    let total_service: f64 = run.batches.iter().map(|b| b.service_sum).sum();
    let mut delay = Estimate::from_batches(&served);
    delay.mean = total_service / total_served as f64;
    let mut overflow_mean = Vec::with_capacity(n + 1);
    let mut overflow_count = Vec::with_capacity(n + 1);
    for level in 0..=n {
        let count: u64 = run.batches.iter().map(|b| b.gaps[level].0).sum();
        let sum: f64 = run.batches.iter().map(|b| b.gaps[level].1).sum();
        overflow_count.push(count);
        overflow_mean.push(if count > 0 { sum / count as f64 } else { f64::NAN });
    }
    let q = telescope(&p);
    Ok(SimResult {
        p,
        q,
        delay,
        overflow_mean,
        overflow_count,
        blocked: run.blocked,
        recorded: run.recorded,
    })
}

fn telescope(p: &[Estimate]) -> Vec<f64> {
    let mut prev = 1.0;
    p.iter()
        .map(|e| {
            let q = prev - e.mean;
            prev = e.mean;
            q
        })
        .collect()
}

/// Gaps between consecutive arrivals that find servers `1..j` busy, with
/// the empirical transform `Ê e^{−sT_j}` at each of `s_points`.
pub fn overflow_times(config: &SimConfig, level: usize, s_points: &[f64]) -> Result<OverflowStats> {
    if level > config.rates.len() {
        return Err(Error::Level {
            requested: level,
            available: config.rates.len(),
        });
    }
    let run = run(config, Some(level), s_points)?;
    let count: u64 = run.batches.iter().map(|b| b.gaps[level].0).sum();
    if count < MIN_OVERFLOW_EVENTS {
        return Err(Error::InsufficientData(format!(
            "{count} overflow gaps at level {level}, need at least {MIN_OVERFLOW_EVENTS}"
        )));
    }
    let used: Vec<&Batch> = run.batches.iter().filter(|b| b.gaps[level].0 > 0).collect();
    let per_batch = |f: &dyn Fn(&Batch) -> f64| -> Estimate {
        let values: Vec<f64> = used.iter().map(|b| f(b)).collect();
        Estimate::from_batches(&values)
    };
    let sum: f64 = run.batches.iter().map(|b| b.gaps[level].1).sum();
    let mut mean = per_batch(&|b| b.gaps[level].1 / b.gaps[level].0 as f64);
    mean.mean = sum / count as f64;
    let lst = s_points
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let total: f64 = run.batches.iter().map(|b| b.gaps[level].2[k]).sum();
            let mut e = per_batch(&|b| b.gaps[level].2[k] / b.gaps[level].0 as f64);
            e.mean = total / count as f64;
            (s, e)
        })
        .collect();
    Ok(OverflowStats {
        level,
        count,
        mean,
        lst,
    })
}

/// Inverse-variance weighted combination; plain average when any standard
/// error is zero or undefined.
fn merge_estimates(parts: &[Estimate]) -> Estimate {
    let weighted = parts.iter().all(|e| e.se > 0.0 && e.se.is_finite());
    if weighted {
        let w: f64 = parts.iter().map(|e| 1.0 / (e.se * e.se)).sum();
        let mean = parts.iter().map(|e| e.mean / (e.se * e.se)).sum::<f64>() / w;
        Estimate {
            mean,
            se: w.sqrt().recip(),
        }
    } else {
        let k = parts.len() as f64;
        let mean = parts.iter().map(|e| e.mean).sum::<f64>() / k;
        let se = (parts.iter().map(|e| e.se * e.se).sum::<f64>()).sqrt() / k;
        Estimate { mean, se }
    }
}

/// Runs `replications` independent copies with seeds `seed, seed+1, …` in
/// parallel and merges them.
pub fn simulate_replications(config: &SimConfig, replications: usize) -> Result<SimResult> {
    if replications == 0 {
        return Err(Error::Domain("at least one replication is needed".into()));
    }
    let results: Vec<SimResult> = (0..replications as u64)
        .into_par_iter()
        .map(|i| {
            let mut c = config.clone();
            c.seed = config.seed.wrapping_add(i);
            simulate(&c)
        })
        .collect::<Result<_>>()?;
    Ok(merge(&results))
}

/// Combines replications: estimates by inverse variance, overflow means by
/// event counts, counters by summation.
pub fn merge(results: &[SimResult]) -> SimResult {
    let n = results[0].p.len();
    let p: Vec<Estimate> = (0..n)
        .map(|j| merge_estimates(&results.iter().map(|r| r.p[j]).collect::<Vec<_>>()))
        .collect();
    let delay = merge_estimates(&results.iter().map(|r| r.delay).collect::<Vec<_>>());
    let mut overflow_mean = Vec::with_capacity(n + 1);
    let mut overflow_count = Vec::with_capacity(n + 1);
    for level in 0..=n {
        let count: u64 = results.iter().map(|r| r.overflow_count[level]).sum();
        let sum: f64 = results
            .iter()
            .filter(|r| r.overflow_count[level] > 0)
            .map(|r| r.overflow_mean[level] * r.overflow_count[level] as f64)
            .sum();
        overflow_count.push(count);
        overflow_mean.push(if count > 0 { sum / count as f64 } else { f64::NAN });
    }
    SimResult {
        q: telescope(&p),
        p,
        delay,
        overflow_mean,
        overflow_count,
        blocked: results.iter().map(|r| r.blocked).sum(),
        recorded: results.iter().map(|r| r.recorded).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mm10(arrivals: u64, seed: u64) -> SimConfig {
        SimConfig {
            arrivals,
            seed,
            ..SimConfig::new(ArrivalModel::poisson(0.2).unwrap(), vec![0.5])
        }
    }

    #[test]
    fn validation() {
        let mut c = mm10(1000, 1);
        c.warmup = 1000;
        assert!(simulate(&c).is_err());
        let c = SimConfig::new(ArrivalModel::poisson(0.2).unwrap(), vec![0.5, 0.0]);
        assert!(simulate(&c).is_err());
        let c = SimConfig::new(ArrivalModel::poisson(0.2).unwrap(), vec![]);
        assert!(simulate(&c).is_err());
    }

    #[test]
    fn single_server_loss() {
        let r = simulate(&mm10(200_000, 7)).unwrap();
        let exact = 0.2 / 0.7;
        assert!(r.p[0].covers(exact, 4.0), "{:?}", r.p[0]);
        assert!(r.delay.covers(2.0, 4.0), "{:?}", r.delay);
        assert_eq!(r.recorded, 190_000);
        assert!((r.blocked as f64 / r.recorded as f64 - r.p[0].mean).abs() < 1e-12);
    }

    #[test]
    fn telescoping_is_exact() {
        let c = SimConfig {
            arrivals: 50_000,
            ..SimConfig::new(ArrivalModel::gamma(0.5, 0.6).unwrap(), vec![0.4, 0.3, 0.2])
        };
        let r = simulate(&c).unwrap();
        let total: f64 = r.q.iter().sum::<f64>() + r.p.last().unwrap().mean;
        assert_eq!(total, 1.0);
    }

    #[test]
    fn same_seed_same_result() {
        let a = simulate(&mm10(30_000, 3)).unwrap();
        let b = simulate(&mm10(30_000, 3)).unwrap();
        assert_eq!(a, b);
        let c = simulate(&mm10(30_000, 4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_overflow_events() {
        let c = SimConfig {
            arrivals: 300,
            warmup: 10,
            batches: 10,
            ..mm10(300, 1)
        };
        assert!(matches!(overflow_times(&c, 1, &[]), Err(Error::InsufficientData(_))));
        assert!(matches!(overflow_times(&c, 2, &[]), Err(Error::Level { .. })));
    }

    #[test]
    fn merged_replications_shrink_error() {
        let one = simulate(&mm10(40_000, 11)).unwrap();
        let four = simulate_replications(&mm10(40_000, 11), 4).unwrap();
        assert!(four.p[0].se < one.p[0].se);
        assert_eq!(four.recorded, 4 * one.recorded);
        assert!(four.p[0].covers(0.2 / 0.7, 4.0));
    }
}
