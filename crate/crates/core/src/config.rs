//! Experiment configuration: flat `key = value` text.
//!
//! ```text
//! # comments start with '#'
//! mode = optimize
//! capacity = 1
//!
//! [arrival]          # later keys are read as arrival.<key>
//! k = 1
//! lambda = 0.4
//!
//! opt.M = 15         # dotted keys work anywhere before a section header
//! ```
//!
//! Every key must be known; all unknown keys are reported together.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::arrival::{ArrivalFamily, ArrivalModel};
use crate::optimizer::{Objective, OptimizerConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: key `{key}` is set twice")]
    Duplicate { line: usize, key: String },
    #[error("unknown keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot use `{value}`: {reason}")]
    Invalid { key: String, value: String, reason: String },
}

type Result<T> = std::result::Result<T, ConfigError>;

const KNOWN_KEYS: &[&str] = &[
    "mode",
    "capacity",
    "arrival.family",
    "arrival.k",
    "arrival.lambda",
    "alloc.kind",
    "alloc.alpha",
    "alloc.rates",
    "alloc.tail_ratio",
    "alloc.M",
    "opt.M",
    "opt.tol_rate",
    "opt.tol_obj",
    "opt.max_sweeps",
    "opt.restarts",
    "opt.objective",
    "opt.tau",
    "opt.seed",
    "sim.arrivals",
    "sim.warmup",
    "sim.seed",
    "sim.levels",
    "sim.batches",
    "sim.replications",
    "curve.alphas",
    "curve.levels",
    "tap.ell",
    "tap.M",
    "grid.rho",
    "grid.k",
    "grid.fig6_rho",
    "output.dir",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Metrics,
    Feasibility,
    EllCurves,
    Tap,
    Optimize,
    Simulate,
    Grid,
}

impl Mode {
    fn parse(s: &str) -> Option<Mode> {
        Some(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "metrics" => Mode::Metrics,
            "feasibility" => Mode::Feasibility,
            "ell_curves" | "curves" => Mode::EllCurves,
            "tap" => Mode::Tap,
            "optimize" => Mode::Optimize,
            "simulate" => Mode::Simulate,
            "grid" => Mode::Grid,
            _ => return None,
        })
    }
}

/// How the rates of an allocation are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum AllocSpec {
    /// `μ_n = μ α (1 − α)^{n−1}`.
    Geometric { alpha: f64 },
    /// Explicit prefix, optionally followed by a geometric tail.
    Explicit { rates: Vec<f64>, tail_ratio: Option<f64> },
    /// Geometric with `α = 1 − √ρ` (Poisson arrivals only).
    Heuristic,
    /// Stepwise feasible construction with damping `α`.
    Construction { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSettings {
    pub arrivals: u64,
    pub warmup: u64,
    pub seed: u64,
    /// Servers simulated; defaults to the allocation depth.
    pub levels: Option<usize>,
    pub batches: usize,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSettings {
    pub rho: Vec<f64>,
    pub k: Vec<f64>,
    /// Utilizations at which the Poisson first rate is reported.
    pub fig6_rho: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub capacity: f64,
    /// Absent only for the grid, which sets its own arrivals.
    pub arrival: Option<ArrivalModel>,
    pub alloc: Option<AllocSpec>,
    /// Depth `M` at which allocations are evaluated.
    pub depth: usize,
    pub opt: OptimizerConfig,
    pub sim: SimSettings,
    pub curve_alphas: Vec<f64>,
    pub curve_levels: usize,
    pub tap_ell: Option<f64>,
    pub tap_depth: usize,
    pub grid: GridSettings,
    pub output_dir: PathBuf,
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|(_, v)| v.as_str())
    }

    fn invalid(&self, key: &str, reason: impl Into<String>) -> ConfigError {
        ConfigError::Invalid {
            key: key.into(),
            value: self.raw(key).unwrap_or_default().into(),
            reason: reason.into(),
        }
    }

    fn f64(&self, key: &str) -> Result<Option<f64>> {
        self.raw(key)
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| self.invalid(key, "expected a finite number"))
            })
            .transpose()
    }

    fn positive(&self, key: &str) -> Result<Option<f64>> {
        match self.f64(key)? {
            Some(x) if x <= 0.0 => Err(self.invalid(key, "must be positive")),
            other => Ok(other),
        }
    }

    fn share(&self, key: &str) -> Result<Option<f64>> {
        match self.f64(key)? {
            Some(x) if !(x > 0.0 && x < 1.0) => Err(self.invalid(key, "must lie strictly between 0 and 1")),
            other => Ok(other),
        }
    }

    /// Non-negative integer; `1e6` style is accepted when exact.
    fn u64(&self, key: &str) -> Result<Option<u64>> {
        self.raw(key)
            .map(|v| {
                v.parse::<u64>()
                    .ok()
                    .or_else(|| {
                        v.parse::<f64>()
                            .ok()
                            .filter(|x| *x >= 0.0 && x.fract() == 0.0 && *x < 1.8e19)
                            .map(|x| x as u64)
                    })
                    .ok_or_else(|| self.invalid(key, "expected a non-negative integer"))
            })
            .transpose()
    }

    fn usize(&self, key: &str) -> Result<Option<usize>> {
        Ok(self.u64(key)?.map(|x| x as usize))
    }

    fn count(&self, key: &str) -> Result<Option<usize>> {
        match self.usize(key)? {
            Some(0) => Err(self.invalid(key, "must be at least 1")),
            other => Ok(other),
        }
    }

    /// Comma-separated numbers, or `start:end:count` for an even grid.
    fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        let Some(v) = self.raw(key) else {
            return Ok(None);
        };
        let parts: Vec<&str> = v.split(':').map(str::trim).collect();
        let values = if parts.len() == 3 {
            let start: f64 = parts[0].parse().map_err(|_| self.invalid(key, "bad grid start"))?;
            let end: f64 = parts[1].parse().map_err(|_| self.invalid(key, "bad grid end"))?;
            let count: usize = parts[2].parse().map_err(|_| self.invalid(key, "bad grid count"))?;
            if count == 0 || !(start.is_finite() && end.is_finite()) {
                return Err(self.invalid(key, "grid needs finite ends and at least one point"));
            }
            if count == 1 {
                vec![start]
            } else {
                (0..count)
                    .map(|i| start + (end - start) * i as f64 / (count - 1) as f64)
                    .collect()
            }
        } else {
            v.split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| self.invalid(key, format!("`{}` is not a finite number", s.trim())))
                })
                .collect::<Result<Vec<f64>>>()?
        };
        if values.is_empty() {
            return Err(self.invalid(key, "empty list"));
        }
        Ok(Some(values))
    }

    fn required<T>(&self, key: &str, value: Option<T>) -> Result<T> {
        value.ok_or_else(|| ConfigError::Missing(key.into()))
    }
}

/// Splits text into `(line, key, value)` triples.
fn tokenize(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("unterminated section header `{content}`"),
            })?;
            let name = name.trim();
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("invalid section name `{name}`"),
                });
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            message: format!("expected `key = value`, found `{content}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(ConfigError::Syntax {
                line,
                message: format!("invalid key `{key}`"),
            });
        }
        let full = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        out.push((line, full, value.to_string()));
    }
    Ok(out)
}

/// Parses configuration text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut map = BTreeMap::new();
    for (line, key, value) in tokenize(text)? {
        if map.contains_key(&key) {
            return Err(ConfigError::Duplicate { line, key });
        }
        map.insert(key, (line, value));
    }
    let unknown: Vec<String> = map
        .keys()
        .filter(|k| !KNOWN_KEYS.contains(&k.as_str()))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(ConfigError::UnknownKeys(unknown));
    }
    let e = Entries { map };

    let mode_text = e.required("mode", e.raw("mode"))?;
    let mode = Mode::parse(mode_text).ok_or_else(|| e.invalid("mode", "expected one of metrics, feasibility, ell_curves, tap, optimize, simulate, grid"))?;
    let capacity = e.positive("capacity")?.unwrap_or(1.0);

    // a TAP run with an explicit ℓ needs no arrival model
    let arrival = if mode == Mode::Grid || (mode == Mode::Tap && e.raw("arrival.lambda").is_none()) {
        None
    } else {
        if let Some(f) = e.raw("arrival.family") {
            f.parse::<ArrivalFamily>().map_err(|err| e.invalid("arrival.family", err.to_string()))?;
        }
        let k = e.positive("arrival.k")?.unwrap_or(1.0);
        let lambda = e.required("arrival.lambda", e.positive("arrival.lambda")?)?;
        Some(ArrivalModel::gamma(k, lambda).map_err(|err| e.invalid("arrival.lambda", err.to_string()))?)
    };

    let alloc = match e.raw("alloc.kind") {
        None => None,
        Some(kind) => Some(match kind.to_ascii_lowercase().as_str() {
            "geometric" => AllocSpec::Geometric {
                alpha: e.required("alloc.alpha", e.share("alloc.alpha")?)?,
            },
            "explicit" => {
                let rates = e.required("alloc.rates", e.list("alloc.rates")?)?;
                if rates.iter().any(|r| *r <= 0.0) {
                    return Err(e.invalid("alloc.rates", "rates must be positive"));
                }
                AllocSpec::Explicit {
                    rates,
                    tail_ratio: e.share("alloc.tail_ratio")?,
                }
            }
            "heuristic" | "sqrt_rho" => AllocSpec::Heuristic,
            "construction" => AllocSpec::Construction {
                alpha: e.required("alloc.alpha", e.share("alloc.alpha")?)?,
            },
            _ => return Err(e.invalid("alloc.kind", "expected geometric, explicit, heuristic or construction")),
        }),
    };
    let depth = e.count("alloc.M")?.unwrap_or(15);
    if depth > crate::overflow::DEFAULT_MAX_LEVEL {
        return Err(e.invalid("alloc.M", format!("at most {}", crate::overflow::DEFAULT_MAX_LEVEL)));
    }
    if matches!(mode, Mode::Metrics | Mode::Feasibility | Mode::Simulate) && alloc.is_none() {
        return Err(ConfigError::Missing("alloc.kind".into()));
    }

    let mut opt = OptimizerConfig::default();
    if let Some(m) = e.count("opt.M")? {
        if m > crate::overflow::DEFAULT_MAX_LEVEL {
            return Err(e.invalid("opt.M", format!("at most {}", crate::overflow::DEFAULT_MAX_LEVEL)));
        }
        opt.horizon = m;
    }
    opt.tol_rate = e.positive("opt.tol_rate")?.unwrap_or(opt.tol_rate);
    opt.tol_obj = e.positive("opt.tol_obj")?.unwrap_or(opt.tol_obj);
    opt.max_sweeps = e.count("opt.max_sweeps")?.unwrap_or(opt.max_sweeps);
    opt.restarts = e.count("opt.restarts")?.unwrap_or(opt.restarts);
    opt.seed = e.u64("opt.seed")?.unwrap_or(opt.seed);
    opt.objective = match e.raw("opt.objective").map(str::to_ascii_lowercase).as_deref() {
        None | Some("delay") => Objective::Delay,
        Some("deadline") => {
            let tau = e.required("opt.tau", e.f64("opt.tau")?)?;
            if tau < 0.0 {
                return Err(e.invalid("opt.tau", "must be >= 0"));
            }
            Objective::Deadline { tau }
        }
        Some(_) => return Err(e.invalid("opt.objective", "expected delay or deadline")),
    };

    let sim = SimSettings {
        arrivals: e.u64("sim.arrivals")?.unwrap_or(1_000_000),
        warmup: e.u64("sim.warmup")?.unwrap_or(10_000),
        seed: e.u64("sim.seed")?.unwrap_or(0),
        levels: e.count("sim.levels")?,
        batches: e.count("sim.batches")?.unwrap_or(50),
        replications: e.count("sim.replications")?.unwrap_or(1),
    };
    if sim.arrivals <= sim.warmup {
        return Err(e.invalid("sim.arrivals", "must exceed sim.warmup"));
    }

    let curve_alphas = match e.list("curve.alphas")? {
        Some(a) if a.iter().any(|x| !(*x > 0.0 && *x < 1.0)) => {
            return Err(e.invalid("curve.alphas", "every alpha must lie strictly between 0 and 1"))
        }
        Some(a) => a,
        None => (1..100).map(|i| i as f64 / 100.0).collect(),
    };
    let curve_levels = e.count("curve.levels")?.unwrap_or(6);
    if curve_levels > crate::overflow::DEFAULT_MAX_LEVEL {
        return Err(e.invalid("curve.levels", format!("at most {}", crate::overflow::DEFAULT_MAX_LEVEL)));
    }

    let tap_ell = e.share("tap.ell")?;
    let tap_depth = e.count("tap.M")?.unwrap_or(30);
    if mode == Mode::Tap && tap_ell.is_none() && alloc.is_none() {
        return Err(ConfigError::Missing("tap.ell".into()));
    }

    let grid = GridSettings {
        rho: e.list("grid.rho")?.unwrap_or_else(|| vec![0.2, 0.4, 0.6, 0.8]),
        k: e.list("grid.k")?.unwrap_or_else(|| vec![0.5, 1.0, 2.0, 5.0, 10.0]),
        fig6_rho: e.list("grid.fig6_rho")?.unwrap_or_else(|| vec![0.2, 0.4, 0.5, 0.6, 0.8]),
    };
    if grid.rho.iter().chain(&grid.fig6_rho).any(|r| !(*r > 0.0 && *r < 1.0)) {
        return Err(e.invalid("grid.rho", "utilizations must lie strictly between 0 and 1"));
    }
    if grid.k.iter().any(|k| *k <= 0.0) {
        return Err(e.invalid("grid.k", "shapes must be positive"));
    }

    let output_dir = PathBuf::from(e.raw("output.dir").unwrap_or("out"));

    Ok(ExperimentConfig {
        mode,
        capacity,
        arrival,
        alloc,
        depth,
        opt,
        sim,
        curve_alphas,
        curve_levels,
        tap_ell,
        tap_depth,
        grid,
        output_dir,
    })
}
