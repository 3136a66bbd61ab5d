//! Runs a parsed [`ExperimentConfig`] and writes its CSV artifacts.
//!
//! Every mode writes into the output directory and returns the files it
//! wrote along with a short text summary. Files are named after the mode, and
//! the grid writes one series file per cell, so parallel cells never share a
//! file.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use crate::allocation::Allocation;
use crate::arrival::ArrivalModel;
use crate::config::{parse_config, AllocSpec, ConfigError, ExperimentConfig, Mode};
use crate::error::Error;
use crate::geometric::{crossing_alpha, ell_alpha_curve, geometric_allocation, tap_objective, tap_optimal_value, tap_solution};
use crate::metrics::SystemMetrics;
use crate::optimizer::{optimize_allocation, sqrt_rho_heuristic, OptimizationResult, OptimizerConfig};
use crate::overflow::OverflowChain;
use crate::report::{format_significant, Table, TableError, Value};
use crate::simulate::{simulate_replications, SimConfig};
use crate::stability::{feasible_construction, finite_delay_diagnostics, is_feasible, max_first_rate, FdVerdict, Verdict};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("numeric failure: {0}")]
    Numeric(#[from] Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("table error: {0}")]
    Table(#[from] TableError),
}

impl RunError {
    /// 1 for configuration errors, 2 for everything that fails later.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            _ => 2,
        }
    }
}

/// What a run produced.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Reads and parses `path`, optionally redirects the output, and runs it.
pub fn run_file(path: &Path, out: Option<PathBuf>, workers: usize) -> Result<Outcome, RunError> {
    let text = fs::read_to_string(path).map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut config = parse_config(&text)?;
    if let Some(dir) = out {
        config.output_dir = dir;
    }
    run(&config, workers)
}

/// Dispatches on the mode. `workers` bounds the threads used by the grid,
/// the optimizer restarts and simulation replications.
pub fn run(config: &ExperimentConfig, workers: usize) -> Result<Outcome, RunError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| RunError::Numeric(Error::Domain(format!("cannot start worker pool: {e}"))))?;
    pool.install(|| dispatch(config))
}

fn dispatch(config: &ExperimentConfig) -> Result<Outcome, RunError> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|source| RunError::Io {
        path: dir.clone(),
        source,
    })?;
    let mut out = Outcome::default();
    match config.mode {
        Mode::Metrics => run_metrics(config, &mut out)?,
        Mode::Feasibility => run_feasibility(config, &mut out)?,
        Mode::EllCurves => run_curves(config, &mut out)?,
        Mode::Tap => run_tap(config, &mut out)?,
        Mode::Optimize => run_optimize(config, &mut out)?,
        Mode::Simulate => run_simulate(config, &mut out)?,
        Mode::Grid => run_grid(config, &mut out)?,
    }
    Ok(out)
}

fn write(out: &mut Outcome, dir: &Path, name: &str, table: &Table) -> Result<(), RunError> {
    let path = dir.join(name);
    fs::write(&path, table.to_csv()).map_err(|source| RunError::Io {
        path: path.clone(),
        source,
    })?;
    info!("wrote {}", path.display());
    out.files.push(path);
    Ok(())
}

fn arrival(config: &ExperimentConfig) -> Result<ArrivalModel, RunError> {
    config
        .arrival
        .ok_or_else(|| RunError::Config(ConfigError::Missing("arrival.lambda".into())))
}

fn alloc_spec(config: &ExperimentConfig) -> Result<&AllocSpec, RunError> {
    config
        .alloc
        .as_ref()
        .ok_or_else(|| RunError::Config(ConfigError::Missing("alloc.kind".into())))
}

/// The allocation described by `spec`, with `depth` explicit rates where the
/// kind has a choice.
pub fn build_allocation(model: ArrivalModel, capacity: f64, spec: &AllocSpec, depth: usize) -> Result<Allocation, Error> {
    match spec {
        AllocSpec::Geometric { alpha } => geometric_allocation(*alpha, capacity, depth),
        AllocSpec::Explicit { rates, tail_ratio } => match tail_ratio {
            Some(r) => Allocation::with_geometric_tail(capacity, rates.clone(), *r),
            None => Allocation::new(capacity, rates.clone()),
        },
        AllocSpec::Heuristic => sqrt_rho_heuristic(&model, capacity, depth),
        AllocSpec::Construction { alpha } => Ok(feasible_construction(model, capacity, *alpha, depth)?.allocation),
    }
}

/// Depth actually evaluated: an explicit prefix without a tail caps it.
fn usable_depth(allocation: &Allocation, depth: usize) -> usize {
    allocation.depth().map_or(depth, |d| d.min(depth))
}

/// Columns `n, mu_n, p_n, q_n, ell_n, ell_lower_n, rho_n`, one row per server.
pub fn metrics_table(m: &SystemMetrics) -> Table {
    let mut t = Table::new(["n", "mu_n", "p_n", "q_n", "ell_n", "ell_lower_n", "rho_n"]);
    for i in 0..m.depth() {
        let row = vec![
            (i + 1).into(),
            m.rates[i].into(),
            m.p[i + 1].into(),
            m.q[i].into(),
            m.ell[i].into(),
            m.ell_lower[i].into(),
            m.rho_eff[i + 1].into(),
        ];
        t.push(row).expect("fixed width");
    }
    t
}

fn quantity_table(rows: Vec<(&str, Value)>) -> Table {
    let mut t = Table::new(["quantity", "value"]);
    for (k, v) in rows {
        t.push(vec![k.into(), v]).expect("fixed width");
    }
    t
}

fn run_metrics(config: &ExperimentConfig, out: &mut Outcome) -> Result<(), RunError> {
    let model = arrival(config)?;
    let allocation = build_allocation(model, config.capacity, alloc_spec(config)?, config.depth)?;
    let depth = usable_depth(&allocation, config.depth);
    let m = SystemMetrics::compute(model, &allocation, depth)?;
    let table = metrics_table(&m);
    write(out, &config.output_dir, "metrics.csv", &table)?;
    let summary = quantity_table(vec![
        ("depth", depth.into()),
        ("allocated", allocation.allocated().into()),
        ("delay_truncated", m.delay_truncated.into()),
        ("residual", m.residual.value().into()),
        ("delay_total", m.delay_total.value().into()),
        ("ell_M", m.ell_estimate().unwrap_or(f64::NAN).into()),
        ("lower_bound_gap", m.lower_bound_gap().unwrap_or(f64::NAN).into()),
    ]);
    write(out, &config.output_dir, "summary.csv", &summary)?;
    out.summary = format!("{table}\n{summary}");
    Ok(())
}

fn verdict_text(v: Verdict) -> String {
    match v {
        Verdict::Feasible => "feasible".into(),
        Verdict::Infeasible(n) => format!("infeasible at level {n}"),
        Verdict::Inconclusive => "inconclusive".into(),
    }
}

fn run_feasibility(config: &ExperimentConfig, out: &mut Outcome) -> Result<(), RunError> {
    let model = arrival(config)?;
    let spec = alloc_spec(config)?;
    let allocation = build_allocation(model, config.capacity, spec, config.depth)?;
    let depth = usable_depth(&allocation, config.depth);
    let mut chain = OverflowChain::from_allocation(model, &allocation, depth)?;
    let report = is_feasible(&mut chain, &allocation, depth)?;
    let fd = finite_delay_diagnostics(&mut chain, &allocation, depth)?;

    let mut margins = Table::new(["n", "mu_n", "margin", "decay_comparison"]);
    for (i, (margin, decay)) in report.margins.iter().zip(&report.decay_comparison).enumerate() {
        margins.push(vec![(i + 1).into(), chain.rates()[i].into(), (*margin).into(), (*decay).into()])?;
    }
    write(out, &config.output_dir, "feasibility.csv", &margins)?;

    let fd_text = match fd.verdict {
        FdVerdict::Plausible => "plausible",
        FdVerdict::Implausible => "implausible",
        FdVerdict::Inconclusive => "inconclusive",
    };
    let summary = quantity_table(vec![
        ("verdict", verdict_text(report.verdict).into()),
        ("feasible_up_to", report.feasible_up_to.into()),
        ("ell_M", report.ell_estimate.into()),
        ("m1", max_first_rate(&model, config.capacity)?.into()),
        ("tail_ratio", fd.tail_ratio.unwrap_or(f64::NAN).into()),
        ("finite_delay", fd_text.into()),
    ]);
    write(out, &config.output_dir, "feasibility_summary.csv", &summary)?;

    if let AllocSpec::Construction { alpha } = spec {
        let c = feasible_construction(model, config.capacity, *alpha, depth)?;
        let mut t = Table::new(["n", "m_n", "mu_n"]);
        for (i, (root, mu)) in c.roots.iter().zip(c.allocation.prefix()).enumerate() {
            t.push(vec![(i + 1).into(), (*root).into(), (*mu).into()])?;
        }
        write(out, &config.output_dir, "construction.csv", &t)?;
    }
    out.summary = format!("{margins}\n{summary}");
    Ok(())
}

/// Columns `alpha, n, ell_n_alpha`, grouped by level.
pub fn curve_table(model: ArrivalModel, capacity: f64, alphas: &[f64], levels: usize) -> Result<Table, Error> {
    let mut t = Table::new(["alpha", "n", "ell_n_alpha"]);
    for n in 1..=levels {
        let values = ell_alpha_curve(model, capacity, alphas, n)?;
        for (a, v) in alphas.iter().zip(values) {
            t.push(vec![(*a).into(), n.into(), v.into()]).expect("fixed width");
        }
    }
    Ok(t)
}

fn run_curves(config: &ExperimentConfig, out: &mut Outcome) -> Result<(), RunError> {
    let model = arrival(config)?;
    let table = curve_table(model, config.capacity, &config.curve_alphas, config.curve_levels)?;
    write(out, &config.output_dir, "fig1.csv", &table)?;
    let crossing = crossing_alpha(model, config.capacity)?;
    let summary = quantity_table(vec![("crossing_alpha", crossing.into())]);
    write(out, &config.output_dir, "crossing.csv", &summary)?;
    out.summary = summary.to_text();
    Ok(())
}

/// TAP optimum rates with the truncated objective accumulated per level.
pub fn tap_table(ell: f64, capacity: f64, depth: usize) -> Result<Table, Error> {
    let allocation = tap_solution(ell, capacity, depth)?;
    let rates = allocation.prefix();
    let mut t = Table::new(["n", "mu_n", "objective_partial"]);
    for n in 1..=depth {
        t.push(vec![n.into(), rates[n - 1].into(), tap_objective(ell, &rates[..n]).into()])
            .expect("fixed width");
    }
    Ok(t)
}

fn run_tap(config: &ExperimentConfig, out: &mut Outcome) -> Result<(), RunError> {
    let ell = match config.tap_ell {
        Some(ell) => ell,
        None => {
            // take ℓ_M of the configured allocation
            let model = arrival(config)?;
            let allocation = build_allocation(model, config.capacity, alloc_spec(config)?, config.depth)?;
            let depth = usable_depth(&allocation, config.depth);
            let mut chain = OverflowChain::from_allocation(model, &allocation, depth)?;
            chain.ell(depth)?
        }
    };
    let table = tap_table(ell, config.capacity, config.tap_depth)?;
    write(out, &config.output_dir, "tap.csv", &table)?;
    let summary = quantity_table(vec![
        ("ell", ell.into()),
        ("optimal_value", (tap_optimal_value(ell) / config.capacity).into()),
    ]);
    write(out, &config.output_dir, "tap_summary.csv", &summary)?;
    out.summary = summary.to_text();
    Ok(())
}

/// Columns `n, mu_n, ell_n, ell_lower_n, rho_n, rho_n_minus_1`.
pub fn series_table(m: &SystemMetrics) -> Table {
    let mut t = Table::new(["n", "mu_n", "ell_n", "ell_lower_n", "rho_n", "rho_n_minus_1"]);
    for i in 0..m.depth() {
        let row = vec![
            (i + 1).into(),
            m.rates[i].into(),
            m.ell[i].into(),
            m.ell_lower[i].into(),
            m.rho_eff[i + 1].into(),
            m.rho_eff[i].into(),
        ];
        t.push(row).expect("fixed width");
    }
    t
}

fn trace_table(trace: &[f64]) -> Table {
    let mut t = Table::new(["sweep", "objective"]);
    for (i, v) in trace.iter().enumerate() {
        t.push(vec![i.into(), (*v).into()]).expect("fixed width");
    }
    t
}

fn optimization_summary(r: &OptimizationResult) -> Table {
    quantity_table(vec![
        ("objective", r.objective_value.into()),
        ("residual", r.residual.into()),
        ("tail_ratio", r.allocation.tail_ratio().unwrap_or(f64::NAN).into()),
        ("tail_fit", format!("{:?}", r.tail_fit).to_lowercase().into()),
        ("sweeps", r.sweeps.into()),
        ("start", r.start.into()),
        ("allocated", r.allocation.allocated().into()),
    ])
}

fn run_optimize(config: &ExperimentConfig, out: &mut Outcome) -> Result<(), RunError> {
    let model = arrival(config)?;
    let result = optimize_allocation(model, config.capacity, &config.opt)?;
    let series = series_table(&result.metrics);
    write(out, &config.output_dir, "series.csv", &series)?;
    write(out, &config.output_dir, "trace.csv", &trace_table(&result.trace))?;
    let summary = optimization_summary(&result);
    write(out, &config.output_dir, "optimize_summary.csv", &summary)?;
    out.summary = format!("{series}\n{summary}");
    Ok(())
}

fn run_simulate(config: &ExperimentConfig, out: &mut Outcome) -> Result<(), RunError> {
    let model = arrival(config)?;
    let allocation = build_allocation(model, config.capacity, alloc_spec(config)?, config.depth)?;
    let levels = config.sim.levels.unwrap_or(config.depth);
    let levels = usable_depth(&allocation, levels);
    let sim = SimConfig {
        arrivals: config.sim.arrivals,
        warmup: config.sim.warmup,
        seed: config.sim.seed,
        batches: config.sim.batches,
        ..SimConfig::new(model, allocation.rates(levels)?)
    };
    let result = simulate_replications(&sim, config.sim.replications)?;
    let mut chain = OverflowChain::from_allocation(model, &allocation, levels)?;
    let mut t = Table::new(["j", "p_hat", "p_se", "p_exact", "q_hat", "overflow_mean"]);
    for j in 1..=levels {
        t.push(vec![
            j.into(),
            result.p[j - 1].mean.into(),
            result.p[j - 1].se.into(),
            chain.blocking(j)?.into(),
            result.q[j - 1].into(),
            result.overflow_mean[j].into(),
        ])?;
    }
    write(out, &config.output_dir, "simulation.csv", &t)?;
    let summary = quantity_table(vec![
        ("recorded", (result.recorded as f64).into()),
        ("blocked", (result.blocked as f64).into()),
        ("delay_mean", result.delay.mean.into()),
        ("delay_se", result.delay.se.into()),
    ]);
    write(out, &config.output_dir, "simulation_summary.csv", &summary)?;
    out.summary = format!("{t}\n{summary}");
    Ok(())
}

/// One optimized cell of the `(k, ρ)` grid, with unit capacity.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub k: f64,
    pub rho: f64,
    pub result: OptimizationResult,
}

/// Optimizes every `(k, ρ)` pair in parallel, keeping the input order.
pub fn optimize_grid(cells: &[(f64, f64)], opt: &OptimizerConfig) -> Result<Vec<GridCell>, Error> {
    cells
        .par_iter()
        .map(|&(k, rho)| {
            let model = ArrivalModel::gamma(k, rho)?;
            let result = optimize_allocation(model, 1.0, opt)?;
            Ok(GridCell { k, rho, result })
        })
        .collect()
}

/// Columns `k, rho, ES, rM`.
pub fn table1(cells: &[GridCell]) -> Table {
    let mut t = Table::new(["k", "rho", "ES", "rM"]);
    for c in cells {
        t.push(vec![c.k.into(), c.rho.into(), c.result.objective_value.into(), c.result.residual.into()])
            .expect("fixed width");
    }
    t
}

/// Columns `rho, mu1, one_minus_sqrt_rho`.
pub fn fig6_table(cells: &[GridCell]) -> Table {
    let mut t = Table::new(["rho", "mu1", "one_minus_sqrt_rho"]);
    for c in cells {
        t.push(vec![c.rho.into(), c.result.allocation.prefix()[0].into(), (1.0 - c.rho.sqrt()).into()])
            .expect("fixed width");
    }
    t
}

fn series_name(k: f64, rho: f64) -> String {
    format!("series_k{}_rho{}.csv", format_significant(k, 6), format_significant(rho, 6))
}

fn run_grid(config: &ExperimentConfig, out: &mut Outcome) -> Result<(), RunError> {
    let grid = &config.grid;
    let mut cells: Vec<(f64, f64)> = Vec::new();
    for &k in &grid.k {
        for &rho in &grid.rho {
            cells.push((k, rho));
        }
    }
    // Poisson cells for the first-rate curve that the table does not cover
    for &rho in &grid.fig6_rho {
        if !cells.contains(&(1.0, rho)) {
            cells.push((1.0, rho));
        }
    }
    info!("optimizing {} grid cells", cells.len());
    let results = optimize_grid(&cells, &config.opt)?;
    let n_table = grid.k.len() * grid.rho.len();
    let table = table1(&results[..n_table]);
    write(out, &config.output_dir, "table1.csv", &table)?;
    for c in &results[..n_table] {
        write(out, &config.output_dir, &series_name(c.k, c.rho), &series_table(&c.result.metrics))?;
    }
    let fig6: Vec<GridCell> = grid
        .fig6_rho
        .iter()
        .map(|&rho| {
            results
                .iter()
                .find(|c| c.k == 1.0 && c.rho == rho)
                .cloned()
                .expect("every fig6 cell was optimized")
        })
        .collect();
    let fig6 = fig6_table(&fig6);
    write(out, &config.output_dir, "fig6.csv", &fig6)?;
    out.summary = format!("{table}\n{fig6}");
    Ok(())
}
