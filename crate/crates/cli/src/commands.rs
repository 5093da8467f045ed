//! The subcommands, callable without the binary.

use std::path::{Path, PathBuf};

use cvr_core::coordinator::{write_iteration_trace, AdmmMode, Coordinator, IterRecord, StepResult};
use cvr_core::network::{partition, Feeder, Partition};
use cvr_core::phase::PhaseVector;
use cvr_core::powerflow::{solve_powerflow, Multipliers, PfOptions};
use cvr_core::simbus::{Latency, LatencyPolicy, SimBus, TraceEvent};
use cvr_core::CvrError;

use crate::benchmark::{run_benchmark, BenchSettings, RunReport};
use crate::config::Config;
use crate::report::{emit_report, stem, with_csv, write_summary};
use crate::scenario::ScenarioTimeSeries;

/// Writes the feeder and the scenario series; returns the paths.
pub fn generate(cfg: &Config, dir: &Path) -> Result<Vec<PathBuf>, CvrError> {
    let feeder = cfg.feeder()?;
    std::fs::create_dir_all(dir).map_err(|e| CvrError::io(dir, e))?;
    let fpath = dir.join("feeder.toml");
    feeder.save(&fpath)?;
    let spath = dir.join("series.csv");
    let series = cfg.series()?;
    with_csv(&spath, |w| {
        w.write_record(["minute", "load_p", "load_q", "pv"])?;
        for t in 0..series.len() {
            let m = series.multipliers(t);
            w.write_record([
                series.timestamps[t].to_string(),
                m.load_p.to_string(),
                m.load_q.to_string(),
                m.pv.to_string(),
            ])?;
        }
        Ok(())
    })?;
    Ok(vec![fpath, spath])
}

fn settings(cfg: &Config, feeder: &Feeder) -> BenchSettings {
    BenchSettings { admm: cfg.admm.clone(), ccvr_v_margin: cfg.ccvr.v_margin, bus: cfg.bus.clone(), seed: cfg.seed, config_hash: cfg.hash(feeder) }
}

/// Runs every configured strategy over the series and writes one set of
/// CSVs per strategy plus `summary.csv`.
pub fn run(cfg: &Config, dir: &Path) -> Result<Vec<RunReport>, CvrError> {
    let feeder = cfg.feeder()?;
    let part = partition(&feeder)?;
    let series = cfg.series()?;
    let set = settings(cfg, &feeder);
    let mut reports = Vec::new();
    for &s in &cfg.strategies {
        log::info!("running {s} over {} steps", series.len());
        let r = run_benchmark(&feeder, &part, &series, s, &set)?;
        emit_report(&r, dir)?;
        reports.push(r);
    }
    with_csv(&dir.join("summary.csv"), |w| write_summary(&reports, w))?;
    Ok(reports)
}

/// Index of the largest load multiplier, or the configured step.
fn operating_step(series: &ScenarioTimeSeries, step: Option<usize>) -> Result<usize, CvrError> {
    if series.is_empty() {
        return Err(CvrError::Config("the scenario window is empty".into()));
    }
    if let Some(s) = step {
        if s >= series.len() {
            return Err(CvrError::Config(format!("step {s} outside a series of {}", series.len())));
        }
        return Ok(s);
    }
    let mut best = 0;
    for t in 1..series.len() {
        if series.load_p[t] > series.load_p[best] {
            best = t;
        }
    }
    Ok(best)
}

struct Point {
    feeder: Feeder,
    part: Partition,
    mult: Multipliers,
}

impl Point {
    fn new(cfg: &Config, step: Option<usize>) -> Result<Self, CvrError> {
        let feeder = cfg.feeder()?;
        let part = partition(&feeder)?;
        let series = cfg.series()?;
        let mult = series.multipliers(operating_step(&series, step)?);
        Ok(Point { feeder, part, mult })
    }

    /// One cold-started loop at the operating point.
    fn solve(&self, cfg: &Config, barrier: Option<usize>, policy: LatencyPolicy) -> Result<(StepResult, Vec<TraceEvent>), CvrError> {
        let zero: Vec<PhaseVector> = self.feeder.inverters.iter().map(|i| PhaseVector::zeros(i.s_cap.mask())).collect();
        let m0 = solve_powerflow(&self.feeder, &zero, &self.mult, None, &PfOptions::default())?.measurement;
        let mut admm = cfg.admm.clone();
        admm.mode = AdmmMode::Async;
        admm.partial_barrier = barrier;
        let dims = self.part.links.iter().map(|l| l.dim()).collect();
        let mut bus = SimBus::new(policy, dims, cfg.seed)?;
        let mut c = Coordinator::new(&self.feeder, &self.part, admm, self.mult, m0)?;
        let r = c.run(Some(&mut bus))?;
        Ok((r, bus.trace().to_vec()))
    }
}

/// First iteration after the leader's first solve with ‖r‖ below `tol`.
pub fn first_below(records: &[IterRecord], tol: f64) -> Option<usize> {
    records.iter().skip(1).find(|r| r.r_norm < tol).map(|r| r.iteration)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub partial_barrier: usize,
    pub latency: u64,
    pub iterations: usize,
    pub converged: bool,
    pub first_below_tol: Option<usize>,
    pub final_r: f64,
    pub p_kw: f64,
}

/// Partial barrier × uplink latency sweep at one operating point.
/// Writes `sweep_summary.csv` and one iteration trace per setting.
pub fn sweep(cfg: &Config, dir: &Path) -> Result<Vec<SweepRow>, CvrError> {
    let point = Point::new(cfg, cfg.sweep.step)?;
    let n = point.part.num_followers();
    let barriers = if cfg.sweep.partial_barriers.is_empty() {
        let mut b: Vec<usize> = [0.25, 0.5, 0.75, 1.0].iter().map(|f| ((f * n as f64).round() as usize).max(1)).collect();
        b.dedup();
        b
    } else {
        cfg.sweep.partial_barriers.clone()
    };
    let latencies = if cfg.sweep.latencies.is_empty() { vec![0] } else { cfg.sweep.latencies.clone() };
    std::fs::create_dir_all(dir).map_err(|e| CvrError::io(dir, e))?;
    let mut rows = Vec::new();
    for &k in &barriers {
        for &lat in &latencies {
            let mut policy = cfg.bus.clone();
            policy.default = Latency::Constant { clocks: lat };
            if cfg.sweep.random_subset && k < n {
                policy.random_subset = Some(k);
            }
            let (r, _) = point.solve(cfg, Some(k), policy)?;
            let path = dir.join(format!("sweep_k{k}_lat{lat}.csv"));
            let file = std::fs::File::create(&path).map_err(|e| CvrError::io(&path, e))?;
            write_iteration_trace(&r.records, file).map_err(|e| CvrError::Parse(format!("{}: {e}", path.display())))?;
            rows.push(SweepRow {
                partial_barrier: k,
                latency: lat,
                iterations: r.iterations,
                converged: r.converged,
                first_below_tol: first_below(&r.records, cfg.admm.primal_tol),
                final_r: r.records.last().map_or(f64::NAN, |x| x.r_norm),
                p_kw: r.measurement.substation_power(&point.feeder) * point.feeder.base_power_kva,
            });
        }
    }
    with_csv(&dir.join("sweep_summary.csv"), |w| {
        w.write_record(["partial_barrier", "latency", "iterations", "converged", "first_below_tol", "final_r", "p_kw"])?;
        for r in &rows {
            w.write_record([
                r.partial_barrier.to_string(),
                r.latency.to_string(),
                r.iterations.to_string(),
                r.converged.to_string(),
                r.first_below_tol.map(|x| x.to_string()).unwrap_or_default(),
                r.final_r.to_string(),
                r.p_kw.to_string(),
            ])?;
        }
        Ok(())
    })?;
    Ok(rows)
}

/// Convergence experiment with the configured failure windows. Writes
/// `trace_iterations.csv` and `trace_bus.csv`.
pub fn trace(cfg: &Config, dir: &Path) -> Result<StepResult, CvrError> {
    let point = Point::new(cfg, cfg.trace.step)?;
    let mut policy = cfg.bus.clone();
    policy.failures.extend(cfg.trace.failures.iter().copied());
    let (r, events) = point.solve(cfg, cfg.trace.partial_barrier, policy)?;
    std::fs::create_dir_all(dir).map_err(|e| CvrError::io(dir, e))?;
    let it = dir.join("trace_iterations.csv");
    let file = std::fs::File::create(&it).map_err(|e| CvrError::io(&it, e))?;
    write_iteration_trace(&r.records, file).map_err(|e| CvrError::Parse(format!("{}: {e}", it.display())))?;
    let bus = dir.join("trace_bus.csv");
    let file = std::fs::File::create(&bus).map_err(|e| CvrError::io(&bus, e))?;
    cvr_core::simbus::write_trace(&events, file).map_err(|e| CvrError::Parse(format!("{}: {e}", bus.display())))?;
    Ok(r)
}

/// One-line description of a finished run for the terminal.
pub fn describe(r: &RunReport, base: Option<&RunReport>) -> String {
    let (lo, hi) = r.voltage_range();
    let red = base.map(|b| format!(", reduction {:.3}%", r.reduction_pct(b))).unwrap_or_default();
    let fail = r.failed_at.as_ref().map(|(t, e)| format!(", FAILED at step {t}: {e}")).unwrap_or_default();
    format!(
        "{:<10} energy {:.3} kWh{red}, voltage [{lo:.4}, {hi:.4}], {} violations, {} iterations{fail} -> {}_*.csv",
        r.strategy,
        r.energy_kwh(),
        r.violations(),
        r.total_iterations(),
        stem(&r.strategy)
    )
}
