//! Paired daily runs of the four dispatch strategies.

use std::fmt;
use std::str::FromStr;

use cvr_core::coordinator::{AdmmConfig, AdmmMode, Coordinator, IterRecord};
use cvr_core::network::{Feeder, Partition};
use cvr_core::phase::PhaseVector;
use cvr_core::powerflow::{solve_powerflow, EpsMode, Linearization, MeasurementSet, PfOptions};
use cvr_core::qp::{solve_with, QpSolution, QpStatus, SolverSettings};
use cvr_core::simbus::{LatencyPolicy, SimBus};
use cvr_core::subproblem::{build_centralized, SubproblemOptions};
use cvr_core::CvrError;
use serde::{Deserialize, Serialize};

use crate::scenario::ScenarioTimeSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Unity power factor: no reactive dispatch.
    Base,
    /// One centralized solve per step on the plain linear model.
    Ccvr,
    /// Synchronous distributed ADMM.
    Dscvr,
    /// Asynchronous distributed ADMM; `None` uses half the followers.
    Dacvr(Option<usize>),
}

impl Strategy {
    pub fn all() -> Vec<Strategy> {
        vec![Strategy::Base, Strategy::Ccvr, Strategy::Dscvr, Strategy::Dacvr(None)]
    }

    /// Partial barrier of a `dacvr` run on `n` followers.
    pub fn barrier(&self, n: usize) -> Option<usize> {
        match self {
            Strategy::Dacvr(Some(k)) => Some(*k),
            Strategy::Dacvr(None) => Some(n.div_ceil(2).max(1)),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Base => f.write_str("base"),
            Strategy::Ccvr => f.write_str("ccvr"),
            Strategy::Dscvr => f.write_str("dscvr"),
            Strategy::Dacvr(None) => f.write_str("dacvr"),
            Strategy::Dacvr(Some(k)) => write!(f, "dacvr:{k}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = CvrError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(Strategy::Base),
            "ccvr" => Ok(Strategy::Ccvr),
            "dscvr" => Ok(Strategy::Dscvr),
            "dacvr" => Ok(Strategy::Dacvr(None)),
            _ => s
                .strip_prefix("dacvr:")
                .and_then(|k| k.parse().ok())
                .map(|k| Strategy::Dacvr(Some(k)))
                .ok_or_else(|| CvrError::Config(format!("unknown strategy `{s}`"))),
        }
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything a run needs besides the feeder and the series.
#[derive(Debug, Clone)]
pub struct BenchSettings {
    pub admm: AdmmConfig,
    /// Voltage margin of the centralized model, which has no feedback to
    /// correct its loss-free voltages.
    pub ccvr_v_margin: f64,
    pub bus: LatencyPolicy,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub minute: usize,
    pub p_kw: f64,
    /// Per phase extremes over the buses carrying that phase.
    pub v_min: [Option<f64>; 3],
    pub v_max: [Option<f64>; 3],
    pub iterations: usize,
    pub converged: bool,
    /// Bus phases outside their voltage band.
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub strategy: String,
    pub config_hash: String,
    pub base_power_kva: f64,
    pub steps: Vec<StepReport>,
    /// Voltage magnitudes per step and bus.
    pub voltages: Vec<Vec<PhaseVector>>,
    /// Iteration records tagged with their step index.
    pub traces: Vec<(usize, IterRecord)>,
    /// Step index and reason if the run stopped early.
    pub failed_at: Option<(usize, String)>,
}

impl RunReport {
    fn new(strategy: String, config_hash: String, base_power_kva: f64) -> Self {
        RunReport {
            strategy,
            config_hash,
            base_power_kva,
            steps: Vec::new(),
            voltages: Vec::new(),
            traces: Vec::new(),
            failed_at: None,
        }
    }

    /// Σ P·Δt with Δt of one minute.
    pub fn energy_kwh(&self) -> f64 {
        self.steps.iter().map(|s| s.p_kw / 60.0).sum()
    }

    pub fn violations(&self) -> usize {
        self.steps.iter().map(|s| s.violations).sum()
    }

    /// Percent reduction against a paired base run.
    pub fn reduction_pct(&self, base: &RunReport) -> f64 {
        let b = base.energy_kwh();
        if b == 0.0 {
            return 0.0;
        }
        100.0 * (b - self.energy_kwh()) / b
    }

    pub fn total_iterations(&self) -> usize {
        self.steps.iter().map(|s| s.iterations).sum()
    }

    pub fn voltage_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in &self.steps {
            for p in 0..3 {
                if let (Some(a), Some(b)) = (s.v_min[p], s.v_max[p]) {
                    lo = lo.min(a);
                    hi = hi.max(b);
                }
            }
        }
        (lo, hi)
    }

    fn push(&mut self, feeder: &Feeder, minute: usize, m: &MeasurementSet, iterations: usize, converged: bool) {
        let mut v_min = [None::<f64>; 3];
        let mut v_max = [None::<f64>; 3];
        let mut violations = 0;
        for (bus, v) in feeder.buses.iter().zip(&m.v_bus) {
            for p in v.mask().iter() {
                let x = v.get(p);
                v_min[p] = Some(v_min[p].map_or(x, |y| y.min(x)));
                v_max[p] = Some(v_max[p].map_or(x, |y| y.max(x)));
                if x * x < bus.v_min || x * x > bus.v_max {
                    violations += 1;
                }
            }
        }
        self.steps.push(StepReport {
            minute,
            p_kw: m.substation_power(feeder) * self.base_power_kva,
            v_min,
            v_max,
            iterations,
            converged,
            violations,
        });
        self.voltages.push(m.v_bus.clone());
    }
}

fn zero_dispatch(feeder: &Feeder) -> Vec<PhaseVector> {
    feeder.inverters.iter().map(|i| PhaseVector::zeros(i.s_cap.mask())).collect()
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs one strategy over the series. Setup problems are errors; a step
/// that fails stops the run and is recorded in `failed_at`.
pub fn run_benchmark(
    feeder: &Feeder,
    part: &Partition,
    series: &ScenarioTimeSeries,
    strategy: Strategy,
    settings: &BenchSettings,
) -> Result<RunReport, CvrError> {
    series.check()?;
    let nf = part.num_followers();
    if let Some(k) = strategy.barrier(nf) {
        if k < 1 || k > nf {
            return Err(CvrError::Config(format!("{strategy}: partial barrier {k} outside 1..={nf}")));
        }
    }
    let mut report = RunReport::new(strategy.to_string(), settings.config_hash.clone(), feeder.base_power_kva);
    if series.is_empty() {
        return Ok(report);
    }
    let outcome = match strategy {
        Strategy::Base => run_base(feeder, series, &mut report),
        Strategy::Ccvr => run_ccvr(feeder, part, series, settings, &mut report),
        Strategy::Dscvr | Strategy::Dacvr(_) => run_admm(feeder, part, series, strategy, settings, &mut report),
    };
    if let Err((step, e)) = outcome {
        log::error!("{strategy}: step {step} failed: {e}");
        report.failed_at = Some((step, e.to_string()));
    }
    Ok(report)
}

type StepError = (usize, CvrError);

fn run_base(feeder: &Feeder, series: &ScenarioTimeSeries, report: &mut RunReport) -> Result<(), StepError> {
    let dispatch = zero_dispatch(feeder);
    let mut prev: Option<MeasurementSet> = None;
    for t in 0..series.len() {
        let pf = solve_powerflow(feeder, &dispatch, &series.multipliers(t), prev.as_ref(), &PfOptions::default())
            .map_err(|e| (t, e))?;
        report.push(feeder, series.timestamps[t], &pf.measurement, 0, true);
        prev = Some(pf.measurement);
    }
    Ok(())
}

fn run_ccvr(
    feeder: &Feeder,
    part: &Partition,
    series: &ScenarioTimeSeries,
    settings: &BenchSettings,
    report: &mut RunReport,
) -> Result<(), StepError> {
    let qp = SolverSettings { tol: settings.admm.qp_tol, ..SolverSettings::default() };
    let mut dispatch = zero_dispatch(feeder);
    let mut warm: Option<QpSolution> = None;
    let mut prev: Option<MeasurementSet> = None;
    for t in 0..series.len() {
        let mult = series.multipliers(t);
        let step = |e| (t, e);
        // the ZIP expansion point is the latest measurement
        let meas = match &prev {
            Some(m) => m.clone(),
            None => solve_powerflow(feeder, &dispatch, &mult, None, &PfOptions::default()).map_err(step)?.measurement,
        };
        let lin = Linearization::from_measurement(feeder, &meas, &mult, EpsMode::DropEps).map_err(step)?;
        let solved = solve_centralized(feeder, part, &lin, settings, &qp, warm.as_ref()).map_err(step)?;
        let converged = solved.is_some();
        if let Some((q, sol)) = solved {
            dispatch = q;
            warm = Some(sol);
        } else {
            log::warn!("ccvr: step {t} has no usable solution, keeping the previous dispatch");
        }
        let pf = solve_powerflow(feeder, &dispatch, &mult, Some(&meas), &PfOptions::default()).map_err(step)?;
        report.push(feeder, series.timestamps[t], &pf.measurement, 1, converged);
        prev = Some(pf.measurement);
    }
    Ok(())
}

fn usable(sol: &QpSolution) -> bool {
    sol.status == QpStatus::Optimal || (sol.status == QpStatus::MaxIter && sol.kkt_residual <= 1e-4)
}

fn solve_centralized(
    feeder: &Feeder,
    part: &Partition,
    lin: &Linearization,
    settings: &BenchSettings,
    qp: &SolverSettings,
    warm: Option<&QpSolution>,
) -> Result<Option<(Vec<PhaseVector>, QpSolution)>, CvrError> {
    let attempt = |opts: &SubproblemOptions, warm: Option<&QpSolution>| -> Result<_, CvrError> {
        let sub = build_centralized(feeder, part, lin, EpsMode::DropEps, opts)?;
        let warm = warm.filter(|w| w.x.len() == sub.qp.num_vars() && w.y_eq.len() == sub.qp.num_eq());
        let sol = solve_with(&sub.qp, warm, qp)?;
        Ok((sub, sol))
    };
    let base = SubproblemOptions { v_margin: settings.ccvr_v_margin, ..settings.admm.subproblem };
    let (mut sub, mut sol) = attempt(&base, warm)?;
    if sol.status == QpStatus::Infeasible {
        if let Some(weight) = settings.admm.soft_voltage_fallback {
            let opts = SubproblemOptions { soft_voltage: Some(weight), ..base };
            (sub, sol) = attempt(&opts, None)?;
        }
    }
    if !usable(&sol) {
        return Ok(None);
    }
    let mut dispatch = zero_dispatch(feeder);
    for (k, q) in sub.dispatch(feeder, &sol.x) {
        dispatch[k] = q;
    }
    Ok(Some((dispatch, sol)))
}

fn run_admm(
    feeder: &Feeder,
    part: &Partition,
    series: &ScenarioTimeSeries,
    strategy: Strategy,
    settings: &BenchSettings,
    report: &mut RunReport,
) -> Result<(), StepError> {
    let nf = part.num_followers();
    let mut cfg = settings.admm.clone();
    let mut policy = settings.bus.clone();
    match strategy.barrier(nf) {
        Some(k) => {
            cfg.mode = AdmmMode::Async;
            cfg.partial_barrier = Some(k);
            if k < nf && policy.random_subset.is_none() {
                policy.random_subset = Some(k);
            }
        }
        None => cfg.mode = AdmmMode::Sync,
    }
    let dims: Vec<usize> = part.links.iter().map(|l| l.dim()).collect();
    let first = series.multipliers(0);
    let m0 = solve_powerflow(feeder, &zero_dispatch(feeder), &first, None, &PfOptions::default())
        .map_err(|e| (0, e))?
        .measurement;
    let mut coord = Coordinator::new(feeder, part, cfg.clone(), first, m0).map_err(|e| (0, e))?;
    for t in 0..series.len() {
        let step = |e| (t, e);
        if t > 0 {
            coord.advance(series.multipliers(t), t).map_err(step)?;
        }
        let result = match cfg.mode {
            AdmmMode::Sync => coord.run(None),
            AdmmMode::Async => {
                let mut bus = SimBus::new(policy.clone(), dims.clone(), step_seed(settings.seed, t)).map_err(step)?;
                coord.run(Some(&mut bus))
            }
        }
        .map_err(step)?;
        report.push(feeder, series.timestamps[t], &result.measurement, result.iterations, result.converged);
        report.traces.extend(result.records.into_iter().map(|r| (t, r)));
    }
    Ok(())
}

