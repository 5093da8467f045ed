//! CSV output. Every writer emits its header even when there are no rows.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cvr_core::phase::PHASES;
use cvr_core::CvrError;

use crate::benchmark::RunReport;

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_err(path: &Path, e: csv::Error) -> CvrError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CvrError::io(path, io),
        other => CvrError::Parse(format!("{}: {other:?}", path.display())),
    }
}

/// Creates `path` and hands a CSV writer to `body`.
pub fn with_csv(path: &Path, body: impl FnOnce(&mut csv::Writer<BufWriter<File>>) -> csv::Result<()>) -> Result<(), CvrError> {
    let file = File::create(path).map_err(|e| CvrError::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    body(&mut w).map_err(|e| csv_err(path, e))?;
    w.flush().map_err(|e| CvrError::io(path, e))
}

/// `minute,p_kw,v_min_a,v_min_b,v_min_c,v_max_a,v_max_b,v_max_c,iterations,converged,violations`
pub fn write_power_series<W: Write>(r: &RunReport, w: &mut csv::Writer<W>) -> csv::Result<()> {
    w.write_record([
        "minute", "p_kw", "v_min_a", "v_min_b", "v_min_c", "v_max_a", "v_max_b", "v_max_c", "iterations", "converged",
        "violations",
    ])?;
    for s in &r.steps {
        let mut row = vec![s.minute.to_string(), s.p_kw.to_string()];
        row.extend(s.v_min.iter().map(|x| opt(*x)));
        row.extend(s.v_max.iter().map(|x| opt(*x)));
        row.extend([s.iterations.to_string(), s.converged.to_string(), s.violations.to_string()]);
        w.write_record(&row)?;
    }
    Ok(())
}

/// Long format `minute,bus,phase,v`.
pub fn write_voltage_profile<W: Write>(r: &RunReport, w: &mut csv::Writer<W>) -> csv::Result<()> {
    w.write_record(["minute", "bus", "phase", "v"])?;
    for (s, vs) in r.steps.iter().zip(&r.voltages) {
        let minute = s.minute.to_string();
        for (b, v) in vs.iter().enumerate() {
            for p in v.mask().iter() {
                w.write_record([minute.as_str(), &b.to_string(), &PHASES[p].to_string(), &v.get(p).to_string()])?;
            }
        }
    }
    Ok(())
}

/// `step,leader_clock,iteration,r_norm,s_norm,rho,objective,arrived`
pub fn write_convergence<W: Write>(r: &RunReport, w: &mut csv::Writer<W>) -> csv::Result<()> {
    w.write_record(["step", "leader_clock", "iteration", "r_norm", "s_norm", "rho", "objective", "arrived"])?;
    for (step, rec) in &r.traces {
        w.write_record([
            step.to_string(),
            rec.leader_clock.to_string(),
            rec.iteration.to_string(),
            rec.r_norm.to_string(),
            rec.s_norm.to_string(),
            rec.rho.to_string(),
            rec.objective.to_string(),
            rec.arrived.to_string(),
        ])?;
    }
    Ok(())
}

/// One row per strategy:
/// `strategy,steps,energy_kwh,reduction_pct,violations,v_min,v_max,iterations,failed_at,config_hash`.
/// Reductions are against the report labelled `base`, if present.
pub fn write_summary<W: Write>(reports: &[RunReport], w: &mut csv::Writer<W>) -> csv::Result<()> {
    w.write_record([
        "strategy", "steps", "energy_kwh", "reduction_pct", "violations", "v_min", "v_max", "iterations", "failed_at",
        "config_hash",
    ])?;
    let base = reports.iter().find(|r| r.strategy == "base");
    for r in reports {
        let (lo, hi) = r.voltage_range();
        let range = |x: f64| if x.is_finite() { x.to_string() } else { String::new() };
        w.write_record([
            r.strategy.clone(),
            r.steps.len().to_string(),
            r.energy_kwh().to_string(),
            base.map(|b| r.reduction_pct(b).to_string()).unwrap_or_default(),
            r.violations().to_string(),
            range(lo),
            range(hi),
            r.total_iterations().to_string(),
            r.failed_at.as_ref().map(|(t, _)| t.to_string()).unwrap_or_default(),
            r.config_hash.clone(),
        ])?;
    }
    Ok(())
}

/// File-name stem of a strategy label (`dacvr:4` → `dacvr_4`).
pub fn stem(label: &str) -> String {
    label.replace(':', "_")
}

/// Writes the power series, voltage profile and convergence trace of
/// one report into `dir`, returning the paths.
pub fn emit_report(r: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, CvrError> {
    std::fs::create_dir_all(dir).map_err(|e| CvrError::io(dir, e))?;
    let s = stem(&r.strategy);
    let power = dir.join(format!("{s}_power.csv"));
    let volts = dir.join(format!("{s}_voltage.csv"));
    let conv = dir.join(format!("{s}_convergence.csv"));
    with_csv(&power, |w| write_power_series(r, w))?;
    with_csv(&volts, |w| write_voltage_profile(r, w))?;
    with_csv(&conv, |w| write_convergence(r, w))?;
    Ok(vec![power, volts, conv])
}
