use std::path::Path;

use cvr_cli::benchmark::{run_benchmark, BenchSettings, Strategy};
use cvr_cli::commands;
use cvr_cli::config::{apply_override, Config, FeederSource};
use cvr_cli::report::{write_convergence, write_power_series, write_summary, write_voltage_profile};
use cvr_cli::scenario::{load_shape, pv_shape, ScenarioTimeSeries, MINUTES_PER_DAY};
use cvr_core::coordinator::AdmmConfig;
use cvr_core::generator::reference_feeder;
use cvr_core::network::partition;
use cvr_core::powerflow::Multipliers;
use cvr_core::simbus::{AgentId, Latency, LatencyPolicy};
use cvr_core::CvrError;

const MINIMAL: &str = "seed = 7\n";

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn minimal_config_takes_defaults() {
    let cfg = Config::from_toml(MINIMAL, &[]).unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.feeder, FeederSource::Reference);
    assert_eq!(cfg.admm, AdmmConfig::default());
    assert_eq!(cfg.strategies, Strategy::all());
    assert_eq!(cfg.ccvr.v_margin, 0.008);
}

#[test]
fn seed_is_required() {
    assert!(matches!(Config::from_toml("[admm]\nrho0 = 1.0\n", &[]), Err(CvrError::Parse(_))));
}

#[test]
fn unknown_keys_rejected() {
    assert!(Config::from_toml("seed = 1\n[admm]\nrhoo = 1.0\n", &[]).is_err());
    assert!(Config::from_toml("seed = 1\nextra = 2\n", &[]).is_err());
}

#[test]
fn overrides_apply_in_order() {
    let cfg = Config::from_toml(
        MINIMAL,
        &["admm.rho0=0.1".into(), "seed=9".into(), "bus.default.kind=constant".into(), "bus.default.clocks=3".into()],
    )
    .unwrap();
    assert_eq!(cfg.admm.rho0, 0.1);
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.bus.default, Latency::Constant { clocks: 3 });
    let cfg = Config::from_toml(MINIMAL, &["strategies=[\"base\",\"dacvr:2\"]".into()]).unwrap();
    assert_eq!(cfg.strategies, vec![Strategy::Base, Strategy::Dacvr(Some(2))]);
    let mut t = toml::Table::new();
    assert!(apply_override(&mut t, "novalue").is_err());
    assert!(apply_override(&mut t, "a..b=1").is_err());
    apply_override(&mut t, "a=1").unwrap();
    assert!(apply_override(&mut t, "a.b=1").is_err());
}

#[test]
fn bad_values_are_config_errors() {
    assert!(matches!(Config::from_toml(MINIMAL, &["bus.drop_probability=1.5".into()]), Err(CvrError::Config(_))));
    assert!(matches!(Config::from_toml(MINIMAL, &["scenario.load_noise=-1.0".into()]), Err(CvrError::Config(_))));
}

#[test]
fn config_round_trip() {
    let mut cfg = Config::from_toml(&std::fs::read_to_string(config_path()).unwrap(), &[]).unwrap();
    cfg.bus.per_follower.insert(3, Latency::Uniform { lo: 1, hi: 4 });
    let back = Config::from_toml(&cfg.to_toml(), &[]).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.trace.failures[0].agent, AgentId::Leader);
    let f = cfg.feeder().unwrap();
    assert_eq!(cfg.hash(&f), back.hash(&f));
    assert_eq!(cfg.hash(&f).len(), 64);
    let other = Config { seed: 1, ..cfg.clone() };
    assert_ne!(other.hash(&f), cfg.hash(&f));
}

#[test]
fn missing_config_file_names_path() {
    let err = Config::load(Path::new("/nowhere/cvr.toml"), &[]).unwrap_err();
    assert!(err.to_string().contains("/nowhere/cvr.toml"));
}

fn config_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml")
}

#[test]
fn strategy_labels() {
    for s in ["base", "ccvr", "dscvr", "dacvr", "dacvr:3"] {
        assert_eq!(s.parse::<Strategy>().unwrap().to_string(), s);
    }
    for s in ["", "dacvr:", "dacvr:x", "cvr"] {
        assert!(matches!(s.parse::<Strategy>(), Err(CvrError::Config(_))), "{s}");
    }
    assert_eq!(Strategy::Dacvr(None).barrier(8), Some(4));
    assert_eq!(Strategy::Dacvr(None).barrier(5), Some(3));
    assert_eq!(Strategy::Dscvr.barrier(8), None);
}

#[test]
fn daily_series_shape() {
    let s = ScenarioTimeSeries::daily(3, 0.01, 0.03).unwrap();
    assert_eq!(s.len(), MINUTES_PER_DAY);
    assert_eq!(s.timestamps, (0..MINUTES_PER_DAY).collect::<Vec<_>>());
    s.check().unwrap();
    assert!((0..MINUTES_PER_DAY).all(|m| (0.0..=1.0).contains(&load_shape(m)) && (0.0..=1.0).contains(&pv_shape(m))));
    assert!(s.pv[..300].iter().all(|&x| x == 0.0), "no sun before dawn");
    assert_eq!(s, ScenarioTimeSeries::daily(3, 0.01, 0.03).unwrap());
    assert_ne!(s, ScenarioTimeSeries::daily(4, 0.01, 0.03).unwrap());
    let clean = ScenarioTimeSeries::daily(3, 0.0, 0.0).unwrap();
    assert!((0..MINUTES_PER_DAY).all(|m| clean.load_p[m] == load_shape(m)));
}

#[test]
fn scenario_csv_round_trip() {
    let s = ScenarioTimeSeries::daily(5, 0.01, 0.03).unwrap().window(600, 30);
    let mut buf = Vec::new();
    s.write_csv(&mut buf).unwrap();
    assert_eq!(ScenarioTimeSeries::read_csv(&buf[..]).unwrap(), s);
    let empty = s.window(0, 0);
    let mut buf = Vec::new();
    empty.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "minute,load_p,load_q,pv\n");
    assert!(ScenarioTimeSeries::read_csv("minute,load_p,load_q,pv\n0,-1,0,0\n".as_bytes()).is_err());
}

fn settings() -> BenchSettings {
    BenchSettings {
        admm: AdmmConfig::default(),
        ccvr_v_margin: 0.008,
        bus: LatencyPolicy::default(),
        seed: 2024,
        config_hash: "h".into(),
    }
}

#[test]
fn empty_series_gives_header_only_csvs() {
    let f = reference_feeder();
    let p = partition(&f).unwrap();
    let empty = ScenarioTimeSeries::constant(Multipliers::PEAK, 0);
    let r = run_benchmark(&f, &p, &empty, Strategy::Dscvr, &settings()).unwrap();
    assert!(r.steps.is_empty() && r.failed_at.is_none());
    let text = |write: &dyn Fn(&mut csv::Writer<&mut Vec<u8>>)| {
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            write(&mut w);
            w.flush().unwrap();
        }
        String::from_utf8(buf).unwrap()
    };
    assert_eq!(text(&|w| write_power_series(&r, w).unwrap()).lines().count(), 1);
    assert_eq!(text(&|w| write_voltage_profile(&r, w).unwrap()), "minute,bus,phase,v\n");
    assert_eq!(text(&|w| write_convergence(&r, w).unwrap()).lines().count(), 1);
    assert_eq!(text(&|w| write_summary(&[], w).unwrap()).lines().count(), 1);
}

#[test]
fn barrier_out_of_range_rejected() {
    let f = reference_feeder();
    let p = partition(&f).unwrap();
    let s = ScenarioTimeSeries::constant(Multipliers::PEAK, 2);
    for k in [0, 9] {
        assert!(matches!(run_benchmark(&f, &p, &s, Strategy::Dacvr(Some(k)), &settings()), Err(CvrError::Config(_))));
    }
}

#[test]
fn full_barrier_async_matches_sync() {
    let f = reference_feeder();
    let p = partition(&f).unwrap();
    let s = ScenarioTimeSeries::daily(1, 0.01, 0.03).unwrap().window(1170, 3);
    let sync = run_benchmark(&f, &p, &s, Strategy::Dscvr, &settings()).unwrap();
    let mut set = settings();
    set.admm.bounded_delay = 1;
    let asy = run_benchmark(&f, &p, &s, Strategy::Dacvr(Some(8)), &set).unwrap();
    assert_eq!(sync.steps, asy.steps);
    assert_eq!(sync.voltages, asy.voltages);
}

#[test]
fn run_command_is_reproducible() {
    let cfg = Config::from_toml(
        &std::fs::read_to_string(config_path()).unwrap(),
        &["scenario.start=1170".into(), "scenario.steps=3".into()],
    )
    .unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = commands::run(&cfg, a.path()).unwrap();
    commands::run(&cfg, b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 1 + 3 * cfg.strategies.len());
    for n in names {
        assert_eq!(read(&a.path().join(&n)), read(&b.path().join(&n)), "{n:?}");
    }
    let summary = String::from_utf8(read(&a.path().join("summary.csv"))).unwrap();
    assert_eq!(summary.lines().count(), 1 + ra.len());
    assert!(summary.starts_with("strategy,steps,energy_kwh,reduction_pct,violations"));
    let power = String::from_utf8(read(&a.path().join("dacvr_4_power.csv"))).unwrap();
    assert_eq!(power.lines().count(), 4);
    let line = commands::describe(&ra[1], Some(&ra[0]));
    assert!(line.starts_with("ccvr") && line.contains("reduction"), "{line}");
}

#[test]
fn generate_writes_feeder_and_series() {
    let cfg = Config::from_toml(MINIMAL, &[]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = commands::generate(&cfg, dir.path()).unwrap();
    assert_eq!(cvr_core::network::Feeder::load(&paths[0]).unwrap(), reference_feeder());
    let s = ScenarioTimeSeries::read_csv(std::fs::File::open(&paths[1]).unwrap()).unwrap();
    assert_eq!(s, cfg.series().unwrap());
    assert_eq!(s.len(), MINUTES_PER_DAY);
}

#[test]
fn sweep_and_trace_outputs() {
    let cfg = Config::from_toml(
        &std::fs::read_to_string(config_path()).unwrap(),
        &[
            "sweep.partial_barriers=[4,8]".into(),
            // frozen model and tight stopping so the run outlasts the outage
            "admm.online=false".into(),
            "admm.primal_tol=1e-7".into(),
            "admm.dual_tol=1e-7".into(),
        ],
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let rows = commands::sweep(&cfg, dir.path()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.converged && r.first_below_tol.is_some()));
    assert!(dir.path().join("sweep_summary.csv").exists());
    assert!(dir.path().join("sweep_k4_lat0.csv").exists());
    let r = commands::trace(&cfg, dir.path()).unwrap();
    assert!(r.converged);
    assert!(r.records.last().unwrap().leader_clock > 50);
    let bus = String::from_utf8(read(&dir.path().join("trace_bus.csv"))).unwrap();
    assert!(bus.lines().any(|l| l.contains("suppressed")));
}
