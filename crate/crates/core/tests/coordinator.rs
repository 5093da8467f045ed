mod common;

use common::zero_dispatch;
use cvr_core::coordinator::*;
use cvr_core::generator::reference_feeder;
use cvr_core::network::{partition, Feeder, Partition};
use cvr_core::powerflow::{solve_powerflow, MeasurementSet, Multipliers, PfOptions};
use cvr_core::simbus::{AgentId, FailureWindow, Latency, LatencyPolicy, SimBus};
use cvr_core::subproblem::b_sign;
use cvr_core::CvrError;

fn fixture() -> (Feeder, Partition, MeasurementSet) {
    let f = reference_feeder();
    let p = partition(&f).unwrap();
    let m = solve_powerflow(&f, &zero_dispatch(&f), &Multipliers::PEAK, None, &PfOptions::default()).unwrap().measurement;
    (f, p, m)
}

fn bus(p: &Partition, policy: LatencyPolicy, seed: u64) -> SimBus {
    SimBus::new(policy, p.links.iter().map(|l| l.dim()).collect(), seed).unwrap()
}

fn async_cfg(barrier: Option<usize>) -> AdmmConfig {
    AdmmConfig { mode: AdmmMode::Async, partial_barrier: barrier, ..AdmmConfig::default() }
}

#[test]
fn penalty_follows_residual_balance() {
    let cfg = AdmmConfig::default();
    // (r, s) pairs and the hand-applied rule: ×5 when r > 10 s, ÷5 when s > 10 r
    let script = [(1.0, 0.01), (1.0, 0.01), (0.001, 1.0), (0.5, 0.5), (0.01, 1.0), (0.01, 1.0), (1.0, 0.1)];
    let mut expect = vec![0.05];
    let mut rho = 0.05;
    for &(r, s) in &script {
        rho = update_penalty(rho, r, s, &cfg);
        expect.push(rho);
    }
    let hand = [0.05, 0.05 * 5.0, 0.05 * 5.0 * 5.0, 0.05 * 5.0 * 5.0 / 5.0, 0.05 * 5.0 * 5.0 / 5.0];
    assert_eq!(&expect[..5], &hand);
    assert_eq!(expect[5], hand[4] / 5.0);
    assert_eq!(expect[6], hand[4] / 5.0 / 5.0);
    // r = 10 s exactly sits on the boundary and leaves rho alone
    assert_eq!(expect[7], expect[6]);
}

#[test]
fn config_checks() {
    let n = 8;
    for bad in [
        AdmmConfig { partial_barrier: Some(0), ..AdmmConfig::default() },
        AdmmConfig { partial_barrier: Some(9), ..AdmmConfig::default() },
        AdmmConfig { bounded_delay: 0, ..AdmmConfig::default() },
        AdmmConfig { bounded_delay_per: vec![(8, 3)], ..AdmmConfig::default() },
        AdmmConfig { mu: 1.0, ..AdmmConfig::default() },
        AdmmConfig { rho0: 0.0, ..AdmmConfig::default() },
        AdmmConfig { measurement_noise: -1.0, ..AdmmConfig::default() },
    ] {
        assert!(matches!(bad.check(n), Err(CvrError::Config(_))), "{bad:?}");
    }
    let per = AdmmConfig { bounded_delay_per: vec![(2, 3)], ..AdmmConfig::default() };
    assert_eq!((per.delay_of(2), per.delay_of(1)), (3, 10));
}

#[test]
fn async_needs_a_bus() {
    let (f, p, m) = fixture();
    let mut c = Coordinator::new(&f, &p, async_cfg(None), Multipliers::PEAK, m).unwrap();
    assert!(matches!(c.run(None), Err(CvrError::Config(_))));
}

#[test]
fn dual_step_is_exact() {
    let (f, p, m) = fixture();
    let cfg = AdmmConfig { max_iter: 1, ..AdmmConfig::default() };
    let mut c = Coordinator::new(&f, &p, cfg, Multipliers::PEAK, m).unwrap();
    let x_b = c.state().x_b.clone();
    let r = c.run_sync().unwrap();
    assert_eq!(r.iterations, 1);
    assert!(!r.converged, "no leader solve yet");
    let st = c.state();
    let mut sq = 0.0;
    for (n, fol) in st.followers.iter().enumerate() {
        let d = fol.z_b.len();
        for i in 0..d {
            let res = x_b[n][i] + b_sign(i, d) * fol.z_b[i];
            assert_eq!(fol.lambda[i], 0.0 + 0.05 * res);
            sq += res * res;
        }
        assert_eq!(st.lambda_tilde[n], fol.lambda);
        assert_eq!(st.z_tilde[n], fol.z_b);
    }
    assert_eq!(r.records[0].r_norm, sq.sqrt());
}

#[test]
fn sync_and_async_coincide() {
    let (f, p, m) = fixture();
    let base = AdmmConfig { max_iter: 12, primal_tol: 1e-12, dual_tol: 1e-12, bounded_delay: 1, ..AdmmConfig::default() };
    let mut s = Coordinator::new(&f, &p, base.clone(), Multipliers::PEAK, m.clone()).unwrap();
    let rs = s.run(None).unwrap();
    let mut a = Coordinator::new(&f, &p, AdmmConfig { mode: AdmmMode::Async, ..base }, Multipliers::PEAK, m).unwrap();
    let mut b = bus(&p, LatencyPolicy::default(), 1);
    let ra = a.run(Some(&mut b)).unwrap();
    assert_eq!(rs.records.len(), 12);
    for (x, y) in rs.records.iter().zip(&ra.records) {
        assert_eq!((x.r_norm, x.s_norm, x.rho, x.objective), (y.r_norm, y.s_norm, y.rho, y.objective));
        assert_eq!(y.leader_clock, x.iteration as u64);
    }
    assert_eq!(rs.dispatch, ra.dispatch);
    assert_eq!(s.state().x, a.state().x);
}

#[test]
fn barrier_waits_for_slow_follower() {
    let (f, p, m) = fixture();
    let n = p.num_followers();
    let mut policy = LatencyPolicy::default();
    policy.per_follower.insert(0, Latency::Constant { clocks: 5 });
    let first_clock = |barrier: Option<usize>| {
        let cfg = AdmmConfig { max_iter: 1, ..async_cfg(barrier) };
        let mut c = Coordinator::new(&f, &p, cfg, Multipliers::PEAK, m.clone()).unwrap();
        let r = c.run(Some(&mut bus(&p, policy.clone(), 3))).unwrap();
        (r.records[0].leader_clock, r.records[0].arrived)
    };
    // the full barrier blocks until the uplink sent at clock 1 lands at 6
    assert_eq!(first_clock(None), (6, n));
    assert_eq!(first_clock(Some(n - 1)), (1, n - 1));
    assert_eq!(first_clock(Some(1)), (1, n - 1));
}

#[test]
fn single_report_barrier_runs_on_stale_data() {
    let (f, p, m) = fixture();
    let mut policy = LatencyPolicy { default: Latency::Constant { clocks: 3 }, ..LatencyPolicy::default() };
    policy.per_follower.insert(4, Latency::Constant { clocks: 0 });
    let cfg = AdmmConfig { max_iter: 400, ..async_cfg(Some(1)) };
    let mut c = Coordinator::new(&f, &p, cfg, Multipliers::PEAK, m).unwrap();
    let mut b = bus(&p, policy, 5);
    let r = c.run(Some(&mut b)).unwrap();
    assert!(r.records.iter().any(|x| x.arrived == 1));
    assert!(r.converged, "{} iterations", r.iterations);
    // τ = 10 with latency 3 never forces a violation
    assert!(b.trace().iter().all(|t| t.event != "bound_violation"));
}

#[test]
fn staleness_respects_bound() {
    let (f, p, m) = fixture();
    let policy = LatencyPolicy { default: Latency::Constant { clocks: 3 }, ..LatencyPolicy::default() };
    let cfg = AdmmConfig { bounded_delay: 5, max_iter: 60, ..async_cfg(Some(2)) };
    let mut c = Coordinator::new(&f, &p, cfg, Multipliers::PEAK, m).unwrap();
    let mut b = bus(&p, policy, 8);
    // an over-age follower at a leader update would panic inside the loop
    c.run(Some(&mut b)).unwrap();
    let st = c.state();
    for fol in &st.followers {
        assert!(st.leader_clock - fol.last_update_clock <= 5);
    }
}

#[test]
fn violations_logged_only_while_follower_down() {
    let (f, p, m) = fixture();
    let policy = LatencyPolicy {
        failures: vec![FailureWindow { agent: AgentId::Follower(2), start: 10, end: 40 }],
        ..LatencyPolicy::default()
    };
    let cfg = AdmmConfig { bounded_delay: 5, max_iter: 200, ..async_cfg(Some(4)) };
    let mut c = Coordinator::new(&f, &p, cfg, Multipliers::PEAK, m).unwrap();
    let mut b = bus(&p, policy, 8);
    let r = c.run(Some(&mut b)).unwrap();
    let notes: Vec<_> = b.trace().iter().filter(|t| t.event == "bound_violation").collect();
    assert!(!notes.is_empty());
    for t in notes {
        assert!((10..=40).contains(&t.clock) && t.from == AgentId::Follower(2), "{t:?}");
    }
    assert!(r.converged);
}

fn first_below(barrier: usize, seed: u64) -> usize {
    let (f, p, m) = fixture();
    let n = p.num_followers();
    let policy = LatencyPolicy { random_subset: (barrier < n).then_some(barrier), ..LatencyPolicy::default() };
    let mut c = Coordinator::new(&f, &p, async_cfg(Some(barrier)), Multipliers::PEAK, m).unwrap();
    let r = c.run(Some(&mut bus(&p, policy, seed))).unwrap();
    assert!(r.converged, "barrier {barrier}");
    r.records.iter().skip(1).find(|x| x.r_norm < 1e-3).map(|x| x.iteration).unwrap()
}

#[test]
fn smaller_barrier_needs_more_iterations() {
    let full = first_below(8, 2024);
    let quarter = first_below(2, 2024);
    assert!(full < quarter, "{full} vs {quarter}");
}

#[test]
fn frozen_measurements_hold_the_model() {
    let (f, p, m) = fixture();
    let cfg = AdmmConfig { online: false, ..AdmmConfig::default() };
    let mut c = Coordinator::new(&f, &p, cfg, Multipliers::PEAK, m).unwrap();
    let before = c.linearization().clone();
    let r = c.run_sync().unwrap();
    assert!(r.converged);
    assert_eq!(c.linearization(), &before);
}

#[test]
fn meter_noise_knob() {
    let (f, p, m) = fixture();
    let run = |noise: f64, seed: u64| {
        let cfg = AdmmConfig { measurement_noise: noise, noise_seed: seed, max_iter: 3, ..AdmmConfig::default() };
        let mut c = Coordinator::new(&f, &p, cfg, Multipliers::PEAK, m.clone()).unwrap();
        let r = c.run_sync().unwrap();
        (c.linearization().clone(), r)
    };
    let (clean, rc) = run(0.0, 0);
    let (noisy, rn) = run(1e-3, 7);
    assert_ne!(clean, noisy);
    assert_eq!(run(1e-3, 7).0, noisy);
    // the reported physical state is exact in both runs
    let exact = solve_powerflow(&f, &rn.dispatch, &Multipliers::PEAK, None, &PfOptions::default()).unwrap().measurement;
    let (lo, hi) = rn.measurement.voltage_range();
    let (elo, ehi) = exact.voltage_range();
    assert!((lo - elo).abs() < 1e-9 && (hi - ehi).abs() < 1e-9);
    assert!(rc.records.iter().all(|x| x.r_norm.is_finite()));
}

#[test]
fn iteration_trace_csv() {
    let rec = IterRecord { leader_clock: 4, iteration: 2, r_norm: 0.5, s_norm: 0.25, rho: 0.05, objective: 1.5, arrived: 3 };
    let mut out = Vec::new();
    write_iteration_trace(&[rec], &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text, "leader_clock,r_norm,s_norm,rho,objective,arrived\n4,5e-1,2.5e-1,5e-2,1.500000000000,3\n");
}
