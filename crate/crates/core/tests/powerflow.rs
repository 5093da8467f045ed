mod common;

use common::{two_bus, zero_dispatch};
use cvr_core::generator::{generate_synthetic_feeder, reference_feeder, FeederSpec, PhaseConfig};
use cvr_core::network::Bus;
use cvr_core::network::Zone;
use cvr_core::phase::{Mask, PhaseVector};
use cvr_core::powerflow::*;
use cvr_core::CvrError;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pf(f: &cvr_core::network::Feeder, d: &[PhaseVector], m: &Multipliers) -> PowerFlowResult {
    solve_powerflow(f, d, m, None, &PfOptions::default()).unwrap()
}

#[test]
fn no_load_network_is_flat() {
    let f = reference_feeder();
    let r = pf(&f, &zero_dispatch(&f), &Multipliers::ZERO);
    for v in &r.measurement.v_bus {
        for p in v.mask().iter() {
            assert!((v.get(p) - f.v_source).abs() < 1e-14);
        }
    }
    assert!(r.measurement.s_branch.iter().flatten().all(|s| s.norm() == 0.0));
}

/// |V1|² solves v² − (V0² − 2(rP + xQ)) v + |z|²|S|² = 0.
fn closed_form(r: f64, x: f64, p: f64, q: f64, v0: f64) -> f64 {
    let b = v0 * v0 - 2.0 * (r * p + x * q);
    let c = (r * r + x * x) * (p * p + q * q);
    ((b + (b * b - 4.0 * c).sqrt()) / 2.0).sqrt()
}

#[test]
fn two_bus_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let (r, x) = (rng.random_range(0.001..0.05), rng.random_range(0.001..0.08));
        let (p, q) = (rng.random_range(0.0..2.0), rng.random_range(-0.5..1.0));
        let v0 = rng.random_range(0.95..1.05);
        let f = two_bus(r, x, p, q, v0);
        let m = pf(&f, &[], &Multipliers::PEAK).measurement;
        let expect = closed_form(r, x, p, q, v0);
        assert!((m.v_bus[1].get(0) - expect).abs() < 1e-9, "{} vs {expect}", m.v_bus[1].get(0));
    }
}

#[test]
fn reference_fixture_violates_at_peak() {
    let f = reference_feeder();
    let m = pf(&f, &zero_dispatch(&f), &Multipliers::PEAK).measurement;
    assert!(m.voltage_range().0 < 0.95);
}

#[test]
fn random_feeders_satisfy_branch_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..20 {
        let spec = FeederSpec::new(
            rng.random_range(2..8),
            rng.random_range(1..5),
            rng.random_range(2..6),
            if case % 2 == 0 { PhaseConfig::Mixed } else { PhaseConfig::ThreePhase },
            case,
        );
        let spec = FeederSpec { peak_load: rng.random_range(0.3..2.0), ..spec };
        let f = generate_synthetic_feeder(&spec).unwrap();
        let mult = Multipliers { load_p: rng.random_range(0.2..1.0), load_q: rng.random_range(0.2..1.0), pv: rng.random_range(0.0..1.0) };
        let d: Vec<PhaseVector> = f
            .inverters
            .iter()
            .map(|i| {
                let k = rng.random_range(-1.0..1.0);
                i.q_cap(mult.pv).scale(k)
            })
            .collect();
        let m = pf(&f, &d, &mult).measurement;
        assert!(nonlinear_residual(&f, &m, &d, &mult) <= 1e-8);
    }
}

#[test]
fn overload_reports_divergence() {
    let f = two_bus(0.1, 0.2, 10.0, 5.0, 1.0);
    let err = solve_powerflow(&f, &[], &Multipliers::PEAK, None, &PfOptions::default()).unwrap_err();
    assert!(matches!(err, CvrError::Divergence { .. }));
}

#[test]
fn warm_start_needs_fewer_sweeps() {
    let f = reference_feeder();
    let d = zero_dispatch(&f);
    let cold = pf(&f, &d, &Multipliers::PEAK);
    let warm = solve_powerflow(&f, &d, &Multipliers::PEAK, Some(&cold.measurement), &PfOptions::default()).unwrap();
    assert!(warm.iterations < cold.iterations);
}

fn single_measurement(s: Complex64, vi: f64, vj: f64) -> (cvr_core::network::Feeder, MeasurementSet) {
    let f = two_bus(0.01, 0.02, 0.0, 0.0, 1.0);
    let m = Mask::single(0);
    let ms = MeasurementSet {
        timestamp: 0,
        s_branch: vec![[s, Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)]],
        v_bus: vec![PhaseVector::new([vi, 0.0, 0.0], m), PhaseVector::new([vj, 0.0, 0.0], m)],
        angle_bus: vec![PhaseVector::zeros(m), PhaseVector::zeros(m)],
    };
    (f, ms)
}

#[test]
fn epsilon_zero_flow() {
    let (f, m) = single_measurement(Complex64::new(0.0, 0.0), 1.0, 0.98);
    let e = estimate_epsilon(&f, &m).unwrap();
    assert_eq!((e.eps_p[0].get(0), e.eps_q[0].get(0), e.eps_v[0].get(0)), (0.0, 0.0, 0.0));
}

#[test]
fn epsilon_flat_voltage() {
    let s = Complex64::new(0.5, 0.2);
    let (f, m) = single_measurement(s, 1.0, 1.0);
    let e = estimate_epsilon(&f, &m).unwrap();
    assert_eq!(e.eps_p[0].get(0), 0.0);
    assert_eq!(e.eps_q[0].get(0), 0.0);
    let zi = Complex64::new(0.01, 0.02) * s.conj();
    assert!((e.eps_v[0].get(0) - zi.norm_sqr()).abs() < 1e-16);
}

#[test]
fn epsilon_hand_evaluated() {
    let (f, m) = single_measurement(Complex64::new(0.5, 0.2), 1.0, 0.98);
    let e = estimate_epsilon(&f, &m).unwrap();
    // (S / 1.0)(1.0 − 0.98) = 0.01 + 0.004j
    assert!((e.eps_p[0].get(0) - 0.01).abs() < 1e-15);
    assert!((e.eps_q[0].get(0) - 0.004).abs() < 1e-15);
    // z conj(S) = (0.01 + 0.02j)(0.5 − 0.2j) = 0.009 + 0.008j
    assert!((e.eps_v[0].get(0) - 0.000145).abs() < 1e-15);
}

#[test]
fn collapsed_voltage_rejected() {
    let (f, m) = single_measurement(Complex64::new(0.5, 0.2), 1.0, 1e-4);
    assert!(matches!(estimate_epsilon(&f, &m), Err(CvrError::Measurement(_))));
}

#[test]
fn measured_ratios_match_balanced_ratios_on_balanced_state() {
    let f = reference_feeder();
    let m = pf(&f, &zero_dispatch(&f), &Multipliers::ZERO).measurement;
    let ideal = drop_matrices(&f, None);
    let meas = drop_matrices(&f, Some(&m));
    for (a, b) in ideal.iter().zip(&meas) {
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.0[i][j] - b.0[i][j]).abs() < 1e-12);
                assert!((a.1[i][j] - b.1[i][j]).abs() < 1e-12);
            }
        }
    }
}

fn load_bus(kp: [f64; 3], kq: [f64; 3], lp: f64, lq: f64) -> Bus {
    let mut b = Bus::new(0, Zone::Primary, Mask::ABC);
    b.zip_p = kp;
    b.zip_q = kq;
    b.load_mult_p = PhaseVector::splat(lp, Mask::ABC);
    b.load_mult_q = PhaseVector::splat(lq, Mask::ABC);
    b
}

const TABLE_P: [f64; 3] = [0.96, -1.17, 1.21];
#[allow(clippy::approx_constant)]
const TABLE_Q: [f64; 3] = [6.28, -10.16, 4.88];

#[test]
fn constant_power_has_no_voltage_term() {
    let b = load_bus([0.0, 0.0, 1.0], [0.0, 0.0, 1.0], 0.7, 0.2);
    let z = linearize_zip(&b, &PhaseVector::splat(0.97, Mask::ABC)).unwrap();
    assert_eq!(z.a_p.values(), [0.0; 3]);
    assert_eq!(z.b_p.values(), [0.7; 3]);
    assert_eq!(z.b_q.values(), [0.2; 3]);
}

#[test]
fn table_coefficients_nominal_at_unit_voltage() {
    let b = load_bus(TABLE_P, TABLE_Q, 1.0, 1.0);
    let z = linearize_zip(&b, &PhaseVector::splat(1.0, Mask::ABC)).unwrap();
    let (p, q) = z.eval(&PhaseVector::splat(1.0, Mask::ABC));
    for ph in 0..3 {
        assert!((p.get(ph) - 1.0).abs() < 1e-12);
        assert!((q.get(ph) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn expansion_error_small_near_point() {
    // The only inexact term is k2·|V|; its remainder is k2·pL·(V − Vm)²/(2Vm),
    // so the bound depends on the per-phase load. 0.4 p.u. exceeds every
    // per-phase load of the reference fixture.
    let lp = 0.4;
    let b = load_bus(TABLE_P, TABLE_Q, lp, lp);
    let z = linearize_zip(&b, &PhaseVector::splat(0.97, Mask::ABC)).unwrap();
    let v = PhaseVector::splat(0.95 * 0.95, Mask::ABC);
    let (ap, _) = z.eval(&v);
    let (tp, _) = zip_load(&b, &PhaseVector::splat(0.95, Mask::ABC));
    let err = ap.get(0) - tp.get(0);
    let remainder = TABLE_P[1] * lp * (0.95f64 - 0.97).powi(2) / (2.0 * 0.97);
    assert!((err - remainder).abs() < 1e-14, "{err} vs {remainder}");
    assert!(err.abs() <= 1e-4);
}

#[test]
fn nonpositive_expansion_rejected() {
    let b = load_bus(TABLE_P, TABLE_Q, 1.0, 1.0);
    let err = linearize_zip(&b, &PhaseVector::new([1.0, 0.0, 1.0], Mask::ABC)).unwrap_err();
    assert!(matches!(err, CvrError::Domain(_)));
}

#[test]
fn lower_voltage_lowers_table_load() {
    let b = load_bus(TABLE_P, TABLE_Q, 1.0, 1.0);
    let lo = zip_load(&b, &PhaseVector::splat(0.95, Mask::ABC)).0.sum();
    let hi = zip_load(&b, &PhaseVector::splat(1.0, Mask::ABC)).0.sum();
    assert!(lo < hi);
}

proptest! {
    #[test]
    fn zip_tangent_at_expansion_point(vm in 0.9..1.1f64, lp in 0.01..2.0f64) {
        let b = load_bus(TABLE_P, TABLE_Q, lp, lp);
        let mask = Mask::ABC;
        let z = linearize_zip(&b, &PhaseVector::splat(vm, mask)).unwrap();
        let true_p = |v: f64| zip_load(&b, &PhaseVector::splat(v.sqrt(), mask)).0.get(0);
        let at = vm * vm;
        let (ap, _) = z.eval(&PhaseVector::splat(at, mask));
        prop_assert!((ap.get(0) - true_p(at)).abs() <= 1e-12);
        let h = 1e-6;
        let fd = (true_p(at + h) - true_p(at - h)) / (2.0 * h);
        prop_assert!((z.a_p.get(0) - fd).abs() <= 1e-6);
    }
}

#[test]
fn measurement_csv_has_schema() {
    let f = reference_feeder();
    let m = pf(&f, &zero_dispatch(&f), &Multipliers::PEAK).measurement;
    let mut buf = Vec::new();
    m.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("time,element,phase,quantity,value\n"));
    assert!(text.contains("bus:0,a,v,1\n"));
}
