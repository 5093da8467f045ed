mod common;

use std::collections::BTreeSet;

use common::{tiny_integrated, two_bus};
use cvr_core::generator::{generate_synthetic_feeder, reference_feeder, FeederSpec, PhaseConfig};
use cvr_core::network::{partition, validate, Branch, Feeder, Zone};
use cvr_core::phase::{Mask, PhaseMatrix, PhaseVector};
use cvr_core::CvrError;
use num_complex::Complex64;
use proptest::prelude::*;

fn rules(f: &Feeder) -> Vec<String> {
    validate(f).into_iter().map(|v| v.rule).collect()
}

#[test]
fn two_bus_is_valid() {
    assert!(validate(&two_bus(0.01, 0.02, 0.5, 0.1, 1.0)).is_empty());
    assert!(validate(&tiny_integrated()).is_empty());
    assert!(validate(&reference_feeder()).is_empty());
}

#[test]
fn cycle_is_not_radial() {
    let mut f = tiny_integrated();
    let abc = Mask::ABC;
    f.branches.push(Branch {
        from: 0,
        to: 1,
        z: PhaseMatrix::symmetric(Complex64::new(0.01, 0.02), Complex64::new(0.0, 0.0), abc),
        phases: abc,
    });
    assert!(rules(&f).contains(&"branch set not radial".to_string()), "{:?}", rules(&f));
}

#[test]
fn zip_coefficients_must_sum_to_one() {
    let mut f = two_bus(0.01, 0.02, 0.5, 0.1, 1.0);
    f.buses[1].zip_p = [0.5, 0.5, 0.5];
    assert_eq!(rules(&f), vec!["zip_p does not sum to 1".to_string()]);
}

#[test]
fn violations_name_the_entity() {
    let mut f = two_bus(0.01, 0.02, 0.5, 0.1, 1.0);
    f.buses[1].v_min = 1.2;
    let v = validate(&f);
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].entity, "bus 1");
    assert!(v[0].to_string().starts_with("bus 1: "));
}

#[test]
fn substation_must_be_primary() {
    let mut f = tiny_integrated();
    f.substation_bus = 3;
    assert!(!validate(&f).is_empty());
}

#[test]
fn impedance_outside_phases_rejected() {
    let mut f = two_bus(0.01, 0.02, 0.5, 0.1, 1.0);
    let zs = Complex64::new(0.01, 0.02);
    f.branches[0].z = PhaseMatrix::symmetric(zs, zs, Mask::ABC);
    assert!(rules(&f).contains(&"z not restricted to branch phases".to_string()));
}

#[test]
fn inverter_q_cap() {
    let f = tiny_integrated();
    let inv = &f.inverters[0];
    // p_g = s/1.1 at full sun
    let expect = 0.05 * (1.0 - 1.0 / 1.21f64).sqrt();
    for p in 0..3 {
        assert!((inv.q_cap(1.0).get(p) - expect).abs() < 1e-15);
        assert_eq!(inv.q_cap(0.0).get(p), 0.05);
    }
    let saturated = cvr_core::network::Inverter { p_g: inv.s_cap.scale(2.0), ..inv.clone() };
    assert_eq!(saturated.q_cap(1.0).values(), [0.0; 3]);
}

#[test]
fn boundary_matrices_three_phase() {
    let l = &tiny_integrated().boundary_links[0];
    assert_eq!(l.dim(), 9);
    let a = l.a_matrix();
    let b = l.b_matrix();
    for i in 0..9 {
        for j in 0..9 {
            assert_eq!(a[i][j], if i == j { 1.0 } else { 0.0 });
            let d = if i < 6 { 1.0 } else { -1.0 };
            assert_eq!(b[i][j], if i == j { d } else { 0.0 });
        }
    }
}

#[test]
fn boundary_matrices_single_phase() {
    let f = reference_feeder();
    let l = f.boundary_links.iter().find(|l| l.phases.count() == 1).expect("mixed fixture has a single-phase secondary");
    assert_eq!(l.dim(), 3);
    let b = l.b_matrix();
    assert_eq!([b[0][0], b[1][1], b[2][2]], [1.0, 1.0, -1.0]);
    assert_eq!(l.residual(&[0.2, 0.1, 0.98], &[-0.2, -0.1, 0.98]), vec![0.0; 3]);
}

#[test]
fn one_secondary_has_nine_boundary_entries() {
    let p = partition(&tiny_integrated()).unwrap();
    assert_eq!(p.num_followers(), 1);
    assert_eq!(p.links[0].dim(), 9);
    assert_eq!(p.followers[0].root, 2);
    assert_eq!(p.followers[0].inverters, vec![0]);
}

#[test]
fn no_secondaries_no_followers() {
    let p = partition(&two_bus(0.01, 0.02, 0.5, 0.1, 1.0)).unwrap();
    assert_eq!(p.num_followers(), 0);
    assert!(p.links.is_empty());
    assert_eq!(p.leader.buses, vec![0, 1]);
}

#[test]
fn dangling_link_is_structural() {
    let mut f = tiny_integrated();
    f.boundary_links[0].boundary_bus = 99;
    assert!(matches!(partition(&f), Err(CvrError::Structural(_))));
}

#[test]
fn invalid_feeder_not_partitioned() {
    let mut f = tiny_integrated();
    f.buses[1].zip_q = [1.0, 1.0, 1.0];
    assert!(matches!(partition(&f), Err(CvrError::Structural(_))));
}

#[test]
fn forty_four_secondaries() {
    let f = generate_synthetic_feeder(&FeederSpec::new(13, 44, 4, PhaseConfig::Mixed, 7)).unwrap();
    assert_eq!(f.boundary_links.len(), 44);
    let p = partition(&f).unwrap();
    assert_eq!(p.num_followers(), 44);
    let mut seen = BTreeSet::new();
    for (s, net) in p.followers.iter().enumerate() {
        for &b in &net.buses {
            assert!(matches!(f.buses[b].zone, Zone::Secondary(n) | Zone::Boundary(n) if n == s));
            assert!(seen.insert(b), "bus {b} in two followers");
        }
    }
    let secondary: BTreeSet<usize> = f.buses.iter().filter(|b| b.zone.network().is_some()).map(|b| b.id).collect();
    assert_eq!(seen, secondary);
}

#[test]
fn each_secondary_gets_two_inverters() {
    let f = generate_synthetic_feeder(&FeederSpec::new(6, 5, 4, PhaseConfig::ThreePhase, 3)).unwrap();
    let p = partition(&f).unwrap();
    for net in &p.followers {
        assert_eq!(net.inverters.len(), 2);
        // one at the far end of the secondary
        let last = *net.buses.last().unwrap();
        assert!(net.inverters.iter().any(|&k| f.inverters[k].bus == last));
    }
    assert!(p.leader.inverters.is_empty());
}

#[test]
fn inverter_capacity_near_thirty_percent() {
    let spec = FeederSpec { peak_load: 100.0, ..FeederSpec::new(13, 20, 4, PhaseConfig::Mixed, 11) };
    let f = generate_synthetic_feeder(&spec).unwrap();
    assert!((f.total_peak_load() - 100.0).abs() < 1e-9);
    let cap: f64 = f.inverters.iter().map(|i| i.s_cap.sum()).sum();
    assert!((28.0..=32.0).contains(&cap), "capacity {cap}");
}

#[test]
fn bad_specs_are_config_errors() {
    for spec in [
        FeederSpec::new(13, 0, 4, PhaseConfig::Mixed, 1),
        FeederSpec::new(13, 2, 1, PhaseConfig::Mixed, 1),
    ] {
        assert!(matches!(generate_synthetic_feeder(&spec), Err(CvrError::Config(_))));
    }
}

#[test]
fn feeder_file_round_trip() {
    let f = reference_feeder();
    let text = f.to_toml();
    for section in ["[[bus]]", "[[branch]]", "[[inverter]]", "[[boundary]]"] {
        assert!(text.contains(section), "missing {section}");
    }
    let back = Feeder::from_toml(&text).unwrap();
    assert_eq!(back, f);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("feeder.toml");
    f.save(&path).unwrap();
    assert_eq!(Feeder::load(&path).unwrap(), f);
}

#[test]
fn missing_file_reports_path() {
    let err = Feeder::load(std::path::Path::new("/nonexistent/feeder.toml")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/feeder.toml"));
}

#[test]
fn masked_entries_stay_zero() {
    let m = Mask([true, false, true]);
    let a = PhaseVector::new([1.0, 5.0, 2.0], m);
    assert_eq!(a.get(1), 0.0);
    let b = PhaseVector::new([3.0, 0.0, 4.0], m);
    for v in [a + b, a - b, a.hadamard(&b), a.divide(&b), a.scale(3.0), -a] {
        assert_eq!(v.mask(), m);
        assert_eq!(v.get(1), 0.0);
    }
}

proptest! {
    #[test]
    fn generation_is_reproducible(np in 2usize..8, ns in 1usize..6, nb in 2usize..5, mixed: bool, seed: u64) {
        let cfg = if mixed { PhaseConfig::Mixed } else { PhaseConfig::ThreePhase };
        let spec = FeederSpec::new(np, ns, nb, cfg, seed);
        let a = generate_synthetic_feeder(&spec).unwrap();
        let b = generate_synthetic_feeder(&spec).unwrap();
        prop_assert_eq!(a.to_toml(), b.to_toml());
        prop_assert!(validate(&a).is_empty());
    }

    #[test]
    fn partition_is_a_bijection(np in 2usize..8, ns in 1usize..6, nb in 2usize..5, seed: u64) {
        let f = generate_synthetic_feeder(&FeederSpec::new(np, ns, nb, PhaseConfig::Mixed, seed)).unwrap();
        let p = partition(&f).unwrap();
        let mut buses: Vec<usize> = p.leader.buses.clone();
        let mut branches: Vec<usize> = p.leader.branches.clone();
        let mut invs: Vec<usize> = p.leader.inverters.clone();
        for net in &p.followers {
            buses.extend(&net.buses);
            branches.extend(&net.branches);
            invs.extend(&net.inverters);
        }
        buses.sort_unstable();
        branches.sort_unstable();
        invs.sort_unstable();
        prop_assert_eq!(buses, (0..f.buses.len()).collect::<Vec<_>>());
        prop_assert_eq!(branches, (0..f.branches.len()).collect::<Vec<_>>());
        prop_assert_eq!(invs, (0..f.inverters.len()).collect::<Vec<_>>());
        for (n, l) in p.links.iter().enumerate() {
            prop_assert!(p.leader.buses.contains(&l.primary_bus));
            prop_assert!(p.followers[n].buses.contains(&l.boundary_bus));
        }
    }

    #[test]
    fn phase_ops_preserve_mask(a in prop::array::uniform3(-5.0..5.0f64), b in prop::array::uniform3(0.1..5.0f64), m in prop::array::uniform3(any::<bool>())) {
        let mask = Mask(m);
        let (x, y) = (PhaseVector::new(a, mask), PhaseVector::new(b, mask));
        for v in [x.hadamard(&y), x.divide(&y), x + y] {
            prop_assert_eq!(v.mask(), mask);
            for p in 0..3 {
                if !m[p] {
                    prop_assert_eq!(v.get(p), 0.0);
                }
            }
        }
    }
}
