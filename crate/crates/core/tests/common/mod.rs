#![allow(dead_code)]

use cvr_core::network::{BoundaryLink, Branch, Bus, Feeder, Inverter, Zone};
use cvr_core::phase::{Mask, PhaseMatrix, PhaseVector};
use num_complex::Complex64;

pub fn empty_feeder(v_source: f64) -> Feeder {
    Feeder {
        buses: Vec::new(),
        branches: Vec::new(),
        inverters: Vec::new(),
        boundary_links: Vec::new(),
        substation_bus: 0,
        base_power_kva: 100.0,
        base_v_primary_kv: 13.8,
        base_v_secondary_kv: 0.208,
        v_source,
    }
}

/// Source bus 0 feeding bus 1 over a single-phase line with a
/// constant-power load `p + jq`.
pub fn two_bus(r: f64, x: f64, p: f64, q: f64, v_source: f64) -> Feeder {
    let m = Mask::single(0);
    let mut f = empty_feeder(v_source);
    f.buses.push(Bus::new(0, Zone::Primary, m));
    let mut load = Bus::new(1, Zone::Primary, m);
    load.zip_p = [0.0, 0.0, 1.0];
    load.zip_q = [0.0, 0.0, 1.0];
    load.load_mult_p = PhaseVector::new([p, 0.0, 0.0], m);
    load.load_mult_q = PhaseVector::new([q, 0.0, 0.0], m);
    f.buses.push(load);
    f.branches.push(Branch {
        from: 0,
        to: 1,
        z: PhaseMatrix::symmetric(Complex64::new(r, x), Complex64::new(0.0, 0.0), m),
        phases: m,
    });
    f
}

/// Three-phase primary of two buses with one three-phase secondary of two
/// buses; one inverter at the secondary end.
pub fn tiny_integrated() -> Feeder {
    let abc = Mask::ABC;
    let mut f = empty_feeder(1.0);
    let z = |s: f64| PhaseMatrix::symmetric(Complex64::new(0.01 * s, 0.02 * s), Complex64::new(0.002 * s, 0.004 * s), abc);
    f.buses.push(Bus::new(0, Zone::Primary, abc));
    let mut b1 = Bus::new(1, Zone::Primary, abc);
    b1.load_mult_p = PhaseVector::splat(0.2, abc);
    b1.load_mult_q = PhaseVector::splat(0.06, abc);
    f.buses.push(b1);
    f.buses.push(Bus::new(2, Zone::Boundary(0), abc));
    let mut b3 = Bus::new(3, Zone::Secondary(0), abc);
    b3.load_mult_p = PhaseVector::new([0.1, 0.12, 0.08], abc);
    b3.load_mult_q = PhaseVector::new([0.03, 0.04, 0.02], abc);
    f.buses.push(b3);
    f.branches.push(Branch { from: 0, to: 1, z: z(1.0), phases: abc });
    f.branches.push(Branch { from: 2, to: 3, z: z(3.0), phases: abc });
    f.boundary_links.push(BoundaryLink { boundary_bus: 2, primary_bus: 1, secondary_id: 0, phases: abc });
    let s = PhaseVector::splat(0.05, abc);
    f.inverters.push(Inverter { bus: 3, s_cap: s, p_g: s.scale(1.0 / 1.1) });
    f
}

pub fn zero_dispatch(f: &Feeder) -> Vec<PhaseVector> {
    f.inverters.iter().map(|i| PhaseVector::zeros(i.s_cap.mask())).collect()
}
