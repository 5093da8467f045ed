//! Deterministic synthetic feeders.
//!
//! Primary lines use overhead 13.8 kV impedances, secondaries use 0.208 kV
//! triplex with the service transformer folded into the first branch below
//! the copy bus. All values are converted to per-unit on the 100 kVA base.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::network::{BoundaryLink, Branch, Bus, Feeder, Inverter, Zone};
use crate::phase::{Mask, PhaseMatrix, PhaseVector};
use crate::CvrError;

pub const BASE_POWER_KVA: f64 = 100.0;
pub const BASE_V_PRIMARY_KV: f64 = 13.8;
pub const BASE_V_SECONDARY_KV: f64 = 0.208;

/// Primary impedance base, ohms.
pub fn z_base_primary() -> f64 {
    BASE_V_PRIMARY_KV * BASE_V_PRIMARY_KV * 1000.0 / BASE_POWER_KVA
}

pub fn z_base_secondary() -> f64 {
    BASE_V_SECONDARY_KV * BASE_V_SECONDARY_KV * 1000.0 / BASE_POWER_KVA
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseConfig {
    ThreePhase,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeederSpec {
    pub n_primary_buses: usize,
    pub n_secondaries: usize,
    pub buses_per_secondary: usize,
    pub phase_config: PhaseConfig,
    pub seed: u64,
    /// Sum of nominal active loads, p.u.
    #[serde(default = "default_peak")]
    pub peak_load: f64,
    /// Share of the peak load placed in the secondaries.
    #[serde(default = "default_secondary_share")]
    pub secondary_share: f64,
    /// Total inverter capacity as a fraction of peak load.
    #[serde(default = "default_pv_fraction")]
    pub pv_fraction: f64,
    #[serde(default = "default_v_source")]
    pub v_source: f64,
    /// Service transformer series impedance per phase, p.u. on the system base.
    #[serde(default = "default_transformer")]
    pub transformer_z: [f64; 2],
    /// Range of triplex service segment lengths, kft.
    #[serde(default = "default_service_length")]
    pub service_length_kft: [f64; 2],
}

fn default_peak() -> f64 {
    4.5
}
fn default_secondary_share() -> f64 {
    0.7
}
fn default_pv_fraction() -> f64 {
    0.3
}
fn default_v_source() -> f64 {
    1.0
}
fn default_transformer() -> [f64; 2] {
    [0.08, 0.16]
}
fn default_service_length() -> [f64; 2] {
    [0.08, 0.15]
}

impl FeederSpec {
    pub fn new(
        n_primary_buses: usize,
        n_secondaries: usize,
        buses_per_secondary: usize,
        phase_config: PhaseConfig,
        seed: u64,
    ) -> Self {
        FeederSpec {
            n_primary_buses,
            n_secondaries,
            buses_per_secondary,
            phase_config,
            seed,
            peak_load: default_peak(),
            secondary_share: default_secondary_share(),
            pv_fraction: default_pv_fraction(),
            v_source: default_v_source(),
            transformer_z: default_transformer(),
            service_length_kft: default_service_length(),
        }
    }
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Overhead three-phase line, ohms per mile.
fn primary_abc() -> [[Complex64; 3]; 3] {
    let ab = c(0.1560, 0.5017);
    let ac = c(0.1580, 0.4236);
    let bc = c(0.1535, 0.3849);
    [[c(0.3465, 1.0179), ab, ac], [ab, c(0.3375, 1.0478), bc], [ac, bc, c(0.3414, 1.0348)]]
}

/// Single-phase overhead lateral, ohms per mile.
const PRIMARY_SINGLE: (f64, f64) = (1.3292, 1.3475);
/// Triplex service conductor, ohms per 1000 ft.
const TRIPLEX: (f64, f64) = (0.20, 0.06);
const TRIPLEX_MUTUAL: (f64, f64) = (0.04, 0.02);

const PF_TAN: f64 = 0.3287; // tan(acos(0.95))

pub fn generate_synthetic_feeder(spec: &FeederSpec) -> Result<Feeder, CvrError> {
    let cfg = |m: &str| Err(CvrError::Config(m.to_string()));
    if spec.n_secondaries < 1 {
        return cfg("n_secondaries must be at least 1");
    }
    if spec.buses_per_secondary < 2 {
        return cfg("buses_per_secondary must be at least 2");
    }
    if spec.n_primary_buses < 2 {
        return cfg("n_primary_buses must be at least 2");
    }
    let [lo, hi] = spec.service_length_kft;
    if !(lo > 0.0 && lo < hi) {
        return cfg("service_length_kft must be an increasing positive range");
    }
    if !(spec.peak_load > 0.0) || !(0.0..=1.0).contains(&spec.secondary_share) || !(spec.pv_fraction >= 0.0) {
        return cfg("peak_load, secondary_share or pv_fraction out of range");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mixed = spec.phase_config == PhaseConfig::Mixed;
    let zbp = z_base_primary();
    let zbs = z_base_secondary();

    let mut buses: Vec<Bus> = Vec::new();
    let mut branches: Vec<Branch> = Vec::new();
    buses.push(Bus::new(0, Zone::Primary, Mask::ABC));
    // the trunk stays three-phase; laterals branch off any earlier bus
    let mut trunk_tip = 0;
    for i in 1..spec.n_primary_buses {
        let lateral = i > 1 && rng.random_bool(0.35);
        let parent = if lateral { rng.random_range(1..i) } else { trunk_tip };
        let pph = buses[parent].phases;
        let phases = if mixed && lateral && rng.random_bool(0.5) {
            let opts: Vec<usize> = pph.iter().collect();
            Mask::single(opts[rng.random_range(0..opts.len())])
        } else {
            pph
        };
        let miles = rng.random_range(0.3..1.0);
        let z = if phases.count() == 3 {
            PhaseMatrix::new(primary_abc(), Mask::ABC).scale(miles / zbp)
        } else {
            let zs = c(PRIMARY_SINGLE.0, PRIMARY_SINGLE.1) * (miles / zbp);
            PhaseMatrix::symmetric(zs, c(0.0, 0.0), phases)
        };
        buses.push(Bus::new(i, Zone::Primary, phases));
        branches.push(Branch { from: parent, to: i, z, phases });
        if !lateral && phases.count() == 3 {
            trunk_tip = i;
        }
    }

    // Attach secondaries round-robin over a shuffled list of primary buses.
    let mut hosts: Vec<usize> = (1..spec.n_primary_buses).collect();
    for k in (1..hosts.len()).rev() {
        let j = rng.random_range(0..=k);
        hosts.swap(k, j);
    }
    let mut links = Vec::new();
    let mut inverters = Vec::new();
    let mut customers_of: Vec<Vec<usize>> = Vec::new();
    for s in 0..spec.n_secondaries {
        let host = hosts[s % hosts.len()];
        let hph = buses[host].phases;
        let phases = if hph.count() == 1 {
            hph
        } else if mixed && rng.random_bool(0.5) {
            Mask::single(rng.random_range(0..3))
        } else {
            hph
        };
        let copy = buses.len();
        buses.push(Bus::new(copy, Zone::Boundary(s), phases));
        links.push(BoundaryLink { boundary_bus: copy, primary_bus: host, secondary_id: s, phases });
        let mut customers = Vec::new();
        for k in 0..spec.buses_per_secondary - 1 {
            let id = buses.len();
            let parent = if k == 0 {
                copy
            } else if k >= 3 && rng.random_bool(0.3) {
                customers[rng.random_range(0..k)]
            } else {
                customers[k - 1]
            };
            let kft = rng.random_range(spec.service_length_kft[0]..spec.service_length_kft[1]);
            let zs = c(TRIPLEX.0, TRIPLEX.1) * (kft / zbs);
            let zm = c(TRIPLEX_MUTUAL.0, TRIPLEX_MUTUAL.1) * (kft / zbs);
            let mut z = PhaseMatrix::symmetric(zs, zm, phases);
            if k == 0 {
                let zt = PhaseMatrix::symmetric(c(spec.transformer_z[0], spec.transformer_z[1]), c(0.0, 0.0), phases);
                let mut m = z.raw();
                for i in 0..3 {
                    for j in 0..3 {
                        m[i][j] += zt.get(i, j);
                    }
                }
                z = PhaseMatrix::new(m, phases);
            }
            buses.push(Bus::new(id, Zone::Secondary(s), phases));
            branches.push(Branch { from: parent, to: id, z, phases });
            customers.push(id);
        }
        customers_of.push(customers);
    }

    // Loads: random weights normalized to the requested totals.
    let mut place = |targets: Vec<usize>, total: f64, buses: &mut Vec<Bus>| {
        let mut w: Vec<(usize, usize, f64)> = Vec::new();
        for &b in &targets {
            for ph in buses[b].phases.iter() {
                w.push((b, ph, rng.random_range(0.5..1.5)));
            }
        }
        let sum: f64 = w.iter().map(|t| t.2).sum();
        for (b, ph, x) in w {
            let p = total * x / sum;
            let mut lp = buses[b].load_mult_p;
            let mut lq = buses[b].load_mult_q;
            lp.set(ph, p);
            lq.set(ph, p * PF_TAN);
            buses[b].load_mult_p = lp;
            buses[b].load_mult_q = lq;
        }
    };
    let primary_targets: Vec<usize> = (1..spec.n_primary_buses).collect();
    let secondary_targets: Vec<usize> = customers_of.iter().flatten().copied().collect();
    let sec_total = spec.peak_load * spec.secondary_share;
    place(primary_targets, spec.peak_load - sec_total, &mut buses);
    place(secondary_targets, sec_total, &mut buses);

    let per_inverter = spec.pv_fraction * spec.peak_load / (2 * spec.n_secondaries) as f64;
    for customers in &customers_of {
        let mid = customers[(customers.len() - 1) / 2];
        let end = *customers.last().expect("at least one customer");
        for bus in [mid, end] {
            let ph = buses[bus].phases;
            let s = PhaseVector::splat(per_inverter / ph.count() as f64, ph);
            inverters.push(Inverter { bus, s_cap: s, p_g: s.scale(1.0 / 1.1) });
        }
    }

    Ok(Feeder {
        buses,
        branches,
        inverters,
        boundary_links: links,
        substation_bus: 0,
        base_power_kva: BASE_POWER_KVA,
        base_v_primary_kv: BASE_V_PRIMARY_KV,
        base_v_secondary_kv: BASE_V_SECONDARY_KV,
        v_source: spec.v_source,
    })
}

/// Spec of the bundled reference fixture: 13 primary buses, 8 mixed-phase
/// secondaries of 4 buses each.
pub fn reference_spec() -> FeederSpec {
    FeederSpec {
        peak_load: 4.5,
        v_source: 1.0,
        transformer_z: [0.02, 0.40],
        service_length_kft: [0.05, 0.10],
        ..FeederSpec::new(13, 8, 4, PhaseConfig::Mixed, 2024)
    }
}

pub fn reference_feeder() -> Feeder {
    generate_synthetic_feeder(&reference_spec()).expect("reference spec is valid")
}
