//! Nonlinear three-phase power flow and feedback linearization.
//!
//! The oracle runs backward/forward sweeps on complex phasors. Branch flows
//! are sending-end powers `S_ij = V_i ⊙ conj(I_ij)` and voltages follow
//! `V_j = V_i − z I_ij`. Boundary links are ideal: the copy bus shares the
//! primary bus phasors.
//!
//! Voltage convention: measurements carry magnitudes (and angles); the
//! optimization works with squared magnitudes `v = |V|²`. The loss and drop
//! terms are evaluated with the complex phasors so that they are the exact
//! remainders of the linear branch flow equations at the measured point.

use std::io::Write;

use num_complex::Complex64;

use crate::network::{Bus, Edge, Feeder, Topology};
use crate::phase::{Mask, PhaseVector};
use crate::CvrError;

pub type Phasors = [Complex64; 3];

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// `α = e^{−j2π/3}`.
pub fn alpha() -> Complex64 {
    Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI / 3.0)
}

/// Scalar multipliers applied uniformly to nominal loads and PV output.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Multipliers {
    pub load_p: f64,
    pub load_q: f64,
    pub pv: f64,
}

impl Multipliers {
    pub const PEAK: Multipliers = Multipliers { load_p: 1.0, load_q: 1.0, pv: 0.0 };
    pub const ZERO: Multipliers = Multipliers { load_p: 0.0, load_q: 0.0, pv: 0.0 };
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub timestamp: usize,
    /// Sending-end complex power per branch phase.
    pub s_branch: Vec<Phasors>,
    /// Voltage magnitude (not squared).
    pub v_bus: Vec<PhaseVector>,
    /// Voltage angle, radians.
    pub angle_bus: Vec<PhaseVector>,
}

impl MeasurementSet {
    pub fn phasor(&self, bus: usize, phase: usize) -> Complex64 {
        Complex64::from_polar(self.v_bus[bus].get(phase), self.angle_bus[bus].get(phase))
    }

    pub fn phasors(&self, bus: usize) -> Phasors {
        let mut out = [ZERO; 3];
        for p in self.v_bus[bus].mask().iter() {
            out[p] = self.phasor(bus, p);
        }
        out
    }

    /// Squared magnitudes.
    pub fn v_squared(&self, bus: usize) -> PhaseVector {
        self.v_bus[bus].map(|x| x * x)
    }

    /// Extreme per-phase magnitudes over all buses.
    pub fn voltage_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in &self.v_bus {
            if let (Some(a), Some(b)) = (v.min(), v.max()) {
                lo = lo.min(a);
                hi = hi.max(b);
            }
        }
        (lo, hi)
    }

    /// Total active power leaving the substation.
    pub fn substation_power(&self, feeder: &Feeder) -> f64 {
        feeder
            .branches
            .iter()
            .zip(&self.s_branch)
            .filter(|(b, _)| b.from == feeder.substation_bus)
            .map(|(_, s)| s.iter().map(|z| z.re).sum::<f64>())
            .sum()
    }

    /// Meter readings with additive Gaussian error of standard deviation
    /// `sigma` p.u. on voltage magnitudes and branch powers. Angles are
    /// left exact.
    pub fn with_noise(&self, sigma: f64, rng: &mut impl rand::Rng) -> Result<MeasurementSet, CvrError> {
        let normal = rand_distr::Normal::new(0.0, sigma)
            .map_err(|e| CvrError::Config(format!("measurement noise: {e}")))?;
        let mut out = self.clone();
        for v in &mut out.v_bus {
            for p in v.mask().iter() {
                v.set(p, v.get(p) + rng.sample(normal));
            }
        }
        for s in &mut out.s_branch {
            for z in s.iter_mut().filter(|z| **z != ZERO) {
                *z += Complex64::new(rng.sample(normal), rng.sample(normal));
            }
        }
        Ok(out)
    }

    /// Long-format dump: `time,element,phase,quantity,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["time", "element", "phase", "quantity", "value"])?;
        let t = self.timestamp.to_string();
        for (b, (v, a)) in self.v_bus.iter().zip(&self.angle_bus).enumerate() {
            for p in v.mask().iter() {
                let ph = crate::phase::PHASES[p].to_string();
                let el = format!("bus:{b}");
                out.write_record([&t, &el, &ph, "v", &v.get(p).to_string()])?;
                out.write_record([&t, &el, &ph, "angle", &a.get(p).to_string()])?;
            }
        }
        for (k, s) in self.s_branch.iter().enumerate() {
            for (p, z) in s.iter().enumerate() {
                if *z == ZERO {
                    continue;
                }
                let ph = crate::phase::PHASES[p].to_string();
                let el = format!("branch:{k}");
                out.write_record([&t, &el, &ph, "p", &z.re.to_string()])?;
                out.write_record([&t, &el, &ph, "q", &z.im.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PowerFlowResult {
    pub measurement: MeasurementSet,
    pub converged: bool,
    pub iterations: usize,
    /// Last maximum voltage update.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PfOptions {
    /// Convergence threshold on the largest phasor update, p.u.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PfOptions {
    fn default() -> Self {
        PfOptions { tol: 1e-12, max_iter: 100 }
    }
}

/// True ZIP load at voltage magnitudes `vmag`, before time multipliers.
pub fn zip_load(bus: &Bus, vmag: &PhaseVector) -> (PhaseVector, PhaseVector) {
    let f = |k: [f64; 3], v: f64| k[0] * v * v + k[1] * v + k[2];
    let mut p = PhaseVector::zeros(bus.phases);
    let mut q = PhaseVector::zeros(bus.phases);
    for ph in bus.phases.iter() {
        let v = vmag.get(ph);
        p.set(ph, bus.load_mult_p.get(ph) * f(bus.zip_p, v));
        q.set(ph, bus.load_mult_q.get(ph) * f(bus.zip_q, v));
    }
    (p, q)
}

/// Net complex power drawn at each bus: ZIP load minus inverter output.
fn net_demand(
    feeder: &Feeder,
    dispatch: &[PhaseVector],
    mult: &Multipliers,
    v: &[Phasors],
) -> Vec<Phasors> {
    let mut s = vec![[ZERO; 3]; feeder.buses.len()];
    for bus in &feeder.buses {
        if !bus.has_load() {
            continue;
        }
        let mut mag = PhaseVector::zeros(bus.phases);
        for p in bus.phases.iter() {
            mag.set(p, v[bus.id][p].norm());
        }
        let (lp, lq) = zip_load(bus, &mag);
        for p in bus.phases.iter() {
            s[bus.id][p] += Complex64::new(lp.get(p) * mult.load_p, lq.get(p) * mult.load_q);
        }
    }
    for (k, inv) in feeder.inverters.iter().enumerate() {
        let pg = inv.p_out(mult.pv);
        for p in inv.s_cap.mask().iter() {
            s[inv.bus][p] -= Complex64::new(pg.get(p), dispatch[k].get(p));
        }
    }
    s
}

fn edge_mask(feeder: &Feeder, e: Edge) -> Mask {
    match e {
        Edge::Branch(k) => feeder.branches[k].phases,
        Edge::Link(k) => feeder.boundary_links[k].phases,
    }
}

/// Currents into each bus from its parent edge.
fn backward(feeder: &Feeder, topo: &Topology, v: &[Phasors], demand: &[Phasors]) -> Vec<Phasors> {
    let mut cur = vec![[ZERO; 3]; feeder.buses.len()];
    for &b in topo.order.iter().rev() {
        let mut i = [ZERO; 3];
        for p in feeder.buses[b].phases.iter() {
            if demand[b][p] != ZERO {
                i[p] = (demand[b][p] / v[b][p]).conj();
            }
        }
        for &(c, _) in &topo.children[b] {
            for p in 0..3 {
                i[p] += cur[c][p];
            }
        }
        cur[b] = i;
    }
    cur
}

pub fn flat_start(feeder: &Feeder) -> Vec<Phasors> {
    let a = alpha();
    let src = [Complex64::new(feeder.v_source, 0.0), a * feeder.v_source, a * a * feeder.v_source];
    feeder
        .buses
        .iter()
        .map(|b| {
            let mut v = [ZERO; 3];
            for p in b.phases.iter() {
                v[p] = src[p];
            }
            v
        })
        .collect()
}

/// Solves the nonlinear power flow for the given inverter reactive
/// dispatch. `warm` seeds the phasors from an earlier solution.
pub fn solve_powerflow(
    feeder: &Feeder,
    dispatch: &[PhaseVector],
    mult: &Multipliers,
    warm: Option<&MeasurementSet>,
    opts: &PfOptions,
) -> Result<PowerFlowResult, CvrError> {
    if dispatch.len() != feeder.inverters.len() {
        return Err(CvrError::Config(format!(
            "dispatch has {} entries for {} inverters",
            dispatch.len(),
            feeder.inverters.len()
        )));
    }
    let topo = feeder.topology()?;
    let mut v = match warm {
        Some(m) if m.v_bus.len() == feeder.buses.len() => (0..feeder.buses.len()).map(|b| m.phasors(b)).collect(),
        _ => flat_start(feeder),
    };
    let root = feeder.substation_bus;
    v[root] = flat_start(feeder)[root];

    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;
        let demand = net_demand(feeder, dispatch, mult, &v);
        let cur = backward(feeder, &topo, &v, &demand);
        let mut delta = 0.0f64;
        for &b in topo.order.iter().skip(1) {
            let (par, e) = topo.parent[b].expect("non-root bus has a parent");
            let mut nv = [ZERO; 3];
            let mask = edge_mask(feeder, e);
            let drop = match e {
                Edge::Branch(k) => feeder.branches[k].z.mul_vec(&cur[b]),
                Edge::Link(_) => [ZERO; 3],
            };
            for p in mask.iter() {
                nv[p] = v[par][p] - drop[p];
                delta = delta.max((nv[p] - v[b][p]).norm());
            }
            v[b] = nv;
        }
        residual = delta;
        if !residual.is_finite() {
            break;
        }
        if residual <= opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(CvrError::Divergence { iterations, residual });
    }
    // final backward pass so flows balance exactly at the returned voltages
    let demand = net_demand(feeder, dispatch, mult, &v);
    let cur = backward(feeder, &topo, &v, &demand);
    let mut s_branch = vec![[ZERO; 3]; feeder.branches.len()];
    for (k, br) in feeder.branches.iter().enumerate() {
        for p in br.phases.iter() {
            s_branch[k][p] = v[br.from][p] * cur[br.to][p].conj();
        }
    }
    let mut v_bus = Vec::with_capacity(v.len());
    let mut angle_bus = Vec::with_capacity(v.len());
    for (b, ph) in v.iter().enumerate() {
        let mask = feeder.buses[b].phases;
        v_bus.push(PhaseVector::new(ph.map(|z| z.norm()), mask));
        angle_bus.push(PhaseVector::new(ph.map(|z| z.arg()), mask));
    }
    Ok(PowerFlowResult {
        measurement: MeasurementSet { timestamp: 0, s_branch, v_bus, angle_bus },
        converged,
        iterations,
        residual,
    })
}

/// Largest violation of the exact branch flow equations by a measurement:
/// per-bus complex power balance (with branch losses) and per-branch
/// voltage drop.
pub fn nonlinear_residual(
    feeder: &Feeder,
    m: &MeasurementSet,
    dispatch: &[PhaseVector],
    mult: &Multipliers,
) -> f64 {
    let n = feeder.buses.len();
    let v: Vec<Phasors> = (0..n).map(|b| m.phasors(b)).collect();
    let demand = net_demand(feeder, dispatch, mult, &v);
    // inflow[b]: power arriving at b through its feeding branches, minus outflows
    let mut balance = demand.iter().map(|d| d.map(|z| -z)).collect::<Vec<_>>();
    let mut worst = 0.0f64;
    for (k, br) in feeder.branches.iter().enumerate() {
        let s = m.s_branch[k];
        let mut cur = [ZERO; 3];
        for p in br.phases.iter() {
            cur[p] = (s[p] / v[br.from][p]).conj();
        }
        let zi = br.z.mul_vec(&cur);
        for p in br.phases.iter() {
            let loss = zi[p] * cur[p].conj();
            balance[br.to][p] += s[p] - loss;
            balance[br.from][p] -= s[p];
            worst = worst.max((v[br.to][p] - (v[br.from][p] - zi[p])).norm());
        }
    }
    for l in &feeder.boundary_links {
        // power through the ideal link equals what the copy bus sends on
        for p in l.phases.iter() {
            let through = -balance[l.boundary_bus][p];
            balance[l.boundary_bus][p] += through;
            balance[l.primary_bus][p] -= through;
            worst = worst.max((v[l.boundary_bus][p] - v[l.primary_bus][p]).norm());
        }
    }
    for (b, bal) in balance.iter().enumerate() {
        if b == feeder.substation_bus {
            continue;
        }
        for z in bal {
            worst = worst.max(z.norm());
        }
    }
    worst
}

/// Nonlinear remainders of the linear branch flow model, per branch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonSet {
    pub eps_p: Vec<PhaseVector>,
    pub eps_q: Vec<PhaseVector>,
    /// Drop remainder for the voltage equation of the branch's receiving bus.
    pub eps_v: Vec<PhaseVector>,
}

impl EpsilonSet {
    pub fn zeros(feeder: &Feeder) -> Self {
        let z: Vec<PhaseVector> = feeder.branches.iter().map(|b| PhaseVector::zeros(b.phases)).collect();
        EpsilonSet { eps_p: z.clone(), eps_q: z.clone(), eps_v: z }
    }
}

pub const COLLAPSE_FLOOR: f64 = 1e-3;

/// Loss and drop remainders from measured flows and voltages:
/// `ε^p + jε^q = (S ⊘ V_i) ⊙ (V_i − V_j)` and
/// `ε^v = [z (S ⊘ V_i)^*] ⊙ [z (S ⊘ V_i)^*]^*`.
pub fn estimate_epsilon(feeder: &Feeder, m: &MeasurementSet) -> Result<EpsilonSet, CvrError> {
    if m.s_branch.len() != feeder.branches.len() || m.v_bus.len() != feeder.buses.len() {
        return Err(CvrError::Measurement("measurement does not cover the feeder".into()));
    }
    let mut out = EpsilonSet::zeros(feeder);
    for (k, br) in feeder.branches.iter().enumerate() {
        let vi = m.phasors(br.from);
        let vj = m.phasors(br.to);
        let mut cur = [ZERO; 3];
        for p in br.phases.iter() {
            for (bus, v) in [(br.from, vi[p]), (br.to, vj[p])] {
                if !(v.norm() > COLLAPSE_FLOOR) {
                    return Err(CvrError::Measurement(format!("bus {bus} phase {p} voltage below collapse floor")));
                }
            }
            cur[p] = (m.s_branch[k][p] / vi[p]).conj();
        }
        let zi = br.z.mul_vec(&cur);
        for p in br.phases.iter() {
            let e = (m.s_branch[k][p] / vi[p]) * (vi[p] - vj[p]);
            out.eps_p[k].set(p, e.re);
            out.eps_q[k].set(p, e.im);
            out.eps_v[k].set(p, zi[p].norm_sqr());
        }
    }
    Ok(out)
}

/// Real matrices `(r̄, x̄)` of the linear drop `v_j = v_i − 2(r̄ P + x̄ Q)`.
///
/// With `Γ_φψ` the ratio of sending-end phasors, `r̄ + j x̄ = conj(Γ) ⊙ z`.
/// Measured phasors give exact drops at the measured point; without a
/// measurement the balanced ratios `α^(φ−ψ)` are used.
pub fn drop_matrices(feeder: &Feeder, m: Option<&MeasurementSet>) -> Vec<([[f64; 3]; 3], [[f64; 3]; 3])> {
    let a = alpha();
    feeder
        .branches
        .iter()
        .map(|br| {
            let mut r = [[0.0; 3]; 3];
            let mut x = [[0.0; 3]; 3];
            let vi = m.map(|m| m.phasors(br.from));
            for i in br.phases.iter() {
                for j in br.phases.iter() {
                    let gamma = match vi {
                        Some(v) => v[i] / v[j],
                        None => a.powi(i as i32 - j as i32),
                    };
                    let w = gamma.conj() * br.z.get(i, j);
                    r[i][j] = w.re;
                    x[i][j] = w.im;
                }
            }
            (r, x)
        })
        .collect()
}

/// Affine load model in squared voltage: `p ≈ a_p ⊙ v + b_p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZipAffine {
    pub a_p: PhaseVector,
    pub b_p: PhaseVector,
    pub a_q: PhaseVector,
    pub b_q: PhaseVector,
}

impl ZipAffine {
    pub fn scaled(&self, load_p: f64, load_q: f64) -> Self {
        ZipAffine {
            a_p: self.a_p.scale(load_p),
            b_p: self.b_p.scale(load_p),
            a_q: self.a_q.scale(load_q),
            b_q: self.b_q.scale(load_q),
        }
    }

    pub fn eval(&self, v: &PhaseVector) -> (PhaseVector, PhaseVector) {
        (self.a_p.hadamard(v) + self.b_p, self.a_q.hadamard(v) + self.b_q)
    }
}

/// First-order expansion of the ZIP load around measured magnitude `v_m`,
/// with `|V| ≈ v_m + (v − v_m²) / (2 v_m)`.
pub fn linearize_zip(bus: &Bus, v_m: &PhaseVector) -> Result<ZipAffine, CvrError> {
    let mut out = ZipAffine {
        a_p: PhaseVector::zeros(bus.phases),
        b_p: PhaseVector::zeros(bus.phases),
        a_q: PhaseVector::zeros(bus.phases),
        b_q: PhaseVector::zeros(bus.phases),
    };
    for ph in bus.phases.iter() {
        let vm = v_m.get(ph);
        if !(vm > 0.0) {
            return Err(CvrError::Domain(format!("bus {} phase {ph}: expansion voltage {vm} not positive", bus.id)));
        }
        let (kp, kq) = (bus.zip_p, bus.zip_q);
        let (lp, lq) = (bus.load_mult_p.get(ph), bus.load_mult_q.get(ph));
        out.a_p.set(ph, lp * (kp[0] + kp[1] / (2.0 * vm)));
        out.b_p.set(ph, lp * (kp[2] + kp[1] * vm / 2.0));
        out.a_q.set(ph, lq * (kq[0] + kq[1] / (2.0 * vm)));
        out.b_q.set(ph, lq * (kq[2] + kq[1] * vm / 2.0));
    }
    Ok(out)
}

/// Everything the subproblems need from one measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub eps: EpsilonSet,
    /// Per bus, time multipliers already applied.
    pub zip: Vec<ZipAffine>,
    pub drops: Vec<([[f64; 3]; 3], [[f64; 3]; 3])>,
    pub mult: Multipliers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpsMode {
    /// Remainders and measured phase ratios from feedback.
    WithEps,
    /// Plain linear model: no remainders, balanced phase ratios.
    DropEps,
}

impl Linearization {
    pub fn from_measurement(
        feeder: &Feeder,
        m: &MeasurementSet,
        mult: &Multipliers,
        mode: EpsMode,
    ) -> Result<Self, CvrError> {
        let zip = feeder
            .buses
            .iter()
            .map(|b| linearize_zip(b, &m.v_bus[b.id]).map(|z| z.scaled(mult.load_p, mult.load_q)))
            .collect::<Result<Vec<_>, _>>()?;
        let (eps, drops) = match mode {
            EpsMode::WithEps => (estimate_epsilon(feeder, m)?, drop_matrices(feeder, Some(m))),
            EpsMode::DropEps => (EpsilonSet::zeros(feeder), drop_matrices(feeder, None)),
        };
        Ok(Linearization { eps, zip, drops, mult: *mult })
    }
}
