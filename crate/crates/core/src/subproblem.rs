//! Leader, follower and centralized QP assembly.
//!
//! Each network contributes, per phase of every branch `k = (i → j)`:
//!
//! ```text
//! P_k − Σ P_jc − a_p v_j + Σ p_B = b_p − p_g + ε^p_k
//! Q_k − Σ Q_jc − a_q v_j + Σ q_B + Σ q_g = b_q + ε^q_k
//! v_j − v_i + 2 (r̄ P_k + x̄ Q_k) = ε^v_k
//! ```
//!
//! where `p_B, q_B` are leader-side boundary injections at primary buses
//! that host secondaries. ZIP loads enter through their affine form, so no
//! separate load variables exist.

use cvr_qp::{QpBuilder, QpProblem, QpSolution};

use crate::network::{Feeder, Partition, SubNetwork};
use crate::phase::PhaseVector;
use crate::powerflow::{EpsMode, EpsilonSet, Linearization, MeasurementSet};
use crate::CvrError;

const INF: f64 = f64::INFINITY;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubproblemOptions {
    /// Controller-side tightening of the voltage band, p.u. magnitude.
    pub v_margin: f64,
    /// Weight of `½ Σ q_g²`, which makes the reactive dispatch unique.
    pub q_reg: f64,
    /// Quadratic penalty on voltage-band slack; `None` keeps bounds hard.
    pub soft_voltage: Option<f64>,
}

impl Default for SubproblemOptions {
    fn default() -> Self {
        SubproblemOptions { v_margin: 0.002, q_reg: 1e-3, soft_voltage: None }
    }
}

pub type PhaseVars = [Option<usize>; 3];

/// Flat indices of the named per-phase variables of one QP.
#[derive(Debug, Clone, PartialEq)]
pub struct VarIndex {
    pub p: Vec<PhaseVars>,
    pub q: Vec<PhaseVars>,
    pub v: Vec<PhaseVars>,
    pub qg: Vec<PhaseVars>,
    /// Leader-side boundary injections per link.
    pub pb: Vec<PhaseVars>,
    pub qb: Vec<PhaseVars>,
}

impl VarIndex {
    fn new(feeder: &Feeder) -> Self {
        VarIndex {
            p: vec![[None; 3]; feeder.branches.len()],
            q: vec![[None; 3]; feeder.branches.len()],
            v: vec![[None; 3]; feeder.buses.len()],
            qg: vec![[None; 3]; feeder.inverters.len()],
            pb: vec![[None; 3]; feeder.boundary_links.len()],
            qb: vec![[None; 3]; feeder.boundary_links.len()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Leader,
    Follower(usize),
    Centralized,
}

#[derive(Debug, Clone)]
pub struct Subproblem {
    pub role: Role,
    pub qp: QpProblem,
    pub vars: VarIndex,
    /// Per link: linear forms whose values make up the boundary vector this
    /// problem owns (`x_B` for the leader, `z_B` for a follower).
    pub boundary: Vec<Vec<Vec<(usize, f64)>>>,
}

impl Subproblem {
    fn eval(sol: &[f64], terms: &[(usize, f64)]) -> f64 {
        terms.iter().map(|&(i, c)| c * sol[i]).sum()
    }

    /// Boundary vector of link `n` (leader `x_B` or follower `z_B`).
    pub fn boundary_values(&self, x: &[f64], n: usize) -> Vec<f64> {
        self.boundary[n].iter().map(|t| Self::eval(x, t)).collect()
    }

    /// Reactive dispatch for the inverters this problem owns.
    pub fn dispatch(&self, feeder: &Feeder, x: &[f64]) -> Vec<(usize, PhaseVector)> {
        let mut out = Vec::new();
        for (k, inv) in feeder.inverters.iter().enumerate() {
            let idx = self.vars.qg[k];
            if idx.iter().all(Option::is_none) {
                continue;
            }
            let mut q = PhaseVector::zeros(inv.s_cap.mask());
            for p in 0..3 {
                if let Some(i) = idx[p] {
                    q.set(p, x[i]);
                }
            }
            out.push((k, q));
        }
        out
    }

    /// Substation active power `Σ P_0j` at `x` (leader and centralized).
    pub fn substation_power(&self, feeder: &Feeder, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for (k, br) in feeder.branches.iter().enumerate() {
            if br.from == feeder.substation_bus {
                s += self.vars.p[k].iter().flatten().map(|&i| x[i]).sum::<f64>();
            }
        }
        s
    }

    /// Measured state arranged as this problem's variable vector. Slack
    /// variables of a soft voltage band are set to zero.
    pub fn state_vector(&self, feeder: &Feeder, m: &MeasurementSet, dispatch: &[PhaseVector]) -> Vec<f64> {
        let mut x = vec![0.0; self.qp.num_vars()];
        let put = |x: &mut Vec<f64>, idx: &PhaseVars, val: &dyn Fn(usize) -> f64| {
            for p in 0..3 {
                if let Some(i) = idx[p] {
                    x[i] = val(p);
                }
            }
        };
        for k in 0..feeder.branches.len() {
            put(&mut x, &self.vars.p[k], &|p| m.s_branch[k][p].re);
            put(&mut x, &self.vars.q[k], &|p| m.s_branch[k][p].im);
        }
        for b in 0..feeder.buses.len() {
            put(&mut x, &self.vars.v[b], &|p| m.v_bus[b].get(p).powi(2));
        }
        for k in 0..feeder.inverters.len() {
            put(&mut x, &self.vars.qg[k], &|p| dispatch[k].get(p));
        }
        for (n, l) in feeder.boundary_links.iter().enumerate() {
            let out: Vec<usize> =
                (0..feeder.branches.len()).filter(|&k| feeder.branches[k].from == l.boundary_bus).collect();
            put(&mut x, &self.vars.pb[n], &|p| -out.iter().map(|&k| m.s_branch[k][p].re).sum::<f64>());
            put(&mut x, &self.vars.qb[n], &|p| -out.iter().map(|&k| m.s_branch[k][p].im).sum::<f64>());
        }
        // band variables mirror v when the soft band is active
        for (i, name) in self.qp.names.iter().enumerate() {
            if let Some(rest) = name.strip_prefix("w[") {
                let v_name = format!("v[{rest}");
                if let Some(j) = self.qp.index_of(&v_name) {
                    x[i] = x[j];
                }
            }
        }
        x
    }
}

const PH: [char; 3] = ['a', 'b', 'c'];

struct Assembler<'a> {
    feeder: &'a Feeder,
    lin: &'a Linearization,
    eps: &'a EpsilonSet,
    drops: &'a [([[f64; 3]; 3], [[f64; 3]; 3])],
    opts: SubproblemOptions,
    b: QpBuilder,
    vars: VarIndex,
}

impl<'a> Assembler<'a> {
    fn new(feeder: &'a Feeder, lin: &'a Linearization, mode: EpsMode, opts: &SubproblemOptions, zeros: &'a (EpsilonSet, Vec<([[f64; 3]; 3], [[f64; 3]; 3])>)) -> Self {
        let (eps, drops) = match mode {
            EpsMode::WithEps => (&lin.eps, lin.drops.as_slice()),
            EpsMode::DropEps => (&zeros.0, zeros.1.as_slice()),
        };
        Assembler { feeder, lin, eps, drops, opts: *opts, b: QpBuilder::new(), vars: VarIndex::new(feeder) }
    }

    fn v_bounds(&self, bus: usize) -> (f64, f64) {
        let b = &self.feeder.buses[bus];
        let lo = (b.v_min.sqrt() + self.opts.v_margin).powi(2);
        let hi = (b.v_max.sqrt() - self.opts.v_margin).max(0.0).powi(2);
        (lo, hi.max(lo))
    }

    /// Variables and flow equations for one network. The leader root is
    /// pinned at the source voltage; a follower root (copy bus) is free
    /// within its band.
    fn network(&mut self, net: &SubNetwork, leader_links: bool) {
        let f = self.feeder;
        let soft = self.opts.soft_voltage;
        for &bus in &net.buses {
            for p in f.buses[bus].phases.iter() {
                let name = format!("v[{bus},{}]", PH[p]);
                let idx = if bus == f.substation_bus {
                    let vs = f.v_source * f.v_source;
                    self.b.add_var(name, vs, vs)
                } else {
                    let (lo, hi) = self.v_bounds(bus);
                    match soft {
                        None => self.b.add_var(name, lo, hi),
                        Some(weight) => {
                            let v = self.b.add_var(name, -INF, INF);
                            let w = self.b.add_var(format!("w[{bus},{}]", PH[p]), lo, hi);
                            let s = self.b.add_var(format!("slack[{bus},{}]", PH[p]), -INF, INF);
                            self.b.add_hessian(s, s, weight);
                            self.b.add_equality(&[(v, 1.0), (w, -1.0), (s, -1.0)], 0.0);
                            v
                        }
                    }
                };
                self.vars.v[bus][p] = Some(idx);
            }
        }
        for &k in &net.branches {
            for p in f.branches[k].phases.iter() {
                self.vars.p[k][p] = Some(self.b.add_var(format!("P[{k},{}]", PH[p]), -INF, INF));
                self.vars.q[k][p] = Some(self.b.add_var(format!("Q[{k},{}]", PH[p]), -INF, INF));
            }
        }
        for &k in &net.inverters {
            let cap = f.inverters[k].q_cap(self.lin.mult.pv);
            for p in f.inverters[k].s_cap.mask().iter() {
                let c = cap.get(p);
                let i = self.b.add_var(format!("qg[{k},{}]", PH[p]), -c, c);
                if self.opts.q_reg > 0.0 {
                    self.b.add_hessian(i, i, self.opts.q_reg);
                }
                self.vars.qg[k][p] = Some(i);
            }
        }
        if leader_links {
            for (n, l) in f.boundary_links.iter().enumerate() {
                for p in l.phases.iter() {
                    self.vars.pb[n][p] = Some(self.b.add_var(format!("pB[{n},{}]", PH[p]), -INF, INF));
                    self.vars.qb[n][p] = Some(self.b.add_var(format!("qB[{n},{}]", PH[p]), -INF, INF));
                }
            }
        }

        let topo_children = |bus: usize| -> Vec<usize> {
            net.branches.iter().copied().filter(|&c| f.branches[c].from == bus).collect()
        };
        for &k in &net.branches {
            let br = &f.branches[k];
            let j = br.to;
            let kids = topo_children(j);
            let zip = &self.lin.zip[j];
            for p in br.phases.iter() {
                let vj = self.vars.v[j][p].expect("bus voltage variable");
                let vi = self.vars.v[br.from][p].expect("bus voltage variable");
                let mut pt = vec![(self.vars.p[k][p].unwrap(), 1.0), (vj, -zip.a_p.get(p))];
                let mut qt = vec![(self.vars.q[k][p].unwrap(), 1.0), (vj, -zip.a_q.get(p))];
                for &c in &kids {
                    if let (Some(pc), Some(qc)) = (self.vars.p[c][p], self.vars.q[c][p]) {
                        pt.push((pc, -1.0));
                        qt.push((qc, -1.0));
                    }
                }
                if leader_links {
                    for (n, l) in f.boundary_links.iter().enumerate() {
                        if l.primary_bus == j {
                            if let (Some(a), Some(b)) = (self.vars.pb[n][p], self.vars.qb[n][p]) {
                                pt.push((a, 1.0));
                                qt.push((b, 1.0));
                            }
                        }
                    }
                }
                let mut pg = 0.0;
                for (ik, inv) in f.inverters.iter().enumerate() {
                    if inv.bus == j && inv.s_cap.mask().has(p) {
                        pg += inv.p_out(self.lin.mult.pv).get(p);
                        qt.push((self.vars.qg[ik][p].expect("inverter owned by this network"), 1.0));
                    }
                }
                self.b.add_equality(&pt, zip.b_p.get(p) - pg + self.eps.eps_p[k].get(p));
                self.b.add_equality(&qt, zip.b_q.get(p) + self.eps.eps_q[k].get(p));

                let (rb, xb) = &self.drops[k];
                let mut vt = vec![(vj, 1.0), (vi, -1.0)];
                for s in br.phases.iter() {
                    vt.push((self.vars.p[k][s].unwrap(), 2.0 * rb[p][s]));
                    vt.push((self.vars.q[k][s].unwrap(), 2.0 * xb[p][s]));
                }
                self.b.add_equality(&vt, self.eps.eps_v[k].get(p));
            }
        }
    }

    fn leader_boundary(&self, n: usize) -> Vec<Vec<(usize, f64)>> {
        let l = &self.feeder.boundary_links[n];
        let mut out = Vec::new();
        for src in [&self.vars.pb[n], &self.vars.qb[n]] {
            for p in l.phases.iter() {
                out.push(vec![(src[p].unwrap(), 1.0)]);
            }
        }
        for p in l.phases.iter() {
            out.push(vec![(self.vars.v[l.primary_bus][p].unwrap(), 1.0)]);
        }
        out
    }

    fn follower_boundary(&self, n: usize) -> Vec<Vec<(usize, f64)>> {
        let f = self.feeder;
        let l = &f.boundary_links[n];
        let out_br: Vec<usize> = (0..f.branches.len()).filter(|&k| f.branches[k].from == l.boundary_bus).collect();
        let mut out = Vec::new();
        for src in [&self.vars.p, &self.vars.q] {
            for p in l.phases.iter() {
                out.push(out_br.iter().filter_map(|&k| src[k][p]).map(|i| (i, 1.0)).collect());
            }
        }
        for p in l.phases.iter() {
            out.push(vec![(self.vars.v[l.boundary_bus][p].unwrap(), 1.0)]);
        }
        out
    }

    /// `Σ_φ P_0j` over substation branches.
    fn substation_objective(&mut self) {
        let f = self.feeder;
        for (k, br) in f.branches.iter().enumerate() {
            if br.from == f.substation_bus {
                for i in self.vars.p[k].iter().flatten() {
                    self.b.add_linear(*i, 1.0);
                }
            }
        }
    }

    /// `λ e + ρ/2 e²` for the affine expression `e = Σ c·x + c0`.
    fn add_penalty(&mut self, terms: &[(usize, f64)], c0: f64, lambda: f64, rho: f64) {
        for (a, &(i, ci)) in terms.iter().enumerate() {
            self.b.add_linear(i, ci * (lambda + rho * c0));
            self.b.add_hessian(i, i, rho * ci * ci);
            for &(j, cj) in &terms[a + 1..] {
                self.b.add_hessian(i, j, rho * ci * cj);
            }
        }
        self.b.add_constant(lambda * c0 + 0.5 * rho * c0 * c0);
    }
}

/// Sign of the `B` block on row `r` of a boundary vector of dimension `d`.
pub fn b_sign(r: usize, d: usize) -> f64 {
    if r < 2 * d / 3 {
        1.0
    } else {
        -1.0
    }
}

fn zeros_for(feeder: &Feeder) -> (EpsilonSet, Vec<([[f64; 3]; 3], [[f64; 3]; 3])>) {
    (EpsilonSet::zeros(feeder), crate::powerflow::drop_matrices(feeder, None))
}

fn check_dims(part: &Partition, vecs: &[Vec<f64>], what: &str) -> Result<(), CvrError> {
    if vecs.len() != part.links.len() {
        return Err(CvrError::Assembly(format!("{what}: {} entries for {} links", vecs.len(), part.links.len())));
    }
    for (n, v) in vecs.iter().enumerate() {
        if v.len() != part.links[n].dim() {
            return Err(CvrError::Assembly(format!("{what}: link {n} expects {} values", part.links[n].dim())));
        }
    }
    Ok(())
}

/// Leader update problem: substation power plus, per link,
/// `λᵀ(A x_B + B z̃_B) + ρ/2 ‖A x_B + B z̃_B‖²` with `z̃_B` held fixed.
pub fn build_leader(
    feeder: &Feeder,
    part: &Partition,
    lin: &Linearization,
    z_b: &[Vec<f64>],
    lambda: &[Vec<f64>],
    rho: f64,
    opts: &SubproblemOptions,
) -> Result<Subproblem, CvrError> {
    check_dims(part, z_b, "boundary values")?;
    check_dims(part, lambda, "multipliers")?;
    let zeros = zeros_for(feeder);
    let mut a = Assembler::new(feeder, lin, EpsMode::WithEps, opts, &zeros);
    a.network(&part.leader, true);
    a.substation_objective();
    let mut boundary = Vec::new();
    for n in 0..part.links.len() {
        let xb = a.leader_boundary(n);
        let d = xb.len();
        for (r, terms) in xb.iter().enumerate() {
            let c0 = b_sign(r, d) * z_b[n][r];
            a.add_penalty(terms, c0, lambda[n][r], rho);
        }
        boundary.push(xb);
    }
    Ok(Subproblem { role: Role::Leader, qp: a.b.build(), vars: a.vars, boundary })
}

/// Follower `n` update problem: its network constraints and
/// `λᵀ(A x_B + B z_B) + ρ/2 ‖A x_B + B z_B‖²` with the received `x_B`.
pub fn build_follower(
    feeder: &Feeder,
    part: &Partition,
    n: usize,
    lin: &Linearization,
    x_b: &[f64],
    lambda: &[f64],
    rho: f64,
    opts: &SubproblemOptions,
) -> Result<Subproblem, CvrError> {
    let link = part.links.get(n).ok_or_else(|| CvrError::Assembly(format!("no follower {n}")))?;
    if x_b.len() != link.dim() || lambda.len() != link.dim() {
        return Err(CvrError::Assembly(format!("follower {n}: boundary data must have {} entries", link.dim())));
    }
    let zeros = zeros_for(feeder);
    let mut a = Assembler::new(feeder, lin, EpsMode::WithEps, opts, &zeros);
    a.network(&part.followers[n], false);
    let zb = a.follower_boundary(n);
    let d = zb.len();
    for (r, terms) in zb.iter().enumerate() {
        let s = b_sign(r, d);
        let scaled: Vec<(usize, f64)> = terms.iter().map(|&(i, c)| (i, s * c)).collect();
        a.add_penalty(&scaled, x_b[r], lambda[r], rho);
    }
    let mut boundary = vec![Vec::new(); part.links.len()];
    boundary[n] = zb;
    Ok(Subproblem { role: Role::Follower(n), qp: a.b.build(), vars: a.vars, boundary })
}

/// Single QP over the whole feeder with the boundary coupling imposed as
/// equalities. `DropEps` discards the remainders and measured phase ratios.
pub fn build_centralized(
    feeder: &Feeder,
    part: &Partition,
    lin: &Linearization,
    mode: EpsMode,
    opts: &SubproblemOptions,
) -> Result<Subproblem, CvrError> {
    let zeros = zeros_for(feeder);
    let mut a = Assembler::new(feeder, lin, mode, opts, &zeros);
    a.network(&part.leader, true);
    for sub in &part.followers {
        a.network(sub, false);
    }
    a.substation_objective();
    let mut boundary = Vec::new();
    for n in 0..part.links.len() {
        let xb = a.leader_boundary(n);
        let zb = a.follower_boundary(n);
        let d = xb.len();
        for r in 0..d {
            let s = b_sign(r, d);
            let mut terms = xb[r].clone();
            terms.extend(zb[r].iter().map(|&(i, c)| (i, s * c)));
            a.b.add_equality(&terms, 0.0);
        }
        boundary.push(xb);
    }
    Ok(Subproblem { role: Role::Centralized, qp: a.b.build(), vars: a.vars, boundary })
}

/// Primal values of a solution keyed by variable name.
pub fn named_values<'a>(qp: &'a QpProblem, sol: &QpSolution) -> Vec<(&'a str, f64)> {
    qp.names.iter().map(String::as_str).zip(sol.x.iter().copied()).collect()
}
