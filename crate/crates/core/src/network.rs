//! Integrated primary/secondary feeder model.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::phase::{Mask, PhaseMatrix, PhaseVector};
use crate::CvrError;

/// Default ZIP coefficients (constant impedance, current, power).
pub const ZIP_P_DEFAULT: [f64; 3] = [0.96, -1.17, 1.21];
#[allow(clippy::approx_constant)]
pub const ZIP_Q_DEFAULT: [f64; 3] = [6.28, -10.16, 4.88];
pub const V_MIN_DEFAULT: f64 = 0.95 * 0.95;
pub const V_MAX_DEFAULT: f64 = 1.05 * 1.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Zone {
    Primary,
    Secondary(usize),
    /// Copy bus `i′` heading secondary `n`.
    Boundary(usize),
}

impl Zone {
    /// Secondary network this bus belongs to, if any.
    pub fn network(&self) -> Option<usize> {
        match *self {
            Zone::Primary => None,
            Zone::Secondary(n) | Zone::Boundary(n) => Some(n),
        }
    }
}

impl fmt::Display for Zone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Zone::Primary => write!(f, "primary"),
            Zone::Secondary(n) => write!(f, "secondary:{n}"),
            Zone::Boundary(n) => write!(f, "boundary:{n}"),
        }
    }
}

impl std::str::FromStr for Zone {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "primary" {
            return Ok(Zone::Primary);
        }
        let (kind, n) = s.split_once(':').ok_or_else(|| format!("bad zone {s:?}"))?;
        let n: usize = n.parse().map_err(|_| format!("bad zone index in {s:?}"))?;
        match kind {
            "secondary" => Ok(Zone::Secondary(n)),
            "boundary" => Ok(Zone::Boundary(n)),
            _ => Err(format!("bad zone {s:?}")),
        }
    }
}

impl Serialize for Zone {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Zone {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub zone: Zone,
    pub phases: Mask,
    /// Nominal active load per phase at 1 p.u. voltage.
    pub load_mult_p: PhaseVector,
    pub load_mult_q: PhaseVector,
    pub zip_p: [f64; 3],
    pub zip_q: [f64; 3],
    /// Squared-magnitude bounds.
    pub v_min: f64,
    pub v_max: f64,
}

impl Bus {
    pub fn new(id: usize, zone: Zone, phases: Mask) -> Self {
        Bus {
            id,
            zone,
            phases,
            load_mult_p: PhaseVector::zeros(phases),
            load_mult_q: PhaseVector::zeros(phases),
            zip_p: ZIP_P_DEFAULT,
            zip_q: ZIP_Q_DEFAULT,
            v_min: V_MIN_DEFAULT,
            v_max: V_MAX_DEFAULT,
        }
    }

    pub fn has_load(&self) -> bool {
        self.load_mult_p.values().iter().chain(self.load_mult_q.values().iter()).any(|&x| x != 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub z: PhaseMatrix,
    pub phases: Mask,
}

#[derive(Serialize, Deserialize)]
struct ImpedanceRecord {
    r: [[f64; 3]; 3],
    x: [[f64; 3]; 3],
}

#[derive(Serialize, Deserialize)]
struct BranchRecord {
    from: usize,
    to: usize,
    phases: Mask,
    z: ImpedanceRecord,
}

impl Serialize for Branch {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let raw = self.z.raw();
        BranchRecord {
            from: self.from,
            to: self.to,
            phases: self.phases,
            z: ImpedanceRecord { r: raw.map(|r| r.map(|z| z.re)), x: raw.map(|r| r.map(|z| z.im)) },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Branch {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rec = BranchRecord::deserialize(d)?;
        let mut m = [[num_complex::Complex64::new(0.0, 0.0); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = num_complex::Complex64::new(rec.z.r[i][j], rec.z.x[i][j]);
            }
        }
        let z = PhaseMatrix::new(m, rec.phases);
        if z.raw() != m {
            return Err(serde::de::Error::custom(format!(
                "branch {}->{}: impedance has entries on absent phases",
                rec.from, rec.to
            )));
        }
        Ok(Branch { from: rec.from, to: rec.to, z, phases: rec.phases })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inverter {
    pub bus: usize,
    pub s_cap: PhaseVector,
    /// Nominal active output; scaled by the PV multiplier of the step.
    pub p_g: PhaseVector,
}

impl Inverter {
    pub fn p_out(&self, pv_mult: f64) -> PhaseVector {
        self.p_g.scale(pv_mult)
    }

    /// Reactive headroom `sqrt(max(s² − p², 0))` at the given PV multiplier.
    pub fn q_cap(&self, pv_mult: f64) -> PhaseVector {
        let p = self.p_out(pv_mult);
        let mut out = PhaseVector::zeros(self.s_cap.mask());
        for ph in self.s_cap.mask().iter() {
            let s = self.s_cap.get(ph);
            out.set(ph, (s * s - p.get(ph).powi(2)).max(0.0).sqrt());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryLink {
    /// Copy bus `i′` on the secondary side.
    pub boundary_bus: usize,
    /// Bus `i` on the primary side.
    pub primary_bus: usize,
    pub secondary_id: usize,
    pub phases: Mask,
}

#[derive(Serialize, Deserialize)]
struct LinkRecord {
    boundary_bus: usize,
    primary_bus: usize,
    secondary_id: usize,
}

impl BoundaryLink {
    /// Length of `x_B` and `z_B`: `[p, q, v]` over present phases.
    pub fn dim(&self) -> usize {
        3 * self.phases.count()
    }

    pub fn a_matrix(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
    }

    /// `blkdiag(I, I, −I)` over the power and voltage rows.
    pub fn b_matrix(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        let k = self.phases.count();
        (0..d)
            .map(|i| (0..d).map(|j| if i != j { 0.0 } else if i < 2 * k { 1.0 } else { -1.0 }).collect())
            .collect()
    }

    /// Coupling residual `A x_B + B z_B`.
    pub fn residual(&self, x_b: &[f64], z_b: &[f64]) -> Vec<f64> {
        let (a, b) = (self.a_matrix(), self.b_matrix());
        (0..self.dim())
            .map(|i| {
                let ax: f64 = a[i].iter().zip(x_b).map(|(u, v)| u * v).sum();
                let bz: f64 = b[i].iter().zip(z_b).map(|(u, v)| u * v).sum();
                ax + bz
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feeder {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub inverters: Vec<Inverter>,
    pub boundary_links: Vec<BoundaryLink>,
    pub substation_bus: usize,
    pub base_power_kva: f64,
    pub base_v_primary_kv: f64,
    pub base_v_secondary_kv: f64,
    /// Substation voltage magnitude (p.u.), held fixed.
    pub v_source: f64,
}

#[derive(Serialize, Deserialize)]
struct FeederFile {
    substation_bus: usize,
    base_power_kva: f64,
    base_v_primary_kv: f64,
    base_v_secondary_kv: f64,
    v_source: f64,
    #[serde(default, rename = "bus")]
    buses: Vec<Bus>,
    #[serde(default, rename = "branch")]
    branches: Vec<Branch>,
    #[serde(default, rename = "inverter")]
    inverters: Vec<Inverter>,
    #[serde(default, rename = "boundary")]
    boundary_links: Vec<LinkRecord>,
}

/// One failed invariant: the offending entity and the rule it breaks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub entity: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.rule)
    }
}

/// Edge into a bus from its parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    Branch(usize),
    Link(usize),
}

/// Rooted view of the radial network, boundary links included as
/// zero-impedance edges.
#[derive(Debug, Clone)]
pub struct Topology {
    /// Breadth-first order from the substation.
    pub order: Vec<usize>,
    pub parent: Vec<Option<(usize, Edge)>>,
    pub children: Vec<Vec<(usize, Edge)>>,
}

impl Feeder {
    pub fn num_secondaries(&self) -> usize {
        self.boundary_links.len()
    }

    pub fn bus(&self, id: usize) -> &Bus {
        &self.buses[id]
    }

    pub fn total_peak_load(&self) -> f64 {
        self.buses.iter().map(|b| b.load_mult_p.sum()).sum()
    }

    pub fn topology(&self) -> Result<Topology, CvrError> {
        let n = self.buses.len();
        let mut adj: Vec<Vec<(usize, Edge)>> = vec![Vec::new(); n];
        for (k, br) in self.branches.iter().enumerate() {
            if br.from >= n || br.to >= n {
                return Err(CvrError::Structural(format!("branch {k} references a missing bus")));
            }
            adj[br.from].push((br.to, Edge::Branch(k)));
            adj[br.to].push((br.from, Edge::Branch(k)));
        }
        for (k, l) in self.boundary_links.iter().enumerate() {
            if l.boundary_bus >= n || l.primary_bus >= n {
                return Err(CvrError::Structural(format!("boundary link {k} is dangling")));
            }
            adj[l.primary_bus].push((l.boundary_bus, Edge::Link(k)));
            adj[l.boundary_bus].push((l.primary_bus, Edge::Link(k)));
        }
        if self.substation_bus >= n {
            return Err(CvrError::Structural("substation bus missing".into()));
        }
        let mut parent = vec![None; n];
        let mut seen = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut children = vec![Vec::new(); n];
        let mut queue = VecDeque::from([self.substation_bus]);
        seen[self.substation_bus] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &(v, e) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some((u, e));
                    children[u].push((v, e));
                    queue.push_back(v);
                }
            }
        }
        if order.len() != n || self.branches.len() + self.boundary_links.len() + 1 != n {
            return Err(CvrError::Structural("branch set not radial".into()));
        }
        Ok(Topology { order, parent, children })
    }

    pub fn to_toml(&self) -> String {
        let file = FeederFile {
            substation_bus: self.substation_bus,
            base_power_kva: self.base_power_kva,
            base_v_primary_kv: self.base_v_primary_kv,
            base_v_secondary_kv: self.base_v_secondary_kv,
            v_source: self.v_source,
            buses: self.buses.clone(),
            branches: self.branches.clone(),
            inverters: self.inverters.clone(),
            boundary_links: self
                .boundary_links
                .iter()
                .map(|l| LinkRecord {
                    boundary_bus: l.boundary_bus,
                    primary_bus: l.primary_bus,
                    secondary_id: l.secondary_id,
                })
                .collect(),
        };
        toml::to_string(&file).expect("feeder serializes")
    }

    pub fn from_toml(text: &str) -> Result<Feeder, CvrError> {
        let file: FeederFile = toml::from_str(text).map_err(|e| CvrError::Parse(e.to_string()))?;
        let mut links = Vec::with_capacity(file.boundary_links.len());
        for r in file.boundary_links {
            let bus = file
                .buses
                .iter()
                .find(|b| b.id == r.boundary_bus)
                .ok_or_else(|| CvrError::Structural(format!("boundary link to missing bus {}", r.boundary_bus)))?;
            links.push(BoundaryLink {
                boundary_bus: r.boundary_bus,
                primary_bus: r.primary_bus,
                secondary_id: r.secondary_id,
                phases: bus.phases,
            });
        }
        Ok(Feeder {
            buses: file.buses,
            branches: file.branches,
            inverters: file.inverters,
            boundary_links: links,
            substation_bus: file.substation_bus,
            base_power_kva: file.base_power_kva,
            base_v_primary_kv: file.base_v_primary_kv,
            base_v_secondary_kv: file.base_v_secondary_kv,
            v_source: file.v_source,
        })
    }

    pub fn load(path: &Path) -> Result<Feeder, CvrError> {
        let text = std::fs::read_to_string(path).map_err(|e| CvrError::io(path, e))?;
        Feeder::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), CvrError> {
        std::fs::write(path, self.to_toml()).map_err(|e| CvrError::io(path, e))
    }
}

/// Checks every structural and numerical invariant of the feeder model.
pub fn validate(feeder: &Feeder) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut bad = |entity: String, rule: &str| out.push(Violation { entity, rule: rule.to_string() });
    let n = feeder.buses.len();

    for (k, b) in feeder.buses.iter().enumerate() {
        let e = format!("bus {}", b.id);
        if b.id != k {
            bad(e.clone(), "bus ids must be 0..N in order");
        }
        if b.phases.is_empty() {
            bad(e.clone(), "bus has no phases");
        }
        if (b.zip_p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            bad(e.clone(), "zip_p does not sum to 1");
        }
        if (b.zip_q.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            bad(e.clone(), "zip_q does not sum to 1");
        }
        if !(b.v_min < b.v_max) || b.v_min <= 0.0 {
            bad(e.clone(), "v_min must be positive and below v_max");
        }
        if !b.load_mult_p.mask().is_subset_of(b.phases) || !b.load_mult_q.mask().is_subset_of(b.phases) {
            bad(e.clone(), "load on an absent phase");
        }
        let loads = b.load_mult_p.values().into_iter().chain(b.load_mult_q.values());
        if loads.clone().any(|x| !x.is_finite()) || b.load_mult_p.values().iter().any(|&x| x < 0.0) {
            bad(e.clone(), "load multipliers must be finite and active load nonnegative");
        }
        if matches!(b.zone, Zone::Boundary(_)) && b.has_load() {
            bad(e.clone(), "boundary copy bus carries load");
        }
    }
    if feeder.substation_bus >= n {
        bad("substation".into(), "substation bus missing");
        return out;
    }
    let sub = &feeder.buses[feeder.substation_bus];
    if sub.zone != Zone::Primary {
        bad("substation".into(), "substation bus must be primary");
    }
    if sub.has_load() {
        bad("substation".into(), "substation bus carries load");
    }
    if !(feeder.v_source > 0.0) {
        bad("substation".into(), "v_source must be positive");
    }

    for (k, br) in feeder.branches.iter().enumerate() {
        let e = format!("branch {k} ({}->{})", br.from, br.to);
        if br.from >= n || br.to >= n {
            bad(e, "references a missing bus");
            continue;
        }
        let (f, t) = (&feeder.buses[br.from], &feeder.buses[br.to]);
        if br.phases.is_empty() || !br.phases.is_subset_of(f.phases) || !br.phases.is_subset_of(t.phases) {
            bad(e.clone(), "branch phases not carried by both ends");
        }
        if br.z.mask() != br.phases || br.z.leaks_outside_mask() {
            bad(e.clone(), "z not restricted to branch phases");
        }
        let same_net = match (f.zone, t.zone) {
            (Zone::Primary, Zone::Primary) => true,
            (a, b) => a.network().is_some() && a.network() == b.network(),
        };
        if !same_net {
            bad(e.clone(), "branch crosses the primary/secondary partition");
        }
        if t.zone == Zone::Primary && br.to == feeder.substation_bus {
            bad(e, "branch feeds the substation bus");
        }
    }

    for (k, inv) in feeder.inverters.iter().enumerate() {
        let e = format!("inverter {k}");
        if inv.bus >= n {
            bad(e, "inverter at missing bus");
            continue;
        }
        let bus = &feeder.buses[inv.bus];
        if !inv.s_cap.mask().is_subset_of(bus.phases) || inv.p_g.mask() != inv.s_cap.mask() {
            bad(e.clone(), "inverter phases do not match its bus");
        }
        if inv.s_cap.values().iter().any(|&s| !(s >= 0.0)) || inv.p_g.values().iter().any(|&p| !(p >= 0.0)) {
            bad(e.clone(), "s_cap and p_g must be nonnegative");
        }
        if matches!(bus.zone, Zone::Boundary(_)) || inv.bus == feeder.substation_bus {
            bad(e, "inverter on a substation or boundary copy bus");
        }
    }

    let n_sec = feeder.boundary_links.len();
    let mut link_count = vec![0usize; n_sec];
    for (k, l) in feeder.boundary_links.iter().enumerate() {
        let e = format!("boundary link {k}");
        if l.boundary_bus >= n || l.primary_bus >= n {
            bad(e, "dangling boundary link");
            continue;
        }
        if l.secondary_id >= n_sec {
            bad(e.clone(), "secondary ids must be 0..N_S");
        } else {
            link_count[l.secondary_id] += 1;
            if l.secondary_id != k {
                bad(e.clone(), "links must be listed in secondary id order");
            }
        }
        let (cb, pb) = (&feeder.buses[l.boundary_bus], &feeder.buses[l.primary_bus]);
        if cb.zone != Zone::Boundary(l.secondary_id) {
            bad(e.clone(), "boundary_bus is not the copy bus of its secondary");
        }
        if pb.zone != Zone::Primary || l.primary_bus == feeder.substation_bus {
            bad(e.clone(), "primary_bus must be a non-substation primary bus");
        }
        if l.phases != cb.phases || !cb.phases.is_subset_of(pb.phases) {
            bad(e, "link phases must match the copy bus and exist on the primary bus");
        }
    }
    for (s, &c) in link_count.iter().enumerate() {
        if c != 1 {
            bad(format!("secondary {s}"), "needs exactly one boundary link");
        }
    }
    for b in &feeder.buses {
        if let Some(s) = b.zone.network() {
            if s >= n_sec {
                bad(format!("bus {}", b.id), "zone names a secondary without boundary link");
            }
        }
    }
    let copies = |s: usize| feeder.buses.iter().filter(|b| b.zone == Zone::Boundary(s)).count();
    for s in 0..n_sec {
        if copies(s) != 1 {
            bad(format!("secondary {s}"), "needs exactly one copy bus");
        }
    }

    match feeder.topology() {
        Err(e) => bad("network".into(), &e.to_string().replace("structural error: ", "")),
        Ok(topo) => {
            for (v, p) in topo.parent.iter().enumerate() {
                if let Some((_, Edge::Branch(k))) = p {
                    if feeder.branches[*k].to != v {
                        bad(format!("branch {k}"), "branch must point away from the substation");
                    }
                    if feeder.branches[*k].phases != feeder.buses[v].phases {
                        bad(format!("bus {v}"), "bus phases must equal its feeding branch phases");
                    }
                }
            }
            // each secondary bus must be reachable from its copy bus inside the secondary
            for l in &feeder.boundary_links {
                if l.boundary_bus >= n {
                    continue;
                }
                let s = l.secondary_id;
                let mut reach = vec![false; n];
                let mut stack = vec![l.boundary_bus];
                reach[l.boundary_bus] = true;
                while let Some(u) = stack.pop() {
                    for &(v, e) in &topo.children[u] {
                        if matches!(e, Edge::Branch(_)) && feeder.buses[v].zone.network() == Some(s) && !reach[v] {
                            reach[v] = true;
                            stack.push(v);
                        }
                    }
                }
                for b in &feeder.buses {
                    if b.zone == Zone::Secondary(s) && !reach[b.id] {
                        bad(format!("bus {}", b.id), "not reachable from its boundary bus");
                    }
                }
            }
        }
    }
    out
}

/// Buses, branches and inverters of one controller's network.
#[derive(Debug, Clone, PartialEq)]
pub struct SubNetwork {
    pub root: usize,
    pub buses: Vec<usize>,
    pub branches: Vec<usize>,
    pub inverters: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub leader: SubNetwork,
    pub followers: Vec<SubNetwork>,
    pub links: Vec<BoundaryLink>,
    pub topology: Topology,
}

impl Partition {
    pub fn num_followers(&self) -> usize {
        self.followers.len()
    }

    /// Links attached to a primary bus.
    pub fn links_at(&self, bus: usize) -> impl Iterator<Item = usize> + '_ {
        self.links.iter().enumerate().filter(move |(_, l)| l.primary_bus == bus).map(|(k, _)| k)
    }
}

/// Splits the feeder into the leader (primary) network and one follower per
/// secondary.
pub fn partition(feeder: &Feeder) -> Result<Partition, CvrError> {
    for l in &feeder.boundary_links {
        if l.boundary_bus >= feeder.buses.len() || l.primary_bus >= feeder.buses.len() {
            return Err(CvrError::Structural(format!(
                "dangling boundary link for secondary {}",
                l.secondary_id
            )));
        }
    }
    let v = validate(feeder);
    if !v.is_empty() {
        let msg: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        return Err(CvrError::Structural(msg.join("; ")));
    }
    let topology = feeder.topology()?;
    let owner = |bus: usize| feeder.buses[bus].zone.network();
    let n_sec = feeder.num_secondaries();
    let empty = |root| SubNetwork { root, buses: Vec::new(), branches: Vec::new(), inverters: Vec::new() };
    let mut leader = empty(feeder.substation_bus);
    let mut followers: Vec<SubNetwork> =
        feeder.boundary_links.iter().map(|l| empty(l.boundary_bus)).collect();
    // buses in breadth-first order so each list starts at its root
    for &b in &topology.order {
        match owner(b) {
            None => leader.buses.push(b),
            Some(s) => followers[s].buses.push(b),
        }
    }
    for (k, br) in feeder.branches.iter().enumerate() {
        match owner(br.to) {
            None => leader.branches.push(k),
            Some(s) => followers[s].branches.push(k),
        }
    }
    for (k, inv) in feeder.inverters.iter().enumerate() {
        match owner(inv.bus) {
            None => leader.inverters.push(k),
            Some(s) => followers[s].inverters.push(k),
        }
    }
    debug_assert_eq!(followers.len(), n_sec);
    Ok(Partition { leader, followers, links: feeder.boundary_links.clone(), topology })
}
