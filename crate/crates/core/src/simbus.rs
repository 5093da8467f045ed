//! Deterministic discrete-event message bus between the leader and the
//! follower controllers.
//!
//! One clock is one leader iteration attempt. Follower compute time is
//! folded into uplink latency; downlink broadcasts always take one clock,
//! so a broadcast sent at clock `t` is answered at `t + 1`.
//! Delivery order is (deliver clock, sender, sequence number) and each
//! (sender, receiver) pair is FIFO.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CvrError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AgentId {
    Leader,
    Follower(usize),
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentId::Leader => write!(f, "leader"),
            AgentId::Follower(n) => write!(f, "follower:{n}"),
        }
    }
}

impl Serialize for AgentId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AgentId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "leader" {
            return Ok(AgentId::Leader);
        }
        s.strip_prefix("follower:")
            .and_then(|n| n.parse().ok())
            .map(AgentId::Follower)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown agent `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Leader to follower: the boundary block `x_B` and the penalty to use.
    Broadcast { x_b: Vec<f64>, rho: f64 },
    /// Follower to leader: new `z_B`, multiplier and coupling residual.
    Update { z_b: Vec<f64>, lambda: Vec<f64>, residual: Vec<f64> },
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Broadcast { .. } => "broadcast",
            Payload::Update { .. } => "update",
        }
    }

    fn dim(&self) -> usize {
        match self {
            Payload::Broadcast { x_b, .. } => x_b.len(),
            Payload::Update { z_b, .. } => z_b.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub from: AgentId,
    pub to: AgentId,
    pub payload: Payload,
    pub send_clock: u64,
    pub deliver_clock: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Latency {
    Constant { clocks: u64 },
    Uniform { lo: u64, hi: u64 },
}

impl Default for Latency {
    fn default() -> Self {
        Latency::Constant { clocks: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureWindow {
    pub agent: AgentId,
    pub start: u64,
    pub end: u64,
}

impl FailureWindow {
    pub fn covers(&self, agent: AgentId, clock: u64) -> bool {
        self.agent == agent && (self.start..=self.end).contains(&clock)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyPolicy {
    /// Uplink latency applied to every follower without an override.
    pub default: Latency,
    /// Per-follower overrides, keyed by follower index.
    #[serde(with = "index_keys")]
    pub per_follower: BTreeMap<usize, Latency>,
    pub drop_probability: f64,
    pub failures: Vec<FailureWindow>,
    /// Per clock, only this many randomly chosen followers hear from the
    /// leader; broadcasts to the others stay queued and only the newest is
    /// acted on once they are chosen.
    pub random_subset: Option<usize>,
}

/// TOML table keys are strings; follower indices are written as such.
mod index_keys {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::Latency;

    pub fn serialize<S: Serializer>(m: &BTreeMap<usize, Latency>, s: S) -> Result<S::Ok, S::Error> {
        m.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<String, Latency>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, Latency>, D::Error> {
        BTreeMap::<String, Latency>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                k.parse().map(|n| (n, v)).map_err(|_| serde::de::Error::custom(format!("follower index `{k}`")))
            })
            .collect()
    }
}

impl Default for LatencyPolicy {
    fn default() -> Self {
        LatencyPolicy {
            default: Latency::default(),
            per_follower: BTreeMap::new(),
            drop_probability: 0.0,
            failures: Vec::new(),
            random_subset: None,
        }
    }
}

impl LatencyPolicy {
    pub fn check(&self) -> Result<(), CvrError> {
        if !(0.0..1.0).contains(&self.drop_probability) {
            return Err(CvrError::Config("drop probability must lie in [0, 1)".into()));
        }
        let lat = std::iter::once(&self.default).chain(self.per_follower.values());
        for l in lat {
            if let Latency::Uniform { lo, hi } = l {
                if lo > hi {
                    return Err(CvrError::Config(format!("latency range {lo}..{hi} is empty")));
                }
            }
        }
        for w in &self.failures {
            if w.start > w.end {
                return Err(CvrError::Config(format!("failure window {}..{} is empty", w.start, w.end)));
            }
        }
        Ok(())
    }

    pub fn failing(&self, agent: AgentId, clock: u64) -> bool {
        self.failures.iter().any(|w| w.covers(agent, clock))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Queued,
    Delivered,
    Dropped,
    Suppressed,
}

impl Outcome {
    fn as_str(self) -> &'static str {
        match self {
            Outcome::Queued => "queued",
            Outcome::Delivered => "delivered",
            Outcome::Dropped => "dropped",
            Outcome::Suppressed => "suppressed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub clock: u64,
    pub event: &'static str,
    pub from: AgentId,
    pub to: AgentId,
    pub payload_kind: &'static str,
    pub latency: u64,
    pub outcome: &'static str,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub posted: usize,
    pub delivered: usize,
    pub dropped: usize,
    pub suppressed: usize,
}

pub struct SimBus {
    policy: LatencyPolicy,
    n_followers: usize,
    rng: ChaCha8Rng,
    seq: u64,
    queue: BTreeMap<(u64, AgentId, u64), Envelope>,
    /// Last scheduled delivery per (sender, receiver), for FIFO.
    last_deliver: BTreeMap<(AgentId, AgentId), u64>,
    /// Followers reachable by the leader at `selected.0`.
    selected: (u64, Vec<bool>),
    /// Followers not yet drawn in the current sweep.
    deck: Vec<usize>,
    dims: Vec<usize>,
    trace: Vec<TraceEvent>,
    counts: Counts,
}

impl SimBus {
    /// `dims[n]` is the boundary dimension of follower `n`.
    pub fn new(policy: LatencyPolicy, dims: Vec<usize>, seed: u64) -> Result<Self, CvrError> {
        policy.check()?;
        let n = dims.len();
        if let Some(k) = policy.random_subset {
            if k == 0 || k > n {
                return Err(CvrError::Config(format!("random subset of {k} from {n} followers")));
            }
        }
        Ok(SimBus {
            policy,
            n_followers: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seq: 0,
            queue: BTreeMap::new(),
            last_deliver: BTreeMap::new(),
            selected: (u64::MAX, Vec::new()),
            deck: Vec::new(),
            dims,
            trace: Vec::new(),
            counts: Counts::default(),
        })
    }

    pub fn policy(&self) -> &LatencyPolicy {
        &self.policy
    }

    fn registered(&self, a: AgentId) -> bool {
        match a {
            AgentId::Leader => true,
            AgentId::Follower(n) => n < self.n_followers,
        }
    }

    fn log(&mut self, clock: u64, event: &'static str, e: &Envelope, latency: u64, outcome: Outcome) {
        self.trace.push(TraceEvent {
            clock,
            event,
            from: e.from,
            to: e.to,
            payload_kind: e.payload.kind(),
            latency,
            outcome: outcome.as_str(),
        });
    }

    /// Free-form coordinator event (e.g. a bounded-delay violation).
    pub fn note(&mut self, clock: u64, event: &'static str, from: AgentId, to: AgentId) {
        self.trace.push(TraceEvent { clock, event, from, to, payload_kind: "none", latency: 0, outcome: "logged" });
    }

    fn sample_latency(&mut self, e: &Envelope) -> u64 {
        let n = match (e.from, e.to) {
            (AgentId::Follower(n), _) => n,
            _ => return 1,
        };
        match self.policy.per_follower.get(&n).copied().unwrap_or(self.policy.default) {
            Latency::Constant { clocks } => clocks,
            Latency::Uniform { lo, hi } => self.rng.random_range(lo..=hi),
        }
    }

    pub fn post(&mut self, mut e: Envelope) -> Result<Outcome, CvrError> {
        if !self.registered(e.from) || !self.registered(e.to) {
            return Err(CvrError::Routing(format!("unregistered agent on {} -> {}", e.from, e.to)));
        }
        let follower = match (e.from, e.to) {
            (AgentId::Leader, AgentId::Follower(n)) | (AgentId::Follower(n), AgentId::Leader) => n,
            _ => return Err(CvrError::Routing(format!("no link {} -> {}", e.from, e.to))),
        };
        if e.payload.dim() != self.dims[follower] {
            return Err(CvrError::Routing(format!(
                "payload of {} entries on a link of dimension {}",
                e.payload.dim(),
                self.dims[follower]
            )));
        }
        self.counts.posted += 1;
        let clock = e.send_clock;
        if self.policy.failing(e.from, clock) || self.policy.failing(e.to, clock) {
            self.counts.suppressed += 1;
            self.log(clock, "post", &e, 0, Outcome::Suppressed);
            return Ok(Outcome::Suppressed);
        }
        if self.policy.drop_probability > 0.0 && self.rng.random::<f64>() < self.policy.drop_probability {
            self.counts.dropped += 1;
            self.log(clock, "post", &e, 0, Outcome::Dropped);
            return Ok(Outcome::Dropped);
        }
        let lat = self.sample_latency(&e);
        let fifo = self.last_deliver.get(&(e.from, e.to)).copied().unwrap_or(0);
        e.deliver_clock = (clock + lat).max(fifo);
        self.last_deliver.insert((e.from, e.to), e.deliver_clock);
        self.log(clock, "post", &e, e.deliver_clock - clock, Outcome::Queued);
        self.queue.insert((e.deliver_clock, e.from, self.seq), e);
        self.seq += 1;
        Ok(Outcome::Queued)
    }

    fn selection(&mut self, clock: u64) -> Option<Vec<bool>> {
        let k = self.policy.random_subset?;
        if self.selected.0 != clock {
            // draws come from shuffled sweeps so every follower is picked
            // once before any is picked twice
            let mut sel = vec![false; self.n_followers];
            let mut left = k.min(self.n_followers);
            while left > 0 {
                if self.deck.is_empty() {
                    self.deck = (0..self.n_followers).collect();
                    self.deck.shuffle(&mut self.rng);
                }
                let i = self.deck.pop().expect("deck refilled");
                if !sel[i] {
                    sel[i] = true;
                    left -= 1;
                }
            }
            self.selected = (clock, sel);
        }
        Some(self.selected.1.clone())
    }

    /// Followers the leader can reach at `clock`; all of them unless a
    /// random subset is configured.
    pub fn selected(&mut self, clock: u64) -> Vec<bool> {
        self.selection(clock).unwrap_or_else(|| vec![true; self.n_followers])
    }

    /// Envelopes addressed to `agent` that are due at `clock`.
    pub fn poll(&mut self, agent: AgentId, clock: u64) -> Result<Vec<Envelope>, CvrError> {
        if !self.registered(agent) {
            return Err(CvrError::Routing(format!("unregistered agent {agent}")));
        }
        if let AgentId::Follower(n) = agent {
            if let Some(sel) = self.selection(clock) {
                if !sel[n] {
                    return Ok(Vec::new());
                }
            }
        }
        let due: Vec<(u64, AgentId, u64)> = self
            .queue
            .iter()
            .filter(|(k, e)| k.0 <= clock && e.to == agent)
            .map(|(k, _)| *k)
            .collect();
        let mut out = Vec::new();
        for key in due {
            let e = self.queue.remove(&key).expect("key just listed");
            let lat = e.deliver_clock - e.send_clock;
            if self.policy.failing(e.from, clock) || self.policy.failing(e.to, clock) {
                self.counts.suppressed += 1;
                self.log(clock, "deliver", &e, lat, Outcome::Suppressed);
                continue;
            }
            self.counts.delivered += 1;
            self.log(clock, "deliver", &e, lat, Outcome::Delivered);
            out.push(e);
        }
        Ok(out)
    }

    /// Messages still queued for `agent`.
    pub fn pending_for(&self, agent: AgentId) -> usize {
        self.queue.values().filter(|e| e.to == agent).count()
    }

    /// Messages from `agent` still queued.
    pub fn pending_from(&self, agent: AgentId) -> usize {
        self.queue.values().filter(|e| e.from == agent).count()
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }

    pub fn counts(&self) -> Counts {
        self.counts
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn write_trace<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        write_trace(&self.trace, w)
    }
}

/// Event trace CSV: `clock,event,from,to,payload_kind,latency,outcome`.
pub fn write_trace<W: Write>(trace: &[TraceEvent], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["clock", "event", "from", "to", "payload_kind", "latency", "outcome"])?;
    for t in trace {
        out.write_record([
            t.clock.to_string(),
            t.event.to_string(),
            t.from.to_string(),
            t.to.to_string(),
            t.payload_kind.to_string(),
            t.latency.to_string(),
            t.outcome.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
