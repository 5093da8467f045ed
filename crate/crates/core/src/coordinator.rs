//! Leader-follower ADMM, synchronous and asynchronous, with online
//! feedback linearization.
//!
//! Per iteration the leader solves its problem against the latest follower
//! boundary values, each follower answers the broadcast with its own
//! solve and a multiplier step `λ ← λ + ρ (A x_B + B z_B)`, and the
//! physical system is re-solved with the current dispatch to refresh the
//! remainders and ZIP expansions.
//!
//! The asynchronous loop runs over a [`SimBus`]: the leader proceeds once
//! `partial_barrier` followers have reported and no follower's data is
//! older than its bounded delay.

use std::collections::BTreeSet;
use std::io::Write;

use cvr_qp::{solve_with, QpSolution, QpStatus, SolverSettings};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::network::{Feeder, Partition};
use crate::phase::PhaseVector;
use crate::powerflow::{solve_powerflow, EpsMode, Linearization, MeasurementSet, Multipliers, PfOptions};
use crate::simbus::{AgentId, Envelope, Payload, SimBus};
use crate::subproblem::{b_sign, build_follower, build_leader, Subproblem, SubproblemOptions};
use crate::CvrError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmmMode {
    Sync,
    Async,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmConfig {
    pub rho0: f64,
    pub mu: f64,
    pub tau_inc: f64,
    pub tau_dec: f64,
    /// Minimum number of follower reports per leader update; `None`
    /// waits for every follower.
    pub partial_barrier: Option<usize>,
    /// Maximum age, in leader updates, of follower data the leader may use.
    pub bounded_delay: u64,
    /// Per-follower overrides of `bounded_delay`.
    pub bounded_delay_per: Vec<(usize, u64)>,
    pub primal_tol: f64,
    pub dual_tol: f64,
    /// Cap on leader iterations.
    pub max_iter: usize,
    /// Cap on bus clocks in async mode.
    pub max_clocks: u64,
    pub mode: AdmmMode,
    /// Refresh measurements after every iteration; off gives the
    /// fixed-point mode.
    pub online: bool,
    /// An idle follower with nothing in flight re-sends its last update
    /// after this many clocks.
    pub resend_after: u64,
    pub qp_tol: f64,
    pub subproblem: SubproblemOptions,
    /// Quadratic penalty for the soft voltage band used when a subproblem
    /// is infeasible; `None` disables the fallback.
    pub soft_voltage_fallback: Option<f64>,
    /// Standard deviation of meter error fed to the linearization, p.u.
    /// The physical state and every reported metric stay exact.
    pub measurement_noise: f64,
    pub noise_seed: u64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho0: 0.05,
            mu: 10.0,
            tau_inc: 5.0,
            tau_dec: 5.0,
            partial_barrier: None,
            bounded_delay: 10,
            bounded_delay_per: Vec::new(),
            primal_tol: 1e-3,
            dual_tol: 1e-3,
            max_iter: 200,
            max_clocks: 5000,
            mode: AdmmMode::Sync,
            online: true,
            resend_after: 1,
            qp_tol: 1e-6,
            subproblem: SubproblemOptions::default(),
            soft_voltage_fallback: None,
            measurement_noise: 0.0,
            noise_seed: 0,
        }
    }
}

impl AdmmConfig {
    pub fn check(&self, n_followers: usize) -> Result<(), CvrError> {
        let bad = |m: String| Err(CvrError::Config(m));
        if let Some(k) = self.partial_barrier {
            if k < 1 || (n_followers > 0 && k > n_followers) {
                return bad(format!("partial barrier {k} outside 1..={n_followers}"));
            }
        }
        if self.bounded_delay < 1 || self.bounded_delay_per.iter().any(|&(_, t)| t < 1) {
            return bad("bounded delay must be at least 1".into());
        }
        if self.bounded_delay_per.iter().any(|&(n, _)| n >= n_followers) {
            return bad("bounded delay override for an unknown follower".into());
        }
        if self.mu <= 1.0 || self.tau_inc <= 1.0 || self.tau_dec <= 1.0 {
            return bad("mu, tau_inc and tau_dec must exceed 1".into());
        }
        if !(self.rho0 > 0.0) || !(self.primal_tol > 0.0) || !(self.dual_tol > 0.0) {
            return bad("rho0 and tolerances must be positive".into());
        }
        if self.max_iter == 0 {
            return bad("max_iter must be positive".into());
        }
        if !(self.measurement_noise >= 0.0 && self.measurement_noise.is_finite()) {
            return bad("measurement noise must be a finite non-negative deviation".into());
        }
        Ok(())
    }

    pub fn barrier(&self, n_followers: usize) -> usize {
        self.partial_barrier.unwrap_or(n_followers)
    }

    pub fn delay_of(&self, n: usize) -> u64 {
        self.bounded_delay_per.iter().rev().find(|(m, _)| *m == n).map_or(self.bounded_delay, |&(_, t)| t)
    }
}

/// Residual-balancing penalty rule.
pub fn update_penalty(rho: f64, r_norm: f64, s_norm: f64, cfg: &AdmmConfig) -> f64 {
    if r_norm > cfg.mu * s_norm {
        rho * cfg.tau_inc
    } else if s_norm > cfg.mu * r_norm {
        rho / cfg.tau_dec
    } else {
        rho
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    /// Bus clock in async mode, iteration number in sync mode.
    pub leader_clock: u64,
    pub iteration: usize,
    pub r_norm: f64,
    pub s_norm: f64,
    /// Penalty used in this iteration.
    pub rho: f64,
    /// Linearized substation active power at the leader's solution.
    pub objective: f64,
    pub arrived: usize,
}

/// Iteration trace CSV: `leader_clock,r_norm,s_norm,rho,objective,arrived`.
pub fn write_iteration_trace<W: Write>(records: &[IterRecord], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["leader_clock", "r_norm", "s_norm", "rho", "objective", "arrived"])?;
    for r in records {
        out.write_record([
            r.leader_clock.to_string(),
            format!("{:e}", r.r_norm),
            format!("{:e}", r.s_norm),
            format!("{:e}", r.rho),
            format!("{:.12}", r.objective),
            r.arrived.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FollowerState {
    pub z: Vec<f64>,
    pub z_b: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Leader iteration at which the leader last received from this
    /// follower.
    pub last_update_clock: usize,
}

#[derive(Debug, Clone)]
pub struct AdmmState {
    /// Leader primal vector.
    pub x: Vec<f64>,
    pub x_b: Vec<Vec<f64>>,
    pub followers: Vec<FollowerState>,
    /// Leader-side snapshots used in the leader update.
    pub z_tilde: Vec<Vec<f64>>,
    pub lambda_tilde: Vec<Vec<f64>>,
    pub rho: f64,
    pub leader_clock: usize,
    pub history: Vec<IterRecord>,
    pub arrived: BTreeSet<usize>,
    pub broadcast: BTreeSet<usize>,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub iterations: usize,
    pub converged: bool,
    pub dispatch: Vec<PhaseVector>,
    /// Oracle state under the final dispatch.
    pub measurement: MeasurementSet,
    pub records: Vec<IterRecord>,
}

struct FollowerReply {
    z_b: Vec<f64>,
    lambda: Vec<f64>,
    residual: Vec<f64>,
}

/// Stateful driver. State and warm starts persist between time steps.
pub struct Coordinator<'a> {
    feeder: &'a Feeder,
    part: &'a Partition,
    cfg: AdmmConfig,
    settings: SolverSettings,
    mult: Multipliers,
    meas: MeasurementSet,
    lin: Linearization,
    dispatch: Vec<PhaseVector>,
    state: AdmmState,
    leader_warm: Option<QpSolution>,
    follower_warm: Vec<Option<QpSolution>>,
    leader_obj: f64,
    leader_qp: Option<Subproblem>,
    follower_qp: Vec<Option<Subproblem>>,
    meter_rng: ChaCha8Rng,
}

fn norm2(chunks: &[Vec<f64>]) -> f64 {
    chunks.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

impl<'a> Coordinator<'a> {
    /// Starts from a base-case measurement: boundary power from the
    /// measured flows, boundary voltages at 1 p.u. on both sides, zero
    /// multipliers and zero reactive dispatch. The first round is the
    /// followers' answer to this flat start.
    pub fn new(
        feeder: &'a Feeder,
        part: &'a Partition,
        cfg: AdmmConfig,
        mult: Multipliers,
        base: MeasurementSet,
    ) -> Result<Self, CvrError> {
        cfg.check(part.num_followers())?;
        let mut meter_rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
        let lin = linearize(feeder, &base, &mult, cfg.measurement_noise, &mut meter_rng)?;
        let dispatch: Vec<PhaseVector> =
            feeder.inverters.iter().map(|i| PhaseVector::zeros(i.s_cap.mask())).collect();
        let mut followers = Vec::new();
        let mut z_tilde = Vec::new();
        for link in &part.links {
            let mut zb = Vec::with_capacity(link.dim());
            let out: Vec<usize> =
                (0..feeder.branches.len()).filter(|&k| feeder.branches[k].from == link.boundary_bus).collect();
            for part_fn in [|s: num_complex::Complex64| s.re, |s: num_complex::Complex64| s.im] {
                for p in link.phases.iter() {
                    zb.push(out.iter().map(|&k| part_fn(base.s_branch[k][p])).sum());
                }
            }
            zb.extend(link.phases.iter().map(|_| 1.0));
            let d = zb.len();
            followers.push(FollowerState { z: Vec::new(), z_b: zb.clone(), lambda: vec![0.0; d], last_update_clock: 0 });
            z_tilde.push(zb);
        }
        let n = part.num_followers();
        let state = AdmmState {
            x: Vec::new(),
            x_b: z_tilde.iter().map(|z| (0..z.len()).map(|r| -b_sign(r, z.len()) * z[r]).collect()).collect(),
            lambda_tilde: part.links.iter().map(|l| vec![0.0; l.dim()]).collect(),
            followers,
            z_tilde,
            rho: cfg.rho0,
            leader_clock: 0,
            history: Vec::new(),
            arrived: BTreeSet::new(),
            broadcast: BTreeSet::new(),
        };
        let settings = SolverSettings { tol: cfg.qp_tol, ..SolverSettings::default() };
        let leader_obj = base.substation_power(feeder);
        Ok(Coordinator {
            feeder,
            part,
            cfg,
            settings,
            mult,
            meas: base,
            lin,
            dispatch,
            state,
            leader_warm: None,
            follower_warm: vec![None; n],
            leader_obj,
            leader_qp: None,
            follower_qp: vec![None; n],
            meter_rng,
        })
    }

    pub fn state(&self) -> &AdmmState {
        &self.state
    }

    pub fn config(&self) -> &AdmmConfig {
        &self.cfg
    }

    pub fn measurement(&self) -> &MeasurementSet {
        &self.meas
    }

    pub fn linearization(&self) -> &Linearization {
        &self.lin
    }

    pub fn dispatch(&self) -> &[PhaseVector] {
        &self.dispatch
    }

    pub fn history(&self) -> &[IterRecord] {
        &self.state.history
    }

    /// Latest leader and follower subproblems with their solutions.
    pub fn last_problems(&self) -> (Option<&Subproblem>, Vec<Option<&Subproblem>>) {
        (self.leader_qp.as_ref(), self.follower_qp.iter().map(Option::as_ref).collect())
    }

    pub fn last_solutions(&self) -> (Option<&QpSolution>, Vec<Option<&QpSolution>>) {
        (self.leader_warm.as_ref(), self.follower_warm.iter().map(Option::as_ref).collect())
    }

    /// Solves a subproblem, retrying with a soft voltage band when it is
    /// infeasible and the fallback is enabled. `None` means the caller
    /// keeps its previous state.
    fn solve_sub(
        &self,
        build: impl Fn(&SubproblemOptions) -> Result<Subproblem, CvrError>,
        warm: Option<&QpSolution>,
        who: AgentId,
    ) -> Result<Option<(Subproblem, QpSolution)>, CvrError> {
        let sub = build(&self.cfg.subproblem)?;
        let warm = warm.filter(|w| w.x.len() == sub.qp.num_vars() && w.y_eq.len() == sub.qp.num_eq());
        let sol = solve_with(&sub.qp, warm, &self.settings)?;
        if usable(&sol) {
            return Ok(Some((sub, sol)));
        }
        if sol.status == QpStatus::Infeasible {
            if let Some(weight) = self.cfg.soft_voltage_fallback {
                log::warn!("{who}: subproblem infeasible, relaxing the voltage band");
                let opts = SubproblemOptions { soft_voltage: Some(weight), ..self.cfg.subproblem };
                let sub = build(&opts)?;
                let sol = solve_with(&sub.qp, None, &self.settings)?;
                if usable(&sol) {
                    return Ok(Some((sub, sol)));
                }
            }
        }
        log::warn!("{who}: subproblem returned {:?}, keeping previous state", sol.status);
        Ok(None)
    }

    fn leader_update(&mut self) -> Result<(), CvrError> {
        let (feeder, part, lin) = (self.feeder, self.part, &self.lin);
        let (z, lam, rho) = (&self.state.z_tilde, &self.state.lambda_tilde, self.state.rho);
        let out = self.solve_sub(
            |o| build_leader(feeder, part, lin, z, lam, rho, o),
            self.leader_warm.as_ref(),
            AgentId::Leader,
        )?;
        if let Some((sub, sol)) = out {
            for n in 0..part.num_followers() {
                self.state.x_b[n] = sub.boundary_values(&sol.x, n);
            }
            for (k, q) in sub.dispatch(feeder, &sol.x) {
                self.dispatch[k] = q;
            }
            self.leader_obj = sub.substation_power(feeder, &sol.x);
            self.state.x = sol.x.clone();
            self.leader_warm = Some(sol);
            self.leader_qp = Some(sub);
        }
        self.state.leader_clock += 1;
        Ok(())
    }

    fn follower_update(&mut self, n: usize, x_b: &[f64], rho: f64) -> Result<FollowerReply, CvrError> {
        let (feeder, part, lin) = (self.feeder, self.part, &self.lin);
        let lam = self.state.followers[n].lambda.clone();
        let out = self.solve_sub(
            |o| build_follower(feeder, part, n, lin, x_b, &lam, rho, o),
            self.follower_warm[n].as_ref(),
            AgentId::Follower(n),
        )?;
        let f = &mut self.state.followers[n];
        if let Some((sub, sol)) = out {
            f.z_b = sub.boundary_values(&sol.x, n);
            f.z = sol.x.clone();
            for (k, q) in sub.dispatch(feeder, &sol.x) {
                self.dispatch[k] = q;
            }
            self.follower_warm[n] = Some(sol);
            self.follower_qp[n] = Some(sub);
        }
        let d = f.z_b.len();
        let residual: Vec<f64> = (0..d).map(|r| x_b[r] + b_sign(r, d) * f.z_b[r]).collect();
        for r in 0..d {
            f.lambda[r] += rho * residual[r];
        }
        Ok(FollowerReply { z_b: f.z_b.clone(), lambda: f.lambda.clone(), residual })
    }

    /// Re-runs the physical system under the current dispatch and
    /// refreshes the linearization.
    fn refresh(&mut self) -> Result<(), CvrError> {
        let pf = solve_powerflow(self.feeder, &self.dispatch, &self.mult, Some(&self.meas), &PfOptions::default())?;
        self.lin = linearize(self.feeder, &pf.measurement, &self.mult, self.cfg.measurement_noise, &mut self.meter_rng)?;
        self.meas = pf.measurement;
        Ok(())
    }

    /// Moves to new time multipliers: the system is re-measured under the
    /// standing dispatch and the next loop starts from the current state.
    pub fn advance(&mut self, mult: Multipliers, timestamp: usize) -> Result<(), CvrError> {
        self.mult = mult;
        self.refresh()?;
        self.meas.timestamp = timestamp;
        Ok(())
    }

    fn finish(&mut self, converged: bool, first_record: usize) -> Result<StepResult, CvrError> {
        // the reported state is the physical one under the final dispatch
        let pf = solve_powerflow(self.feeder, &self.dispatch, &self.mult, Some(&self.meas), &PfOptions::default())?;
        let ts = self.meas.timestamp;
        self.meas = pf.measurement;
        self.meas.timestamp = ts;
        if self.cfg.online {
            self.lin = linearize(self.feeder, &self.meas, &self.mult, self.cfg.measurement_noise, &mut self.meter_rng)?;
        }
        let records = self.state.history[first_record..].to_vec();
        Ok(StepResult {
            iterations: records.len(),
            converged,
            dispatch: self.dispatch.clone(),
            measurement: self.meas.clone(),
            records,
        })
    }

    fn record(&mut self, clock: u64, iteration: usize, r: f64, s: f64, arrived: usize) {
        self.state.history.push(IterRecord {
            leader_clock: clock,
            iteration,
            r_norm: r,
            s_norm: s,
            rho: self.state.rho,
            objective: self.leader_obj,
            arrived,
        });
    }

    /// Residuals only count once the leader has answered within this run;
    /// before that `x_B` is the starting point, not an optimum.
    fn converged(&self, r: f64, s: f64, start_clock: usize) -> bool {
        self.state.leader_clock > start_clock && r <= self.cfg.primal_tol && s <= self.cfg.dual_tol
    }

    /// Textbook synchronous ADMM.
    pub fn run_sync(&mut self) -> Result<StepResult, CvrError> {
        let first = self.state.history.len();
        let start_clock = self.state.leader_clock;
        let nf = self.part.num_followers();
        let mut converged = false;
        for k in 1..=self.cfg.max_iter {
            let rho = self.state.rho;
            let mut res = Vec::with_capacity(nf);
            let mut dz = Vec::with_capacity(nf);
            for n in 0..nf {
                let x_b = self.state.x_b[n].clone();
                let reply = self.follower_update(n, &x_b, rho)?;
                dz.push(reply.z_b.iter().zip(&self.state.z_tilde[n]).map(|(a, b)| rho * (a - b)).collect());
                self.state.z_tilde[n] = reply.z_b;
                self.state.lambda_tilde[n] = reply.lambda;
                self.state.followers[n].last_update_clock = self.state.leader_clock;
                res.push(reply.residual);
            }
            let (r, s) = (norm2(&res), norm2(&dz));
            self.record(k as u64, k, r, s, nf);
            if self.converged(r, s, start_clock) {
                converged = true;
                break;
            }
            if k == self.cfg.max_iter {
                break;
            }
            self.state.rho = update_penalty(rho, r, s, &self.cfg);
            if self.cfg.online {
                self.refresh()?;
            }
            self.leader_update()?;
        }
        self.finish(converged, first)
    }

    /// Asynchronous ADMM over the bus. Clock zero broadcasts the standing
    /// `x_B` to every follower.
    pub fn run_async(&mut self, bus: &mut SimBus) -> Result<StepResult, CvrError> {
        let first = self.state.history.len();
        let start_clock = self.state.leader_clock;
        let nf = self.part.num_followers();
        let barrier = self.cfg.barrier(nf);
        let tau: Vec<u64> = (0..nf).map(|n| self.cfg.delay_of(n)).collect();
        let mut last_recv = vec![0u64; nf];
        let mut last_post: Vec<Option<u64>> = vec![None; nf];
        let mut last_sent: Vec<Option<Payload>> = vec![None; nf];
        let mut z_at_update = self.state.z_tilde.clone();
        let mut rho_used = vec![self.state.rho; nf];

        self.state.arrived.clear();
        self.state.broadcast = (0..nf).collect();
        self.send_broadcasts(bus, 0)?;

        let mut converged = false;
        let mut iteration = 0usize;
        let mut clock = 0u64;
        while iteration < self.cfg.max_iter && clock < self.cfg.max_clocks {
            clock += 1;
            for n in 0..nf {
                let me = AgentId::Follower(n);
                let inbox = bus.poll(me, clock)?;
                if bus.policy().failing(me, clock) {
                    continue;
                }
                let mut latest = inbox.into_iter().filter_map(|e| match e.payload {
                    Payload::Broadcast { x_b, rho } => Some((x_b, rho)),
                    _ => None,
                });
                if let Some((x_b, rho)) = latest.next_back() {
                    let reply = self.follower_update(n, &x_b, rho)?;
                    let payload = Payload::Update { z_b: reply.z_b, lambda: reply.lambda, residual: reply.residual };
                    self.post(bus, me, AgentId::Leader, payload.clone(), clock)?;
                    last_sent[n] = Some(payload);
                    last_post[n] = Some(clock);
                } else if let (Some(p), Some(t), None) = (&last_sent[n], last_post[n], bus.policy().random_subset) {
                    // followers left out of a random draw stay silent
                    if clock - t >= self.cfg.resend_after && bus.pending_from(me) == 0 {
                        let p = p.clone();
                        self.post(bus, me, AgentId::Leader, p, clock)?;
                        last_post[n] = Some(clock);
                    }
                }
            }

            let inbox = bus.poll(AgentId::Leader, clock)?;
            let leader_down = bus.policy().failing(AgentId::Leader, clock);
            if leader_down {
                for n in 0..nf {
                    if clock - last_recv[n] >= tau[n] {
                        bus.note(clock, "bound_violation", AgentId::Follower(n), AgentId::Leader);
                    }
                }
                continue;
            }
            for e in inbox {
                let AgentId::Follower(n) = e.from else { continue };
                if let Payload::Update { z_b, lambda, .. } = e.payload {
                    self.state.z_tilde[n] = z_b;
                    self.state.lambda_tilde[n] = lambda;
                    last_recv[n] = clock;
                    self.state.followers[n].last_update_clock = self.state.leader_clock;
                    self.state.arrived.insert(n);
                }
            }
            if self.state.arrived.len() < barrier.min(nf) && nf > 0 {
                continue;
            }
            // bounded delay, counted in leader updates: wait for stale
            // followers unless they are down
            let age = |st: &AdmmState, n: usize| (st.leader_clock - st.followers[n].last_update_clock) as u64;
            let mut waiting = false;
            for n in 0..nf {
                if age(&self.state, n) >= tau[n] {
                    if bus.policy().failing(AgentId::Follower(n), clock) {
                        bus.note(clock, "bound_violation", AgentId::Follower(n), AgentId::Leader);
                    } else {
                        waiting = true;
                    }
                }
            }
            if waiting {
                continue;
            }
            for n in 0..nf {
                let down = bus.policy().failing(AgentId::Follower(n), clock);
                assert!(down || age(&self.state, n) < tau[n], "bounded delay exceeded for follower {n}");
            }

            iteration += 1;
            let dz: Vec<Vec<f64>> = (0..nf)
                .map(|n| {
                    let rho = rho_used[n];
                    self.state.z_tilde[n].iter().zip(&z_at_update[n]).map(|(a, b)| rho * (a - b)).collect()
                })
                .collect();
            // the leader's own view of consensus: its current x_B against
            // the freshest z_B it holds
            let residuals: Vec<Vec<f64>> = (0..nf)
                .map(|n| {
                    let (x, z) = (&self.state.x_b[n], &self.state.z_tilde[n]);
                    (0..x.len()).map(|r| x[r] + b_sign(r, x.len()) * z[r]).collect()
                })
                .collect();
            let (r, s) = (norm2(&residuals), norm2(&dz));
            let arrived = self.state.arrived.len();
            self.record(clock, iteration, r, s, arrived);
            if self.converged(r, s, start_clock) {
                converged = true;
                break;
            }
            if iteration == self.cfg.max_iter {
                break;
            }
            z_at_update.clone_from(&self.state.z_tilde);
            self.state.rho = update_penalty(self.state.rho, r, s, &self.cfg);
            if self.cfg.online {
                self.refresh()?;
            }
            self.leader_update()?;
            let arrived = std::mem::take(&mut self.state.arrived);
            // under random selection every follower may be picked next
            self.state.broadcast = if bus.policy().random_subset.is_some() { (0..nf).collect() } else { arrived };
            for &n in &self.state.broadcast {
                rho_used[n] = self.state.rho;
            }
            self.send_broadcasts(bus, clock)?;
        }
        self.finish(converged, first)
    }

    fn post(&self, bus: &mut SimBus, from: AgentId, to: AgentId, payload: Payload, clock: u64) -> Result<(), CvrError> {
        bus.post(Envelope { from, to, payload, send_clock: clock, deliver_clock: clock })?;
        Ok(())
    }

    fn send_broadcasts(&self, bus: &mut SimBus, clock: u64) -> Result<(), CvrError> {
        for &n in &self.state.broadcast {
            let payload = Payload::Broadcast { x_b: self.state.x_b[n].clone(), rho: self.state.rho };
            self.post(bus, AgentId::Leader, AgentId::Follower(n), payload, clock)?;
        }
        Ok(())
    }

    pub fn run(&mut self, bus: Option<&mut SimBus>) -> Result<StepResult, CvrError> {
        match (self.cfg.mode, bus) {
            (AdmmMode::Sync, _) => self.run_sync(),
            (AdmmMode::Async, Some(bus)) => self.run_async(bus),
            (AdmmMode::Async, None) => Err(CvrError::Config("async mode needs a message bus".into())),
        }
    }
}

fn linearize(
    feeder: &Feeder,
    m: &MeasurementSet,
    mult: &Multipliers,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Linearization, CvrError> {
    if noise > 0.0 {
        let read = m.with_noise(noise, rng)?;
        return Linearization::from_measurement(feeder, &read, mult, EpsMode::WithEps);
    }
    Linearization::from_measurement(feeder, m, mult, EpsMode::WithEps)
}

fn usable(sol: &QpSolution) -> bool {
    sol.status == QpStatus::Optimal || (sol.status == QpStatus::MaxIter && sol.kkt_residual <= 1e-4)
}
