//! Operator-splitting QP solver with active-set polishing.
//!
//! The iteration alternates a linear solve on the regularized KKT system with
//! a projection onto the constraint box, with over-relaxation and an adaptive
//! step size. Equality rows and variable bounds are handled uniformly as rows
//! of `C = [A; I]` with `l ≤ C x ≤ u`. Once the iterates reach a moderate
//! accuracy, the active set they suggest is used to solve the equality
//! constrained KKT system directly ("polishing"); the result is accepted only
//! if it passes [`check_kkt`](crate::check_kkt) at the requested tolerance.

use crate::kkt::check_kkt_raw;
use crate::ldl::LdlSymbolic;
use crate::problem::dot;
use crate::sparse::{inf_norm, Csr, SparseMatrix};
use crate::{QpError, QpProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Multipliers of `A x = b`.
    pub y_eq: Vec<f64>,
    /// Signed bound multipliers: positive at an active upper bound, negative
    /// at an active lower bound.
    pub w_bound: Vec<f64>,
    pub status: QpStatus,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub polished: bool,
    /// Residual of the infeasibility certificate when one was found.
    pub certificate: Option<f64>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub scaling_iters: usize,
    pub adaptive_rho_interval: usize,
    pub check_interval: usize,
    /// Relative accuracy at which the first polish is attempted.
    pub polish_trigger: f64,
    pub polish: bool,
    pub eps_infeasible: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 15,
            adaptive_rho_interval: 25,
            check_interval: 5,
            polish_trigger: 1e-3,
            polish: true,
            eps_infeasible: 1e-6,
        }
    }
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;
const STALL_POLISH_INTERVAL: usize = 500;

/// Solves `qp` to the default tolerance (1e-6) and iteration cap (20000).
pub fn solve(qp: &QpProblem, warm_start: Option<&QpSolution>) -> Result<QpSolution, QpError> {
    solve_with(qp, warm_start, &SolverSettings::default())
}

pub fn solve_with(
    qp: &QpProblem,
    warm_start: Option<&QpSolution>,
    settings: &SolverSettings,
) -> Result<QpSolution, QpError> {
    qp.check_dimensions()?;
    qp.check_psd()?;
    if let Some(ws) = warm_start {
        if ws.x.len() != qp.num_vars() || ws.y_eq.len() != qp.num_eq() {
            return Err(QpError::Dimension("warm start".into()));
        }
    }
    let mut w = Workspace::new(qp, settings)?;
    w.run(warm_start)
}

struct Workspace<'a> {
    qp: &'a QpProblem,
    s: SolverSettings,
    n: usize,
    m_eq: usize,
    m: usize,
    // scaled data
    p_up: Vec<(usize, usize, f64)>,
    c: Csr,
    q: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    d: Vec<f64>,
    e: Vec<f64>,
    cost_scale: f64,
    // kkt
    sym: LdlSymbolic,
    kkt_vals: Vec<f64>,
    rho_slots: Vec<usize>,
    rho: f64,
    rho_vec: Vec<f64>,
}

impl<'a> Workspace<'a> {
    fn new(qp: &'a QpProblem, s: &SolverSettings) -> Result<Self, QpError> {
        let n = qp.num_vars();
        let m_eq = qp.num_eq();
        let m = m_eq + n;
        let pc = qp.p.compressed();
        let mut p_up = pc.entries.clone();
        let mut c_trip: Vec<(usize, usize, f64)> = qp.a.compressed().entries.clone();
        for j in 0..n {
            c_trip.push((m_eq + j, j, 1.0));
        }
        let mut q = qp.q.clone();
        let mut lo: Vec<f64> = qp.b.iter().copied().chain(qp.lower.iter().copied()).collect();
        let mut hi: Vec<f64> = qp.b.iter().copied().chain(qp.upper.iter().copied()).collect();

        // Ruiz equilibration of [P Cᵀ; C 0] followed by cost scaling.
        let mut d = vec![1.0; n];
        let mut e = vec![1.0; m];
        let mut cost_scale = 1.0;
        for _ in 0..s.scaling_iters {
            let mut dn = vec![0.0f64; n];
            let mut en = vec![0.0f64; m];
            for &(i, j, v) in &p_up {
                dn[i] = dn[i].max(v.abs());
                dn[j] = dn[j].max(v.abs());
            }
            for &(i, j, v) in &c_trip {
                dn[j] = dn[j].max(v.abs());
                en[i] = en[i].max(v.abs());
            }
            let fix = |x: f64| if x < 1e-4 { 1.0 } else { 1.0 / x.sqrt().clamp(1e-4, 1e4) };
            let dn: Vec<f64> = dn.into_iter().map(fix).collect();
            let en: Vec<f64> = en.into_iter().map(fix).collect();
            for t in p_up.iter_mut() {
                t.2 *= dn[t.0] * dn[t.1];
            }
            for t in c_trip.iter_mut() {
                t.2 *= en[t.0] * dn[t.1];
            }
            for j in 0..n {
                q[j] *= dn[j];
                d[j] *= dn[j];
            }
            for i in 0..m {
                e[i] *= en[i];
            }
            // cost
            let mut col = vec![0.0f64; n];
            for &(i, j, v) in &p_up {
                col[i] = col[i].max(v.abs());
                col[j] = col[j].max(v.abs());
            }
            let mean_col = if n > 0 { col.iter().sum::<f64>() / n as f64 } else { 0.0 };
            let denom = mean_col.max(inf_norm(&q));
            let gamma = if denom < 1e-4 { 1.0 } else { (1.0 / denom).clamp(1e-4, 1e4) };
            for t in p_up.iter_mut() {
                t.2 *= gamma;
            }
            q.iter_mut().for_each(|v| *v *= gamma);
            cost_scale *= gamma;
        }
        for i in 0..m {
            lo[i] *= e[i];
            hi[i] *= e[i];
        }

        let mut cm = SparseMatrix::new(m, n);
        cm.entries = c_trip;
        let c = Csr::from_triplets(&cm);

        // KKT pattern: [P + σI, Cᵀ; C, -diag(1/ρ)]
        let mut pattern = Vec::with_capacity(p_up.len() + n + c.values.len() + m);
        let mut kkt_vals = Vec::with_capacity(pattern.capacity());
        for &(i, j, v) in &p_up {
            pattern.push((i, j));
            kkt_vals.push(v);
        }
        for j in 0..n {
            pattern.push((j, j));
            kkt_vals.push(s.sigma);
        }
        for (i, j, v) in c.iter() {
            pattern.push((j, n + i));
            kkt_vals.push(v);
        }
        let mut rho_slots = Vec::with_capacity(m);
        for i in 0..m {
            rho_slots.push(pattern.len());
            pattern.push((n + i, n + i));
            kkt_vals.push(0.0);
        }
        let sym = LdlSymbolic::analyze(n + m, &pattern);

        let mut w = Workspace {
            qp,
            s: *s,
            n,
            m_eq,
            m,
            p_up,
            c,
            q,
            lo,
            hi,
            d,
            e,
            cost_scale,
            sym,
            kkt_vals,
            rho_slots,
            rho: s.rho,
            rho_vec: vec![0.0; m],
        };
        w.set_rho(s.rho);
        Ok(w)
    }

    fn set_rho(&mut self, rho: f64) {
        self.rho = rho.clamp(RHO_MIN, RHO_MAX);
        for i in 0..self.m {
            let r = if self.lo[i] == self.hi[i] {
                RHO_EQ_SCALE * self.rho
            } else if self.lo[i] == f64::NEG_INFINITY && self.hi[i] == f64::INFINITY {
                RHO_MIN
            } else {
                self.rho
            };
            self.rho_vec[i] = r;
            self.kkt_vals[self.rho_slots[i]] = -1.0 / r;
        }
    }

    fn p_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for &(i, j, v) in &self.p_up {
            y[i] += v * x[j];
            if i != j {
                y[j] += v * x[i];
            }
        }
        y
    }

    fn run(&mut self, warm: Option<&QpSolution>) -> Result<QpSolution, QpError> {
        let (n, m) = (self.n, self.m);
        let mut x = vec![0.0; n];
        let mut z = vec![0.0; m];
        let mut y = vec![0.0; m];
        if let Some(ws) = warm {
            for j in 0..n {
                x[j] = ws.x[j] / self.d[j];
            }
            for i in 0..self.m_eq {
                y[i] = ws.y_eq[i] * self.cost_scale / self.e[i];
            }
            for j in 0..n {
                let i = self.m_eq + j;
                y[i] = ws.w_bound[j] * self.cost_scale / self.e[i];
            }
        }
        let mut cx = vec![0.0; m];
        self.c.mul_vec_into(&x, &mut cx);
        for i in 0..m {
            z[i] = cx[i].clamp(self.lo[i], self.hi[i]);
        }

        let mut factor = self.sym.factor(&self.kkt_vals)?;
        let mut rhs = vec![0.0; n + m];
        let mut ct_y = vec![0.0; n];
        let mut stage_eps = self.s.polish_trigger.max(self.s.tol);
        let mut best: Option<QpSolution> = None;
        let alpha = self.s.alpha;
        let sigma = self.s.sigma;

        for iter in 1..=self.s.max_iter {
            let x_prev = x.clone();
            let y_prev = y.clone();
            for j in 0..n {
                rhs[j] = sigma * x[j] - self.q[j];
            }
            for i in 0..m {
                rhs[n + i] = z[i] - y[i] / self.rho_vec[i];
            }
            factor.solve(&mut rhs);
            for i in 0..m {
                let zt = z[i] + (rhs[n + i] - y[i]) / self.rho_vec[i];
                let zr = alpha * zt + (1.0 - alpha) * z[i];
                let zn = (zr + y[i] / self.rho_vec[i]).clamp(self.lo[i], self.hi[i]);
                y[i] += self.rho_vec[i] * (zr - zn);
                z[i] = zn;
            }
            for j in 0..n {
                x[j] = alpha * rhs[j] + (1.0 - alpha) * x[j];
            }

            let check = iter % self.s.check_interval == 0 || iter == self.s.max_iter || iter == 1;
            if !check {
                continue;
            }
            self.c.mul_vec_into(&x, &mut cx);
            self.c.tr_mul_vec_into(&y, &mut ct_y);
            let px = self.p_mul(&x);
            let (prim, prim_norm, dual, dual_norm) = self.residuals(&z, &cx, &px, &ct_y);

            // infeasibility certificates
            let dy: Vec<f64> = y.iter().zip(&y_prev).map(|(a, b)| a - b).collect();
            if let Some(cert) = self.primal_infeasible(&dy) {
                let mut sol = self.unscale(&x, &y, iter);
                sol.status = QpStatus::Infeasible;
                sol.certificate = Some(cert);
                return Ok(sol);
            }
            let dx: Vec<f64> = x.iter().zip(&x_prev).map(|(a, b)| a - b).collect();
            if let Some(cert) = self.dual_infeasible(&dx) {
                let mut sol = self.unscale(&x, &y, iter);
                sol.status = QpStatus::Unbounded;
                sol.certificate = Some(cert);
                return Ok(sol);
            }

            let converged = |eps: f64| prim <= eps * (1.0 + prim_norm) && dual <= eps * (1.0 + dual_norm);
            // a stalled run still gets an occasional polish attempt
            let stalled = iter % STALL_POLISH_INTERVAL == 0;
            if converged(stage_eps) || stalled || iter == self.s.max_iter {
                let raw = self.unscale(&x, &y, iter);
                if self.s.polish {
                    if let Some(p) = polish(self.qp, &raw, self.m_eq, self.s.tol) {
                        if p.kkt_residual <= self.s.tol {
                            return Ok(p);
                        }
                        keep_best(&mut best, p);
                    }
                }
                if raw.kkt_residual <= self.s.tol {
                    return Ok(QpSolution { status: QpStatus::Optimal, ..raw });
                }
                keep_best(&mut best, raw);
                if converged(stage_eps) {
                    stage_eps = (stage_eps * 0.1).max(self.s.tol * 1e-3);
                }
            }

            if self.s.adaptive_rho_interval > 0 && iter % self.s.adaptive_rho_interval == 0 {
                let sp = inf_norm(&cx.iter().zip(&z).map(|(a, b)| a - b).collect::<Vec<_>>())
                    / inf_norm(&cx).max(inf_norm(&z)).max(1e-12);
                let mut dres = px.clone();
                for j in 0..n {
                    dres[j] += self.q[j] + ct_y[j];
                }
                let sd = inf_norm(&dres)
                    / inf_norm(&px).max(inf_norm(&ct_y)).max(inf_norm(&self.q)).max(1e-12);
                if sd > 1e-14 && sp > 1e-14 {
                    let cand = (self.rho * (sp / sd).sqrt()).clamp(RHO_MIN, RHO_MAX);
                    if cand > 5.0 * self.rho || cand < self.rho / 5.0 {
                        self.set_rho(cand);
                        factor = self.sym.factor(&self.kkt_vals)?;
                    }
                }
            }
        }
        let mut out = best.expect("max_iter >= 1 always records a candidate");
        out.status = QpStatus::MaxIter;
        out.iterations = self.s.max_iter;
        Ok(out)
    }

    /// Unscaled primal/dual residuals and their normalizers.
    fn residuals(&self, z: &[f64], cx: &[f64], px: &[f64], ct_y: &[f64]) -> (f64, f64, f64, f64) {
        let mut prim = 0.0f64;
        let mut prim_norm = 0.0f64;
        for i in 0..self.m {
            let inv = 1.0 / self.e[i];
            if z[i].is_finite() {
                prim = prim.max(((cx[i] - z[i]) * inv).abs());
                prim_norm = prim_norm.max((z[i] * inv).abs());
            }
            prim_norm = prim_norm.max((cx[i] * inv).abs());
        }
        let mut dual = 0.0f64;
        let mut dual_norm = 0.0f64;
        let ic = 1.0 / self.cost_scale;
        for j in 0..self.n {
            let inv = ic / self.d[j];
            dual = dual.max(((px[j] + self.q[j] + ct_y[j]) * inv).abs());
            dual_norm = dual_norm
                .max((px[j] * inv).abs())
                .max((ct_y[j] * inv).abs())
                .max((self.q[j] * inv).abs());
        }
        (prim, prim_norm, dual, dual_norm)
    }

    fn primal_infeasible(&self, dy_scaled: &[f64]) -> Option<f64> {
        let dy: Vec<f64> = dy_scaled.iter().zip(&self.e).map(|(v, e)| v * e).collect();
        let norm = inf_norm(&dy);
        if norm < 1e-10 {
            return None;
        }
        let eps = self.s.eps_infeasible * norm;
        // Cᵀ dy in unscaled space (C = E⁻¹ C̄ D⁻¹)
        let mut t = vec![0.0; self.n];
        let unscaled: Vec<f64> = dy.iter().zip(&self.e).map(|(v, e)| v / e).collect();
        self.c.tr_mul_vec_into(&unscaled, &mut t);
        let ct_norm = t.iter().zip(&self.d).map(|(v, d)| (v / d).abs()).fold(0.0, f64::max);
        if ct_norm > eps {
            return None;
        }
        let mut support = 0.0;
        for i in 0..self.m {
            let lo = self.lo[i] / self.e[i];
            let hi = self.hi[i] / self.e[i];
            if dy[i] > 0.0 {
                if !hi.is_finite() {
                    if dy[i] > eps {
                        return None;
                    }
                    continue;
                }
                support += hi * dy[i];
            } else if dy[i] < 0.0 {
                if !lo.is_finite() {
                    if -dy[i] > eps {
                        return None;
                    }
                    continue;
                }
                support += lo * dy[i];
            }
        }
        if support < -eps {
            Some(ct_norm / norm)
        } else {
            None
        }
    }

    fn dual_infeasible(&self, dx_scaled: &[f64]) -> Option<f64> {
        let dx: Vec<f64> = dx_scaled.iter().zip(&self.d).map(|(v, d)| v * d).collect();
        let norm = inf_norm(&dx);
        if norm < 1e-10 {
            return None;
        }
        let eps = self.s.eps_infeasible * norm;
        let pdx = self.qp.p.sym_mul_vec(&dx);
        if inf_norm(&pdx) > eps {
            return None;
        }
        if dot(&self.qp.q, &dx) >= -eps {
            return None;
        }
        let adx = self.qp.a.mul_vec(&dx);
        if inf_norm(&adx) > eps {
            return None;
        }
        for j in 0..self.n {
            let (lo, hi) = (self.qp.lower[j], self.qp.upper[j]);
            if hi.is_finite() && dx[j] > eps {
                return None;
            }
            if lo.is_finite() && dx[j] < -eps {
                return None;
            }
        }
        Some(inf_norm(&pdx) / norm)
    }

    fn unscale(&self, x: &[f64], y: &[f64], iterations: usize) -> QpSolution {
        let n = self.n;
        let mut xu: Vec<f64> = x.iter().zip(&self.d).map(|(v, d)| v * d).collect();
        for j in 0..n {
            xu[j] = xu[j].clamp(self.qp.lower[j], self.qp.upper[j]);
        }
        let yu: Vec<f64> = y.iter().zip(&self.e).map(|(v, e)| v * e / self.cost_scale).collect();
        let y_eq = yu[..self.m_eq].to_vec();
        let w_bound = yu[self.m_eq..].to_vec();
        let rep = check_kkt_raw(self.qp, &xu, &y_eq, &w_bound);
        QpSolution {
            objective: self.qp.objective(&xu),
            x: xu,
            y_eq,
            w_bound,
            status: QpStatus::MaxIter,
            kkt_residual: rep.max(),
            iterations,
            polished: false,
            certificate: None,
        }
    }
}

fn keep_best(best: &mut Option<QpSolution>, cand: QpSolution) {
    match best {
        Some(b) if b.kkt_residual <= cand.kkt_residual => {}
        _ => *best = Some(cand),
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Active {
    Free,
    Lower,
    Upper,
}

/// Active-set refinement starting from an approximate primal-dual pair.
fn polish(qp: &QpProblem, raw: &QpSolution, m_eq: usize, tol: f64) -> Option<QpSolution> {
    let n = qp.num_vars();
    let mut act: Vec<Active> = (0..n)
        .map(|j| {
            let (lo, hi, xj, wj) = (qp.lower[j], qp.upper[j], raw.x[j], raw.w_bound[j]);
            if lo == hi || (lo.is_finite() && xj - lo < -wj) {
                Active::Lower
            } else if hi.is_finite() && hi - xj < wj {
                Active::Upper
            } else {
                Active::Free
            }
        })
        .collect();

    let mut out = None;
    for _round in 0..8 {
        let (x, y, w) = solve_reduced_kkt(qp, &act, m_eq)?;
        let mut changed = false;
        let sign_tol = 1e-9;
        for j in 0..n {
            match act[j] {
                Active::Lower if qp.lower[j] != qp.upper[j] && w[j] > sign_tol => {
                    act[j] = Active::Free;
                    changed = true;
                }
                Active::Upper if w[j] < -sign_tol => {
                    act[j] = Active::Free;
                    changed = true;
                }
                Active::Free if x[j] < qp.lower[j] - tol * 1e-2 => {
                    act[j] = Active::Lower;
                    changed = true;
                }
                Active::Free if x[j] > qp.upper[j] + tol * 1e-2 => {
                    act[j] = Active::Upper;
                    changed = true;
                }
                _ => {}
            }
        }
        let mut xw = x;
        let mut ww = w;
        for j in 0..n {
            xw[j] = xw[j].clamp(qp.lower[j], qp.upper[j]);
            match act[j] {
                Active::Lower if qp.lower[j] != qp.upper[j] => ww[j] = ww[j].min(0.0),
                Active::Upper => ww[j] = ww[j].max(0.0),
                _ => {}
            }
        }
        let rep = check_kkt_raw(qp, &xw, &y, &ww);
        let cand = QpSolution {
            objective: qp.objective(&xw),
            x: xw,
            y_eq: y,
            w_bound: ww,
            status: if rep.max() <= tol { QpStatus::Optimal } else { QpStatus::MaxIter },
            kkt_residual: rep.max(),
            iterations: raw.iterations,
            polished: true,
            certificate: None,
        };
        let done = !changed || cand.kkt_residual <= tol;
        keep_best(&mut out, cand);
        if done {
            break;
        }
    }
    out
}

/// Solves the KKT system with the given active bounds held at their values.
fn solve_reduced_kkt(qp: &QpProblem, act: &[Active], m_eq: usize) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = qp.num_vars();
    let active: Vec<usize> = (0..n).filter(|&j| act[j] != Active::Free).collect();
    let k = active.len();
    let dim = n + m_eq + k;
    let delta = 1e-6;
    let mut pattern = Vec::new();
    let mut exact = Vec::new();
    for &(i, j, v) in &qp.p.entries {
        pattern.push((i, j));
        exact.push(v);
    }
    for &(i, j, v) in &qp.a.entries {
        pattern.push((j, n + i));
        exact.push(v);
    }
    for (t, &j) in active.iter().enumerate() {
        pattern.push((j, n + m_eq + t));
        exact.push(1.0);
    }
    let n_exact = pattern.len();
    for r in 0..dim {
        pattern.push((r, r));
        exact.push(0.0);
    }
    let mut reg = exact.clone();
    for r in 0..dim {
        reg[n_exact + r] = if r < n { delta } else { -delta };
    }
    let sym = LdlSymbolic::analyze(dim, &pattern);
    let f = sym.factor(&reg).ok()?;

    let mut rhs = vec![0.0; dim];
    for j in 0..n {
        rhs[j] = -qp.q[j];
    }
    for i in 0..m_eq {
        rhs[n + i] = qp.b[i];
    }
    for (t, &j) in active.iter().enumerate() {
        rhs[n + m_eq + t] = if act[j] == Active::Upper { qp.upper[j] } else { qp.lower[j] };
    }
    let mul = |v: &[f64]| {
        let mut out = vec![0.0; dim];
        for (&(i, j), &a) in pattern.iter().zip(&exact) {
            if a == 0.0 {
                continue;
            }
            out[i] += a * v[j];
            if i != j {
                out[j] += a * v[i];
            }
        }
        out
    };
    let mut sol = rhs.clone();
    f.solve(&mut sol);
    for _ in 0..20 {
        let ks = mul(&sol);
        let mut r: Vec<f64> = rhs.iter().zip(&ks).map(|(a, b)| a - b).collect();
        if inf_norm(&r) < 1e-13 * (1.0 + inf_norm(&rhs)) {
            break;
        }
        f.solve(&mut r);
        for (s, d) in sol.iter_mut().zip(&r) {
            *s += d;
        }
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = sol[..n].to_vec();
    let y = sol[n..n + m_eq].to_vec();
    let mut w = vec![0.0; n];
    for (t, &j) in active.iter().enumerate() {
        w[j] = sol[n + m_eq + t];
    }
    Some((x, y, w))
}
