//! Sparse LDLᵀ factorization for symmetric quasi-definite matrices.
//!
//! Quasi-definite matrices admit an LDLᵀ factorization under any symmetric
//! permutation, so no numerical pivoting is performed. The fill-reducing
//! permutation is a plain minimum-degree ordering over the explicit
//! elimination graph.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use crate::QpError;

/// Ordering, elimination tree and storage layout for a fixed sparsity
/// pattern. The pattern is a list of upper-triangular `(row, col)` slots,
/// duplicates allowed.
#[derive(Debug, Clone)]
pub(crate) struct LdlSymbolic {
    n: usize,
    perm: Vec<usize>,
    /// Column pointers of the permuted upper triangle (CSC).
    ap: Vec<usize>,
    ai: Vec<usize>,
    /// Input slot -> CSC position.
    slot: Vec<usize>,
    parent: Vec<Option<usize>>,
    lp: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct LdlFactor {
    sym: LdlSymbolic,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
}

fn min_degree_order(n: usize, pattern: &[(usize, usize)]) -> Vec<usize> {
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for &(i, j) in pattern {
        if i != j {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> =
        (0..n).map(|v| Reverse((adj[v].len(), v))).collect();
    let mut done = vec![false; n];
    let mut perm = Vec::with_capacity(n);
    while let Some(Reverse((deg, v))) = heap.pop() {
        if done[v] || deg != adj[v].len() {
            continue;
        }
        done[v] = true;
        perm.push(v);
        let nbrs: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &u in &nbrs {
            adj[u].remove(&v);
        }
        for (k, &a) in nbrs.iter().enumerate() {
            for &b in &nbrs[k + 1..] {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        for &u in &nbrs {
            heap.push(Reverse((adj[u].len(), u)));
        }
    }
    perm
}

impl LdlSymbolic {
    pub fn analyze(n: usize, pattern: &[(usize, usize)]) -> Self {
        let perm = min_degree_order(n, pattern);
        let mut pinv = vec![0usize; n];
        for (k, &p) in perm.iter().enumerate() {
            pinv[p] = k;
        }
        // Permuted upper-triangular coordinates, diagonal always present.
        let mut coords: Vec<(usize, usize, usize)> = Vec::with_capacity(pattern.len() + n);
        for (k, &(i, j)) in pattern.iter().enumerate() {
            let (a, b) = (pinv[i], pinv[j]);
            let (r, c) = if a <= b { (a, b) } else { (b, a) };
            coords.push((c, r, k));
        }
        for c in 0..n {
            coords.push((c, c, usize::MAX));
        }
        coords.sort_unstable_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        let mut ap = vec![0usize; n + 1];
        let mut ai = Vec::new();
        let mut slot = vec![0usize; pattern.len()];
        let mut prev = None;
        for &(c, r, k) in &coords {
            if prev != Some((c, r)) {
                ai.push(r);
                prev = Some((c, r));
            }
            ap[c + 1] = ai.len();
            if k != usize::MAX {
                slot[k] = ai.len() - 1;
            }
        }

        // Elimination tree and column counts.
        let mut parent = vec![None; n];
        let mut lnz = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        for k in 0..n {
            flag[k] = k;
            for p in ap[k]..ap[k + 1] {
                let mut i = ai[p];
                if i >= k {
                    continue;
                }
                while flag[i] != k {
                    if parent[i].is_none() {
                        parent[i] = Some(k);
                    }
                    lnz[i] += 1;
                    flag[i] = k;
                    i = parent[i].expect("etree parent");
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + lnz[k];
        }
        LdlSymbolic { n, perm, ap, ai, slot, parent, lp }
    }

    /// Numeric factorization with values aligned to the analyzed pattern.
    pub fn factor(&self, values: &[f64]) -> Result<LdlFactor, QpError> {
        let n = self.n;
        let mut ax = vec![0.0; self.ai.len()];
        for (k, &v) in values.iter().enumerate() {
            ax[self.slot[k]] += v;
        }
        let nnz_l = self.lp[n];
        let mut li = vec![0usize; nnz_l];
        let mut lx = vec![0.0; nnz_l];
        let mut d = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut pattern = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            y[k] = 0.0;
            let mut top = n;
            flag[k] = k;
            for p in self.ap[k]..self.ap[k + 1] {
                let mut i = self.ai[p];
                y[i] += ax[p];
                let mut len = 0;
                while flag[i] != k {
                    pattern[len] = i;
                    len += 1;
                    flag[i] = k;
                    i = self.parent[i].expect("etree parent");
                }
                while len > 0 {
                    top -= 1;
                    len -= 1;
                    pattern[top] = pattern[len];
                }
            }
            d[k] = y[k];
            y[k] = 0.0;
            for &i in &pattern[top..n] {
                let yi = y[i];
                y[i] = 0.0;
                let p2 = self.lp[i] + lnz[i];
                for p in self.lp[i]..p2 {
                    y[li[p]] -= lx[p] * yi;
                }
                let l_ki = yi / d[i];
                d[k] -= l_ki * yi;
                li[p2] = k;
                lx[p2] = l_ki;
                lnz[i] += 1;
            }
            if d[k] == 0.0 || !d[k].is_finite() {
                return Err(QpError::Factorization(k));
            }
        }
        Ok(LdlFactor { sym: self.clone(), li, lx, d })
    }
}

impl LdlFactor {
    /// Solves `K x = b` in place.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.sym.n;
        let perm = &self.sym.perm;
        let mut x: Vec<f64> = perm.iter().map(|&p| b[p]).collect();
        let lp = &self.sym.lp;
        for j in 0..n {
            let xj = x[j];
            if xj != 0.0 {
                for p in lp[j]..lp[j + 1] {
                    x[self.li[p]] -= self.lx[p] * xj;
                }
            }
        }
        for j in 0..n {
            x[j] /= self.d[j];
        }
        for j in (0..n).rev() {
            let mut acc = x[j];
            for p in lp[j]..lp[j + 1] {
                acc -= self.lx[p] * x[self.li[p]];
            }
            x[j] = acc;
        }
        for (k, &p) in perm.iter().enumerate() {
            b[p] = x[k];
        }
    }
}
