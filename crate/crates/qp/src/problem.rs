use std::collections::HashMap;

use crate::sparse::SparseMatrix;
use crate::QpError;

/// Convex quadratic program
///
/// ```text
/// minimize    ½ xᵀ P x + qᵀ x + constant
/// subject to  A x = b
///             lower ≤ x ≤ upper
/// ```
///
/// `p` stores the upper triangle of the symmetric cost Hessian. Bounds may be
/// infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub names: Vec<String>,
    pub p: SparseMatrix,
    pub q: Vec<f64>,
    pub constant: f64,
    pub a: SparseMatrix,
    pub b: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QpProblem {
    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_eq(&self) -> usize {
        self.b.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let px = self.p.sym_mul_vec(x);
        0.5 * dot(x, &px) + dot(&self.q, x) + self.constant
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name_index(&self) -> HashMap<&str, usize> {
        self.names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect()
    }

    pub fn check_dimensions(&self) -> Result<(), QpError> {
        let n = self.num_vars();
        let m = self.num_eq();
        let bad = |what: &str| Err(QpError::Dimension(what.to_string()));
        if self.names.len() != n {
            return bad("names");
        }
        if self.p.nrows != n || self.p.ncols != n {
            return bad("P");
        }
        if self.a.ncols != n || self.a.nrows != m {
            return bad("A");
        }
        if self.lower.len() != n || self.upper.len() != n {
            return bad("bounds");
        }
        if self.p.entries.iter().any(|&(i, j, _)| i > j) {
            return bad("P must be stored as its upper triangle");
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l > u || l.is_nan() || u.is_nan()) {
            return bad("lower bound above upper bound");
        }
        Ok(())
    }

    /// Rejects cost matrices that are not positive semidefinite.
    ///
    /// Diagonal Hessians are checked entrywise; otherwise a dense LDLᵀ with
    /// symmetric pivoting on the diagonal is attempted.
    pub fn check_psd(&self) -> Result<(), QpError> {
        let tol = 1e-10;
        let diagonal = self.p.entries.iter().all(|&(i, j, _)| i == j);
        if diagonal {
            let mut d = vec![0.0; self.num_vars()];
            for &(i, _, v) in &self.p.entries {
                d[i] += v;
            }
            return match d.iter().position(|&v| v < -tol) {
                Some(k) => Err(QpError::NotPsd(k)),
                None => Ok(()),
            };
        }
        // Only the coupled block needs the dense test.
        let mut idx: Vec<usize> = self.p.entries.iter().flat_map(|&(i, j, _)| [i, j]).collect();
        idx.sort_unstable();
        idx.dedup();
        let pos: HashMap<usize, usize> = idx.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let k = idx.len();
        let mut m = vec![vec![0.0; k]; k];
        for &(i, j, v) in &self.p.entries {
            let (a, b) = (pos[&i], pos[&j]);
            m[a][b] += v;
            if a != b {
                m[b][a] += v;
            }
        }
        let scale = m.iter().enumerate().map(|(i, r)| r[i].abs()).fold(1.0, f64::max);
        let mut alive: Vec<usize> = (0..k).collect();
        while !alive.is_empty() {
            // pivot on the largest remaining diagonal
            let (slot, &piv) = alive
                .iter()
                .enumerate()
                .max_by(|a, b| m[*a.1][*a.1].total_cmp(&m[*b.1][*b.1]))
                .expect("nonempty");
            let dpp = m[piv][piv];
            if dpp < -tol * scale {
                return Err(QpError::NotPsd(idx[piv]));
            }
            alive.swap_remove(slot);
            if dpp <= tol * scale {
                // Remaining block must vanish for PSD.
                for &r in &alive {
                    if m[r][piv].abs() > 1e-8 * scale {
                        return Err(QpError::NotPsd(idx[r]));
                    }
                }
                continue;
            }
            for &r in &alive {
                let f = m[r][piv] / dpp;
                if f == 0.0 {
                    continue;
                }
                for &c in &alive {
                    m[r][c] -= f * m[piv][c];
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Incremental construction of a [`QpProblem`] by named variables.
#[derive(Debug, Default, Clone)]
pub struct QpBuilder {
    names: Vec<String>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    q: Vec<f64>,
    constant: f64,
    p: Vec<(usize, usize, f64)>,
    a: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
}

impl QpBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lower: f64, upper: f64) -> usize {
        self.names.push(name.into());
        self.lower.push(lower);
        self.upper.push(upper);
        self.q.push(0.0);
        self.names.len() - 1
    }

    pub fn num_vars(&self) -> usize {
        self.names.len()
    }

    pub fn set_bounds(&mut self, var: usize, lower: f64, upper: f64) {
        self.lower[var] = lower;
        self.upper[var] = upper;
    }

    pub fn add_linear(&mut self, var: usize, coeff: f64) {
        self.q[var] += coeff;
    }

    pub fn add_constant(&mut self, c: f64) {
        self.constant += c;
    }

    /// Adds `coeff · x_i · x_j` for i ≠ j, or `½ coeff · x_i²` for i = j,
    /// i.e. the `(i, j)` entry of P together with its mirror.
    pub fn add_hessian(&mut self, i: usize, j: usize, coeff: f64) {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        self.p.push((r, c, coeff));
    }

    /// Adds the equality `Σ coeff·x = rhs` and returns its row.
    pub fn add_equality(&mut self, terms: &[(usize, f64)], rhs: f64) -> usize {
        let row = self.b.len();
        for &(j, v) in terms {
            if v != 0.0 {
                self.a.push((row, j, v));
            }
        }
        self.b.push(rhs);
        row
    }

    pub fn build(self) -> QpProblem {
        let n = self.names.len();
        let m = self.b.len();
        let mut p = SparseMatrix::new(n, n);
        for (i, j, v) in self.p {
            p.push(i, j, v);
        }
        let mut a = SparseMatrix::new(m, n);
        for (i, j, v) in self.a {
            a.push(i, j, v);
        }
        QpProblem {
            names: self.names,
            p: p.compressed(),
            q: self.q,
            constant: self.constant,
            a: a.compressed(),
            b: self.b,
            lower: self.lower,
            upper: self.upper,
        }
    }
}
