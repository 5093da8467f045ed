//! Minimal sparse matrix containers used by the solver.

/// Coordinate-format matrix. Duplicate entries are summed wherever the
/// matrix is consumed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, entries: Vec::new() }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        if value != 0.0 {
            self.entries.push((row, col, value));
        }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// `y = M x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for &(i, j, v) in &self.entries {
            y[i] += v * x[j];
        }
        y
    }

    /// `y = Mᵀ x`
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        for &(i, j, v) in &self.entries {
            y[j] += v * x[i];
        }
        y
    }

    /// Product with the symmetric matrix whose upper triangle is stored here.
    pub fn sym_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for &(i, j, v) in &self.entries {
            y[i] += v * x[j];
            if i != j {
                y[j] += v * x[i];
            }
        }
        y
    }

    /// Merges duplicates and orders entries row-major.
    pub fn compressed(&self) -> SparseMatrix {
        let mut e = self.entries.clone();
        e.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(e.len());
        for (i, j, v) in e {
            match out.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += v,
                _ => out.push((i, j, v)),
            }
        }
        out.retain(|t| t.2 != 0.0);
        SparseMatrix { nrows: self.nrows, ncols: self.ncols, entries: out }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for &(i, j, v) in &self.entries {
            d[i][j] += v;
        }
        d
    }

    /// Dense symmetric matrix from an upper-triangular store.
    pub fn sym_to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for &(i, j, v) in &self.entries {
            d[i][j] += v;
            if i != j {
                d[j][i] += v;
            }
        }
        d
    }
}

/// Compressed sparse row view used in the solver hot loop.
#[derive(Debug, Clone)]
pub(crate) struct Csr {
    pub nrows: usize,
    pub rowptr: Vec<usize>,
    pub colidx: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    pub fn from_triplets(m: &SparseMatrix) -> Self {
        let c = m.compressed();
        let mut rowptr = vec![0usize; c.nrows + 1];
        for &(i, _, _) in &c.entries {
            rowptr[i + 1] += 1;
        }
        for i in 0..c.nrows {
            rowptr[i + 1] += rowptr[i];
        }
        let colidx = c.entries.iter().map(|t| t.1).collect();
        let values = c.entries.iter().map(|t| t.2).collect();
        Csr { nrows: c.nrows, rowptr, colidx, values }
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.nrows {
            let mut acc = 0.0;
            for p in self.rowptr[i]..self.rowptr[i + 1] {
                acc += self.values[p] * x[self.colidx[p]];
            }
            y[i] = acc;
        }
    }

    pub fn tr_mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.nrows {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for p in self.rowptr[i]..self.rowptr[i + 1] {
                y[self.colidx[p]] += self.values[p] * xi;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| {
            (self.rowptr[i]..self.rowptr[i + 1]).map(move |p| (i, self.colidx[p], self.values[p]))
        })
    }
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}
