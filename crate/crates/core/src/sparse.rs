//! Row-compressed symmetric sparse matrices and a Jacobi-preconditioned CG solver.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Symmetric matrix stored as full CSR (both triangles present).
///
/// Built from upper-triangle contributions which are mirrored, so
/// `a[i][j]` and `a[j][i]` are the same bits.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymMatrix {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Accumulates `(i, j, v)` contributions; only `i <= j` entries are kept.
#[derive(Debug, Clone, Default)]
pub struct SymTripletBuilder {
    dim: usize,
    triplets: Vec<(usize, usize, f64)>,
}

impl SymTripletBuilder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            triplets: Vec::new(),
        }
    }

    /// Adds `v` at `(i, j)`. Contributions with `i > j` are ignored, so callers
    /// may loop over full symmetric element blocks.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.dim && j < self.dim);
        if i <= j {
            self.triplets.push((i, j, v));
        }
    }

    pub fn build(mut self) -> SparseSymMatrix {
        // Stable sort keeps insertion order within an entry: summation order is
        // the element order.
        self.triplets.sort_by_key(|&(i, j, _)| (i, j));
        let mut upper: Vec<(usize, usize, f64)> = Vec::with_capacity(self.triplets.len());
        for (i, j, v) in self.triplets {
            match upper.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += v,
                _ => upper.push((i, j, v)),
            }
        }
        upper.retain(|t| t.2 != 0.0);

        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.dim];
        for &(i, j, v) in &upper {
            rows[i].push((j, v));
            if i != j {
                rows[j].push((i, v));
            }
        }
        let mut row_ptr = Vec::with_capacity(self.dim + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            for (j, v) in row {
                col_idx.push(j);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        SparseSymMatrix {
            dim: self.dim,
            row_ptr,
            col_idx,
            values,
        }
    }
}

impl SparseSymMatrix {
    pub fn identity(dim: usize) -> Self {
        let mut b = SymTripletBuilder::new(dim);
        for i in 0..dim {
            b.add(i, i, 1.0);
        }
        b.build()
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols());
        let mut b = SymTripletBuilder::new(m.nrows());
        for i in 0..m.nrows() {
            for j in i..m.ncols() {
                b.add(i, j, m[(i, j)]);
            }
        }
        b.build()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_symmetric(&self) -> bool {
        true
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[range.clone()].binary_search(&j) {
            Ok(p) => self.values[range.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.dim);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    /// `alpha * self + beta * other`, entry by entry.
    pub fn linear_combination(&self, alpha: f64, other: &SparseSymMatrix, beta: f64) -> Self {
        assert_eq!(self.dim, other.dim);
        let mut b = SymTripletBuilder::new(self.dim);
        for i in 0..self.dim {
            for (j, v) in self.row(i) {
                b.add(i, j, alpha * v);
            }
            for (j, v) in other.row(i) {
                b.add(i, j, beta * v);
            }
        }
        b.build()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut b = SymTripletBuilder::new(self.dim);
        for i in 0..self.dim {
            for (j, v) in self.row(i) {
                b.add(i, j, alpha * v);
            }
        }
        b.build()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Sum of all entries.
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub const SOLVE_TOLERANCE: f64 = 1e-10;

/// Solves `a x = rhs` by conjugate gradients with a diagonal preconditioner.
///
/// Residuals are measured in the `D^{-1/2}`-weighted norm (`D = diag(a)`),
/// i.e. on the symmetrically equilibrated system, which has the same Krylov
/// iterates. Returns `x` with `|r|_w <= 1e-10 |rhs|_w`; the check uses the
/// true residual, not the recurrence.
pub fn solve_spd(a: &SparseSymMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    solve_spd_from(a, rhs, None)
}

pub fn solve_spd_from(a: &SparseSymMatrix, rhs: &[f64], guess: Option<&[f64]>) -> Result<Vec<f64>> {
    let n = a.dim();
    assert_eq!(rhs.len(), n);
    let inv_diag: Vec<f64> = a
        .diagonal()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let weighted = |v: &[f64]| -> f64 { v.iter().zip(&inv_diag).map(|(x, d)| x * x * d).sum::<f64>().sqrt() };
    let rhs_norm = weighted(rhs);
    if rhs_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }

    let max_iter = 1000.max(20 * n);
    let mut x = guess.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let mut r: Vec<f64> = {
        let ax = a.mul_vec(&x);
        rhs.iter().zip(&ax).map(|(b, y)| b - y).collect()
    };
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    // Recurrence target slightly below the requested tolerance; the true
    // residual is verified before returning.
    let target = 0.25 * SOLVE_TOLERANCE * rhs_norm;
    let mut iterations = 0;
    let mut restarts = 0;

    loop {
        while iterations < max_iter && rz.max(0.0).sqrt() > target {
            a.mul_vec_into(&p, &mut ap);
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                return Err(Error::NotPositiveDefinite(format!(
                    "non-positive curvature {pap:e} in conjugate gradients"
                )));
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            for i in 0..n {
                z[i] = r[i] * inv_diag[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
            iterations += 1;
        }
        let ax = a.mul_vec(&x);
        let true_r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, y)| b - y).collect();
        let rel = weighted(&true_r) / rhs_norm;
        if rel <= SOLVE_TOLERANCE {
            return Ok(x);
        }
        if iterations >= max_iter || restarts >= 3 {
            return Err(Error::Solver {
                iterations,
                residual: rel,
            });
        }
        // Residual drift: restart from the current iterate.
        restarts += 1;
        r = true_r;
        z = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
        p = z.clone();
        rz = dot(&r, &z);
    }
}
