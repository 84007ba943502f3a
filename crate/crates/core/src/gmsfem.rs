//! Spectral multiscale coarse spaces and element-wise coarse operators.
//!
//! For each coarse vertex `i` with neighborhood `w_i` (the coarse triangles
//! touching it):
//!
//! 1. the partition-of-unity function `chi_i` is the discrete-harmonic
//!    extension, inside every coarse triangle, of the linear hat's trace;
//! 2. snapshots are harmonic extensions of Kronecker data on the fine
//!    boundary nodes of `w_i`;
//! 3. the pencil `(a_w, s_w)` restricted to the snapshot span is solved and
//!    the modes with the smallest eigenvalues are kept;
//! 4. basis `j >= 2` is `chi_i * psi_j`, scaled to unit fine energy; basis 1
//!    is `chi_i` itself.
//!
//! The first eigenmode is always the constant, so basis 1 spans the same
//! direction as `chi_i * psi_1`.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::assembly::{fracture_shares, p1_gradients, p1_mass, element_points, Block3, FineOperators};
use crate::eigen::{generalized_symmetric, GeneralizedEigenError};
use crate::error::{Error, Result};
use crate::geometry::{neighborhood_boundary, neighborhood_elements, CoarseMesh, Edge, FineMesh};
use crate::sparse::{SparseSymMatrix, SymTripletBuilder};

/// Fine-grid index sets of one coarse neighborhood.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    pub vertex: usize,
    /// Fine triangles inside the neighborhood, ascending.
    pub elements: Vec<usize>,
    /// Fine vertices of the closed neighborhood, ascending; defines local numbering.
    pub nodes: Vec<usize>,
    /// Boundary fine vertices, lexicographic by coordinates.
    pub boundary: Vec<usize>,
    /// Remaining fine vertices, ascending.
    pub interior: Vec<usize>,
}

impl Neighborhood {
    pub fn new(fine: &FineMesh, coarse: &CoarseMesh, vertex: usize) -> Result<Self> {
        let elements = neighborhood_elements(fine, coarse, vertex)?;
        let boundary = neighborhood_boundary(fine, coarse, vertex)?;
        let mut nodes: Vec<usize> = elements.iter().flat_map(|&e| fine.elements[e]).collect();
        nodes.sort_unstable();
        nodes.dedup();
        let mut on_boundary = boundary.clone();
        on_boundary.sort_unstable();
        let interior = nodes
            .iter()
            .copied()
            .filter(|v| on_boundary.binary_search(v).is_err())
            .collect();
        Ok(Self {
            vertex,
            elements,
            nodes,
            boundary,
            interior,
        })
    }

    pub fn local(&self, fine_vertex: usize) -> Option<usize> {
        self.nodes.binary_search(&fine_vertex).ok()
    }

    fn local_unchecked(&self, fine_vertex: usize) -> usize {
        self.local(fine_vertex)
            .expect("fine vertex belongs to the neighborhood")
    }

    /// Dense local matrix summed from per-triangle blocks.
    pub fn assemble(&self, fine: &FineMesh, blocks: &[Block3]) -> DMatrix<f64> {
        let n = self.nodes.len();
        let mut m = DMatrix::zeros(n, n);
        for &e in &self.elements {
            let t = fine.elements[e];
            let loc = t.map(|v| self.local_unchecked(v));
            for a in 0..3 {
                for b in 0..3 {
                    m[(loc[a], loc[b])] += blocks[e][a][b];
                }
            }
        }
        m
    }
}

/// Value of the linear hat of coarse vertex `vertex` at fine vertex `node`,
/// computed in lattice units.
pub fn linear_hat(fine: &FineMesh, coarse: &CoarseMesh, vertex: usize, node: usize) -> f64 {
    let side = coarse.n + 1;
    let (ci, cj) = ((vertex % side) as i64, (vertex / side) as i64);
    let (fi, fj) = fine.lattice(node);
    let r = fine.r as i64;
    let (a, b) = (fi as i64 - ci * r, fj as i64 - cj * r);
    let dist = if a.signum() * b.signum() >= 0 {
        a.abs().max(b.abs())
    } else {
        a.abs() + b.abs()
    };
    (r - dist).max(0) as f64 / r as f64
}

/// Multiscale partition of unity: `values[i]` holds `chi_i` on the nodes of
/// neighborhood `i` in local numbering.
#[derive(Debug, Clone)]
pub struct PartitionOfUnity {
    pub values: Vec<Vec<f64>>,
}

impl PartitionOfUnity {
    pub fn build(
        fine: &FineMesh,
        coarse: &CoarseMesh,
        ops: &FineOperators,
        neighborhoods: &[Neighborhood],
    ) -> Result<Self> {
        let mut values: Vec<Vec<f64>> = neighborhoods.iter().map(|nb| vec![0.0; nb.nodes.len()]).collect();

        for (k, tri) in coarse.elements.iter().enumerate() {
            let elems = &coarse.element_to_fine[k];
            let mut edge_count: HashMap<Edge, usize> = HashMap::new();
            let mut nodes: Vec<usize> = Vec::new();
            for &e in elems {
                let t = fine.elements[e];
                nodes.extend_from_slice(&t);
                for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                    *edge_count.entry(Edge::new(a, b)).or_insert(0) += 1;
                }
            }
            nodes.sort_unstable();
            nodes.dedup();
            let mut on_edge: Vec<usize> = edge_count
                .iter()
                .filter(|(_, &c)| c == 1)
                .flat_map(|(e, _)| [e.0, e.1])
                .collect();
            on_edge.sort_unstable();
            on_edge.dedup();
            let interior: Vec<usize> = nodes
                .iter()
                .copied()
                .filter(|v| on_edge.binary_search(v).is_err())
                .collect();

            // Boundary trace: exact lattice values of the linear hats.
            let mut local_vals: Vec<HashMap<usize, f64>> = vec![HashMap::new(); 3];
            for (slot, &v) in tri.iter().enumerate() {
                for &node in &on_edge {
                    local_vals[slot].insert(node, linear_hat(fine, coarse, v, node));
                }
            }

            if !interior.is_empty() {
                let pos: HashMap<usize, usize> = nodes.iter().enumerate().map(|(p, &v)| (v, p)).collect();
                let n = nodes.len();
                let mut a = DMatrix::<f64>::zeros(n, n);
                for &e in elems {
                    let t = fine.elements[e];
                    for x in 0..3 {
                        for y in 0..3 {
                            a[(pos[&t[x]], pos[&t[y]])] += ops.stiffness[e][x][y];
                        }
                    }
                }
                let ii: Vec<usize> = interior.iter().map(|v| pos[v]).collect();
                let bb: Vec<usize> = on_edge.iter().map(|v| pos[v]).collect();
                let a_ii = a.select_rows(&ii).select_columns(&ii);
                let a_ib = a.select_rows(&ii).select_columns(&bb);
                let chol = a_ii.cholesky().ok_or_else(|| {
                    Error::Assembly(format!(
                        "interior stiffness of coarse element {k} is not positive definite"
                    ))
                })?;
                let mut interior_vals: Vec<DVector<f64>> = Vec::with_capacity(2);
                for slot in 0..2 {
                    let g = DVector::from_iterator(bb.len(), on_edge.iter().map(|v| local_vals[slot][v]));
                    let rhs = -(&a_ib * g);
                    interior_vals.push(chol.solve(&rhs));
                }
                for (p, &node) in interior.iter().enumerate() {
                    let c0 = interior_vals[0][p];
                    let c1 = interior_vals[1][p];
                    local_vals[0].insert(node, c0);
                    local_vals[1].insert(node, c1);
                    // Third function closes the partition of unity exactly.
                    local_vals[2].insert(node, 1.0 - c0 - c1);
                }
            }

            for (slot, &v) in tri.iter().enumerate() {
                let nb = &neighborhoods[v];
                for (&node, &val) in &local_vals[slot] {
                    values[v][nb.local_unchecked(node)] = val;
                }
            }
        }
        Ok(Self { values })
    }
}

/// Harmonic extensions of Kronecker boundary data on one neighborhood.
#[derive(Debug, Clone)]
pub struct Snapshots {
    pub vertex: usize,
    /// `nodes.len() x boundary.len()`, rows in neighborhood-local numbering.
    pub values: DMatrix<f64>,
}

impl Snapshots {
    pub fn count(&self) -> usize {
        self.values.ncols()
    }

    /// Snapshot `l` scattered onto all fine vertices.
    pub fn to_fine(&self, nb: &Neighborhood, n_fine: usize, l: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_fine];
        for (p, &v) in nb.nodes.iter().enumerate() {
            out[v] = self.values[(p, l)];
        }
        out
    }
}

pub fn compute_snapshots(fine: &FineMesh, nb: &Neighborhood, ops: &FineOperators) -> Result<Snapshots> {
    if nb.interior.is_empty() {
        return Err(Error::DegenerateNeighborhood {
            vertex: nb.vertex,
            reason: "no interior fine vertices; refine the fine grid".into(),
        });
    }
    let a = nb.assemble(fine, &ops.stiffness);
    let ii: Vec<usize> = nb.interior.iter().map(|&v| nb.local_unchecked(v)).collect();
    let bb: Vec<usize> = nb.boundary.iter().map(|&v| nb.local_unchecked(v)).collect();
    let a_ii = a.select_rows(&ii).select_columns(&ii);
    let a_ib = a.select_rows(&ii).select_columns(&bb);
    let chol = a_ii.cholesky().ok_or_else(|| Error::DegenerateNeighborhood {
        vertex: nb.vertex,
        reason: "local interior stiffness is singular".into(),
    })?;
    let ext = -chol.solve(&a_ib);
    let mut values = DMatrix::zeros(nb.nodes.len(), bb.len());
    for (l, &pb) in bb.iter().enumerate() {
        values[(pb, l)] = 1.0;
        for (p, &pi) in ii.iter().enumerate() {
            values[(pi, l)] = ext[(p, l)];
        }
    }
    Ok(Snapshots {
        vertex: nb.vertex,
        values,
    })
}

/// Weight of the auxiliary inner product `s_w(u, v) = int k~ u v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpectralWeight {
    /// `k~ = k * sum_j |grad chi_j|^2` with the multiscale partition of unity.
    #[default]
    MultiscaleHats,
    /// Same formula with the coarse linear hats.
    LinearHats,
}

/// Dense `s_w` on the neighborhood, including the fracture line term
/// `k_f * sum_j (d chi_j / ds)^2` against the 1D consistent mass.
pub fn spectral_weight_matrix(
    fine: &FineMesh,
    coarse: &CoarseMesh,
    nb: &Neighborhood,
    ops: &FineOperators,
    pou: &PartitionOfUnity,
    neighborhoods: &[Neighborhood],
    weight: SpectralWeight,
) -> Result<DMatrix<f64>> {
    let chi_at = |v: usize, node: usize| -> f64 {
        match weight {
            SpectralWeight::MultiscaleHats => {
                let nbv = &neighborhoods[v];
                pou.values[v][nbv.local_unchecked(node)]
            }
            SpectralWeight::LinearHats => linear_hat(fine, coarse, v, node),
        }
    };
    let n = nb.nodes.len();
    let mut s = DMatrix::zeros(n, n);
    let mut in_nb = vec![false; fine.num_elements()];
    for &e in &nb.elements {
        in_nb[e] = true;
    }

    for &e in &nb.elements {
        let t = fine.elements[e];
        let k = fine.fine_to_coarse[e];
        let (g, _) = p1_gradients(element_points(fine, e));
        let mut kappa = 0.0;
        for &v in &coarse.elements[k] {
            let mut grad = [0.0; 2];
            for a in 0..3 {
                let c = chi_at(v, t[a]);
                grad[0] += c * g[a][0];
                grad[1] += c * g[a][1];
            }
            kappa += grad[0] * grad[0] + grad[1] * grad[1];
        }
        let m = p1_mass(element_points(fine, e))?;
        let loc = t.map(|v| nb.local_unchecked(v));
        for a in 0..3 {
            for b in 0..3 {
                s[(loc[a], loc[b])] += ops.params.k_m * kappa * m[a][b];
            }
        }
    }
    for share in fracture_shares(fine) {
        if !in_nb[share.element] {
            continue;
        }
        let t = fine.elements[share.element];
        let (na, nb_) = (t[share.local.0], t[share.local.1]);
        let k = fine.fine_to_coarse[share.element];
        let mut kappa = 0.0;
        for &v in &coarse.elements[k] {
            let ds = (chi_at(v, nb_) - chi_at(v, na)) / share.length;
            kappa += ds * ds;
        }
        let w = share.fraction * ops.params.k_f * kappa * share.length / 6.0;
        let (la, lb) = (nb.local_unchecked(na), nb.local_unchecked(nb_));
        s[(la, la)] += 2.0 * w;
        s[(lb, lb)] += 2.0 * w;
        s[(la, lb)] += w;
        s[(lb, la)] += w;
    }
    Ok(s)
}

/// Result of the local spectral problem on one neighborhood.
#[derive(Debug, Clone)]
pub struct LocalSpectrum {
    /// All eigenvalues of the snapshot pencil, ascending.
    pub eigenvalues: Vec<f64>,
    /// Selected modes on the neighborhood nodes, one column per mode.
    pub modes: DMatrix<f64>,
    /// Coefficients of the selected modes in the snapshot basis.
    pub coefficients: DMatrix<f64>,
}

/// Solves `A_snap v = lambda S_snap v` and keeps the `n_b` smallest modes.
pub fn local_spectral_basis(
    snapshots: &Snapshots,
    a_local: &DMatrix<f64>,
    s_local: &DMatrix<f64>,
    n_b: usize,
) -> Result<LocalSpectrum> {
    let vertex = snapshots.vertex;
    if n_b == 0 || n_b > snapshots.count() {
        return Err(Error::InvalidArgument(format!(
            "requested {n_b} modes but vertex {vertex} has {} snapshots",
            snapshots.count()
        )));
    }
    let h = &snapshots.values;
    let a_snap = symmetrize(&(h.transpose() * a_local * h));
    let s_snap = symmetrize(&(h.transpose() * s_local * h));
    let eig = generalized_symmetric(&a_snap, &s_snap).map_err(|e| Error::Spectral {
        vertex,
        reason: match e {
            GeneralizedEigenError::NotDefinite => "snapshot weight matrix is not positive definite".into(),
            GeneralizedEigenError::NoConvergence => "Jacobi iteration did not converge".into(),
        },
    })?;
    let coefficients = eig.vectors.columns(0, n_b).into_owned();
    let modes = h * &coefficients;
    Ok(LocalSpectrum {
        eigenvalues: eig.values,
        modes,
        coefficients,
    })
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpaceOptions {
    /// Basis functions per coarse vertex.
    pub n_b: usize,
    pub weight: SpectralWeight,
}

impl SpaceOptions {
    pub fn new(n_b: usize) -> Self {
        Self {
            n_b,
            weight: SpectralWeight::default(),
        }
    }
}

/// Multiscale basis functions for every coarse vertex, including vertices on
/// the Dirichlet side; those are kept for the partition of unity but carry no
/// free coarse degree of freedom.
#[derive(Debug, Clone)]
pub struct MultiscaleSpace {
    pub n_b: usize,
    pub neighborhoods: Vec<Neighborhood>,
    /// Per vertex: `nodes.len() x n_b`, column 0 is the partition-of-unity function.
    pub bases: Vec<DMatrix<f64>>,
    /// Per vertex: full local spectrum used for selection.
    pub eigenvalues: Vec<Vec<f64>>,
    /// Full index `vertex * n_b + j` to the free (unknown) coarse index.
    pub full_to_free: Vec<Option<usize>>,
    pub n_free: usize,
    pub n_fine: usize,
}

impl MultiscaleSpace {
    pub fn n_full(&self) -> usize {
        self.bases.len() * self.n_b
    }

    pub fn full_index(&self, vertex: usize, j: usize) -> usize {
        vertex * self.n_b + j
    }

    /// Coefficient of basis `(vertex, j)` at a fine vertex (zero outside the support).
    pub fn value(&self, vertex: usize, j: usize, fine_vertex: usize) -> f64 {
        self.neighborhoods[vertex]
            .local(fine_vertex)
            .map_or(0.0, |p| self.bases[vertex][(p, j)])
    }

    pub fn basis_to_fine(&self, vertex: usize, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_fine];
        let nb = &self.neighborhoods[vertex];
        for (p, &v) in nb.nodes.iter().enumerate() {
            out[v] = self.bases[vertex][(p, j)];
        }
        out
    }

    /// Fine representation of a coarse state given over the full index set.
    pub fn full_to_fine(&self, coeffs: &[f64]) -> Vec<f64> {
        assert_eq!(coeffs.len(), self.n_full());
        let mut out = vec![0.0; self.n_fine];
        for (vertex, nb) in self.neighborhoods.iter().enumerate() {
            for j in 0..self.n_b {
                let c = coeffs[self.full_index(vertex, j)];
                if c == 0.0 {
                    continue;
                }
                for (p, &v) in nb.nodes.iter().enumerate() {
                    out[v] += c * self.bases[vertex][(p, j)];
                }
            }
        }
        out
    }

    pub fn expand_free(&self, free: &[f64]) -> Vec<f64> {
        assert_eq!(free.len(), self.n_free);
        self.full_to_free
            .iter()
            .map(|m| m.map_or(0.0, |i| free[i]))
            .collect()
    }

    pub fn free_to_fine(&self, free: &[f64]) -> Vec<f64> {
        self.full_to_fine(&self.expand_free(free))
    }

    /// `sum_i chi_i` on all fine vertices.
    pub fn partition_sum(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_fine];
        for (vertex, nb) in self.neighborhoods.iter().enumerate() {
            for (p, &v) in nb.nodes.iter().enumerate() {
                out[v] += self.bases[vertex][(p, 0)];
            }
        }
        out
    }

    /// Dense `n_fine x n_free` matrix of free basis functions.
    pub fn free_basis_matrix(&self) -> DMatrix<f64> {
        let mut phi = DMatrix::zeros(self.n_fine, self.n_free);
        for (vertex, nb) in self.neighborhoods.iter().enumerate() {
            for j in 0..self.n_b {
                if let Some(col) = self.full_to_free[self.full_index(vertex, j)] {
                    for (p, &v) in nb.nodes.iter().enumerate() {
                        phi[(v, col)] = self.bases[vertex][(p, j)];
                    }
                }
            }
        }
        phi
    }

    /// `vertex,rank,eigenvalue` lines for every local spectrum.
    pub fn eigenvalues_csv(&self) -> String {
        let mut out = String::from("vertex,rank,eigenvalue\n");
        for (v, vals) in self.eigenvalues.iter().enumerate() {
            for (rank, val) in vals.iter().enumerate() {
                let _ = writeln!(out, "{v},{rank},{val:.12e}");
            }
        }
        out
    }
}

pub fn build_space(
    fine: &FineMesh,
    coarse: &CoarseMesh,
    ops: &FineOperators,
    options: SpaceOptions,
) -> Result<MultiscaleSpace> {
    let n_b = options.n_b;
    if n_b == 0 {
        return Err(Error::InvalidArgument("at least one basis function per vertex is required".into()));
    }
    let neighborhoods: Vec<Neighborhood> = (0..coarse.num_vertices())
        .map(|v| Neighborhood::new(fine, coarse, v))
        .collect::<Result<_>>()?;
    let pou = PartitionOfUnity::build(fine, coarse, ops, &neighborhoods)?;

    let mut bases = Vec::with_capacity(neighborhoods.len());
    let mut eigenvalues = Vec::with_capacity(neighborhoods.len());
    for nb in &neighborhoods {
        let chi = &pou.values[nb.vertex];
        let mut basis = DMatrix::zeros(nb.nodes.len(), n_b);
        for (p, &c) in chi.iter().enumerate() {
            basis[(p, 0)] = c;
        }
        if n_b > 1 {
            let snaps = compute_snapshots(fine, nb, ops)?;
            let a_local = nb.assemble(fine, &ops.stiffness);
            let s_local = spectral_weight_matrix(fine, coarse, nb, ops, &pou, &neighborhoods, options.weight)?;
            let spectrum = local_spectral_basis(&snaps, &a_local, &s_local, n_b)?;
            for j in 1..n_b {
                let mut phi = DVector::from_iterator(
                    nb.nodes.len(),
                    chi.iter().enumerate().map(|(p, &c)| c * spectrum.modes[(p, j)]),
                );
                let energy = phi.dot(&(&a_local * &phi));
                if !(energy > 0.0) {
                    return Err(Error::Spectral {
                        vertex: nb.vertex,
                        reason: format!("basis {j} has non-positive energy {energy:e}"),
                    });
                }
                phi /= energy.sqrt();
                basis.set_column(j, &phi);
            }
            eigenvalues.push(spectrum.eigenvalues);
        } else {
            eigenvalues.push(Vec::new());
        }
        bases.push(basis);
    }

    let mut full_to_free = Vec::with_capacity(coarse.num_vertices() * n_b);
    let mut n_free = 0;
    for v in 0..coarse.num_vertices() {
        for _ in 0..n_b {
            if coarse.is_dirichlet_vertex(v) {
                full_to_free.push(None);
            } else {
                full_to_free.push(Some(n_free));
                n_free += 1;
            }
        }
    }

    Ok(MultiscaleSpace {
        n_b,
        neighborhoods,
        bases,
        eigenvalues,
        full_to_free,
        n_free,
        n_fine: fine.num_vertices(),
    })
}

/// Element-wise coarse operators.
///
/// Local degree of freedom `slot * n_b + j` is basis `j` of the `slot`-th
/// vertex of the element; `slot * n_b` are the partition-of-unity columns.
#[derive(Debug, Clone)]
pub struct CoarseSystem {
    pub n_b: usize,
    pub mass_blocks: Vec<DMatrix<f64>>,
    pub stiffness_blocks: Vec<DMatrix<f64>>,
    /// Per element, full coarse index of each local degree of freedom.
    pub local_to_full: Vec<Vec<usize>>,
    pub full_to_free: Vec<Option<usize>>,
    pub n_free: usize,
    /// Coarse element areas.
    pub volumes: Vec<f64>,
    /// Free-index load `(f, phi_m)`.
    pub load: Vec<f64>,
}

impl CoarseSystem {
    pub fn num_elements(&self) -> usize {
        self.mass_blocks.len()
    }

    pub fn dofs_per_element(&self) -> usize {
        3 * self.n_b
    }

    pub fn n_full(&self) -> usize {
        self.full_to_free.len()
    }

    pub fn partition_columns(&self) -> [usize; 3] {
        [0, self.n_b, 2 * self.n_b]
    }

    pub fn is_partition_column(&self, local: usize) -> bool {
        local.is_multiple_of(self.n_b)
    }

    /// Free index of local degree of freedom `a` on element `k`.
    pub fn free_index(&self, k: usize, a: usize) -> Option<usize> {
        self.full_to_free[self.local_to_full[k][a]]
    }

    pub fn global_mass(&self) -> SparseSymMatrix {
        self.assemble_free(&self.mass_blocks)
    }

    pub fn global_stiffness(&self) -> SparseSymMatrix {
        self.assemble_free(&self.stiffness_blocks)
    }

    pub fn assemble_free(&self, blocks: &[DMatrix<f64>]) -> SparseSymMatrix {
        let mut b = SymTripletBuilder::new(self.n_free);
        for (k, block) in blocks.iter().enumerate() {
            let d = self.dofs_per_element();
            for a in 0..d {
                let Some(i) = self.free_index(k, a) else { continue };
                for c in 0..d {
                    let Some(j) = self.free_index(k, c) else { continue };
                    b.add(i, j, block[(a, c)]);
                }
            }
        }
        b.build()
    }

    pub fn assemble_free_dense(&self, blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_free, self.n_free);
        let d = self.dofs_per_element();
        for (k, block) in blocks.iter().enumerate() {
            for a in 0..d {
                let Some(i) = self.free_index(k, a) else { continue };
                for c in 0..d {
                    let Some(j) = self.free_index(k, c) else { continue };
                    m[(i, j)] += block[(a, c)];
                }
            }
        }
        m
    }

    /// Local coefficients of a full-index coarse state on element `k`.
    pub fn local_state(&self, k: usize, full: &[f64]) -> Vec<f64> {
        self.local_to_full[k].iter().map(|&g| full[g]).collect()
    }

    pub fn expand_free(&self, free: &[f64]) -> Vec<f64> {
        self.full_to_free
            .iter()
            .map(|m| m.map_or(0.0, |i| free[i]))
            .collect()
    }

    /// Free-index `(p0, phi_m)` expressed through the partition-of-unity
    /// columns of the mass blocks.
    pub fn constant_projection_rhs(&self, blocks: &[DMatrix<f64>], p0: f64) -> Vec<f64> {
        let mut r = vec![0.0; self.n_free];
        for (k, block) in blocks.iter().enumerate() {
            for a in 0..self.dofs_per_element() {
                let Some(i) = self.free_index(k, a) else { continue };
                let s: f64 = self.partition_columns().iter().map(|&c| block[(a, c)]).sum();
                r[i] += p0 * s;
            }
        }
        r
    }
}

/// Galerkin projection of the fine operators onto the multiscale space,
/// element by element.
pub fn assemble_coarse(
    fine: &FineMesh,
    coarse: &CoarseMesh,
    space: &MultiscaleSpace,
    ops: &FineOperators,
    fine_load: &[f64],
) -> Result<CoarseSystem> {
    let n_b = space.n_b;
    let d = 3 * n_b;
    if space.neighborhoods.len() != coarse.num_vertices() || space.n_fine != fine.num_vertices() {
        return Err(Error::Assembly("multiscale space was built on a different mesh".into()));
    }
    let mut mass_blocks = Vec::with_capacity(coarse.num_elements());
    let mut stiffness_blocks = Vec::with_capacity(coarse.num_elements());
    let mut local_to_full = Vec::with_capacity(coarse.num_elements());
    let mut volumes = Vec::with_capacity(coarse.num_elements());

    for (k, tri) in coarse.elements.iter().enumerate() {
        let mut map = Vec::with_capacity(d);
        for &v in tri {
            for j in 0..n_b {
                map.push(space.full_index(v, j));
            }
        }
        let mut mk = DMatrix::<f64>::zeros(d, d);
        let mut ak = DMatrix::<f64>::zeros(d, d);
        let mut phi = DMatrix::<f64>::zeros(3, d);
        for &e in &coarse.element_to_fine[k] {
            let t = fine.elements[e];
            for (slot, &v) in tri.iter().enumerate() {
                let nb = &space.neighborhoods[v];
                for (q, &node) in t.iter().enumerate() {
                    let p = nb.local(node).ok_or_else(|| {
                        Error::Assembly(format!(
                            "fine vertex {node} of element {k} lies outside the support of vertex {v}"
                        ))
                    })?;
                    for j in 0..n_b {
                        phi[(q, slot * n_b + j)] = space.bases[v][(p, j)];
                    }
                }
            }
            let me = block_matrix(&ops.mass[e]);
            let ae = block_matrix(&ops.stiffness[e]);
            mk += phi.transpose() * me * &phi;
            ak += phi.transpose() * ae * &phi;
        }
        mirror_upper(&mut mk);
        mirror_upper(&mut ak);
        mass_blocks.push(mk);
        stiffness_blocks.push(ak);
        local_to_full.push(map);
        volumes.push(coarse.element_area(k));
    }

    let mut load = vec![0.0; space.n_free];
    if fine_load.iter().any(|&v| v != 0.0) {
        for (vertex, nb) in space.neighborhoods.iter().enumerate() {
            for j in 0..n_b {
                if let Some(i) = space.full_to_free[space.full_index(vertex, j)] {
                    load[i] = nb
                        .nodes
                        .iter()
                        .enumerate()
                        .map(|(p, &v)| space.bases[vertex][(p, j)] * fine_load[v])
                        .sum();
                }
            }
        }
    }

    Ok(CoarseSystem {
        n_b,
        mass_blocks,
        stiffness_blocks,
        local_to_full,
        full_to_free: space.full_to_free.clone(),
        n_free: space.n_free,
        volumes,
        load,
    })
}

fn block_matrix(b: &Block3) -> DMatrix<f64> {
    DMatrix::from_fn(3, 3, |i, j| b[i][j])
}

/// Copies the upper triangle onto the lower one so the block is symmetric to the bit.
pub fn mirror_upper(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..i {
            m[(i, j)] = m[(j, i)];
        }
    }
}

/// Relative cell-average mismatch between fine states and their L2 (mass)
/// projections onto the free multiscale space.
///
/// Returns one value per state and the aggregate over all states.
pub fn coarse_projection_error(
    fine: &FineMesh,
    coarse: &CoarseMesh,
    space: &MultiscaleSpace,
    ops: &FineOperators,
    states: &[Vec<f64>],
) -> Result<(Vec<f64>, f64)> {
    let phi = space.free_basis_matrix();
    let m_fine = ops
        .global_mass(fine, crate::assembly::BoundaryHandling::Natural)
        .to_dense();
    let m_phi = &m_fine * &phi;
    let gram = phi.transpose() * &m_phi;
    let chol = gram.cholesky().ok_or_else(|| {
        Error::NotPositiveDefinite("coarse mass matrix of the multiscale space".into())
    })?;
    let mut per_state = Vec::with_capacity(states.len());
    let (mut num_total, mut den_total) = (0.0, 0.0);
    for u in states {
        let u = DVector::from_column_slice(u);
        let c = chol.solve(&(m_phi.transpose() * &u));
        let proj = &phi * c;
        let avg_u = crate::forward::fine_cell_averages(fine, coarse, ops, u.as_slice());
        let avg_p = crate::forward::fine_cell_averages(fine, coarse, ops, proj.as_slice());
        let num: f64 = avg_u.iter().zip(&avg_p).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = avg_u.iter().map(|a| a * a).sum();
        per_state.push(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() });
        num_total += num;
        den_total += den;
    }
    let aggregate = if den_total > 0.0 {
        (num_total / den_total).sqrt()
    } else {
        num_total.sqrt()
    };
    Ok((per_state, aggregate))
}

/// Meshes, fine operators, multiscale space and coarse system of one fracture configuration.
#[derive(Debug, Clone)]
pub struct Realization {
    pub coarse: CoarseMesh,
    pub fine: FineMesh,
    pub ops: FineOperators,
    pub space: MultiscaleSpace,
    pub system: CoarseSystem,
}

impl Realization {
    pub fn build(
        n: usize,
        r: usize,
        fractures: &crate::geometry::FractureNetwork,
        params: &crate::assembly::AssemblyParams,
        options: SpaceOptions,
    ) -> Result<Self> {
        let mut coarse = crate::geometry::build_coarse_mesh(n)?;
        let fine = crate::geometry::build_fine_mesh(&mut coarse, r, fractures)?;
        let ops = FineOperators::new(&fine, params)?;
        let space = build_space(&fine, &coarse, &ops, options)?;
        let load = ops.load(&fine, crate::assembly::BoundaryHandling::EliminateDirichlet);
        let system = assemble_coarse(&fine, &coarse, &space, &ops, &load)?;
        Ok(Self {
            coarse,
            fine,
            ops,
            space,
            system,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{p1_stiffness, AssemblyParams};
    use crate::geometry::{build_coarse_mesh, build_fine_mesh, FractureNetwork, Segment};

    fn homogeneous() -> AssemblyParams {
        AssemblyParams {
            k_m: 1.0,
            ..AssemblyParams::default()
        }
    }

    fn setup(n: usize, r: usize, fr: &FractureNetwork, params: &AssemblyParams) -> (CoarseMesh, FineMesh, FineOperators) {
        let mut coarse = build_coarse_mesh(n).unwrap();
        let fine = build_fine_mesh(&mut coarse, r, fr).unwrap();
        let ops = FineOperators::new(&fine, params).unwrap();
        (coarse, fine, ops)
    }

    #[test]
    fn linear_hat_lattice_values() {
        let (coarse, fine, _) = setup(2, 4, &FractureNetwork::empty(1.0), &homogeneous());
        // centre vertex (1, 1) and fine lattice points around it
        assert_eq!(linear_hat(&fine, &coarse, 4, fine.vertex_index(4, 4)), 1.0);
        assert_eq!(linear_hat(&fine, &coarse, 4, fine.vertex_index(6, 6)), 0.5);
        assert_eq!(linear_hat(&fine, &coarse, 4, fine.vertex_index(2, 6)), 0.0);
        assert_eq!(linear_hat(&fine, &coarse, 4, fine.vertex_index(3, 5)), 0.5);
        assert_eq!(linear_hat(&fine, &coarse, 4, fine.vertex_index(0, 0)), 0.0);
    }

    #[test]
    fn snapshots_reproduce_linear_and_constant_data() {
        let (coarse, fine, ops) = setup(2, 4, &FractureNetwork::empty(1.0), &homogeneous());
        let nb = Neighborhood::new(&fine, &coarse, 4).unwrap();
        let snaps = compute_snapshots(&fine, &nb, &ops).unwrap();
        assert_eq!(snaps.count(), nb.boundary.len());
        let x_data = DVector::from_iterator(nb.boundary.len(), nb.boundary.iter().map(|&v| fine.vertices[v][0]));
        let ext = &snaps.values * x_data;
        let ones = &snaps.values * DVector::from_element(nb.boundary.len(), 1.0);
        for (p, &v) in nb.nodes.iter().enumerate() {
            assert!((ext[p] - fine.vertices[v][0]).abs() < 1e-12);
            assert!((ones[p] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fracture_channel_carries_boundary_value() {
        let fr = FractureNetwork::new(vec![Segment { a: [0.0, 0.5], b: [0.5, 0.5] }], 1e2).unwrap();
        let params = AssemblyParams { k_m: 1e-3, k_f: 1e2, ..AssemblyParams::default() };
        let (coarse, fine, ops) = setup(2, 8, &fr, &params);
        let nb = Neighborhood::new(&fine, &coarse, 4).unwrap();
        let snaps = compute_snapshots(&fine, &nb, &ops).unwrap();
        let start = fine.vertex_index(0, 8);
        let l = nb.boundary.iter().position(|&v| v == start).unwrap();
        for (edge, _) in &fine.fracture_edges {
            for v in [edge.0, edge.1] {
                let val = snaps.values[(nb.local(v).unwrap(), l)];
                assert!(val >= 0.99, "value {val} at fine vertex {v}");
            }
        }
    }

    #[test]
    fn corner_neighborhood_without_interior_is_degenerate() {
        let (coarse, fine, ops) = setup(2, 1, &FractureNetwork::empty(1.0), &homogeneous());
        let nb = Neighborhood::new(&fine, &coarse, 0).unwrap();
        assert!(matches!(
            compute_snapshots(&fine, &nb, &ops),
            Err(Error::DegenerateNeighborhood { vertex: 0, .. })
        ));
    }

    #[test]
    fn homogeneous_spectrum_starts_with_constant() {
        let (coarse, fine, ops) = setup(2, 4, &FractureNetwork::empty(1.0), &homogeneous());
        let nbs: Vec<_> = (0..9).map(|v| Neighborhood::new(&fine, &coarse, v).unwrap()).collect();
        let pou = PartitionOfUnity::build(&fine, &coarse, &ops, &nbs).unwrap();
        let nb = &nbs[4];
        let snaps = compute_snapshots(&fine, nb, &ops).unwrap();
        let a = nb.assemble(&fine, &ops.stiffness);
        let s = spectral_weight_matrix(&fine, &coarse, nb, &ops, &pou, &nbs, SpectralWeight::MultiscaleHats).unwrap();
        let sp = local_spectral_basis(&snaps, &a, &s, 3).unwrap();
        assert!(sp.eigenvalues[0].abs() < 1e-10);
        assert!(sp.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        assert!(sp.eigenvalues.iter().all(|&l| l >= -1e-10));
        let first = sp.modes.column(0);
        let mean = first.mean();
        assert!(first.iter().all(|&x| (x - mean).abs() < 1e-9 * mean.abs()));
        // Selected modes are s-orthonormal.
        let gram = sp.modes.transpose() * &s * &sp.modes;
        assert!((gram - DMatrix::<f64>::identity(3, 3)).amax() < 1e-10);
        assert!(local_spectral_basis(&snaps, &a, &s, snaps.count() + 1).is_err());
    }

    #[test]
    fn homogeneous_space_uses_linear_hats() {
        let (coarse, fine, ops) = setup(2, 4, &FractureNetwork::empty(1.0), &homogeneous());
        let space = build_space(&fine, &coarse, &ops, SpaceOptions::new(1)).unwrap();
        for v in 0..coarse.num_vertices() {
            for node in 0..fine.num_vertices() {
                let expected = linear_hat(&fine, &coarse, v, node);
                assert!((space.value(v, 0, node) - expected).abs() < 1e-12);
            }
        }
        assert_eq!(space.n_free, 6);
    }

    #[test]
    fn partition_of_unity_with_fracture() {
        let fr = FractureNetwork::new(vec![Segment { a: [0.1, 0.15], b: [0.85, 0.7] }], 1e2).unwrap();
        let params = AssemblyParams { k_m: 1e-3, ..AssemblyParams::default() };
        let (coarse, fine, ops) = setup(3, 4, &fr, &params);
        let space = build_space(&fine, &coarse, &ops, SpaceOptions::new(2)).unwrap();
        for s in space.partition_sum() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Staircase fractures bend the hats away from linear.
        let dev = (0..coarse.num_vertices())
            .flat_map(|v| (0..fine.num_vertices()).map(move |x| (v, x)))
            .map(|(v, x)| (space.value(v, 0, x) - linear_hat(&fine, &coarse, v, x)).abs())
            .fold(0.0, f64::max);
        assert!(dev > 1e-3);
    }

    #[test]
    fn coarse_stiffness_matches_p1_for_one_basis() {
        let (coarse, fine, ops) = setup(3, 4, &FractureNetwork::empty(1.0), &homogeneous());
        let space = build_space(&fine, &coarse, &ops, SpaceOptions::new(1)).unwrap();
        let csys = assemble_coarse(&fine, &coarse, &space, &ops, &vec![0.0; fine.num_vertices()]).unwrap();
        for (k, tri) in coarse.elements.iter().enumerate() {
            let p1 = p1_stiffness(tri.map(|v| coarse.vertices[v])).unwrap();
            for a in 0..3 {
                for b in 0..3 {
                    assert!((csys.stiffness_blocks[k][(a, b)] - p1[a][b]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn coarse_blocks_are_bit_symmetric_and_mass_sums_to_area() {
        let fr = FractureNetwork::new(vec![Segment { a: [0.2, 0.3], b: [0.9, 0.6] }], 1e2).unwrap();
        let params = AssemblyParams { k_m: 1e-3, ..AssemblyParams::default() };
        let (coarse, fine, ops) = setup(2, 4, &fr, &params);
        let space = build_space(&fine, &coarse, &ops, SpaceOptions::new(2)).unwrap();
        let csys = assemble_coarse(&fine, &coarse, &space, &ops, &vec![0.0; fine.num_vertices()]).unwrap();
        let mut total = 0.0;
        for k in 0..csys.num_elements() {
            let (m, a) = (&csys.mass_blocks[k], &csys.stiffness_blocks[k]);
            assert_eq!(m, &m.transpose());
            assert_eq!(a, &a.transpose());
            for x in csys.partition_columns() {
                for y in csys.partition_columns() {
                    total += m[(x, y)];
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-12);
        let dense = csys.assemble_free_dense(&csys.mass_blocks);
        assert!(dense.clone().cholesky().is_some());
        assert_eq!(csys.global_mass().to_dense(), dense);
    }

    #[test]
    fn non_adjacent_vertices_do_not_couple() {
        let (coarse, fine, ops) = setup(3, 2, &FractureNetwork::empty(1.0), &homogeneous());
        let space = build_space(&fine, &coarse, &ops, SpaceOptions::new(1)).unwrap();
        let csys = assemble_coarse(&fine, &coarse, &space, &ops, &vec![0.0; fine.num_vertices()]).unwrap();
        let a = csys.global_stiffness();
        // vertices (1,1) and (3,3) share no coarse element
        let (i, j) = (space.full_to_free[5].unwrap(), space.full_to_free[15].unwrap());
        assert_eq!(a.get(i, j), 0.0);
    }

    #[test]
    fn projection_error_of_span_and_zero() {
        let (coarse, fine, ops) = setup(2, 4, &FractureNetwork::empty(1.0), &homogeneous());
        let space = build_space(&fine, &coarse, &ops, SpaceOptions::new(2)).unwrap();
        let coeffs: Vec<f64> = (0..space.n_free).map(|i| 1.0 + 0.1 * i as f64).collect();
        let u = space.free_to_fine(&coeffs);
        let zero = vec![0.0; fine.num_vertices()];
        let (per, agg) = coarse_projection_error(&fine, &coarse, &space, &ops, &[u, zero]).unwrap();
        assert!(per[0] < 1e-10 && agg < 1e-10);
        assert_eq!(per[1], 0.0);
    }

    #[test]
    fn eigenvalue_csv_header() {
        let (coarse, fine, ops) = setup(2, 4, &FractureNetwork::empty(1.0), &homogeneous());
        let space = build_space(&fine, &coarse, &ops, SpaceOptions::new(2)).unwrap();
        let csv = space.eigenvalues_csv();
        assert!(csv.starts_with("vertex,rank,eigenvalue\n"));
        assert!(csv.lines().count() > 9);
    }
}
