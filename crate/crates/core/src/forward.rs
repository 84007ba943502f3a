//! Implicit-Euler integration, cell-average observations and flux recovery.

use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assembly::{fracture_shares, element_points, p1_gradients, BoundaryHandling, FineOperators};
use crate::error::{Error, Result};
use crate::geometry::{CoarseMesh, FineMesh};
use crate::gmsfem::CoarseSystem;
use crate::sparse::{solve_spd_from, SparseSymMatrix};

/// States at `t_0, ..., t_{n_t}` on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }
}

fn uniform_times(t_final: f64, n_t: usize) -> Result<Vec<f64>> {
    if n_t == 0 || !(t_final > 0.0) {
        return Err(Error::InvalidArgument("time horizon needs T > 0 and n_t >= 1".into()));
    }
    let dt = t_final / n_t as f64;
    Ok((0..=n_t).map(|n| n as f64 * dt).collect())
}

/// `(m + dt a) c_{n+1} = m c_n + dt b` with sparse conjugate-gradient solves.
pub fn integrate(
    m: &SparseSymMatrix,
    a: &SparseSymMatrix,
    b: &[f64],
    initial: &[f64],
    t_final: f64,
    n_t: usize,
) -> Result<Trajectory> {
    let times = uniform_times(t_final, n_t)?;
    let dt = times[1];
    let s = m.linear_combination(1.0, a, dt);
    let mut states = Vec::with_capacity(n_t + 1);
    states.push(initial.to_vec());
    for step in 1..=n_t {
        let prev = &states[step - 1];
        let mut rhs = m.mul_vec(prev);
        for (r, bi) in rhs.iter_mut().zip(b) {
            *r += dt * bi;
        }
        let next = solve_spd_from(&s, &rhs, Some(prev)).map_err(|e| Error::Forward {
            step,
            reason: e.to_string(),
        })?;
        states.push(next);
    }
    Ok(Trajectory { times, states })
}

/// Factorized implicit-Euler operator for dense systems.
#[derive(Debug, Clone)]
pub struct DenseStepper {
    pub m: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    pub dt: f64,
}

impl DenseStepper {
    pub fn new(m: &DMatrix<f64>, a: &DMatrix<f64>, dt: f64) -> Result<Self> {
        let s = m + a * dt;
        let chol = s.cholesky().ok_or_else(|| Error::Forward {
            step: 1,
            reason: "M + dt A is not positive definite".into(),
        })?;
        Ok(Self { m: m.clone(), chol, dt })
    }

    pub fn step(&self, c: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(&(&self.m * c + b * self.dt))
    }

    /// Solves `(m + dt a) x = rhs`; the operator is symmetric, so this is
    /// also its transpose.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }
}

/// Dense counterpart of [`integrate`].
pub fn integrate_dense(
    m: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &[f64],
    initial: &[f64],
    t_final: f64,
    n_t: usize,
) -> Result<Trajectory> {
    let times = uniform_times(t_final, n_t)?;
    let stepper = DenseStepper::new(m, a, times[1])?;
    let b = DVector::from_column_slice(b);
    let mut c = DVector::from_column_slice(initial);
    let mut states = Vec::with_capacity(n_t + 1);
    states.push(initial.to_vec());
    for _ in 0..n_t {
        c = stepper.step(&c, &b);
        states.push(c.as_slice().to_vec());
    }
    Ok(Trajectory { times, states })
}

/// Constant `p0` at free fine vertices, zero on the Dirichlet side.
pub fn fine_initial(fine: &FineMesh, p0: f64) -> Vec<f64> {
    (0..fine.num_vertices())
        .map(|v| if fine.is_dirichlet(v) { 0.0 } else { p0 })
        .collect()
}

/// Reference fine-grid trajectory.
pub fn integrate_fine(fine: &FineMesh, ops: &FineOperators) -> Result<Trajectory> {
    let bc = BoundaryHandling::EliminateDirichlet;
    let m = ops.global_mass(fine, bc);
    let a = ops.global_stiffness(fine, bc);
    let b = ops.load(fine, bc);
    let u0 = fine_initial(fine, ops.params.p0);
    integrate(&m, &a, &b, &u0, ops.params.t_final, ops.params.n_t)
}

/// Mass-projected initial state: `M c_0 = (p0, phi_m)` over the free indices.
pub fn coarse_initial(csys: &CoarseSystem, mass_blocks: &[DMatrix<f64>], p0: f64) -> Result<Vec<f64>> {
    let m = csys.assemble_free_dense(mass_blocks);
    let rhs = DVector::from_vec(csys.constant_projection_rhs(mass_blocks, p0));
    let chol = m.cholesky().ok_or_else(|| {
        Error::NotPositiveDefinite("assembled coarse mass matrix".into())
    })?;
    Ok(chol.solve(&rhs).as_slice().to_vec())
}

/// Coarse trajectory over the free indices for the given element blocks.
pub fn integrate_coarse(
    csys: &CoarseSystem,
    mass_blocks: &[DMatrix<f64>],
    stiffness_blocks: &[DMatrix<f64>],
    p0: f64,
    t_final: f64,
    n_t: usize,
) -> Result<Trajectory> {
    let c0 = coarse_initial(csys, mass_blocks, p0)?;
    let m = csys.assemble_free_dense(mass_blocks);
    let a = csys.assemble_free_dense(stiffness_blocks);
    integrate_dense(&m, &a, &csys.load, &c0, t_final, n_t)
}

/// `(1 / |K|) sum_a c_a sum_{b in PoU} M^K_ab` for one element block.
pub fn block_cell_average(block: &DMatrix<f64>, local_state: &[f64], n_b: usize, volume: f64) -> f64 {
    let mut s = 0.0;
    for (a, &ca) in local_state.iter().enumerate() {
        if ca == 0.0 {
            continue;
        }
        let row: f64 = (0..3).map(|slot| block[(a, slot * n_b)]).sum();
        s += ca * row;
    }
    s / volume
}

/// Mass-weighted average of the coarse state `full` (full index set) over element `k`.
pub fn cell_average(csys: &CoarseSystem, full: &[f64], k: usize) -> f64 {
    cell_average_with(csys, &csys.mass_blocks, full, k)
}

pub fn cell_average_with(csys: &CoarseSystem, mass_blocks: &[DMatrix<f64>], full: &[f64], k: usize) -> f64 {
    block_cell_average(&mass_blocks[k], &csys.local_state(k, full), csys.n_b, csys.volumes[k])
}

/// `(1 / |K|) int_K c_m u` for a fine P1 function, for every coarse element.
pub fn fine_cell_averages(fine: &FineMesh, coarse: &CoarseMesh, ops: &FineOperators, u: &[f64]) -> Vec<f64> {
    (0..coarse.num_elements())
        .map(|k| {
            let mut s = 0.0;
            for &e in &coarse.element_to_fine[k] {
                let t = fine.elements[e];
                for a in 0..3 {
                    let row: f64 = ops.mass[e][a].iter().sum();
                    s += row * u[t[a]];
                }
            }
            s / coarse.element_area(k)
        })
        .collect()
}

/// Cell-average data `values[i][n - 1]` for cell `cells[i]` at time index `n = 1..=n_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries {
    pub cells: Vec<usize>,
    pub n_t: usize,
    pub values: Vec<Vec<f64>>,
    pub noise: f64,
}

impl ObservationSeries {
    pub fn value(&self, i: usize, n: usize) -> f64 {
        self.values[i][n - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell_id,time_index,value\n");
        for (i, &k) in self.cells.iter().enumerate() {
            for n in 1..=self.n_t {
                let _ = writeln!(out, "{k},{n},{:.17e}", self.value(i, n));
            }
        }
        out
    }
}

/// Fine cell averages at `t_1..t_{n_t}`, each multiplied by `1 + delta r`
/// with `r ~ U[-1, 1]`; draws run over cells in ascending order, then time.
pub fn make_observations(
    truth: &Trajectory,
    fine: &FineMesh,
    coarse: &CoarseMesh,
    ops: &FineOperators,
    cells: &[usize],
    delta: f64,
    seed: u64,
) -> Result<ObservationSeries> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!("noise level must be >= 0, got {delta}")));
    }
    let mut cells = cells.to_vec();
    cells.sort_unstable();
    cells.dedup();
    if let Some(&bad) = cells.iter().find(|&&k| k >= coarse.num_elements()) {
        return Err(Error::InvalidArgument(format!("observed cell {bad} does not exist")));
    }
    let n_t = truth.n_steps();
    let averages: Vec<Vec<f64>> = truth.states[1..]
        .iter()
        .map(|u| fine_cell_averages(fine, coarse, ops, u))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = cells
        .iter()
        .map(|&k| {
            (0..n_t)
                .map(|n| {
                    let clean = averages[n][k];
                    if delta == 0.0 {
                        clean
                    } else {
                        clean * (1.0 + delta * rng.gen_range(-1.0..=1.0))
                    }
                })
                .collect()
        })
        .collect();
    Ok(ObservationSeries {
        cells,
        n_t,
        values,
        noise: delta,
    })
}

/// `int_K kappa grad u_H` from the partition-of-unity columns of `A^K`.
///
/// Uses `a_K(u_H, chi_l) = (int_K kappa grad u_H) . grad phi0_l` for two
/// vertices `l` of `K`, which holds when `u_H` is discretely harmonic inside `K`.
pub fn recover_flux_averages(
    csys: &CoarseSystem,
    coarse: &CoarseMesh,
    stiffness_blocks: &[DMatrix<f64>],
    full: &[f64],
    k: usize,
) -> Result<[f64; 2]> {
    let tri = coarse.elements[k];
    let p = tri.map(|v| coarse.vertices[v]);
    let (g, area) = p1_gradients(p);
    if !(area > 0.0) {
        return Err(Error::FluxRecovery {
            element: k,
            reason: "degenerate coarse element".into(),
        });
    }
    let local = csys.local_state(k, full);
    let block = &stiffness_blocks[k];
    let r: Vec<f64> = (0..2)
        .map(|slot| {
            local
                .iter()
                .enumerate()
                .map(|(a, &c)| c * block[(a, slot * csys.n_b)])
                .sum()
        })
        .collect();
    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    if det.abs() <= 1e-14 * (g[0][0].hypot(g[0][1]) * g[1][0].hypot(g[1][1])) {
        return Err(Error::FluxRecovery {
            element: k,
            reason: "hat gradients are linearly dependent".into(),
        });
    }
    Ok([
        (r[0] * g[1][1] - r[1] * g[0][1]) / det,
        (g[0][0] * r[1] - g[1][0] * r[0]) / det,
    ])
}

/// Direct fine evaluation of `int_K kappa grad u` including fracture line terms.
pub fn fine_flux_average(fine: &FineMesh, coarse: &CoarseMesh, ops: &FineOperators, u: &[f64], k: usize) -> [f64; 2] {
    let mut flux = [0.0; 2];
    for &e in &coarse.element_to_fine[k] {
        let t = fine.elements[e];
        let (g, area) = p1_gradients(element_points(fine, e));
        for a in 0..3 {
            flux[0] += ops.params.k_m * area * u[t[a]] * g[a][0];
            flux[1] += ops.params.k_m * area * u[t[a]] * g[a][1];
        }
    }
    for share in fracture_shares(fine) {
        if fine.fine_to_coarse[share.element] != k {
            continue;
        }
        let t = fine.elements[share.element];
        let (va, vb) = (t[share.local.0], t[share.local.1]);
        let (xa, xb) = (fine.vertices[va], fine.vertices[vb]);
        let w = share.fraction * ops.params.k_f * (u[vb] - u[va]) / share.length;
        flux[0] += w * (xb[0] - xa[0]);
        flux[1] += w * (xb[1] - xa[1]);
    }
    flux
}
