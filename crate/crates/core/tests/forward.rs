//! Time stepping, observations and coarse/fine consistency.

mod common;

use msinv_core::forward::{
    cell_average, fine_cell_averages, fine_flux_average, integrate_dense, recover_flux_averages,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Implicit Euler on `M c' + A c = 0` against `exp(-M^{-1} A T) c0`.
fn euler_error(n_t: usize) -> f64 {
    let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.5, 0.25, 0.0, 0.25, 1.0]);
    let a = DMatrix::from_row_slice(3, 3, &[1.0, -0.5, 0.0, -0.5, 1.2, -0.3, 0.0, -0.3, 0.8]);
    let c0 = DVector::from_vec(vec![1.0, -0.5, 2.0]);
    let t = 1.0;
    let gen = -m.clone().try_inverse().unwrap() * &a * t;
    let exact = gen.exp() * &c0;
    let tr = integrate_dense(&m, &a, &[0.0; 3], c0.as_slice(), t, n_t).unwrap();
    let last = DVector::from_column_slice(tr.last());
    (last - exact).norm()
}

#[test]
fn implicit_euler_is_first_order() {
    let errors: Vec<f64> = [20, 40, 80, 160].iter().map(|&n| euler_error(n)).collect();
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
    }
}

fn spd(seed: &[f64], n: usize, shift: f64) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |i, j| seed[(i * n + j) % seed.len()]);
    b.transpose() * &b + DMatrix::identity(n, n) * shift
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mass_energy_decays_without_source(
        ms in prop::collection::vec(-1.0f64..1.0, 25),
        as_ in prop::collection::vec(-1.0f64..1.0, 25),
        c0 in prop::collection::vec(-1.0f64..1.0, 5),
        dt in 0.01f64..2.0,
    ) {
        let m = spd(&ms, 5, 0.1);
        let a = spd(&as_, 5, 0.0);
        let tr = integrate_dense(&m, &a, &[0.0; 5], &c0, dt * 6.0, 6).unwrap();
        let energy: Vec<f64> = tr.states.iter().map(|c| {
            let c = DVector::from_column_slice(c);
            c.dot(&(&m * &c))
        }).collect();
        for w in energy.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15);
        }
    }
}

#[test]
fn cell_averages_are_linear_and_match_fine_quadrature() {
    let pair = common::small_pair(2);
    let r = &pair.prior;
    let n_fine = r.fine.num_vertices();
    let u: Vec<f64> = (0..n_fine).map(|i| (i as f64 * 0.37).sin()).collect();
    let v: Vec<f64> = (0..n_fine).map(|i| (i as f64 * 0.11).cos()).collect();
    let (alpha, beta) = (1.7, -0.4);
    let w: Vec<f64> = u.iter().zip(&v).map(|(x, y)| alpha * x + beta * y).collect();
    let (au, av, aw) = (
        fine_cell_averages(&r.fine, &r.coarse, &r.ops, &u),
        fine_cell_averages(&r.fine, &r.coarse, &r.ops, &v),
        fine_cell_averages(&r.fine, &r.coarse, &r.ops, &w),
    );
    for k in 0..r.coarse.num_elements() {
        assert!((aw[k] - (alpha * au[k] + beta * av[k])).abs() < 1e-13);
    }

    // Coarse averages through the partition-of-unity mass columns equal the
    // fine average of the same function.
    let full: Vec<f64> = (0..r.system.n_full()).map(|i| 0.3 + (i as f64 * 0.7).sin()).collect();
    let fine_u = r.space.full_to_fine(&full);
    let fine_avg = fine_cell_averages(&r.fine, &r.coarse, &r.ops, &fine_u);
    for (k, &fine) in fine_avg.iter().enumerate() {
        let coarse_avg = cell_average(&r.system, &full, k);
        assert!((coarse_avg - fine).abs() <= 1e-12 * fine.abs().max(1.0), "cell {k}");
    }
}

#[test]
fn flux_recovery_matches_fine_flux_in_partition_span() {
    let pair = common::small_pair(2);
    let r = &pair.prior;
    let mut full = vec![0.0; r.system.n_full()];
    for v in 0..r.coarse.num_vertices() {
        let [x, y] = r.coarse.vertices[v];
        full[r.space.full_index(v, 0)] = 1.0 + 2.0 * x - 0.5 * y + x * y;
    }
    let fine_u = r.space.full_to_fine(&full);
    let mut fractured = 0;
    for k in 0..r.coarse.num_elements() {
        if r.coarse.element_to_fine[k].iter().any(|&e| {
            let t = r.fine.elements[e];
            r.fine.fracture_edges.iter().any(|&(ed, _)| t.contains(&ed.0) && t.contains(&ed.1))
        }) {
            fractured += 1;
        }
        let coarse = recover_flux_averages(&r.system, &r.coarse, &r.system.stiffness_blocks, &full, k).unwrap();
        let fine = fine_flux_average(&r.fine, &r.coarse, &r.ops, &fine_u, k);
        let scale = fine[0].hypot(fine[1]).max(1e-12);
        for d in 0..2 {
            assert!((coarse[d] - fine[d]).abs() <= 1e-9 * scale, "cell {k}: {coarse:?} vs {fine:?}");
        }
    }
    assert!(fractured > 0);
}
