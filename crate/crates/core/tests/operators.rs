//! Fine operators and the sparse solver.

mod common;

use msinv_core::assembly::{AssemblyParams, BoundaryHandling, FineOperators};
use msinv_core::geometry::{build_coarse_mesh, build_fine_mesh};
use msinv_core::sparse::{solve_spd, SparseSymMatrix};
use nalgebra::DMatrix;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn stiffness_is_symmetric_and_annihilates_constants(
        k_m in 1e-4f64..1.0,
        k_f in 1.0f64..1e4,
        c_m in 0.1f64..10.0,
        y0 in 0.1f64..0.9,
        y1 in 0.1f64..0.9,
    ) {
        let params = AssemblyParams { k_m, k_f, c_m, ..AssemblyParams::default() };
        let mut coarse = build_coarse_mesh(3).unwrap();
        let net = common::network(&[[0.05, y0, 0.95, y1]], k_f);
        let fine = build_fine_mesh(&mut coarse, 3, &net).unwrap();
        let ops = FineOperators::new(&fine, &params).unwrap();
        let a = ops.global_stiffness(&fine, BoundaryHandling::Natural);
        let m = ops.global_mass(&fine, BoundaryHandling::Natural);
        prop_assert!(a.is_symmetric());
        prop_assert!(m.is_symmetric());
        let ones = vec![1.0; fine.num_vertices()];
        let scale = a.diagonal().iter().fold(0.0f64, |s, d| s.max(d.abs()));
        for v in a.mul_vec(&ones) {
            prop_assert!(v.abs() <= 1e-12 * scale);
        }
        prop_assert!((m.total() - c_m).abs() <= 1e-12 * c_m);
    }

    #[test]
    fn conjugate_gradient_matches_dense_cholesky(seed in any::<u64>(), density in 0.05f64..0.4) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 50;
        let mut b = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i == j || rng.gen::<f64>() < density {
                    b[(i, j)] = rng.gen_range(-1.0..1.0);
                }
            }
        }
        let a = b.transpose() * &b + DMatrix::identity(n, n) * 0.5;
        let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sparse = SparseSymMatrix::from_dense(&a);
        prop_assert!(sparse.is_symmetric());
        let x = solve_spd(&sparse, &rhs).unwrap();
        let exact = a.clone().cholesky().unwrap().solve(&nalgebra::DVector::from_vec(rhs));
        let err = exact.iter().zip(&x).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-8 * exact.norm(), "error {err:e}");
    }
}

#[test]
fn dirichlet_elimination_keeps_identity_rows() {
    let mut coarse = build_coarse_mesh(2).unwrap();
    let fine = build_fine_mesh(&mut coarse, 2, &msinv_core::geometry::FractureNetwork::empty(1.0)).unwrap();
    let ops = FineOperators::new(&fine, &AssemblyParams::default()).unwrap();
    let a = ops.global_stiffness(&fine, BoundaryHandling::EliminateDirichlet);
    for v in 0..fine.num_vertices() {
        if fine.is_dirichlet(v) {
            let row: Vec<_> = a.row(v).filter(|&(_, x)| x != 0.0).collect();
            assert_eq!(row.len(), 1);
            assert_eq!(row[0].0, v);
        }
    }
}
