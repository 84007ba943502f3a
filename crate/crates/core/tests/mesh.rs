//! Mesh construction and fracture snapping properties.

use msinv_core::geometry::{build_coarse_mesh, build_fine_mesh, FractureNetwork, Segment};
use msinv_core::Error;
use proptest::prelude::*;

fn barycentric(p: [f64; 2], t: [[f64; 2]; 3]) -> [f64; 3] {
    let det = (t[1][0] - t[0][0]) * (t[2][1] - t[0][1]) - (t[2][0] - t[0][0]) * (t[1][1] - t[0][1]);
    let l1 = ((p[0] - t[0][0]) * (t[2][1] - t[0][1]) - (t[2][0] - t[0][0]) * (p[1] - t[0][1])) / det;
    let l2 = ((t[1][0] - t[0][0]) * (p[1] - t[0][1]) - (p[0] - t[0][0]) * (t[1][1] - t[0][1])) / det;
    [1.0 - l1 - l2, l1, l2]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn areas_sum_to_unit_square(n in 1usize..6, r in 1usize..5) {
        let mut coarse = build_coarse_mesh(n).unwrap();
        let fine = build_fine_mesh(&mut coarse, r, &FractureNetwork::empty(1.0)).unwrap();
        let coarse_total: f64 = (0..coarse.num_elements()).map(|k| coarse.element_area(k)).sum();
        let fine_total: f64 = (0..fine.num_elements()).map(|e| fine.element_area(e)).sum();
        prop_assert!((coarse_total - 1.0).abs() < 1e-12);
        prop_assert!((fine_total - 1.0).abs() < 1e-12);
        for k in 0..coarse.num_elements() {
            let inner: f64 = coarse.element_to_fine[k].iter().map(|&e| fine.element_area(e)).sum();
            prop_assert!((inner - coarse.element_area(k)).abs() < 1e-14);
        }
    }

    #[test]
    fn fine_elements_lie_in_their_coarse_element(n in 1usize..5, r in 1usize..5) {
        let mut coarse = build_coarse_mesh(n).unwrap();
        let fine = build_fine_mesh(&mut coarse, r, &FractureNetwork::empty(1.0)).unwrap();
        let mut owners = vec![0usize; fine.num_elements()];
        for k in 0..coarse.num_elements() {
            let t = coarse.elements[k].map(|v| coarse.vertices[v]);
            for &e in &coarse.element_to_fine[k] {
                owners[e] += 1;
                prop_assert_eq!(fine.fine_to_coarse[e], k);
                for v in fine.elements[e] {
                    let l = barycentric(fine.vertices[v], t);
                    prop_assert!(l.iter().all(|&x| x >= -1e-12));
                }
            }
        }
        prop_assert!(owners.iter().all(|&c| c == 1));
    }

    #[test]
    fn snapping_is_idempotent(
        x0 in 0.05f64..0.95, y0 in 0.05f64..0.95,
        x1 in 0.05f64..0.95, y1 in 0.05f64..0.95,
        r in 2usize..5,
    ) {
        let seg = Segment { a: [x0, y0], b: [x1, y1] };
        prop_assume!(seg.length() > 0.05);
        let mut coarse = build_coarse_mesh(4).unwrap();
        let net = FractureNetwork::new(vec![seg], 1.0).unwrap();
        let first = match build_fine_mesh(&mut coarse, r, &net) {
            Ok(f) => f,
            Err(Error::DegenerateFracture { .. }) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let h = first.h;
        for res in &first.snap_residuals[0] {
            prop_assert!(*res <= h * std::f64::consts::FRAC_1_SQRT_2 + 1e-12);
        }
        // Chain is connected and runs between the snapped endpoints.
        let edges: Vec<_> = first.fracture_edges.iter().map(|&(e, _)| e).collect();
        prop_assert!(!edges.is_empty());
        let start = edges[0];
        let end = *edges.last().unwrap();
        let snapped = |e: msinv_core::geometry::Edge, end_first: bool| {
            let v = if end_first { e.0 } else { e.1 };
            first.vertices[v]
        };
        let a = [snapped(start, true), snapped(start, false)];
        let b = [snapped(end, true), snapped(end, false)];
        let near = |p: [f64; 2], q: [f64; 2]| (p[0] - q[0]).hypot(p[1] - q[1]) <= h * std::f64::consts::FRAC_1_SQRT_2 + 1e-12;
        prop_assert!(a.iter().any(|&p| near(p, seg.a)));
        prop_assert!(b.iter().any(|&p| near(p, seg.b)));
        for w in edges.windows(2) {
            let shared = [w[0].0, w[0].1].iter().any(|v| *v == w[1].0 || *v == w[1].1);
            prop_assert!(shared);
        }

        // Re-snapping a segment whose endpoints are the snapped lattice points
        // reproduces the chain with zero residual.
        let end_a = a.into_iter().min_by(|p, q| (p[0] - seg.a[0]).hypot(p[1] - seg.a[1]).total_cmp(&(q[0] - seg.a[0]).hypot(q[1] - seg.a[1]))).unwrap();
        let end_b = b.into_iter().min_by(|p, q| (p[0] - seg.b[0]).hypot(p[1] - seg.b[1]).total_cmp(&(q[0] - seg.b[0]).hypot(q[1] - seg.b[1]))).unwrap();
        let again = FractureNetwork::new(vec![Segment { a: end_a, b: end_b }], 1.0).unwrap();
        let second = build_fine_mesh(&mut coarse, r, &again).unwrap();
        prop_assert_eq!(&second.fracture_edges, &first.fracture_edges);
        prop_assert!(second.snap_residuals[0].iter().all(|&x| x < 1e-12));
    }
}

#[test]
fn zero_refinement_is_rejected() {
    let mut coarse = build_coarse_mesh(2).unwrap();
    assert!(build_fine_mesh(&mut coarse, 0, &FractureNetwork::empty(1.0)).is_err());
}
