//! Property tests for the invariants of the geometry, meshing, solver and
//! conjugation layers.

use std::collections::BTreeMap;
use std::sync::Arc;

use layer_handle::analysis::{embedding_report, layer_periods, symmetry_residual, Symmetry};
use layer_handle::conjugate::{build_surface, conjugate_coordinate_forms};
use layer_handle::domain::{exhaustion_domain, join_path, Family, HandleParams, LayerParams, StripDomain};
use layer_handle::mesh::{mesh_handle_strip, mesh_layer_cell, mesh_rectangle, refine, MeshParams};
use layer_handle::solver::{solve, solve_handle, solve_layer, SolverOptions};
use proptest::prelude::*;

const FAMILIES: [Family; 4] = [Family::A0, Family::A1, Family::B0, Family::B1];

/// Admissible layer parameters.
fn layer_params() -> impl Strategy<Value = (f64, f64)> {
    (-1.0f64..=1.0, 0.05f64..4.0).prop_filter("x^2 + y^2 > 1", |&(x, y)| x * x + y * y > 1.0)
}

/// Admissible handle parameters kept away from the admissibility boundary.
fn handle_params() -> impl Strategy<Value = (f64, f64)> {
    (-1.0f64..=1.0, 1.0f64..3.0).prop_filter("(x + 1)^2 + y^2 > 4.2", |&(x, y)| (x + 1.0).powi(2) + y * y > 4.2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn join_paths_satisfy_their_invariants((x, y) in layer_params()) {
        let path = join_path(x, y).unwrap();
        prop_assert!(path.check_invariants(x, y).is_ok(), "{:?}", path.check_invariants(x, y));
        prop_assert_eq!(path.edge_count % 2, 1);
    }

    #[test]
    fn boundary_value_is_one_lipschitz((x0, y0) in layer_params(), a in -20.0f64..20.0, b in -20.0f64..20.0) {
        let d = StripDomain { x0, y0 };
        for y in [0.0, y0] {
            let (fa, fb) = (d.boundary_value([a, y]).unwrap(), d.boundary_value([b, y]).unwrap());
            prop_assert!((fa - fb).abs() <= (a - b).abs() + 1e-12);
            prop_assert!((0.0..=1.0).contains(&fa));
        }
    }

    #[test]
    fn boundary_value_hits_zero_and_one_at_vertices((x0, y0) in layer_params(), n in -50i64..50) {
        let d = StripDomain { x0, y0 };
        prop_assert_eq!(d.boundary_value(d.vertex(Family::A0, n)).unwrap(), 0.0);
        prop_assert_eq!(d.boundary_value(d.vertex(Family::A1, n)).unwrap(), 1.0);
        prop_assert!(d.boundary_value(d.vertex(Family::B0, n)).unwrap() <= 1e-12);
        prop_assert!((d.boundary_value(d.vertex(Family::B1, n)).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn boundary_value_is_s_invariant((x0, y0) in layer_params(), x in -20.0f64..20.0) {
        let d = StripDomain { x0, y0 };
        for p in [[x, 0.0], [x, y0]] {
            let image = d.s(p);
            prop_assert!((d.boundary_value(image).unwrap() - d.boundary_value(p).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn vertices_commute_with_t_and_s((x0, y0) in layer_params(), n in -50i64..50) {
        let d = StripDomain { x0, y0 };
        let close = |p: [f64; 2], q: [f64; 2]| (p[0] - q[0]).abs() <= 1e-12 && (p[1] - q[1]).abs() <= 1e-12;
        for family in FAMILIES {
            prop_assert!(close(d.vertex(family, n - 1), d.t(d.vertex(family, n))));
        }
        prop_assert!(close(d.s(d.vertex(Family::A0, n)), d.vertex(Family::B0, 1 - n)));
        prop_assert!(close(d.s(d.vertex(Family::A1, n)), d.vertex(Family::B1, -n)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn exhaustion_polygons_are_symmetric_unit_and_convex((x0, y0) in layer_params(), n in 1u64..5) {
        let d = StripDomain { x0, y0 };
        let omega = exhaustion_domain(&d, n).unwrap();
        prop_assert!(omega.symmetry_defect(&d) <= 1e-12);
        prop_assert_eq!(omega.vertices.len() % 2, 0);
        prop_assert!(omega.edge_lengths().iter().all(|l| (l - 1.0).abs() <= 1e-9));
        prop_assert!(omega.is_convex());
        let n = n as i64;
        for p in [d.vertex(Family::A0, n), d.vertex(Family::B1, n), d.vertex(Family::B0, 1 - n), d.vertex(Family::A1, -n)] {
            prop_assert!(omega.contains(p));
        }
    }

    #[test]
    fn default_meshes_keep_angles_and_refine_by_four((x0, y0) in handle_params()) {
        let mp = MeshParams { h: 0.1, half_width: 4, ..Default::default() };
        let layer = mesh_layer_cell(&LayerParams::new(x0, y0).unwrap(), &mp).unwrap();
        let handle = mesh_handle_strip(&HandleParams::new(x0, y0).unwrap(), &mp).unwrap();
        for &(l, r) in layer.periodic.as_ref().unwrap() {
            prop_assert!((layer.nodes[r][0] - layer.nodes[l][0] - 2.0).abs() <= 1e-12 && layer.nodes[r][1] == layer.nodes[l][1]);
        }
        for mesh in [&layer, &handle] {
            prop_assert!(mesh.min_angle_deg() >= 20.0, "min angle {}", mesh.min_angle_deg());
            let fine = refine(mesh);
            prop_assert_eq!(fine.triangles.len(), 4 * mesh.triangles.len());
            prop_assert_eq!(fine.h, mesh.h / 2.0);
        }
    }

    #[test]
    fn constant_shift_of_data_shifts_the_solution(c in 0.0f64..3.0, a in -0.4f64..0.4, b in -0.4f64..0.4, q in -0.2f64..0.2) {
        let mesh = Arc::new(mesh_rectangle([0.0, 0.0], [2.0, 1.0], 12, 6));
        let boundary = mesh.boundary_nodes();
        let data = |shift: f64| -> BTreeMap<usize, f64> {
            (0..mesh.nodes.len())
                .filter(|&i| boundary[i])
                .map(|i| {
                    let [x, y] = mesh.nodes[i];
                    (i, shift + a * x + b * y + q * (x * x - y * y) / 4.0)
                })
                .collect()
        };
        let opts = SolverOptions::default();
        let base = solve(Arc::clone(&mesh), &data(0.0), &BTreeMap::new(), &opts).unwrap();
        let shifted = solve(Arc::clone(&mesh), &data(c), &BTreeMap::new(), &opts).unwrap();
        for (u, v) in base.values.iter().zip(&shifted.values) {
            prop_assert!((v - u - c).abs() <= 1e-9, "{} vs {}", v - u, c);
        }
        prop_assert!(base.stats.feasibility_margin > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn handle_fields_are_s_symmetric_and_feasible((x0, y0) in handle_params()) {
        let mp = MeshParams { h: 0.1, half_width: 4, ..Default::default() };
        let opts = SolverOptions::default();
        let params = HandleParams::new(x0, y0).unwrap();
        let layer = solve_layer(&params.layer(), &mp, &opts).unwrap();
        let field = solve_handle(&params, &mp, &layer, &opts).unwrap();
        let sr = symmetry_residual(&field, Symmetry::S).unwrap();
        prop_assert!(sr <= 10.0 * opts.tolerance, "s residual {}", sr);
        prop_assert!(field.stats.feasibility_margin > 0.0);
        prop_assert!(layer.stats.feasibility_margin > 0.0);
        prop_assert!(field.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn conjugation_is_exact_in_height_and_gauge_covariant((x0, y0) in layer_params(), b in 0usize..400) {
        prop_assume!(y0 >= 0.5);
        let mp = MeshParams { h: 0.1, ..Default::default() };
        let field = solve_layer(&LayerParams::new(x0, y0).unwrap(), &mp, &SolverOptions::default()).unwrap();
        let mesh = field.mesh();
        let forms = conjugate_coordinate_forms(&field).unwrap();
        for e in &forms[2].topology().edges {
            prop_assert_eq!(forms[2].increment(e[0], e[1]).unwrap(), field.values[e[1]] - field.values[e[0]]);
        }
        for &(l, r) in mesh.periodic.as_ref().unwrap() {
            prop_assert!((field.values[l] - field.values[r]).abs() <= 1e-12);
        }
        let periods = layer_periods(&field).unwrap();
        prop_assert!(periods.pseudo_period.components[2].abs() <= 1e-10);
        let b = b % mesh.nodes.len();
        let s0 = build_surface(&field, 0).unwrap();
        let sb = build_surface(&field, b).unwrap();
        let shift = [sb.nodes[0][0] - s0.nodes[0][0], sb.nodes[0][1] - s0.nodes[0][1]];
        for (p, q) in s0.nodes.iter().zip(&sb.nodes) {
            prop_assert!((q[0] - p[0] - shift[0]).abs() <= 1e-9 && (q[1] - p[1] - shift[1]).abs() <= 1e-9);
            prop_assert_eq!(q[2], p[2]);
        }
    }
}

#[test]
fn embedding_reports_are_deterministic() {
    let mp = MeshParams { h: 0.1, half_width: 4, ..Default::default() };
    let opts = SolverOptions::default();
    let params = HandleParams::new(1.0, 2.0).unwrap();
    let layer = solve_layer(&params.layer(), &mp, &opts).unwrap();
    let field = solve_handle(&params, &mp, &layer, &opts).unwrap();
    let surface = build_surface(&field, 0).unwrap();
    let first = embedding_report(&surface, 50, 9).unwrap();
    let again = embedding_report(&build_surface(&field, 0).unwrap(), 50, 9).unwrap();
    assert_eq!(first, again);
    assert_eq!(first.seed, 9);
}
