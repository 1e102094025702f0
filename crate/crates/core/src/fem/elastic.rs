use super::sparse::{CsrMatrix, LinearSystem};
use super::{nodal_average, tri_gradients, ElasticMaterial, FemError, NodalField, Problem, StressCase, Support, Units};
use crate::meshgen::{BoundaryTag, Mesh};

/// Displacement constraints and edge tractions for a 2-dof-per-node problem.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ElasticBcs {
    /// `(node, [ux, uy])`; `None` leaves a component free.
    pub displacement: Vec<(usize, [Option<f64>; 2])>,
    /// Constant traction (force per length) on an edge.
    pub traction: Vec<([usize; 2], [f64; 2])>,
}

/// Downward pressure on the top edge, bottom held according to `case.bottom`.
pub fn stress_bcs(mesh: &Mesh, case: &StressCase) -> ElasticBcs {
    let bottom = mesh.nodes_with_tag(&[BoundaryTag::OuterBottom]);
    let displacement = match case.bottom {
        Support::Fixed => bottom.iter().map(|&n| (n, [Some(0.0), Some(0.0)])).collect(),
        Support::Rollers => {
            let pin = bottom.iter().copied().min_by(|&a, &b| mesh.nodes[a].x.total_cmp(&mesh.nodes[b].x));
            bottom.iter().map(|&n| (n, [if Some(n) == pin { Some(0.0) } else { None }, Some(0.0)])).collect()
        }
    };
    let traction = mesh
        .boundary
        .iter()
        .filter(|e| e.tag == BoundaryTag::OuterTop)
        .map(|e| (e.nodes, [0.0, -case.traction_top]))
        .collect();
    ElasticBcs { displacement, traction }
}

/// Strain-displacement matrix (3 x 6) of a triangle, and its area.
fn b_matrix(mesh: &Mesh, t: usize) -> ([[f64; 6]; 3], f64) {
    let (two_a, b, c) = tri_gradients(mesh.tri_points(t));
    let mut bm = [[0.0; 6]; 3];
    for i in 0..3 {
        bm[0][2 * i] = b[i] / two_a;
        bm[1][2 * i + 1] = c[i] / two_a;
        bm[2][2 * i] = c[i] / two_a;
        bm[2][2 * i + 1] = b[i] / two_a;
    }
    (bm, 0.5 * two_a)
}

/// Constant-strain-triangle stiffness, consistent edge loads, and symmetric
/// elimination of the prescribed displacements. Unit thickness.
pub fn assemble_elasticity(mesh: &Mesh, mat: &ElasticMaterial, bcs: &ElasticBcs) -> Result<LinearSystem, FemError> {
    mat.validate()?;
    let n = 2 * mesh.n_nodes();
    let d = mat.d_matrix();
    let mut trip = Vec::with_capacity(36 * mesh.tris.len());
    for (t, tri) in mesh.tris.iter().enumerate() {
        let (bm, area) = b_matrix(mesh, t);
        // DB (3 x 6)
        let mut db = [[0.0; 6]; 3];
        for r in 0..3 {
            for c in 0..6 {
                db[r][c] = (0..3).map(|k| d[r][k] * bm[k][c]).sum();
            }
        }
        let dof = |l: usize| 2 * tri[l / 2] + l % 2;
        for i in 0..6 {
            for j in 0..6 {
                let kij: f64 = (0..3).map(|k| bm[k][i] * db[k][j]).sum::<f64>() * area;
                trip.push((dof(i), dof(j), kij));
            }
        }
    }
    let mut f = vec![0.0; n];
    for &([a, b], tr) in &bcs.traction {
        let len = mesh.nodes[a].dist(mesh.nodes[b]);
        for node in [a, b] {
            f[2 * node] += 0.5 * len * tr[0];
            f[2 * node + 1] += 0.5 * len * tr[1];
        }
    }
    let mut prescribed = vec![None; n];
    for &(node, comps) in &bcs.displacement {
        for (k, v) in comps.iter().enumerate() {
            if let Some(v) = v {
                prescribed[2 * node + k] = Some(*v);
            }
        }
    }
    LinearSystem::new(CsrMatrix::from_triplets(n, trip), f, prescribed)
}

/// Constant stress `(sxx, syy, sxy)` of every element.
pub fn element_stresses(mesh: &Mesh, u: &[f64], mat: &ElasticMaterial) -> Vec<[f64; 3]> {
    let d = mat.d_matrix();
    (0..mesh.tris.len())
        .map(|t| {
            let (bm, _) = b_matrix(mesh, t);
            let tri = mesh.tris[t];
            let ue: Vec<f64> = (0..6).map(|l| u[2 * tri[l / 2] + l % 2]).collect();
            let eps: Vec<f64> = (0..3).map(|r| (0..6).map(|c| bm[r][c] * ue[c]).sum()).collect();
            [0, 1, 2].map(|r| (0..3).map(|k| d[r][k] * eps[k]).sum())
        })
        .collect()
}

/// Plane-strain von Mises stress with `szz = nu (sxx + syy)`.
pub fn von_mises(s: [f64; 3], nu: f64) -> f64 {
    let [sx, sy, txy] = s;
    let sz = nu * (sx + sy);
    (0.5 * ((sx - sy).powi(2) + (sy - sz).powi(2) + (sz - sx).powi(2)) + 3.0 * txy * txy).sqrt()
}

pub fn von_mises_nodal(mesh: &Mesh, u: &[f64], mat: &ElasticMaterial) -> NodalField {
    let vm: Vec<f64> = element_stresses(mesh, u, mat).into_iter().map(|s| von_mises(s, mat.nu)).collect();
    NodalField { values: nodal_average(mesh, &vm), units: Units::Pa, problem: Problem::Stress }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{solve_stress, FemConfig};
    use crate::geometry::{gen_voronoi_shape, pt, Polygon, Provenance, Shape, VoronoiParams};
    use crate::meshgen::triangulate;

    const MAT: ElasticMaterial = ElasticMaterial::ALUMINUM;

    fn affine(p: crate::geometry::Point) -> [f64; 2] {
        [1e-4 * p.x - 3e-5 * p.y + 2e-6, 4e-5 * p.x + 2e-4 * p.y - 1e-6]
    }

    /// Stress from the affine field above: D [eps_xx, eps_yy, gamma_xy].
    fn affine_stress() -> [f64; 3] {
        let eps = [1e-4, 2e-4, -3e-5 + 4e-5];
        let d = MAT.d_matrix();
        [0, 1, 2].map(|r| (0..3).map(|k| d[r][k] * eps[k]).sum())
    }

    fn max_rel(stresses: &[[f64; 3]], exact: [f64; 3]) -> f64 {
        let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        stresses.iter().flat_map(|s| (0..3).map(move |k| (s[k] - exact[k]).abs() / scale)).fold(0.0, f64::max)
    }

    #[test]
    fn single_element_affine_field_is_exact() {
        let mesh = Mesh { nodes: vec![pt(0.1, 0.1), pt(0.7, 0.2), pt(0.3, 0.8)], tris: vec![[0, 1, 2]], boundary: vec![], h_max: 1.0 };
        let bcs = ElasticBcs {
            displacement: (0..3).map(|n| (n, affine(mesh.nodes[n]).map(Some))).collect(),
            traction: vec![],
        };
        let sys = assemble_elasticity(&mesh, &MAT, &bcs).unwrap();
        let u = sys.solve().unwrap();
        assert!(max_rel(&element_stresses(&mesh, &u, &MAT), affine_stress()) < 1e-12);
        // a free element is in equilibrium: nodal forces sum to zero
        let r = sys.reactions(&u);
        let scale = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((r[0] + r[2] + r[4]).abs() < 1e-12 * scale);
        assert!((r[1] + r[3] + r[5]).abs() < 1e-12 * scale);
    }

    #[test]
    fn patch_test_on_refined_meshes() {
        let shape = gen_voronoi_shape(&VoronoiParams { n_holes: 3, wall_thickness: 0.14, smoothing_degree: 5, seed: 3 }).unwrap();
        for (s, h) in [(Shape::solid(), 1.5), (Shape::solid(), 0.1), (shape, 0.05)] {
            let mesh = triangulate(&s, h).unwrap();
            // prescribe the affine field on every boundary node, outer and hole
            let bnodes = mesh.nodes_with_tag(&BoundaryTag::ALL);
            let bcs = ElasticBcs {
                displacement: bnodes.iter().map(|&n| (n, affine(mesh.nodes[n]).map(Some))).collect(),
                traction: vec![],
            };
            let u = assemble_elasticity(&mesh, &MAT, &bcs).unwrap().solve().unwrap();
            assert!(max_rel(&element_stresses(&mesh, &u, &MAT), affine_stress()) < 1e-10);
        }
    }

    #[test]
    fn uniaxial_compression_with_rollers_matches_closed_form() {
        let q = 1e4;
        let mesh = triangulate(&Shape::solid(), 0.1).unwrap();
        let mut displacement = Vec::new();
        for n in 0..mesh.n_nodes() {
            let p = mesh.nodes[n];
            let ux = if p.x == 0.0 || p.x == 1.0 { Some(0.0) } else { None };
            let uy = if p.y == 0.0 { Some(0.0) } else { None };
            if ux.is_some() || uy.is_some() {
                displacement.push((n, [ux, uy]));
            }
        }
        let traction = mesh.boundary.iter().filter(|e| e.tag == BoundaryTag::OuterTop).map(|e| (e.nodes, [0.0, -q])).collect();
        let sys = assemble_elasticity(&mesh, &MAT, &ElasticBcs { displacement, traction }).unwrap();
        let u = sys.solve().unwrap();
        let nu = MAT.nu;
        let exact = [-q * nu / (1.0 - nu), -q, 0.0];
        assert!(max_rel(&element_stresses(&mesh, &u, &MAT), exact) < 1e-8);
        let field = von_mises_nodal(&mesh, &u, &MAT);
        let vm = von_mises(exact, nu);
        assert!(field.values.iter().all(|v| (v - vm).abs() < 1e-8 * vm));
    }

    #[test]
    fn von_mises_identities() {
        let nu = 0.33;
        let s = 7.0;
        assert!((von_mises([s, 0.0, 0.0], nu) - s * (1.0 - nu + nu * nu).sqrt()).abs() < 1e-12);
        assert!((von_mises([0.0, 0.0, 2.0], nu) - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        let mesh = triangulate(&Shape::solid(), 0.2).unwrap();
        let f = von_mises_nodal(&mesh, &vec![0.0; 2 * mesh.n_nodes()], &MAT);
        assert!(f.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reactions_balance_applied_load() {
        let shape = gen_voronoi_shape(&VoronoiParams { n_holes: 4, wall_thickness: 0.12, smoothing_degree: 8, seed: 11 }).unwrap();
        let mesh = triangulate(&shape, 0.025).unwrap();
        let case = StressCase::default();
        let sys = assemble_elasticity(&mesh, &MAT, &stress_bcs(&mesh, &case)).unwrap();
        let u = sys.solve().unwrap();
        let r = sys.reactions(&u);
        let (rx, ry): (f64, f64) = (0..mesh.n_nodes()).fold((0.0, 0.0), |(x, y), n| (x + r[2 * n], y + r[2 * n + 1]));
        // applied: q over the unit-length top edge, downward
        let applied = -case.traction_top;
        assert!((ry + applied).abs() <= 1e-8 * case.traction_top, "{} vs {}", ry, applied);
        assert!(rx.abs() <= 1e-8 * case.traction_top);
    }

    #[test]
    fn solid_square_bounded_and_hole_concentrates() {
        let cfg = FemConfig::default();
        let (_, solid) = solve_stress(&Shape::solid(), &cfg).unwrap();
        let solid_peak = solid.values.iter().copied().fold(0.0, f64::max);
        assert!(solid_peak <= 3.0 * cfg.stress.traction_top);
        let circle = Polygon::regular(pt(0.5, 0.5), 0.15, 64, 0.0).unwrap();
        let holed = Shape::new(vec![circle], Provenance { generator: "test".into(), params: serde_json::Value::Null, seed: 0 });
        let (mesh, f) = solve_stress(&holed, &cfg).unwrap();
        assert_eq!(f.values.len(), mesh.n_nodes());
        assert!(f.values.iter().copied().fold(0.0, f64::max) > solid_peak);
    }

    #[test]
    fn empty_constraints_are_singular() {
        let mesh = triangulate(&Shape::solid(), 0.5).unwrap();
        assert!(matches!(assemble_elasticity(&mesh, &MAT, &ElasticBcs::default()), Err(FemError::SingularSystem(_))));
    }
}
