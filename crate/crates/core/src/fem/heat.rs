use super::sparse::{CsrMatrix, LinearSystem};
use super::{tri_gradients, FemError, HeatCase, ThermalMaterial};
use crate::meshgen::{BoundaryTag, Mesh};

/// Temperature constraints and edge fluxes for a scalar conduction problem.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeatBcs {
    pub temperature: Vec<(usize, f64)>,
    /// Heat flux into the material through an edge, W/m².
    pub flux: Vec<([usize; 2], f64)>,
}

/// Fixed temperature on all outer walls, uniform inflow through every hole.
pub fn heat_bcs(mesh: &Mesh, case: &HeatCase) -> HeatBcs {
    let outer = mesh.nodes_with_tag(&[BoundaryTag::OuterTop, BoundaryTag::OuterBottom, BoundaryTag::OuterSide]);
    HeatBcs {
        temperature: outer.into_iter().map(|n| (n, case.dirichlet_outer)).collect(),
        flux: mesh.boundary.iter().filter(|e| e.tag == BoundaryTag::Hole).map(|e| (e.nodes, case.flux_holes)).collect(),
    }
}

/// Linear-triangle conduction matrix `k ∫ ∇N ∇Nᵀ` with lumped edge fluxes. Unit thickness.
pub fn assemble_heat(mesh: &Mesh, mat: &ThermalMaterial, bcs: &HeatBcs) -> Result<LinearSystem, FemError> {
    if !(mat.k > 0.0) {
        return Err(FemError::InvalidMaterial(format!("k = {}", mat.k)));
    }
    let n = mesh.n_nodes();
    let mut trip = Vec::with_capacity(9 * mesh.tris.len());
    for (t, tri) in mesh.tris.iter().enumerate() {
        let (two_a, b, c) = tri_gradients(mesh.tri_points(t));
        let s = mat.k / (2.0 * two_a);
        for i in 0..3 {
            for j in 0..3 {
                trip.push((tri[i], tri[j], s * (b[i] * b[j] + c[i] * c[j])));
            }
        }
    }
    let mut f = vec![0.0; n];
    for &([a, b], q) in &bcs.flux {
        let len = mesh.nodes[a].dist(mesh.nodes[b]);
        f[a] += 0.5 * len * q;
        f[b] += 0.5 * len * q;
    }
    let mut prescribed = vec![None; n];
    for &(node, t) in &bcs.temperature {
        prescribed[node] = Some(t);
    }
    LinearSystem::new(CsrMatrix::from_triplets(n, trip), f, prescribed)
}
