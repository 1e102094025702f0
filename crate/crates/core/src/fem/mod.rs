//! Linear-triangle finite elements: plane-strain elasticity with von Mises
//! recovery, and steady heat conduction. These produce the training targets.

mod elastic;
mod heat;
pub mod sparse;

pub use elastic::{
    assemble_elasticity, element_stresses, stress_bcs, von_mises, von_mises_nodal, ElasticBcs,
};
pub use heat::{assemble_heat, heat_bcs, HeatBcs};
pub use sparse::{solve_sparse, CsrMatrix, LinearSystem};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point, Shape};
use crate::meshgen::{triangulate, Mesh, MeshError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FemError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("solver failure: {0}")]
    SolverFailure(String),
    #[error("temperature problem needs at least one hole to act as a heat source")]
    NoSource,
    #[error("invalid material: {0}")]
    InvalidMaterial(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticMaterial {
    /// Young's modulus, Pa.
    pub e: f64,
    pub nu: f64,
}

impl ElasticMaterial {
    pub const ALUMINUM: ElasticMaterial = ElasticMaterial { e: 69e9, nu: 0.33 };

    pub fn validate(&self) -> Result<(), FemError> {
        if !(self.e > 0.0 && self.nu >= 0.0 && self.nu < 0.5) {
            return Err(FemError::InvalidMaterial(format!("E = {}, nu = {}", self.e, self.nu)));
        }
        Ok(())
    }

    /// Plane-strain constitutive matrix in Voigt order (xx, yy, xy).
    pub fn d_matrix(&self) -> [[f64; 3]; 3] {
        let (e, nu) = (self.e, self.nu);
        let c = e / ((1.0 + nu) * (1.0 - 2.0 * nu));
        [[c * (1.0 - nu), c * nu, 0.0], [c * nu, c * (1.0 - nu), 0.0], [0.0, 0.0, c * (1.0 - 2.0 * nu) / 2.0]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalMaterial {
    /// W/(m K).
    pub k: f64,
}

impl ThermalMaterial {
    pub const ALUMINUM: ThermalMaterial = ThermalMaterial { k: 237.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Support {
    /// Both displacement components held at zero.
    Fixed,
    /// Only the vertical component held at zero; one node is pinned horizontally.
    Rollers,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StressCase {
    /// Downward pressure on the top edge, Pa.
    pub traction_top: f64,
    pub bottom: Support,
}

impl Default for StressCase {
    fn default() -> Self {
        StressCase { traction_top: 1e4, bottom: Support::Fixed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatCase {
    /// Temperature on all four outer walls.
    pub dirichlet_outer: f64,
    /// Heat flux into the material through every hole boundary, W/m².
    pub flux_holes: f64,
}

impl Default for HeatCase {
    fn default() -> Self {
        HeatCase { dirichlet_outer: 0.0, flux_holes: 100.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    Stress,
    Temperature,
}

impl Problem {
    pub const ALL: [Problem; 2] = [Problem::Stress, Problem::Temperature];

    pub fn name(self) -> &'static str {
        match self {
            Problem::Stress => "stress",
            Problem::Temperature => "temperature",
        }
    }

    pub fn units(self) -> Units {
        match self {
            Problem::Stress => Units::Pa,
            Problem::Temperature => Units::Celsius,
        }
    }
}

impl std::str::FromStr for Problem {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stress" => Ok(Problem::Stress),
            "temperature" => Ok(Problem::Temperature),
            _ => Err(format!("unknown problem '{}', expected stress or temperature", s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Units {
    Pa,
    Celsius,
    Dimensionless,
}

/// One scalar per mesh node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodalField {
    pub values: Vec<f64>,
    pub units: Units,
    pub problem: Problem,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FemConfig {
    pub h_max: f64,
    pub elastic: ElasticMaterial,
    pub thermal: ThermalMaterial,
    pub stress: StressCase,
    pub heat: HeatCase,
}

impl Default for FemConfig {
    fn default() -> Self {
        FemConfig {
            h_max: 0.025,
            elastic: ElasticMaterial::ALUMINUM,
            thermal: ThermalMaterial::ALUMINUM,
            stress: StressCase::default(),
            heat: HeatCase::default(),
        }
    }
}

/// Shape functions of a linear triangle: `(2A, b, c)` with
/// `dN_i/dx = b_i / 2A` and `dN_i/dy = c_i / 2A`.
pub(crate) fn tri_gradients(p: [Point; 3]) -> (f64, [f64; 3], [f64; 3]) {
    let two_a = (p[1] - p[0]).cross(p[2] - p[0]);
    let mut b = [0.0; 3];
    let mut c = [0.0; 3];
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        b[i] = p[j].y - p[k].y;
        c[i] = p[k].x - p[j].x;
    }
    (two_a, b, c)
}

/// Area-weighted average of per-element values at each node.
pub fn nodal_average(mesh: &Mesh, element_values: &[f64]) -> Vec<f64> {
    let n = mesh.n_nodes();
    let mut sum = vec![0.0; n];
    let mut weight = vec![0.0; n];
    for (t, tri) in mesh.tris.iter().enumerate() {
        let a = mesh.tri_area(t);
        for &v in tri {
            sum[v] += a * element_values[t];
            weight[v] += a;
        }
    }
    sum.iter().zip(&weight).map(|(s, w)| if *w > 0.0 { s / w } else { 0.0 }).collect()
}

/// Von Mises stress on a given mesh under the configured load case.
pub fn solve_stress_on(mesh: &Mesh, cfg: &FemConfig) -> Result<NodalField, FemError> {
    let bcs = stress_bcs(mesh, &cfg.stress);
    let sys = assemble_elasticity(mesh, &cfg.elastic, &bcs)?;
    let u = sys.solve()?;
    Ok(von_mises_nodal(mesh, &u, &cfg.elastic))
}

pub fn solve_stress(shape: &Shape, cfg: &FemConfig) -> Result<(Mesh, NodalField), FemError> {
    let mesh = triangulate(shape, cfg.h_max)?;
    let field = solve_stress_on(&mesh, cfg)?;
    Ok((mesh, field))
}

/// Temperature on a given mesh; fails if the mesh has no hole boundary.
pub fn solve_temperature_on(mesh: &Mesh, cfg: &FemConfig) -> Result<NodalField, FemError> {
    let bcs = heat_bcs(mesh, &cfg.heat);
    if bcs.flux.is_empty() {
        return Err(FemError::NoSource);
    }
    let sys = assemble_heat(mesh, &cfg.thermal, &bcs)?;
    let t = sys.solve()?;
    Ok(NodalField { values: t, units: Units::Celsius, problem: Problem::Temperature })
}

pub fn solve_temperature(shape: &Shape, cfg: &FemConfig) -> Result<(Mesh, NodalField), FemError> {
    if shape.holes.is_empty() {
        return Err(FemError::NoSource);
    }
    let mesh = triangulate(shape, cfg.h_max)?;
    let field = solve_temperature_on(&mesh, cfg)?;
    Ok((mesh, field))
}

pub fn solve_on(problem: Problem, mesh: &Mesh, cfg: &FemConfig) -> Result<NodalField, FemError> {
    match problem {
        Problem::Stress => solve_stress_on(mesh, cfg),
        Problem::Temperature => solve_temperature_on(mesh, cfg),
    }
}
