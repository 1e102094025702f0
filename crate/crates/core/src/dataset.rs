//! Dataset recipes: which shapes to generate, with which parameter ranges,
//! in which partition, and the in-memory sample record.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fem::{solve_on, FemConfig, FemError, NodalField, Problem};
use crate::geometry::{gen_lattice_shape, gen_voronoi_shape, GeometryError, LatticeParams, Shape, VoronoiParams};
use crate::meshgen::{triangulate, Mesh, MeshError};
use crate::sdf::{sample_sdf, SdfError, SdfGrid};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("sample {id}: {source}")]
    Geometry { id: String, source: GeometryError },
    #[error("sample {id}: {source}")]
    Mesh { id: String, source: MeshError },
    #[error(transparent)]
    Sdf(#[from] SdfError),
    #[error("invalid dataset config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Voronoi,
    Lattice,
}

impl Family {
    pub const ALL: [Family; 2] = [Family::Voronoi, Family::Lattice];

    pub fn name(self) -> &'static str {
        match self {
            Family::Voronoi => "voronoi",
            Family::Lattice => "lattice",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
    Ood,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Test, Partition::Ood];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Test => "test",
            Partition::Ood => "ood",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSizes {
    pub train: usize,
    pub test: usize,
    pub ood: usize,
}

impl PartitionSizes {
    pub fn get(&self, p: Partition) -> usize {
        match p {
            Partition::Train => self.train,
            Partition::Test => self.test,
            Partition::Ood => self.ood,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.test + self.ood
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoronoiRanges {
    pub n_holes: (usize, usize),
    pub wall: (f64, f64),
    /// Out-of-distribution walls come from `[ood_wall.0, wall.0)` or `(wall.1, ood_wall.1]`.
    pub ood_wall: (f64, f64),
    pub smoothing: (usize, usize),
}

impl Default for VoronoiRanges {
    fn default() -> Self {
        VoronoiRanges { n_holes: (3, 4), wall: (0.10, 0.18), ood_wall: (0.06, 0.22), smoothing: (1, 20) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeRanges {
    pub lattice_n: Vec<usize>,
    pub n_holes: (usize, usize),
    pub ood_n_holes: Vec<usize>,
    pub side_count: (usize, usize),
    pub smoothness: (usize, usize),
    pub size: (f64, f64),
    pub min_wall: f64,
}

impl Default for LatticeRanges {
    fn default() -> Self {
        LatticeRanges {
            lattice_n: vec![3, 4],
            n_holes: (4, 8),
            ood_n_holes: vec![2, 3, 9, 10],
            side_count: (3, 6),
            smoothness: (1, 15),
            size: (0.07, 0.15),
            min_wall: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    pub seed: u64,
    pub voronoi: PartitionSizes,
    pub lattice: PartitionSizes,
    #[serde(default)]
    pub voronoi_ranges: VoronoiRanges,
    #[serde(default)]
    pub lattice_ranges: LatticeRanges,
    pub h_max: f64,
    pub grid: usize,
}

impl DatasetConfig {
    /// 200 train / 50 test / 50 out-of-distribution, split evenly between families.
    pub fn desk_combined(seed: u64) -> Self {
        let half = PartitionSizes { train: 100, test: 25, ood: 25 };
        DatasetConfig {
            name: "combined".into(),
            seed,
            voronoi: half,
            lattice: half,
            voronoi_ranges: VoronoiRanges::default(),
            lattice_ranges: LatticeRanges::default(),
            h_max: 0.025,
            grid: 64,
        }
    }

    pub fn sizes(&self, f: Family) -> PartitionSizes {
        match f {
            Family::Voronoi => self.voronoi,
            Family::Lattice => self.lattice,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::Config(m.into()));
        if !(self.h_max > 0.0) {
            return bad("h_max must be positive");
        }
        if self.grid < 2 {
            return bad("grid must be at least 2");
        }
        let v = &self.voronoi_ranges;
        if v.n_holes.0 == 0 || v.n_holes.0 > v.n_holes.1 || v.smoothing.0 > v.smoothing.1 {
            return bad("voronoi hole and smoothing ranges must be ordered and nonzero");
        }
        if !(v.wall.0 > 0.0 && v.wall.0 < v.wall.1 && v.ood_wall.0 < v.wall.0 && v.ood_wall.1 > v.wall.1) {
            return bad("voronoi walls must satisfy 0 < ood_lo < lo < hi < ood_hi");
        }
        let l = &self.lattice_ranges;
        if l.lattice_n.is_empty() || l.lattice_n.contains(&0) || l.n_holes.0 > l.n_holes.1 || l.ood_n_holes.is_empty() {
            return bad("lattice ranges must be nonempty and ordered");
        }
        let biggest = l.lattice_n.iter().max().unwrap().pow(2);
        if l.n_holes.1 > biggest || l.ood_n_holes.iter().any(|&h| h > biggest) {
            return bad("lattice hole counts exceed the largest lattice");
        }
        Ok(())
    }
}

/// Generator parameters of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ShapeParams {
    Voronoi(VoronoiParams),
    Lattice(LatticeParams),
}

impl ShapeParams {
    pub fn generate(&self) -> Result<Shape, GeometryError> {
        match self {
            ShapeParams::Voronoi(p) => gen_voronoi_shape(p),
            ShapeParams::Lattice(p) => gen_lattice_shape(p),
        }
    }
}

/// One entry of the generation plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub id: String,
    pub family: Family,
    pub partition: Partition,
    pub params: ShapeParams,
}

/// SplitMix64 finalizer, used to derive independent per-sample seeds.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_seed(master: u64, f: Family, p: Partition, i: usize) -> u64 {
    mix_seed(mix_seed(mix_seed(master) ^ (f as u64) << 8 ^ p as u64) ^ i as u64)
}

fn draw_params(cfg: &DatasetConfig, f: Family, p: Partition, seed: u64) -> ShapeParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match f {
        Family::Voronoi => {
            let r = &cfg.voronoi_ranges;
            let n_holes = rng.gen_range(r.n_holes.0..=r.n_holes.1);
            let wall = if p == Partition::Ood {
                if rng.gen_bool(0.5) {
                    rng.gen_range(r.ood_wall.0..r.wall.0)
                } else {
                    // (wall.1, ood_wall.1]
                    r.ood_wall.1 - rng.gen_range(0.0..r.ood_wall.1 - r.wall.1)
                }
            } else {
                rng.gen_range(r.wall.0..=r.wall.1)
            };
            let smoothing_degree = rng.gen_range(r.smoothing.0..=r.smoothing.1);
            ShapeParams::Voronoi(VoronoiParams { n_holes, wall_thickness: wall, smoothing_degree, seed: rng.gen() })
        }
        Family::Lattice => {
            let r = &cfg.lattice_ranges;
            let n_holes = if p == Partition::Ood {
                r.ood_n_holes[rng.gen_range(0..r.ood_n_holes.len())]
            } else {
                rng.gen_range(r.n_holes.0..=r.n_holes.1)
            };
            let fits: Vec<usize> = r.lattice_n.iter().copied().filter(|&n| n * n >= n_holes).collect();
            let lattice_n = fits[rng.gen_range(0..fits.len())];
            ShapeParams::Lattice(LatticeParams {
                lattice_n,
                n_holes,
                side_count_range: r.side_count,
                smoothness_range: r.smoothness,
                size_range: r.size,
                min_wall: r.min_wall,
                seed: rng.gen(),
            })
        }
    }
}

/// Deterministic list of samples to generate: families in order, then
/// partitions, then index.
pub fn plan(cfg: &DatasetConfig) -> Vec<SampleSpec> {
    let mut out = Vec::new();
    for f in Family::ALL {
        let sizes = cfg.sizes(f);
        for p in Partition::ALL {
            for i in 0..sizes.get(p) {
                let seed = sample_seed(cfg.seed, f, p, i);
                out.push(SampleSpec {
                    id: format!("{}-{}-{:05}", f.name(), p.name(), i),
                    family: f,
                    partition: p,
                    params: draw_params(cfg, f, p, seed),
                });
            }
        }
    }
    out
}

/// A generated shape with its mesh, input grid, and any solved fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub spec: SampleSpec,
    pub shape: Shape,
    pub mesh: Mesh,
    pub sdf: SdfGrid,
    pub fields: BTreeMap<Problem, NodalField>,
}

impl Sample {
    pub fn points(&self) -> Vec<[f64; 2]> {
        self.mesh.nodes.iter().map(|p| p.to_array()).collect()
    }
}

pub fn build_sample(spec: &SampleSpec, h_max: f64, grid: usize) -> Result<Sample, DatasetError> {
    let shape = spec.params.generate().map_err(|e| DatasetError::Geometry { id: spec.id.clone(), source: e })?;
    let mesh = triangulate(&shape, h_max).map_err(|e| DatasetError::Mesh { id: spec.id.clone(), source: e })?;
    let sdf = sample_sdf(&shape, grid)?;
    Ok(Sample { spec: spec.clone(), shape, mesh, sdf, fields: BTreeMap::new() })
}

/// Generate every planned sample. Results keep plan order regardless of
/// how many threads the current rayon pool has.
pub fn generate(cfg: &DatasetConfig) -> Result<Vec<Sample>, DatasetError> {
    cfg.validate()?;
    plan(cfg).par_iter().map(|s| build_sample(s, cfg.h_max, cfg.grid)).collect()
}

/// Solve `problem` on every sample's own mesh, in parallel. Failures are
/// returned per sample.
pub fn solve_all(samples: &mut [Sample], problem: Problem, fem: &FemConfig) -> Vec<(String, FemError)> {
    let results: Vec<Result<NodalField, FemError>> = samples.par_iter().map(|s| solve_on(problem, &s.mesh, fem)).collect();
    let mut failed = Vec::new();
    for (s, r) in samples.iter_mut().zip(results) {
        match r {
            Ok(f) => {
                s.fields.insert(problem, f);
            }
            Err(e) => failed.push((s.spec.id.clone(), e)),
        }
    }
    failed
}

pub fn select(samples: &[Sample], partition: Partition) -> Vec<&Sample> {
    samples.iter().filter(|s| s.spec.partition == partition).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetConfig {
        let s = PartitionSizes { train: 3, test: 1, ood: 2 };
        DatasetConfig { voronoi: s, lattice: s, ..DatasetConfig::desk_combined(5) }
    }

    #[test]
    fn plan_is_deterministic_and_sized() {
        let cfg = tiny();
        let a = plan(&cfg);
        assert_eq!(a.len(), 12);
        assert_eq!(a, plan(&cfg));
        let other = plan(&DatasetConfig { seed: 6, ..cfg });
        assert_ne!(a[0].params, other[0].params);
    }

    #[test]
    fn parameters_respect_ranges() {
        let cfg = DatasetConfig::desk_combined(1);
        for s in plan(&cfg) {
            match (&s.params, s.partition) {
                (ShapeParams::Voronoi(v), Partition::Ood) => {
                    assert!((0.06..0.10).contains(&v.wall_thickness) || (v.wall_thickness > 0.18 && v.wall_thickness <= 0.22));
                }
                (ShapeParams::Voronoi(v), _) => {
                    assert!((0.10..=0.18).contains(&v.wall_thickness));
                    assert!((3..=4).contains(&v.n_holes) && (1..=20).contains(&v.smoothing_degree));
                }
                (ShapeParams::Lattice(l), Partition::Ood) => {
                    assert!([2, 3, 9, 10].contains(&l.n_holes));
                    assert!(l.n_holes <= l.lattice_n * l.lattice_n);
                }
                (ShapeParams::Lattice(l), _) => {
                    assert!((4..=8).contains(&l.n_holes) && [3, 4].contains(&l.lattice_n));
                }
            }
        }
    }

    #[test]
    fn generate_and_solve_small_set() {
        let mut samples = generate(&tiny()).unwrap();
        assert_eq!(samples.len(), 12);
        assert!(solve_all(&mut samples, Problem::Temperature, &FemConfig::default()).is_empty());
        for s in &samples {
            assert_eq!(s.fields[&Problem::Temperature].values.len(), s.mesh.n_nodes());
        }
        assert_eq!(select(&samples, Partition::Ood).len(), 4);
    }

    #[test]
    fn bad_config_rejected() {
        let mut cfg = tiny();
        cfg.lattice_ranges.ood_n_holes = vec![17];
        assert!(matches!(cfg.validate(), Err(DatasetError::Config(_))));
    }
}
