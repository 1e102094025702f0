//! On-disk formats.
//!
//! Every binary file is little-endian and laid out as
//!
//! ```text
//! 0   magic     [u8; 8]
//! 8   version   u32
//! 12  reserved  u32 (zero)
//! 16  dim0      u64
//! 24  dim1      u64
//! 32  payload
//! end sha256 of everything before it, 32 bytes
//! ```
//!
//! | magic      | dim0          | dim1                           | payload |
//! |------------|---------------|--------------------------------|---------|
//! | `FNGRID\0\0` | n           | n                              | n·n f64, row-major |
//! | `FNFIELD\0`  | value count | problem code + 256·units code  | f64 values |
//! | `FNSAMPL\0`  | node count  | triangle count                 | see [`encode_sample`] |
//! | `FNCKPT\0\0` | tensor count| batch-norm layer count         | see [`encode_checkpoint`] |
//!
//! Variable-length items inside payloads are prefixed with a u64 count.
//! A dataset is a directory holding `manifest.json`, `samples/<id>.fns`
//! and `fields/<problem>/<id>.fnf`; the manifest records a sha256 digest
//! for every file it indexes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{DatasetConfig, Family, Partition, Sample, SampleSpec};
use crate::fem::{FemConfig, NodalField, Problem, Units};
use crate::geometry::{Point, Polygon, Provenance, Shape};
use crate::meshgen::{BoundaryEdge, BoundaryTag, Mesh};
use crate::model::{Architecture, ModelParams};
use crate::sdf::SdfGrid;
use crate::tensor::{BnStats, Tensor};
use crate::train::{TrainConfig, TrainedModel};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
const HEADER: usize = 32;
const DIGEST: usize = 32;

pub const GRID_MAGIC: [u8; 8] = *b"FNGRID\0\0";
pub const FIELD_MAGIC: [u8; 8] = *b"FNFIELD\0";
pub const SAMPLE_MAGIC: [u8; 8] = *b"FNSAMPL\0";
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"FNCKPT\0\0";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },
    #[error("unsupported format version {found} (this build reads {expected})")]
    Version { expected: u32, found: u32 },
    #[error("digest mismatch in {0}")]
    Integrity(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("architecture mismatch: checkpoint is `{found}`, expected `{expected}`")]
    Architecture { expected: String, found: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, StoreError>;

fn fmt_err<T>(m: impl Into<String>) -> Result<T> {
    Err(StoreError::Format(m.into()))
}

/// Append-only little-endian encoder.
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: [u8; 8], dim0: u64, dim1: u64) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(&magic);
        w.u32(FORMAT_VERSION);
        w.u32(0);
        w.u64(dim0);
        w.u64(dim1);
        w
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    fn points(&mut self, pts: &[Point]) {
        self.u64(pts.len() as u64);
        for p in pts {
            self.f64(p.x);
            self.f64(p.y);
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

/// Bounds-checked decoder over a verified payload.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() - self.pos {
            return fmt_err(format!("truncated: need {} bytes at offset {}", n, self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A count of items of `item_size` bytes each, checked against the bytes left.
    fn count(&mut self, item_size: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.checked_mul(item_size as u64).is_none_or(|b| b > left) {
            return fmt_err(format!("count {} exceeds remaining {} bytes", n, left));
        }
        Ok(n as usize)
    }

    fn index(&mut self, bound: usize) -> Result<usize> {
        let v = self.u64()?;
        if v >= bound as u64 {
            return fmt_err(format!("index {} out of range {}", v, bound));
        }
        Ok(v as usize)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.count(1)?;
        self.take(n)
    }

    fn points(&mut self) -> Result<Vec<Point>> {
        let n = self.count(16)?;
        (0..n).map(|_| Ok(Point { x: self.f64()?, y: self.f64()? })).collect()
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return fmt_err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

/// Check magic, version and digest. Returns `(dim0, dim1, payload reader)`.
fn open(bytes: &[u8], magic: [u8; 8]) -> Result<(u64, u64, Reader<'_>)> {
    if bytes.len() < HEADER + DIGEST {
        return fmt_err(format!("{} bytes is shorter than header plus digest", bytes.len()));
    }
    if bytes[..8] != magic {
        return Err(StoreError::Magic {
            expected: String::from_utf8_lossy(&magic).into(),
            found: String::from_utf8_lossy(&bytes[..8]).into(),
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
    if Sha256::digest(body).as_slice() != digest {
        return Err(StoreError::Integrity(String::from_utf8_lossy(&magic).trim_end_matches('\0').to_string()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(StoreError::Version { expected: FORMAT_VERSION, found: version });
    }
    let dim0 = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let dim1 = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
    Ok((dim0, dim1, Reader { buf: body, pos: HEADER }))
}

pub fn encode_grid(g: &SdfGrid) -> Vec<u8> {
    let mut w = Writer::new(GRID_MAGIC, g.n() as u64, g.n() as u64);
    for &v in g.values() {
        w.f64(v);
    }
    w.finish()
}

pub fn decode_grid(bytes: &[u8]) -> Result<SdfGrid> {
    let (n0, n1, mut r) = open(bytes, GRID_MAGIC)?;
    if n0 != n1 {
        return fmt_err(format!("grid is {}x{}, expected square", n0, n1));
    }
    let g = read_grid_values(&mut r, n0)?;
    r.done()?;
    Ok(g)
}

fn read_grid_values(r: &mut Reader, n: u64) -> Result<SdfGrid> {
    let cells = n.checked_mul(n).filter(|&c| c <= ((r.buf.len() - r.pos) / 8) as u64);
    let Some(cells) = cells else { return fmt_err(format!("grid size {} exceeds the data", n)) };
    let values = (0..cells).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    SdfGrid::new(n as usize, values).map_err(|e| StoreError::Format(e.to_string()))
}

fn problem_code(p: Problem) -> u64 {
    match p {
        Problem::Stress => 0,
        Problem::Temperature => 1,
    }
}

fn units_code(u: Units) -> u64 {
    match u {
        Units::Pa => 0,
        Units::Celsius => 1,
        Units::Dimensionless => 2,
    }
}

pub fn encode_field(f: &NodalField) -> Vec<u8> {
    let mut w = Writer::new(FIELD_MAGIC, f.values.len() as u64, problem_code(f.problem) + 256 * units_code(f.units));
    for &v in &f.values {
        w.f64(v);
    }
    w.finish()
}

pub fn decode_field(bytes: &[u8]) -> Result<NodalField> {
    let (n, tag, mut r) = open(bytes, FIELD_MAGIC)?;
    let problem = match tag % 256 {
        0 => Problem::Stress,
        1 => Problem::Temperature,
        c => return fmt_err(format!("unknown problem code {}", c)),
    };
    let units = match tag / 256 {
        0 => Units::Pa,
        1 => Units::Celsius,
        2 => Units::Dimensionless,
        c => return fmt_err(format!("unknown units code {}", c)),
    };
    if n > ((r.buf.len() - r.pos) / 8) as u64 {
        return fmt_err(format!("field claims {} values", n));
    }
    let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    r.done()?;
    Ok(NodalField { values, units, problem })
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    spec: SampleSpec,
    provenance: Provenance,
}

/// Sample payload, in order: JSON metadata (spec and shape provenance) as
/// length-prefixed UTF-8; the outer loop and each hole as point lists
/// preceded by the hole count; mesh `h_max`, nodes, triangles (3 u64 each)
/// and boundary edges (2 u64 nodes, u64 tag); SDF grid size and values.
/// Solved fields are stored in their own files.
pub fn encode_sample(s: &Sample) -> Result<Vec<u8>> {
    let mut w = Writer::new(SAMPLE_MAGIC, s.mesh.nodes.len() as u64, s.mesh.tris.len() as u64);
    let meta = serde_json::to_vec(&SampleMeta { spec: s.spec.clone(), provenance: s.shape.provenance.clone() })?;
    w.bytes(&meta);
    w.points(s.shape.outer.vertices());
    w.u64(s.shape.holes.len() as u64);
    for h in &s.shape.holes {
        w.points(h.vertices());
    }
    w.f64(s.mesh.h_max);
    w.points(&s.mesh.nodes);
    for t in &s.mesh.tris {
        for &v in t {
            w.u64(v as u64);
        }
    }
    w.u64(s.mesh.boundary.len() as u64);
    for e in &s.mesh.boundary {
        w.u64(e.nodes[0] as u64);
        w.u64(e.nodes[1] as u64);
        w.u64(e.tag.code() as u64);
    }
    w.u64(s.sdf.n() as u64);
    for &v in s.sdf.values() {
        w.f64(v);
    }
    Ok(w.finish())
}

fn polygon(pts: Vec<Point>) -> Result<Polygon> {
    let p = Polygon::new(pts.clone()).map_err(|e| StoreError::Format(e.to_string()))?;
    if p.vertices() != pts.as_slice() {
        return fmt_err("polygon is not counter-clockwise");
    }
    Ok(p)
}

/// Decode a sample bundle and check the mesh invariants. `fields` is empty.
pub fn decode_sample(bytes: &[u8]) -> Result<Sample> {
    let (n_nodes, n_tris, mut r) = open(bytes, SAMPLE_MAGIC)?;
    let meta: SampleMeta = serde_json::from_slice(r.bytes()?)?;
    let outer = polygon(r.points()?)?;
    let n_holes = r.count(8)?;
    let holes = (0..n_holes).map(|_| polygon(r.points()?)).collect::<Result<Vec<_>>>()?;
    let shape = Shape { outer, holes, provenance: meta.provenance };
    let h_max = r.f64()?;
    let nodes = r.points()?;
    if nodes.len() as u64 != n_nodes {
        return fmt_err(format!("header says {} nodes, payload has {}", n_nodes, nodes.len()));
    }
    if n_tris > ((r.buf.len() - r.pos) / 24) as u64 {
        return fmt_err(format!("header claims {} triangles", n_tris));
    }
    let n = nodes.len();
    let tris = (0..n_tris).map(|_| Ok([r.index(n)?, r.index(n)?, r.index(n)?])).collect::<Result<Vec<_>>>()?;
    let n_edges = r.count(24)?;
    let boundary = (0..n_edges)
        .map(|_| {
            let nodes = [r.index(n)?, r.index(n)?];
            let code = r.u64()?;
            let tag = u8::try_from(code).ok().and_then(BoundaryTag::from_code);
            let Some(tag) = tag else { return fmt_err(format!("unknown boundary tag {}", code)) };
            Ok(BoundaryEdge { nodes, tag })
        })
        .collect::<Result<Vec<_>>>()?;
    let mesh = Mesh { nodes, tris, boundary, h_max };
    mesh.validate().map_err(|e| StoreError::Format(e.to_string()))?;
    let g = r.u64()?;
    let sdf = read_grid_values(&mut r, g)?;
    r.done()?;
    Ok(Sample { spec: meta.spec, shape, mesh, sdf, fields: BTreeMap::new() })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| StoreError::Io { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, bytes).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        StoreError::Integrity(_) => StoreError::Integrity(path.display().to_string()),
        StoreError::Format(m) => StoreError::Format(format!("{}: {}", path.display(), m)),
        e => e,
    })
}

pub fn save_sample(path: &Path, s: &Sample) -> Result<()> {
    write(path, &encode_sample(s)?)
}

pub fn load_sample(path: &Path) -> Result<Sample> {
    with_path(path, decode_sample(&read(path)?))
}

pub fn save_field(path: &Path, f: &NodalField) -> Result<()> {
    write(path, &encode_field(f))
}

pub fn load_field(path: &Path) -> Result<NodalField> {
    with_path(path, decode_field(&read(path)?))
}

pub fn save_grid(path: &Path, g: &SdfGrid) -> Result<()> {
    write(path, &encode_grid(g))
}

pub fn load_grid(path: &Path) -> Result<SdfGrid> {
    with_path(path, decode_grid(&read(path)?))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{:02x}", b)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the dataset directory, `/`-separated.
    pub path: String,
    pub algorithm: String,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: String,
    pub family: Family,
    pub partition: Partition,
    pub bundle: String,
    pub fields: BTreeMap<Problem, String>,
}

/// Index of a dataset directory. Holds no timestamps, so identical inputs
/// give identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: String,
    pub config: DatasetConfig,
    /// Solver settings the stored fields were computed with.
    pub fem: Option<FemConfig>,
    pub samples: Vec<ManifestSample>,
    pub files: Vec<FileEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn sizes(&self) -> BTreeMap<(Family, Partition), usize> {
        let mut m = BTreeMap::new();
        for s in &self.samples {
            *m.entry((s.family, s.partition)).or_insert(0) += 1;
        }
        m
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_slice(bytes)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(StoreError::Version { expected: MANIFEST_VERSION, found: m.format_version });
        }
        let listed: std::collections::BTreeSet<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
        for s in &m.samples {
            for p in std::iter::once(&s.bundle).chain(s.fields.values()) {
                if !listed.contains(p.as_str()) {
                    return fmt_err(format!("sample {} refers to unindexed file {}", s.id, p));
                }
            }
        }
        for f in &m.files {
            if !safe_relative(&f.path) {
                return fmt_err(format!("unsafe path {}", f.path));
            }
            if f.algorithm != "sha256" {
                return fmt_err(format!("unknown digest algorithm {}", f.algorithm));
            }
        }
        Ok(m)
    }

    pub fn digest(&self, path: &str) -> Option<&str> {
        self.files.iter().find(|f| f.path == path).map(|f| f.digest.as_str())
    }
}

/// No absolute paths, no `..`, no empty components.
fn safe_relative(p: &str) -> bool {
    !p.is_empty() && !p.starts_with('/') && p.split('/').all(|c| !c.is_empty() && c != "." && c != ".." && !c.contains('\\'))
}

fn bundle_path(id: &str) -> String {
    format!("samples/{}.fns", id)
}

fn field_path(problem: Problem, id: &str) -> String {
    format!("fields/{}/{}.fnf", problem.name(), id)
}

/// Write every sample bundle and field plus the manifest.
pub fn save_dataset(dir: &Path, config: &DatasetConfig, fem: Option<&FemConfig>, samples: &[Sample]) -> Result<DatasetManifest> {
    let mut files = Vec::new();
    let mut entries = Vec::new();
    let mut put = |rel: String, bytes: Vec<u8>| -> Result<String> {
        write(&dir.join(&rel), &bytes)?;
        files.push(FileEntry { path: rel.clone(), algorithm: "sha256".into(), digest: sha256_hex(&bytes) });
        Ok(rel)
    };
    for s in samples {
        let id = &s.spec.id;
        if !safe_relative(id) || id.contains('/') {
            return fmt_err(format!("sample id {:?} is not a plain file name", id));
        }
        let bundle = put(bundle_path(id), encode_sample(s)?)?;
        let mut fields = BTreeMap::new();
        for (&p, f) in &s.fields {
            fields.insert(p, put(field_path(p, id), encode_field(f))?);
        }
        entries.push(ManifestSample { id: id.clone(), family: s.spec.family, partition: s.spec.partition, bundle, fields });
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        name: config.name.clone(),
        config: config.clone(),
        fem: fem.copied(),
        samples: entries,
        files,
    };
    write(&dir.join(MANIFEST_FILE), &manifest.to_json()?)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    with_path(&path, DatasetManifest::from_json(&read(&path)?))
}

fn read_verified(dir: &Path, m: &DatasetManifest, rel: &str) -> Result<Vec<u8>> {
    let path = dir.join(rel);
    let bytes = read(&path)?;
    match m.digest(rel) {
        Some(d) if d == sha256_hex(&bytes) => Ok(bytes),
        _ => Err(StoreError::Integrity(path.display().to_string())),
    }
}

/// Load every sample and field, checking each file against its digest.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let m = load_manifest(dir)?;
    let mut samples = Vec::with_capacity(m.samples.len());
    for e in &m.samples {
        let path = dir.join(&e.bundle);
        let mut s = with_path(&path, decode_sample(&read_verified(dir, &m, &e.bundle)?))?;
        if s.spec.id != e.id {
            return fmt_err(format!("{} holds sample {}, manifest says {}", path.display(), s.spec.id, e.id));
        }
        for (&p, rel) in &e.fields {
            let path = dir.join(rel);
            let f = with_path(&path, decode_field(&read_verified(dir, &m, rel)?))?;
            if f.problem != p || f.values.len() != s.mesh.n_nodes() {
                return fmt_err(format!("{} does not match its sample mesh", path.display()));
            }
            s.fields.insert(p, f);
        }
        samples.push(s);
    }
    Ok((m, samples))
}

/// Recompute every indexed digest. Returns the paths that are missing or differ.
pub fn verify_dataset(dir: &Path, m: &DatasetManifest) -> Vec<String> {
    m.files
        .iter()
        .filter(|f| fs::read(dir.join(&f.path)).map_or(true, |b| sha256_hex(&b) != f.digest))
        .map(|f| f.path.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    fingerprint: String,
    config: TrainConfig,
}

/// Checkpoint payload: JSON metadata (fingerprint and training config);
/// the target scale as f64; per tensor a UTF-8 name, rank, dims and f64
/// values; per batch-norm layer the running means then variances.
pub fn encode_checkpoint(model: &TrainedModel) -> Result<Vec<u8>> {
    let params = model.params();
    let mut w = Writer::new(CHECKPOINT_MAGIC, params.tensors.len() as u64, params.bn_stats.len() as u64);
    let meta = CheckpointMeta { fingerprint: model.arch().fingerprint(), config: model.config.clone() };
    w.bytes(&serde_json::to_vec(&meta)?);
    w.f64(model.scale);
    for (name, t) in params.names.iter().zip(&params.tensors) {
        w.bytes(name.as_bytes());
        w.u64(t.shape().len() as u64);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        w.f64s(t.data());
    }
    for s in &params.bn_stats {
        w.f64s(&s.mean);
        w.f64s(&s.var);
    }
    Ok(w.finish())
}

/// Decode a checkpoint and check it against its own recorded architecture.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainedModel> {
    let (n_tensors, n_bn, mut r) = open(bytes, CHECKPOINT_MAGIC)?;
    let meta: CheckpointMeta = serde_json::from_slice(r.bytes()?)?;
    let arch: &Architecture = &meta.config.model;
    arch.validate().map_err(|e| StoreError::Format(e.to_string()))?;
    if arch.fingerprint() != meta.fingerprint {
        return Err(StoreError::Architecture { expected: arch.fingerprint(), found: meta.fingerprint });
    }
    let scale = r.f64()?;
    if !(scale > 0.0 && scale.is_finite()) {
        return fmt_err(format!("scale {}", scale));
    }
    let specs = arch.param_specs();
    let bn_channels = arch.bn_channels();
    if n_tensors != specs.len() as u64 || n_bn != bn_channels.len() as u64 {
        return fmt_err(format!("{} tensors and {} norm layers do not fit the architecture", n_tensors, n_bn));
    }
    let mut names = Vec::with_capacity(specs.len());
    let mut tensors = Vec::with_capacity(specs.len());
    for spec in &specs {
        let name = std::str::from_utf8(r.bytes()?).map_err(|_| StoreError::Format("tensor name is not UTF-8".into()))?;
        let rank = r.count(8)?;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if name != spec.name || shape != spec.shape {
            return fmt_err(format!("tensor {} {:?} where {} {:?} was expected", name, shape, spec.name, spec.shape));
        }
        let data = r.f64s()?;
        let t = Tensor::new(shape, data).map_err(|e| StoreError::Format(e.to_string()))?;
        names.push(name.to_string());
        tensors.push(t);
    }
    let mut bn_stats = Vec::with_capacity(bn_channels.len());
    for &c in &bn_channels {
        let (mean, var) = (r.f64s()?, r.f64s()?);
        if mean.len() != c || var.len() != c {
            return fmt_err("batch-norm statistics have the wrong width");
        }
        bn_stats.push(BnStats { mean, var });
    }
    r.done()?;
    let params = ModelParams { arch: arch.clone(), names, tensors, bn_stats };
    Ok(TrainedModel::new(meta.config, scale, params))
}

pub fn save_checkpoint(path: &Path, model: &TrainedModel) -> Result<()> {
    write(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    with_path(path, decode_checkpoint(&read(path)?))
}

/// Load a checkpoint that must have been trained with `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &Architecture) -> Result<TrainedModel> {
    let model = load_checkpoint(path)?;
    if model.arch().fingerprint() != expected.fingerprint() {
        return Err(StoreError::Architecture { expected: expected.fingerprint(), found: model.arch().fingerprint() });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_sample, plan, solve_all};
    use crate::model::{init_params, MrCnnConfig, UNetConfig};
    use crate::train::Precision;
    use proptest::prelude::*;

    fn small_config() -> DatasetConfig {
        let one = crate::dataset::PartitionSizes { train: 2, test: 1, ood: 1 };
        DatasetConfig { voronoi: one, lattice: one, h_max: 0.1, grid: 16, ..DatasetConfig::desk_combined(3) }
    }

    fn samples() -> Vec<Sample> {
        let cfg = small_config();
        let mut s: Vec<Sample> = plan(&cfg).iter().map(|p| build_sample(p, cfg.h_max, cfg.grid).unwrap()).collect();
        assert!(solve_all(&mut s, Problem::Stress, &FemConfig::default()).is_empty());
        s
    }

    #[test]
    fn sample_round_trip_is_byte_identical() {
        for s in samples() {
            let bytes = encode_sample(&s).unwrap();
            let back = decode_sample(&bytes).unwrap();
            assert_eq!(back.shape, s.shape);
            assert_eq!(back.mesh, s.mesh);
            assert_eq!(back.sdf, s.sdf);
            assert_eq!(back.spec, s.spec);
            assert_eq!(encode_sample(&back).unwrap(), bytes);
            let f = &s.fields[&Problem::Stress];
            let fb = encode_field(f);
            assert_eq!(&decode_field(&fb).unwrap(), f);
        }
    }

    #[test]
    fn header_layout() {
        let g = SdfGrid::new(3, (0..9).map(|i| i as f64 - 4.5).collect()).unwrap();
        let b = encode_grid(&g);
        assert_eq!(b.len(), HEADER + 9 * 8 + DIGEST);
        assert_eq!(&b[..8], b"FNGRID\0\0");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(b[32..40].try_into().unwrap()), -4.5);
        assert_eq!(decode_grid(&b).unwrap(), g);
    }

    #[test]
    fn version_and_digest_errors() {
        let s = &samples()[0];
        let mut b = encode_sample(s).unwrap();
        b[8] += 1;
        // re-seal so only the version differs
        let n = b.len() - DIGEST;
        let d = Sha256::digest(&b[..n]);
        b[n..].copy_from_slice(&d);
        assert!(matches!(decode_sample(&b), Err(StoreError::Version { found: 2, .. })));

        let mut b = encode_sample(s).unwrap();
        b[HEADER + 40] ^= 0x10;
        assert!(matches!(decode_sample(&b), Err(StoreError::Integrity(_))));
        assert!(matches!(decode_grid(&b), Err(StoreError::Magic { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn any_single_bit_flip_is_detected(seed in 0usize..1000, bit in 0u8..8) {
            let f = NodalField { values: vec![1.5, -2.0, 3.25, 1e9], units: Units::Pa, problem: Problem::Stress };
            let mut b = encode_field(&f);
            let i = seed % b.len();
            b[i] ^= 1 << bit;
            prop_assert!(decode_field(&b).is_err());
        }

        #[test]
        fn decoders_never_panic(data in prop::collection::vec(any::<u8>(), 0..200)) {
            let _ = decode_grid(&data);
            let _ = decode_field(&data);
            let _ = decode_sample(&data);
            let _ = decode_checkpoint(&data);
        }
    }

    fn model(arch: Architecture, precision: Precision) -> TrainedModel {
        let config = TrainConfig { model: arch, precision, lr: 3e-4, fixed_scale: Some(1.0 / 3.0), ..TrainConfig::default() };
        let params = init_params(&config.model, 9).unwrap();
        TrainedModel::new(config, 123.456, params)
    }

    fn small_mrcnn() -> Architecture {
        Architecture::Mrcnn(MrCnnConfig { levels: 3, channels: 4, kernel: 3, mlp_hidden: vec![8, 8], input_grid: 16 })
    }

    #[test]
    fn checkpoint_round_trip() {
        let unet = Architecture::Unet(UNetConfig { enc_channels: vec![4, 6], kernel: 3, input_grid: 16 });
        for arch in [small_mrcnn(), unet] {
            for precision in [Precision::F32, Precision::F64] {
                let m = model(arch.clone(), precision);
                let b = encode_checkpoint(&m).unwrap();
                let back = decode_checkpoint(&b).unwrap();
                assert_eq!(back, m);
                assert_eq!(encode_checkpoint(&back).unwrap(), b);
                let sdf = SdfGrid::new(16, (0..256).map(|i| (i % 13) as f64 * 0.01).collect()).unwrap();
                let pts = [[0.1, 0.2], [0.7, 0.9]];
                let a = m.predict(&sdf, &pts).unwrap();
                let c = back.predict(&sdf, &pts).unwrap();
                assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), c.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn checkpoint_architecture_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fnc");
        save_checkpoint(&path, &model(small_mrcnn(), Precision::F32)).unwrap();
        assert!(load_checkpoint_for(&path, &small_mrcnn()).is_ok());
        let err = load_checkpoint_for(&path, &Architecture::Unet(UNetConfig::default())).unwrap_err();
        assert!(matches!(err, StoreError::Architecture { .. }));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let s = samples();
        let m = save_dataset(dir.path(), &cfg, Some(&FemConfig::default()), &s).unwrap();
        assert_eq!(m.files.len(), 2 * s.len());
        let (m2, s2) = load_dataset(dir.path()).unwrap();
        assert_eq!(m2, m);
        assert_eq!(s2, s);
        assert!(verify_dataset(dir.path(), &m).is_empty());
        let again = tempfile::tempdir().unwrap();
        save_dataset(again.path(), &cfg, Some(&FemConfig::default()), &s2).unwrap();
        assert_eq!(fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), fs::read(again.path().join(MANIFEST_FILE)).unwrap());

        let victim = dir.path().join(&m.samples[0].fields[&Problem::Stress]);
        let mut b = fs::read(&victim).unwrap();
        b[HEADER] ^= 1;
        fs::write(&victim, b).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(StoreError::Integrity(_))));
        assert_eq!(verify_dataset(dir.path(), &m).len(), 1);
    }

    #[test]
    fn manifest_rejects_escaping_paths() {
        assert!(safe_relative("samples/a.fns"));
        for p in ["", "/etc/passwd", "../x", "a//b", "a/./b", "a\\b"] {
            assert!(!safe_relative(p), "{}", p);
        }
    }
}
