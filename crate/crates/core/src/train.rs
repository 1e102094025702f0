//! Training loop: one shape per Adam step, MSE over all of the shape's nodes.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sample;
use crate::fem::{solve_on, FemConfig, FemError, Problem};
use crate::meshgen::{triangulate, MeshError};
use crate::model::{init_params, Architecture, ModelError, ModelParams};
use crate::scalar::Real;
use crate::sdf::{sample_sdf, SdfError, SdfGrid};
use crate::tensor::{Adam, AdamState, Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("sample {0} has no {1} field")]
    MissingField(String, &'static str),
    #[error("sample {id}: field has {found} values for {expected} nodes")]
    FieldLength { id: String, expected: usize, found: usize },
    #[error("cannot normalize: {0}")]
    Normalization(String),
    #[error("loss diverged to {loss} at epoch {epoch} on shape {shape}")]
    Divergence { epoch: usize, shape: String, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(format!("unknown precision '{}', expected f32 or f64", s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub field: Problem,
    pub model: Architecture,
    #[serde(default)]
    pub precision: Precision,
    /// Use this target scale instead of the training-set standard deviation.
    #[serde(default)]
    pub fixed_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 1e-3,
            seed: 0,
            field: Problem::Stress,
            model: Architecture::default(),
            precision: Precision::F32,
            fixed_scale: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(s) = self.fixed_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(TrainError::Config(format!("fixed_scale must be positive, got {}", s)));
            }
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Model input and target for one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub sdf: SdfGrid,
    pub points: Vec<[f64; 2]>,
    pub target: Vec<f64>,
}

impl TrainSample {
    pub fn from_sample(s: &Sample, problem: Problem) -> Result<Self, TrainError> {
        let field = s.fields.get(&problem).ok_or_else(|| TrainError::MissingField(s.spec.id.clone(), problem.name()))?;
        if field.values.len() != s.mesh.n_nodes() {
            return Err(TrainError::FieldLength { id: s.spec.id.clone(), expected: s.mesh.n_nodes(), found: field.values.len() });
        }
        Ok(TrainSample { id: s.spec.id.clone(), sdf: s.sdf.clone(), points: s.points(), target: field.values.clone() })
    }

    pub fn from_samples(samples: &[&Sample], problem: Problem) -> Result<Vec<Self>, TrainError> {
        samples.iter().map(|s| Self::from_sample(s, problem)).collect()
    }
}

/// Population standard deviation of every target value in the set.
pub fn field_normalization(set: &[TrainSample]) -> Result<f64, TrainError> {
    let n: usize = set.iter().map(|s| s.target.len()).sum();
    if n == 0 {
        return Err(TrainError::Normalization("no field values".into()));
    }
    let mean = set.iter().flat_map(|s| &s.target).sum::<f64>() / n as f64;
    let var = set.iter().flat_map(|s| &s.target).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if !(std > 0.0 && std.is_finite()) {
        return Err(TrainError::Normalization(format!("field standard deviation is {}", std)));
    }
    Ok(std)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,seconds\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| format!("{:e}", v)).unwrap_or_default();
            s.push_str(&format!("{},{:e},{},{:.3}\n", e.epoch, e.train_loss, val, e.seconds));
        }
        s
    }
}

/// Parameters held at the precision they run at.
#[derive(Debug, Clone, PartialEq)]
enum Runtime {
    F32(ModelParams<f32>),
    F64(ModelParams<f64>),
}

/// A trained network together with its target scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub scale: f64,
    runtime: Runtime,
}

impl TrainedModel {
    /// Parameters are stored as f64 and narrowed if `config.precision` is f32.
    pub fn new(config: TrainConfig, scale: f64, params: ModelParams<f64>) -> Self {
        let runtime = match config.precision {
            Precision::F32 => Runtime::F32(params.cast()),
            Precision::F64 => Runtime::F64(params),
        };
        TrainedModel { config, scale, runtime }
    }

    pub fn params(&self) -> ModelParams<f64> {
        match &self.runtime {
            Runtime::F32(p) => p.cast(),
            Runtime::F64(p) => p.clone(),
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.config.model
    }

    pub fn param_count(&self) -> usize {
        self.config.model.param_count()
    }

    /// Predictions in field units, one per point.
    pub fn predict(&self, sdf: &SdfGrid, points: &[[f64; 2]]) -> Result<Vec<f64>, ModelError> {
        self.predict_normalized(sdf, points).map(|v| v.into_iter().map(|x| x * self.scale).collect())
    }

    fn predict_normalized(&self, sdf: &SdfGrid, points: &[[f64; 2]]) -> Result<Vec<f64>, ModelError> {
        Ok(match &self.runtime {
            Runtime::F32(p) => p.predict(&sdf.to_tensor(), points)?.into_iter().map(|v| v as f64).collect(),
            Runtime::F64(p) => p.predict(&sdf.to_tensor(), points)?,
        })
    }

    /// Mean over shapes of the per-shape MSE in normalized units.
    pub fn mean_loss(&self, set: &[TrainSample]) -> Result<f64, ModelError> {
        let losses: Vec<f64> = set
            .par_iter()
            .map(|s| {
                let p = self.predict_normalized(&s.sdf, &s.points)?;
                Ok(mse(&p, &s.target, self.scale))
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }
}

fn mse(pred: &[f64], target: &[f64], scale: f64) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t / scale).powi(2)).sum::<f64>() / pred.len() as f64
}

/// Train from scratch. Sequential and deterministic for a given config.
pub fn train(
    config: &TrainConfig,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
) -> Result<(TrainedModel, TrainReport), TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let scale = match config.fixed_scale {
        Some(s) => s,
        None => field_normalization(train_set)?,
    };
    match config.precision {
        Precision::F32 => train_typed::<f32>(config, scale, train_set, val_set),
        Precision::F64 => train_typed::<f64>(config, scale, train_set, val_set),
    }
}

struct Prepared<T> {
    sdf: Tensor<T>,
    target: Vec<T>,
}

fn train_typed<T: Real>(
    config: &TrainConfig,
    scale: f64,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
) -> Result<(TrainedModel, TrainReport), TrainError> {
    let grid = config.model.input_grid();
    for s in train_set.iter().chain(val_set) {
        if s.sdf.n() != grid {
            return Err(TrainError::Config(format!("sample {} has a {}-grid, model expects {}", s.id, s.sdf.n(), grid)));
        }
        if s.points.len() != s.target.len() || s.points.is_empty() {
            return Err(TrainError::FieldLength { id: s.id.clone(), expected: s.points.len(), found: s.target.len() });
        }
    }
    let prepared: Vec<Prepared<T>> = train_set
        .iter()
        .map(|s| Prepared { sdf: s.sdf.to_tensor(), target: s.target.iter().map(|&v| T::from_f64(v / scale)).collect() })
        .collect();

    let mut params = init_params::<T>(&config.model, config.seed)?;
    let adam = Adam::with_lr(config.lr);
    let mut state = AdamState::new(&params.tensors.iter().collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4500);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let p = &prepared[i];
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, true);
            let x = tape.constant(p.sdf.clone());
            let out = params.forward(&mut tape, &vars, x, &train_set[i].points, true)?;
            let loss = tape.mse_loss(out, &p.target)?;
            let l = tape.value(loss).data()[0].to_f64();
            if !l.is_finite() {
                return Err(TrainError::Divergence { epoch, shape: train_set[i].id.clone(), loss: l });
            }
            total += l;
            let grads = tape.backward(loss)?;
            let g: Vec<Vec<T>> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
            let mut refs: Vec<&mut Tensor<T>> = params.tensors.iter_mut().collect();
            adam.step(&mut refs, &g, &mut state)?;
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = if val_set.is_empty() {
            None
        } else {
            let snapshot = TrainedModel::new(config.clone(), scale, params.cast());
            Some(snapshot.mean_loss(val_set)?)
        };
        let seconds = start.elapsed().as_secs_f64();
        log::info!(
            "epoch {}/{} train {:.5} val {} ({:.1}s)",
            epoch,
            config.epochs,
            train_loss,
            val_loss.map(|v| format!("{:.5}", v)).unwrap_or_else(|| "-".into()),
            seconds
        );
        report.epochs.push(EpochRecord { epoch, train_loss, val_loss, seconds });
    }
    Ok((TrainedModel::new(config.clone(), scale, params.cast()), report))
}

#[derive(Debug, Error)]
pub enum SpeedupError {
    #[error("no shapes to time; ratio undefined")]
    Empty,
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Sdf(#[from] SdfError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("could not build a single-thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub n_shapes: usize,
    pub n_nodes: usize,
    /// Seconds to mesh and solve every shape.
    pub t_fem: f64,
    /// Seconds to sample the SDF and run the network at every mesh node.
    pub t_model: f64,
    pub ratio: f64,
}

/// Wall-clock comparison on one thread. Each side starts from the shape:
/// the solver has to mesh and solve, the model has to sample its input grid
/// and predict at the same nodes.
pub fn measure_speedup(
    model: &TrainedModel,
    samples: &[&Sample],
    fem: &FemConfig,
) -> Result<SpeedupReport, SpeedupError> {
    if samples.is_empty() {
        return Err(SpeedupError::Empty);
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| SpeedupError::Pool(e.to_string()))?;
    let problem = model.config.field;
    let grid = model.arch().input_grid();
    pool.install(|| {
        let mut t_fem = 0.0;
        let mut t_model = 0.0;
        let mut n_nodes = 0;
        for s in samples {
            let start = Instant::now();
            let mesh = triangulate(&s.shape, fem.h_max)?;
            let field = solve_on(problem, &mesh, fem)?;
            t_fem += start.elapsed().as_secs_f64();
            std::hint::black_box(&field);

            let points = s.points();
            let start = Instant::now();
            let sdf = sample_sdf(&s.shape, grid)?;
            let pred = model.predict(&sdf, &points)?;
            t_model += start.elapsed().as_secs_f64();
            std::hint::black_box(&pred);
            n_nodes += points.len();
        }
        Ok(SpeedupReport { n_shapes: samples.len(), n_nodes, t_fem, t_model, ratio: t_fem / t_model })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_sample, plan, DatasetConfig};
    use crate::model::MrCnnConfig;

    fn toy_set(n: usize, mult: f64) -> Vec<TrainSample> {
        (0..n)
            .map(|k| {
                let grid = 16;
                let sdf = SdfGrid::new(grid, (0..grid * grid).map(|i| ((i + k) % 7) as f64 * 0.05 - 0.1).collect()).unwrap();
                let points: Vec<[f64; 2]> = (0..40).map(|i| [(i % 8) as f64 / 7.0, (i / 8) as f64 / 4.0]).collect();
                let target = points.iter().map(|p| mult * (1.0 + p[0] * p[1] + 0.3 * k as f64)).collect();
                TrainSample { id: format!("toy{}", k), sdf, points, target }
            })
            .collect()
    }

    fn small_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            lr: 1e-3,
            seed: 3,
            field: Problem::Stress,
            model: Architecture::Mrcnn(MrCnnConfig { levels: 2, channels: 4, kernel: 3, mlp_hidden: vec![16, 16], input_grid: 16 }),
            precision: Precision::F64,
            fixed_scale: None,
        }
    }

    #[test]
    fn report_has_one_entry_per_epoch() {
        let set = toy_set(3, 1.0);
        let (_, report) = train(&small_config(3), &set, &set[..1]).unwrap();
        assert_eq!(report.epochs.len(), 3);
        assert!(report.epochs.iter().all(|e| e.val_loss.is_some()));
        assert_eq!(report.to_csv().lines().count(), 4);
    }

    #[test]
    fn single_shape_overfits() {
        let mut s = build_sample(&plan(&DatasetConfig::desk_combined(11))[0], 0.025, 64).unwrap();
        let field = solve_on(Problem::Stress, &s.mesh, &FemConfig::default()).unwrap();
        s.fields.insert(Problem::Stress, field);
        let set = vec![TrainSample::from_sample(&s, Problem::Stress).unwrap()];
        let cfg = TrainConfig { epochs: 200, seed: 1, ..TrainConfig::default() };
        let (_, report) = train(&cfg, &set, &[]).unwrap();
        let l = report.train_losses();
        assert!(l[199] <= 0.01 * l[0], "first {} last {}", l[0], l[199]);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let set = toy_set(4, 1.0);
        let cfg = TrainConfig { precision: Precision::F32, ..small_config(2) };
        let (a, ra) = train(&cfg, &set, &[]).unwrap();
        let (b, rb) = train(&cfg, &set, &[]).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ra.train_losses(), rb.train_losses());
    }

    #[test]
    fn normalization_errors_and_scaling() {
        let mut zeros = toy_set(2, 1.0);
        for s in &mut zeros {
            s.target.iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(matches!(field_normalization(&zeros), Err(TrainError::Normalization(_))));
        assert!(matches!(train(&small_config(1), &zeros, &[]), Err(TrainError::Normalization(_))));

        let base = toy_set(5, 1.0);
        let big = toy_set(5, 10.0);
        let s1 = field_normalization(&base).unwrap();
        let s10 = field_normalization(&big).unwrap();
        assert!((s10 / s1 - 10.0).abs() < 1e-12);
        let (m1, _) = train(&small_config(3), &base, &[]).unwrap();
        let (m10, _) = train(&small_config(3), &big, &[]).unwrap();
        let p1 = m1.predict(&base[0].sdf, &base[0].points).unwrap();
        let p10 = m10.predict(&big[0].sdf, &big[0].points).unwrap();
        for (a, b) in p1.iter().zip(&p10) {
            assert!((b - 10.0 * a).abs() <= 1e-9 * b.abs().max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn fixed_unit_scale_is_identity() {
        let set = toy_set(2, 1.0);
        let (m, _) = train(&TrainConfig { fixed_scale: Some(1.0), ..small_config(1) }, &set, &[]).unwrap();
        assert_eq!(m.scale, 1.0);
        let raw = match &m.runtime {
            Runtime::F64(p) => p.predict(&set[0].sdf.to_tensor(), &set[0].points).unwrap(),
            Runtime::F32(_) => unreachable!(),
        };
        assert_eq!(m.predict(&set[0].sdf, &set[0].points).unwrap(), raw);
    }

    #[test]
    fn reported_loss_matches_direct_mse() {
        let set = toy_set(3, 1.0);
        let (m, _) = train(&small_config(2), &set, &[]).unwrap();
        let mut expected = 0.0;
        for s in &set {
            let p = m.predict(&s.sdf, &s.points).unwrap();
            let n = p.len() as f64;
            expected += p.iter().zip(&s.target).map(|(a, b)| ((a - b) / m.scale).powi(2)).sum::<f64>() / n;
        }
        expected /= set.len() as f64;
        let got = m.mean_loss(&set).unwrap();
        assert!((got - expected).abs() <= 1e-10 * expected, "{} vs {}", got, expected);
    }

    #[test]
    fn every_tensor_moves_after_one_step() {
        let set = toy_set(1, 1.0);
        let cfg = small_config(1);
        let before = init_params::<f64>(&cfg.model, cfg.seed).unwrap();
        let (m, _) = train(&cfg, &set, &[]).unwrap();
        let after = m.params();
        for ((name, a), b) in before.names.iter().zip(&before.tensors).zip(&after.tensors) {
            assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y), "{} did not change", name);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(train(&small_config(1), &[], &[]), Err(TrainError::EmptyTrainSet)));
        let set = toy_set(1, 1.0);
        assert!(matches!(train(&small_config(0), &set, &[]), Err(TrainError::Config(_))));
        assert!(matches!(train(&TrainConfig { lr: 0.0, ..small_config(1) }, &set, &[]), Err(TrainError::Config(_))));
        let mut nan = toy_set(1, 1.0);
        nan[0].target[0] = f64::NAN;
        assert!(train(&TrainConfig { fixed_scale: Some(1.0), ..small_config(1) }, &nan, &[]).is_err());
    }
}
