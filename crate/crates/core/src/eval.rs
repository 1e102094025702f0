//! Goodness-of-fit metrics and the evaluation studies built on them.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Family, Partition, Sample};
use crate::fem::{solve_on, FemConfig, FemError, Problem};
use crate::geometry::Shape;
use crate::meshgen::{triangulate, Mesh, MeshError};
use crate::model::{Architecture, ModelError, MrCnnConfig};
use crate::sdf::{sample_sdf, SdfError};
use crate::train::{train, TrainConfig, TrainError, TrainSample, TrainedModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("R² is undefined for a constant truth field")]
    UndefinedR2,
    #[error("truth has {truth} values, prediction has {pred}")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("shape {id}: {source}")]
    Shape { id: String, source: Box<EvalError> },
    #[error("requested {requested} training shapes, only {available} available")]
    NotEnoughShapes { requested: usize, available: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Sdf(#[from] SdfError),
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> Result<f64, EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::LengthMismatch { truth: truth.len(), pred: pred.len() });
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if !(ss_tot > 0.0) {
        return Err(EvalError::UndefinedR2);
    }
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Order statistic at fraction `q` of a sorted slice, rounding the index down.
/// `q = 0.5` gives the lower-middle median.
pub fn order_statistic(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).floor() as usize;
    sorted[i]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub partition: Partition,
    /// Shape ids in sorted order, aligned with `r2`.
    pub ids: Vec<String>,
    pub r2: Vec<f64>,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

impl MetricsSummary {
    /// `pairs` are `(id, R²)` in any order.
    pub fn from_pairs(partition: Partition, mut pairs: Vec<(String, f64)>) -> Result<Self, EvalError> {
        if pairs.is_empty() {
            return Err(EvalError::Empty);
        }
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        let (ids, r2): (Vec<String>, Vec<f64>) = pairs.into_iter().unzip();
        let mut sorted = r2.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(MetricsSummary {
            partition,
            ids,
            median: order_statistic(&sorted, 0.5),
            q1: order_statistic(&sorted, 0.25),
            q3: order_statistic(&sorted, 0.75),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            r2,
        })
    }
}

/// Predicted against actual values at every node of one shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scatter {
    pub id: String,
    pub r2: f64,
    pub truth: Vec<f64>,
    pub pred: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionEval {
    pub summary: MetricsSummary,
    pub best: Scatter,
    pub median: Scatter,
    pub worst: Scatter,
}

fn predict_one(model: &TrainedModel, s: &TrainSample) -> Result<(f64, Vec<f64>), EvalError> {
    let wrap = |e: EvalError| EvalError::Shape { id: s.id.clone(), source: Box::new(e) };
    let pred = model.predict(&s.sdf, &s.points).map_err(|e| wrap(e.into()))?;
    let r2 = r_squared(&s.target, &pred).map_err(wrap)?;
    Ok((r2, pred))
}

/// Per-shape R² of de-normalized predictions, in parallel over shapes.
pub fn shape_r2(model: &TrainedModel, set: &[TrainSample]) -> Result<Vec<(String, f64)>, EvalError> {
    set.par_iter().map(|s| predict_one(model, s).map(|(r2, _)| (s.id.clone(), r2))).collect()
}

/// Summary statistics plus scatter data for the best, median and worst shapes.
pub fn evaluate_partition(model: &TrainedModel, set: &[TrainSample], partition: Partition) -> Result<PartitionEval, EvalError> {
    let summary = MetricsSummary::from_pairs(partition, shape_r2(model, set)?)?;
    // Rank by R², ties broken by id, so input order never matters.
    let mut ranked: Vec<usize> = (0..summary.ids.len()).collect();
    ranked.sort_by(|&a, &b| summary.r2[a].total_cmp(&summary.r2[b]).then_with(|| summary.ids[a].cmp(&summary.ids[b])));
    let by_id: HashMap<&str, &TrainSample> = set.iter().map(|s| (s.id.as_str(), s)).collect();
    let scatter = |k: usize| -> Result<Scatter, EvalError> {
        let id = &summary.ids[ranked[k]];
        let s = by_id[id.as_str()];
        let (r2, pred) = predict_one(model, s)?;
        Ok(Scatter { id: id.clone(), r2, truth: s.target.clone(), pred })
    };
    let n = ranked.len();
    Ok(PartitionEval { best: scatter(n - 1)?, median: scatter((n - 1) / 2)?, worst: scatter(0)?, summary })
}

/// Model inputs for the three partitions of a dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<TrainSample>,
    pub test: Vec<TrainSample>,
    pub ood: Vec<TrainSample>,
}

impl Split {
    pub fn from_samples(samples: &[Sample], problem: Problem) -> Result<Self, TrainError> {
        let part = |p: Partition| {
            let sel: Vec<&Sample> = samples.iter().filter(|s| s.spec.partition == p).collect();
            TrainSample::from_samples(&sel, problem)
        };
        Ok(Split { train: part(Partition::Train)?, test: part(Partition::Test)?, ood: part(Partition::Ood)? })
    }

    pub fn get(&self, p: Partition) -> &[TrainSample] {
        match p {
            Partition::Train => &self.train,
            Partition::Test => &self.test,
            Partition::Ood => &self.ood,
        }
    }
}

/// Median R² per partition; `None` where the partition is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Medians {
    pub train: Option<f64>,
    pub test: Option<f64>,
    pub ood: Option<f64>,
}

fn medians(model: &TrainedModel, train_set: &[TrainSample], split: &Split) -> Result<Medians, EvalError> {
    let med = |set: &[TrainSample]| -> Result<Option<f64>, EvalError> {
        if set.is_empty() {
            return Ok(None);
        }
        Ok(Some(MetricsSummary::from_pairs(Partition::Train, shape_r2(model, set)?)?.median))
    };
    Ok(Medians { train: med(train_set)?, test: med(&split.test)?, ood: med(&split.ood)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    /// Level count for layer studies, training-set size for data-size studies.
    pub key: usize,
    pub param_count: usize,
    pub train_seconds: f64,
    pub medians: Medians,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{:.4}", x)).unwrap_or_default()
}

/// CSV with one row per study entry.
pub fn study_csv(key: &str, rows: &[StudyRow]) -> String {
    let mut s = format!("{},param_count,train_seconds,train_median_r2,test_median_r2,ood_median_r2\n", key);
    for r in rows {
        s += &format!(
            "{},{},{:.1},{},{},{}\n",
            r.key,
            r.param_count,
            r.train_seconds,
            fmt_opt(r.medians.train),
            fmt_opt(r.medians.test),
            fmt_opt(r.medians.ood)
        );
    }
    s
}

/// Train and evaluate one configuration.
pub fn train_and_evaluate(
    config: &TrainConfig,
    train_set: &[TrainSample],
    split: &Split,
    key: usize,
) -> Result<(TrainedModel, StudyRow), EvalError> {
    let start = Instant::now();
    let (model, _) = train(config, train_set, &[])?;
    let train_seconds = start.elapsed().as_secs_f64();
    let medians = medians(&model, train_set, split)?;
    let row = StudyRow { key, param_count: model.param_count(), train_seconds, medians };
    Ok((model, row))
}

/// One MR-CNN per level count, otherwise identical to `base`.
pub fn layer_study(base: &TrainConfig, split: &Split, levels: &[usize]) -> Result<Vec<StudyRow>, EvalError> {
    let template = match &base.model {
        Architecture::Mrcnn(c) => c.clone(),
        Architecture::Unet(_) => MrCnnConfig::default(),
    };
    levels
        .iter()
        .map(|&l| {
            let config = TrainConfig { model: Architecture::Mrcnn(MrCnnConfig { levels: l, ..template.clone() }), ..base.clone() };
            log::info!("layer study: {} levels", l);
            train_and_evaluate(&config, &split.train, split, l).map(|(_, row)| row)
        })
        .collect()
}

/// One model per training-set size, each on a prefix of one seeded shuffle
/// of the training partition, so smaller sets are subsets of larger ones.
pub fn datasize_study(config: &TrainConfig, split: &Split, sizes: &[usize], seed: u64) -> Result<Vec<StudyRow>, EvalError> {
    let available = split.train.len();
    if let Some(&n) = sizes.iter().find(|&&n| n > available || n == 0) {
        return Err(EvalError::NotEnoughShapes { requested: n, available });
    }
    let mut order: Vec<usize> = (0..available).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    sizes
        .iter()
        .map(|&n| {
            let subset: Vec<TrainSample> = order[..n].iter().map(|&i| split.train[i].clone()).collect();
            log::info!("data-size study: {} shapes", n);
            train_and_evaluate(config, &subset, split, n).map(|(_, row)| row)
        })
        .collect()
}

/// Median R² by family and partition, plus the combined row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyRow {
    pub dataset: String,
    pub medians: Medians,
}

pub fn family_table(model: &TrainedModel, samples: &[Sample]) -> Result<Vec<FamilyRow>, EvalError> {
    let problem = model.config.field;
    let set: Vec<TrainSample> = samples.iter().map(|s| TrainSample::from_sample(s, problem)).collect::<Result<_, _>>()?;
    let r2: Vec<f64> = shape_r2(model, &set)?.into_iter().map(|(_, r)| r).collect();
    let median_of = |keep: &dyn Fn(&Sample) -> bool| -> Option<f64> {
        let mut v: Vec<f64> = samples.iter().zip(&r2).filter(|(s, _)| keep(s)).map(|(_, &r)| r).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(order_statistic(&v, 0.5))
    };
    let row = |name: &str, fam: Option<Family>| FamilyRow {
        dataset: name.to_string(),
        medians: Medians {
            train: median_of(&|s| fam.is_none_or(|f| s.spec.family == f) && s.spec.partition == Partition::Train),
            test: median_of(&|s| fam.is_none_or(|f| s.spec.family == f) && s.spec.partition == Partition::Test),
            ood: median_of(&|s| fam.is_none_or(|f| s.spec.family == f) && s.spec.partition == Partition::Ood),
        },
    };
    let mut rows: Vec<FamilyRow> = Family::ALL.iter().map(|&f| row(f.name(), Some(f))).collect();
    rows.push(row("combined", None));
    Ok(rows)
}

pub fn family_table_csv(rows: &[FamilyRow]) -> String {
    let mut s = String::from("dataset,train,test,ood\n");
    for r in rows {
        s += &format!("{},{},{},{}\n", r.dataset, fmt_opt(r.medians.train), fmt_opt(r.medians.test), fmt_opt(r.medians.ood));
    }
    s
}

/// Ground truth and prediction on one mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    pub mesh: Mesh,
    pub truth: Vec<f64>,
    pub pred: Vec<f64>,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpsampleRecord {
    pub coarse: Resolution,
    pub fine: Resolution,
    /// Nodes present at the same coordinates in both meshes.
    pub coincident: usize,
    /// Largest prediction difference over coincident nodes.
    pub coincident_max_diff: f64,
}

/// Mesh `shape` at two resolutions, solve both, and predict both with the
/// same model.
pub fn upsample_demo(
    model: &TrainedModel,
    shape: &Shape,
    fem: &FemConfig,
    h_coarse: f64,
    h_fine: f64,
) -> Result<UpsampleRecord, EvalError> {
    let sdf = sample_sdf(shape, model.arch().input_grid())?;
    let run = |h: f64| -> Result<Resolution, EvalError> {
        let mesh = triangulate(shape, h)?;
        let truth = solve_on(model.config.field, &mesh, fem)?.values;
        let points: Vec<[f64; 2]> = mesh.nodes.iter().map(|p| p.to_array()).collect();
        let pred = model.predict(&sdf, &points)?;
        let r2 = r_squared(&truth, &pred)?;
        Ok(Resolution { mesh, truth, pred, r2 })
    };
    let coarse = run(h_coarse)?;
    let fine = run(h_fine)?;
    let key = |p: &crate::geometry::Point| (p.x.to_bits(), p.y.to_bits());
    let index: HashMap<(u64, u64), usize> = coarse.mesh.nodes.iter().enumerate().map(|(i, p)| (key(p), i)).collect();
    let mut coincident = 0;
    let mut coincident_max_diff: f64 = 0.0;
    for (j, p) in fine.mesh.nodes.iter().enumerate() {
        if let Some(&i) = index.get(&key(p)) {
            coincident += 1;
            coincident_max_diff = coincident_max_diff.max((coarse.pred[i] - fine.pred[j]).abs());
        }
    }
    Ok(UpsampleRecord { coarse, fine, coincident, coincident_max_diff })
}
