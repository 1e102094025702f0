//! Command-line front end. Exit codes: 0 success, 1 some samples or steps
//! failed, 2 invalid configuration or arguments.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{build_sample, plan, solve_all, DatasetConfig, Partition, Sample};
use crate::eval::{
    datasize_study, evaluate_partition, family_table, family_table_csv, layer_study, study_csv, train_and_evaluate, EvalError,
    PartitionEval, Split,
};
use crate::fem::{FemConfig, NodalField, Problem};
use crate::model::{Architecture, UNetConfig};
use crate::report::{box_plot_svg, field_triptych, scatter_svg};
use crate::store::{self, load_checkpoint, load_dataset, load_sample, save_checkpoint, save_dataset, save_field, StoreError};
use crate::train::{train, Precision, TrainConfig, TrainError, TrainSample};

pub const SCHEMA_VERSION: u32 = 1;

/// One JSON document configures a whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    /// Defaults to the standard load cases with the dataset's `h_max`.
    #[serde(default)]
    pub fem: Option<FemConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!("schema_version {} is not supported (expected {})", self.schema_version, SCHEMA_VERSION)));
        }
        self.dataset.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.train.model.input_grid() != self.dataset.grid {
            return Err(CliError::Config(format!(
                "model input grid {} differs from dataset grid {}",
                self.train.model.input_grid(),
                self.dataset.grid
            )));
        }
        if let Some(f) = &self.fem {
            if f.h_max != self.dataset.h_max {
                return Err(CliError::Config(format!("fem.h_max {} differs from dataset.h_max {}", f.h_max, self.dataset.h_max)));
            }
        }
        if self.workers == Some(0) {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn fem(&self) -> FemConfig {
        self.fem.unwrap_or(FemConfig { h_max: self.dataset.h_max, ..FemConfig::default() })
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{failed} of {total} samples failed")]
    Partial { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fieldnet", version, about = "Scalar-field surrogates for 2-D shapes with holes")]
pub struct Cli {
    /// Worker threads for per-sample stages (default: CPU count).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProblemArg {
    Stress,
    Temperature,
}

impl From<ProblemArg> for Problem {
    fn from(p: ProblemArg) -> Self {
        match p {
            ProblemArg::Stress => Problem::Stress,
            ProblemArg::Temperature => Problem::Temperature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StudyKind {
    /// MR-CNN with 1..=6 levels.
    Layers,
    /// Training-set sizes from `--sizes`.
    Datasize,
    /// MR-CNN against the interpolated U-Net.
    Unet,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate shapes, meshes and SDF grids into a dataset directory.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Solve every sample of a dataset and store the fields.
    Solve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        problem: ProblemArg,
        /// Solver settings; defaults to those recorded in the dataset.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on the training partition.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Directory for `model.fnc` and `losses.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        precision: Option<PrecisionArg>,
    },
    /// Per-shape R², partition summaries and the family table.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the field on the mesh of one sample bundle.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render plots and field images from an evaluation directory.
    Report {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory of `eval`.
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pixels per side of field renders.
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Train and evaluate a family of models and write a CSV table.
    Study {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        kind: StudyKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "50,100,200")]
        sizes: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        precision: Option<PrecisionArg>,
    },
}

fn read_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    RunConfig::parse(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {}", path.display(), m)),
        e => e,
    })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, bytes).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{} does not exist", path.display())))
    }
}

fn apply_overrides(c: &mut RunConfig, seed: Option<u64>, precision: Option<PrecisionArg>) {
    if let Some(s) = seed {
        c.dataset.seed = s;
        c.train.seed = s;
    }
    match precision {
        Some(PrecisionArg::F32) => c.train.precision = Precision::F32,
        Some(PrecisionArg::F64) => c.train.precision = Precision::F64,
        None => {}
    }
}

/// Run a parsed command line. Returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    if let Some(n) = cli.workers {
        if n == 0 {
            log::error!("--workers must be at least 1");
            return 2;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("worker pool already initialised: {}", e);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{}", e);
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    ExitCode::from(run(Cli::parse()))
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Generate { config, out, seed } => {
            let mut c = read_config(&config)?;
            apply_overrides(&mut c, seed, None);
            cmd_generate(&c, &out)
        }
        Command::Solve { data, problem, config } => {
            let fem = match config {
                Some(p) => Some(read_config(&p)?.fem()),
                None => None,
            };
            cmd_solve(&data, problem.into(), fem)
        }
        Command::Train { data, config, out, seed, precision } => {
            let mut c = read_config(&config)?;
            apply_overrides(&mut c, seed, precision);
            cmd_train(&data, &c, &out)
        }
        Command::Eval { data, checkpoint, out } => cmd_eval(&data, &checkpoint, &out),
        Command::Predict { checkpoint, sample, out } => cmd_predict(&checkpoint, &sample, &out),
        Command::Report { data, checkpoint, eval, out, size } => cmd_report(&data, &checkpoint, &eval, &out, size),
        Command::Study { data, config, kind, out, sizes, seed, precision } => {
            let mut c = read_config(&config)?;
            apply_overrides(&mut c, seed, precision);
            cmd_study(&data, &c, kind, &sizes, &out)
        }
    }
}

/// Generate every planned sample; failures are reported with their seed and
/// the rest are still written.
pub fn cmd_generate(c: &RunConfig, out: &Path) -> Result<(), CliError> {
    let specs = plan(&c.dataset);
    let results: Vec<_> = specs.par_iter().map(|s| build_sample(s, c.dataset.h_max, c.dataset.grid)).collect();
    let mut samples = Vec::with_capacity(specs.len());
    let mut failed = 0;
    for (spec, r) in specs.iter().zip(results) {
        match r {
            Ok(s) => samples.push(s),
            Err(e) => {
                failed += 1;
                log::error!("{} ({:?}): {}", spec.id, spec.params, e);
            }
        }
    }
    let m = save_dataset(out, &c.dataset, None, &samples)?;
    log::info!("wrote {} samples to {}", m.samples.len(), out.display());
    if failed > 0 {
        return Err(CliError::Partial { failed, total: specs.len() });
    }
    Ok(())
}

fn load(data: &Path) -> Result<(store::DatasetManifest, Vec<Sample>), CliError> {
    require(&data.join(store::MANIFEST_FILE))?;
    Ok(load_dataset(data)?)
}

/// Solve `problem` on every sample. Samples that fail keep no field for it.
pub fn cmd_solve(data: &Path, problem: Problem, fem: Option<FemConfig>) -> Result<(), CliError> {
    let (m, mut samples) = load(data)?;
    let fem = fem.or(m.fem).unwrap_or(FemConfig { h_max: m.config.h_max, ..FemConfig::default() });
    if samples.is_empty() {
        log::info!("dataset is empty, nothing to solve");
        return Ok(());
    }
    for s in samples.iter_mut() {
        s.fields.remove(&problem);
    }
    let failures = solve_all(&mut samples, problem, &fem);
    for (id, e) in &failures {
        log::error!("{}: {}", id, e);
    }
    save_dataset(data, &m.config, Some(&fem), &samples)?;
    log::info!("solved {} of {} samples ({})", samples.len() - failures.len(), samples.len(), problem.name());
    if !failures.is_empty() {
        return Err(CliError::Partial { failed: failures.len(), total: samples.len() });
    }
    Ok(())
}

fn solved(samples: &[Sample], p: Partition, problem: Problem) -> Vec<&Sample> {
    samples.iter().filter(|s| s.spec.partition == p && s.fields.contains_key(&problem)).collect()
}

pub const CHECKPOINT_FILE: &str = "model.fnc";

pub fn cmd_train(data: &Path, c: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (_, samples) = load(data)?;
    let problem = c.train.field;
    let tr = TrainSample::from_samples(&solved(&samples, Partition::Train, problem), problem)?;
    let val = TrainSample::from_samples(&solved(&samples, Partition::Test, problem), problem)?;
    if tr.is_empty() {
        return Err(CliError::Input(format!("{} has no solved {} training samples", data.display(), problem.name())));
    }
    let (model, report) = train(&c.train, &tr, &val)?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &model)?;
    write_file(&out.join("losses.csv"), report.to_csv())?;
    log::info!("trained {} parameters in {:.1}s", model.param_count(), report.total_seconds());
    Ok(())
}

pub fn cmd_eval(data: &Path, checkpoint: &Path, out: &Path) -> Result<(), CliError> {
    require(checkpoint)?;
    let model = load_checkpoint(checkpoint)?;
    let (_, samples) = load(data)?;
    let problem = model.config.field;
    let with_field: Vec<Sample> = samples.into_iter().filter(|s| s.fields.contains_key(&problem)).collect();
    if with_field.is_empty() {
        return Err(CliError::Input(format!("{} has no solved {} samples", data.display(), problem.name())));
    }
    let table = family_table(&model, &with_field)?;
    write_file(&out.join("table.csv"), family_table_csv(&table))?;
    let split = Split::from_samples(&with_field, problem)?;
    let mut evals: BTreeMap<Partition, PartitionEval> = BTreeMap::new();
    let mut per_shape = String::from("id,partition,r2\n");
    for p in Partition::ALL {
        if split.get(p).is_empty() {
            continue;
        }
        let e = evaluate_partition(&model, split.get(p), p)?;
        for (id, r) in e.summary.ids.iter().zip(&e.summary.r2) {
            per_shape += &format!("{},{},{}\n", id, p.name(), r);
        }
        log::info!("{}: median R² {:.4} over {} shapes", p.name(), e.summary.median, e.summary.r2.len());
        evals.insert(p, e);
    }
    write_file(&out.join("per_shape_r2.csv"), per_shape)?;
    write_file(&out.join(EVAL_FILE), serde_json::to_vec(&evals).map_err(|e| CliError::Input(e.to_string()))?)?;
    Ok(())
}

pub const EVAL_FILE: &str = "evaluation.json";

pub fn cmd_predict(checkpoint: &Path, sample: &Path, out: &Path) -> Result<(), CliError> {
    require(checkpoint)?;
    require(sample)?;
    let model = load_checkpoint(checkpoint)?;
    let s = load_sample(sample)?;
    if s.sdf.n() != model.arch().input_grid() {
        return Err(CliError::Input(format!(
            "{} has a {}-grid, the model expects {}",
            sample.display(),
            s.sdf.n(),
            model.arch().input_grid()
        )));
    }
    let values = model.predict(&s.sdf, &s.points()).map_err(|e| CliError::Train(e.into()))?;
    let problem = model.config.field;
    let field = NodalField { values, units: problem.units(), problem };
    save_field(out, &field)?;
    Ok(())
}

pub fn cmd_report(data: &Path, checkpoint: &Path, eval: &Path, out: &Path, size: usize) -> Result<(), CliError> {
    let path = eval.join(EVAL_FILE);
    require(&path)?;
    let text = fs::read(&path).map_err(|source| CliError::Io { path: path.clone(), source })?;
    let evals: BTreeMap<Partition, PartitionEval> =
        serde_json::from_slice(&text).map_err(|e| CliError::Input(format!("{}: {}", path.display(), e)))?;
    let groups: Vec<(String, Vec<f64>)> = evals.iter().map(|(p, e)| (p.name().to_string(), e.summary.r2.clone())).collect();
    write_file(&out.join("r2_boxplot.svg"), box_plot_svg("Per-shape R²", "R²", &groups))?;

    require(checkpoint)?;
    let model = load_checkpoint(checkpoint)?;
    let (_, samples) = load(data)?;
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.spec.id.as_str(), s)).collect();
    for (p, e) in &evals {
        for (rank, sc) in [("best", &e.best), ("median", &e.median), ("worst", &e.worst)] {
            let stem = format!("{}_{}", p.name(), rank);
            let title = format!("{} {} ({}), R² = {:.3}", p.name(), rank, sc.id, sc.r2);
            write_file(&out.join(format!("{}_scatter.svg", stem)), scatter_svg(&title, &sc.truth, &sc.pred))?;
            let Some(s) = by_id.get(sc.id.as_str()) else {
                log::warn!("{} is not in {}, skipping its field render", sc.id, data.display());
                continue;
            };
            let pred = model.predict(&s.sdf, &s.points()).map_err(|e| CliError::Train(e.into()))?;
            let [(_, truth_img), (_, pred_img), (_, diff_img)] = field_triptych(&s.mesh, &sc.truth, &pred, size);
            write_file(&out.join(format!("{}_truth.ppm", stem)), truth_img)?;
            write_file(&out.join(format!("{}_pred.ppm", stem)), pred_img)?;
            write_file(&out.join(format!("{}_diff.ppm", stem)), diff_img)?;
        }
    }
    Ok(())
}

pub fn cmd_study(data: &Path, c: &RunConfig, kind: StudyKind, sizes: &[usize], out: &Path) -> Result<(), CliError> {
    let (_, samples) = load(data)?;
    let problem = c.train.field;
    let with_field: Vec<Sample> = samples.into_iter().filter(|s| s.fields.contains_key(&problem)).collect();
    let split = Split::from_samples(&with_field, problem)?;
    if split.train.is_empty() {
        return Err(CliError::Input(format!("{} has no solved {} training samples", data.display(), problem.name())));
    }
    let (name, csv) = match kind {
        StudyKind::Layers => ("layers.csv", study_csv("levels", &layer_study(&c.train, &split, &[1, 2, 3, 4, 5, 6])?)),
        StudyKind::Datasize => ("datasize.csv", study_csv("train_shapes", &datasize_study(&c.train, &split, sizes, c.train.seed)?)),
        StudyKind::Unet => {
            let mut csv = String::from("model,param_count,train_seconds,train_median_r2,test_median_r2,ood_median_r2\n");
            let unet = Architecture::Unet(UNetConfig { input_grid: c.train.model.input_grid(), ..UNetConfig::default() });
            for (label, arch) in [("mrcnn", c.train.model.clone()), ("unet", unet)] {
                let config = TrainConfig { model: arch, ..c.train.clone() };
                let (_, row) = train_and_evaluate(&config, &split.train, &split, 0)?;
                let line = study_csv("k", &[row]);
                csv += &format!("{},{}", label, line.lines().nth(1).unwrap_or_default().split_once(',').map_or("", |x| x.1));
                csv.push('\n');
            }
            ("unet.csv", csv)
        }
    };
    write_file(&out.join(name), csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_json() -> String {
        serde_json::to_string(&RunConfig {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetConfig::desk_combined(1),
            fem: None,
            train: TrainConfig::default(),
            workers: None,
        })
        .unwrap()
    }

    #[test]
    fn config_round_trip_and_validation() {
        let c = RunConfig::parse(&config_json()).unwrap();
        assert_eq!(c.fem().h_max, 0.025);
        let bumped = config_json().replace("\"schema_version\":1", "\"schema_version\":2");
        assert!(matches!(RunConfig::parse(&bumped), Err(CliError::Config(_))));
        let typo = config_json().replace("\"workers\"", "\"wrokers\"");
        assert_eq!(RunConfig::parse(&typo).unwrap_err().exit_code(), 2);
        assert!(RunConfig::parse("{").is_err());
    }

    #[test]
    fn overrides_apply_to_dataset_and_training() {
        let mut c = RunConfig::parse(&config_json()).unwrap();
        apply_overrides(&mut c, Some(99), Some(PrecisionArg::F64));
        assert_eq!((c.dataset.seed, c.train.seed, c.train.precision), (99, 99, Precision::F64));
    }

    #[test]
    fn cli_parses() {
        let cli = Cli::try_parse_from(["fieldnet", "--workers", "2", "solve", "--data", "d", "--problem", "temperature"]).unwrap();
        assert_eq!(cli.workers, Some(2));
        assert!(matches!(cli.command, Command::Solve { problem: ProblemArg::Temperature, .. }));
        assert!(Cli::try_parse_from(["fieldnet", "solve", "--data", "d", "--problem", "pressure"]).is_err());
    }
}
