//! Experiment runner behind the `dpsgd-lab` binary.
//!
//! A run directory holds `manifest.toml` (the resolved config plus run
//! metadata), one CSV per artifact, and a `FAILED` file if the run stopped
//! with an error. CSV outputs depend only on the config and seed.

mod config;

pub use config::{
    AccountantSection, DataSection, DpSection, ExperimentConfig, InstrumentSection, MiaSection, Mode, ModelSection,
    TrainSection, SMOKE_SAMPLES,
};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accountant::{epsilon_for, PrivacyLedger};
use crate::data::{load_dataset, load_dataset_head, Dataset, Split};
use crate::dp::{train_with, DpConfig, Optimizer, PlainConfig, TrainLog, TrainLogRow};
use crate::error::{Error, Result};
use crate::ga::{tune_bound, write_history_csv, DpBudget};
use crate::mia::{run_mia, write_mia_csv, MiaConfig};
use crate::nn::{build_model, Activation, ActivationKind, LayerSpec, Model, ModelOptions};
use crate::rng::Rng;
use crate::tensor::l2_norm_slice;

pub const MANIFEST: &str = "manifest.toml";
pub const FAILED_MARKER: &str = "FAILED";
pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub code_version: String,
    pub data_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run: RunInfo,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {}", path.display(), e.message())))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Execute one run, writing artifacts under `cfg.output`. A failure after
/// the output directory exists leaves a `FAILED` marker holding the error.
pub fn run(cfg: &ExperimentConfig, data_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let out = cfg.output.clone();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let marker = out.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(io_err(&marker))?;
    }
    let data_dir = cfg.data.dir.clone().unwrap_or_else(|| data_dir.to_path_buf());
    let manifest = Manifest {
        run: RunInfo {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            data_dir: data_dir.clone(),
        },
        config: cfg.clone(),
    };
    let manifest_path = out.join(MANIFEST);
    fs::write(
        &manifest_path,
        toml::to_string(&manifest).expect("manifests always serialize"),
    )
    .map_err(io_err(&manifest_path))?;

    let result = match cfg.mode {
        Mode::PlainTrain | Mode::DpTrain => run_training(cfg, &data_dir, &out),
        Mode::Mia => run_mia_mode(cfg, &data_dir, &out),
        Mode::Ga => run_ga_mode(cfg, &data_dir, &out),
        Mode::Accountant => run_accountant_mode(cfg, &out),
    };
    if let Err(e) = &result {
        fs::write(&marker, format!("{e}\n")).map_err(io_err(&marker))?;
    }
    result.map(|_| out)
}

fn load_split(cfg: &ExperimentConfig, dir: &Path, split: Split) -> Result<Dataset> {
    let limit = match split {
        Split::Train => cfg.data.train_limit,
        Split::Test => cfg.data.test_limit,
    };
    match limit {
        Some(n) => load_dataset_head(cfg.data.dataset, dir, split, n),
        None => load_dataset(cfg.data.dataset, dir, split),
    }
}

pub fn model_options(cfg: &ExperimentConfig, input_shape: [usize; 3]) -> ModelOptions {
    ModelOptions {
        activation: cfg.model.activation,
        bound: cfg.model.bound,
        norm: cfg.model.norm,
        dropout: cfg.model.dropout,
        input_shape: Some(input_shape),
    }
}

pub fn dp_config(cfg: &ExperimentConfig) -> DpConfig {
    DpConfig {
        clip_c: cfg.dp.clip,
        sigma: cfg.dp.schedule.first().map_or(0.0, |p| p.sigma),
        lr: cfg.train.lr,
        batch_size: cfg.train.batch_size,
        delta: cfg.dp.delta,
        sampling: cfg.train.sampling,
    }
}

/// Build the optimizer and schedule a training config describes.
pub fn training_plan(cfg: &ExperimentConfig) -> (Optimizer, Vec<crate::dp::SchedulePhase>) {
    match cfg.mode {
        Mode::DpTrain | Mode::Ga => (Optimizer::Dp(dp_config(cfg)), cfg.dp.schedule.clone()),
        _ => (
            Optimizer::Plain(PlainConfig {
                lr: cfg.train.lr,
                batch_size: cfg.train.batch_size,
                sampling: cfg.train.sampling,
            }),
            vec![crate::dp::SchedulePhase {
                sigma: 0.0,
                epochs: cfg.train.epochs,
            }],
        ),
    }
}

/// Train the configured model, streaming the log to `out/train_log.csv`.
pub fn train_configured(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, out: Option<&Path>) -> Result<(Model, TrainLog)> {
    let root = Rng::new(cfg.seed);
    let mut model = build_model(cfg.model.arch, &model_options(cfg, train.image_shape()), &mut root.fork(0))?;
    let mut ledger = PrivacyLedger::new(cfg.dp.delta)?;
    let (opt, schedule) = training_plan(cfg);
    let mut sink = match out {
        Some(dir) => {
            let path = dir.join(TRAIN_LOG);
            let mut w = create(&path)?;
            writeln!(w, "{}", TrainLogRow::CSV_HEADER).map_err(io_err(&path))?;
            Some((path, w))
        }
        None => None,
    };
    let log = train_with(
        &mut model,
        train,
        test,
        &opt,
        &schedule,
        &mut ledger,
        &mut root.fork(1),
        &mut |row| {
            if let Some((path, w)) = &mut sink {
                writeln!(w, "{}", row.csv_line()).map_err(io_err(path))?;
                w.flush().map_err(io_err(path))?;
            }
            Ok(())
        },
    )?;
    if let (Mode::DpTrain, Some(dir)) = (cfg.mode, out) {
        ledger.save(&dir.join("ledger.csv"))?;
    }
    Ok((model, log))
}

fn run_training(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let train = load_split(cfg, data_dir, Split::Train)?;
    let test = load_split(cfg, data_dir, Split::Test)?;
    let (model, _) = train_configured(cfg, &train, &test, Some(out))?;
    if cfg.instrument.activation_norms {
        let n = cfg.instrument.samples.min(test.len());
        let (x, _) = test.batch(&(0..n).collect::<Vec<_>>());
        let mut records = record_activation_norms(&model, &x)?;
        if let Some(twin) = comparison_twin(cfg) {
            records.extend(record_activation_norms(&model.with_activation(twin), &x)?);
        }
        write_activation_norms(&records, create(&out.join("activation_norms.csv"))?)?;
    }
    Ok(())
}

/// The activation the trained weights are compared against: ReLU for a
/// bounded model, the configured bound for a ReLU model.
fn comparison_twin(cfg: &ExperimentConfig) -> Option<Activation> {
    match cfg.model.activation {
        ActivationKind::BoundedRelu => Some(Activation::relu()),
        ActivationKind::Relu => cfg.model.bound.and_then(|a| Activation::bounded_relu(a).ok()),
        ActivationKind::Tanh => None,
    }
}

fn run_mia_mode(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let m = cfg.mia.as_ref().expect("resolved mia config");
    let data = load_split(cfg, data_dir, Split::Train)?;
    let mia_cfg = MiaConfig {
        arch: cfg.model.arch,
        model: model_options(cfg, data.image_shape()),
        lr: cfg.train.lr,
        batch_size: cfg.train.batch_size,
        epochs: cfg.train.epochs,
        target_train_fraction: m.target_train_fraction,
        target_test_fraction: m.target_test_fraction,
        per_split: m.per_split,
        n_shadows: m.n_shadows.clone(),
        sort_features: m.sort_features,
        svm: m.svm,
    };
    let mut rows = Vec::new();
    let targets_path = out.join("mia_targets.csv");
    let mut targets = create(&targets_path)?;
    writeln!(targets, "seed,target_train_acc,target_test_acc,gap").map_err(io_err(&targets_path))?;
    for &seed in &m.seeds {
        let o = run_mia(&data, &mia_cfg, seed)?;
        writeln!(
            targets,
            "{seed},{},{},{}",
            o.target_train_acc,
            o.target_test_acc,
            o.target_train_acc - o.target_test_acc
        )
        .map_err(io_err(&targets_path))?;
        rows.extend(o.rows);
    }
    targets.flush().map_err(io_err(&targets_path))?;
    write_mia_csv(&rows, create(&out.join("mia.csv"))?)
}

fn run_ga_mode(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let ga = cfg.ga.as_ref().expect("resolved ga config");
    let train = load_split(cfg, data_dir, Split::Train)?;
    let test = load_split(cfg, data_dir, Split::Test)?;
    let budget = DpBudget {
        train: &train,
        test: &test,
        arch: cfg.model.arch,
        model: model_options(cfg, train.image_shape()),
        dp: dp_config(cfg),
        schedule: cfg.dp.schedule.clone(),
    };
    let outcome = tune_bound(ga, &budget, &mut Rng::new(cfg.seed))?;
    write_history_csv(&outcome.history, create(&out.join("ga_history.csv"))?)?;
    let path = out.join("ga_population.csv");
    let mut w = create(&path)?;
    writeln!(w, "generation,lr,bound_a,fitness,epsilon,diverged").map_err(io_err(&path))?;
    for (g, pop) in outcome.populations.iter().enumerate() {
        for c in pop {
            writeln!(
                w,
                "{g},{},{},{},{},{}",
                c.lr,
                c.bound_a,
                c.fitness.unwrap_or(f64::NAN),
                c.epsilon.unwrap_or(f64::NAN),
                c.diverged
            )
            .map_err(io_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))
}

fn run_accountant_mode(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let a = cfg.accountant.as_ref().expect("resolved accountant config");
    let (eps, order) = epsilon_for(a.q, a.sigma, a.steps, cfg.dp.delta)?;
    let path = out.join("accountant.csv");
    let mut w = create(&path)?;
    writeln!(w, "q,sigma,steps,delta,epsilon,order").map_err(io_err(&path))?;
    writeln!(w, "{},{},{},{},{eps},{order}", a.q, a.sigma, a.steps, cfg.dp.delta).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))
}

/// Post-activation L2 norms of one conv block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockNorms {
    /// 1-based conv block index.
    pub block: usize,
    pub activation: &'static str,
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

/// For every conv block, the L2 norm of each sample's post-activation
/// output, in evaluation mode.
pub fn record_activation_norms(model: &Model, batch: &crate::tensor::Tensor) -> Result<Vec<BlockNorms>> {
    let specs = model.layer_specs();
    let fwd = model.forward_eval(batch)?;
    let n = fwd.batch_size();
    let mut out = Vec::new();
    let mut block = 0;
    for (l, spec) in specs.iter().enumerate() {
        if !matches!(spec, LayerSpec::Conv { .. }) {
            continue;
        }
        block += 1;
        let Some((act_idx, act)) = specs[l + 1..].iter().enumerate().find_map(|(i, s)| match s {
            LayerSpec::Activation(a) => Some((l + 1 + i, *a)),
            _ => None,
        }) else {
            continue;
        };
        let values = fwd.layer_output(act_idx);
        let len = values.len() / n.max(1);
        let per_sample: Vec<f64> = (0..n).map(|i| l2_norm_slice(&values[i * len..(i + 1) * len])).collect();
        let mean = per_sample.iter().sum::<f64>() / n.max(1) as f64;
        out.push(BlockNorms {
            block,
            activation: act.kind().name(),
            per_sample,
            mean,
        });
    }
    Ok(out)
}

/// CSV with one row per (block, activation, sample) plus a `mean` row.
pub fn write_activation_norms<W: Write>(records: &[BlockNorms], mut w: W) -> Result<()> {
    let e = |e: std::io::Error| Error::Runtime(format!("writing activation norms: {e}"));
    writeln!(w, "block,activation,sample,norm").map_err(e)?;
    for r in records {
        for (i, v) in r.per_sample.iter().enumerate() {
            writeln!(w, "{},{},{i},{v}", r.block, r.activation).map_err(e)?;
        }
        writeln!(w, "{},{},mean,{}", r.block, r.activation, r.mean).map_err(e)?;
    }
    w.flush().map_err(e)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub approach: String,
    pub accuracy: f64,
    pub epsilon: f64,
}

/// One row per completed training run, grouped by dataset in first-seen
/// order. Directories without a manifest or train log are returned in the
/// second list.
pub fn summarize(dirs: &[PathBuf]) -> (Vec<SummaryRow>, Vec<PathBuf>) {
    let mut rows: Vec<(usize, SummaryRow)> = Vec::new();
    let mut order: Vec<String> = Vec::new();
    let mut missing = Vec::new();
    for dir in dirs {
        let row = (|| -> Result<SummaryRow> {
            let m = Manifest::load(dir)?;
            let log = TrainLog::read_csv(&dir.join(TRAIN_LOG))?;
            let last = log.rows.last().ok_or_else(|| Error::State("empty train log".into()))?;
            let c = &m.config;
            let approach = match c.mode {
                Mode::DpTrain => format!("DP-SGD with {}", c.model.activation.name()),
                _ => format!("SGD with {}", c.model.activation.name()),
            };
            Ok(SummaryRow {
                dataset: c.data.dataset.as_str().to_string(),
                approach,
                accuracy: last.test_acc,
                epsilon: last.epsilon,
            })
        })();
        match row {
            Ok(r) => {
                let g = order.iter().position(|d| *d == r.dataset).unwrap_or_else(|| {
                    order.push(r.dataset.clone());
                    order.len() - 1
                });
                rows.push((g, r));
            }
            Err(_) => missing.push(dir.clone()),
        }
    }
    rows.sort_by_key(|(g, _)| *g);
    (rows.into_iter().map(|(_, r)| r).collect(), missing)
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let err = |e: csv::Error| Error::Runtime(format!("writing summary: {e}"));
    w.write_record(["dataset", "approach", "accuracy", "epsilon"]).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Runtime(format!("writing summary: {e}")))
}

/// One expanded sweep point.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRun {
    pub label: String,
    pub config: ExperimentConfig,
}

fn parse_grid_value(s: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {s}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(s.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(format!("empty grid key `{key}`")))?;
    let mut t = table;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("grid key `{key}`: `{p}` is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Parse a `key=v1,v2,...` grid axis.
pub fn parse_grid_axis(spec: &str) -> Result<(String, Vec<String>)> {
    let (k, vs) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("grid axis `{spec}` is not of the form key=v1,v2")))?;
    let values: Vec<String> = vs.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect();
    if values.is_empty() {
        return Err(Error::config(format!("grid axis `{k}` has no values")));
    }
    Ok((k.trim().to_string(), values))
}

/// Cartesian product of the grid axes times `replicates`. Replicate `r`
/// uses seed `base + r` at every grid point so arms stay paired; outputs go
/// to `<template output>/<k=v,...>/rep-<r>`.
pub fn expand_sweep(template: &str, grid: &[(String, Vec<String>)], replicates: usize) -> Result<Vec<SweepRun>> {
    let base: toml::Table = toml::from_str(template).map_err(|e| Error::config(e.message().to_string()))?;
    let base_cfg = ExperimentConfig::from_toml_str(template)?;
    let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (k, vs) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                vs.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((k.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    let mut runs = Vec::new();
    for point in points {
        let label = if point.is_empty() {
            "base".to_string()
        } else {
            point.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
        };
        for r in 0..replicates.max(1) {
            let mut t = base.clone();
            for (k, v) in &point {
                set_dotted(&mut t, k, parse_grid_value(v))?;
            }
            set_dotted(&mut t, "seed", toml::Value::Integer(base_cfg.seed.wrapping_add(r as u64) as i64))?;
            let out = base_cfg.output.join(&label).join(format!("rep-{r}"));
            set_dotted(&mut t, "output", toml::Value::String(out.display().to_string()))?;
            let text = toml::to_string(&t).map_err(|e| Error::config(e.to_string()))?;
            runs.push(SweepRun {
                label: format!("{label}/rep-{r}"),
                config: ExperimentConfig::from_toml_str(&text)?,
            });
        }
    }
    Ok(runs)
}
