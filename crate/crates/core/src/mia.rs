//! Shadow-model membership inference.
//!
//! Shadow models mimic the target on data whose membership is known. Their
//! softmax outputs on their own training samples (label 1) and on held-out
//! samples (label 0) train a linear attack classifier, which is then
//! scored on the target's members and non-members.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::accountant::PrivacyLedger;
use crate::data::Dataset;
use crate::dp::{train, Optimizer, PlainConfig, Sampling, SchedulePhase};
use crate::error::{Error, Result};
use crate::nn::{build_model, Arch, Model, ModelOptions};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShadowSplit {
    pub shadow_id: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Disjoint, equal-sized train/test index sets for each shadow. Different
/// shadows draw independently and may overlap.
pub fn make_shadow_splits(pool_size: usize, n_shadows: usize, per_split: usize, rng: &mut Rng) -> Result<Vec<ShadowSplit>> {
    if 2 * per_split > pool_size {
        return Err(Error::arg(format!(
            "shadow pool of {pool_size} cannot hold two disjoint sets of {per_split}"
        )));
    }
    Ok((0..n_shadows)
        .map(|shadow_id| {
            let mut idx: Vec<usize> = (0..pool_size).collect();
            rng.split().shuffle(&mut idx);
            ShadowSplit {
                shadow_id,
                train_indices: idx[..per_split].to_vec(),
                test_indices: idx[per_split..2 * per_split].to_vec(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackRecord {
    pub features: Vec<f64>,
    /// 1 for a member of the producing model's training set.
    pub label: u8,
}

/// Attack features of one probability row; descending order when `sort`.
pub fn attack_features(probs: &[f64], sort: bool) -> Vec<f64> {
    let mut f = probs.to_vec();
    if sort {
        f.sort_by(|a, b| b.total_cmp(a));
    }
    f
}

fn model_features(model: &Model, data: &Dataset, indices: &[usize], sort: bool) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(500) {
        let (x, _) = data.batch(chunk);
        let p = model.predict(&x)?;
        for i in 0..chunk.len() {
            out.push(attack_features(p.row(i), sort));
        }
    }
    Ok(out)
}

/// One record per (shadow, sample): the shadow's output on its own training
/// samples (label 1) and on its held-out samples (label 0).
pub fn build_attack_dataset(
    shadows: &[Model],
    splits: &[ShadowSplit],
    pool: &Dataset,
    sort: bool,
) -> Result<Vec<AttackRecord>> {
    if shadows.len() != splits.len() {
        return Err(Error::arg(format!("{} shadows for {} splits", shadows.len(), splits.len())));
    }
    let mut records = Vec::new();
    for (model, split) in shadows.iter().zip(splits) {
        for (indices, label) in [(&split.train_indices, 1u8), (&split.test_indices, 0u8)] {
            for features in model_features(model, pool, indices, sort)? {
                records.push(AttackRecord { features, label });
            }
        }
    }
    Ok(records)
}

/// Anything that scores a feature vector; positive means "member".
pub trait MembershipClassifier {
    fn score(&self, features: &[f64]) -> f64;

    fn is_member(&self, features: &[f64]) -> bool {
        self.score(features) > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.01,
            lambda: 1e-3,
        }
    }
}

/// Linear SVM on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl MembershipClassifier for LinearSvm {
    fn score(&self, features: &[f64]) -> f64 {
        let mut s = self.bias;
        for (((w, x), m), is) in self.weights.iter().zip(features).zip(&self.mean).zip(&self.inv_std) {
            s += w * (x - m) * is;
        }
        s
    }
}

/// Hinge loss plus `lambda/2 |w|^2`, minimized by per-record SGD over a
/// fresh permutation each epoch.
pub fn train_attack_model(records: &[AttackRecord], cfg: &SvmConfig, rng: &mut Rng) -> Result<LinearSvm> {
    let pos = records.iter().filter(|r| r.label == 1).count();
    if pos == 0 || pos == records.len() {
        return Err(Error::arg("attack training needs both member and non-member records"));
    }
    let d = records[0].features.len();
    if records.iter().any(|r| r.features.len() != d) {
        return Err(Error::dim("attack records have different feature lengths"));
    }
    let n = records.len() as f64;
    let mut mean = vec![0.0; d];
    for r in records {
        for (m, &f) in mean.iter_mut().zip(&r.features) {
            *m += f / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in records {
        for j in 0..d {
            var[j] += (r.features[j] - mean[j]).powi(2) / n;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| if v > 1e-24 { 1.0 / v.sqrt() } else { 0.0 }).collect();
    let xs: Vec<Vec<f64>> = records
        .iter()
        .map(|r| (0..d).map(|j| (r.features[j] - mean[j]) * inv_std[j]).collect())
        .collect();
    let ys: Vec<f64> = records.iter().map(|r| if r.label == 1 { 1.0 } else { -1.0 }).collect();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..records.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for &i in &order {
            let x = &xs[i];
            let margin = ys[i] * (b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>());
            for j in 0..d {
                let mut g = cfg.lambda * w[j];
                if margin < 1.0 {
                    g -= ys[i] * x[j];
                }
                w[j] -= cfg.lr * g;
            }
            if margin < 1.0 {
                b += cfg.lr * ys[i];
            }
        }
    }
    Ok(LinearSvm {
        weights: w,
        bias: b,
        mean,
        inv_std,
    })
}

/// Balanced accuracy from membership predictions on members and non-members.
pub fn balanced_accuracy(on_members: &[bool], on_non_members: &[bool]) -> Result<f64> {
    if on_members.len() != on_non_members.len() || on_members.is_empty() {
        return Err(Error::arg(format!(
            "need equal, non-empty member and non-member sets, got {} and {}",
            on_members.len(),
            on_non_members.len()
        )));
    }
    let tpr = on_members.iter().filter(|&&m| m).count() as f64 / on_members.len() as f64;
    let tnr = on_non_members.iter().filter(|&&m| !m).count() as f64 / on_non_members.len() as f64;
    Ok(0.5 * (tpr + tnr))
}

/// Balanced accuracy of `attack` on the target's outputs.
pub fn attack_success_rate(
    attack: &dyn MembershipClassifier,
    target: &Model,
    members: &Dataset,
    non_members: &Dataset,
    sort: bool,
) -> Result<f64> {
    if members.len() != non_members.len() {
        return Err(Error::arg(format!(
            "{} members but {} non-members",
            members.len(),
            non_members.len()
        )));
    }
    let all_m: Vec<usize> = (0..members.len()).collect();
    let fm = model_features(target, members, &all_m, sort)?;
    let fn_ = model_features(target, non_members, &all_m, sort)?;
    let pm: Vec<bool> = fm.iter().map(|f| attack.is_member(f)).collect();
    let pn: Vec<bool> = fn_.iter().map(|f| attack.is_member(f)).collect();
    balanced_accuracy(&pm, &pn)
}

/// How target and shadow models are built and trained.
#[derive(Clone, Debug, PartialEq)]
pub struct MiaConfig {
    pub arch: Arch,
    pub model: ModelOptions,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fractions of the data given to target-train and target-test; the
    /// rest is the shadow pool.
    pub target_train_fraction: f64,
    pub target_test_fraction: f64,
    /// Samples per shadow split; defaults to the target-train size.
    pub per_split: Option<usize>,
    pub n_shadows: Vec<usize>,
    pub sort_features: bool,
    pub svm: SvmConfig,
}

impl MiaConfig {
    pub fn new(arch: Arch, model: ModelOptions) -> Self {
        Self {
            arch,
            model,
            lr: 0.1,
            batch_size: 64,
            epochs: 20,
            target_train_fraction: 0.25,
            target_test_fraction: 0.25,
            per_split: None,
            n_shadows: vec![2, 4, 6, 8, 10],
            sort_features: true,
            svm: SvmConfig::default(),
        }
    }
}

/// Target and shadow partition of a dataset.
#[derive(Clone, Debug)]
pub struct MiaPartition {
    pub target_train: Dataset,
    pub target_test: Dataset,
    pub shadow_pool: Dataset,
}

pub fn partition(data: &Dataset, cfg: &MiaConfig, rng: &mut Rng) -> Result<MiaPartition> {
    let f = cfg.target_train_fraction + cfg.target_test_fraction;
    if !(cfg.target_train_fraction > 0.0 && cfg.target_test_fraction > 0.0 && f < 1.0) {
        return Err(Error::config("target fractions must be positive and sum below 1"));
    }
    let n = data.len();
    let n_train = (cfg.target_train_fraction * n as f64).round() as usize;
    let n_test = (cfg.target_test_fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    Ok(MiaPartition {
        target_train: data.subset(&idx[..n_train]),
        target_test: data.subset(&idx[n_train..n_train + n_test]),
        shadow_pool: data.subset(&idx[n_train + n_test..]),
    })
}

/// Build and train one model the way targets and shadows are trained.
pub fn train_reference_model(cfg: &MiaConfig, data: &Dataset, epochs: usize, rng: &mut Rng) -> Result<Model> {
    let mut opts = cfg.model.clone();
    opts.input_shape = Some(data.image_shape());
    let mut model = build_model(cfg.arch, &opts, rng)?;
    if epochs > 0 {
        let mut ledger = PrivacyLedger::new(1e-5)?;
        let opt = Optimizer::Plain(PlainConfig {
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            sampling: Sampling::Shuffle,
        });
        let empty = data.subset(&[]);
        train(&mut model, data, &empty, &opt, &[SchedulePhase { sigma: 0.0, epochs }], &mut ledger, rng)?;
    }
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaRow {
    pub n_shadows: usize,
    pub seed: u64,
    pub asr: f64,
}

pub fn write_mia_csv<W: Write>(rows: &[MiaRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Runtime(format!("writing attack results: {e}"));
    w.write_record(["n_shadows", "seed", "asr"]).map_err(err)?;
    for r in rows {
        w.write_record(&[r.n_shadows.to_string(), r.seed.to_string(), r.asr.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Runtime(format!("writing attack results: {e}")))
}

/// Everything one seed of a shadow-count sweep produces.
#[derive(Clone, Debug)]
pub struct MiaOutcome {
    pub rows: Vec<MiaRow>,
    pub target_train_acc: f64,
    pub target_test_acc: f64,
}

/// Train a target and `max(n_shadows)` shadows, then attack the target with
/// the first `k` shadows for every `k` in the sweep.
pub fn run_mia(data: &Dataset, cfg: &MiaConfig, seed: u64) -> Result<MiaOutcome> {
    let max_shadows = cfg.n_shadows.iter().copied().max().unwrap_or(0);
    if max_shadows == 0 {
        return Err(Error::config("`mia.n_shadows` must list at least one positive count"));
    }
    let root = Rng::new(seed);
    let part = partition(data, cfg, &mut root.fork(0))?;
    let target = train_reference_model(cfg, &part.target_train, cfg.epochs, &mut root.fork(1))?;
    let per_split = cfg.per_split.unwrap_or(part.target_train.len());
    let splits = make_shadow_splits(part.shadow_pool.len(), max_shadows, per_split, &mut root.fork(2))?;
    let mut shadows = Vec::with_capacity(max_shadows);
    for s in &splits {
        let train_set = part.shadow_pool.subset(&s.train_indices);
        shadows.push(train_reference_model(
            cfg,
            &train_set,
            cfg.epochs,
            &mut root.fork(100 + s.shadow_id as u64),
        )?);
    }
    let mut rows = Vec::new();
    for &k in &cfg.n_shadows {
        let records = build_attack_dataset(&shadows[..k], &splits[..k], &part.shadow_pool, cfg.sort_features)?;
        let attack = train_attack_model(&records, &cfg.svm, &mut root.fork(1000 + k as u64))?;
        let members = &part.target_train;
        let non_members = part.target_test.head(members.len());
        let members = members.head(non_members.len());
        let asr = attack_success_rate(&attack, &target, &members, &non_members, cfg.sort_features)?;
        rows.push(MiaRow { n_shadows: k, seed, asr });
    }
    Ok(MiaOutcome {
        rows,
        target_train_acc: crate::dp::evaluate(&target, &part.target_train, 1000)?,
        target_test_acc: crate::dp::evaluate(&target, &part.target_test, 1000)?,
    })
}
