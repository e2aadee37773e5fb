//! Declarative run configuration.
//!
//! Files are TOML. Parsing goes through an all-optional raw layer so that a
//! missing key is reported by its dotted name; the resolved
//! [`ExperimentConfig`] has every default filled in and is what the run
//! manifest records.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::DatasetName;
use crate::dp::{Sampling, SchedulePhase};
use crate::error::{Error, Result};
use crate::ga::{GaConfig, GeneBounds};
use crate::mia::SvmConfig;
use crate::nn::{ActivationKind, Arch, NormChoice};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    PlainTrain,
    DpTrain,
    Mia,
    Ga,
    Accountant,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::PlainTrain, Mode::DpTrain, Mode::Mia, Mode::Ga, Mode::Accountant];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::PlainTrain => "plain_train",
            Mode::DpTrain => "dp_train",
            Mode::Mia => "mia",
            Mode::Ga => "ga",
            Mode::Accountant => "accountant",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let allowed: Vec<&str> = Mode::ALL.iter().map(|m| m.as_str()).collect();
            Error::config(format!("unknown mode `{s}`; allowed modes: {}", allowed.join(", ")))
        })
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub dataset: DatasetName,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub arch: Arch,
    pub activation: ActivationKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm: Option<NormChoice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub sampling: Sampling,
    /// Epochs for plain training and for MIA target/shadow models.
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpSection {
    pub clip: f64,
    pub delta: f64,
    pub schedule: Vec<SchedulePhase>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaSection {
    pub n_shadows: Vec<usize>,
    pub seeds: Vec<u64>,
    pub target_train_fraction: f64,
    pub target_test_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_split: Option<usize>,
    pub sort_features: bool,
    pub svm: SvmConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountantSection {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstrumentSection {
    /// Record per-conv-block activation norms after training.
    pub activation_norms: bool,
    /// Test samples fed through the model for the norm record.
    pub samples: usize,
}

/// A fully resolved run description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub output: PathBuf,
    pub smoke: bool,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub dp: DpSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mia: Option<MiaSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ga: Option<GaConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accountant: Option<AccountantSection>,
    pub instrument: InstrumentSection,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    mode: Option<String>,
    seed: Option<u64>,
    output: Option<PathBuf>,
    smoke: Option<bool>,
    data: Option<RawData>,
    model: Option<RawModel>,
    train: Option<RawTrain>,
    dp: Option<RawDp>,
    mia: Option<RawMia>,
    ga: Option<RawGa>,
    accountant: Option<RawAccountant>,
    instrument: Option<RawInstrument>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    dataset: Option<DatasetName>,
    dir: Option<PathBuf>,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    arch: Option<Arch>,
    activation: Option<ActivationKind>,
    bound: Option<f64>,
    norm: Option<NormChoice>,
    dropout: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    lr: Option<f64>,
    batch_size: Option<usize>,
    sampling: Option<Sampling>,
    epochs: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDp {
    clip: Option<f64>,
    delta: Option<f64>,
    schedule: Option<Vec<SchedulePhase>>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMia {
    n_shadows: Option<Vec<usize>>,
    seeds: Option<Vec<u64>>,
    target_train_fraction: Option<f64>,
    target_test_fraction: Option<f64>,
    per_split: Option<usize>,
    sort_features: Option<bool>,
    svm: Option<SvmConfig>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGa {
    population: Option<usize>,
    mutation_rate: Option<f64>,
    segments: Option<usize>,
    generations: Option<usize>,
    lr_bounds: Option<GeneBounds>,
    a_bounds: Option<GeneBounds>,
    jobs: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAccountant {
    q: Option<f64>,
    sigma: Option<f64>,
    steps: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstrument {
    activation_norms: Option<bool>,
    samples: Option<usize>,
}

fn require<T>(v: Option<T>, key: &str, mode: Mode) -> Result<T> {
    v.ok_or_else(|| Error::config(format!("missing key `{key}` (required for mode {mode})")))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        Self::resolve(raw)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("resolved configs always serialize")
    }

    fn resolve(raw: RawConfig) -> Result<Self> {
        let mode = Mode::parse(&raw.mode.ok_or_else(|| Error::config("missing key `mode`"))?)?;
        let seed = raw.seed.unwrap_or(0);
        let needs_data = mode != Mode::Accountant;

        let rd = raw.data.unwrap_or_default();
        let dataset = if needs_data {
            require(rd.dataset, "data.dataset", mode)?
        } else {
            rd.dataset.unwrap_or(DatasetName::Mnist)
        };
        let data = DataSection {
            dataset,
            dir: rd.dir,
            train_limit: rd.train_limit,
            test_limit: rd.test_limit,
        };

        let rm = raw.model.unwrap_or_default();
        let arch = rm.arch.unwrap_or(match dataset {
            DatasetName::Cifar10 => Arch::Cifar10Cnn,
            _ => Arch::MnistCnn,
        });
        let activation = if needs_data {
            require(rm.activation, "model.activation", mode)?
        } else {
            rm.activation.unwrap_or(ActivationKind::Relu)
        };
        let bound = match (activation, rm.bound) {
            (ActivationKind::BoundedRelu, None) if mode != Mode::Ga && needs_data => {
                return Err(Error::config(
                    "missing key `model.bound` (required for activation bounded_relu)",
                ))
            }
            (_, b) => b,
        };
        let model = ModelSection {
            arch,
            activation,
            bound,
            norm: rm.norm,
            dropout: rm.dropout,
        };

        let rt = raw.train.unwrap_or_default();
        let epochs = match mode {
            Mode::PlainTrain | Mode::Mia => require(rt.epochs, "train.epochs", mode)?,
            _ => rt.epochs.unwrap_or(0),
        };
        let train = TrainSection {
            lr: rt.lr.unwrap_or(0.1),
            batch_size: rt.batch_size.unwrap_or(if mode == Mode::Mia { 64 } else { 256 }),
            sampling: rt.sampling.unwrap_or(match mode {
                Mode::DpTrain | Mode::Ga => Sampling::Poisson,
                _ => Sampling::Shuffle,
            }),
            epochs,
        };

        let rdp = raw.dp.unwrap_or_default();
        let schedule = match mode {
            Mode::DpTrain | Mode::Ga => require(rdp.schedule, "dp.schedule", mode)?,
            _ => rdp.schedule.unwrap_or_default(),
        };
        let dp = DpSection {
            clip: rdp.clip.unwrap_or(1.0),
            delta: rdp.delta.unwrap_or(1e-5),
            schedule,
        };

        let mia = (mode == Mode::Mia).then(|| {
            let r = raw.mia.unwrap_or_default();
            MiaSection {
                n_shadows: r.n_shadows.unwrap_or_else(|| vec![2, 4, 6, 8, 10]),
                seeds: r.seeds.unwrap_or_else(|| vec![seed]),
                target_train_fraction: r.target_train_fraction.unwrap_or(0.25),
                target_test_fraction: r.target_test_fraction.unwrap_or(0.25),
                per_split: r.per_split,
                sort_features: r.sort_features.unwrap_or(true),
                svm: r.svm.unwrap_or_default(),
            }
        });

        let ga = (mode == Mode::Ga).then(|| {
            let r = raw.ga.unwrap_or_default();
            let d = GaConfig::default();
            GaConfig {
                population: r.population.unwrap_or(d.population),
                mutation_rate: r.mutation_rate.unwrap_or(d.mutation_rate),
                segments: r.segments.unwrap_or(d.segments),
                generations: r.generations.unwrap_or(d.generations),
                lr_bounds: r.lr_bounds.unwrap_or(d.lr_bounds),
                a_bounds: r.a_bounds.unwrap_or(d.a_bounds),
                jobs: r.jobs.unwrap_or(d.jobs),
            }
        });

        let accountant = if mode == Mode::Accountant {
            let r = raw.accountant.unwrap_or_default();
            Some(AccountantSection {
                q: require(r.q, "accountant.q", mode)?,
                sigma: require(r.sigma, "accountant.sigma", mode)?,
                steps: require(r.steps, "accountant.steps", mode)?,
            })
        } else {
            None
        };

        let ri = raw.instrument.unwrap_or_default();
        let instrument = InstrumentSection {
            activation_norms: ri.activation_norms.unwrap_or(false),
            samples: ri.samples.unwrap_or(256),
        };

        let mut cfg = ExperimentConfig {
            mode,
            seed,
            output: raw
                .output
                .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{seed}", mode.as_str()))),
            smoke: false,
            data,
            model,
            train,
            dp,
            mia,
            ga,
            accountant,
            instrument,
        };
        if raw.smoke == Some(true) {
            cfg.apply_smoke();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks that do not depend on which keys were given.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::config(format!("`{key}` {why}")));
        if !(self.train.lr >= 0.0 && self.train.lr.is_finite()) {
            return bad("train.lr", format!("must be finite and non-negative, got {}", self.train.lr));
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size", "must be positive".into());
        }
        if !(self.dp.clip > 0.0 && self.dp.clip.is_finite()) {
            return bad("dp.clip", format!("must be positive, got {}", self.dp.clip));
        }
        if !(self.dp.delta > 0.0 && self.dp.delta < 1.0) {
            return bad("dp.delta", format!("must lie in (0, 1), got {}", self.dp.delta));
        }
        for (i, p) in self.dp.schedule.iter().enumerate() {
            if !(p.sigma >= 0.0 && p.sigma.is_finite()) {
                return bad(&format!("dp.schedule[{i}].sigma"), format!("must be non-negative, got {}", p.sigma));
            }
        }
        if matches!(self.mode, Mode::DpTrain | Mode::Ga) && self.dp.schedule.iter().all(|p| p.epochs == 0) {
            return bad("dp.schedule", "must contain at least one epoch".into());
        }
        if let Some(b) = self.model.bound {
            if !(b > 0.0 && b.is_finite()) {
                return bad("model.bound", format!("must be positive, got {b}"));
            }
        }
        if let Some(d) = self.model.dropout {
            if !(0.0..1.0).contains(&d) {
                return bad("model.dropout", format!("must lie in [0, 1), got {d}"));
            }
        }
        if let Some(m) = &self.mia {
            if m.n_shadows.is_empty() || m.n_shadows.contains(&0) {
                return bad("mia.n_shadows", "must list positive shadow counts".into());
            }
            if m.seeds.is_empty() {
                return bad("mia.seeds", "must not be empty".into());
            }
        }
        if let Some(g) = &self.ga {
            g.validate()?;
        }
        if let Some(a) = &self.accountant {
            if !(0.0..=1.0).contains(&a.q) {
                return bad("accountant.q", format!("must lie in [0, 1], got {}", a.q));
            }
            if !(a.sigma >= 0.0) {
                return bad("accountant.sigma", format!("must be non-negative, got {}", a.sigma));
            }
        }
        Ok(())
    }

    /// Shrink to a CI-sized run: at most 1000 train and test samples and one
    /// GA generation. Epoch counts are kept; on 1000 samples they are cheap,
    /// and a single noisy epoch leaves DP models near chance.
    pub fn apply_smoke(&mut self) {
        self.smoke = true;
        let cap = |v: Option<usize>| Some(v.map_or(SMOKE_SAMPLES, |n| n.min(SMOKE_SAMPLES)));
        self.data.train_limit = cap(self.data.train_limit);
        self.data.test_limit = cap(self.data.test_limit);
        if let Some(g) = &mut self.ga {
            g.generations = g.generations.min(1);
        }
    }
}

pub const SMOKE_SAMPLES: usize = 1000;

#[cfg(test)]
mod tests {
    use super::*;

    const DP: &str = r#"
mode = "dp_train"
seed = 3
[data]
dataset = "mnist"
[model]
activation = "bounded_relu"
bound = 2.0
[dp]
schedule = [{ sigma = 1.0, epochs = 4 }]
"#;

    #[test]
    fn defaults_are_filled_and_round_trip() {
        let cfg = ExperimentConfig::from_toml_str(DP).unwrap();
        assert_eq!(cfg.model.arch, Arch::MnistCnn);
        assert_eq!(cfg.train.batch_size, 256);
        assert_eq!(cfg.train.sampling, Sampling::Poisson);
        assert_eq!(cfg.dp.clip, 1.0);
        let text = cfg.to_toml();
        for key in ["clip = 1.0", "delta = ", "lr = 0.1", "sampling = \"poisson\"", "batch_size = 256"] {
            assert!(text.contains(key), "{key} missing from\n{text}");
        }
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn ga_and_mia_configs_round_trip() {
        let ga = DP.replace("dp_train", "ga") + "[ga]\nlr_bounds = [0.01, 0.3]\n";
        let cfg = ExperimentConfig::from_toml_str(&ga).unwrap();
        assert_eq!(cfg.ga.as_ref().unwrap().lr_bounds, GeneBounds::new(0.01, 0.3).unwrap());
        assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        let mia = DP.replace("dp_train", "mia") + "[train]\nepochs = 3\n";
        let cfg = ExperimentConfig::from_toml_str(&mia).unwrap();
        assert_eq!(cfg.mia.as_ref().unwrap().n_shadows, vec![2, 4, 6, 8, 10]);
        assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        assert!(ExperimentConfig::from_toml_str(&(ga + "a_bounds = [3.0, 1.0]\n")).is_err());
    }

    #[test]
    fn missing_keys_are_named() {
        let err = ExperimentConfig::from_toml_str(&DP.replace("bound = 2.0", "")).unwrap_err();
        assert!(err.to_string().contains("model.bound"), "{err}");
        let err = ExperimentConfig::from_toml_str("mode = \"plain_train\"\n[data]\ndataset = \"mnist\"\n[model]\nactivation = \"relu\"\n")
            .unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
        let err = ExperimentConfig::from_toml_str("seed = 1").unwrap_err();
        assert!(err.to_string().contains("`mode`"), "{err}");
    }

    #[test]
    fn unknown_mode_lists_allowed() {
        let err = ExperimentConfig::from_toml_str("mode = \"fly\"").unwrap_err();
        let msg = err.to_string();
        assert!(err.is_validation());
        for m in Mode::ALL {
            assert!(msg.contains(m.as_str()), "{msg}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str(&format!("{DP}\n[extra]\nx = 1\n")).is_err());
    }

    #[test]
    fn smoke_caps_sizes() {
        let mut cfg = ExperimentConfig::from_toml_str(DP).unwrap();
        cfg.apply_smoke();
        assert_eq!(cfg.data.train_limit, Some(1000));
        assert_eq!(cfg.data.test_limit, Some(1000));
        assert_eq!(cfg.dp.schedule, ExperimentConfig::from_toml_str(DP).unwrap().dp.schedule);
        let keyed = ExperimentConfig::from_toml_str(&format!("smoke = true\n{DP}")).unwrap();
        assert_eq!(keyed, cfg);
    }
}
