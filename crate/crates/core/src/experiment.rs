//! Experiment configuration and the desk pipeline shared by the command
//! line and the acceptance suite: data, clean model, distillation,
//! encoder, embedding.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{default_fractions, AdversarialConfig};
use crate::capacity::CapacityParams;
use crate::codec::{build_trigger_set, CodeSequence, EncoderSpec, ImageShape};
use crate::data::{load_idx, Dataset, SyntheticTaskSpec};
use crate::dfd::{distill, DistillConfig, Distillation, Generator};
use crate::error::{Error, Result};
use crate::injector::{inject, Backdoor, InjectionConfig, Scheme};
use crate::nn::{desk_classifier, evaluate_accuracy, train, Model, TrainConfig};
use crate::package::WatermarkPackage;
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source")]
pub enum DataSource {
    Builtin {
        #[serde(default)]
        task: SyntheticTaskSpec,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        num_classes: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    /// Owner's training split.
    pub train_size: usize,
    pub test_size: usize,
    /// Same-distribution data held by an attacker; never seen in training.
    pub holdout_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Builtin {
                task: SyntheticTaskSpec::default(),
            },
            train_size: 2000,
            test_size: 1000,
            holdout_size: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Two conv blocks and a dense head.
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    pub architecture: Architecture,
    pub train: TrainConfig,
    /// Minimum test accuracy for a usable clean model.
    pub min_accuracy: f64,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig {
            architecture: Architecture::Desk,
            train: TrainConfig {
                learning_rate: 0.05,
                batch_size: 32,
                epochs: 10,
                seed: 0,
            },
            min_accuracy: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    SeededNoise,
    GeneratorLatent,
    ContinuousLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WatermarkConfig {
    pub encoder: EncoderKind,
    /// Bits of the continuous-linear encoder.
    pub linear_bits: u32,
    pub key: String,
    pub n: usize,
    pub k: usize,
    pub tau: f64,
    pub injection: InjectionConfig,
}

impl Default for WatermarkConfig {
    fn default() -> Self {
        WatermarkConfig {
            encoder: EncoderKind::SeededNoise,
            linear_bits: 16,
            key: "owner".into(),
            n: 50,
            k: 10,
            tau: 0.05,
            injection: InjectionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub fine_tune: TrainConfig,
    pub adversarial: AdversarialConfig,
    /// Whether the adversarial tuner also trains on its held-out data.
    pub adversarial_with_data: bool,
    pub prune_fractions: Vec<f64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            fine_tune: TrainConfig {
                learning_rate: 0.01,
                batch_size: 32,
                epochs: 20,
                seed: 0,
            },
            adversarial: AdversarialConfig::default(),
            adversarial_with_data: true,
            prune_fractions: default_fractions(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CapacityConfig {
    pub params: CapacityParams,
    pub j_max: u64,
    /// Monte Carlo trials per simulated `J` (0 disables simulation).
    pub trials: usize,
    /// Injection sweep for `N_hat`.
    pub sweep_batch: u64,
    pub sweep_max: u64,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        CapacityConfig {
            params: CapacityParams::default(),
            j_max: 10_000,
            trials: 10_000,
            sweep_batch: 50,
            sweep_max: 1000,
        }
    }
}

/// Everything a command needs; every field has a default so a config file
/// only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub clean: CleanConfig,
    pub distill: DistillConfig,
    pub watermark: WatermarkConfig,
    pub attack: AttackConfig,
    pub capacity: CapacityConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            clean: CleanConfig::default(),
            distill: DistillConfig::default(),
            watermark: WatermarkConfig::default(),
            attack: AttackConfig::default(),
            capacity: CapacityConfig::default(),
            seeds: vec![0],
        }
    }
}

impl ExperimentConfig {
    /// Checks cross-module preconditions before any compute.
    pub fn validate(&self) -> Result<()> {
        let w = &self.watermark;
        if w.n < 2 {
            return Err(Error::param("N must be at least 2"));
        }
        if w.k < 3 || w.k > w.n {
            return Err(Error::param(format!("K must lie in [3, N], got K={} N={}", w.k, w.n)));
        }
        if !(w.tau > 0.0 && w.tau < 1.0) {
            return Err(Error::param("tau must lie in (0, 1)"));
        }
        w.injection.validate()?;
        self.clean.train.validate()?;
        if self.distill.steps == 0 {
            return Err(Error::param("distillation needs steps >= 1"));
        }
        self.capacity.params.validate()?;
        if self.data.train_size == 0 || self.data.test_size == 0 {
            return Err(Error::param("train and test splits must be non-empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::param("at least one seed is required"));
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn num_classes(&self) -> usize {
        match &self.data.source {
            DataSource::Builtin { task } => task.num_classes,
            DataSource::Idx { num_classes, .. } => *num_classes,
        }
    }
}

/// Train, test and attacker hold-out splits.
#[derive(Debug, Clone)]
pub struct DeskData {
    pub train: Dataset,
    pub test: Dataset,
    pub holdout: Dataset,
}

impl DeskData {
    /// Builtin data is generated from `seed`; IDX data is read from disk,
    /// the holdout taken from the tail of the training file.
    pub fn load(cfg: &DataConfig, seed: u64) -> Result<Self> {
        match &cfg.source {
            DataSource::Builtin { task } => Ok(DeskData {
                train: task.generate(cfg.train_size, derive_seed(seed, 1))?,
                test: task.generate(cfg.test_size, derive_seed(seed, 2))?,
                holdout: task.generate(cfg.holdout_size, derive_seed(seed, 3))?,
            }),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                num_classes,
            } => {
                let all = load_idx(train_images, train_labels, *num_classes)?;
                let test = load_idx(test_images, test_labels, *num_classes)?;
                let train_n = cfg.train_size.min(all.len());
                let (train, rest) = all.split_at(train_n);
                let hold_n = cfg.holdout_size.min(rest.len());
                let (holdout, _) = rest.split_at(hold_n);
                let test_n = cfg.test_size.min(test.len());
                Ok(DeskData {
                    train,
                    test: test.split_at(test_n).0,
                    holdout,
                })
            }
        }
    }
}

pub fn build_classifier(arch: Architecture, image_shape: &[usize], num_classes: usize, seed: u64) -> Result<Model> {
    match arch {
        Architecture::Desk => Model::new(
            image_shape.to_vec(),
            desk_classifier(image_shape, num_classes)?,
            derive_seed(seed, 0xC1EA),
        ),
    }
}

/// The clean model `M` and its test accuracy.
pub fn train_clean(cfg: &CleanConfig, data: &DeskData, seed: u64) -> Result<(Model, f64)> {
    let mut model = build_classifier(cfg.architecture, data.train.image_shape(), data.train.num_classes(), seed)?;
    let tc = cfg.train.with_seed(derive_seed(seed, cfg.train.seed));
    if train(&mut model, &data.train, &tc)?.diverged {
        return Err(Error::Diverged {
            stage: "clean training".into(),
        });
    }
    let acc = evaluate_accuracy(&model, &data.test)?;
    Ok((model, acc))
}

/// Runs distillation against `clean`, seeding from `seed`.
pub fn distill_clean(cfg: &DistillConfig, clean: &Model, clean_accuracy: f64, seed: u64) -> Result<Distillation> {
    let cfg = DistillConfig {
        seed: derive_seed(seed, cfg.seed),
        teacher_accuracy: Some(clean_accuracy),
        ..*cfg
    };
    distill(clean, &cfg)
}

pub fn build_encoder(cfg: &WatermarkConfig, image_shape: ImageShape, gen: Option<&Generator>, seed: u64) -> Result<EncoderSpec> {
    match cfg.encoder {
        EncoderKind::SeededNoise => Ok(EncoderSpec::seeded_noise(image_shape)),
        EncoderKind::ContinuousLinear => EncoderSpec::continuous_linear(image_shape, cfg.linear_bits, derive_seed(seed, 0xBA5E)),
        EncoderKind::GeneratorLatent => {
            let g = gen.ok_or_else(|| Error::param("generator-latent encoder needs a generator"))?;
            Ok(EncoderSpec::GeneratorLatent {
                generator: Box::new(g.clone()),
            })
        }
    }
}

/// Whether `inject` will need the generator.
pub fn needs_generator(cfg: &WatermarkConfig) -> bool {
    cfg.injection.scheme == Scheme::WithAnchors
        || cfg.injection.backdoor == Backdoor::PostTrigger
        || cfg.encoder == EncoderKind::GeneratorLatent
}

/// Key expansion, trigger set and injection in one call.
pub fn embed_watermark(
    cfg: &WatermarkConfig,
    clean: &Model,
    gen: Option<&Generator>,
    train_data: Option<&Dataset>,
    seed: u64,
) -> Result<WatermarkPackage> {
    let shape: ImageShape = clean
        .input_shape()
        .try_into()
        .map_err(|_| Error::shape("classifier input must be [channels, height, width]"))?;
    let encoder = build_encoder(cfg, shape, gen, seed)?;
    let seq = CodeSequence::build(cfg.key.as_bytes(), cfg.n)?;
    let triggers = build_trigger_set(&seq, &encoder, clean.num_classes())?;
    inject(clean, &triggers, &encoder, gen, train_data, &cfg.injection, seed)
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: ExperimentConfig = toml::from_str("seeds = [3, 4]\n[watermark]\nn = 20\n").unwrap();
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.watermark.n, 20);
        assert_eq!(cfg.watermark.k, 10);
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn bad_window_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.watermark.k = 60;
        assert!(cfg.validate().is_err());
        cfg.watermark.k = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
