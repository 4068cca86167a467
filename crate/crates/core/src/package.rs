//! Watermark package: the watermarked model with its trigger set, encoder
//! and injection metadata.
//!
//! On disk a package is a directory:
//!
//! ```text
//! model.wmdl      watermarked classifier
//! triggers.json   trigger-set document (post-trigger images for backdoor P)
//! package.json    PackageMeta
//! encoder.wmdl    generator checkpoint, generator-latent encoder only
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{EncoderDescriptor, EncoderSpec, TriggerSet};
use crate::dfd::Generator;
use crate::error::{Error, Result};
use crate::injector::{Backdoor, Scheme};
use crate::nn::Model;

pub const MODEL_FILE: &str = "model.wmdl";
pub const TRIGGERS_FILE: &str = "triggers.json";
pub const META_FILE: &str = "package.json";
pub const ENCODER_FILE: &str = "encoder.wmdl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageMeta {
    pub scheme: Scheme,
    pub backdoor: Backdoor,
    pub n: usize,
    pub num_classes: usize,
    /// Fuzzy-match radius (per-pixel mean `l1`); 0 for plain triggers.
    pub epsilon: f32,
    pub lambda1: f32,
    pub lambda2: f32,
    pub s: usize,
    pub seed: u64,
    pub encoder: EncoderDescriptor,
    pub below_target: bool,
    pub trigger_accuracy: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkPackage {
    pub model: Model,
    pub triggers: TriggerSet,
    pub encoder: EncoderSpec,
    pub meta: PackageMeta,
}

impl WatermarkPackage {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.model.save(&dir.join(MODEL_FILE))?;
        fs::write(dir.join(TRIGGERS_FILE), self.triggers.to_document())?;
        fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&self.meta)?)?;
        if let EncoderSpec::GeneratorLatent { generator } = &self.encoder {
            generator.save(&dir.join(ENCODER_FILE))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = Model::load(&dir.join(MODEL_FILE))?;
        let triggers = TriggerSet::from_document(&fs::read_to_string(dir.join(TRIGGERS_FILE))?)?;
        let meta: PackageMeta = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)?;
        let generator = match meta.encoder {
            EncoderDescriptor::GeneratorLatent { .. } => Some(Generator::load(&dir.join(ENCODER_FILE))?),
            _ => None,
        };
        let encoder = EncoderSpec::from_descriptor(&meta.encoder, generator)?;
        if meta.n != triggers.len() || meta.num_classes != model.num_classes() {
            return Err(Error::format("package metadata disagrees with its contents"));
        }
        Ok(WatermarkPackage {
            model,
            triggers,
            encoder,
            meta,
        })
    }
}
