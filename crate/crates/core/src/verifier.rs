//! Ownership verification.
//!
//! Evidence is a window of `K` consecutive rows `(code, image, label)` of a
//! package's trigger set starting after offset `K'`. A row counts toward
//! `acc` when the image matches the encoder's output for the code (exactly,
//! or within a per-pixel mean `l1` radius), the label is the code's assigned
//! label, the model predicts that label, and the code links to its two
//! successors through `reduce` (the last two rows have no successors and
//! are exempt). Ownership passes when `Phi((1/C - mu)/sigma) <= tau` with
//! `mu = acc/K` and `sigma = sqrt(mu(1-mu)/K)`.

use serde::{Deserialize, Serialize};

use crate::codec::{assign_label, image_from_base64, image_to_base64, reduce, Code, TriggerEncoder};
use crate::error::{Error, Result};
use crate::injector::{mean_l1, Backdoor};
use crate::nn::Model;
use crate::package::{PackageMeta, WatermarkPackage};

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceRow {
    pub code: Code,
    pub image: Vec<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub k_prime: usize,
    pub rows: Vec<EvidenceRow>,
}

impl Evidence {
    pub fn k(&self) -> usize {
        self.rows.len()
    }
}

/// Rows `K'+1 ..= K'+K` (1-based) of the package's trigger set.
pub fn build_evidence(pkg: &WatermarkPackage, k: usize, k_prime: usize) -> Result<Evidence> {
    let n = pkg.triggers.len();
    if k == 0 || k.checked_add(k_prime).is_none_or(|end| end > n) {
        return Err(Error::Bounds { k, k_prime, n });
    }
    Ok(Evidence {
        k_prime,
        rows: pkg.triggers.rows[k_prime..k_prime + k]
            .iter()
            .map(|r| EvidenceRow {
                code: r.code,
                image: r.image.clone(),
                label: r.label,
            })
            .collect(),
    })
}

/// Evidence for the round after `prev_rounds` completed ones (`K' =
/// prev_rounds`).
pub fn next_round(pkg: &WatermarkPackage, prev_rounds: usize, k: usize) -> Result<Evidence> {
    let n = pkg.triggers.len();
    if k == 0 || prev_rounds + k > n {
        return Err(Error::ProtocolExhausted { prev_rounds, k, n });
    }
    build_evidence(pkg, k, prev_rounds)
}

/// Standard normal CDF.
pub fn gaussian_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchMode {
    Exact,
    Fuzzy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationConfig {
    pub tau: f64,
    /// Per-pixel mean `l1` radius; ignored in exact mode.
    pub epsilon: f32,
    pub match_mode: MatchMode,
    pub num_classes: usize,
}

impl VerificationConfig {
    pub fn exact(num_classes: usize, tau: f64) -> Self {
        VerificationConfig {
            tau,
            epsilon: 0.0,
            match_mode: MatchMode::Exact,
            num_classes,
        }
    }

    /// Exact matching for plain triggers, fuzzy with the stored radius for
    /// post-triggers.
    pub fn for_package(meta: &PackageMeta, tau: f64) -> Self {
        VerificationConfig {
            tau,
            epsilon: meta.epsilon,
            match_mode: match meta.backdoor {
                Backdoor::Trigger => MatchMode::Exact,
                Backdoor::PostTrigger => MatchMode::Fuzzy,
            },
            num_classes: meta.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::param(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::param("epsilon must be a finite non-negative number"));
        }
        if self.num_classes < 2 {
            return Err(Error::param("need at least two classes"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowCheck {
    /// Image matches the encoder output for the code.
    pub encoder: bool,
    /// Label equals the code's assigned label.
    pub label: bool,
    /// Model predicts the label.
    pub prediction: bool,
    /// Chain link to the next two codes; `None` for the last two rows.
    pub chain: Option<bool>,
    /// Per-pixel mean `l1` distance to the encoder output.
    pub l1: f32,
    /// `l2` distance to the encoder output (diagnostic only).
    pub l2: f32,
}

impl RowCheck {
    pub fn counted(&self) -> bool {
        self.encoder && self.label && self.prediction && self.chain.unwrap_or(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub decision: Decision,
    pub acc: usize,
    pub k: usize,
    pub mu_hat: f64,
    pub sigma_hat: f64,
    /// `(1/C - mu_hat) / sigma_hat`; infinite when `sigma_hat = 0`.
    pub z: f64,
    /// `Phi(z)`, compared against `tau`.
    pub statistic: f64,
    pub per_row: Vec<RowCheck>,
}

impl VerificationResult {
    pub fn passed(&self) -> bool {
        self.decision == Decision::Pass
    }

    /// Rows passing each condition: encoder, label, prediction, chain.
    pub fn tallies(&self) -> [usize; 4] {
        let mut t = [0; 4];
        for r in &self.per_row {
            t[0] += usize::from(r.encoder);
            t[1] += usize::from(r.label);
            t[2] += usize::from(r.prediction);
            t[3] += usize::from(r.chain.unwrap_or(true));
        }
        t
    }
}

/// The one-sided test on `acc` successes out of `k`.
pub fn decide(acc: usize, k: usize, num_classes: usize, tau: f64) -> (Decision, f64, f64, f64, f64) {
    let mu = acc as f64 / k as f64;
    let sigma = (mu * (1.0 - mu) / k as f64).sqrt();
    let chance = 1.0 / num_classes as f64;
    if sigma == 0.0 {
        let (z, stat) = if mu > chance {
            (f64::NEG_INFINITY, 0.0)
        } else {
            (f64::INFINITY, 1.0)
        };
        let d = if mu > chance { Decision::Pass } else { Decision::Fail };
        return (d, mu, sigma, z, stat);
    }
    let z = (chance - mu) / sigma;
    let stat = gaussian_cdf(z);
    let d = if stat <= tau { Decision::Pass } else { Decision::Fail };
    (d, mu, sigma, z, stat)
}

pub fn verify(
    model: &Model,
    ev: &Evidence,
    encoder: &dyn TriggerEncoder,
    cfg: &VerificationConfig,
) -> Result<VerificationResult> {
    cfg.validate()?;
    if model.num_classes() != cfg.num_classes {
        return Err(Error::shape(format!(
            "model has {} classes, verification expects {}",
            model.num_classes(),
            cfg.num_classes
        )));
    }
    let k = ev.k();
    if k < 3 {
        return Err(Error::Protocol(format!(
            "K={k}: at least three rows are needed to check one chain link"
        )));
    }
    let len = encoder.image_len();
    if let Some(bad) = ev.rows.iter().find(|r| r.image.len() != len) {
        return Err(Error::format(format!(
            "evidence image has {} pixels, encoder produces {len}",
            bad.image.len()
        )));
    }
    let images: Vec<&[f32]> = ev.rows.iter().map(|r| r.image.as_slice()).collect();
    let batch = crate::nn::Tensor::stack(&encoder.image_shape(), &images)?;
    let predictions = model.predict(&batch)?;
    let per_row: Vec<RowCheck> = ev
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let expected = encoder.encode(&row.code);
            let l1 = mean_l1(&expected, &row.image);
            let l2 = crate::injector::l2_distance(&expected, &row.image);
            let encoder_ok = match cfg.match_mode {
                MatchMode::Exact => expected == row.image,
                MatchMode::Fuzzy => l1 <= cfg.epsilon,
            };
            let chain = (i + 2 < k).then(|| row.code == reduce(&ev.rows[i + 1].code, &ev.rows[i + 2].code));
            RowCheck {
                encoder: encoder_ok,
                label: assign_label(&row.code, cfg.num_classes).ok() == Some(row.label),
                prediction: predictions[i] == row.label,
                chain,
                l1,
                l2,
            }
        })
        .collect();
    let acc = per_row.iter().filter(|r| r.counted()).count();
    let (decision, mu_hat, sigma_hat, z, statistic) = decide(acc, k, cfg.num_classes, cfg.tau);
    Ok(VerificationResult {
        decision,
        acc,
        k,
        mu_hat,
        sigma_hat,
        z,
        statistic,
        per_row,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RowDoc {
    code_hex: Code,
    label: usize,
    image_b64: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvidenceDoc {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "K_prime")]
    k_prime: usize,
    rows: Vec<RowDoc>,
}

impl Evidence {
    /// JSON `{K, K_prime, rows: [{code_hex, label, image_b64}]}` in that
    /// field order; images are base64 little-endian `f32`.
    pub fn to_document(&self) -> String {
        let doc = EvidenceDoc {
            k: self.k(),
            k_prime: self.k_prime,
            rows: self
                .rows
                .iter()
                .map(|r| RowDoc {
                    code_hex: r.code,
                    label: r.label,
                    image_b64: image_to_base64(&r.image),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("evidence serializes");
        s.push('\n');
        s
    }

    pub fn from_document(text: &str) -> Result<Evidence> {
        let doc: EvidenceDoc = serde_json::from_str(text)?;
        if doc.k != doc.rows.len() {
            return Err(Error::format(format!(
                "evidence declares K={} but has {} rows",
                doc.k,
                doc.rows.len()
            )));
        }
        let rows = doc
            .rows
            .into_iter()
            .map(|r| {
                Ok(EvidenceRow {
                    code: r.code_hex,
                    image: image_from_base64(&r.image_b64)?,
                    label: r.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Evidence {
            k_prime: doc.k_prime,
            rows,
        })
    }
}
