use std::sync::OnceLock;

use wmark_core::attacks::{fine_tune_attack, prune_attack, AttackContext};
use wmark_core::codec::{build_trigger_set, CodeSequence, EncoderSpec, TriggerEncoder};
use wmark_core::data::{Dataset, SyntheticTaskSpec};
use wmark_core::experiment::{build_classifier, Architecture};
use wmark_core::injector::{inject, Backdoor, InjectionConfig, Scheme};
use wmark_core::nn::{evaluate_accuracy, TrainConfig};
use wmark_core::package::WatermarkPackage;
use wmark_core::verifier::{build_evidence, next_round, verify, Evidence, MatchMode, VerificationConfig};
use wmark_core::Error;

const N: usize = 20;
const K: usize = 6;

/// A fresh desk classifier with 20 triggers injected on their own
/// (scheme B, no generator or data needed).
fn package() -> &'static WatermarkPackage {
    static PKG: OnceLock<WatermarkPackage> = OnceLock::new();
    PKG.get_or_init(|| {
        let model = build_classifier(Architecture::Desk, &[1, 16, 16], 10, 3).unwrap();
        let encoder = EncoderSpec::seeded_noise([1, 16, 16]);
        let seq = CodeSequence::build(b"verification-tests", N).unwrap();
        let triggers = build_trigger_set(&seq, &encoder, 10).unwrap();
        let cfg = InjectionConfig {
            scheme: Scheme::Solely,
            backdoor: Backdoor::Trigger,
            trigger_acc_target: 1.0,
            learning_rate: 0.05,
            ..Default::default()
        };
        let pkg = inject(&model, &triggers, &encoder, None, None, &cfg, 3).unwrap();
        assert!(!pkg.meta.below_target);
        pkg
    })
}

fn exact() -> VerificationConfig {
    VerificationConfig::exact(10, 0.05)
}

fn data(n: usize, seed: u64) -> Dataset {
    SyntheticTaskSpec::default().generate(n, seed).unwrap()
}

#[test]
fn every_window_passes() {
    let pkg = package();
    for k_prime in 0..=N - K {
        let ev = build_evidence(pkg, K, k_prime).unwrap();
        let res = verify(&pkg.model, &ev, &pkg.encoder, &exact()).unwrap();
        assert!(res.passed(), "window {k_prime}: {res:?}");
        assert_eq!(res.acc, K);
        assert_eq!(res.tallies(), [K; 4]);
        // the last two rows have no successors inside the window
        assert!(res.per_row[K - 2].chain.is_none() && res.per_row[K - 1].chain.is_none());
    }
}

#[test]
fn windows_are_bounded() {
    let pkg = package();
    assert!(matches!(build_evidence(pkg, K, N - K + 1), Err(Error::Bounds { .. })));
    assert!(matches!(build_evidence(pkg, 0, 0), Err(Error::Bounds { .. })));
    assert!(matches!(next_round(pkg, N - K + 1, K), Err(Error::ProtocolExhausted { .. })));
    assert_eq!(next_round(pkg, 4, K).unwrap(), build_evidence(pkg, K, 4).unwrap());
}

#[test]
fn substituted_code_breaks_its_links() {
    let pkg = package();
    let mut ev = build_evidence(pkg, K, 0).unwrap();
    let stranger = CodeSequence::build(b"someone else", 3).unwrap().codes()[0];
    ev.rows[3].code = stranger;
    let res = verify(&pkg.model, &ev, &pkg.encoder, &exact()).unwrap();
    // row 3 appears in the links of rows 1, 2 and 3
    for i in 1..=3 {
        assert_eq!(res.per_row[i].chain, Some(false), "row {i}");
    }
    assert!(!res.per_row[3].encoder);
    assert!(res.acc <= K - 3);
}

#[test]
fn exact_and_fuzzy_matching() {
    let pkg = package();
    let mut ev = build_evidence(pkg, K, 0).unwrap();
    for row in &mut ev.rows {
        row.image[0] += 0.01;
    }
    let res = verify(&pkg.model, &ev, &pkg.encoder, &exact()).unwrap();
    assert!(res.per_row.iter().all(|r| !r.encoder));
    assert!(!res.passed());

    let l1 = res.per_row[0].l1;
    assert!((l1 - 0.01 / 256.0).abs() < 1e-7, "{l1}");
    let fuzzy = |eps: f32| VerificationConfig {
        epsilon: eps,
        match_mode: MatchMode::Fuzzy,
        ..exact()
    };
    let res = verify(&pkg.model, &ev, &pkg.encoder, &fuzzy(1e-4)).unwrap();
    assert!(res.per_row.iter().all(|r| r.encoder));
    let res = verify(&pkg.model, &ev, &pkg.encoder, &fuzzy(1e-6)).unwrap();
    assert!(res.per_row.iter().all(|r| !r.encoder));
}

#[test]
fn wrong_labels_fail() {
    let pkg = package();
    let mut ev = build_evidence(pkg, K, 0).unwrap();
    for row in &mut ev.rows {
        row.label = (row.label + 1) % 10;
    }
    let res = verify(&pkg.model, &ev, &pkg.encoder, &exact()).unwrap();
    assert_eq!(res.tallies()[1], 0);
    assert_eq!(res.acc, 0);
    assert!(!res.passed());
}

#[test]
fn untrained_model_fails_honest_evidence() {
    let pkg = package();
    let other = build_classifier(Architecture::Desk, &[1, 16, 16], 10, 4).unwrap();
    let ev = build_evidence(pkg, K, 0).unwrap();
    let res = verify(&other, &ev, &pkg.encoder, &exact()).unwrap();
    assert_eq!(res.tallies()[0], K);
    assert!(!res.passed(), "{res:?}");
}

#[test]
fn malformed_inputs_are_errors() {
    let pkg = package();
    let ev = build_evidence(pkg, K, 0).unwrap();

    let short = Evidence {
        k_prime: 0,
        rows: ev.rows[..2].to_vec(),
    };
    assert!(matches!(verify(&pkg.model, &short, &pkg.encoder, &exact()), Err(Error::Protocol(_))));

    let mut cropped = ev.clone();
    cropped.rows[0].image.pop();
    assert!(verify(&pkg.model, &cropped, &pkg.encoder, &exact()).is_err());

    assert!(verify(&pkg.model, &ev, &pkg.encoder, &VerificationConfig::exact(9, 0.05)).is_err());
    assert!(verify(&pkg.model, &ev, &pkg.encoder, &VerificationConfig::exact(10, 1.0)).is_err());

    let doc = ev.to_document();
    assert_eq!(Evidence::from_document(&doc).unwrap(), ev);
    assert!(Evidence::from_document(&doc.replacen("\"K\": 6", "\"K\": 5", 1)).is_err());
    assert!(Evidence::from_document(&doc.replacen("\"label\"", "\"lable\"", 1)).is_err());
    assert!(Evidence::from_document(&doc[..doc.len() - 10]).is_err());
}

#[test]
fn package_round_trip() {
    let pkg = package();
    let dir = tempfile::tempdir().unwrap();
    pkg.save(dir.path()).unwrap();
    let back = WatermarkPackage::load(dir.path()).unwrap();
    assert_eq!(&back, pkg);
    let ev = build_evidence(pkg, K, 2).unwrap();
    assert_eq!(
        verify(&pkg.model, &ev, &pkg.encoder, &exact()).unwrap(),
        verify(&back.model, &ev, &back.encoder, &exact()).unwrap()
    );
    let images: Vec<Vec<f32>> = back.triggers.rows.iter().map(|r| back.encoder.encode(&r.code)).collect();
    assert!(back.triggers.rows.iter().zip(&images).all(|(r, img)| &r.image == img));
}

#[test]
fn attacks_leave_the_package_alone() {
    let pkg = package();
    let before = pkg.clone();
    let test = data(200, 11);
    let ctx = AttackContext::for_package(pkg, test.clone(), 0.05).unwrap();
    let tc = TrainConfig {
        learning_rate: 0.01,
        batch_size: 32,
        epochs: 2,
        seed: 1,
    };
    let out = fine_tune_attack(pkg, &ctx, &data(200, 12), &tc).unwrap();
    assert_eq!(pkg, &before);
    assert_eq!(out.normal_acc_curve.len(), 3);
    assert_eq!(out.normal_acc_curve[0], evaluate_accuracy(&pkg.model, &test).unwrap());
    assert_eq!(out.trigger_acc_curve[0], 1.0);
    let attacked = out.model_attacked.as_ref().unwrap();
    assert_eq!(out.final_normal_acc(), evaluate_accuracy(attacked, &test).unwrap());

    let sweep = prune_attack(pkg, &ctx, &[0.0, 0.5, 0.99]).unwrap();
    assert_eq!(pkg, &before);
    assert_eq!(sweep[0].final_trigger_acc(), 1.0);
    assert!(prune_attack(pkg, &ctx, &[0.5, 0.2]).is_err());
}
