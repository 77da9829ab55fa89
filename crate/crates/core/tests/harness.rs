mod common;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use expamoe::backbone::calibrate_registry;
use expamoe::harness::config::ExperimentConfig;
use expamoe::harness::corruption::{apply_corruption, CorruptionKind, CorruptionSpec};
use expamoe::harness::data::{generate_base_dataset, DatasetSpec};
use expamoe::harness::experiment::source_datasets;
use expamoe::harness::metrics::{summarize, BatchRecord};
use expamoe::harness::records::{read_records, write_records};
use expamoe::harness::stream::{build_stream, default_domains, StreamSpec};
use expamoe::sodd::{batch_mean, mahalanobis, DomainRegistry, DomainStats};
use expamoe::spectral::{dft2d, extract_batch, to_grayscale};
use expamoe::Error;

#[test]
fn base_dataset_is_deterministic_and_balanced() {
    let spec = DatasetSpec {
        samples_per_class: 12,
        ..DatasetSpec::default()
    };
    let a = generate_base_dataset(&spec).unwrap();
    let b = generate_base_dataset(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), spec.classes * 12);
    for class in 0..spec.classes {
        assert_eq!(a.iter().filter(|s| s.class_label == Some(class)).count(), 12);
    }
    assert!(a.iter().all(|s| s.height == 32 && s.width == 32 && s.channels == 3));
    assert!(a.iter().all(|s| s.pixels.iter().all(|p| (0.0..=1.0).contains(p))));
    let other = generate_base_dataset(&DatasetSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn zero_noise_is_identity() {
    let img = random_image(16, 16, 3, &mut ChaCha8Rng::seed_from_u64(1));
    let spec = CorruptionSpec {
        magnitude: Some(0.0),
        ..CorruptionSpec::new(CorruptionKind::GaussianNoise, 5, 3)
    };
    let out = apply_corruption(&img, &spec, 2).unwrap();
    assert_eq!(out.pixels, img.pixels);
    assert_eq!(out.true_domain, Some(2));
}

#[test]
fn brightness_shift_changes_only_the_dc_coefficient() {
    let mut img = random_image(12, 12, 3, &mut ChaCha8Rng::seed_from_u64(2));
    // Keep the shifted image inside the clamp range.
    img.pixels.iter_mut().for_each(|p| *p *= 0.5);
    let spec = CorruptionSpec::new(CorruptionKind::Brightness, 3, 0);
    let shifted = apply_corruption(&img, &spec, 0).unwrap();
    let a = dft2d(&to_grayscale(&img));
    let b = dft2d(&to_grayscale(&shifted));
    for u in 0..12 {
        for v in 0..12 {
            let d = (a.at(u, v) - b.at(u, v)).norm();
            if (u, v) == (0, 0) {
                assert!(d > 1.0);
            } else {
                assert!(d < 1e-9, "coefficient ({u},{v}) moved by {d}");
            }
        }
    }
}

#[test]
fn corruptions_are_deterministic_and_bounded() {
    let img = random_image(32, 32, 3, &mut ChaCha8Rng::seed_from_u64(3));
    for kind in CorruptionKind::ALL {
        for severity in 1..=5 {
            let spec = CorruptionSpec::new(kind, severity, 9);
            let a = apply_corruption(&img, &spec, 0).unwrap();
            assert_eq!(a, apply_corruption(&img, &spec, 0).unwrap(), "{kind:?}");
            assert_eq!(a.pixels.len(), img.pixels.len());
            assert!(a.pixels.iter().all(|p| p.is_finite()));
        }
        assert!(kind.magnitude(0).is_err() && kind.magnitude(6).is_err());
        assert_eq!(kind.name().parse::<CorruptionKind>().unwrap(), kind);
    }
    assert!(matches!("fog".parse::<CorruptionKind>(), Err(Error::UnknownCorruption(_))));
}

fn calibrated() -> (ExperimentConfig, DomainRegistry) {
    let cfg = ExperimentConfig::default().resolved();
    let (train, validation) = source_datasets(&cfg).unwrap();
    let (registry, _) =
        calibrate_registry(&train, &validation, &cfg.spectral, &cfg.sodd, cfg.warmup.batch_size, cfg.warmup_config().seed).unwrap();
    (cfg, registry)
}

fn first_batch(cfg: &ExperimentConfig, spec: &CorruptionSpec) -> Vec<Vec<f64>> {
    let base = generate_base_dataset(&cfg.stream.base).unwrap();
    let imgs: Vec<_> = base[..cfg.stream.batch_size * 8]
        .iter()
        .step_by(8)
        .map(|s| apply_corruption(s, spec, 0).unwrap())
        .collect();
    extract_batch(&imgs, &cfg.spectral).unwrap()
}

/// Replays round 0 of the default stream through the registry alone: every
/// domain's first batch is novel and its later batches are not.
#[test]
fn default_stream_opens_one_domain_per_corruption() {
    let (cfg, mut registry) = calibrated();
    assert!(registry.tau.is_finite() && registry.tau > 0.0);
    let stream = build_stream(&cfg.stream).unwrap();
    for batch in stream.iter().filter(|b| b.round == 0) {
        let desc = extract_batch(&batch.unlabeled(), &cfg.spectral).unwrap();
        let a = registry.assign_batch(&desc).unwrap();
        let nearest = a.distances.iter().cloned().fold(f64::INFINITY, f64::min);
        let label = cfg.stream.domains[batch.domain].label();
        let id = if batch.index == 0 {
            assert!(a.is_new, "{label} at distance {nearest:.2} <= tau {:.2}", registry.tau);
            registry.spawn_domain(&desc).unwrap()
        } else {
            assert!(!a.is_new, "{label} batch {} reopened at {nearest:.2}", batch.index);
            a.domain
        };
        assert_eq!(id, batch.domain + 1, "{label} batch {}", batch.index);
        registry.update_domain(id, &desc).unwrap();
    }
    assert_eq!(registry.len(), 5);
}

#[test]
fn mild_and_severe_corruptions_differ_in_separability() {
    let (cfg, registry) = calibrated();
    let mut mild_below = 0;
    for spec in default_domains() {
        let mild = CorruptionSpec { severity: 1, ..spec.clone() };
        let d_mild = registry.distances(&batch_mean(&first_batch(&cfg, &mild)).unwrap()).unwrap()[0];
        let d_severe = registry.distances(&batch_mean(&first_batch(&cfg, &spec)).unwrap()).unwrap()[0];
        assert!(d_mild < d_severe, "{}: severity 1 {d_mild:.2} vs 5 {d_severe:.2}", spec.kind);
        mild_below += usize::from(d_mild <= registry.tau);
    }
    assert_eq!(mild_below, 4, "mild domains within tau");

    // Haze against additive noise on the same base images, measured with
    // the source covariance around the haze batch mean.
    let haze = batch_mean(&first_batch(&cfg, &CorruptionSpec::new(CorruptionKind::Haze, 5, 1))).unwrap();
    let noise = batch_mean(&first_batch(&cfg, &CorruptionSpec::new(CorruptionKind::GaussianNoise, 5, 2))).unwrap();
    let around_haze = DomainStats {
        mean: haze,
        ..registry.domain(0).unwrap().clone()
    };
    let sep = mahalanobis(&around_haze, &noise, registry.shrinkage).unwrap();
    assert!(sep > registry.tau, "haze to noise {sep:.2} <= tau {:.2}", registry.tau);
}

#[test]
fn stream_layout_and_sampling() {
    let spec = StreamSpec::default();
    let stream = build_stream(&spec).unwrap();
    assert_eq!(stream.len(), 4 * 3 * 10);
    assert_eq!(spec.total_batches(), stream.len());
    let mut expected = Vec::new();
    for round in 0..3 {
        for domain in 0..4 {
            for index in 0..10 {
                expected.push((round, domain, index));
            }
        }
    }
    let got: Vec<_> = stream.iter().map(|b| (b.round, b.domain, b.index)).collect();
    assert_eq!(got, expected);
    for visit in stream.chunks(10) {
        let ids: Vec<usize> = visit.iter().flat_map(|b| b.sample_ids.clone()).collect();
        let unique: BTreeSet<_> = ids.iter().collect();
        assert_eq!(unique.len(), ids.len(), "sample repeated within a visit");
        assert!(visit.iter().all(|b| b.images.len() == 16));
        assert!(visit
            .iter()
            .flat_map(|b| &b.images)
            .all(|s| s.true_domain == Some(visit[0].domain) && s.class_label.is_some()));
    }
    for b in &stream {
        assert!(b.unlabeled().iter().all(|s| s.class_label.is_none() && s.true_domain.is_none()));
        assert_eq!(b.labels().len(), 16);
    }
    assert_eq!(build_stream(&spec).unwrap().iter().map(|b| b.sample_ids.clone()).collect::<Vec<_>>(),
        stream.iter().map(|b| b.sample_ids.clone()).collect::<Vec<_>>());

    let too_many = StreamSpec {
        batches_per_domain: 1000,
        ..StreamSpec::default()
    };
    assert!(build_stream(&too_many).is_err());
}

#[test]
fn records_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let imgs = vec![random_image(3, 5, 1, &mut rng), random_image(4, 4, 3, &mut rng)];
    let mut buf = Vec::new();
    write_records(&mut buf, &imgs).unwrap();
    assert_eq!(buf.len(), 2 * 12 + (15 + 48) * 8);
    let back = read_records(&mut buf.as_slice()).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in imgs.iter().zip(&back) {
        assert_eq!(a.pixels, b.pixels);
        assert_eq!((a.height, a.width, a.channels), (b.height, b.width, b.channels));
    }
    assert!(read_records(&mut &buf[..buf.len() - 1]).is_err());
    assert!(read_records(&mut &buf[..5]).is_err());
}

#[test]
fn metrics_summarize_confusion_and_forgetting() {
    let names = vec!["a".to_string(), "b".to_string()];
    let mut records = Vec::new();
    for round in 0..2 {
        for domain in 0..2 {
            for i in 0..4 {
                records.push(BatchRecord {
                    round,
                    domain,
                    assigned: if domain == 1 && i == 0 { 0 } else { domain },
                    is_new: false,
                    errors: round + domain,
                    samples: 4,
                });
            }
        }
    }
    let m = summarize("full", &names, &records, 1);
    assert_eq!(m.confusion, vec![vec![8, 0], vec![2, 6]]);
    assert_eq!(m.off_diagonal, 2);
    assert!((m.purity - 14.0 / 16.0).abs() < 1e-12);
    assert_eq!(m.visit_error(0, 0), Some(0.0));
    assert_eq!(m.visit_error(1, 1), Some(0.5));
    assert_eq!(m.forgetting, vec![Some(0.25), Some(0.25)]);
    assert!((m.mean_error - 0.25).abs() < 1e-12);
    let csv = m.to_csv();
    assert_eq!(csv.lines().count(), 5);
    let json: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
    assert_eq!(json["spawned"], 1);
}

#[test]
fn config_overrides_merge_and_validate() {
    let cfg = ExperimentConfig::from_toml_str(
        "seed = 3\n[adapt]\nlr = 0.01\n",
        &["adapt.ablation.expandable=false".into(), "stream.rounds=2".into()],
    )
    .unwrap();
    assert_eq!(cfg.adapt.lr, 0.01);
    assert!(!cfg.adapt.ablation.expandable);
    assert!(cfg.adapt.ablation.sodd_routing);
    assert_eq!(cfg.stream.rounds, 2);
    assert_eq!(cfg.stream.batches_per_domain, 10);
    let r = cfg.resolved();
    assert_eq!(r.model.seed, 3);
    assert_ne!(r.adapt.seed, r.stream.seed);

    let text = cfg.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml_str(&text, &[]).unwrap(), cfg);

    assert!(matches!(ExperimentConfig::from_toml_str("[adapt]\nnope = 1\n", &[]), Err(Error::Config(_))));
    assert!(ExperimentConfig::from_toml_str("", &["adapt.lr".into()]).is_err());
    assert!(ExperimentConfig::from_toml_str("", &["stream.batch_size=0".into()]).is_err());
}
