use std::time::Duration;

use crlsc_core::pqkb::{kb_load, kb_save, KnowledgeBase, Metric, PQConfig};
use crlsc_core::trainer::{
    AugmentationConfig, Dataset, ProbeConfig, SyntheticDatasetSpec, TeacherEncoder, TrainConfig,
};
use crlsc_net::{sha256_file, transfer_demo, DeviceConfig, TransferConfig};

#[test]
fn zero_epoch_pipeline_completes_with_verifiable_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticDatasetSpec::default();
    let public = Dataset::synthetic(&spec.clone().with_samples(9, 20)).unwrap();
    let teacher = TeacherEncoder::new((8, 8, 3), 64, 7).unwrap();
    let pq = PQConfig::new(64, 8).with_k_star(16).with_metric(Metric::Cosine);
    let skb = KnowledgeBase::build(
        &teacher.encode_all(&public.images).unwrap(),
        (0..public.len() as u64).collect(),
        Some(public.labels.clone()),
        &pq,
        "skb",
    )
    .unwrap();
    let skb_path = dir.path().join("skb.crkb");
    kb_save(&skb, &skb_path).unwrap();

    let stage1 = TrainConfig { epochs: 0, ..TrainConfig::desk_scale() };
    let device = |name: &str, train: u64, test: u64| DeviceConfig {
        name: name.into(),
        train: spec.clone().with_samples(train, 10),
        test: spec.clone().with_samples(test, 5),
        stage1: stage1.clone(),
    };
    let cfg = TransferConfig {
        skb_path: skb_path.clone(),
        work_dir: dir.path().join("work"),
        bind: "127.0.0.1:0".into(),
        device_a: device("a", 1, 2),
        device_b: device("b", 3, 4),
        aug: AugmentationConfig::default(),
        pkb: pq,
        probe: ProbeConfig { epochs: 2, ..ProbeConfig::default() },
        timeout: Duration::from_secs(5),
    };
    let report = transfer_demo(&cfg).unwrap();
    assert_eq!(report.skb_entries, 60);
    assert_eq!(report.pkb_entries, 30);
    assert_eq!(report.skb_sha256, sha256_file(&skb_path).unwrap());
    assert_eq!(report.pkb_sha256, sha256_file(&report.pkb_path).unwrap());
    assert_eq!(report.pkb_bytes, std::fs::metadata(&report.pkb_path).unwrap().len());
    let pkb = kb_load(&report.pkb_path).unwrap();
    assert_eq!(pkb.len(), 30);
    assert_eq!(pkb.source_tag(), "pkb:a");
    assert!(report.device_a.metrics.is_empty());
    assert!(report.baseline_b.probe.top5 >= report.baseline_b.probe.top1);
}

#[test]
fn failing_stage_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticDatasetSpec::default();
    let device = DeviceConfig {
        name: "a".into(),
        train: spec.clone(),
        test: spec,
        stage1: TrainConfig::desk_scale(),
    };
    let cfg = TransferConfig {
        skb_path: dir.path().join("missing.crkb"),
        work_dir: dir.path().into(),
        bind: "127.0.0.1:0".into(),
        device_a: device.clone(),
        device_b: device,
        aug: AugmentationConfig::default(),
        pkb: PQConfig::new(64, 8),
        probe: ProbeConfig::default(),
        timeout: Duration::from_secs(1),
    };
    let err = transfer_demo(&cfg).unwrap_err();
    assert!(err.to_string().contains("load-skb"), "{err}");
}
