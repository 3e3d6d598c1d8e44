//! Two-device knowledge transfer over real sockets.
//!
//! The shared knowledge base is served; device A trains against it, builds
//! a private knowledge base from its own data and serves that; device B
//! trains against A's private knowledge base. B is compared with a run on the
//! same data, seeds and budget that never sees a knowledge base.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::remote::RemoteKb;
use crate::server::serve_kb;
use crate::NetError;
use crlsc_core::pqkb::{kb_load, kb_save, PQConfig};
use crlsc_core::trainer::{
    build_private_kb, linear_probe_eval, train_stage1, AugmentationConfig, Dataset, EncoderParams, EpochMetrics,
    ProbeConfig, ProbeReport, SyntheticDatasetSpec, TrainConfig,
};

#[derive(Debug, Clone)]
pub struct DeviceConfig {
    pub name: String,
    pub train: SyntheticDatasetSpec,
    pub test: SyntheticDatasetSpec,
    pub stage1: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct TransferConfig {
    pub skb_path: PathBuf,
    /// Receives `pkb_<name>.crkb`.
    pub work_dir: PathBuf,
    /// Address the demo's servers bind to; port 0 picks a free one.
    pub bind: String,
    pub device_a: DeviceConfig,
    pub device_b: DeviceConfig,
    pub aug: AugmentationConfig,
    pub pkb: PQConfig,
    pub probe: ProbeConfig,
    pub timeout: Duration,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviceReport {
    pub metrics: Vec<EpochMetrics>,
    pub probe: ProbeReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct TransferReport {
    pub skb_path: String,
    pub skb_sha256: String,
    pub skb_entries: usize,
    pub pkb_path: String,
    pub pkb_sha256: String,
    pub pkb_entries: usize,
    pub pkb_bytes: u64,
    pub device_a: DeviceReport,
    pub device_b: DeviceReport,
    pub baseline_b: DeviceReport,
    /// Device B top-1 minus baseline top-1.
    pub top1_gain: f64,
}

pub fn sha256_file(path: impl AsRef<Path>) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn stage<T, E>(name: &'static str, r: Result<T, E>) -> Result<T, NetError>
where
    E: std::error::Error + Send + Sync + 'static,
{
    r.map_err(|e| NetError::Stage { stage: name, source: Box::new(e) })
}

fn probe(enc: &EncoderParams, dev: &DeviceConfig, cfg: &ProbeConfig) -> Result<ProbeReport, NetError> {
    let train = stage("probe", Dataset::synthetic(&dev.train))?;
    let test = stage("probe", Dataset::synthetic(&dev.test))?;
    stage("probe", linear_probe_eval(enc, &train, &test, cfg))
}

pub fn transfer_demo(cfg: &TransferConfig) -> Result<TransferReport, NetError> {
    let skb = stage("load-skb", kb_load(&cfg.skb_path))?;
    let skb_sha256 = stage("load-skb", sha256_file(&cfg.skb_path))?;
    let skb_entries = skb.len();
    let skb_server = stage("serve-skb", serve_kb(Arc::new(skb), cfg.bind.as_str()))?;
    let skb_addr = skb_server.local_addr().to_string();
    info!("shared knowledge base on {skb_addr}");

    let a_data = stage("train-device-a", Dataset::synthetic(&cfg.device_a.train))?;
    let a_remote = stage("train-device-a", RemoteKb::connect(&skb_addr, cfg.timeout))?;
    let (a_enc, a_metrics) =
        stage("train-device-a", train_stage1(&a_data, Some(&a_remote), &cfg.device_a.stage1, &cfg.aug))?;
    drop(a_remote);
    skb_server.shutdown();

    let pkb = stage("build-pkb", build_private_kb(&a_enc, &a_data, &cfg.pkb, &cfg.device_a.name))?;
    stage("build-pkb", fs::create_dir_all(&cfg.work_dir))?;
    let pkb_path = cfg.work_dir.join(format!("pkb_{}.crkb", cfg.device_a.name));
    let pkb_bytes = stage("build-pkb", kb_save(&pkb, &pkb_path))?;
    let pkb_sha256 = stage("build-pkb", sha256_file(&pkb_path))?;
    let pkb_entries = pkb.len();
    let pkb_server = stage("serve-pkb", serve_kb(Arc::new(pkb), cfg.bind.as_str()))?;
    let pkb_addr = pkb_server.local_addr().to_string();
    info!("device {} private knowledge base on {pkb_addr}", cfg.device_a.name);

    let b_data = stage("train-device-b", Dataset::synthetic(&cfg.device_b.train))?;
    let b_remote = stage("train-device-b", RemoteKb::connect(&pkb_addr, cfg.timeout))?;
    let (b_enc, b_metrics) =
        stage("train-device-b", train_stage1(&b_data, Some(&b_remote), &cfg.device_b.stage1, &cfg.aug))?;
    drop(b_remote);
    pkb_server.shutdown();

    let (base_enc, base_metrics) = stage("train-baseline-b", train_stage1(&b_data, None, &cfg.device_b.stage1, &cfg.aug))?;

    let device_a = DeviceReport { metrics: a_metrics, probe: probe(&a_enc, &cfg.device_a, &cfg.probe)? };
    let device_b = DeviceReport { metrics: b_metrics, probe: probe(&b_enc, &cfg.device_b, &cfg.probe)? };
    let baseline_b = DeviceReport { metrics: base_metrics, probe: probe(&base_enc, &cfg.device_b, &cfg.probe)? };
    let top1_gain = device_b.probe.top1 - baseline_b.probe.top1;
    Ok(TransferReport {
        skb_path: cfg.skb_path.display().to_string(),
        skb_sha256,
        skb_entries,
        pkb_path: pkb_path.display().to_string(),
        pkb_sha256,
        pkb_entries,
        pkb_bytes,
        device_a,
        device_b,
        baseline_b,
        top1_gain,
    })
}
