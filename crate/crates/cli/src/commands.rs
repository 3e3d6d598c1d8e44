//! The subcommands, as library functions that write into a [`Run`].

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::run::Run;
use crlsc_core::pqkb::{kb_load, kb_save, KnowledgeBase, PqError};
use crlsc_core::rng;
use crlsc_core::semcodec::stage2::reconstruct;
use crlsc_core::semcodec::{
    init_codebook, save_codebook, save_decoder, train_stage2, ChannelModel, CodecError, DecoderParams,
};
use crlsc_core::trainer::{
    build_private_kb, linear_probe_eval, load_dataset, load_encoder, save_encoder, train_stage1, AugmentationConfig,
    Dataset, EncoderParams, EpochMetrics, ProbeReport, TeacherEncoder, TrainError,
};
use crlsc_net::{sha256_file, transfer_demo, DeviceConfig, NetError, RemoteKb, TransferConfig, TransferReport};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(std::io::Error, TrainError, PqError, CodecError, NetError);

pub type Result<T> = std::result::Result<T, CliError>;

/// Where stage 1 finds its shared knowledge base.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SkbSource {
    File(PathBuf),
    Remote(String),
}

impl SkbSource {
    /// An existing path is a file; anything else that looks like
    /// `host:port` is an address.
    pub fn parse(s: &str) -> Self {
        if Path::new(s).exists() || (s.parse::<SocketAddr>().is_err() && !s.contains(':')) {
            SkbSource::File(s.into())
        } else {
            SkbSource::Remote(s.into())
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KbSummary {
    pub path: PathBuf,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub k_star: usize,
    /// `m · d* · k*`.
    pub codebook_scalars: usize,
    pub code_bytes: usize,
    pub file_bytes: u64,
    pub sha256: String,
}

fn kb_summary(kb: &KnowledgeBase, path: &Path, file_bytes: u64) -> Result<KbSummary> {
    let l = kb.layout();
    Ok(KbSummary {
        path: path.into(),
        n: kb.len(),
        d: l.d,
        m: l.m,
        k_star: l.k_star,
        codebook_scalars: l.storage_scalars(),
        code_bytes: kb.len() * l.m * l.index_width(),
        file_bytes,
        sha256: sha256_file(path)?,
    })
}

/// Embeds a dataset with the teacher and writes it as a shared knowledge
/// base. Without `dataset`, the public synthetic draw (`skb.*`) is used.
pub fn build_kb(cfg: &RunConfig, run: &mut Run, dataset: Option<&Path>, out: Option<&Path>) -> Result<KbSummary> {
    let ds = match dataset {
        Some(p) => load_dataset(p)?,
        None => Dataset::synthetic(&cfg.skb_spec())?,
    };
    let shape = ds.shape().ok_or_else(|| CliError::Runtime("dataset is empty".into()))?;
    let teacher = TeacherEncoder::new(shape, cfg.train.dim, cfg.teacher_seed)?;
    let vectors = teacher.encode_all(&ds.images)?;
    let kb = KnowledgeBase::build(
        &vectors,
        (0..ds.len() as u64).collect(),
        Some(ds.labels.clone()),
        &cfg.pq_config(),
        "skb:teacher",
    )?;
    let path = out.map_or_else(|| run.path("skb.crkb"), PathBuf::from);
    let bytes = kb_save(&kb, &path)?;
    let s = kb_summary(&kb, &path, bytes)?;
    run.metric("build-kb", None, "entries", s.n as f64)?;
    run.metric("build-kb", None, "codebook_scalars", s.codebook_scalars as f64)?;
    run.metric("build-kb", None, "file_bytes", s.file_bytes as f64)?;
    info!("wrote {} ({} entries, {} bytes)", path.display(), s.n, s.file_bytes);
    Ok(s)
}

fn record_stage1(run: &mut Run, phase: &str, metrics: &[EpochMetrics]) -> Result<()> {
    for m in metrics {
        run.metric(phase, Some(m.epoch), "loss", m.loss)?;
        run.metric(phase, Some(m.epoch), "lr", m.lr)?;
        run.timing(phase, Some(m.epoch), m.wall_ms)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct EncoderSummary {
    pub path: PathBuf,
    pub epochs: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Stage 1 on the `data.*` draw, guided by `skb` or, with `None`, without
/// any knowledge base.
pub fn train_encoder(cfg: &RunConfig, run: &mut Run, skb: Option<&SkbSource>) -> Result<(EncoderParams, EncoderSummary)> {
    let ds = Dataset::synthetic(&cfg.train_spec())?;
    let aug = AugmentationConfig::default();
    let (enc, metrics) = match skb {
        None => train_stage1(&ds, None, &cfg.train, &aug)?,
        Some(SkbSource::File(p)) => {
            let kb = kb_load(p)?;
            train_stage1(&ds, Some(&kb), &cfg.train, &aug)?
        }
        Some(SkbSource::Remote(addr)) => {
            let remote = RemoteKb::connect(addr, cfg.timeout())?;
            train_stage1(&ds, Some(&remote), &cfg.train, &aug)?
        }
    };
    record_stage1(run, "stage1", &metrics)?;
    let path = run.path("encoder.cren");
    save_encoder(&enc, &path)?;
    let summary = EncoderSummary {
        path,
        epochs: metrics.len(),
        first_loss: metrics.first().map(|m| m.loss),
        final_loss: metrics.last().map(|m| m.loss),
    };
    Ok((enc, summary))
}

#[derive(Debug, Clone, Serialize)]
pub struct DecoderSummary {
    pub codebook_path: PathBuf,
    pub decoder_path: PathBuf,
    pub first_mse: Option<f64>,
    pub final_mse: Option<f64>,
    /// Held-out reconstruction MSE over a noiseless channel.
    pub test_mse_noiseless: f64,
    /// Held-out reconstruction MSE at `codec.channel_p`.
    pub test_mse_channel: f64,
}

/// Stage 2 with the encoder frozen.
pub fn train_decoder(cfg: &RunConfig, run: &mut Run, encoder: &EncoderParams) -> Result<DecoderSummary> {
    let ds = Dataset::synthetic(&cfg.codec_train_spec())?;
    let shape = ds.shape().ok_or_else(|| CliError::Runtime("dataset is empty".into()))?;
    let s2 = cfg.stage2();
    let codebook = init_codebook(encoder, &ds, &s2)?;
    let decoder = DecoderParams::init(encoder.output_dim(), &s2.hidden, shape, &mut rng::stream(cfg.seed(), &[0xDEC]))?;
    let channel = cfg.channel(cfg.channel_p);
    let out = train_stage2(encoder, decoder, codebook, &ds, &channel, &s2)?;
    for e in &out.epochs {
        run.metric("stage2", Some(e.epoch), "mse", e.mse)?;
        run.metric("stage2", Some(e.epoch), "codebook_loss", e.codebook_loss)?;
        run.metric("stage2", Some(e.epoch), "lr", e.lr)?;
        run.timing("stage2", Some(e.epoch), e.wall_ms)?;
    }
    let codebook_path = run.path("codebook.crvq");
    let decoder_path = run.path("decoder.crde");
    save_codebook(&out.codebook, &codebook_path)?;
    save_decoder(&out.decoder, &decoder_path)?;

    let test = Dataset::synthetic(&cfg.codec_test_spec())?;
    let (_, test_mse_noiseless) =
        reconstruct(encoder, &out.codebook, &out.decoder, &test.images, s2.tokens, &ChannelModel::noiseless())?;
    let (_, test_mse_channel) = reconstruct(encoder, &out.codebook, &out.decoder, &test.images, s2.tokens, &channel)?;
    run.metric("recon", None, "mse_noiseless", test_mse_noiseless)?;
    run.metric("recon", None, "mse_channel", test_mse_channel)?;
    Ok(DecoderSummary {
        codebook_path,
        decoder_path,
        first_mse: out.epochs.first().map(|e| e.mse),
        final_mse: out.epochs.last().map(|e| e.mse),
        test_mse_noiseless,
        test_mse_channel,
    })
}

pub fn load_encoder_file(path: &Path) -> Result<EncoderParams> {
    Ok(load_encoder(path)?)
}

/// Probe on frozen embeddings: trained on the `data.*` draw, scored on
/// `dataset` or the held-out draw.
pub fn eval(cfg: &RunConfig, run: &mut Run, encoder: &EncoderParams, dataset: Option<&Path>) -> Result<ProbeReport> {
    let train = Dataset::synthetic(&cfg.train_spec())?;
    let test = match dataset {
        Some(p) => load_dataset(p)?,
        None => Dataset::synthetic(&cfg.test_spec())?,
    };
    let report = linear_probe_eval(encoder, &train, &test, &cfg.probe())?;
    run.metric("eval", None, "top1", report.top1)?;
    run.metric("eval", None, "top5", report.top5)?;
    Ok(report)
}

pub fn transfer_config(cfg: &RunConfig, skb_path: &Path, work_dir: &Path) -> TransferConfig {
    let device = |name: &str, train, test| DeviceConfig { name: name.into(), train, test, stage1: cfg.train.clone() };
    TransferConfig {
        skb_path: skb_path.into(),
        work_dir: work_dir.into(),
        bind: "127.0.0.1:0".into(),
        device_a: device("a", cfg.train_spec(), cfg.test_spec()),
        device_b: device(
            "b",
            cfg.data.with_samples(cfg.device_b_seed, cfg.data.per_class),
            cfg.data.with_samples(cfg.device_b_test_seed, cfg.test_per_class),
        ),
        aug: AugmentationConfig::default(),
        pkb: cfg.pq_config(),
        probe: cfg.probe(),
        timeout: cfg.timeout(),
    }
}

/// SKB → device A → PKB → device B over local sockets, plus the never-guided
/// baseline for B. Builds the shared knowledge base first when `skb` is `None`.
pub fn transfer(cfg: &RunConfig, run: &mut Run, skb: Option<&Path>) -> Result<TransferReport> {
    let skb_path = match skb {
        Some(p) => p.to_path_buf(),
        None => build_kb(cfg, run, None, None)?.path,
    };
    let report = transfer_demo(&transfer_config(cfg, &skb_path, &run.dir))?;
    for (phase, dev) in [("device-a", &report.device_a), ("device-b", &report.device_b), ("baseline-b", &report.baseline_b)] {
        record_stage1(run, phase, &dev.metrics)?;
        run.metric(phase, None, "top1", dev.probe.top1)?;
        run.metric(phase, None, "top5", dev.probe.top5)?;
    }
    run.metric("transfer", None, "top1_gain", report.top1_gain)?;
    run.write_json("report.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct E2eSummary {
    pub run_id: String,
    pub seed: u64,
    pub skb: KbSummary,
    pub pkb: KbSummary,
    pub encoder: EncoderSummary,
    pub decoder: DecoderSummary,
    pub probe: ProbeReport,
    /// File name → SHA-256 of every artifact.
    pub artifacts: BTreeMap<String, String>,
}

/// build-kb → train-encoder → private knowledge base → train-decoder → eval.
pub fn e2e(cfg: &RunConfig, run: &mut Run) -> Result<E2eSummary> {
    let skb = build_kb(cfg, run, None, None)?;
    let (encoder, enc_summary) = train_encoder(cfg, run, Some(&SkbSource::File(skb.path.clone())))?;
    let train = Dataset::synthetic(&cfg.train_spec())?;
    let pkb = build_private_kb(&encoder, &train, &cfg.pq_config(), "local")?;
    let pkb_path = run.path("pkb.crkb");
    let pkb_bytes = kb_save(&pkb, &pkb_path)?;
    let pkb = kb_summary(&pkb, &pkb_path, pkb_bytes)?;
    run.metric("build-pkb", None, "entries", pkb.n as f64)?;
    let decoder = train_decoder(cfg, run, &encoder)?;
    let probe = eval(cfg, run, &encoder, None)?;
    let mut artifacts = BTreeMap::new();
    for name in ["skb.crkb", "encoder.cren", "pkb.crkb", "codebook.crvq", "decoder.crde", "metrics.jsonl"] {
        if name == "metrics.jsonl" {
            run.flush()?;
        }
        artifacts.insert(name.to_string(), sha256_file(run.path(name))?);
    }
    // paths relative to the run directory, so the summary is independent of --out
    let rel = |p: &mut PathBuf| {
        if let Ok(r) = p.strip_prefix(&run.dir) {
            *p = r.to_path_buf();
        }
    };
    let (mut skb, mut pkb, mut enc_summary, mut decoder) = (skb, pkb, enc_summary, decoder);
    for p in [&mut skb.path, &mut pkb.path, &mut enc_summary.path, &mut decoder.codebook_path, &mut decoder.decoder_path] {
        rel(p);
    }
    let summary = E2eSummary {
        run_id: run.id.clone(),
        seed: cfg.seed(),
        skb,
        pkb,
        encoder: enc_summary,
        decoder,
        probe,
        artifacts,
    };
    run.write_json("summary.json", &summary)?;
    Ok(summary)
}
