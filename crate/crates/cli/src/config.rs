//! Plain-text run configuration: one `key = value` per line, `#` starts a
//! comment. Every key has a default; unknown keys are rejected.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crlsc_core::pqkb::{Metric, PQConfig, PqLayout};
use crlsc_core::rng;
use crlsc_core::semcodec::{ChannelModel, Stage2Config};
use crlsc_core::trainer::{ProbeConfig, SyntheticDatasetSpec, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pq_m: usize,
    pub pq_k_star: usize,
    pub pq_iters: usize,
    pub pq_metric: Metric,
    /// Stage-1 settings, including fusion and query noise.
    pub train: TrainConfig,
    pub codec: Stage2Config,
    pub channel_p: f64,
    /// Pixel noise of the stage-2 datasets.
    pub codec_pixel_noise: f64,
    pub net_addr: String,
    pub net_timeout_ms: u64,
    /// Training draw; `sample_seed` is `data.seed`.
    pub data: SyntheticDatasetSpec,
    pub test_seed: u64,
    pub test_per_class: usize,
    pub skb_seed: u64,
    pub skb_per_class: usize,
    pub teacher_seed: u64,
    pub probe: ProbeConfig,
    pub device_b_seed: u64,
    pub device_b_test_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pq_m: 8,
            pq_k_star: 16,
            pq_iters: 25,
            pq_metric: Metric::Cosine,
            train: TrainConfig::desk_scale(),
            codec: Stage2Config::default(),
            channel_p: 0.0,
            codec_pixel_noise: 0.05,
            net_addr: format!("127.0.0.1:{}", crlsc_net::DEFAULT_PORT),
            net_timeout_ms: 5000,
            data: SyntheticDatasetSpec::default(),
            test_seed: 2,
            test_per_class: 100,
            skb_seed: 9,
            skb_per_class: 200,
            teacher_seed: 7,
            probe: ProbeConfig::default(),
            device_b_seed: 3,
            device_b_test_seed: 4,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), value: value.into(), reason: e.to_string() })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::L2 => "l2",
        Metric::Cosine => "cosine",
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair.split_once('=').ok_or(ConfigError::Syntax { line: 0 })?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        let c = &mut self.codec;
        match key {
            "pq.m" => self.pq_m = parse(key, v)?,
            "pq.k_star" => self.pq_k_star = parse(key, v)?,
            "pq.iters" => self.pq_iters = parse(key, v)?,
            "pq.metric" => {
                self.pq_metric = match v {
                    "l2" => Metric::L2,
                    "cosine" => Metric::Cosine,
                    _ => {
                        return Err(ConfigError::Value { key: key.into(), value: v.into(), reason: "expected l2|cosine".into() })
                    }
                }
            }
            "fusion.mode" => t.fusion.mode = parse(key, v)?,
            "fusion.top_n" => t.fusion.top_n = parse(key, v)?,
            "fusion.score_with_perturbed" => t.fusion.score_with_perturbed = parse(key, v)?,
            "noise.mean" => t.noise.mean = parse(key, v)?,
            "noise.var" => t.noise.variance = parse(key, v)?,
            "train.tau" => t.tau = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.lr_floor" => t.lr_floor = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch" => t.batch = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.negatives" => t.negatives = parse(key, v)?,
            "train.grad_through_fusion" => t.grad_through_fusion = parse(key, v)?,
            "train.plain_pair_weight" => t.plain_pair_weight = parse(key, v)?,
            "train.fuse_raw_query" => t.fuse_raw_query = parse(key, v)?,
            "train.hidden" => t.hidden = parse_list(key, v)?,
            "train.dim" => t.dim = parse(key, v)?,
            "codec.K" => c.k = parse(key, v)?,
            "codec.beta" => c.beta = parse(key, v)?,
            "codec.channel_p" => self.channel_p = parse(key, v)?,
            "codec.tokens" => c.tokens = parse(key, v)?,
            "codec.lr" => c.lr = parse(key, v)?,
            "codec.epochs" => c.epochs = parse(key, v)?,
            "codec.batch" => c.batch = parse(key, v)?,
            "codec.hidden" => c.hidden = parse_list(key, v)?,
            "codec.omit_commitment" => c.omit_commitment = parse(key, v)?,
            "codec.freeze_codebook" => c.freeze_codebook = parse(key, v)?,
            "codec.kmeans_iters" => c.kmeans_iters = parse(key, v)?,
            "codec.pixel_noise" => self.codec_pixel_noise = parse(key, v)?,
            "net.addr" => self.net_addr = v.to_string(),
            "net.timeout_ms" => self.net_timeout_ms = parse(key, v)?,
            "data.classes" => self.data.classes = parse(key, v)?,
            "data.per_class" => self.data.per_class = parse(key, v)?,
            "data.h" => self.data.height = parse(key, v)?,
            "data.w" => self.data.width = parse(key, v)?,
            "data.ch" => self.data.channels = parse(key, v)?,
            "data.seed" => self.data.sample_seed = parse(key, v)?,
            "data.pattern_seed" => self.data.pattern_seed = parse(key, v)?,
            "data.pixel_noise" => self.data.pixel_noise = parse(key, v)?,
            "data.test_seed" => self.test_seed = parse(key, v)?,
            "data.test_per_class" => self.test_per_class = parse(key, v)?,
            "skb.seed" => self.skb_seed = parse(key, v)?,
            "skb.per_class" => self.skb_per_class = parse(key, v)?,
            "teacher.seed" => self.teacher_seed = parse(key, v)?,
            "probe.head" => self.probe.head = parse(key, v)?,
            "probe.hidden" => self.probe.hidden = parse(key, v)?,
            "probe.epochs" => self.probe.epochs = parse(key, v)?,
            "probe.batch" => self.probe.batch = parse(key, v)?,
            "probe.lr" => self.probe.lr = parse(key, v)?,
            "transfer.b_seed" => self.device_b_seed = parse(key, v)?,
            "transfer.b_test_seed" => self.device_b_test_seed = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let c = &self.codec;
        vec![
            ("pq.m", self.pq_m.to_string()),
            ("pq.k_star", self.pq_k_star.to_string()),
            ("pq.iters", self.pq_iters.to_string()),
            ("pq.metric", metric_name(self.pq_metric).into()),
            ("fusion.mode", t.fusion.mode.to_string()),
            ("fusion.top_n", t.fusion.top_n.to_string()),
            ("fusion.score_with_perturbed", t.fusion.score_with_perturbed.to_string()),
            ("noise.mean", t.noise.mean.to_string()),
            ("noise.var", t.noise.variance.to_string()),
            ("train.tau", t.tau.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.lr_floor", t.lr_floor.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.negatives", t.negatives.to_string()),
            ("train.grad_through_fusion", t.grad_through_fusion.to_string()),
            ("train.plain_pair_weight", t.plain_pair_weight.to_string()),
            ("train.fuse_raw_query", t.fuse_raw_query.to_string()),
            ("train.hidden", list(&t.hidden)),
            ("train.dim", t.dim.to_string()),
            ("codec.K", c.k.to_string()),
            ("codec.beta", c.beta.to_string()),
            ("codec.channel_p", self.channel_p.to_string()),
            ("codec.tokens", c.tokens.to_string()),
            ("codec.lr", c.lr.to_string()),
            ("codec.epochs", c.epochs.to_string()),
            ("codec.batch", c.batch.to_string()),
            ("codec.hidden", list(&c.hidden)),
            ("codec.omit_commitment", c.omit_commitment.to_string()),
            ("codec.freeze_codebook", c.freeze_codebook.to_string()),
            ("codec.kmeans_iters", c.kmeans_iters.to_string()),
            ("codec.pixel_noise", self.codec_pixel_noise.to_string()),
            ("net.addr", self.net_addr.clone()),
            ("net.timeout_ms", self.net_timeout_ms.to_string()),
            ("data.classes", self.data.classes.to_string()),
            ("data.per_class", self.data.per_class.to_string()),
            ("data.h", self.data.height.to_string()),
            ("data.w", self.data.width.to_string()),
            ("data.ch", self.data.channels.to_string()),
            ("data.seed", self.data.sample_seed.to_string()),
            ("data.pattern_seed", self.data.pattern_seed.to_string()),
            ("data.pixel_noise", self.data.pixel_noise.to_string()),
            ("data.test_seed", self.test_seed.to_string()),
            ("data.test_per_class", self.test_per_class.to_string()),
            ("skb.seed", self.skb_seed.to_string()),
            ("skb.per_class", self.skb_per_class.to_string()),
            ("teacher.seed", self.teacher_seed.to_string()),
            ("probe.head", format!("{:?}", self.probe.head).to_lowercase()),
            ("probe.hidden", self.probe.hidden.to_string()),
            ("probe.epochs", self.probe.epochs.to_string()),
            ("probe.batch", self.probe.batch.to_string()),
            ("probe.lr", self.probe.lr.to_string()),
            ("transfer.b_seed", self.device_b_seed.to_string()),
            ("transfer.b_test_seed", self.device_b_test_seed.to_string()),
        ]
    }

    /// The effective configuration; parsing it back yields `self`.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn Display| ConfigError::Invalid(e.to_string());
        self.train.validate().map_err(|e| invalid(&e))?;
        self.data.validate().map_err(|e| invalid(&e))?;
        self.codec_train_spec().validate().map_err(|e| invalid(&e))?;
        PqLayout { d: self.train.dim, m: self.pq_m, k_star: self.pq_k_star }.validate().map_err(|e| invalid(&e))?;
        self.stage2().validate(self.train.dim).map_err(|e| invalid(&e))?;
        ChannelModel::new(self.channel_p, 0).map_err(|e| invalid(&e))?;
        if self.train.fusion.top_n == 0 {
            return Err(ConfigError::Invalid("fusion.top_n must be at least 1".into()));
        }
        if self.data.per_class == 0 || self.test_per_class == 0 || self.skb_per_class == 0 {
            return Err(ConfigError::Invalid("per-class sample counts must be positive".into()));
        }
        if self.probe.batch == 0 || self.probe.hidden == 0 || !(self.probe.lr >= 0.0) {
            return Err(ConfigError::Invalid("probe batch and hidden must be positive, lr non-negative".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.net_timeout_ms)
    }

    pub fn pq_config(&self) -> PQConfig {
        PQConfig::new(self.train.dim, self.pq_m)
            .with_k_star(self.pq_k_star)
            .with_iters(self.pq_iters)
            .with_metric(self.pq_metric)
            .with_seed(self.seed())
    }

    pub fn train_spec(&self) -> SyntheticDatasetSpec {
        self.data
    }

    pub fn test_spec(&self) -> SyntheticDatasetSpec {
        self.data.with_samples(self.test_seed, self.test_per_class)
    }

    /// Public data the teacher embeds into the shared knowledge base.
    pub fn skb_spec(&self) -> SyntheticDatasetSpec {
        self.data.with_samples(self.skb_seed, self.skb_per_class)
    }

    pub fn codec_train_spec(&self) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec { pixel_noise: self.codec_pixel_noise, ..self.train_spec() }
    }

    pub fn codec_test_spec(&self) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec { pixel_noise: self.codec_pixel_noise, ..self.test_spec() }
    }

    pub fn stage2(&self) -> Stage2Config {
        Stage2Config { seed: self.seed(), ..self.codec.clone() }
    }

    pub fn channel(&self, p: f64) -> ChannelModel {
        ChannelModel { p, seed: rng::derive_seed(self.seed(), &[0xC4A2]) }
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig { seed: self.seed(), ..self.probe }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn echo_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.set("train.lr", "0.0125").unwrap();
        cfg.set("codec.hidden", "32, 16").unwrap();
        cfg.set("fusion.mode", "softmax").unwrap();
        cfg.set("train.negatives", "positives+anchors").unwrap();
        cfg.set("pq.metric", "l2").unwrap();
        cfg.set("probe.head", "linear").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn every_echoed_key_is_settable() {
        let cfg = RunConfig::default();
        let mut other = RunConfig::default();
        for (k, v) in cfg.entries() {
            other.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
        assert_eq!(other, cfg);
    }

    #[test]
    fn comments_blank_lines_and_errors() {
        let cfg = RunConfig::from_text("# header\n\ntrain.epochs = 3 # inline\n  noise.var=0\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.noise.variance, 0.0);
        assert!(matches!(RunConfig::from_text("bogus.key = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::from_text("train.epochs"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(RunConfig::from_text("train.epochs = many"), Err(ConfigError::Value { .. })));
    }

    #[test]
    fn owning_modules_validate_values() {
        for bad in ["train.tau = 0", "pq.m = 7", "codec.channel_p = 1.5", "codec.tokens = 5", "data.classes = 1"] {
            let cfg = RunConfig::from_text(bad).unwrap();
            assert!(cfg.validate().is_err(), "{bad}");
        }
    }
}
