//! Frozen-encoder evaluation: a small classifier trained with cross-entropy
//! on fixed embeddings, scored by top-1 / top-5 accuracy.

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::encoder::{embed, EncoderParams};
use super::TrainError;
use crate::linalg::{softmax, Matrix};
use crate::nn::{cosine_lr, Activation, Adam, Mlp};
use crate::rng;
use rand::seq::SliceRandom;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ProbeHead {
    /// d → 64 → 64 → C with ReLU.
    #[default]
    Mlp,
    /// d → C.
    Linear,
}

impl std::str::FromStr for ProbeHead {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "linear" => Ok(Self::Linear),
            other => Err(format!("unknown probe head {other:?} (expected mlp|linear)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub head: ProbeHead,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { head: ProbeHead::Mlp, hidden: 64, epochs: 100, batch: 64, lr: 0.01, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub top1: f64,
    pub top5: f64,
}

fn check_labels(labels: &[i32], classes: usize, rows: usize, what: &str) -> Result<(), TrainError> {
    if labels.len() != rows {
        return Err(TrainError::Validation(format!("{what}: {} labels for {rows} rows", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l < 0 || l as usize >= classes) {
        return Err(TrainError::Validation(format!("{what}: label {l} outside [0, {classes})")));
    }
    Ok(())
}

/// Whether `label` is among the `k` largest logits. Ties rank the lower
/// class index first.
fn in_top_k(logits: &[f64], label: usize, k: usize) -> bool {
    let target = logits[label];
    let ahead = logits.iter().enumerate().filter(|&(c, &v)| v > target || (v == target && c < label)).count();
    ahead < k
}

/// Trains a probe head on `(train_x, train_y)` and scores it on the test set.
pub fn probe_embeddings(
    train_x: &Matrix,
    train_y: &[i32],
    test_x: &Matrix,
    test_y: &[i32],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeReport, TrainError> {
    if classes < 2 {
        return Err(TrainError::Validation("probe needs at least two classes".into()));
    }
    if train_x.rows() == 0 || test_x.rows() == 0 {
        return Err(TrainError::Validation("probe needs non-empty train and test sets".into()));
    }
    if train_x.cols() != test_x.cols() {
        return Err(TrainError::Validation("train and test embeddings differ in width".into()));
    }
    if cfg.batch == 0 || !(cfg.lr >= 0.0) {
        return Err(TrainError::Validation("probe batch must be positive and lr non-negative".into()));
    }
    check_labels(train_y, classes, train_x.rows(), "train")?;
    check_labels(test_y, classes, test_x.rows(), "test")?;

    let d = train_x.cols();
    let mut r = rng::stream(cfg.seed, &[0x9B0BE]);
    let mut head = match cfg.head {
        ProbeHead::Mlp => Mlp::init(
            &[d, cfg.hidden, cfg.hidden, classes],
            &[Activation::Relu, Activation::Relu, Activation::Identity],
            &mut r,
        ),
        ProbeHead::Linear => Mlp::init(&[d, classes], &[Activation::Identity], &mut r),
    };
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..train_x.rows()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, 0.0, epoch, cfg.epochs);
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch) {
            let x = train_x.select_rows(chunk);
            let cache = head.forward(&x)?;
            let logits = cache.output();
            let mut grad = Matrix::zeros(chunk.len(), classes);
            for (b, &i) in chunk.iter().enumerate() {
                let p = softmax(logits.row(b));
                let g = grad.row_mut(b);
                for c in 0..classes {
                    g[c] = p[c] / chunk.len() as f64;
                }
                g[train_y[i] as usize] -= 1.0 / chunk.len() as f64;
            }
            let (grads, _) = head.backward(&cache, &grad)?;
            adam.step(head.param_slices_mut(), grads.slices(), lr);
        }
    }

    let logits = head.forward(test_x)?;
    let (mut top1, mut top5) = (0usize, 0usize);
    for (row, &y) in logits.output().iter_rows().zip(test_y) {
        top1 += usize::from(in_top_k(row, y as usize, 1));
        top5 += usize::from(in_top_k(row, y as usize, 5));
    }
    let n = test_y.len() as f64;
    Ok(ProbeReport { top1: top1 as f64 / n, top5: top5 as f64 / n })
}

/// Embeds both sets with the frozen encoder and runs [`probe_embeddings`].
pub fn linear_probe_eval(
    encoder: &EncoderParams,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
) -> Result<ProbeReport, TrainError> {
    let classes = train.classes.max(test.classes);
    probe_embeddings(&embed(encoder, &train.images)?, &train.labels, &embed(encoder, &test.images)?, &test.labels, classes, cfg)
}
