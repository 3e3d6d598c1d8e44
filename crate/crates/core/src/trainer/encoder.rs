//! The local encoder: flatten → MLP → optional L2 normalisation. Both
//! contrastive branches share one parameter set and call [`encode_forward`].

use std::fs;
use std::path::Path;

use rand::Rng;

use super::data::{flatten, Image};
use super::TrainError;
use crate::binio::Reader;
use crate::fusion::EmbeddingBatch;
use crate::linalg::{normalize_rows, normalize_rows_backward, Matrix};
use crate::nn::{Activation, Mlp, MlpCache, MlpGrads, NnError};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub mlp: Mlp,
    pub normalize_output: bool,
}

/// Forward state needed by [`encode_backward`].
#[derive(Debug, Clone)]
pub struct EncoderCache {
    mlp: MlpCache,
    normalized: Option<(Matrix, Vec<f64>)>,
}

impl EncoderCache {
    /// MLP output before normalisation.
    pub fn raw(&self) -> &Matrix {
        self.mlp.output()
    }
}

impl EncoderParams {
    /// `dims[0] → … → dims[last]`, ReLU between layers and a linear head.
    pub fn init<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self, TrainError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(TrainError::Validation(format!("bad encoder dims {dims:?}")));
        }
        let mut acts = vec![Activation::Relu; dims.len() - 2];
        acts.push(Activation::Identity);
        Ok(Self { mlp: Mlp::init(dims, &acts, rng), normalize_output: true })
    }

    /// 192 → 128 → 64 for 8×8×3 inputs.
    pub fn default_for<R: Rng>(input_dim: usize, rng: &mut R) -> Result<Self, TrainError> {
        Self::init(&[input_dim, 128, 64], rng)
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.mlp.validate().map_err(TrainError::from)
    }
}

pub fn encode_forward(params: &EncoderParams, batch: &Matrix) -> Result<(EmbeddingBatch, EncoderCache), TrainError> {
    let mlp = params.mlp.forward(batch)?;
    let (out, normalized) = if params.normalize_output {
        let (n, norms) = normalize_rows(mlp.output());
        (n.clone(), Some((n, norms)))
    } else {
        (mlp.output().clone(), None)
    };
    let emb = EmbeddingBatch::new(out).map_err(|e| TrainError::Numeric(e.to_string()))?;
    Ok((emb, EncoderCache { mlp, normalized }))
}

pub fn encode_images(params: &EncoderParams, images: &[Image]) -> Result<(EmbeddingBatch, EncoderCache), TrainError> {
    encode_forward(params, &flatten(images))
}

/// Embeds without keeping a cache, in chunks.
pub fn embed(params: &EncoderParams, images: &[Image]) -> Result<Matrix, TrainError> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(images.len());
    for chunk in images.chunks(256) {
        let (emb, _) = encode_images(params, chunk)?;
        rows.extend(emb.as_matrix().iter_rows().map(<[f64]>::to_vec));
    }
    Ok(Matrix::from_rows(&rows).unwrap_or_else(|| Matrix::zeros(0, params.output_dim())))
}

/// Gradients from `dL/d(output)`, where output is the normalised embedding
/// when normalisation is on.
pub fn encode_backward(params: &EncoderParams, cache: &EncoderCache, grad: &Matrix) -> Result<MlpGrads, TrainError> {
    let grad_raw = match &cache.normalized {
        Some((n, norms)) => normalize_rows_backward(n, norms, grad),
        None => grad.clone(),
    };
    encode_backward_raw(params, cache, &grad_raw)
}

/// Gradients from `dL/d(raw MLP output)`.
pub fn encode_backward_raw(params: &EncoderParams, cache: &EncoderCache, grad_raw: &Matrix) -> Result<MlpGrads, TrainError> {
    Ok(params.mlp.backward(&cache.mlp, grad_raw)?.0)
}

pub const ENCODER_MAGIC: &[u8; 4] = b"CREN";

/// `"CREN" | version u8 | normalize u8 | layers` (see [`Mlp::write_layers`]).
pub fn encoder_to_bytes(p: &EncoderParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ENCODER_MAGIC);
    out.push(1);
    out.push(u8::from(p.normalize_output));
    p.mlp.write_layers(&mut out);
    out
}

pub fn encoder_from_bytes(bytes: &[u8]) -> Result<EncoderParams, TrainError> {
    let bad = |m: &str| TrainError::Format(format!("encoder file: {m}"));
    let mut r = Reader::new(bytes);
    let trunc = |_| bad("truncated");
    if r.take(4).map_err(trunc)? != ENCODER_MAGIC {
        return Err(bad("bad magic"));
    }
    if r.u8().map_err(trunc)? != 1 {
        return Err(bad("unsupported version"));
    }
    let normalize_output = r.u8().map_err(trunc)? != 0;
    let mlp = Mlp::read_layers(&mut r).map_err(|m| bad(&m))?;
    if r.remaining() != 0 {
        return Err(bad("trailing bytes"));
    }
    let p = EncoderParams { mlp, normalize_output };
    p.validate()?;
    Ok(p)
}

pub fn save_encoder(p: &EncoderParams, path: impl AsRef<Path>) -> Result<u64, TrainError> {
    let b = encoder_to_bytes(p);
    fs::write(path, &b)?;
    Ok(b.len() as u64)
}

pub fn load_encoder(path: impl AsRef<Path>) -> Result<EncoderParams, TrainError> {
    encoder_from_bytes(&fs::read(path)?)
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::NonFinite { layer } => TrainError::Numeric(format!("non-finite activation at layer {layer}")),
            other => TrainError::Validation(other.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, norm};
    use crate::nn::Dense;
    use crate::rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rng::stream(seed, &[]);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_network() {
        let layer = Dense { weight: Matrix::identity(4), bias: vec![0.0; 4], activation: Activation::Identity };
        let p = EncoderParams { mlp: Mlp { layers: vec![layer] }, normalize_output: false };
        let x = random(3, 4, 1);
        assert_eq!(encode_forward(&p, &x).unwrap().0.as_matrix(), &x);
    }

    #[test]
    fn zero_network() {
        let mut p = EncoderParams::init(&[6, 5, 3], &mut rng::stream(1, &[])).unwrap();
        p.normalize_output = false;
        for l in &mut p.mlp.layers {
            l.weight.as_mut_slice().fill(0.0);
            l.bias.fill(0.0);
        }
        let out = encode_forward(&p, &random(2, 6, 2)).unwrap().0;
        assert!(out.as_matrix().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let p = EncoderParams::init(&[7, 5, 4], &mut rng::stream(3, &[])).unwrap();
        let x = random(3, 7, 4);
        let (out, _) = encode_forward(&p, &x).unwrap();
        for b in 0..3 {
            let mut h: Vec<f64> = x.row(b).to_vec();
            for l in &p.mlp.layers {
                let mut next = vec![0.0; l.outputs()];
                for o in 0..l.outputs() {
                    let mut s = l.bias[o];
                    for i in 0..l.inputs() {
                        s += l.weight.get(o, i) * h[i];
                    }
                    next[o] = match l.activation {
                        Activation::Relu => s.max(0.0),
                        Activation::Identity => s,
                        _ => unreachable!(),
                    };
                }
                h = next;
            }
            let n = norm(&h);
            for (a, e) in out.row(b).iter().zip(&h) {
                assert!((a - e / n).abs() < 1e-10);
            }
            assert!((norm(out.row(b)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalised_backward_matches_finite_differences() {
        let mut worst = 0f64;
        for seed in 0..20 {
            let p = EncoderParams::init(&[6, 5, 4], &mut rng::stream(seed, &[1])).unwrap();
            let x = random(2, 6, seed + 50);
            let g = random(2, 4, seed + 100);
            let loss = |p: &EncoderParams| dot(encode_forward(p, &x).unwrap().0.as_matrix().as_slice(), g.as_slice());
            let (_, cache) = encode_forward(&p, &x).unwrap();
            let grads = encode_backward(&p, &cache, &g).unwrap();
            let h = 1e-5;
            for li in 0..p.mlp.layers.len() {
                for i in 0..p.mlp.layers[li].weight.as_slice().len() {
                    let mut a = p.clone();
                    a.mlp.layers[li].weight.as_mut_slice()[i] += h;
                    let mut b = p.clone();
                    b.mlp.layers[li].weight.as_mut_slice()[i] -= h;
                    let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                    let an = grads.layers[li].0.as_slice()[i];
                    worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
                }
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn file_roundtrip() {
        let p = EncoderParams::init(&[6, 5, 4], &mut rng::stream(2, &[])).unwrap();
        let b = encoder_to_bytes(&p);
        assert_eq!(encoder_from_bytes(&b).unwrap(), p);
        assert!(encoder_from_bytes(&b[..b.len() - 1]).is_err());
    }
}
