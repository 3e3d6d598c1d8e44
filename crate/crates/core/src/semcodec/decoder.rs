//! Reconstruction network: concatenated token codewords → image.

use std::fs;
use std::path::Path;

use rand::Rng;

use super::CodecError;
use crate::binio::Reader;
use crate::linalg::Matrix;
use crate::nn::{Activation, Mlp, MlpCache, MlpGrads};

/// An MLP whose last layer is a sigmoid so outputs land in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub mlp: Mlp,
    pub shape: (usize, usize, usize),
}

impl DecoderParams {
    /// `input → hidden… → H·W·C`, ReLU between layers.
    pub fn init<R: Rng>(input: usize, hidden: &[usize], shape: (usize, usize, usize), rng: &mut R) -> Result<Self, CodecError> {
        let out = shape.0 * shape.1 * shape.2;
        if input == 0 || out == 0 || hidden.contains(&0) {
            return Err(CodecError::Validation("decoder widths must be positive".into()));
        }
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(out);
        let mut acts = vec![Activation::Relu; hidden.len()];
        acts.push(Activation::Sigmoid);
        Ok(Self { mlp: Mlp::init(&dims, &acts, rng), shape })
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        self.mlp.validate()?;
        let (h, w, c) = self.shape;
        if self.mlp.output_dim() != h * w * c {
            return Err(CodecError::Validation("decoder output does not match its image shape".into()));
        }
        Ok(())
    }

    pub fn forward(&self, z_q: &Matrix) -> Result<MlpCache, CodecError> {
        Ok(self.mlp.forward(z_q)?)
    }

    pub fn decode(&self, z_q: &Matrix) -> Result<Matrix, CodecError> {
        Ok(self.forward(z_q)?.output().clone())
    }

    pub fn backward(&self, cache: &MlpCache, grad: &Matrix) -> Result<(MlpGrads, Matrix), CodecError> {
        Ok(self.mlp.backward(cache, grad)?)
    }
}

pub const DECODER_MAGIC: &[u8; 4] = b"CRDE";

/// `"CRDE" | version u8 | h u32 | w u32 | c u32 | layers` (see [`Mlp::write_layers`]).
pub fn decoder_to_bytes(d: &DecoderParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DECODER_MAGIC);
    out.push(1);
    for v in [d.shape.0, d.shape.1, d.shape.2] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    d.mlp.write_layers(&mut out);
    out
}

pub fn decoder_from_bytes(bytes: &[u8]) -> Result<DecoderParams, CodecError> {
    let bad = |m: &str| CodecError::Format(format!("decoder file: {m}"));
    let mut r = Reader::new(bytes);
    let trunc = |_| bad("truncated");
    if r.take(4).map_err(trunc)? != DECODER_MAGIC {
        return Err(bad("bad magic"));
    }
    if r.u8().map_err(trunc)? != 1 {
        return Err(bad("unsupported version"));
    }
    let h = r.u32().map_err(trunc)? as usize;
    let w = r.u32().map_err(trunc)? as usize;
    let c = r.u32().map_err(trunc)? as usize;
    let mlp = Mlp::read_layers(&mut r).map_err(|m| bad(&m))?;
    if r.remaining() != 0 {
        return Err(bad("trailing bytes"));
    }
    let d = DecoderParams { mlp, shape: (h, w, c) };
    d.validate()?;
    Ok(d)
}

pub fn save_decoder(d: &DecoderParams, path: impl AsRef<Path>) -> Result<u64, CodecError> {
    let b = decoder_to_bytes(d);
    fs::write(path, &b)?;
    Ok(b.len() as u64)
}

pub fn load_decoder(path: impl AsRef<Path>) -> Result<DecoderParams, CodecError> {
    decoder_from_bytes(&fs::read(path)?)
}
