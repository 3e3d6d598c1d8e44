//! Codebook, nearest-codeword quantisation and the `CRVQ` file format.

use std::fs;
use std::path::Path;

use super::CodecError;
use crate::binio::Reader;
use crate::linalg::{argmin, squared_l2, Matrix};

/// `K` codewords of width `d`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct VQCodebook {
    embeddings: Matrix,
}

impl VQCodebook {
    pub fn new(embeddings: Matrix) -> Result<Self, CodecError> {
        if embeddings.rows() < 2 {
            return Err(CodecError::Validation(format!("codebook needs K >= 2, got {}", embeddings.rows())));
        }
        if embeddings.cols() == 0 {
            return Err(CodecError::Validation("codewords must have positive width".into()));
        }
        if !embeddings.is_finite() {
            return Err(CodecError::Validation("codebook contains non-finite values".into()));
        }
        Ok(Self { embeddings })
    }

    pub fn k(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn codeword(&self, k: usize) -> &[f64] {
        self.embeddings.row(k)
    }

    /// Mutable view for the optimiser. Callers keep the rows finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.embeddings.as_mut_slice()
    }
}

/// Nearest codeword per row and its squared distance. Ties go to the lower
/// index.
pub fn vq_quantize_with_distances(z_e: &Matrix, cb: &VQCodebook) -> Result<(Vec<usize>, Vec<f64>), CodecError> {
    if z_e.cols() != cb.dim() {
        return Err(CodecError::Shape(format!("rows of width {} vs codewords of width {}", z_e.cols(), cb.dim())));
    }
    let mut idx = Vec::with_capacity(z_e.rows());
    let mut dist = Vec::with_capacity(z_e.rows());
    for row in z_e.iter_rows() {
        let (k, d) = argmin((0..cb.k()).map(|k| squared_l2(row, cb.codeword(k)))).expect("K >= 2");
        idx.push(k);
        dist.push(d);
    }
    Ok((idx, dist))
}

pub fn vq_quantize(z_e: &Matrix, cb: &VQCodebook) -> Result<Vec<usize>, CodecError> {
    Ok(vq_quantize_with_distances(z_e, cb)?.0)
}

pub fn vq_dequantize(indices: &[usize], cb: &VQCodebook) -> Result<Matrix, CodecError> {
    let mut out = Matrix::zeros(indices.len(), cb.dim());
    for (t, &k) in indices.iter().enumerate() {
        if k >= cb.k() {
            return Err(CodecError::Validation(format!("index {k} out of range for K = {}", cb.k())));
        }
        out.row_mut(t).copy_from_slice(cb.codeword(k));
    }
    Ok(out)
}

pub const CODEBOOK_MAGIC: &[u8; 4] = b"CRVQ";
pub const CODEBOOK_VERSION: u8 = 1;

/// `"CRVQ" | version u8 | K u32 | d u32 | K·d f32`.
pub fn codebook_to_bytes(cb: &VQCodebook) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + cb.k() * cb.dim() * 4);
    out.extend_from_slice(CODEBOOK_MAGIC);
    out.push(CODEBOOK_VERSION);
    out.extend_from_slice(&(cb.k() as u32).to_le_bytes());
    out.extend_from_slice(&(cb.dim() as u32).to_le_bytes());
    for &v in cb.embeddings.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn codebook_from_bytes(bytes: &[u8]) -> Result<VQCodebook, CodecError> {
    let mut r = Reader::new(bytes);
    let trunc = |_| CodecError::Format("codebook file truncated".into());
    if r.take(4).map_err(trunc)? != CODEBOOK_MAGIC {
        return Err(CodecError::Format("bad codebook magic".into()));
    }
    let version = r.u8().map_err(trunc)?;
    if version != CODEBOOK_VERSION {
        return Err(CodecError::Format(format!("unsupported codebook version {version}")));
    }
    let k = r.u32().map_err(trunc)? as usize;
    let d = r.u32().map_err(trunc)? as usize;
    r.ensure(k as u64 * d as u64, 4).map_err(trunc)?;
    let data = (0..k * d).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>, _>>().map_err(trunc)?;
    if r.remaining() != 0 {
        return Err(CodecError::Format("trailing bytes after codebook".into()));
    }
    VQCodebook::new(Matrix::from_vec(k, d, data).expect("sized"))
}

pub fn save_codebook(cb: &VQCodebook, path: impl AsRef<Path>) -> Result<u64, CodecError> {
    let b = codebook_to_bytes(cb);
    fs::write(path, &b)?;
    Ok(b.len() as u64)
}

pub fn load_codebook(path: impl AsRef<Path>) -> Result<VQCodebook, CodecError> {
    codebook_from_bytes(&fs::read(path)?)
}
