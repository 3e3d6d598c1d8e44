//! The VQ-VAE objective
//!
//! ```text
//! L = recon(x, x̂) + ‖sg[z_e] − e‖² + β‖z_e − sg[e]‖²
//! ```
//!
//! with the reconstruction term as mean squared error and the two codebook
//! terms averaged over token rows. Stop-gradient is expressed by passing the
//! detached copies separately: the codebook term reads `z_e` only through
//! its detached copy, the commitment term reads `e` only through its detached
//! copy.

use super::CodecError;
use crate::linalg::Matrix;

pub const DEFAULT_BETA: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqLoss {
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqLossGrads {
    pub x_hat: Matrix,
    pub z_e: Matrix,
    pub e_sel: Matrix,
}

fn same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<(), CodecError> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(CodecError::Shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

fn mean_sq(a: &Matrix, b: &Matrix) -> f64 {
    let s: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum();
    s / a.as_slice().len().max(1) as f64
}

fn row_mean_sq(a: &Matrix, b: &Matrix) -> f64 {
    let s: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum();
    s / a.rows().max(1) as f64
}

/// Full form with explicit live and detached operands.
#[allow(clippy::too_many_arguments)]
pub fn vqvae_loss_sg(
    x: &Matrix,
    x_hat: &Matrix,
    z_e: &Matrix,
    z_e_detached: &Matrix,
    e_sel: &Matrix,
    e_sel_detached: &Matrix,
    beta: f64,
    omit_commitment: bool,
) -> Result<VqLoss, CodecError> {
    same_shape(x, x_hat, "x vs x_hat")?;
    same_shape(z_e, e_sel, "z_e vs e_sel")?;
    same_shape(z_e, z_e_detached, "z_e vs its detached copy")?;
    same_shape(e_sel, e_sel_detached, "e_sel vs its detached copy")?;
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(CodecError::Validation(format!("beta must be finite and >= 0, got {beta}")));
    }
    let recon = mean_sq(x, x_hat);
    let codebook = row_mean_sq(z_e_detached, e_sel);
    let commitment = if omit_commitment { 0.0 } else { beta * row_mean_sq(z_e, e_sel_detached) };
    Ok(VqLoss { total: recon + codebook + commitment, recon, codebook, commitment })
}

/// Forward value; the detached copies equal the live operands.
pub fn vqvae_loss(
    x: &Matrix,
    x_hat: &Matrix,
    z_e: &Matrix,
    e_sel: &Matrix,
    beta: f64,
    omit_commitment: bool,
) -> Result<VqLoss, CodecError> {
    vqvae_loss_sg(x, x_hat, z_e, z_e, e_sel, e_sel, beta, omit_commitment)
}

/// Gradients with respect to the live operands `x̂`, `z_e` and `e_sel`.
pub fn vqvae_loss_backward(
    x: &Matrix,
    x_hat: &Matrix,
    z_e: &Matrix,
    e_sel: &Matrix,
    beta: f64,
    omit_commitment: bool,
) -> Result<VqLossGrads, CodecError> {
    vqvae_loss(x, x_hat, z_e, e_sel, beta, omit_commitment)?;
    let n = x.as_slice().len().max(1) as f64;
    let rows = z_e.rows().max(1) as f64;
    let mut gx = Matrix::zeros(x.rows(), x.cols());
    for ((g, a), b) in gx.as_mut_slice().iter_mut().zip(x_hat.as_slice()).zip(x.as_slice()) {
        *g = 2.0 * (a - b) / n;
    }
    let mut gz = Matrix::zeros(z_e.rows(), z_e.cols());
    let mut ge = Matrix::zeros(z_e.rows(), z_e.cols());
    let commit = if omit_commitment { 0.0 } else { beta };
    for (i, (z, e)) in z_e.as_slice().iter().zip(e_sel.as_slice()).enumerate() {
        ge.as_mut_slice()[i] = 2.0 * (e - z) / rows;
        gz.as_mut_slice()[i] = commit * 2.0 * (z - e) / rows;
    }
    Ok(VqLossGrads { x_hat: gx, z_e: gz, e_sel: ge })
}
