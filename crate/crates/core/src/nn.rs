//! Small fully connected networks with hand-written backpropagation, plus
//! the Adam optimizer and cosine learning-rate schedule shared by every
//! trainable component (local encoder, probe head, codec decoder).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::Reader;
use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input has {got} features, network expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("non-finite activation at layer {layer}")]
    NonFinite { layer: usize },
    #[error("layer {layer} has {got} inputs but the previous layer emits {expected}")]
    BrokenChain { layer: usize, expected: usize, got: usize },
    #[error("gradient/cache shape mismatch: {0}")]
    CacheMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
            Activation::Sigmoid => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Tanh,
            3 => Activation::Sigmoid,
            _ => return None,
        })
    }
}

/// Affine layer `y = act(x Wᵀ + b)` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let gain = if activation == Activation::Relu { 2f64.sqrt() } else { 1.0 };
        let limit = gain * (6.0 / (inputs + outputs) as f64).sqrt();
        let w = (0..inputs * outputs).map(|_| rng.random_range(-limit..=limit)).collect();
        Self {
            weight: Matrix::from_vec(outputs, inputs, w).expect("shape"),
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer inputs and pre-activations retained by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    output: Matrix,
}

impl MlpCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

/// Gradients laid out like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.outputs(), l.inputs()), vec![0.0; l.outputs()]))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.add_assign(ow);
            for (x, y) in b.iter_mut().zip(ob) {
                *x += y;
            }
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|(w, b)| [w.as_slice(), b.as_slice()]).collect()
    }
}

impl Mlp {
    /// Builds a network through `dims[0] → … → dims[last]`, one activation per layer.
    pub fn init<R: Rng>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        assert_eq!(dims.len(), activations.len() + 1, "one activation per layer");
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &a)| Dense::init(w[0], w[1], a, rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::outputs)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(NnError::BrokenChain {
                    layer: i + 1,
                    expected: pair[0].outputs(),
                    got: pair[1].inputs(),
                });
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.outputs() || !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(NnError::NonFinite { layer: i });
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<MlpCache, NnError> {
        if x.cols() != self.input_dim() {
            return Err(NnError::InputWidth { expected: self.input_dim(), got: x.cols() });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = Matrix::zeros(h.rows(), layer.outputs());
            for r in 0..h.rows() {
                let xr = h.row(r);
                for (o, zo) in z.row_mut(r).iter_mut().enumerate() {
                    let w = layer.weight.row(o);
                    *zo = layer.bias[o] + w.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            let mut y = z.clone();
            for v in y.as_mut_slice() {
                *v = layer.activation.apply(*v);
            }
            if !y.is_finite() {
                return Err(NnError::NonFinite { layer: li });
            }
            inputs.push(h);
            pre.push(z);
            h = y;
        }
        Ok(MlpCache { inputs, pre, output: h })
    }

    /// Backpropagates `grad_out = dL/d(output)`; returns parameter gradients
    /// and `dL/d(input)`.
    pub fn backward(&self, cache: &MlpCache, grad_out: &Matrix) -> Result<(MlpGrads, Matrix), NnError> {
        if cache.inputs.len() != self.layers.len()
            || grad_out.rows() != cache.output.rows()
            || grad_out.cols() != cache.output.cols()
        {
            return Err(NnError::CacheMismatch(format!(
                "grad {}x{} vs output {}x{}",
                grad_out.rows(),
                grad_out.cols(),
                cache.output.rows(),
                cache.output.cols()
            )));
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut g = grad_out.clone();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let z = &cache.pre[li];
            let x = &cache.inputs[li];
            // dL/dz
            let mut dz = g;
            for (i, d) in dz.as_mut_slice().iter_mut().enumerate() {
                let zi = z.as_slice()[i];
                *d *= layer.activation.derivative(zi, layer.activation.apply(zi));
            }
            let (gw, gb) = &mut grads.layers[li];
            for r in 0..dz.rows() {
                let dzr = dz.row(r);
                let xr = x.row(r);
                for (o, &d) in dzr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (w, &xi) in gw.row_mut(o).iter_mut().zip(xr) {
                        *w += d * xi;
                    }
                }
            }
            let mut dx = Matrix::zeros(dz.rows(), layer.inputs());
            for r in 0..dz.rows() {
                let dzr = dz.row(r);
                let dxr = dx.row_mut(r);
                for (o, &d) in dzr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (acc, &w) in dxr.iter_mut().zip(layer.weight.row(o)) {
                        *acc += d * w;
                    }
                }
            }
            g = dx;
        }
        Ok((grads, g))
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    /// `layers u32 | per layer: in u32, out u32, activation u8,
    /// weights out·in f64, bias out f64`.
    pub fn write_layers(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.inputs() as u32).to_le_bytes());
            out.extend_from_slice(&(l.outputs() as u32).to_le_bytes());
            out.push(l.activation.tag());
            for v in l.weight.as_slice().iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    /// Inverse of [`Mlp::write_layers`]; the error names what went wrong.
    pub fn read_layers(r: &mut Reader<'_>) -> Result<Mlp, String> {
        let trunc = |_| "truncated".to_string();
        let count = r.u32().map_err(trunc)?;
        let mut layers = Vec::new();
        for _ in 0..count {
            let inputs = r.u32().map_err(trunc)? as usize;
            let outputs = r.u32().map_err(trunc)? as usize;
            let activation = Activation::from_tag(r.u8().map_err(trunc)?).ok_or("unknown activation")?;
            r.ensure((inputs as u64 + 1) * outputs as u64, 8).map_err(trunc)?;
            let w = (0..inputs * outputs).map(|_| r.f64()).collect::<Result<Vec<_>, _>>().map_err(trunc)?;
            let bias = (0..outputs).map(|_| r.f64()).collect::<Result<Vec<_>, _>>().map_err(trunc)?;
            layers.push(Dense { weight: Matrix::from_vec(outputs, inputs, w).expect("sized"), bias, activation });
        }
        Ok(Mlp { layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }
}

/// Adam with bias correction. One moment buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] -= update;
            }
        }
    }
}

/// Cosine annealing from `base` at epoch 0 down to `floor` at `total` epochs.
pub fn cosine_lr(base: f64, floor: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = epoch as f64 / total as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn loss(mlp: &Mlp, x: &Matrix, g: &Matrix) -> f64 {
        let out = mlp.forward(x).unwrap();
        crate::linalg::dot(out.output().as_slice(), g.as_slice())
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut r = rng::stream(3, &[]);
        for act in [Activation::Tanh, Activation::Sigmoid, Activation::Identity, Activation::Relu] {
            let mlp = Mlp::init(&[5, 4, 3], &[act, Activation::Tanh], &mut r);
            let x = Matrix::from_vec(2, 5, (0..10).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
            let g = Matrix::from_vec(2, 3, (0..6).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
            let cache = mlp.forward(&x).unwrap();
            let (grads, dx) = mlp.backward(&cache, &g).unwrap();
            let h = 1e-5;
            let mut worst = 0f64;
            for li in 0..mlp.layers.len() {
                for i in 0..mlp.layers[li].weight.as_slice().len() {
                    let mut p = mlp.clone();
                    p.layers[li].weight.as_mut_slice()[i] += h;
                    let mut n = mlp.clone();
                    n.layers[li].weight.as_mut_slice()[i] -= h;
                    let fd = (loss(&p, &x, &g) - loss(&n, &x, &g)) / (2.0 * h);
                    let an = grads.layers[li].0.as_slice()[i];
                    worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
                }
            }
            for i in 0..10 {
                let mut p = x.clone();
                p.as_mut_slice()[i] += h;
                let mut n = x.clone();
                n.as_mut_slice()[i] -= h;
                let fd = (loss(&mlp, &p, &g) - loss(&mlp, &n, &g)) / (2.0 * h);
                let an = dx.as_slice()[i];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
            }
            assert!(worst < 1e-4, "{act:?}: {worst}");
        }
    }

    #[test]
    fn adam_with_zero_lr_is_a_no_op() {
        let mut r = rng::stream(1, &[]);
        let mut mlp = Mlp::init(&[3, 2], &[Activation::Relu], &mut r);
        let before = mlp.clone();
        let mut grads = MlpGrads::zeros_like(&mlp);
        grads.layers[0].0.as_mut_slice().fill(0.5);
        let mut adam = Adam::default();
        for _ in 0..5 {
            adam.step(mlp.param_slices_mut(), grads.slices(), 0.0);
        }
        assert_eq!(mlp, before);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.005, 0.0, 0, 50), 0.005);
        assert!(cosine_lr(0.005, 0.0, 50, 50).abs() < 1e-18);
        assert!((cosine_lr(1.0, 0.0, 25, 50) - 0.5).abs() < 1e-12);
    }
}
