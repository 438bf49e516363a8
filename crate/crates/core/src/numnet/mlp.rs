//! Dense multilayer perceptron with tanh hidden units and a linear output.
//!
//! Weights for layer `l` are stored as an `(in, out)` matrix so a batch
//! forward pass is `x · W + b` with one sample per row.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{OdpError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Post-activation outputs of every layer, kept from a forward pass for backprop.
/// `activations[0]` is the input batch and the last entry is the network output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds at least the input")
    }
}

/// Parameter-shaped container used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    /// Accumulates `other * scale` into `self`.
    pub fn add_scaled(&mut self, other: &MlpGrads, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.scaled_add(scale, b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.scaled_add(scale, b);
        }
    }

    pub fn norm(&self) -> f64 {
        let sq: f64 = self
            .weights
            .iter()
            .map(|w| w.iter().map(|x| x * x).sum::<f64>())
            .chain(self.biases.iter().map(|b| b.iter().map(|x| x * x).sum::<f64>()))
            .sum();
        sq.sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|x| x * factor);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|x| x * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;
const EXP_TAYLOR: [f64; 14] = [
    1.0,
    1.0,
    1.0 / 2.0,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5040.0,
    1.0 / 40320.0,
    1.0 / 362_880.0,
    1.0 / 3_628_800.0,
    1.0 / 39_916_800.0,
    1.0 / 479_001_600.0,
    1.0 / 6_227_020_800.0,
];

/// Branch-free so that slice loops vectorize. `e^{-2|x|}` is computed by
/// range reduction and a degree-13 Taylor polynomial; an odd series takes
/// over near zero where `1 - e` would cancel.
#[inline(always)]
fn tanh_kernel(x: f64) -> f64 {
    let ax = x.abs();
    let t = -2.0 * ax;
    // Not `max`: a NaN input must stay NaN.
    let t = if t < -40.0 { -40.0 } else { t };
    let z = t * std::f64::consts::LOG2_E + ROUND_MAGIC;
    let kf = z - ROUND_MAGIC;
    let k = z.to_bits() as i64 - ROUND_MAGIC.to_bits() as i64;
    let r = (t - kf * LN2_HI) - kf * LN2_LO;
    let mut p = EXP_TAYLOR[13];
    for c in EXP_TAYLOR[..13].iter().rev() {
        p = p * r + c;
    }
    let e = p * f64::from_bits(((k + 1023) as u64) << 52);
    let far = (1.0 - e) / (1.0 + e);
    let x2 = ax * ax;
    let near = ax * (1.0 - x2 * (1.0 / 3.0 - x2 * (2.0 / 15.0 - x2 * (17.0 / 315.0))));
    let y = if ax < 0.02 { near } else { far };
    y.copysign(x)
}

/// Hyperbolic tangent, within a few ulps of `f64::tanh`.
pub fn tanh(x: f64) -> f64 {
    tanh_kernel(x)
}

#[inline(always)]
fn tanh_slice_generic(xs: &mut [f64]) {
    for x in xs {
        *x = tanh_kernel(*x);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn tanh_slice_avx2(xs: &mut [f64]) {
    tanh_slice_generic(xs)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn tanh_slice_avx512(xs: &mut [f64]) {
    tanh_slice_generic(xs)
}

/// In-place `tanh` over a slice. Every code path evaluates the same
/// operation sequence, so results are bit-identical across CPUs.
pub fn tanh_slice(xs: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512f") {
        // SAFETY: the feature was detected at runtime.
        unsafe { tanh_slice_avx512(xs) };
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { tanh_slice_avx2(xs) };
        return;
    }
    tanh_slice_generic(xs)
}

fn tanh_array(a: &mut Array2<f64>) {
    match a.as_slice_mut() {
        Some(s) => tanh_slice(s),
        None => a.mapv_inplace(tanh),
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(OdpError::invalid("an mlp needs at least input and output dims"));
    }
    if dims.contains(&0) {
        return Err(OdpError::invalid("layer dims must be positive"));
    }
    Ok(())
}

impl Mlp {
    /// Glorot-uniform weights in ±sqrt(6/(fan_in+fan_out)), zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        check_dims(dims)?;
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit));
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Mlp {
            dims: dims.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        Ok(Mlp {
            dims: dims.to_vec(),
            weights: dims.windows(2).map(|p| Array2::zeros((p[0], p[1]))).collect(),
            biases: dims.windows(2).map(|p| Array1::zeros(p[1])).collect(),
        })
    }

    pub fn from_parts(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(OdpError::invalid("weights and biases must be non-empty and paired"));
        }
        let mut dims = vec![weights[0].nrows()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != *dims.last().unwrap() {
                return Err(OdpError::invalid(format!(
                    "layer {l} expects {} inputs but previous layer emits {}",
                    w.nrows(),
                    dims.last().unwrap()
                )));
            }
            if b.len() != w.ncols() {
                return Err(OdpError::invalid(format!("layer {l} bias length mismatch")));
            }
            dims.push(w.ncols());
        }
        check_dims(&dims)?;
        Ok(Mlp {
            dims,
            weights,
            biases,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Parameters in the same order as [`MlpGrads::flatten`].
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(OdpError::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().for_each(|x| *x = it.next().unwrap());
            b.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
        Ok(())
    }

    fn check_input(&self, inputs: &ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim() {
            return Err(OdpError::invalid(format!(
                "input width {} does not match network input dim {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&inputs)?;
        let last = self.num_layers() - 1;
        let mut x = self.affine(0, inputs);
        if last > 0 {
            tanh_array(&mut x);
        }
        for l in 1..=last {
            x = self.affine(l, x.view());
            if l < last {
                tanh_array(&mut x);
            }
        }
        Ok(x)
    }

    pub fn forward_cached(&self, inputs: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_input(&inputs)?;
        let last = self.num_layers() - 1;
        let mut activations = Vec::with_capacity(self.num_layers() + 1);
        activations.push(inputs.to_owned());
        for l in 0..=last {
            let mut z = self.affine(l, activations[l].view());
            if l < last {
                tanh_array(&mut z);
            }
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    fn affine(&self, layer: usize, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights[layer]);
        z += &self.biases[layer];
        z
    }

    /// Gradients of `L = Σ output_grads ⊙ output` with respect to every
    /// parameter and every input element.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grads: ArrayView2<f64>,
    ) -> Result<(MlpGrads, Array2<f64>)> {
        let out = cache.output();
        if output_grads.raw_dim() != out.raw_dim() {
            return Err(OdpError::invalid(format!(
                "output grads shape {:?} does not match forward output {:?}",
                output_grads.shape(),
                out.shape()
            )));
        }
        let layers = self.num_layers();
        let mut grads = MlpGrads {
            weights: Vec::with_capacity(layers),
            biases: Vec::with_capacity(layers),
        };
        let mut delta = output_grads.to_owned();
        for l in (0..layers).rev() {
            let a_prev = &cache.activations[l];
            grads.weights.push(a_prev.t().dot(&delta));
            grads.biases.push(delta.sum_axis(Axis(0)));
            let mut d_prev = delta.dot(&self.weights[l].t());
            if l > 0 {
                Zip::from(&mut d_prev)
                    .and(a_prev)
                    .for_each(|d, &a| *d *= 1.0 - a * a);
            }
            delta = d_prev;
        }
        grads.weights.reverse();
        grads.biases.reverse();
        Ok((grads, delta))
    }
}
