//! Minimal deterministic layer-stack network with manual backpropagation.
//!
//! Supported layer kinds: 2-D convolution (zero-padded, strided), ReLU,
//! global average/max pooling, dense, softmax, and a covariate-concat layer
//! that fuses a scalar side input (e.g. gender in {-1,+1}) through a small
//! rectified dense branch. The stack is an ordered list; there is no general
//! graph autodiff.
//!
//! Everything is generic over the float width: training runs at `f32`,
//! the gradient-check oracle re-runs the same code at `f64`.

mod adam;
mod checkpoint;
mod gradcheck;

pub use adam::{AdamParams, LrSchedule, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointData, CheckpointError};
pub use gradcheck::{grad_check, GradCheckReport, LayerGradReport, DEFAULT_FD_STEP};

use crate::tensor::Tensor;
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("layer {layer} ({kind}): expected input shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        layer: usize,
        kind: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("layer {layer} (concat) needs a covariate input, none was given")]
    MissingCovariate { layer: usize },
    #[error("stale or missing forward cache; rerun forward_cached on this network")]
    MissingCache,
    #[error("non-finite gradient in layer {layer}, parameter tensor {tensor} ({context})")]
    NonFiniteGradient {
        layer: usize,
        tensor: usize,
        context: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

/// One layer of the stack, as stored in configs and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Zero-padded convolution, square odd kernel, pad = kernel/2.
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    GlobalAvgPool,
    GlobalMaxPool,
    Dense {
        out: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Softmax,
    /// Appends `width` rectified features computed from the scalar covariate.
    Concat { width: usize },
}

fn default_true() -> bool {
    true
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::GlobalMaxPool => "global_max_pool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Concat { .. } => "concat",
        }
    }

    /// Output shape for `input`, or a human-readable reason it is invalid.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
            } => {
                if input.len() != 3 {
                    return Err(format!("conv2d needs [H,W,C] input, got {input:?}"));
                }
                if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                    return Err("conv2d hyperparameters must be positive".into());
                }
                if kernel % 2 == 0 {
                    return Err(format!("conv2d kernel must be odd, got {kernel}"));
                }
                let pad = kernel / 2;
                let (h, w) = (input[0], input[1]);
                if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                    return Err(format!("conv2d kernel {kernel} too large for {input:?}"));
                }
                let ho = (h + 2 * pad - kernel) / stride + 1;
                let wo = (w + 2 * pad - kernel) / stride + 1;
                if ho == 0 || wo == 0 {
                    return Err(format!("conv2d produces empty output from {input:?}"));
                }
                Ok(vec![ho, wo, *out_channels])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::GlobalAvgPool | LayerSpec::GlobalMaxPool => {
                if input.len() != 3 {
                    return Err(format!("global pool needs [H,W,C] input, got {input:?}"));
                }
                Ok(vec![input[2]])
            }
            LayerSpec::Dense { out, .. } => {
                if input.len() != 1 {
                    return Err(format!("dense needs a flat input, got {input:?}"));
                }
                if *out == 0 {
                    return Err("dense output width must be positive".into());
                }
                Ok(vec![*out])
            }
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(format!("softmax needs a flat input, got {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Concat { width } => {
                if input.len() != 1 {
                    return Err(format!("concat needs a flat input, got {input:?}"));
                }
                if *width == 0 {
                    return Err("concat width must be positive".into());
                }
                Ok(vec![input[0] + width])
            }
        }
    }

    /// Shapes of this layer's trainable tensors given its input shape.
    fn param_shapes(&self, input: &[usize]) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                ..
            } => vec![
                vec![*kernel, *kernel, input[2], *out_channels],
                vec![*out_channels],
            ],
            LayerSpec::Dense { out, bias } => {
                let mut shapes = vec![vec![input[0], *out]];
                if *bias {
                    shapes.push(vec![*out]);
                }
                shapes
            }
            // 1 -> width dense branch: weight and bias, both length `width`.
            LayerSpec::Concat { width } => vec![vec![*width], vec![*width]],
            _ => vec![],
        }
    }
}

/// Ordered layer stack plus input shape and the weight-init seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

impl NetworkSpec {
    /// Checks layer compatibility and returns the shape flowing into each
    /// layer plus the final output shape (`len == layers.len() + 1`).
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>, NetError> {
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(NetError::InvalidSpec(format!(
                "input shape {:?} must be non-empty and positive",
                self.input_shape
            )));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.output_shape(shapes.last().unwrap()).map_err(|e| {
                NetError::InvalidSpec(format!("layer {i} ({}): {e}", layer.kind_name()))
            })?;
            shapes.push(out);
        }
        let softmax_positions: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Softmax))
            .map(|(i, _)| i)
            .collect();
        if softmax_positions.len() > 1 {
            return Err(NetError::InvalidSpec(
                "at most one softmax layer is allowed".into(),
            ));
        }
        if let Some(&p) = softmax_positions.first() {
            if p != self.layers.len() - 1 {
                return Err(NetError::InvalidSpec(
                    "softmax must be the head layer".into(),
                ));
            }
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>, NetError> {
        Ok(self.infer_shapes()?.last().unwrap().clone())
    }

    /// Distribution heads must end in softmax over exactly `t_max` nodes.
    pub fn validate_distribution_head(&self, t_max: usize) -> Result<(), NetError> {
        let shapes = self.infer_shapes()?;
        if !matches!(self.layers.last(), Some(LayerSpec::Softmax)) {
            return Err(NetError::InvalidSpec(
                "distribution head must end in softmax".into(),
            ));
        }
        let out = shapes.last().unwrap();
        if out != &[t_max] {
            return Err(NetError::InvalidSpec(format!(
                "head outputs {out:?}, expected [{t_max}]"
            )));
        }
        Ok(())
    }
}

/// A spec bound to its parameter tensors.
#[derive(Debug, Clone)]
pub struct Network<T: Float = f32> {
    pub spec: NetworkSpec,
    /// `params[layer]` holds that layer's trainable tensors (possibly empty).
    params: Vec<Vec<Tensor<T>>>,
}

/// Activations recorded by `forward_cached`. `inputs[l]` is the tensor fed
/// into layer `l`; `output` is the head output.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Float = f32> {
    pub inputs: Vec<Tensor<T>>,
    pub output: Tensor<T>,
    pub covariate: Option<T>,
}

impl<T: Float> ForwardCache<T> {
    /// Head output before the final softmax (the head output itself when the
    /// net has no softmax).
    pub fn logits<'a>(&'a self, net: &Network<T>) -> &'a Tensor<T> {
        if matches!(net.spec.layers.last(), Some(LayerSpec::Softmax)) {
            &self.inputs[self.inputs.len() - 1]
        } else {
            &self.output
        }
    }

    /// Activation feeding the last global pooling layer: the conv feature map
    /// used for attention maps.
    pub fn pooled_features<'a>(&'a self, net: &Network<T>) -> Option<&'a Tensor<T>> {
        net.spec
            .layers
            .iter()
            .rposition(|l| {
                matches!(l, LayerSpec::GlobalAvgPool | LayerSpec::GlobalMaxPool)
            })
            .map(|p| &self.inputs[p])
    }
}

impl Network<f32> {
    /// He fan-in normal init, fully determined by `spec.seed`.
    pub fn init(spec: NetworkSpec) -> Result<Self, NetError> {
        let shapes = spec.infer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let mut tensors = Vec::new();
            for (pi, pshape) in layer.param_shapes(&shapes[i]).into_iter().enumerate() {
                let fan_in = match layer {
                    LayerSpec::Conv2d { kernel, .. } => kernel * kernel * shapes[i][2],
                    LayerSpec::Dense { .. } => shapes[i][0],
                    LayerSpec::Concat { .. } => 1,
                    _ => 1,
                };
                let is_bias = pi == 1;
                let n: usize = pshape.iter().product();
                let data = if is_bias {
                    vec![0.0f32; n]
                } else {
                    let std = (2.0 / fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| (std * standard_normal(&mut rng)) as f32)
                        .collect()
                };
                tensors.push(Tensor::new(pshape, data).expect("init shape"));
            }
            params.push(tensors);
        }
        Ok(Self { spec, params })
    }
}

/// Box-Muller normal draw; kept local so init needs nothing beyond `rand`.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl<T: Float> Network<T> {
    pub fn from_params(spec: NetworkSpec, params: Vec<Vec<Tensor<T>>>) -> Result<Self, NetError> {
        let shapes = spec.infer_shapes()?;
        if params.len() != spec.layers.len() {
            return Err(NetError::InvalidSpec(format!(
                "expected {} layer parameter groups, got {}",
                spec.layers.len(),
                params.len()
            )));
        }
        for (i, layer) in spec.layers.iter().enumerate() {
            let want = layer.param_shapes(&shapes[i]);
            let got: Vec<Vec<usize>> = params[i].iter().map(|t| t.shape().to_vec()).collect();
            if want != got {
                return Err(NetError::InvalidSpec(format!(
                    "layer {i} ({}): parameter shapes {got:?} do not match spec {want:?}",
                    layer.kind_name()
                )));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn params(&self) -> &[Vec<Tensor<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Tensor<T>>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .flat_map(|ts| ts.iter().map(|t| t.len()))
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for ts in &mut self.params {
            for t in ts {
                let _ = t.grad_mut();
                t.zero_grad();
            }
        }
    }

    pub fn scale_grads(&mut self, s: T) {
        for ts in &mut self.params {
            for t in ts {
                for g in t.grad_mut() {
                    *g = *g * s;
                }
            }
        }
    }

    /// Re-runs the same parameters at another float width.
    pub fn cast<U: Float>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|ts| ts.iter().map(|t| t.cast::<U>()).collect())
                .collect(),
        }
    }

    /// Pure forward pass; no cache. Safe to call concurrently.
    pub fn forward(&self, input: &Tensor<T>, covariate: Option<T>) -> Result<Tensor<T>, NetError> {
        let mut x = input.clone();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            x = self.apply_layer(i, layer, &x, covariate)?;
        }
        Ok(x)
    }

    /// Forward pass that records every layer input for backward and CAM use.
    pub fn forward_cached(
        &self,
        input: &Tensor<T>,
        covariate: Option<T>,
    ) -> Result<ForwardCache<T>, NetError> {
        let mut inputs = Vec::with_capacity(self.spec.layers.len());
        let mut x = input.clone();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let next = self.apply_layer(i, layer, &x, covariate)?;
            inputs.push(x);
            x = next;
        }
        Ok(ForwardCache {
            inputs,
            output: x,
            covariate,
        })
    }

    fn apply_layer(
        &self,
        index: usize,
        layer: &LayerSpec,
        x: &Tensor<T>,
        covariate: Option<T>,
    ) -> Result<Tensor<T>, NetError> {
        let expected = layer.output_shape(x.shape()).map_err(|_| {
            // Diagnose against the spec-inferred shape when available.
            let want = self
                .spec
                .infer_shapes()
                .ok()
                .map(|s| s[index].clone())
                .unwrap_or_default();
            NetError::ShapeMismatch {
                layer: index,
                kind: layer.kind_name().into(),
                expected: want,
                got: x.shape().to_vec(),
            }
        })?;
        let out = match layer {
            LayerSpec::Conv2d { stride, kernel, .. } => {
                conv2d_forward(x, &self.params[index][0], &self.params[index][1], *kernel, *stride)
            }
            LayerSpec::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
            LayerSpec::GlobalAvgPool => global_avg_pool(x),
            LayerSpec::GlobalMaxPool => global_max_pool(x),
            LayerSpec::Dense { bias, .. } => dense_forward(
                x,
                &self.params[index][0],
                if *bias { Some(&self.params[index][1]) } else { None },
            ),
            LayerSpec::Softmax => softmax(x),
            LayerSpec::Concat { width } => {
                let g = covariate.ok_or(NetError::MissingCovariate { layer: index })?;
                concat_forward(x, g, &self.params[index][0], &self.params[index][1], *width)
            }
        };
        debug_assert_eq!(out.shape(), expected.as_slice());
        Ok(out)
    }

    /// Backprop from a gradient at the head output, accumulating parameter
    /// gradients in place (call `zero_grads` between batches).
    pub fn backward(&mut self, cache: &ForwardCache<T>, head_grad: &Tensor<T>) -> Result<(), NetError> {
        self.backward_from(cache, self.spec.layers.len(), head_grad)
    }

    /// Backprop from a gradient at the pre-softmax logits. Equivalent to
    /// `backward` when the net has no softmax head.
    pub fn backward_from_logits(
        &mut self,
        cache: &ForwardCache<T>,
        logit_grad: &Tensor<T>,
    ) -> Result<(), NetError> {
        let upto = if matches!(self.spec.layers.last(), Some(LayerSpec::Softmax)) {
            self.spec.layers.len() - 1
        } else {
            self.spec.layers.len()
        };
        self.backward_from(cache, upto, logit_grad)
    }

    fn backward_from(
        &mut self,
        cache: &ForwardCache<T>,
        upto: usize,
        grad: &Tensor<T>,
    ) -> Result<(), NetError> {
        if cache.inputs.len() != self.spec.layers.len() {
            return Err(NetError::MissingCache);
        }
        let mut dy = grad.clone();
        for i in (0..upto).rev() {
            let layer = self.spec.layers[i].clone();
            let x = &cache.inputs[i];
            let activation_out = if i + 1 < cache.inputs.len() {
                &cache.inputs[i + 1]
            } else {
                &cache.output
            };
            dy = match layer {
                LayerSpec::Conv2d { kernel, stride, .. } => {
                    conv2d_backward(x, &mut self.params[i], &dy, kernel, stride)
                }
                LayerSpec::Relu => {
                    let mut dx = dy;
                    let n = dx.len();
                    for j in 0..n {
                        if x.data()[j] <= T::zero() {
                            dx.data_mut()[j] = T::zero();
                        }
                    }
                    dx
                }
                LayerSpec::GlobalAvgPool => gap_backward(x, &dy),
                LayerSpec::GlobalMaxPool => gmp_backward(x, &dy),
                LayerSpec::Dense { bias, .. } => dense_backward(x, &mut self.params[i], bias, &dy),
                LayerSpec::Softmax => softmax_backward(activation_out, &dy),
                LayerSpec::Concat { width } => {
                    let g = cache
                        .covariate
                        .ok_or(NetError::MissingCovariate { layer: i })?;
                    concat_backward(x, g, &mut self.params[i], width, &dy)
                }
            };
        }
        Ok(())
    }
}

// --- layer kernels ---------------------------------------------------------

/// Padding clamps to the edge pixel (replicate). Zero padding would plant a
/// synthetic step edge around the image that conv features latch onto,
/// which corrupts attention maps at the borders.
#[inline]
fn clamp_coord(v: isize, max: usize) -> usize {
    v.clamp(0, max as isize - 1) as usize
}

fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    kern: &Tensor<T>,
    bias: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Tensor<T> {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = kern.shape()[3];
    let pad = k / 2;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(vec![ho, wo, cout]);
    let xd = x.data();
    let kd = kern.data();
    let bd = bias.data();
    let od = out.data_mut();
    let mut acc = vec![T::zero(); cout];
    for oy in 0..ho {
        for ox in 0..wo {
            acc.copy_from_slice(bd);
            for ky in 0..k {
                let iy = clamp_coord((oy * stride + ky) as isize - pad as isize, h);
                for kx in 0..k {
                    let ix = clamp_coord((ox * stride + kx) as isize - pad as isize, w);
                    let xoff = (iy * w + ix) * cin;
                    let koff = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let v = xd[xoff + ci];
                        let krow = &kd[koff + ci * cout..koff + (ci + 1) * cout];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a = *a + v * kv;
                        }
                    }
                }
            }
            od[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout].copy_from_slice(&acc);
        }
    }
    out
}

/// Returns dL/dx and accumulates kernel/bias gradients into `params`.
fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    params: &mut [Tensor<T>],
    dy: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Tensor<T> {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo, cout) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
    let pad = k / 2;
    let mut dx = Tensor::zeros(vec![h, w, cin]);
    let (kern, bias) = params.split_at_mut(1);
    let (kd, kg) = kern[0].data_and_grad_mut();
    let bg = bias[0].grad_mut();
    let xd = x.data();
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for oy in 0..ho {
        for ox in 0..wo {
            let dyrow = &dyd[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
            for (b, &d) in bg.iter_mut().zip(dyrow) {
                *b = *b + d;
            }
            for ky in 0..k {
                let iy = clamp_coord((oy * stride + ky) as isize - pad as isize, h);
                for kx in 0..k {
                    let ix = clamp_coord((ox * stride + kx) as isize - pad as isize, w);
                    let xoff = (iy * w + ix) * cin;
                    let koff = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let v = xd[xoff + ci];
                        let krow = &kd[koff + ci * cout..koff + (ci + 1) * cout];
                        let kgrow = &mut kg[koff + ci * cout..koff + (ci + 1) * cout];
                        let mut acc = T::zero();
                        for co in 0..cout {
                            let d = dyrow[co];
                            kgrow[co] = kgrow[co] + v * d;
                            acc = acc + krow[co] * d;
                        }
                        dxd[xoff + ci] = dxd[xoff + ci] + acc;
                    }
                }
            }
        }
    }
    dx
}

fn global_avg_pool<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let inv = T::one() / T::from(h * w).unwrap();
    let mut out = Tensor::zeros(vec![c]);
    let od = out.data_mut();
    for row in x.data().chunks_exact(c) {
        for (o, &v) in od.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    for o in od.iter_mut() {
        *o = *o * inv;
    }
    out
}

fn gap_backward<T: Float>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let inv = T::one() / T::from(h * w).unwrap();
    let mut dx = Tensor::zeros(vec![h, w, c]);
    for row in dx.data_mut().chunks_exact_mut(c) {
        for (d, &g) in row.iter_mut().zip(dy.data()) {
            *d = g * inv;
        }
    }
    dx
}

fn global_max_pool<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.shape()[2];
    let mut out = Tensor::filled(vec![c], T::neg_infinity());
    let od = out.data_mut();
    for row in x.data().chunks_exact(c) {
        for (o, &v) in od.iter_mut().zip(row) {
            if v > *o {
                *o = v;
            }
        }
    }
    out
}

/// Routes each channel's gradient to the first spatial argmax (ties broken
/// in raster order), recomputed from the cached input.
fn gmp_backward<T: Float>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut best = vec![T::neg_infinity(); c];
    let mut best_at = vec![0usize; c];
    for (pos, row) in x.data().chunks_exact(c).enumerate() {
        for (ch, &v) in row.iter().enumerate() {
            if v > best[ch] {
                best[ch] = v;
                best_at[ch] = pos;
            }
        }
    }
    let mut dx = Tensor::zeros(vec![h, w, c]);
    for ch in 0..c {
        dx.data_mut()[best_at[ch] * c + ch] = dy.data()[ch];
    }
    dx
}

fn dense_forward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let (n, m) = (w.shape()[0], w.shape()[1]);
    let mut out = match b {
        Some(b) => Tensor::new(vec![m], b.data().to_vec()).unwrap(),
        None => Tensor::zeros(vec![m]),
    };
    let od = out.data_mut();
    let wd = w.data();
    for i in 0..n {
        let xi = x.data()[i];
        let wrow = &wd[i * m..(i + 1) * m];
        for (o, &wv) in od.iter_mut().zip(wrow) {
            *o = *o + xi * wv;
        }
    }
    out
}

fn dense_backward<T: Float>(
    x: &Tensor<T>,
    params: &mut [Tensor<T>],
    bias: bool,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (n, m) = (params[0].shape()[0], params[0].shape()[1]);
    if bias {
        params[1].accumulate_grad(dy.data());
    }
    let (wd, wg) = params[0].data_and_grad_mut();
    let mut dx = Tensor::zeros(vec![n]);
    for i in 0..n {
        let xi = x.data()[i];
        let wrow = &wd[i * m..(i + 1) * m];
        let wgrow = &mut wg[i * m..(i + 1) * m];
        let mut acc = T::zero();
        for j in 0..m {
            let d = dy.data()[j];
            wgrow[j] = wgrow[j] + xi * d;
            acc = acc + wrow[j] * d;
        }
        dx.data_mut()[i] = acc;
    }
    dx
}

/// Numerically stable softmax; the normalization runs in f64 regardless of
/// the tensor's float width so probabilities sum to 1 within 1e-6 at f32.
pub fn softmax<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let vals: Vec<f64> = x.data().iter().map(|v| v.to_f64().unwrap()).collect();
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor::new(
        x.shape().to_vec(),
        exps.iter().map(|e| T::from(e / sum).unwrap()).collect(),
    )
    .unwrap()
}

fn softmax_backward<T: Float>(p: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dot = T::zero();
    for (&pi, &di) in p.data().iter().zip(dy.data()) {
        dot = dot + pi * di;
    }
    Tensor::new(
        p.shape().to_vec(),
        p.data()
            .iter()
            .zip(dy.data())
            .map(|(&pi, &di)| pi * (di - dot))
            .collect(),
    )
    .unwrap()
}

fn concat_forward<T: Float>(
    x: &Tensor<T>,
    g: T,
    w: &Tensor<T>,
    b: &Tensor<T>,
    width: usize,
) -> Tensor<T> {
    let mut data = Vec::with_capacity(x.len() + width);
    data.extend_from_slice(x.data());
    for i in 0..width {
        let z = w.data()[i] * g + b.data()[i];
        data.push(if z > T::zero() { z } else { T::zero() });
    }
    Tensor::new(vec![x.len() + width], data).unwrap()
}

fn concat_backward<T: Float>(
    x: &Tensor<T>,
    g: T,
    params: &mut [Tensor<T>],
    width: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let n = x.len();
    let dx = Tensor::new(vec![n], dy.data()[..n].to_vec()).unwrap();
    let wdata: Vec<T> = params[0].data().to_vec();
    let bdata: Vec<T> = params[1].data().to_vec();
    let mut dw = vec![T::zero(); width];
    let mut db = vec![T::zero(); width];
    for i in 0..width {
        let pre = wdata[i] * g + bdata[i];
        if pre > T::zero() {
            let d = dy.data()[n + i];
            dw[i] = d * g;
            db[i] = d;
        }
    }
    params[0].accumulate_grad(&dw);
    params[1].accumulate_grad(&db);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let spec = NetworkSpec {
            input_shape: vec![2],
            layers: vec![LayerSpec::Dense { out: 2, bias: true }],
            seed: 0,
        };
        let net = Network::from_params(
            spec,
            vec![vec![
                t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]),
                t(vec![2], vec![0.0, 0.0]),
            ]],
        )
        .unwrap();
        let out = net.forward(&t(vec![2], vec![1.0, 2.0]), None).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let out = softmax(&t(vec![4], vec![0.0; 4]));
        for &p in out.data() {
            assert!((p - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn one_by_one_conv_then_gap_is_scaled_mean() {
        // 1x1 conv with weight 2 on a constant image of 3s -> GAP -> 6.
        let spec = NetworkSpec {
            input_shape: vec![4, 4, 1],
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 1,
                    kernel: 1,
                    stride: 1,
                },
                LayerSpec::GlobalAvgPool,
            ],
            seed: 0,
        };
        let net = Network::from_params(
            spec,
            vec![
                vec![t(vec![1, 1, 1, 1], vec![2.0]), t(vec![1], vec![0.0])],
                vec![],
            ],
        )
        .unwrap();
        let out = net
            .forward(&Tensor::filled(vec![4, 4, 1], 3.0f32), None)
            .unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn zero_head_gradient_gives_zero_param_gradients() {
        let spec = NetworkSpec {
            input_shape: vec![4, 4, 1],
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 2,
                    kernel: 3,
                    stride: 2,
                },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { out: 3, bias: true },
            ],
            seed: 9,
        };
        let mut net = Network::init(spec).unwrap();
        net.zero_grads();
        let x = Tensor::filled(vec![4, 4, 1], 0.5f32);
        let cache = net.forward_cached(&x, None).unwrap();
        net.backward(&cache, &Tensor::zeros(vec![3])).unwrap();
        for ts in net.params() {
            for t in ts {
                assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
            }
        }
    }

    #[test]
    fn single_dense_squared_error_gradient_matches_closed_form() {
        // One dense layer, squared-error head: dL/dW = 2*(pred - target)*x.
        let spec = NetworkSpec {
            input_shape: vec![2],
            layers: vec![LayerSpec::Dense { out: 1, bias: true }],
            seed: 0,
        };
        let mut net = Network::from_params(
            spec,
            vec![vec![
                t(vec![2, 1], vec![0.5, -0.25]),
                t(vec![1], vec![0.1]),
            ]],
        )
        .unwrap();
        net.zero_grads();
        let x = t(vec![2], vec![2.0, 3.0]);
        let cache = net.forward_cached(&x, None).unwrap();
        let pred = cache.output.data()[0];
        let target = 1.5f32;
        // L = (pred - target)^2, dL/dpred = 2 (pred - target)
        let dl = 2.0 * (pred - target);
        net.backward(&cache, &t(vec![1], vec![dl])).unwrap();
        let wg = net.params()[0][0].grad().unwrap();
        assert!((wg[0] - dl * 2.0).abs() < 1e-6);
        assert!((wg[1] - dl * 3.0).abs() < 1e-6);
        assert!((net.params()[0][1].grad().unwrap()[0] - dl).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_names_offending_layer() {
        let spec = NetworkSpec {
            input_shape: vec![4, 4, 1],
            layers: vec![LayerSpec::GlobalAvgPool, LayerSpec::Dense { out: 2, bias: true }],
            seed: 0,
        };
        let net = Network::init(spec).unwrap();
        let err = net.forward(&Tensor::zeros(vec![3]), None).unwrap_err();
        match err {
            NetError::ShapeMismatch { layer, kind, .. } => {
                assert_eq!(layer, 0);
                assert_eq!(kind, "global_avg_pool");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_only_allowed_at_head() {
        let spec = NetworkSpec {
            input_shape: vec![4],
            layers: vec![LayerSpec::Softmax, LayerSpec::Dense { out: 2, bias: true }],
            seed: 0,
        };
        assert!(matches!(spec.infer_shapes(), Err(NetError::InvalidSpec(_))));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let spec = NetworkSpec {
            input_shape: vec![8, 8, 1],
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 4,
                    kernel: 3,
                    stride: 2,
                },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { out: 5, bias: true },
            ],
            seed: 1234,
        };
        let a = Network::init(spec.clone()).unwrap();
        let b = Network::init(spec).unwrap();
        for (ta, tb) in a.params().iter().flatten().zip(b.params().iter().flatten()) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let spec = NetworkSpec {
            input_shape: vec![4],
            layers: vec![LayerSpec::Dense { out: 2, bias: true }],
            seed: 0,
        };
        let mut net = Network::init(spec).unwrap();
        let bogus = ForwardCache {
            inputs: vec![],
            output: Tensor::zeros(vec![2]),
            covariate: None,
        };
        assert!(matches!(
            net.backward(&bogus, &Tensor::zeros(vec![2])),
            Err(NetError::MissingCache)
        ));
    }
}
