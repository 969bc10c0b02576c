//! A small feed-forward network engine over `f64`.
//!
//! All parameters of a [`Network`] live in one flat vector so that optimizers,
//! checksums, serialization and finite-difference probes can treat a model as
//! a plain `&[f64]`. Besides the usual forward/backward pair, every network
//! supports a *dual* pass that carries a tangent (a directional derivative
//! with respect to the input) alongside the activations, and the matching
//! reverse pass through both. That is what makes penalties built from input
//! derivatives trainable without a general autodiff tape.

pub mod conv;
mod optim;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use conv::ConvGeometry;
pub use optim::Adam;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    fn value(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    fn first(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    fn second(self, x: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Architecture description of one layer. Serialized into model manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv2d(ConvGeometry),
    /// Adjoint of the convolution `geometry`: maps the convolution's output
    /// shape back onto its input shape.
    ConvTranspose2d(ConvGeometry),
    Activation(Activation),
    Dropout { rate: f64 },
}

impl LayerSpec {
    fn in_len(&self) -> Option<usize> {
        match self {
            LayerSpec::Dense { inputs, .. } => Some(*inputs),
            LayerSpec::Conv2d(g) => Some(g.in_len()),
            LayerSpec::ConvTranspose2d(g) => Some(g.out_len()),
            _ => None,
        }
    }

    fn out_len(&self) -> Option<usize> {
        match self {
            LayerSpec::Dense { outputs, .. } => Some(*outputs),
            LayerSpec::Conv2d(g) => Some(g.out_len()),
            LayerSpec::ConvTranspose2d(g) => Some(g.in_len()),
            _ => None,
        }
    }

    /// (weight count, bias count)
    fn param_counts(&self) -> (usize, usize) {
        match self {
            LayerSpec::Dense { inputs, outputs } => (inputs * outputs, *outputs),
            LayerSpec::Conv2d(g) => (g.channels_out * g.patch_len(), g.channels_out),
            // weight [channels_out_of_conv == our input channels, channels_in_of_conv * k * k]
            LayerSpec::ConvTranspose2d(g) => (g.channels_out * g.patch_len(), g.channels_in),
            _ => (0, 0),
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            LayerSpec::Dense { inputs, .. } => *inputs,
            LayerSpec::Conv2d(g) => g.patch_len(),
            LayerSpec::ConvTranspose2d(g) => {
                // each output pixel receives roughly (k/stride)^2 * channels_out contributions
                let per_axis = g.kernel.div_ceil(g.stride);
                g.channels_out * per_axis * per_axis
            }
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    spec: LayerSpec,
    offset: usize,
}

/// Stored inputs of every layer from a forward pass, needed by `backward`.
pub struct Trace {
    inputs: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
    output: Array2<f64>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

/// Primal and tangent inputs of every layer from a dual forward pass.
pub struct DualTrace {
    inputs: Vec<(Array2<f64>, Array2<f64>)>,
    output: Array2<f64>,
    tangent: Array2<f64>,
}

impl DualTrace {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn tangent(&self) -> &Array2<f64> {
        &self.tangent
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    params: Vec<f64>,
    input_dim: usize,
    output_dim: usize,
}

impl Network {
    /// Builds a network with He-normal weights and zero biases.
    pub fn new<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeroed(specs)?;
        for layer in &net.layers {
            let (w, _) = layer.spec.param_counts();
            if w == 0 {
                continue;
            }
            let std = (2.0 / layer.spec.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut net.params[layer.offset..layer.offset + w] {
                *p = normal.sample(rng);
            }
        }
        Ok(net)
    }

    /// Builds the architecture with every parameter set to zero.
    pub fn zeroed(specs: &[LayerSpec]) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut offset = 0;
        let mut width: Option<usize> = None;
        let mut input_dim = None;
        for spec in specs {
            match spec {
                LayerSpec::Conv2d(g) | LayerSpec::ConvTranspose2d(g) if !g.check() => {
                    return Err(Error::Shape(format!("invalid convolution geometry {g:?}")));
                }
                LayerSpec::Dropout { rate } if !(0.0..1.0).contains(rate) => {
                    return Err(Error::invalid("dropout_rate", format!("{rate} not in [0, 1)")));
                }
                _ => {}
            }
            if let Some(inp) = spec.in_len() {
                if let Some(w) = width {
                    if w != inp {
                        return Err(Error::Shape(format!(
                            "layer {spec:?} expects {inp} inputs but receives {w}"
                        )));
                    }
                }
                input_dim.get_or_insert(inp);
                width = spec.out_len();
            }
            layers.push(Layer {
                spec: *spec,
                offset,
            });
            let (w, b) = spec.param_counts();
            offset += w + b;
        }
        let (Some(input_dim), Some(output_dim)) = (input_dim, width) else {
            return Err(Error::Shape("network needs at least one parametric layer".into()));
        };
        Ok(Network {
            layers,
            params: vec![0.0; offset],
            input_dim,
            output_dim,
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        checksum_params(&self.params)
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Inference-mode forward pass (dropout disabled).
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = match layer.spec {
                LayerSpec::Activation(a) => h.mapv_into(|v| a.value(v)),
                LayerSpec::Dropout { .. } => h,
                _ => self.linear(layer, h.view(), true),
            };
        }
        Ok(h)
    }

    /// Training-mode forward pass. Dropout masks are drawn from `rng` when one
    /// is given; `None` behaves like inference but still records the trace.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        mut rng: Option<&mut R>,
    ) -> Result<Trace> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for layer in &self.layers {
            let next = match layer.spec {
                LayerSpec::Activation(a) => {
                    masks.push(None);
                    h.mapv(|v| a.value(v))
                }
                LayerSpec::Dropout { rate } => match rng.as_deref_mut() {
                    Some(r) if rate > 0.0 => {
                        let keep = 1.0 - rate;
                        let mask = Array2::from_shape_simple_fn(h.raw_dim(), || {
                            if r.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        });
                        let out = &h * &mask;
                        masks.push(Some(mask));
                        out
                    }
                    _ => {
                        masks.push(None);
                        h.clone()
                    }
                },
                _ => {
                    masks.push(None);
                    self.linear(layer, h.view(), true)
                }
            };
            inputs.push(std::mem::replace(&mut h, next));
        }
        Ok(Trace {
            inputs,
            masks,
            output: h,
        })
    }

    /// Accumulates parameter gradients of `<grad_out, output>` into `grads`
    /// and returns the gradient with respect to the network input.
    pub fn backward(&self, trace: &Trace, grad_out: ArrayView2<f64>, grads: &mut [f64]) -> Array2<f64> {
        assert_eq!(grads.len(), self.params.len());
        let mut g = grad_out.to_owned();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.inputs[idx];
            g = match layer.spec {
                LayerSpec::Activation(a) => {
                    ndarray::Zip::from(&mut g).and(x).for_each(|gv, &xv| *gv *= a.first(xv));
                    g
                }
                LayerSpec::Dropout { .. } => match &trace.masks[idx] {
                    Some(mask) => g * mask,
                    None => g,
                },
                _ => {
                    self.accumulate_weight_grad(layer, g.view(), x.view(), grads, true);
                    self.linear_transpose(layer, g.view())
                }
            };
        }
        g
    }

    /// Forward pass carrying a tangent `t` (same shape as `x`) through the
    /// network; the output tangent is the Jacobian-vector product.
    pub fn forward_dual(&self, x: ArrayView2<f64>, t: ArrayView2<f64>) -> Result<DualTrace> {
        self.check_input(&x)?;
        if x.dim() != t.dim() {
            return Err(Error::Shape("tangent must match the input shape".into()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let mut ht = t.to_owned();
        for layer in &self.layers {
            let (nh, nt) = match layer.spec {
                LayerSpec::Activation(a) => {
                    let mut nt = ht.clone();
                    ndarray::Zip::from(&mut nt).and(&h).for_each(|tv, &xv| *tv *= a.first(xv));
                    (h.mapv(|v| a.value(v)), nt)
                }
                LayerSpec::Dropout { .. } => (h.clone(), ht.clone()),
                _ => (
                    self.linear(layer, h.view(), true),
                    self.linear(layer, ht.view(), false),
                ),
            };
            inputs.push((std::mem::replace(&mut h, nh), std::mem::replace(&mut ht, nt)));
        }
        Ok(DualTrace {
            inputs,
            output: h,
            tangent: ht,
        })
    }

    /// Reverse pass through a [`DualTrace`]: given cotangents for the output
    /// and for the output tangent, accumulates parameter gradients and returns
    /// cotangents for the input and the input tangent.
    pub fn backward_dual(
        &self,
        trace: &DualTrace,
        grad_out: ArrayView2<f64>,
        grad_tangent: ArrayView2<f64>,
        grads: &mut [f64],
    ) -> (Array2<f64>, Array2<f64>) {
        assert_eq!(grads.len(), self.params.len());
        let mut gy = grad_out.to_owned();
        let mut gt = grad_tangent.to_owned();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let (x, t) = &trace.inputs[idx];
            match layer.spec {
                LayerSpec::Activation(a) => {
                    ndarray::Zip::from(&mut gy)
                        .and(&mut gt)
                        .and(x)
                        .and(t)
                        .for_each(|gyv, gtv, &xv, &tv| {
                            *gyv = *gyv * a.first(xv) + *gtv * a.second(xv) * tv;
                            *gtv *= a.first(xv);
                        });
                }
                LayerSpec::Dropout { .. } => {}
                _ => {
                    self.accumulate_weight_grad(layer, gy.view(), x.view(), grads, true);
                    self.accumulate_weight_grad(layer, gt.view(), t.view(), grads, false);
                    gy = self.linear_transpose(layer, gy.view());
                    gt = self.linear_transpose(layer, gt.view());
                }
            }
        }
        (gy, gt)
    }

    fn weight_view(&self, layer: &Layer) -> ArrayView2<'_, f64> {
        let (rows, cols) = weight_shape(&layer.spec);
        ArrayView2::from_shape((rows, cols), &self.params[layer.offset..layer.offset + rows * cols])
            .expect("weight slice")
    }

    fn bias(&self, layer: &Layer) -> &[f64] {
        let (w, b) = layer.spec.param_counts();
        &self.params[layer.offset + w..layer.offset + w + b]
    }

    fn linear(&self, layer: &Layer, x: ArrayView2<f64>, with_bias: bool) -> Array2<f64> {
        let w = self.weight_view(layer);
        let bias = self.bias(layer);
        match layer.spec {
            LayerSpec::Dense { .. } => {
                let mut y = x.dot(&w.t());
                if with_bias {
                    let b = ndarray::ArrayView1::from(bias);
                    y += &b;
                }
                y
            }
            LayerSpec::Conv2d(g) => {
                let cols = conv::im2col(x, &g);
                let rows = cols.dot(&w.t());
                let positions = g.out_height() * g.out_width();
                let mut y = conv::from_rows(rows.view(), g.channels_out, positions);
                if with_bias {
                    add_channel_bias(&mut y, bias, positions);
                }
                y
            }
            LayerSpec::ConvTranspose2d(g) => {
                let positions = g.out_height() * g.out_width();
                let rows = conv::to_rows(x, g.channels_out, positions);
                let cols = rows.dot(&w);
                let mut y = conv::col2im(cols.view(), &g, x.nrows());
                if with_bias {
                    add_channel_bias(&mut y, bias, g.height * g.width);
                }
                y
            }
            _ => unreachable!("not a parametric layer"),
        }
    }

    fn linear_transpose(&self, layer: &Layer, g_out: ArrayView2<f64>) -> Array2<f64> {
        let w = self.weight_view(layer);
        match layer.spec {
            LayerSpec::Dense { .. } => g_out.dot(&w),
            LayerSpec::Conv2d(g) => {
                let positions = g.out_height() * g.out_width();
                let rows = conv::to_rows(g_out, g.channels_out, positions);
                let cols = rows.dot(&w);
                conv::col2im(cols.view(), &g, g_out.nrows())
            }
            LayerSpec::ConvTranspose2d(g) => {
                let cols = conv::im2col(g_out, &g);
                let rows = cols.dot(&w.t());
                conv::from_rows(rows.view(), g.channels_out, g.out_height() * g.out_width())
            }
            _ => unreachable!("not a parametric layer"),
        }
    }

    fn accumulate_weight_grad(
        &self,
        layer: &Layer,
        g_out: ArrayView2<f64>,
        x: ArrayView2<f64>,
        grads: &mut [f64],
        with_bias: bool,
    ) {
        let (rows, cols) = weight_shape(&layer.spec);
        let (wn, bn) = layer.spec.param_counts();
        let (wslice, rest) = grads[layer.offset..].split_at_mut(wn);
        let bslice = &mut rest[..bn];
        let mut gw = ArrayViewMut2::from_shape((rows, cols), wslice).expect("grad slice");
        match layer.spec {
            LayerSpec::Dense { .. } => {
                general_mat_mul(1.0, &g_out.t(), &x, 1.0, &mut gw);
                if with_bias {
                    for (b, s) in bslice.iter_mut().zip(g_out.sum_axis(Axis(0))) {
                        *b += s;
                    }
                }
            }
            LayerSpec::Conv2d(g) => {
                let positions = g.out_height() * g.out_width();
                let grow = conv::to_rows(g_out, g.channels_out, positions);
                let xcols = conv::im2col(x, &g);
                general_mat_mul(1.0, &grow.t(), &xcols, 1.0, &mut gw);
                if with_bias {
                    for (b, s) in bslice.iter_mut().zip(grow.sum_axis(Axis(0))) {
                        *b += s;
                    }
                }
            }
            LayerSpec::ConvTranspose2d(g) => {
                let positions = g.out_height() * g.out_width();
                let xrows = conv::to_rows(x, g.channels_out, positions);
                let gcols = conv::im2col(g_out, &g);
                general_mat_mul(1.0, &xrows.t(), &gcols, 1.0, &mut gw);
                if with_bias {
                    let plane = g.height * g.width;
                    for (c, b) in bslice.iter_mut().enumerate() {
                        *b += g_out.slice(s![.., c * plane..(c + 1) * plane]).sum();
                    }
                }
            }
            _ => unreachable!("not a parametric layer"),
        }
    }
}

fn weight_shape(spec: &LayerSpec) -> (usize, usize) {
    match spec {
        LayerSpec::Dense { inputs, outputs } => (*outputs, *inputs),
        LayerSpec::Conv2d(g) => (g.channels_out, g.patch_len()),
        LayerSpec::ConvTranspose2d(g) => (g.channels_out, g.patch_len()),
        _ => (0, 0),
    }
}

fn add_channel_bias(y: &mut Array2<f64>, bias: &[f64], positions: usize) {
    for mut row in y.rows_mut() {
        for (c, &b) in bias.iter().enumerate() {
            row.slice_mut(s![c * positions..(c + 1) * positions])
                .mapv_inplace(|v| v + b);
        }
    }
}

pub fn checksum_params(params: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for p in params {
        hasher.update(p.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `targets`, and its
/// gradient with respect to the logits.
pub fn bce_with_logits(logits: ArrayView2<f64>, targets: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    ndarray::Zip::from(&mut grad)
        .and(logits)
        .and(targets)
        .for_each(|g, &z, &y| {
            // log(1 + e^z) - y z, evaluated stably
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            *g = (sigmoid(z) - y) / n;
        });
    (loss / n, grad)
}

/// Indices `0..n` shuffled by `rng`.
pub fn shuffled_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Gathers rows of `x` by index.
pub fn gather_rows(x: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

pub fn gather(values: &Array1<f64>, idx: &[usize]) -> Array1<f64> {
    values.select(Axis(0), idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_conv_net(rng: &mut ChaCha8Rng) -> Network {
        let c1 = ConvGeometry {
            channels_in: 2,
            channels_out: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
            height: 6,
            width: 6,
        };
        let t1 = ConvGeometry {
            channels_in: 2,
            channels_out: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
            height: 6,
            width: 6,
        };
        Network::new(
            &[
                LayerSpec::Conv2d(c1),
                LayerSpec::Activation(Activation::Sigmoid),
                LayerSpec::Dense { inputs: 27, outputs: 27 },
                LayerSpec::Activation(Activation::Sigmoid),
                LayerSpec::ConvTranspose2d(t1),
                LayerSpec::Activation(Activation::Sigmoid),
            ],
            rng,
        )
        .unwrap()
    }

    fn loss(net: &Network, x: &Array2<f64>, probe: &Array2<f64>) -> f64 {
        (net.forward(x.view()).unwrap() * probe).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = small_conv_net(&mut rng);
        for p in net.params_mut() {
            *p += 0.05;
        }
        let x = Array2::from_shape_fn((2, 72), |(i, j)| ((i * 7 + j * 5) % 9) as f64 / 9.0 - 0.4);
        let probe = Array2::from_shape_fn((2, 72), |(i, j)| ((i + 3 * j) % 5) as f64 - 2.0);
        let trace = net.forward_train::<ChaCha8Rng>(x.view(), None).unwrap();
        let mut grads = vec![0.0; net.num_params()];
        let gx = net.backward(&trace, probe.view(), &mut grads);
        let h = 1e-5;
        for k in (0..net.num_params()).step_by(7) {
            let orig = net.params()[k];
            net.params_mut()[k] = orig + h;
            let up = loss(&net, &x, &probe);
            net.params_mut()[k] = orig - h;
            let down = loss(&net, &x, &probe);
            net.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grads[k]).abs() <= 1e-6 + 1e-4 * fd.abs(), "param {k}: {fd} vs {}", grads[k]);
        }
        let mut xp = x.clone();
        xp[[1, 10]] += h;
        let mut xm = x.clone();
        xm[[1, 10]] -= h;
        let fd = (loss(&net, &xp, &probe) - loss(&net, &xm, &probe)) / (2.0 * h);
        assert!((fd - gx[[1, 10]]).abs() < 1e-6);
    }

    #[test]
    fn dual_tangent_is_directional_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = small_conv_net(&mut rng);
        let x = Array2::from_shape_fn((1, 72), |(_, j)| (j as f64 * 0.37).sin());
        let t = Array2::from_shape_fn((1, 72), |(_, j)| (j as f64 * 0.11).cos());
        let dual = net.forward_dual(x.view(), t.view()).unwrap();
        let h = 1e-6;
        let up = net.forward((&x + &(&t * h)).view()).unwrap();
        let down = net.forward((&x - &(&t * h)).view()).unwrap();
        let fd = (up - down) / (2.0 * h);
        for (a, b) in fd.iter().zip(dual.tangent().iter()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn dual_backward_matches_finite_differences() {
        // objective: sum(tangent^2 * w1) + sum(output * w2)
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = small_conv_net(&mut rng);
        let x = Array2::from_shape_fn((2, 72), |(i, j)| ((i * 3 + j) % 7) as f64 / 7.0);
        let t = Array2::from_shape_fn((2, 72), |(i, j)| if j == 4 + i { 1.0 } else { 0.0 });
        let w1 = Array2::from_shape_fn((2, 72), |(i, j)| 1.0 + ((i + j) % 3) as f64);
        let w2 = Array2::from_shape_fn((2, 72), |(i, j)| ((i * 5 + j) % 4) as f64 - 1.5);
        let objective = |net: &Network| {
            let d = net.forward_dual(x.view(), t.view()).unwrap();
            (d.tangent().mapv(|v| v * v) * &w1).sum() + (d.output() * &w2).sum()
        };
        let d = net.forward_dual(x.view(), t.view()).unwrap();
        let gt = d.tangent() * &w1 * 2.0;
        let mut grads = vec![0.0; net.num_params()];
        net.backward_dual(&d, w2.view(), gt.view(), &mut grads);
        let h = 1e-5;
        for k in (0..net.num_params()).step_by(5) {
            let orig = net.params()[k];
            net.params_mut()[k] = orig + h;
            let up = objective(&net);
            net.params_mut()[k] = orig - h;
            let down = objective(&net);
            net.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grads[k]).abs() <= 1e-6 + 1e-4 * fd.abs(), "param {k}: {fd} vs {}", grads[k]);
        }
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let err = Network::zeroed(&[
            LayerSpec::Dense { inputs: 4, outputs: 3 },
            LayerSpec::Dense { inputs: 2, outputs: 1 },
        ]);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn bce_matches_direct_formula() {
        let z = Array2::from_shape_vec((1, 2), vec![0.3, -2.0]).unwrap();
        let y = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let (loss, _) = bce_with_logits(z.view(), y.view());
        let direct = -(sigmoid(0.3).ln() + (1.0 - sigmoid(-2.0)).ln()) / 2.0;
        assert!((loss - direct).abs() < 1e-12);
    }
}
