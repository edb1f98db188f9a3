//! A small CNN with explicit forward/backward passes, split into a client half
//! and a server half at a configurable cut layer.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl SgdConfig {
    pub fn new(learning_rate: f64, batch_size: usize) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(SgdConfig {
            learning_rate,
            batch_size,
        })
    }
}

/// Textual layer description, e.g. `conv3x3:16`, `relu`, `maxpool2`, `dense:10`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerSpec {
    /// Stride-1 convolution with "same" zero padding.
    Conv {
        kernel: usize,
        out_channels: usize,
    },
    Relu,
    MaxPool2,
    /// Fully connected layer over the flattened input.
    Dense {
        out_features: usize,
    },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                kernel,
                out_channels,
            } => write!(f, "conv{kernel}x{kernel}:{out_channels}"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool2 => f.write_str("maxpool2"),
            LayerSpec::Dense { out_features } => write!(f, "dense:{out_features}"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unrecognized layer `{s}`"));
        let s = s.trim();
        match s {
            "relu" => return Ok(LayerSpec::Relu),
            "maxpool2" => return Ok(LayerSpec::MaxPool2),
            _ => {}
        }
        let (head, count) = s.split_once(':').ok_or_else(bad)?;
        let count: usize = count.parse().map_err(|_| bad())?;
        if count == 0 {
            return Err(bad());
        }
        if head == "dense" {
            return Ok(LayerSpec::Dense {
                out_features: count,
            });
        }
        let dims = head.strip_prefix("conv").ok_or_else(bad)?;
        let (kh, kw) = dims.split_once('x').ok_or_else(bad)?;
        let kernel: usize = kh.parse().map_err(|_| bad())?;
        if kw.parse::<usize>().ok() != Some(kernel) || kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "layer `{s}`: only square odd kernels are supported"
            )));
        }
        Ok(LayerSpec::Conv {
            kernel,
            out_channels: count,
        })
    }
}

impl TryFrom<String> for LayerSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerSpec> for String {
    fn from(spec: LayerSpec) -> String {
        spec.to_string()
    }
}

/// Full layer list plus the index of the first server-side layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub cut: usize,
}

impl ModelSpec {
    /// Client: conv3x3(8), relu, maxpool2, conv3x3(16), relu. Server:
    /// maxpool2, conv3x3(16), relu, dense(classes).
    pub fn desk_default(num_classes: usize) -> Self {
        ModelSpec {
            layers: vec![
                LayerSpec::Conv {
                    kernel: 3,
                    out_channels: 8,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::Conv {
                    kernel: 3,
                    out_channels: 16,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::Conv {
                    kernel: 3,
                    out_channels: 16,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    out_features: num_classes,
                },
            ],
            cut: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    fn step(&mut self, lr: T) {
        for (v, g) in self.value.data_mut().iter_mut().zip(self.grad.data_mut()) {
            *v -= lr * *g;
            *g = T::zero();
        }
    }

    fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            value: self.value.cast(),
            grad: self.grad.cast(),
        }
    }
}

fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_wide(z * std)
    })
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `(out_channels, in_channels * kernel * kernel)`
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<ConvCache<T>>,
}

#[derive(Clone, Debug)]
struct ConvCache<T> {
    input_shape: Vec<usize>,
    cols: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight: Param::new(he_normal(&[out_channels, fan_in], fan_in, rng)),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            cache: None,
        }
    }

    /// Valid output columns `[x0, x1)` for horizontal kernel offset `dx`.
    fn x_range(w: usize, dx: isize) -> (usize, usize) {
        let x0 = (-dx).max(0) as usize;
        let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
        (x0.min(x1), x1)
    }

    /// Writes the patches of one sample into columns `[offset, offset + h*w)`
    /// of a `(patch, stride)` matrix.
    fn im2col(
        &self,
        sample: &[T],
        h: usize,
        w: usize,
        cols: &mut [T],
        stride: usize,
        offset: usize,
    ) {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let hw = h * w;
        for c in 0..self.in_channels {
            let plane = &sample[c * hw..(c + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = Self::x_range(w, dx);
                    let row = &mut cols[((c * k + ky) * k + kx) * stride + offset..][..hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        let dst = &mut row[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize || x0 == x1 {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                        dst[..x0].fill(T::zero());
                        dst[x1..].fill(T::zero());
                        let s0 = (x0 as isize + dx) as usize;
                        dst[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates columns back into one sample.
    fn col2im(&self, cols: &[T], h: usize, w: usize, out: &mut [T], stride: usize, offset: usize) {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let hw = h * w;
        for c in 0..self.in_channels {
            let plane = &mut out[c * hw..(c + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = Self::x_range(w, dx);
                    if x0 == x1 {
                        continue;
                    }
                    let row = &cols[((c * k + ky) * k + kx) * stride + offset..][..hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s0 = (x0 as isize + dx) as usize;
                        let dst = &mut plane[sy as usize * w + s0..][..x1 - x0];
                        for (d, &v) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }

    /// Samples per im2col block, sized so a block stays cache resident.
    fn group(&self, hw: usize) -> usize {
        const BLOCK_ELEMS: usize = 32 * 1024;
        (BLOCK_ELEMS / (self.in_channels * self.kernel * self.kernel * hw)).max(1)
    }

    fn forward(&mut self, input: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::shape(
                "conv2d input",
                &[0, self.in_channels, 0, 0],
                shape,
            ));
        }
        let (batch, h, w) = (shape[0], shape[2], shape[3]);
        let hw = h * w;
        let patch = self.in_channels * self.kernel * self.kernel;
        let in_stride = self.in_channels * hw;
        let out_stride = self.out_channels * hw;
        let group = self.group(hw);
        let mut cols = vec![
            T::zero();
            if train {
                batch * patch * hw
            } else {
                group * patch * hw
            }
        ];
        let mut y = vec![T::zero(); self.out_channels * group * hw];
        let mut out = Vec::with_capacity(batch * out_stride);
        for start in (0..batch).step_by(group) {
            let g = group.min(batch - start);
            let n = g * hw;
            let block = if train {
                &mut cols[start * patch * hw..][..patch * n]
            } else {
                &mut cols[..patch * n]
            };
            for i in 0..g {
                let b = start + i;
                self.im2col(
                    &input.data()[b * in_stride..(b + 1) * in_stride],
                    h,
                    w,
                    block,
                    n,
                    i * hw,
                );
            }
            gemm(
                MatRef::new(self.weight.value.data(), self.out_channels, patch),
                MatRef::new(block, patch, n),
                T::zero(),
                &mut y[..self.out_channels * n],
            );
            for i in 0..g {
                for o in 0..self.out_channels {
                    let bias = self.bias.value.data()[o];
                    out.extend(y[o * n + i * hw..][..hw].iter().map(|&v| v + bias));
                }
            }
        }
        self.cache = train.then(|| ConvCache {
            input_shape: shape.to_vec(),
            cols,
        });
        Tensor::new(vec![batch, self.out_channels, h, w], out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::ProtocolOrder("conv2d backward without cached forward".into()))?;
        let (batch, h, w) = (
            cache.input_shape[0],
            cache.input_shape[2],
            cache.input_shape[3],
        );
        let expected = [batch, self.out_channels, h, w];
        if grad.shape() != expected {
            return Err(Error::shape("conv2d grad", &expected, grad.shape()));
        }
        let hw = h * w;
        let patch = self.in_channels * self.kernel * self.kernel;
        let in_stride = self.in_channels * hw;
        let out_stride = self.out_channels * hw;
        let group = self.group(hw);
        let mut dx = Tensor::zeros(&cache.input_shape);
        let mut gbuf = vec![T::zero(); self.out_channels * group * hw];
        let mut dcols = vec![T::zero(); patch * group * hw];
        let mut bias_acc = vec![0.0f64; self.out_channels];
        for start in (0..batch).step_by(group) {
            let g = group.min(batch - start);
            let n = g * hw;
            let block = &cache.cols[start * patch * hw..][..patch * n];
            // Gradient block as (out_channels, g * hw).
            let gm = &mut gbuf[..self.out_channels * n];
            for i in 0..g {
                let src = &grad.data()[(start + i) * out_stride..][..out_stride];
                for o in 0..self.out_channels {
                    gm[o * n + i * hw..][..hw].copy_from_slice(&src[o * hw..][..hw]);
                }
            }
            gemm(
                MatRef::new(gm, self.out_channels, n),
                MatRef::new(block, patch, n).t(),
                T::one(),
                self.weight.grad.data_mut(),
            );
            for (o, row) in gm.chunks(n).enumerate() {
                bias_acc[o] += row.iter().map(|v| v.wide()).sum::<f64>();
            }
            let dc = &mut dcols[..patch * n];
            gemm(
                MatRef::new(self.weight.value.data(), self.out_channels, patch).t(),
                MatRef::new(gm, self.out_channels, n),
                T::zero(),
                dc,
            );
            for i in 0..g {
                let b = start + i;
                self.col2im(
                    dc,
                    h,
                    w,
                    &mut dx.data_mut()[b * in_stride..(b + 1) * in_stride],
                    n,
                    i * hw,
                );
            }
        }
        for (o, acc) in bias_acc.into_iter().enumerate() {
            self.bias.grad.data_mut()[o] += T::from_wide(acc);
        }
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub struct Dense<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out_features, in_features)`
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            in_features,
            out_features,
            weight: Param::new(he_normal(&[out_features, in_features], in_features, rng)),
            bias: Param::new(Tensor::zeros(&[out_features])),
            cache: None,
        }
    }

    fn forward(&mut self, input: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let batch = input.dim(0);
        if input.numel() != batch * self.in_features {
            return Err(Error::shape(
                "dense input",
                &[batch, self.in_features],
                input.shape(),
            ));
        }
        let mut out = Tensor::zeros(&[batch, self.out_features]);
        for row in out.data_mut().chunks_mut(self.out_features) {
            row.copy_from_slice(self.bias.value.data());
        }
        gemm(
            MatRef::new(input.data(), batch, self.in_features),
            MatRef::new(
                self.weight.value.data(),
                self.out_features,
                self.in_features,
            )
            .t(),
            T::one(),
            out.data_mut(),
        );
        self.cache = train.then(|| input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self
            .cache
            .take()
            .ok_or_else(|| Error::ProtocolOrder("dense backward without cached forward".into()))?;
        let batch = input.dim(0);
        if grad.shape() != [batch, self.out_features] {
            return Err(Error::shape(
                "dense grad",
                &[batch, self.out_features],
                grad.shape(),
            ));
        }
        gemm(
            MatRef::new(grad.data(), batch, self.out_features).t(),
            MatRef::new(input.data(), batch, self.in_features),
            T::one(),
            self.weight.grad.data_mut(),
        );
        for o in 0..self.out_features {
            let mut acc = 0.0f64;
            for b in 0..batch {
                acc += grad.data()[b * self.out_features + o].wide();
            }
            self.bias.grad.data_mut()[o] += T::from_wide(acc);
        }
        let mut dx = Tensor::zeros(input.shape());
        gemm(
            MatRef::new(grad.data(), batch, self.out_features),
            MatRef::new(
                self.weight.value.data(),
                self.out_features,
                self.in_features,
            ),
            T::zero(),
            dx.data_mut(),
        );
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    Relu {
        mask: Option<Vec<bool>>,
    },
    /// 2x2 max pooling with stride 2; caches the flat argmax per output.
    MaxPool2 {
        cache: Option<(Vec<usize>, Vec<usize>)>,
    },
    Dense(Dense<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn relu() -> Self {
        Layer::Relu { mask: None }
    }

    pub fn max_pool2() -> Self {
        Layer::MaxPool2 { cache: None }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu { .. } => "relu",
            Layer::MaxPool2 { .. } => "maxpool2",
            Layer::Dense(_) => "dense",
        }
    }

    pub fn forward(&mut self, input: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(conv) => conv.forward(input, train),
            Layer::Dense(dense) => dense.forward(input, train),
            Layer::Relu { mask } => {
                let out = input.map(|v| if v > T::zero() { v } else { T::zero() });
                *mask = train.then(|| input.data().iter().map(|&v| v > T::zero()).collect());
                Ok(out)
            }
            Layer::MaxPool2 { cache } => {
                let shape = input.shape();
                if shape.len() != 4 || shape[2] < 2 || shape[3] < 2 {
                    return Err(Error::shape("maxpool2 input", &[0, 0, 2, 2], shape));
                }
                let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out_data = Vec::with_capacity(b * c * oh * ow);
                let mut argmax = Vec::with_capacity(b * c * oh * ow);
                let src = input.data();
                for plane in 0..b * c {
                    let base = plane * h * w;
                    for y in 0..oh {
                        let r0 = base + 2 * y * w;
                        let (top, bottom) = (&src[r0..r0 + w], &src[r0 + w..r0 + 2 * w]);
                        for x in 0..ow {
                            let (i, j) = (2 * x, 2 * x + 1);
                            let mut best = (top[i], r0 + i);
                            if top[j] > best.0 {
                                best = (top[j], r0 + j);
                            }
                            if bottom[i] > best.0 {
                                best = (bottom[i], r0 + w + i);
                            }
                            if bottom[j] > best.0 {
                                best = (bottom[j], r0 + w + j);
                            }
                            out_data.push(best.0);
                            argmax.push(best.1);
                        }
                    }
                }
                let out = Tensor::new(vec![b, c, oh, ow], out_data)?;
                *cache = train.then(|| (shape.to_vec(), argmax));
                Ok(out)
            }
        }
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(conv) => conv.backward(grad),
            Layer::Dense(dense) => dense.backward(grad),
            Layer::Relu { mask } => {
                let mask = mask.take().ok_or_else(|| {
                    Error::ProtocolOrder("relu backward without cached forward".into())
                })?;
                if mask.len() != grad.numel() {
                    return Err(Error::shape("relu grad", &[mask.len()], &[grad.numel()]));
                }
                let data = grad
                    .data()
                    .iter()
                    .zip(&mask)
                    .map(|(&g, &m)| if m { g } else { T::zero() })
                    .collect();
                Tensor::new(grad.shape().to_vec(), data)
            }
            Layer::MaxPool2 { cache } => {
                let (shape, argmax) = cache.take().ok_or_else(|| {
                    Error::ProtocolOrder("maxpool2 backward without cached forward".into())
                })?;
                if argmax.len() != grad.numel() {
                    return Err(Error::shape(
                        "maxpool2 grad",
                        &[argmax.len()],
                        &[grad.numel()],
                    ));
                }
                let mut dx = Tensor::zeros(&shape);
                for (&idx, &g) in argmax.iter().zip(grad.data()) {
                    dx.data_mut()[idx] += g;
                }
                Ok(dx)
            }
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => Vec::new(),
        }
    }

    pub fn has_cache(&self) -> bool {
        match self {
            Layer::Conv2d(c) => c.cache.is_some(),
            Layer::Dense(d) => d.cache.is_some(),
            Layer::Relu { mask } => mask.is_some(),
            Layer::MaxPool2 { cache } => cache.is_some(),
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv2d(c) => c.cache = None,
            Layer::Dense(d) => d.cache = None,
            Layer::Relu { mask } => *mask = None,
            Layer::MaxPool2 { cache } => *cache = None,
        }
    }

    /// Parameter-only copy in another precision; caches are dropped.
    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                weight: c.weight.cast(),
                bias: c.bias.cast(),
                cache: None,
            }),
            Layer::Dense(d) => Layer::Dense(Dense {
                in_features: d.in_features,
                out_features: d.out_features,
                weight: d.weight.cast(),
                bias: d.bias.cast(),
                cache: None,
            }),
            Layer::Relu { .. } => Layer::Relu { mask: None },
            Layer::MaxPool2 { .. } => Layer::MaxPool2 { cache: None },
        }
    }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("logits", &[labels.len(), 0], shape));
    }
    let (batch, classes) = (shape[0], shape[1]);
    let mut grad = Tensor::zeros(shape);
    let mut loss = 0.0f64;
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Data(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let max = row
            .iter()
            .map(|v| v.wide())
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v.wide() - max).exp()).sum();
        let log_denom = denom.ln();
        loss -= row[label].wide() - max - log_denom;
        let grow = &mut grad.data_mut()[b * classes..(b + 1) * classes];
        for (j, g) in grow.iter_mut().enumerate() {
            let p = (row[j].wide() - max - log_denom).exp();
            let target = if j == label { 1.0 } else { 0.0 };
            *g = T::from_wide((p - target) / batch as f64);
        }
    }
    let loss = loss / batch as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax cross-entropy".into()));
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, Default)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&mut self, input: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, train)?;
            x.ensure_finite(layer.name())?;
        }
        Ok(x)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    /// Applies `p -= lr * grad` to every parameter and zeroes the gradients.
    pub fn sgd_step(&mut self, learning_rate: f64) {
        let lr = T::from_wide(learning_rate);
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                p.step(lr);
            }
        }
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// One full forward/backward/SGD step of the whole network; returns the loss.
    pub fn train_step(
        &mut self,
        input: &Tensor<T>,
        labels: &[usize],
        learning_rate: f64,
    ) -> Result<f64> {
        let logits = self.forward(input, true)?;
        let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
        self.backward(&grad)?;
        self.sgd_step(learning_rate);
        Ok(loss)
    }

    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        Sequential {
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }
}

/// Client and server halves of one network.
#[derive(Clone, Debug)]
pub struct SplitModel<T = f32> {
    pub client: Sequential<T>,
    pub server: Sequential<T>,
    /// Channel count `N` at the cut.
    pub cut_channels: usize,
    /// `(H, W)` of the cut-layer feature maps.
    pub cut_spatial: (usize, usize),
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pending_client_backward: bool,
}

impl<T: Scalar> SplitModel<T> {
    /// Builds and He-initializes the network for `input_shape = [C, H, W]`.
    pub fn build(spec: &ModelSpec, input_shape: [usize; 3], seed: u64) -> Result<Self> {
        if spec.cut == 0 || spec.cut >= spec.layers.len() {
            return Err(Error::Config(format!(
                "cut index {} must leave at least one layer on each side of {} layers",
                spec.cut,
                spec.layers.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // (channels, height, width) or flat features after a dense layer
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut cut_shape = None;
        for (i, layer) in spec.layers.iter().enumerate() {
            if i == spec.cut {
                cut_shape = Some(shape.clone());
            }
            let built = match *layer {
                LayerSpec::Conv {
                    kernel,
                    out_channels,
                } => {
                    if shape.len() != 3 {
                        return Err(Error::Config(format!(
                            "layer {i} ({layer}) needs a spatial input"
                        )));
                    }
                    let conv = Conv2d::new(shape[0], out_channels, kernel, &mut rng);
                    shape[0] = out_channels;
                    Layer::Conv2d(conv)
                }
                LayerSpec::Relu => Layer::relu(),
                LayerSpec::MaxPool2 => {
                    if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                        return Err(Error::Config(format!(
                            "layer {i} (maxpool2) needs spatial input of at least 2x2, got {shape:?}"
                        )));
                    }
                    shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                    Layer::max_pool2()
                }
                LayerSpec::Dense { out_features } => {
                    let in_features: usize = shape.iter().product();
                    shape = vec![out_features];
                    Layer::Dense(Dense::new(in_features, out_features, &mut rng))
                }
            };
            layers.push(built);
        }
        let cut_shape = cut_shape.expect("cut index checked above");
        if cut_shape.len() != 3 {
            return Err(Error::Config(
                "the cut must fall before any dense layer so smashed data has channels".into(),
            ));
        }
        if shape.len() != 1 {
            return Err(Error::Config("the last layer must be dense".into()));
        }
        let server_layers = layers.split_off(spec.cut);
        Ok(SplitModel {
            client: Sequential::new(layers),
            server: Sequential::new(server_layers),
            cut_channels: cut_shape[0],
            cut_spatial: (cut_shape[1], cut_shape[2]),
            input_shape,
            num_classes: shape[0],
            pending_client_backward: false,
        })
    }

    pub fn cut_shape(&self, batch: usize) -> [usize; 4] {
        [
            batch,
            self.cut_channels,
            self.cut_spatial.0,
            self.cut_spatial.1,
        ]
    }

    /// Client-side forward pass producing the smashed data `(B, N, H, W)`.
    pub fn forward_client(&mut self, inputs: &Tensor<T>, train_mode: bool) -> Result<Tensor<T>> {
        let shape = inputs.shape();
        if shape.len() != 4 || shape[1..] != self.input_shape {
            let mut expected = vec![shape.first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::shape("client input", &expected, shape));
        }
        let out = self.client.forward(inputs, train_mode)?;
        self.pending_client_backward = train_mode;
        Ok(out)
    }

    /// Server forward, loss, backward and SGD update. Returns the mean loss
    /// and the gradient with respect to `smashed`.
    pub fn forward_backward_server(
        &mut self,
        smashed: &Tensor<T>,
        labels: &[usize],
        learning_rate: f64,
    ) -> Result<(f64, Tensor<T>)> {
        let expected = self.cut_shape(labels.len());
        if smashed.shape() != expected {
            return Err(Error::shape("smashed data", &expected, smashed.shape()));
        }
        let logits = self.server.forward(smashed, true)?;
        let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
        let grad_in = self.server.backward(&grad)?;
        grad_in.ensure_finite("server backward")?;
        self.server.sgd_step(learning_rate);
        Ok((loss, grad_in))
    }

    /// Client backward pass from the gradient returned by the server, then SGD.
    pub fn backward_client(
        &mut self,
        grad_from_server: &Tensor<T>,
        learning_rate: f64,
    ) -> Result<()> {
        if !self.pending_client_backward {
            return Err(Error::ProtocolOrder(
                "client backward requested without a preceding training forward pass".into(),
            ));
        }
        self.pending_client_backward = false;
        let result = self.client.backward(grad_from_server);
        if result.is_err() {
            self.client.clear_cache();
        }
        result?;
        self.client.sgd_step(learning_rate);
        Ok(())
    }

    /// Logits for evaluation; no caches are kept.
    pub fn predict(&mut self, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        let smashed = self.forward_client(inputs, false)?;
        self.server.forward(&smashed, false)
    }

    /// The same layers as one network, for step-equivalence checks.
    pub fn unsplit(&self) -> Sequential<T> {
        let mut layers = self.client.layers.clone();
        layers.extend(self.server.layers.iter().cloned());
        let mut seq = Sequential::new(layers);
        seq.clear_cache();
        seq
    }

    pub fn cast<U: Scalar>(&self) -> SplitModel<U> {
        SplitModel {
            client: self.client.cast(),
            server: self.server.cast(),
            cut_channels: self.cut_channels,
            cut_spatial: self.cut_spatial,
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            pending_client_backward: false,
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.client.params();
        p.extend(self.server.params());
        p
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SPCK";
const CHECKPOINT_VERSION: u32 = 1;

impl SplitModel<f32> {
    /// Writes every parameter tensor as `ndim, dims.., f32 data` (little-endian)
    /// after a magic/version header.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let params = self.params();
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(params.len() as u32).to_le_bytes())?;
        for p in params {
            let shape = p.value.shape();
            out.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in p.value.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Loads parameters written by [`write_checkpoint`](Self::write_checkpoint)
    /// into a model of the same architecture.
    pub fn load_checkpoint<R: Read>(&mut self, mut input: R) -> Result<()> {
        fn u32_from<R: Read>(r: &mut R) -> Result<u32> {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Deserialize(format!("checkpoint truncated: {e}")))?;
            Ok(u32::from_le_bytes(buf))
        }
        let mut magic = [0u8; 4];
        input
            .read_exact(&mut magic)
            .map_err(|e| Error::Deserialize(format!("checkpoint truncated: {e}")))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Deserialize("bad checkpoint magic".into()));
        }
        let version = u32_from(&mut input)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Deserialize(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = u32_from(&mut input)? as usize;
        let mut params = self.client.params_mut();
        params.extend(self.server.params_mut());
        if count != params.len() {
            return Err(Error::Deserialize(format!(
                "checkpoint has {count} tensors, model has {}",
                params.len()
            )));
        }
        for p in params {
            let ndim = u32_from(&mut input)? as usize;
            let shape = (0..ndim)
                .map(|_| u32_from(&mut input).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != p.value.shape() {
                return Err(Error::shape("checkpoint tensor", p.value.shape(), &shape));
            }
            for v in p.value.data_mut() {
                *v = f32::from_bits(u32_from(&mut input)?);
            }
        }
        Ok(())
    }
}
