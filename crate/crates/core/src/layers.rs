//! Layer kinds with exact forward and backward passes.
//!
//! Convolutions are cross-correlations (no kernel flip) with stride 1 and
//! zero "same" padding. Batch items are processed in parallel; parameter
//! gradients are accumulated per item and then summed in batch order, so
//! results do not depend on the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::ZERO {
                    x
                } else {
                    T::ZERO
                }
            }
            Activation::Sigmoid => {
                if x >= T::ZERO {
                    T::ONE / (T::ONE + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::ONE + e)
                }
            }
            Activation::Linear => x,
        }
    }

    /// d(out)/d(pre) times `grad`, given the pre-activation and the output.
    #[inline]
    fn backward<T: Element>(self, pre: T, out: T, grad: T) -> T {
        match self {
            // Subgradient at exactly zero is zero.
            Activation::Relu => {
                if pre > T::ZERO {
                    grad
                } else {
                    T::ZERO
                }
            }
            Activation::Sigmoid => grad * out * (T::ONE - out),
            Activation::Linear => grad,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2d,
    MaxPool2x2,
    UpsampleNearest2x,
    Flatten,
    Dense,
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            LayerKind::Conv2d => "Conv2D",
            LayerKind::MaxPool2x2 => "MaxPool2x2",
            LayerKind::UpsampleNearest2x => "UpsampleNearest2x",
            LayerKind::Flatten => "Flatten",
            LayerKind::Dense => "Dense",
        };
        f.write_str(name)
    }
}

/// Same-padded, stride-1 convolution. Weight shape is
/// `(out_channels, in_channels, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Element> Conv2d<T> {
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        activation: Activation,
    ) -> Result<Self> {
        if kernel_size % 2 == 0 || kernel_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel size must be odd and positive, got {kernel_size}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        Ok(Self {
            weight: Tensor::zeros([out_channels, in_channels, kernel_size, kernel_size]),
            bias: vec![T::ZERO; out_channels],
            activation,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Pre-activation output for one batch item, written into `out`.
    fn forward_item(&self, input: &[T], out: &mut [T], h: usize, w: usize) {
        let (oc_n, ic_n, k) = (self.out_channels(), self.in_channels(), self.kernel_size());
        let pad = (k / 2) as isize;
        let plane = h * w;
        let wt = self.weight.data();
        for oc in 0..oc_n {
            let dst = &mut out[oc * plane..(oc + 1) * plane];
            dst.fill(self.bias[oc]);
            for ic in 0..ic_n {
                let src = &input[ic * plane..(ic + 1) * plane];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(w, dx);
                        if x0 == x1 || y0 == y1 {
                            continue;
                        }
                        let wv = wt[((oc * ic_n + ic) * k + ky) * k + kx];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let drow = &mut dst[y * w + x0..y * w + x1];
                            let sx0 = (x0 as isize + dx) as usize;
                            let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            for (d, &s) in drow.iter_mut().zip(srow) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Gradients of the linear part (before activation) for one batch item.
    fn backward_item(
        &self,
        input: &[T],
        grad_pre: &[T],
        grad_in: &mut [T],
        grad_w: &mut [T],
        grad_b: &mut [T],
        h: usize,
        w: usize,
    ) {
        let (oc_n, ic_n, k) = (self.out_channels(), self.in_channels(), self.kernel_size());
        let pad = (k / 2) as isize;
        let plane = h * w;
        let wt = self.weight.data();
        for oc in 0..oc_n {
            let g = &grad_pre[oc * plane..(oc + 1) * plane];
            grad_b[oc] += g.iter().copied().sum::<T>();
            for ic in 0..ic_n {
                let src = &input[ic * plane..(ic + 1) * plane];
                let gin = &mut grad_in[ic * plane..(ic + 1) * plane];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(w, dx);
                        if x0 == x1 || y0 == y1 {
                            continue;
                        }
                        let widx = ((oc * ic_n + ic) * k + ky) * k + kx;
                        let wv = wt[widx];
                        let mut acc = T::ZERO;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            let grow = &g[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            let irow = &mut gin[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            for ((&gv, &sv), iv) in grow.iter().zip(srow).zip(irow.iter_mut()) {
                                acc += gv * sv;
                                *iv += wv * gv;
                            }
                        }
                        grad_w[widx] += acc;
                    }
                }
            }
        }
    }

    /// Backward through the linear part only, given d(loss)/d(pre-activation).
    pub fn backward_linear(
        &self,
        input: &Tensor<T>,
        grad_pre: &Tensor<T>,
    ) -> Result<(Tensor<T>, ParamGrads<T>)> {
        let [n, c, h, w] = input.shape();
        let expected = [n, self.out_channels(), h, w];
        if grad_pre.shape() != expected {
            return Err(shape_err(None, expected, grad_pre.shape()));
        }
        if c != self.in_channels() {
            return Err(shape_err(None, [n, self.in_channels(), h, w], input.shape()));
        }
        let wlen = self.weight.len();
        let oc = self.out_channels();
        let mut grad_input = Tensor::zeros(input.shape());
        let partials: Vec<(Vec<T>, Vec<T>)> = grad_input
            .data_mut()
            .par_chunks_mut(c * h * w)
            .enumerate()
            .map(|(i, gin)| {
                let mut gw = vec![T::ZERO; wlen];
                let mut gb = vec![T::ZERO; oc];
                self.backward_item(input.item(i), grad_pre.item(i), gin, &mut gw, &mut gb, h, w);
                (gw, gb)
            })
            .collect();
        let mut gw = vec![T::ZERO; wlen];
        let mut gb = vec![T::ZERO; oc];
        for (pw, pb) in &partials {
            for (a, &b) in gw.iter_mut().zip(pw) {
                *a += b;
            }
            for (a, &b) in gb.iter_mut().zip(pb) {
                *a += b;
            }
        }
        Ok((
            grad_input,
            ParamGrads {
                weight: Tensor::from_vec(self.weight.shape(), gw)?,
                bias: gb,
            },
        ))
    }

    /// Forward pass returning the pre-activation map.
    pub fn forward_pre(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = input.shape();
        if c != self.in_channels() {
            return Err(shape_err(None, [n, self.in_channels(), h, w], input.shape()));
        }
        let mut out = Tensor::zeros([n, self.out_channels(), h, w]);
        let item = self.out_channels() * h * w;
        if item > 0 {
            out.data_mut()
                .par_chunks_mut(item)
                .enumerate()
                .for_each(|(i, dst)| self.forward_item(input.item(i), dst, h, w));
        }
        Ok(out)
    }
}

/// Range of output positions `p` in `0..len` for which `p + offset` is in bounds.
#[inline]
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// Fully connected layer on flattened `(N, F, 1, 1)` input. Weight shape is
/// `(units, inputs, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Element> Dense<T> {
    pub fn zeros(inputs: usize, units: usize, activation: Activation) -> Result<Self> {
        if inputs == 0 || units == 0 {
            return Err(Error::InvalidConfig("dense sizes must be positive".into()));
        }
        Ok(Self {
            weight: Tensor::zeros([units, inputs, 1, 1]),
            bias: vec![T::ZERO; units],
            activation,
        })
    }

    pub fn units(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T = f32> {
    Conv2d(Conv2d<T>),
    MaxPool2x2,
    UpsampleNearest2x,
    Flatten,
    Dense(Dense<T>),
}

/// Gradients for a parameterized layer, shaped like its weight and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradResult<T = f32> {
    pub grad_input: Tensor<T>,
    pub grad_params: Option<ParamGrads<T>>,
}

/// Everything a layer's backward pass needs from its forward pass.
#[derive(Clone, Debug)]
pub enum Cache<T = f32> {
    Conv2d {
        input: Tensor<T>,
        pre: Tensor<T>,
        output: Tensor<T>,
    },
    MaxPool2x2 {
        input_shape: Shape,
        /// Flat input offset of the winning element for each output element.
        argmax: Vec<usize>,
    },
    UpsampleNearest2x {
        input_shape: Shape,
    },
    Flatten {
        input_shape: Shape,
    },
    Dense {
        input: Tensor<T>,
        pre: Tensor<T>,
        output: Tensor<T>,
    },
}

fn shape_err(layer: Option<usize>, expected: Shape, actual: Shape) -> Error {
    Error::ShapeMismatch {
        layer,
        expected: format!("{expected:?}"),
        actual: actual.to_vec(),
    }
}

impl<T: Element> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::MaxPool2x2 => LayerKind::MaxPool2x2,
            Layer::UpsampleNearest2x => LayerKind::UpsampleNearest2x,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Dense(_) => LayerKind::Dense,
        }
    }

    pub fn activation(&self) -> Option<Activation> {
        match self {
            Layer::Conv2d(c) => Some(c.activation),
            Layer::Dense(d) => Some(d.activation),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv2d(c) => c.weight.len() + c.bias.len(),
            Layer::Dense(d) => d.weight.len() + d.bias.len(),
            _ => 0,
        }
    }

    /// Weight and bias, for parameterized layers.
    pub fn params(&self) -> Option<(&Tensor<T>, &[T])> {
        match self {
            Layer::Conv2d(c) => Some((&c.weight, &c.bias)),
            Layer::Dense(d) => Some((&d.weight, &d.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor<T>, &mut Vec<T>)> {
        match self {
            Layer::Conv2d(c) => Some((&mut c.weight, &mut c.bias)),
            Layer::Dense(d) => Some((&mut d.weight, &mut d.bias)),
            _ => None,
        }
    }

    /// Symbolic shape propagation; checks the same preconditions as `forward`.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let [n, c, h, w] = input;
        match self {
            Layer::Conv2d(conv) => {
                if c != conv.in_channels() {
                    return Err(shape_err(None, [n, conv.in_channels(), h, w], input));
                }
                Ok([n, conv.out_channels(), h, w])
            }
            Layer::MaxPool2x2 => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::OddSpatialDims {
                        layer: None,
                        height: h,
                        width: w,
                    });
                }
                Ok([n, c, h / 2, w / 2])
            }
            Layer::UpsampleNearest2x => Ok([n, c, h * 2, w * 2]),
            Layer::Flatten => Ok([n, c * h * w, 1, 1]),
            Layer::Dense(d) => {
                if h != 1 || w != 1 || c != d.inputs() {
                    return Err(shape_err(None, [n, d.inputs(), 1, 1], input));
                }
                Ok([n, d.units(), 1, 1])
            }
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        let out_shape = self.output_shape(input.shape())?;
        match self {
            Layer::Conv2d(conv) => {
                let pre = conv.forward_pre(input)?;
                let act = conv.activation;
                let output = pre.map(|v| act.apply(v));
                Ok((
                    output.clone(),
                    Cache::Conv2d {
                        input: input.clone(),
                        pre,
                        output,
                    },
                ))
            }
            Layer::MaxPool2x2 => {
                let [n, c, h, w] = input.shape();
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Tensor::zeros(out_shape);
                let mut argmax = Vec::with_capacity(out.len());
                let src = input.data();
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for y in 0..oh {
                        for x in 0..ow {
                            let top = base + 2 * y * w + 2 * x;
                            // Row-major window order; strict '>' keeps the first maximum.
                            let mut best = top;
                            for cand in [top + 1, top + w, top + w + 1] {
                                if src[cand] > src[best] {
                                    best = cand;
                                }
                            }
                            out.data_mut()[plane * oh * ow + y * ow + x] = src[best];
                            argmax.push(best);
                        }
                    }
                }
                Ok((
                    out,
                    Cache::MaxPool2x2 {
                        input_shape: input.shape(),
                        argmax,
                    },
                ))
            }
            Layer::UpsampleNearest2x => {
                let [n, c, h, w] = input.shape();
                let out = Tensor::from_fn(out_shape, |[i, j, y, x]| input[[i, j, y / 2, x / 2]]);
                debug_assert_eq!(out.shape(), [n, c, 2 * h, 2 * w]);
                Ok((
                    out,
                    Cache::UpsampleNearest2x {
                        input_shape: input.shape(),
                    },
                ))
            }
            Layer::Flatten => Ok((
                input.clone().reshape(out_shape)?,
                Cache::Flatten {
                    input_shape: input.shape(),
                },
            )),
            Layer::Dense(d) => {
                let n = input.batch();
                let (units, inputs) = (d.units(), d.inputs());
                let wt = d.weight.data();
                let mut pre = Tensor::zeros(out_shape);
                for i in 0..n {
                    let x = input.item(i);
                    for u in 0..units {
                        let row = &wt[u * inputs..(u + 1) * inputs];
                        let mut acc = d.bias[u];
                        for (&a, &b) in row.iter().zip(x) {
                            acc += a * b;
                        }
                        pre.data_mut()[i * units + u] = acc;
                    }
                }
                let act = d.activation;
                let output = pre.map(|v| act.apply(v));
                Ok((
                    output.clone(),
                    Cache::Dense {
                        input: input.clone(),
                        pre,
                        output,
                    },
                ))
            }
        }
    }

    pub fn backward(&self, cache: &Cache<T>, grad_output: &Tensor<T>) -> Result<GradResult<T>> {
        match (self, cache) {
            (
                Layer::Conv2d(conv),
                Cache::Conv2d {
                    input, pre, output, ..
                },
            ) => {
                check_grad_shape(output.shape(), grad_output.shape())?;
                let grad_pre = activation_backward(conv.activation, pre, output, grad_output);
                let (grad_input, grads) = conv.backward_linear(input, &grad_pre)?;
                Ok(GradResult {
                    grad_input,
                    grad_params: Some(grads),
                })
            }
            (Layer::MaxPool2x2, Cache::MaxPool2x2 { input_shape, argmax }) => {
                let [n, c, h, w] = *input_shape;
                check_grad_shape([n, c, h / 2, w / 2], grad_output.shape())?;
                let mut grad_input = Tensor::zeros(*input_shape);
                let gi = grad_input.data_mut();
                for (&src, &g) in argmax.iter().zip(grad_output.data()) {
                    gi[src] += g;
                }
                Ok(GradResult {
                    grad_input,
                    grad_params: None,
                })
            }
            (Layer::UpsampleNearest2x, Cache::UpsampleNearest2x { input_shape }) => {
                let [n, c, h, w] = *input_shape;
                check_grad_shape([n, c, 2 * h, 2 * w], grad_output.shape())?;
                let grad_input = Tensor::from_fn(*input_shape, |[i, j, y, x]| {
                    let (y2, x2) = (2 * y, 2 * x);
                    grad_output[[i, j, y2, x2]]
                        + grad_output[[i, j, y2, x2 + 1]]
                        + grad_output[[i, j, y2 + 1, x2]]
                        + grad_output[[i, j, y2 + 1, x2 + 1]]
                });
                Ok(GradResult {
                    grad_input,
                    grad_params: None,
                })
            }
            (Layer::Flatten, Cache::Flatten { input_shape }) => {
                let [n, c, h, w] = *input_shape;
                check_grad_shape([n, c * h * w, 1, 1], grad_output.shape())?;
                Ok(GradResult {
                    grad_input: grad_output.clone().reshape(*input_shape)?,
                    grad_params: None,
                })
            }
            (Layer::Dense(d), Cache::Dense { input, pre, output }) => {
                check_grad_shape(output.shape(), grad_output.shape())?;
                let grad_pre = activation_backward(d.activation, pre, output, grad_output);
                let n = input.batch();
                let (units, inputs) = (d.units(), d.inputs());
                let wt = d.weight.data();
                let mut grad_input = Tensor::zeros(input.shape());
                let mut gw = vec![T::ZERO; units * inputs];
                let mut gb = vec![T::ZERO; units];
                for i in 0..n {
                    let x = input.item(i);
                    let g = grad_pre.item(i);
                    let gx = &mut grad_input.data_mut()[i * inputs..(i + 1) * inputs];
                    for u in 0..units {
                        let gu = g[u];
                        gb[u] += gu;
                        let row = &wt[u * inputs..(u + 1) * inputs];
                        let grow = &mut gw[u * inputs..(u + 1) * inputs];
                        for k in 0..inputs {
                            gx[k] += row[k] * gu;
                            grow[k] += gu * x[k];
                        }
                    }
                }
                Ok(GradResult {
                    grad_input,
                    grad_params: Some(ParamGrads {
                        weight: Tensor::from_vec(d.weight.shape(), gw)?,
                        bias: gb,
                    }),
                })
            }
            (layer, _) => Err(Error::CacheMismatch {
                expected: match layer.kind() {
                    LayerKind::Conv2d => "Conv2D",
                    LayerKind::MaxPool2x2 => "MaxPool2x2",
                    LayerKind::UpsampleNearest2x => "UpsampleNearest2x",
                    LayerKind::Flatten => "Flatten",
                    LayerKind::Dense => "Dense",
                },
            }),
        }
    }
}

fn check_grad_shape(expected: Shape, actual: Shape) -> Result<()> {
    if expected != actual {
        return Err(shape_err(None, expected, actual));
    }
    Ok(())
}

fn activation_backward<T: Element>(
    act: Activation,
    pre: &Tensor<T>,
    out: &Tensor<T>,
    grad: &Tensor<T>,
) -> Tensor<T> {
    let data = pre
        .data()
        .iter()
        .zip(out.data())
        .zip(grad.data())
        .map(|((&p, &o), &g)| act.backward(p, o, g))
        .collect();
    Tensor::from_vec(pre.shape(), data).expect("activation shapes agree")
}
