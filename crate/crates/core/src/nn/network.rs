use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{fnv, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Architecture vocabulary. Shapes are per sample; the batch axis is implicit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    Tanh,
    Flatten,
    MaxPool2d {
        size: usize,
    },
}

impl std::fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerSpec::Dense { inputs, outputs } => write!(f, "Dense({inputs}->{outputs})"),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => write!(
                f,
                "Conv2d({in_channels}->{out_channels}, k={kernel}, s={stride})"
            ),
            LayerSpec::Relu => write!(f, "ReLU"),
            LayerSpec::Tanh => write!(f, "Tanh"),
            LayerSpec::Flatten => write!(f, "Flatten"),
            LayerSpec::MaxPool2d { size } => write!(f, "MaxPool2d({size})"),
        }
    }
}

impl LayerSpec {
    /// Per-sample output shape, or `None` when `input` does not fit.
    fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                (input == [inputs] && inputs > 0 && outputs > 0).then(|| vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => match input {
                &[c, h, w]
                    if c == in_channels
                        && kernel >= 1
                        && stride >= 1
                        && out_channels >= 1
                        && h >= kernel
                        && w >= kernel =>
                {
                    Some(vec![
                        out_channels,
                        (h - kernel) / stride + 1,
                        (w - kernel) / stride + 1,
                    ])
                }
                _ => None,
            },
            LayerSpec::Relu | LayerSpec::Tanh => Some(input.to_vec()),
            LayerSpec::Flatten => (!input.is_empty()).then(|| vec![input.iter().product()]),
            LayerSpec::MaxPool2d { size } => match input {
                &[c, h, w] if size >= 1 && h >= size && w >= size => {
                    Some(vec![c, h / size, w / size])
                }
                _ => None,
            },
        }
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }
}

#[derive(Clone, Debug)]
enum Layer<T> {
    /// `weight` is `[inputs, outputs]`.
    Dense { weight: Param<T>, bias: Param<T> },
    /// `weight` is `[out_channels, in_channels * kernel * kernel]`.
    Conv2d {
        kernel: usize,
        stride: usize,
        weight: Param<T>,
        bias: Param<T>,
    },
    Relu,
    Tanh,
    Flatten,
    MaxPool2d { size: usize },
}

#[derive(Clone, Debug)]
enum Record<T> {
    Input(Tensor<T>),
    Output(Tensor<T>),
    Argmax(Vec<usize>),
    Nothing,
}

/// Feed-forward network over a fixed layer sequence with a one-shot tape.
///
/// [`Network::forward`] records what [`Network::backward`] needs; the tape
/// is consumed by the backward pass. [`Network::predict`] never touches it.
#[derive(Clone, Debug)]
pub struct Network<T> {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer<T>>,
    /// `shapes[i]` is the per-sample input of layer `i`; the last entry is the output.
    shapes: Vec<Vec<usize>>,
    tape: Option<Vec<Record<T>>>,
}

fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| T::lit(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

impl<T: Scalar> Network<T> {
    /// Builds the network and draws weights uniformly in `±sqrt(1/fan_in)`.
    pub fn new<R: Rng + ?Sized>(input_shape: &[usize], specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut shapes = vec![input_shape.to_vec()];
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let current = shapes.last().expect("non-empty");
            let next = spec.output_shape(current).ok_or_else(|| {
                Error::Config(format!(
                    "layer {i} ({spec}) cannot accept per-sample input shape {current:?}"
                ))
            })?;
            let layer = match *spec {
                LayerSpec::Dense { inputs, outputs } => {
                    let bound = (1.0 / inputs as f64).sqrt();
                    Layer::Dense {
                        weight: Param::new(uniform(rng, &[inputs, outputs], bound)),
                        bias: Param::new(uniform(rng, &[outputs], bound)),
                    }
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let bound = (1.0 / fan_in as f64).sqrt();
                    Layer::Conv2d {
                        kernel,
                        stride,
                        weight: Param::new(uniform(rng, &[out_channels, fan_in], bound)),
                        bias: Param::new(uniform(rng, &[out_channels], bound)),
                    }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Tanh => Layer::Tanh,
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::MaxPool2d { size } => Layer::MaxPool2d { size },
            };
            layers.push(layer);
            shapes.push(next);
        }
        Ok(Network {
            specs: specs.to_vec(),
            layers,
            shapes,
            tape: None,
        })
    }

    /// Multi-layer perceptron: `Dense, act, Dense, act, ..., Dense[, out_act]`.
    pub fn mlp<R: Rng + ?Sized>(
        inputs: usize,
        hidden: &[usize],
        outputs: usize,
        hidden_act: LayerSpec,
        output_act: Option<LayerSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut specs = Vec::new();
        let mut width = inputs;
        for &h in hidden {
            specs.push(LayerSpec::Dense {
                inputs: width,
                outputs: h,
            });
            specs.push(hidden_act.clone());
            width = h;
        }
        specs.push(LayerSpec::Dense {
            inputs: width,
            outputs,
        });
        specs.extend(output_act);
        Network::new(&[inputs], &specs, rng)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("non-empty")
    }

    pub fn input_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                    out.push(weight);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                    out.push(weight);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Weight and bias of layer `index`, if it is parameterised.
    pub fn layer_params_mut(&mut self, index: usize) -> Option<(&mut Param<T>, &mut Param<T>)> {
        match self.layers.get_mut(index)? {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                Some((weight, bias))
            }
            _ => None,
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub fn grads_are_zero(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.grad.data().iter().all(|g| *g == T::zero()))
    }

    /// Bitwise hash over every parameter value.
    pub fn checksum(&self) -> u64 {
        self.params()
            .iter()
            .fold(0x9e37_79b9_7f4a_7c15, |h, p| fnv(h, p.value.checksum()))
    }

    pub fn copy_params_from(&mut self, other: &Network<T>) -> Result<()> {
        if self.specs != other.specs || self.shapes != other.shapes {
            return Err(Error::Config("copy_params_from: architectures differ".into()));
        }
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<usize> {
        let shape = input.shape();
        if shape.len() != self.input_shape().len() + 1 || &shape[1..] != self.input_shape() {
            let name = self
                .specs
                .first()
                .map(|s| format!("layer 0 ({s})"))
                .unwrap_or_else(|| "empty network".into());
            let mut expected = vec![shape.first().copied().unwrap_or(0)];
            expected.extend_from_slice(self.input_shape());
            return Err(Error::shape(name, &expected, shape));
        }
        Ok(shape[0])
    }

    /// Pure evaluation; bit-identical across calls for fixed parameters.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check_input(input)?;
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = self.apply(i, layer, x, batch, None);
        }
        Ok(x)
    }

    /// Evaluation that records a tape for [`Network::backward`].
    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check_input(input)?;
        let mut tape = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = self.apply(i, layer, x, batch, Some(&mut tape));
        }
        self.tape = Some(tape);
        Ok(x)
    }

    fn apply(
        &self,
        index: usize,
        layer: &Layer<T>,
        x: Tensor<T>,
        batch: usize,
        tape: Option<&mut Vec<Record<T>>>,
    ) -> Tensor<T> {
        let out_shape = {
            let mut s = vec![batch];
            s.extend_from_slice(&self.shapes[index + 1]);
            s
        };
        match layer {
            Layer::Dense { weight, bias } => {
                let (n_in, n_out) = (weight.value.shape()[0], weight.value.shape()[1]);
                let mut out = vec![T::zero(); batch * n_out];
                for row in out.chunks_mut(n_out) {
                    row.copy_from_slice(bias.value.data());
                }
                T::gemm(
                    batch,
                    n_in,
                    n_out,
                    x.data(),
                    (n_in as isize, 1),
                    weight.value.data(),
                    (n_out as isize, 1),
                    T::one(),
                    &mut out,
                );
                if let Some(t) = tape {
                    t.push(Record::Input(x));
                }
                Tensor::new(out_shape, out).expect("dense output")
            }
            Layer::Conv2d {
                kernel,
                stride,
                weight,
                bias,
            } => {
                let in_shape = &self.shapes[index];
                let out = conv2d_forward(
                    &x,
                    in_shape,
                    &self.shapes[index + 1],
                    *kernel,
                    *stride,
                    &weight.value,
                    &bias.value,
                );
                if let Some(t) = tape {
                    t.push(Record::Input(x));
                }
                Tensor::new(out_shape, out).expect("conv output")
            }
            Layer::Relu => {
                let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
                if let Some(t) = tape {
                    t.push(Record::Output(y.clone()));
                }
                y
            }
            Layer::Tanh => {
                let y = x.map(|v| v.tanh());
                if let Some(t) = tape {
                    t.push(Record::Output(y.clone()));
                }
                y
            }
            Layer::Flatten => {
                if let Some(t) = tape {
                    t.push(Record::Nothing);
                }
                x.reshape(&out_shape).expect("flatten")
            }
            Layer::MaxPool2d { size } => {
                let (out, argmax) =
                    maxpool_forward(&x, &self.shapes[index], &self.shapes[index + 1], *size);
                if let Some(t) = tape {
                    t.push(Record::Argmax(argmax));
                }
                Tensor::new(out_shape, out).expect("pool output")
            }
        }
    }

    /// Accumulates parameter gradients for the recorded forward pass and
    /// returns the gradient with respect to the network input.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::Usage("backward called without a recorded forward pass".into()))?;
        let batch = upstream.batch();
        let mut expected = vec![batch];
        expected.extend_from_slice(self.output_shape());
        if upstream.shape() != expected.as_slice() {
            return Err(Error::shape("backward upstream gradient", &expected, upstream.shape()));
        }
        if let Some(Record::Input(x0)) = tape.first() {
            if x0.batch() != batch {
                return Err(Error::shape("backward batch", &[x0.batch()], &[batch]));
            }
        }
        let mut grad = upstream.clone();
        for (index, record) in tape.into_iter().enumerate().rev() {
            let in_shape = {
                let mut s = vec![batch];
                s.extend_from_slice(&self.shapes[index]);
                s
            };
            let out_per_sample = self.shapes[index + 1].clone();
            grad = match (&mut self.layers[index], record) {
                (Layer::Dense { weight, bias }, Record::Input(x)) => {
                    let (n_in, n_out) = (weight.value.shape()[0], weight.value.shape()[1]);
                    T::gemm(
                        n_in,
                        batch,
                        n_out,
                        x.data(),
                        (1, n_in as isize),
                        grad.data(),
                        (n_out as isize, 1),
                        T::one(),
                        weight.grad.data_mut(),
                    );
                    let gb = bias.grad.data_mut();
                    for row in grad.data().chunks(n_out) {
                        for (b, &g) in gb.iter_mut().zip(row) {
                            *b += g;
                        }
                    }
                    let mut dx = vec![T::zero(); batch * n_in];
                    T::gemm(
                        batch,
                        n_out,
                        n_in,
                        grad.data(),
                        (n_out as isize, 1),
                        weight.value.data(),
                        (1, n_out as isize),
                        T::zero(),
                        &mut dx,
                    );
                    Tensor::new(in_shape, dx).expect("dense dx")
                }
                (
                    Layer::Conv2d {
                        kernel,
                        stride,
                        weight,
                        bias,
                    },
                    Record::Input(x),
                ) => {
                    let dx = conv2d_backward(
                        &x,
                        &self.shapes[index],
                        &out_per_sample,
                        *kernel,
                        *stride,
                        weight,
                        bias,
                        &grad,
                    );
                    Tensor::new(in_shape, dx).expect("conv dx")
                }
                (Layer::Relu, Record::Output(y)) => {
                    let mut g = grad;
                    for (gi, &yi) in g.data_mut().iter_mut().zip(y.data()) {
                        if yi <= T::zero() {
                            *gi = T::zero();
                        }
                    }
                    g
                }
                (Layer::Tanh, Record::Output(y)) => {
                    let mut g = grad;
                    for (gi, &yi) in g.data_mut().iter_mut().zip(y.data()) {
                        *gi *= T::one() - yi * yi;
                    }
                    g
                }
                (Layer::Flatten, Record::Nothing) => grad.reshape(&in_shape)?,
                (Layer::MaxPool2d { .. }, Record::Argmax(argmax)) => {
                    let in_len: usize = self.shapes[index].iter().product();
                    let out_len: usize = out_per_sample.iter().product();
                    let mut dx = vec![T::zero(); batch * in_len];
                    for b in 0..batch {
                        for o in 0..out_len {
                            let src = argmax[b * out_len + o];
                            dx[b * in_len + src] += grad.data()[b * out_len + o];
                        }
                    }
                    Tensor::new(in_shape, dx).expect("pool dx")
                }
                _ => return Err(Error::Usage("tape does not match layer sequence".into())),
            };
        }
        Ok(grad)
    }
}

fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    in_shape: &[usize],
    out_shape: &[usize],
    kernel: usize,
    stride: usize,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Vec<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oc, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let ckk = c * kernel * kernel;
    let p = oh * ow;
    let batch = x.batch();
    let mut out = vec![T::zero(); batch * oc * p];
    let mut cols = vec![T::zero(); ckk * p];
    for b in 0..batch {
        im2col(x.row_slice(b), (c, h, w), kernel, stride, (oh, ow), &mut cols);
        let o = &mut out[b * oc * p..(b + 1) * oc * p];
        for (ch, chunk) in o.chunks_mut(p).enumerate() {
            chunk.fill(bias.data()[ch]);
        }
        T::gemm(
            oc,
            ckk,
            p,
            weight.data(),
            (ckk as isize, 1),
            &cols,
            (p as isize, 1),
            T::one(),
            o,
        );
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    in_shape: &[usize],
    out_shape: &[usize],
    kernel: usize,
    stride: usize,
    weight: &mut Param<T>,
    bias: &mut Param<T>,
    grad: &Tensor<T>,
) -> Vec<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oc, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let ckk = c * kernel * kernel;
    let p = oh * ow;
    let batch = x.batch();
    let mut dx = vec![T::zero(); batch * c * h * w];
    let mut cols = vec![T::zero(); ckk * p];
    let mut dcols = vec![T::zero(); ckk * p];
    for b in 0..batch {
        im2col(x.row_slice(b), (c, h, w), kernel, stride, (oh, ow), &mut cols);
        let g = grad.row_slice(b);
        T::gemm(
            oc,
            p,
            ckk,
            g,
            (p as isize, 1),
            &cols,
            (1, p as isize),
            T::one(),
            weight.grad.data_mut(),
        );
        for (ch, chunk) in g.chunks(p).enumerate() {
            bias.grad.data_mut()[ch] += chunk.iter().copied().sum::<T>();
        }
        T::gemm(
            ckk,
            oc,
            p,
            weight.value.data(),
            (1, ckk as isize),
            g,
            (p as isize, 1),
            T::zero(),
            &mut dcols,
        );
        col2im(
            &dcols,
            (c, h, w),
            kernel,
            stride,
            (oh, ow),
            &mut dx[b * c * h * w..(b + 1) * c * h * w],
        );
    }
    dx
}

fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    s: usize,
    (oh, ow): (usize, usize),
    cols: &mut [T],
) {
    let p = oh * ow;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let src = &x[ch * h * w + (oy * s + ki) * w..];
                    for ox in 0..ow {
                        dst[oy * ow + ox] = src[ox * s + kj];
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    s: usize,
    (oh, ow): (usize, usize),
    dx: &mut [T],
) {
    let p = oh * ow;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    for ox in 0..ow {
                        dx[ch * h * w + (oy * s + ki) * w + ox * s + kj] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

fn maxpool_forward<T: Scalar>(
    x: &Tensor<T>,
    in_shape: &[usize],
    out_shape: &[usize],
    size: usize,
) -> (Vec<T>, Vec<usize>) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let batch = x.batch();
    let mut out = Vec::with_capacity(batch * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for b in 0..batch {
        let xs = x.row_slice(b);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = ch * h * w + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = ch * h * w + (oy * size + dy) * w + ox * size + dx;
                            if xs[idx] > xs[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
    }
    (out, argmax)
}
