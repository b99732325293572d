//! Stateful layers: parameters, cached activations and shape inference.

use crate::error::{Error, Result};
use crate::msconv::{
    branch_backward, branch_forward, msconv_bias_grad, smsc_backward, smsc_forward,
    SharedGradient, SharedMultiScaleConvSpec,
};
use crate::ops::{
    adaptive_avg_pool_backward, adaptive_avg_pool_forward, batchnorm_backward, conv2d_backward,
    conv2d_forward, conv2d_macs, conv2d_output_shape, linear_backward, linear_forward,
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, BatchNormState, BnCache,
    PoolWindow,
};
use crate::param::Param;
use crate::tensor::{ConvGeometry, Scalar, Shape, Tensor};

/// Role of a named tensor, used for initialization, counting and
/// serialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl TensorKind {
    /// Learnable parameters (everything except running statistics).
    pub fn is_param(self) -> bool {
        !matches!(self, TensorKind::RunningMean | TensorKind::RunningVar)
    }
}

pub struct NamedTensor<'a, T> {
    pub name: String,
    pub kind: TensorKind,
    pub tensor: &'a Tensor<T>,
}

pub struct NamedTensorMut<'a, T> {
    pub name: String,
    pub kind: TensorKind,
    pub tensor: &'a mut Tensor<T>,
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub geom: ConvGeometry,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(k_i: usize, k_o: usize, f: usize, geom: ConvGeometry, bias: bool) -> Self {
        Self {
            weight: Param::zeros([k_o, k_i, f, f]),
            bias: bias.then(|| Param::zeros([k_o, 1, 1, 1])),
            geom,
            input: None,
        }
    }
}

#[derive(Clone, Debug)]
pub enum MsWeights<T> {
    Shared(Param<T>),
    Unshared(Vec<Param<T>>),
}

/// Multi-scale convolution layer, shared or unshared across rates.
#[derive(Clone, Debug)]
pub struct MultiScaleConv<T> {
    pub spec: SharedMultiScaleConvSpec,
    pub weights: MsWeights<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
    last_shared: Option<SharedGradient<T>>,
}

impl<T: Scalar> MultiScaleConv<T> {
    pub fn shared(spec: SharedMultiScaleConvSpec, bias: bool) -> Self {
        let w = Param::zeros(spec.kernel_shape());
        Self::with(spec, MsWeights::Shared(w), bias)
    }

    pub fn unshared(spec: SharedMultiScaleConvSpec, bias: bool) -> Self {
        let ws = (0..spec.n()).map(|_| Param::zeros(spec.kernel_shape())).collect();
        Self::with(spec, MsWeights::Unshared(ws), bias)
    }

    fn with(spec: SharedMultiScaleConvSpec, weights: MsWeights<T>, bias: bool) -> Self {
        let bias = bias.then(|| Param::zeros([spec.out_channels, 1, 1, 1]));
        Self {
            spec,
            weights,
            bias,
            input: None,
            last_shared: None,
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self.weights, MsWeights::Shared(_))
    }

    /// Per-rate and expected gradients from the latest backward pass of a
    /// shared layer.
    pub fn last_shared_gradient(&self) -> Option<&SharedGradient<T>> {
        self.last_shared.as_ref()
    }

    /// All kernels as one `(K, k_i, f, f)` tensor: the unique kernels of a
    /// shared layer, or the branch kernels stacked in rate order.
    pub fn kernels(&self) -> Tensor<T> {
        match &self.weights {
            MsWeights::Shared(w) => w.value.clone(),
            MsWeights::Unshared(ws) => {
                let ks = self.spec.kernel_shape();
                let data = ws.iter().flat_map(|w| w.value.data().iter().copied()).collect();
                Tensor::from_vec([ks.n * ws.len(), ks.c, ks.h, ks.w], data).unwrap()
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub state: BatchNormState<T>,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct Relu<T> {
    output: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub window: PoolWindow,
    cache: Option<(Vec<usize>, Shape)>,
}

#[derive(Clone, Debug)]
pub struct AdaptiveAvgPool2d {
    pub out_h: usize,
    pub out_w: usize,
    input_shape: Option<Shape>,
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(fin: usize, fout: usize) -> Self {
        Self {
            weight: Param::zeros([fout, fin, 1, 1]),
            bias: Param::zeros([fout, 1, 1, 1]),
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape().n
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let y = linear_forward(x, &self.weight.value, &self.bias.value)?;
        self.input = train.then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| {
            Error::Arch("linear: backward called without a training forward pass".into())
        })?;
        let (gx, gw, gb) = linear_backward(x, &self.weight.value, g)?;
        self.weight.grad.add_assign(&gw)?;
        self.bias.grad.add_assign(&gb)?;
        Ok(gx)
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}

/// `relu(main(x) + shortcut(x))`, with an empty shortcut meaning identity.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    pub main: Vec<Node<T>>,
    pub shortcut: Vec<Node<T>>,
    output: Option<Tensor<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(main: Vec<Node<T>>, shortcut: Vec<Node<T>>) -> Self {
        Self {
            main,
            shortcut,
            output: None,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    MultiScale(MultiScaleConv<T>),
    BatchNorm(BatchNorm2d<T>),
    Relu(Relu<T>),
    MaxPool(MaxPool2d),
    AvgPool(AdaptiveAvgPool2d),
    Linear(Linear<T>),
    Residual(Box<ResidualBlock<T>>),
}

/// A layer with its name inside the enclosing sequence.
#[derive(Clone, Debug)]
pub struct Node<T> {
    pub name: String,
    pub layer: Layer<T>,
}

impl<T: Scalar> Node<T> {
    pub fn new(name: impl Into<String>, layer: Layer<T>) -> Self {
        Self {
            name: name.into(),
            layer,
        }
    }
}

impl<T: Scalar> Layer<T> {
    pub fn batch_norm(channels: usize) -> Self {
        Layer::BatchNorm(BatchNorm2d {
            state: BatchNormState::new(channels),
            cache: None,
        })
    }

    pub fn relu() -> Self {
        Layer::Relu(Relu { output: None })
    }

    pub fn max_pool(kernel: usize, stride: usize, padding: usize) -> Self {
        Layer::MaxPool(MaxPool2d {
            window: PoolWindow {
                kernel,
                stride,
                padding,
            },
            cache: None,
        })
    }

    pub fn avg_pool(out_h: usize, out_w: usize) -> Self {
        Layer::AvgPool(AdaptiveAvgPool2d {
            out_h,
            out_w,
            input_shape: None,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => {
                let y = conv2d_forward(x, &l.weight.value, l.bias.as_ref().map(|b| &b.value), l.geom)?;
                l.input = train.then(|| x.clone());
                Ok(y)
            }
            Layer::MultiScale(l) => {
                let bias = l.bias.as_ref().map(|b| &b.value);
                let y = match &l.weights {
                    MsWeights::Shared(w) => smsc_forward(x, &w.value, bias, &l.spec)?,
                    MsWeights::Unshared(ws) => {
                        let vals: Vec<&Tensor<T>> = ws.iter().map(|w| &w.value).collect();
                        branch_forward(x, &vals, bias, &l.spec)?
                    }
                };
                l.input = train.then(|| x.clone());
                Ok(y)
            }
            Layer::BatchNorm(l) => {
                let (y, cache) = l.state.forward(x, train)?;
                l.cache = cache;
                Ok(y)
            }
            Layer::Relu(l) => {
                let y = relu_forward(x);
                l.output = train.then(|| y.clone());
                Ok(y)
            }
            Layer::MaxPool(l) => {
                let (y, arg) = maxpool_forward(x, l.window)?;
                l.cache = train.then(|| (arg, x.shape()));
                Ok(y)
            }
            Layer::AvgPool(l) => {
                let y = adaptive_avg_pool_forward(x, l.out_h, l.out_w)?;
                l.input_shape = train.then(|| x.shape());
                Ok(y)
            }
            Layer::Linear(l) => l.forward(x, train),
            Layer::Residual(b) => {
                let main = forward_seq(&mut b.main, x, train)?;
                let short = if b.shortcut.is_empty() {
                    x.clone()
                } else {
                    forward_seq(&mut b.shortcut, x, train)?
                };
                let mut sum = main;
                sum.add_assign(&short)?;
                let y = relu_forward(&sum);
                b.output = train.then(|| y.clone());
                Ok(y)
            }
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    /// Requires a preceding training-mode forward pass.
    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        fn missing(what: &str) -> Error {
            Error::Arch(format!("{what}: backward called without a training forward pass"))
        }
        match self {
            Layer::Conv(l) => {
                let x = l.input.as_ref().ok_or_else(|| missing("conv"))?;
                let gr = conv2d_backward(x, &l.weight.value, g, l.geom, l.bias.is_some())?;
                l.weight.grad.add_assign(&gr.weights)?;
                if let (Some(b), Some(gb)) = (l.bias.as_mut(), gr.bias.as_ref()) {
                    b.grad.add_assign(gb)?;
                }
                Ok(gr.input)
            }
            Layer::MultiScale(l) => {
                let x = l.input.as_ref().ok_or_else(|| missing("multi-scale conv"))?;
                let gi = match &mut l.weights {
                    MsWeights::Shared(w) => {
                        let (gi, sg) = smsc_backward(x, &w.value, g, &l.spec)?;
                        w.grad.add_assign(&sg.expected)?;
                        l.last_shared = Some(sg);
                        gi
                    }
                    MsWeights::Unshared(ws) => {
                        let vals: Vec<&Tensor<T>> = ws.iter().map(|w| &w.value).collect();
                        let (gi, grads) = branch_backward(x, &vals, g, &l.spec)?;
                        for (w, gw) in ws.iter_mut().zip(&grads) {
                            w.grad.add_assign(gw)?;
                        }
                        gi
                    }
                };
                if let Some(b) = l.bias.as_mut() {
                    b.grad.add_assign(&msconv_bias_grad(g))?;
                }
                Ok(gi)
            }
            Layer::BatchNorm(l) => {
                let cache = l.cache.as_ref().ok_or_else(|| missing("batch norm"))?;
                let (gx, gs, gb) = batchnorm_backward(g, &l.state.scale.value, cache)?;
                l.state.scale.grad.add_assign(&gs)?;
                l.state.shift.grad.add_assign(&gb)?;
                Ok(gx)
            }
            Layer::Relu(l) => {
                let y = l.output.as_ref().ok_or_else(|| missing("relu"))?;
                relu_backward(y, g)
            }
            Layer::MaxPool(l) => {
                let (arg, shape) = l.cache.as_ref().ok_or_else(|| missing("max pool"))?;
                maxpool_backward(g, arg, *shape)
            }
            Layer::AvgPool(l) => {
                let shape = l.input_shape.ok_or_else(|| missing("avg pool"))?;
                adaptive_avg_pool_backward(g, shape)
            }
            Layer::Linear(l) => l.backward(g),
            Layer::Residual(b) => {
                let y = b.output.as_ref().ok_or_else(|| missing("residual"))?;
                let gs = relu_backward(y, g)?;
                let mut gx = backward_seq(&mut b.main, &gs)?;
                let gshort = if b.shortcut.is_empty() {
                    gs
                } else {
                    backward_seq(&mut b.shortcut, &gs)?
                };
                gx.add_assign(&gshort)?;
                Ok(gx)
            }
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            Layer::Conv(l) => conv2d_output_shape(input, l.weight.shape(), l.geom),
            Layer::MultiScale(l) => {
                if input.c != l.spec.in_channels {
                    return Err(Error::ChannelMismatch {
                        expected: l.spec.in_channels,
                        got: input.c,
                    });
                }
                l.spec.output_shape(input)
            }
            Layer::BatchNorm(l) => {
                if input.c != l.state.channels() {
                    return Err(Error::ChannelMismatch {
                        expected: l.state.channels(),
                        got: input.c,
                    });
                }
                Ok(input)
            }
            Layer::Relu(_) => Ok(input),
            Layer::MaxPool(l) => l.window.output_shape(input),
            Layer::AvgPool(l) => Ok(Shape::new(input.n, input.c, l.out_h, l.out_w)),
            Layer::Linear(l) => {
                if input.per_sample() != l.in_features() {
                    return Err(Error::ChannelMismatch {
                        expected: l.in_features(),
                        got: input.per_sample(),
                    });
                }
                Ok(Shape::new(input.n, l.out_features(), 1, 1))
            }
            Layer::Residual(b) => {
                let main = seq_output_shape(&b.main, input)?;
                let short = seq_output_shape(&b.shortcut, input)?;
                if main != short {
                    return Err(Error::ShapeMismatch {
                        context: "residual addends",
                        expected: main.dims().to_vec(),
                        got: short.dims().to_vec(),
                    });
                }
                Ok(main)
            }
        }
    }

    /// Multiply-accumulates of convolutions and fully connected layers.
    pub fn macs(&self, input: Shape) -> Result<u64> {
        match self {
            Layer::Conv(l) => conv2d_macs(input, l.weight.shape(), l.geom),
            Layer::MultiScale(l) => l.spec.macs(input),
            Layer::Linear(l) => Ok((input.n * l.in_features() * l.out_features()) as u64),
            Layer::Residual(b) => Ok(seq_macs(&b.main, input)? + seq_macs(&b.shortcut, input)?),
            _ => Ok(0),
        }
    }

    pub fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        let mut push = |name: &str, kind, tensor| {
            out.push(NamedTensor {
                name: join(prefix, name),
                kind,
                tensor,
            })
        };
        match self {
            Layer::Conv(l) => {
                push("weight", TensorKind::Weight, &l.weight.value);
                if let Some(b) = &l.bias {
                    push("bias", TensorKind::Bias, &b.value);
                }
            }
            Layer::MultiScale(l) => {
                match &l.weights {
                    MsWeights::Shared(w) => push("weight", TensorKind::Weight, &w.value),
                    MsWeights::Unshared(ws) => {
                        for (w, r) in ws.iter().zip(&l.spec.rates) {
                            push(&format!("weight_r{r}"), TensorKind::Weight, &w.value);
                        }
                    }
                }
                if let Some(b) = &l.bias {
                    push("bias", TensorKind::Bias, &b.value);
                }
            }
            Layer::BatchNorm(l) => {
                push("scale", TensorKind::BnScale, &l.state.scale.value);
                push("shift", TensorKind::BnShift, &l.state.shift.value);
                push("running_mean", TensorKind::RunningMean, &l.state.running_mean);
                push("running_var", TensorKind::RunningVar, &l.state.running_var);
            }
            Layer::Linear(l) => {
                push("weight", TensorKind::Weight, &l.weight.value);
                push("bias", TensorKind::Bias, &l.bias.value);
            }
            Layer::Residual(b) => {
                for node in b.main.iter().chain(&b.shortcut) {
                    node.layer.tensors(&join(prefix, &node.name), out);
                }
            }
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::AvgPool(_) => {}
        }
    }

    pub fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a, T>>) {
        let mut push = |name: &str, kind, tensor| {
            out.push(NamedTensorMut {
                name: join(prefix, name),
                kind,
                tensor,
            })
        };
        match self {
            Layer::Conv(l) => {
                push("weight", TensorKind::Weight, &mut l.weight.value);
                if let Some(b) = &mut l.bias {
                    push("bias", TensorKind::Bias, &mut b.value);
                }
            }
            Layer::MultiScale(l) => {
                match &mut l.weights {
                    MsWeights::Shared(w) => push("weight", TensorKind::Weight, &mut w.value),
                    MsWeights::Unshared(ws) => {
                        for (w, r) in ws.iter_mut().zip(&l.spec.rates) {
                            push(&format!("weight_r{r}"), TensorKind::Weight, &mut w.value);
                        }
                    }
                }
                if let Some(b) = &mut l.bias {
                    push("bias", TensorKind::Bias, &mut b.value);
                }
            }
            Layer::BatchNorm(l) => {
                push("scale", TensorKind::BnScale, &mut l.state.scale.value);
                push("shift", TensorKind::BnShift, &mut l.state.shift.value);
                push("running_mean", TensorKind::RunningMean, &mut l.state.running_mean);
                push("running_var", TensorKind::RunningVar, &mut l.state.running_var);
            }
            Layer::Linear(l) => {
                push("weight", TensorKind::Weight, &mut l.weight.value);
                push("bias", TensorKind::Bias, &mut l.bias.value);
            }
            Layer::Residual(b) => {
                for node in b.main.iter_mut().chain(b.shortcut.iter_mut()) {
                    node.layer.tensors_mut(&join(prefix, &node.name), out);
                }
            }
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::AvgPool(_) => {}
        }
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        let mut push = |name: &str, p| out.push((join(prefix, name), p));
        match self {
            Layer::Conv(l) => {
                push("weight", &mut l.weight);
                if let Some(b) = &mut l.bias {
                    push("bias", b);
                }
            }
            Layer::MultiScale(l) => {
                match &mut l.weights {
                    MsWeights::Shared(w) => push("weight", w),
                    MsWeights::Unshared(ws) => {
                        for (w, r) in ws.iter_mut().zip(&l.spec.rates) {
                            push(&format!("weight_r{r}"), w);
                        }
                    }
                }
                if let Some(b) = &mut l.bias {
                    push("bias", b);
                }
            }
            Layer::BatchNorm(l) => {
                push("scale", &mut l.state.scale);
                push("shift", &mut l.state.shift);
            }
            Layer::Linear(l) => {
                push("weight", &mut l.weight);
                push("bias", &mut l.bias);
            }
            Layer::Residual(b) => {
                for node in b.main.iter_mut().chain(b.shortcut.iter_mut()) {
                    node.layer.params_mut(&join(prefix, &node.name), out);
                }
            }
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::AvgPool(_) => {}
        }
    }

    /// Drops cached activations.
    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv(l) => l.input = None,
            Layer::MultiScale(l) => {
                l.input = None;
                l.last_shared = None;
            }
            Layer::BatchNorm(l) => l.cache = None,
            Layer::Relu(l) => l.output = None,
            Layer::MaxPool(l) => l.cache = None,
            Layer::AvgPool(l) => l.input_shape = None,
            Layer::Linear(l) => l.clear_cache(),
            Layer::Residual(b) => {
                b.output = None;
                for n in b.main.iter_mut().chain(b.shortcut.iter_mut()) {
                    n.layer.clear_cache();
                }
            }
        }
    }
}

pub fn forward_seq<T: Scalar>(nodes: &mut [Node<T>], x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
    let mut cur = x.clone();
    for node in nodes.iter_mut() {
        cur = node.layer.forward(&cur, train)?;
    }
    Ok(cur)
}

pub fn backward_seq<T: Scalar>(nodes: &mut [Node<T>], g: &Tensor<T>) -> Result<Tensor<T>> {
    let mut cur = g.clone();
    for node in nodes.iter_mut().rev() {
        cur = node.layer.backward(&cur)?;
    }
    Ok(cur)
}

pub fn seq_output_shape<T: Scalar>(nodes: &[Node<T>], input: Shape) -> Result<Shape> {
    nodes.iter().try_fold(input, |s, n| n.layer.output_shape(s))
}

fn seq_macs<T: Scalar>(nodes: &[Node<T>], input: Shape) -> Result<u64> {
    let mut shape = input;
    let mut total = 0;
    for n in nodes {
        total += n.layer.macs(shape)?;
        shape = n.layer.output_shape(shape)?;
    }
    Ok(total)
}

/// Multiply-accumulates of a layer sequence starting from `input`.
pub fn sequence_macs<T: Scalar>(nodes: &[Node<T>], input: Shape) -> Result<u64> {
    seq_macs(nodes, input)
}
