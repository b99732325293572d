use crate::error::{Error, Result};
use crate::layers::{
    backward_seq, forward_seq, seq_output_shape, sequence_macs, Layer, Linear, NamedTensor,
    NamedTensorMut, Node, TensorKind,
};
use crate::param::Param;
use crate::tensor::{Scalar, Shape, Tensor};
use crate::zoo::ArchSpec;

/// A feature extractor followed by a linear classifier.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub spec: ArchSpec,
    pub features: Vec<Node<T>>,
    /// Name used for the classifier's tensors (`<name>.weight`, `<name>.bias`).
    pub classifier_name: String,
    pub classifier: Linear<T>,
    /// When set, only classifier parameters are updated by the optimizer.
    pub freeze_features: bool,
}

impl<T: Scalar> Model<T> {
    /// Logits of shape `(N, classes, 1, 1)`. Frozen features always run in
    /// inference mode.
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let feats = forward_seq(&mut self.features, x, train && !self.freeze_features)?;
        self.classifier.forward(&feats, train)
    }

    /// Backpropagates `grad_logits`, accumulating parameter gradients.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.classifier.backward(grad_logits)?;
        if self.freeze_features {
            return Ok(g);
        }
        backward_seq(&mut self.features, &g)
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut(true) {
            p.zero_grad();
        }
    }

    pub fn clear_cache(&mut self) {
        for n in &mut self.features {
            n.layer.clear_cache();
        }
        self.classifier.clear_cache();
    }

    /// Every named tensor in canonical order: features layer by layer, then
    /// the classifier. Within a layer parameters precede running statistics.
    pub fn named_tensors(&self) -> Vec<NamedTensor<'_, T>> {
        let mut out = Vec::new();
        for n in &self.features {
            n.layer.tensors(&n.name, &mut out);
        }
        out.push(NamedTensor {
            name: format!("{}.weight", self.classifier_name),
            kind: TensorKind::Weight,
            tensor: &self.classifier.weight.value,
        });
        out.push(NamedTensor {
            name: format!("{}.bias", self.classifier_name),
            kind: TensorKind::Bias,
            tensor: &self.classifier.bias.value,
        });
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<NamedTensorMut<'_, T>> {
        let mut out = Vec::new();
        for n in &mut self.features {
            n.layer.tensors_mut(&n.name, &mut out);
        }
        out.push(NamedTensorMut {
            name: format!("{}.weight", self.classifier_name),
            kind: TensorKind::Weight,
            tensor: &mut self.classifier.weight.value,
        });
        out.push(NamedTensorMut {
            name: format!("{}.bias", self.classifier_name),
            kind: TensorKind::Bias,
            tensor: &mut self.classifier.bias.value,
        });
        out
    }

    /// Learnable parameters in canonical order. Feature parameters are
    /// skipped when `include_features` is false.
    pub fn params_mut(&mut self, include_features: bool) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        if include_features {
            for n in &mut self.features {
                n.layer.params_mut(&n.name, &mut out);
            }
        }
        out.push((format!("{}.weight", self.classifier_name), &mut self.classifier.weight));
        out.push((format!("{}.bias", self.classifier_name), &mut self.classifier.bias));
        out
    }

    /// Parameters the optimizer should touch, honoring `freeze_features`.
    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let include = !self.freeze_features;
        self.params_mut(include)
    }

    /// Exact number of learnable elements: weights, biases, batch-norm
    /// scale and shift. Running statistics are never counted.
    pub fn count_params(&self, include_classifier: bool) -> u64 {
        let total: u64 = self
            .named_tensors()
            .iter()
            .filter(|t| t.kind.is_param())
            .map(|t| t.tensor.len() as u64)
            .sum();
        if include_classifier {
            total
        } else {
            total - self.classifier_params()
        }
    }

    pub fn classifier_params(&self) -> u64 {
        (self.classifier.weight.len() + self.classifier.bias.len()) as u64
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.in_features()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_features()
    }

    /// Shape after the feature extractor.
    pub fn feature_shape(&self, input: Shape) -> Result<Shape> {
        seq_output_shape(&self.features, input)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let f = self.feature_shape(input)?;
        if f.per_sample() != self.feature_dim() {
            return Err(Error::ChannelMismatch {
                expected: self.feature_dim(),
                got: f.per_sample(),
            });
        }
        Ok(Shape::new(f.n, self.num_classes(), 1, 1))
    }

    /// Multiply-accumulate count of one forward pass on a
    /// `1 × 3 × size × size` input.
    pub fn flop_count(&self, input_size: usize) -> Result<u64> {
        let input = Shape::new(1, 3, input_size, input_size);
        let feats = sequence_macs(&self.features, input)?;
        let fshape = self.feature_shape(input)?;
        if fshape.per_sample() != self.feature_dim() {
            return Err(Error::ChannelMismatch {
                expected: self.feature_dim(),
                got: fshape.per_sample(),
            });
        }
        Ok(feats + (self.feature_dim() * self.num_classes()) as u64)
    }

    /// Looks up a top-level or nested layer by dotted name.
    pub fn find_layer(&self, name: &str) -> Option<&Layer<T>> {
        fn search<'a, T>(nodes: &'a [Node<T>], name: &str) -> Option<&'a Layer<T>> {
            for n in nodes {
                if n.name == name {
                    return Some(&n.layer);
                }
                if let Some(rest) = name.strip_prefix(&n.name).and_then(|r| r.strip_prefix('.')) {
                    if let Layer::Residual(b) = &n.layer {
                        if let Some(l) = search(&b.main, rest).or_else(|| search(&b.shortcut, rest)) {
                            return Some(l);
                        }
                    }
                }
            }
            None
        }
        search(&self.features, name)
    }

    /// Dotted names of every convolution (plain or multi-scale) in order.
    pub fn conv_layer_names(&self) -> Vec<String> {
        fn walk<T>(nodes: &[Node<T>], prefix: &str, out: &mut Vec<String>) {
            for n in nodes {
                let name = if prefix.is_empty() {
                    n.name.clone()
                } else {
                    format!("{prefix}.{}", n.name)
                };
                match &n.layer {
                    Layer::Conv(_) | Layer::MultiScale(_) => out.push(name),
                    Layer::Residual(b) => {
                        walk(&b.main, &name, out);
                        walk(&b.shortcut, &name, out);
                    }
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.features, "", &mut out);
        out
    }

    /// Kernel tensor `(K, k_i, f, f)` of a convolution layer.
    pub fn conv_kernels(&self, name: &str) -> Result<Tensor<T>> {
        match self.find_layer(name) {
            Some(Layer::Conv(c)) => Ok(c.weight.value.clone()),
            Some(Layer::MultiScale(m)) => Ok(m.kernels()),
            Some(_) => Err(Error::UnknownLayer(format!("{name} (not a convolution)"))),
            None => Err(Error::UnknownLayer(name.to_string())),
        }
    }

    /// The last convolution with spatial (f > 1) kernels.
    pub fn last_spatial_conv(&self) -> Option<String> {
        self.conv_layer_names()
            .into_iter()
            .rev()
            .find(|n| self.conv_kernels(n).map(|k| k.shape().h > 1).unwrap_or(false))
    }
}
