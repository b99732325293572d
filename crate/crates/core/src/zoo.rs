//! AlexNet and ResNet builders in vanilla, unshared and shared variants.
//!
//! Which convolutions become multi-scale:
//!
//! * bottleneck ResNets (50/101/152): the middle 3×3 convolution of every
//!   block, including the strided first block of each stage;
//! * basic-block ResNets (10/18/34): the second 3×3 convolution of every
//!   block;
//! * AlexNet: all five convolutions.
//!
//! Stems and 1×1 projections are never multi-scale. Outside of the
//! bottleneck ResNets these placements are inferred from the published
//! parameter totals rather than stated architecture tables.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Layer, Linear, MultiScaleConv, Node, ResidualBlock, TensorKind};
use crate::model::Model;
use crate::msconv::SharedMultiScaleConvSpec;
use crate::tensor::{ConvGeometry, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    AlexNet,
    ResNet,
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alexnet" => Ok(Family::AlexNet),
            "resnet" => Ok(Family::ResNet),
            _ => Err(Error::Arch(format!("unknown family `{s}`"))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Family::AlexNet => "alexnet",
            Family::ResNet => "resnet",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Vanilla,
    Unshared,
    Shared,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Vanilla, Variant::Unshared, Variant::Shared];
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(Variant::Vanilla),
            "unshared" => Ok(Variant::Unshared),
            "shared" => Ok(Variant::Shared),
            _ => Err(Error::Arch(format!("unknown variant `{s}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Variant::Vanilla => "vanilla",
            Variant::Unshared => "unshared",
            Variant::Shared => "shared",
        })
    }
}

/// ResNet depths that can be built. 10 is a desk-scale configuration with
/// one basic block per stage.
pub const RESNET_DEPTHS: [u32; 6] = [10, 18, 34, 50, 101, 152];

/// Declarative network description.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub family: Family,
    /// ResNet depth; 0 for AlexNet.
    pub depth: u32,
    pub variant: Variant,
    /// Number of dilation rates; 1 for vanilla.
    pub rates: usize,
    pub num_classes: usize,
    pub input_size: usize,
    /// ResNet base width (channels of the stem and first stage).
    pub width: usize,
}

/// Keys recognized by [`ArchSpec::from_config`].
pub const ARCH_KEYS: [&str; 7] = [
    "family",
    "depth",
    "variant",
    "rates",
    "classes",
    "input_size",
    "width",
];

impl ArchSpec {
    pub fn resnet(depth: u32, variant: Variant, num_classes: usize) -> Self {
        Self {
            family: Family::ResNet,
            depth,
            variant,
            rates: default_rates(variant),
            num_classes,
            input_size: 224,
            width: 64,
        }
    }

    pub fn alexnet(variant: Variant, num_classes: usize) -> Self {
        Self {
            family: Family::AlexNet,
            depth: 0,
            variant,
            rates: default_rates(variant),
            num_classes,
            input_size: 224,
            width: 64,
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            rates: default_rates(variant),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            Family::ResNet if !RESNET_DEPTHS.contains(&self.depth) => {
                return Err(Error::Arch(format!(
                    "unsupported resnet depth {} (expected one of {RESNET_DEPTHS:?})",
                    self.depth
                )))
            }
            Family::AlexNet if self.depth != 0 => {
                return Err(Error::Arch("alexnet takes no depth".into()))
            }
            _ => {}
        }
        match (self.variant, self.rates) {
            (Variant::Vanilla, 1) => {}
            (Variant::Vanilla, n) => {
                return Err(Error::Arch(format!("vanilla networks use one rate, got {n}")))
            }
            (_, n) if n < 2 => {
                return Err(Error::Arch(format!(
                    "{} networks need at least two rates, got {n}",
                    self.variant
                )))
            }
            _ => {}
        }
        if self.num_classes == 0 || self.input_size == 0 || self.width == 0 {
            return Err(Error::Arch("classes, input_size and width must be positive".into()));
        }
        Ok(())
    }

    /// Short display name, e.g. `resnet101` or `alexnet`.
    pub fn name(&self) -> String {
        match self.family {
            Family::AlexNet => "alexnet".into(),
            Family::ResNet => format!("resnet{}", self.depth),
        }
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        let family: Family = cfg
            .get("family")
            .ok_or_else(|| Error::Config("missing `family`".into()))?
            .parse()?;
        let variant: Variant = cfg.get("variant").unwrap_or("vanilla").parse()?;
        let depth = match family {
            Family::ResNet => cfg
                .parse_opt::<u32>("depth")?
                .ok_or_else(|| Error::Config("resnet needs `depth`".into()))?,
            Family::AlexNet => cfg.parse_or("depth", 0)?,
        };
        let spec = Self {
            family,
            depth,
            variant,
            rates: cfg.parse_or("rates", default_rates(variant))?,
            num_classes: cfg.parse_or("classes", 1000)?,
            input_size: cfg.parse_or("input_size", 224)?,
            width: cfg.parse_or("width", 64)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_config(&self) -> Config {
        let mut c = Config::default();
        c.set("family", self.family);
        if self.family == Family::ResNet {
            c.set("depth", self.depth);
        }
        c.set("variant", self.variant);
        c.set("rates", self.rates);
        c.set("classes", self.num_classes);
        c.set("input_size", self.input_size);
        c.set("width", self.width);
        c
    }
}

fn default_rates(v: Variant) -> usize {
    match v {
        Variant::Vanilla => 1,
        _ => 2,
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.name(), self.variant)
    }
}

struct Builder<'a> {
    spec: &'a ArchSpec,
}

impl Builder<'_> {
    /// A convolution eligible for multi-scale replacement. Vanilla layers
    /// use "same" padding `(f − 1)/2`, matching the rate-1 branch.
    fn spatial_conv<T: Scalar>(
        &self,
        k_i: usize,
        k_o: usize,
        f: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Layer<T>> {
        let ms = |shared| -> Result<Layer<T>> {
            let spec = SharedMultiScaleConvSpec::new(k_i, k_o, f, self.spec.rates, stride)?;
            Ok(Layer::MultiScale(if shared {
                MultiScaleConv::shared(spec, bias)
            } else {
                MultiScaleConv::unshared(spec, bias)
            }))
        };
        match self.spec.variant {
            Variant::Vanilla => Ok(plain_conv(k_i, k_o, f, stride, (f - 1) / 2, bias)),
            Variant::Unshared => ms(false),
            Variant::Shared => ms(true),
        }
    }
}

fn plain_conv<T: Scalar>(
    k_i: usize,
    k_o: usize,
    f: usize,
    stride: usize,
    padding: usize,
    bias: bool,
) -> Layer<T> {
    Layer::Conv(Conv2d::new(
        k_i,
        k_o,
        f,
        ConvGeometry::new(stride, padding, 1),
        bias,
    ))
}

fn resnet_blocks(depth: u32) -> ([usize; 4], bool) {
    match depth {
        10 => ([1, 1, 1, 1], false),
        18 => ([2, 2, 2, 2], false),
        34 => ([3, 4, 6, 3], false),
        50 => ([3, 4, 6, 3], true),
        101 => ([3, 4, 23, 3], true),
        152 => ([3, 8, 36, 3], true),
        _ => unreachable!("validated depth"),
    }
}

/// Per-stage block counts and whether blocks are bottlenecks.
pub fn resnet_layout(depth: u32) -> Result<([usize; 4], bool)> {
    if !RESNET_DEPTHS.contains(&depth) {
        return Err(Error::Arch(format!("unsupported resnet depth {depth}")));
    }
    Ok(resnet_blocks(depth))
}

fn build_resnet<T: Scalar>(b: &Builder) -> Result<Model<T>> {
    let spec = b.spec;
    let (blocks, bottleneck) = resnet_blocks(spec.depth);
    let expansion = if bottleneck { 4 } else { 1 };
    let w = spec.width;
    let mut features = vec![
        Node::new("conv1", plain_conv(3, w, 7, 2, 3, false)),
        Node::new("bn1", Layer::batch_norm(w)),
        Node::new("relu", Layer::relu()),
        Node::new("maxpool", Layer::max_pool(3, 2, 1)),
    ];
    let mut in_ch = w;
    for (stage, &count) in blocks.iter().enumerate() {
        let planes = w << stage;
        for i in 0..count {
            let stride = if stage > 0 && i == 0 { 2 } else { 1 };
            let out_ch = planes * expansion;
            let main = if bottleneck {
                vec![
                    Node::new("conv1", plain_conv(in_ch, planes, 1, 1, 0, false)),
                    Node::new("bn1", Layer::batch_norm(planes)),
                    Node::new("relu1", Layer::relu()),
                    Node::new("conv2", b.spatial_conv(planes, planes, 3, stride, false)?),
                    Node::new("bn2", Layer::batch_norm(planes)),
                    Node::new("relu2", Layer::relu()),
                    Node::new("conv3", plain_conv(planes, out_ch, 1, 1, 0, false)),
                    Node::new("bn3", Layer::batch_norm(out_ch)),
                ]
            } else {
                vec![
                    Node::new("conv1", plain_conv(in_ch, planes, 3, stride, 1, false)),
                    Node::new("bn1", Layer::batch_norm(planes)),
                    Node::new("relu1", Layer::relu()),
                    Node::new("conv2", b.spatial_conv(planes, planes, 3, 1, false)?),
                    Node::new("bn2", Layer::batch_norm(planes)),
                ]
            };
            let shortcut = if stride != 1 || in_ch != out_ch {
                vec![
                    Node::new("downsample.0", plain_conv(in_ch, out_ch, 1, stride, 0, false)),
                    Node::new("downsample.1", Layer::batch_norm(out_ch)),
                ]
            } else {
                Vec::new()
            };
            features.push(Node::new(
                format!("layer{}.{}", stage + 1, i),
                Layer::Residual(Box::new(ResidualBlock::new(main, shortcut))),
            ));
            in_ch = out_ch;
        }
    }
    features.push(Node::new("avgpool", Layer::avg_pool(1, 1)));
    Ok(Model {
        spec: spec.clone(),
        features,
        classifier_name: "fc".into(),
        classifier: Linear::new(in_ch, spec.num_classes),
        freeze_features: false,
    })
}

fn build_alexnet<T: Scalar>(b: &Builder) -> Result<Model<T>> {
    let spec = b.spec;
    let features = vec![
        Node::new("conv1", b.spatial_conv(3, 64, 11, 4, true)?),
        Node::new("relu1", Layer::relu()),
        Node::new("pool1", Layer::max_pool(3, 2, 0)),
        Node::new("conv2", b.spatial_conv(64, 192, 5, 1, true)?),
        Node::new("relu2", Layer::relu()),
        Node::new("pool2", Layer::max_pool(3, 2, 0)),
        Node::new("conv3", b.spatial_conv(192, 384, 3, 1, true)?),
        Node::new("relu3", Layer::relu()),
        Node::new("conv4", b.spatial_conv(384, 256, 3, 1, true)?),
        Node::new("relu4", Layer::relu()),
        Node::new("conv5", b.spatial_conv(256, 256, 3, 1, true)?),
        Node::new("relu5", Layer::relu()),
        Node::new("pool5", Layer::max_pool(3, 2, 0)),
        Node::new("avgpool", Layer::avg_pool(6, 6)),
        Node::new("fc6", Layer::Linear(Linear::new(256 * 6 * 6, 4096))),
        Node::new("relu6", Layer::relu()),
        Node::new("fc7", Layer::Linear(Linear::new(4096, 4096))),
        Node::new("relu7", Layer::relu()),
    ];
    Ok(Model {
        spec: spec.clone(),
        features,
        classifier_name: "fc8".into(),
        classifier: Linear::new(4096, spec.num_classes),
        freeze_features: false,
    })
}

/// Builds the topology with zero weights, unit batch-norm scales and unit
/// running variances. Use [`build_model`] for an initialized network.
pub fn build_topology<T: Scalar>(spec: &ArchSpec) -> Result<Model<T>> {
    spec.validate()?;
    let b = Builder { spec };
    match spec.family {
        Family::ResNet => build_resnet(&b),
        Family::AlexNet => build_alexnet(&b),
    }
}

/// Builds and He-initializes a network; deterministic in `seed`.
pub fn build_model<T: Scalar>(spec: &ArchSpec, seed: u64) -> Result<Model<T>> {
    let mut m = build_topology(spec)?;
    he_init(&mut m, seed);
    Ok(m)
}

/// Draws convolution and linear weights from `N(0, 2 / fan_in)` with
/// `fan_in = k_i·f²` (dilation does not change it). Biases and shifts are
/// zeroed, scales set to one, running statistics reset.
pub fn he_init<T: Scalar>(model: &mut Model<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.named_tensors_mut() {
        init_tensor(t.kind, t.tensor, &mut rng);
    }
}

pub(crate) fn init_tensor<T: Scalar>(
    kind: TensorKind,
    tensor: &mut crate::tensor::Tensor<T>,
    rng: &mut ChaCha8Rng,
) {
    match kind {
        TensorKind::Weight => {
            let fan_in = tensor.shape().per_sample().max(1);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            for v in tensor.data_mut() {
                *v = T::from_f64(normal.sample(rng));
            }
        }
        TensorKind::Bias | TensorKind::BnShift | TensorKind::RunningMean => tensor.fill(T::zero()),
        TensorKind::BnScale | TensorKind::RunningVar => tensor.fill(T::one()),
    }
}

/// Parameter count of a freshly built topology.
pub fn count_params(spec: &ArchSpec, include_classifier: bool) -> Result<u64> {
    Ok(build_topology::<f32>(spec)?.count_params(include_classifier))
}
