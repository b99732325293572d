//! Central finite-difference checks of analytic gradients in `f64`.
//!
//! Each check builds a small random layer, forms the scalar
//! `L = ⟨R, layer(x)⟩` for a random `R` (or the cross-entropy loss itself
//! for the softmax check) and compares every input and parameter gradient
//! with `(L(θ + h) − L(θ − h)) / 2h`. For shared multi-scale layers the
//! stored weight gradient is the per-rate mean, so it is multiplied by `n`
//! before comparison.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Layer, Linear, MultiScaleConv, NamedTensorMut, TensorKind};
use crate::msconv::SharedMultiScaleConvSpec;
use crate::ops::softmax_xent;
use crate::tensor::{ConvGeometry, Shape, Tensor};

/// Default pass threshold on the maximum relative error.
pub const GRAD_CHECK_TOL: f64 = 1e-5;
const STEP: f64 = 1e-6;
/// Relative errors use `max(|a|, |n|, FLOOR)` as denominator so entries
/// that are zero up to rounding do not blow up.
const FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckTarget {
    Conv { rate: usize },
    SharedMsConv { n: usize },
    UnsharedMsConv { n: usize },
    BatchNorm,
    Linear,
    SoftmaxXent,
    Relu,
    MaxPool,
    AvgPool,
}

impl CheckTarget {
    pub const ALL: [CheckTarget; 10] = [
        CheckTarget::Conv { rate: 1 },
        CheckTarget::Conv { rate: 2 },
        CheckTarget::SharedMsConv { n: 1 },
        CheckTarget::SharedMsConv { n: 2 },
        CheckTarget::UnsharedMsConv { n: 2 },
        CheckTarget::BatchNorm,
        CheckTarget::Linear,
        CheckTarget::SoftmaxXent,
        CheckTarget::Relu,
        CheckTarget::MaxPool,
    ];
}

impl FromStr for CheckTarget {
    type Err = Error;
    /// `conv`, `conv-r2`, `smsc`, `smsc-n1`, `unshared`, `batchnorm`,
    /// `linear`, `softmax-xent`, `relu`, `maxpool`, `avgpool`. Rate and
    /// branch counts may be given as `conv-r<k>`, `smsc-n<k>`,
    /// `unshared-n<k>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        let num = |rest: &str, tag: char| -> Result<usize> {
            rest.strip_prefix(tag)
                .and_then(|v| v.parse().ok())
                .filter(|&v| v >= 1)
                .ok_or_else(|| Error::Config(format!("bad layer selector `{s}`")))
        };
        Ok(match s.split_once('-') {
            None => match s.as_str() {
                "conv" => CheckTarget::Conv { rate: 1 },
                "smsc" | "shared" => CheckTarget::SharedMsConv { n: 2 },
                "unshared" => CheckTarget::UnsharedMsConv { n: 2 },
                "batchnorm" | "bn" => CheckTarget::BatchNorm,
                "linear" => CheckTarget::Linear,
                "relu" => CheckTarget::Relu,
                "maxpool" => CheckTarget::MaxPool,
                "avgpool" => CheckTarget::AvgPool,
                _ => return Err(Error::Config(format!("unknown layer selector `{s}`"))),
            },
            Some(("conv", rest)) => CheckTarget::Conv { rate: num(rest, 'r')? },
            Some(("smsc" | "shared", rest)) => CheckTarget::SharedMsConv { n: num(rest, 'n')? },
            Some(("unshared", rest)) => CheckTarget::UnsharedMsConv { n: num(rest, 'n')? },
            Some(("softmax", "xent")) => CheckTarget::SoftmaxXent,
            _ => return Err(Error::Config(format!("unknown layer selector `{s}`"))),
        })
    }
}

impl fmt::Display for CheckTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckTarget::Conv { rate } => write!(f, "conv-r{rate}"),
            CheckTarget::SharedMsConv { n } => write!(f, "smsc-n{n}"),
            CheckTarget::UnsharedMsConv { n } => write!(f, "unshared-n{n}"),
            CheckTarget::BatchNorm => f.write_str("batchnorm"),
            CheckTarget::Linear => f.write_str("linear"),
            CheckTarget::SoftmaxXent => f.write_str("softmax-xent"),
            CheckTarget::Relu => f.write_str("relu"),
            CheckTarget::MaxPool => f.write_str("maxpool"),
            CheckTarget::AvgPool => f.write_str("avgpool"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub batch: usize,
    pub channels: usize,
    pub size: usize,
    /// Output channels of convolutions; features of linear layers.
    pub outputs: usize,
    pub seed: u64,
    /// Perturbs the analytic input gradient; a negative control.
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            batch: 2,
            channels: 3,
            size: 6,
            outputs: 4,
            seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub target: CheckTarget,
    pub max_rel_error: f64,
    /// Name of the tensor holding the worst entry.
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

fn random_tensor(shape: impl Into<Shape>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn build_layer(target: CheckTarget, cfg: &GradCheckConfig) -> Result<Layer<f64>> {
    let (c, k) = (cfg.channels, cfg.outputs);
    Ok(match target {
        CheckTarget::Conv { rate } => {
            Layer::Conv(Conv2d::new(c, k, 3, ConvGeometry::new(1, rate, rate), true))
        }
        CheckTarget::SharedMsConv { n } => {
            let spec = SharedMultiScaleConvSpec::new(c, k, 3, n, 1)?;
            Layer::MultiScale(MultiScaleConv::shared(spec, true))
        }
        CheckTarget::UnsharedMsConv { n } => {
            let spec = SharedMultiScaleConvSpec::new(c, k, 3, n, 1)?;
            Layer::MultiScale(MultiScaleConv::unshared(spec, true))
        }
        CheckTarget::BatchNorm => Layer::batch_norm(c),
        CheckTarget::Linear => Layer::Linear(Linear::new(c * cfg.size * cfg.size, k)),
        CheckTarget::Relu => Layer::relu(),
        CheckTarget::MaxPool => Layer::max_pool(3, 2, 1),
        CheckTarget::AvgPool => Layer::avg_pool(2, 2),
        CheckTarget::SoftmaxXent => unreachable!("not a layer"),
    })
}

struct Worst {
    err: f64,
    name: String,
    checked: usize,
}

impl Worst {
    fn record(&mut self, name: &str, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        self.checked += 1;
        if e > self.err || self.name.is_empty() {
            self.err = self.err.max(e);
            self.name = name.to_string();
        }
    }
}

/// Runs one check; `Ok` carries the report whether or not it passed.
pub fn grad_check(target: CheckTarget, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = Worst {
        err: 0.0,
        name: String::new(),
        checked: 0,
    };
    if target == CheckTarget::SoftmaxXent {
        let logits = random_tensor([cfg.batch, cfg.outputs, 1, 1], &mut rng);
        let labels: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..cfg.outputs)).collect();
        let (_, mut g) = softmax_xent(&logits, &labels)?;
        if cfg.corrupt {
            g.data_mut()[0] += 0.1;
        }
        for i in 0..logits.len() {
            let eval = |d: f64| -> Result<f64> {
                let mut x = logits.clone();
                x.data_mut()[i] += d;
                Ok(softmax_xent(&x, &labels)?.0)
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            worst.record("logits", g.data()[i], numeric);
        }
        return Ok(GradCheckReport {
            target,
            max_rel_error: worst.err,
            worst: worst.name,
            checked: worst.checked,
        });
    }

    let mut layer = build_layer(target, cfg)?;
    {
        let mut ts: Vec<NamedTensorMut<f64>> = Vec::new();
        layer.tensors_mut("", &mut ts);
        for t in ts {
            let fill: Box<dyn Fn(&mut ChaCha8Rng) -> f64> = match t.kind {
                TensorKind::BnScale | TensorKind::RunningVar => Box::new(|r| r.random_range(0.5..1.5)),
                _ => Box::new(|r| r.random_range(-1.0..1.0)),
            };
            for v in t.tensor.data_mut() {
                *v = fill(&mut rng);
            }
        }
    }
    let x = random_tensor([cfg.batch, cfg.channels, cfg.size, cfg.size], &mut rng);
    let out_shape = layer.output_shape(x.shape())?;
    let r = random_tensor(out_shape, &mut rng);
    let shared_n = match &layer {
        Layer::MultiScale(m) if m.is_shared() => m.spec.n() as f64,
        _ => 1.0,
    };

    let loss = |l: &Layer<f64>, x: &Tensor<f64>| -> Result<f64> {
        let mut l = l.clone();
        l.forward(x, true)?.dot(&r)
    };

    let mut probe = layer.clone();
    probe.forward(&x, true)?;
    let mut gx = probe.backward(&r)?;
    if cfg.corrupt {
        gx.data_mut()[0] += 0.1;
    }
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= STEP;
        let numeric = (loss(&layer, &xp)? - loss(&layer, &xm)?) / (2.0 * STEP);
        worst.record("input", gx.data()[i], numeric);
    }

    let mut grads = Vec::new();
    probe.params_mut("", &mut grads);
    let grads: Vec<(String, Tensor<f64>)> = grads.into_iter().map(|(n, p)| (n, p.grad.clone())).collect();
    for (pi, (name, g)) in grads.iter().enumerate() {
        let scale = if name == "weight" { shared_n } else { 1.0 };
        for j in 0..g.len() {
            let shifted = |d: f64| -> Result<f64> {
                let mut l = layer.clone();
                let mut ps = Vec::new();
                l.params_mut("", &mut ps);
                ps[pi].1.value.data_mut()[j] += d;
                drop(ps);
                loss(&l, &x)
            };
            let numeric = (shifted(STEP)? - shifted(-STEP)?) / (2.0 * STEP);
            worst.record(name, scale * g.data()[j], numeric);
        }
    }
    Ok(GradCheckReport {
        target,
        max_rel_error: worst.err,
        worst: worst.name,
        checked: worst.checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selectors_parse() {
        assert_eq!("conv-r2".parse::<CheckTarget>().unwrap(), CheckTarget::Conv { rate: 2 });
        assert_eq!("smsc".parse::<CheckTarget>().unwrap(), CheckTarget::SharedMsConv { n: 2 });
        assert_eq!("softmax-xent".parse::<CheckTarget>().unwrap(), CheckTarget::SoftmaxXent);
        assert!("conv-x".parse::<CheckTarget>().is_err());
        for t in CheckTarget::ALL {
            assert_eq!(t.to_string().parse::<CheckTarget>().unwrap(), t);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = GradCheckConfig {
            corrupt: true,
            ..GradCheckConfig::default()
        };
        let r = grad_check(CheckTarget::Conv { rate: 1 }, &cfg).unwrap();
        assert!(!r.passed(GRAD_CHECK_TOL));
    }
}
