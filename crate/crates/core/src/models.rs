//! Sub-models split into an encoder (image -> representation `v`) and a
//! linear softmax classifier (`p = softmax(v W + b)`), plus ensembles that
//! predict by averaging member probabilities.
//!
//! | tag         | encoder                                                                 | classifier |
//! |-------------|-------------------------------------------------------------------------|------------|
//! | `mlp`       | flatten -> linear(D, 128) -> relu -> linear(128, d)                     | linear(d, C) |
//! | `cnn-small` | conv(Cin->8, 3x3) -> relu -> pool2 -> conv(8->16, 3x3) -> relu -> pool2 -> flatten -> linear(16*h*w, d) | linear(d, C) |
//!
//! Convolutions use stride 1 and no padding; pooling is 2x2 max pooling with
//! floor on odd extents. On 1x28x28 inputs with d = 64 and C = 10 this gives
//! 109,386 parameters for `mlp` and 27,562 for `cnn-small`.
//!
//! Weights are drawn from uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out));
//! biases start at zero.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv_out_extent, max_pool2d, Array, Graph, Tensor};

pub const MLP_HIDDEN: usize = 128;
pub const CNN_CHANNELS: [usize; 2] = [8, 16];
const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    Mlp,
    CnnSmall,
}

impl Architecture {
    pub fn tag(self) -> &'static str {
        match self {
            Architecture::Mlp => "mlp",
            Architecture::CnnSmall => "cnn-small",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Architecture::Mlp),
            "cnn-small" => Ok(Architecture::CnnSmall),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (expected mlp or cnn-small)"
            ))),
        }
    }
}

/// Per-example image shape (channels, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub const MNIST: InputShape = InputShape {
        channels: 1,
        height: 28,
        width: 28,
    };

    pub fn flat(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// A named parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }
}

pub(crate) fn glorot(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Array {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Array::new(shape.to_vec(), data).expect("shape and data agree")
}

fn expected_layout(
    arch: Architecture,
    input: InputShape,
    repr_dim: usize,
    classes: usize,
) -> Result<Vec<(&'static str, Vec<usize>)>> {
    let mut layout = match arch {
        Architecture::Mlp => vec![
            ("enc.fc1.weight", vec![input.flat(), MLP_HIDDEN]),
            ("enc.fc1.bias", vec![MLP_HIDDEN]),
            ("enc.fc2.weight", vec![MLP_HIDDEN, repr_dim]),
            ("enc.fc2.bias", vec![repr_dim]),
        ],
        Architecture::CnnSmall => {
            let [c1, c2] = CNN_CHANNELS;
            let after = |e: usize| {
                conv_out_extent(e, KERNEL, 1, 0)
                    .map(|o| o / 2)
                    .filter(|&o| o > 0)
            };
            let (h, w) = after(input.height)
                .and_then(after)
                .zip(after(input.width).and_then(after))
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "input {}x{} too small for cnn-small",
                        input.height, input.width
                    ))
                })?;
            vec![
                ("enc.conv1.weight", vec![c1, input.channels, KERNEL, KERNEL]),
                ("enc.conv1.bias", vec![c1]),
                ("enc.conv2.weight", vec![c2, c1, KERNEL, KERNEL]),
                ("enc.conv2.bias", vec![c2]),
                ("enc.fc.weight", vec![c2 * h * w, repr_dim]),
                ("enc.fc.bias", vec![repr_dim]),
            ]
        }
    };
    layout.push(("cls.weight", vec![repr_dim, classes]));
    layout.push(("cls.bias", vec![classes]));
    Ok(layout)
}

/// One ensemble member. Parameters are owned arrays; forward passes go
/// through a [`ModelView`] that holds them either as constants or as leaves
/// of a training graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SubModel {
    arch: Architecture,
    params: Vec<Param>,
}

impl SubModel {
    pub fn new(
        arch: Architecture,
        input: InputShape,
        repr_dim: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if repr_dim == 0 || classes < 2 || input.flat() == 0 {
            return Err(Error::InvalidArgument(format!(
                "need d >= 1 and C >= 2, got d = {repr_dim}, C = {classes}"
            )));
        }
        let params = expected_layout(arch, input, repr_dim, classes)?
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".bias") {
                    Array::zeros(&shape)
                } else if shape.len() == 4 {
                    let field = shape[2] * shape[3];
                    glorot(rng, &shape, shape[1] * field, shape[0] * field)
                } else {
                    glorot(rng, &shape, shape[0], shape[1])
                };
                Param::new(name, value)
            })
            .collect();
        Ok(SubModel { arch, params })
    }

    /// Rebuilds a model from stored parameters, checking names and ranks
    /// against the architecture.
    pub fn from_params(arch: Architecture, params: Vec<Param>) -> Result<Self> {
        let names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
        let expected: Vec<&str> = expected_layout(arch, InputShape::MNIST, 1, 2)?
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        if names != expected {
            return Err(Error::InvalidArgument(format!(
                "{arch} expects parameters {expected:?}, found {names:?}"
            )));
        }
        let model = SubModel { arch, params };
        let (d, c) = (model.repr_dim(), model.classes());
        let cls = &model.params[model.params.len() - 2].value;
        let enc_bias = &model.params[model.params.len() - 3].value;
        if cls.shape() != [d, c] || enc_bias.shape() != [d] {
            return Err(Error::InvalidArgument(
                "inconsistent representation width".into(),
            ));
        }
        Ok(model)
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Representation width `d`.
    pub fn repr_dim(&self) -> usize {
        self.params[self.params.len() - 2].value.shape()[0]
    }

    /// Number of classes `C`.
    pub fn classes(&self) -> usize {
        self.params[self.params.len() - 1].value.shape()[0]
    }

    /// Parameters as constants (no gradients).
    pub fn view(&self) -> ModelView {
        ModelView {
            arch: self.arch,
            params: self
                .params
                .iter()
                .map(|p| Tensor::constant(p.value.clone()))
                .collect(),
        }
    }

    /// Parameters as leaves of `graph`, in [`SubModel::params`] order.
    pub fn bind(&self, graph: &Graph) -> ModelView {
        ModelView {
            arch: self.arch,
            params: self
                .params
                .iter()
                .map(|p| graph.leaf(p.value.clone()))
                .collect(),
        }
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.view().encode(x)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.view().predict(x)
    }
}

/// A sub-model's parameters materialized as tensors.
#[derive(Clone, Debug)]
pub struct ModelView {
    arch: Architecture,
    params: Vec<Tensor>,
}

impl ModelView {
    /// Wraps tensors laid out as in [`SubModel::params`]. Shapes are checked
    /// lazily by the forward pass.
    pub fn from_tensors(arch: Architecture, params: Vec<Tensor>) -> Self {
        ModelView { arch, params }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Representation `v` for a batch: `x` is `[B, C, H, W]` (or `[B, D]` for `mlp`), result `[B, d]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let p = &self.params;
        match self.arch {
            Architecture::Mlp => {
                let flat = flatten(x)?;
                let h = flat.matmul(&p[0])?.add(&p[1])?.relu();
                h.matmul(&p[2])?.add(&p[3])
            }
            Architecture::CnnSmall => {
                if x.shape().len() != 4 {
                    return Err(Error::shape(
                        "encode",
                        format!("cnn-small expects [B, C, H, W], got {:?}", x.shape()),
                    ));
                }
                let bias = |b: &Tensor| b.reshape(&[1, b.shape()[0], 1, 1]);
                let h = conv2d(x, &p[0], 1, 0)?.add(&bias(&p[1])?)?.relu();
                let h = max_pool2d(&h, 2)?;
                let h = conv2d(&h, &p[2], 1, 0)?.add(&bias(&p[3])?)?.relu();
                let h = max_pool2d(&h, 2)?;
                flatten(&h)?.matmul(&p[4])?.add(&p[5])
            }
        }
    }

    /// Classifier logits `v W + b`.
    pub fn logits(&self, v: &Tensor) -> Result<Tensor> {
        let n = self.params.len();
        v.matmul(&self.params[n - 2])?.add(&self.params[n - 1])
    }

    /// Class probabilities from a representation.
    pub fn classify(&self, v: &Tensor) -> Result<Tensor> {
        self.logits(v)?.softmax(1)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.classify(&self.encode(x)?)
    }
}

fn flatten(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape(
            "encode",
            format!("expected a batch, got {s:?}"),
        ));
    }
    let rest: usize = s[1..].iter().product();
    x.reshape(&[s[0], rest])
}

/// N independent members sharing input shape, representation width and class count.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    members: Vec<SubModel>,
}

impl Ensemble {
    pub fn new(members: Vec<SubModel>) -> Result<Self> {
        let first = members.first().ok_or_else(|| {
            Error::InvalidArgument("an ensemble needs at least one member".into())
        })?;
        let (d, c) = (first.repr_dim(), first.classes());
        if members
            .iter()
            .any(|m| m.repr_dim() != d || m.classes() != c)
        {
            return Err(Error::InvalidArgument(
                "members disagree on representation width or class count".into(),
            ));
        }
        Ok(Ensemble { members })
    }

    /// `n` freshly initialized members drawn from `rng`.
    pub fn init(
        n: usize,
        arch: Architecture,
        input: InputShape,
        repr_dim: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let members = (0..n)
            .map(|_| SubModel::new(arch, input, repr_dim, classes, rng))
            .collect::<Result<Vec<_>>>()?;
        Ensemble::new(members)
    }

    pub fn members(&self) -> &[SubModel] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [SubModel] {
        &mut self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.members[0].classes()
    }

    pub fn repr_dim(&self) -> usize {
        self.members[0].repr_dim()
    }

    pub fn arch(&self) -> Architecture {
        self.members[0].arch()
    }

    pub fn views(&self) -> Vec<ModelView> {
        self.members.iter().map(SubModel::view).collect()
    }

    pub fn bind(&self, graph: &Graph) -> Vec<ModelView> {
        self.members.iter().map(|m| m.bind(graph)).collect()
    }

    /// Mean of the member probability vectors, `[B, C]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        ensemble_predict(&self.views(), x)
    }

    /// Hard predictions (argmax of the averaged probabilities), evaluated in chunks.
    pub fn predict_labels(&self, images: &Array) -> Result<Vec<usize>> {
        const CHUNK: usize = 512;
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let len = CHUNK.min(n - start);
            let x = Tensor::constant(images.slice_rows(start, len)?);
            out.extend(self.predict(&x)?.value().argmax_rows());
            start += len;
        }
        Ok(out)
    }
}

/// Arithmetic mean of the members' predicted distributions.
pub fn ensemble_predict(members: &[ModelView], x: &Tensor) -> Result<Tensor> {
    let Some((first, rest)) = members.split_first() else {
        return Err(Error::InvalidArgument(
            "ensemble_predict on an empty ensemble".into(),
        ));
    };
    let mut total = first.predict(x)?;
    for m in rest {
        total = total.add(&m.predict(x)?)?;
    }
    Ok(total.scale(1.0 / members.len() as f64))
}
