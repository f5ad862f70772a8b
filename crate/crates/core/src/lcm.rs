//! Label confusion model shared by all ensemble members.
//!
//! Labels are embedded (`label_table`, `[C, d]`) and passed through a small
//! network (linear, relu, linear) to give label representations `Vec`
//! (`[C, d]`). For a member representation `v` the confusion vector is
//! `c = softmax((v Vec^T) W + b)` with `W` of shape `[C, C]`, and the
//! simulated label distribution is `s = softmax(gamma * y + c)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::models::{glorot, Param};
use crate::tensor::{embedding_lookup, Array, Graph, Tensor};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

const PARAM_NAMES: [&str; 7] = [
    "label_table",
    "net.fc1.weight",
    "net.fc1.bias",
    "net.fc2.weight",
    "net.fc2.bias",
    "sim.weight",
    "sim.bias",
];

#[derive(Clone, Debug, PartialEq)]
pub struct LabelConfusionModel {
    gamma: f64,
    params: Vec<Param>,
}

impl LabelConfusionModel {
    pub fn new(classes: usize, repr_dim: usize, gamma: f64, rng: &mut impl Rng) -> Result<Self> {
        if classes < 2 || repr_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "label confusion model needs C >= 2 and d >= 1, got C = {classes}, d = {repr_dim}"
            )));
        }
        let (c, d) = (classes, repr_dim);
        let params = vec![
            Param::new(PARAM_NAMES[0], glorot(rng, &[c, d], c, d)),
            Param::new(PARAM_NAMES[1], glorot(rng, &[d, d], d, d)),
            Param::new(PARAM_NAMES[2], Array::zeros(&[d])),
            Param::new(PARAM_NAMES[3], glorot(rng, &[d, d], d, d)),
            Param::new(PARAM_NAMES[4], Array::zeros(&[d])),
            Param::new(PARAM_NAMES[5], glorot(rng, &[c, c], c, c)),
            Param::new(PARAM_NAMES[6], Array::zeros(&[c])),
        ];
        Self::from_params(params, gamma)
    }

    pub fn from_params(params: Vec<Param>, gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be finite and >= 0, got {gamma}"
            )));
        }
        let names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
        if names != PARAM_NAMES {
            return Err(Error::InvalidArgument(format!(
                "label confusion model expects parameters {PARAM_NAMES:?}, found {names:?}"
            )));
        }
        let table = params[0].value.shape();
        if table.len() != 2 {
            return Err(Error::shape(
                "label_table",
                format!("expected [C, d], got {table:?}"),
            ));
        }
        let (c, d) = (table[0], table[1]);
        let expected: [&[usize]; 7] = [&[c, d], &[d, d], &[d], &[d, d], &[d], &[c, c], &[c]];
        for (p, want) in params.iter().zip(expected) {
            if p.value.shape() != want {
                return Err(Error::shape(
                    "label confusion model",
                    format!(
                        "{} has shape {:?}, expected {want:?}",
                        p.name,
                        p.value.shape()
                    ),
                ));
            }
        }
        Ok(LabelConfusionModel { gamma, params })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn classes(&self) -> usize {
        self.params[0].value.shape()[0]
    }

    pub fn repr_dim(&self) -> usize {
        self.params[0].value.shape()[1]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn view(&self) -> LcmView {
        LcmView {
            gamma: self.gamma,
            params: self
                .params
                .iter()
                .map(|p| Tensor::constant(p.value.clone()))
                .collect(),
        }
    }

    pub fn bind(&self, graph: &Graph) -> LcmView {
        LcmView {
            gamma: self.gamma,
            params: self
                .params
                .iter()
                .map(|p| graph.leaf(p.value.clone()))
                .collect(),
        }
    }
}

/// Simulated label distribution for one member.
#[derive(Clone, Debug)]
pub struct SoftLabel {
    /// `s`, rows sum to one.
    pub sld: Tensor,
    /// `c`, rows sum to one.
    pub lcv: Tensor,
    pub model_index: usize,
}

/// LCM parameters materialized as tensors, in [`LabelConfusionModel::params`] order.
#[derive(Clone, Debug)]
pub struct LcmView {
    gamma: f64,
    params: Vec<Tensor>,
}

impl LcmView {
    /// Wraps tensors laid out as in [`LabelConfusionModel::params`].
    pub fn from_tensors(gamma: f64, params: Vec<Tensor>) -> Self {
        LcmView { gamma, params }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    fn classes(&self) -> usize {
        self.params[0].shape()[0]
    }

    /// `Vec`, one row per class.
    pub fn label_representations(&self) -> Result<Tensor> {
        let p = &self.params;
        let ids: Vec<usize> = (0..self.classes()).collect();
        let emb = embedding_lookup(&p[0], &ids)?;
        let h = emb.matmul(&p[1])?.add(&p[2])?.relu();
        h.matmul(&p[3])?.add(&p[4])
    }

    /// Confusion vector for each row of `v` (`[B, d]`, or a single `[d]`).
    pub fn confusion_vector(&self, v: &Tensor) -> Result<Tensor> {
        let (rows, single) = as_rows(v)?;
        let labels = self.label_representations()?;
        if rows.shape()[1] != labels.shape()[1] {
            return Err(Error::shape(
                "confusion_vector",
                format!(
                    "v has width {}, label representations have {}",
                    rows.shape()[1],
                    labels.shape()[1]
                ),
            ));
        }
        let sims = rows.matmul(&labels.t()?)?;
        let c = sims
            .matmul(&self.params[5])?
            .add(&self.params[6])?
            .softmax(1)?;
        unrow(c, single)
    }

    /// `softmax(gamma * y + c)` per row. `y_onehot` must have the shape of the
    /// confusion vector and hold exactly one 1 per row.
    pub fn simulated_label_distribution(
        &self,
        v: &Tensor,
        y_onehot: &Tensor,
        model_index: usize,
    ) -> Result<SoftLabel> {
        let lcv = self.confusion_vector(v)?;
        if y_onehot.shape() != lcv.shape() {
            return Err(Error::shape(
                "simulated_label_distribution",
                format!(
                    "labels {:?} vs confusion vector {:?}",
                    y_onehot.shape(),
                    lcv.shape()
                ),
            ));
        }
        validate_one_hot(y_onehot.value())?;
        let axis = lcv.shape().len() - 1;
        let sld = y_onehot.scale(self.gamma).add(&lcv)?.softmax(axis)?;
        Ok(SoftLabel {
            sld,
            lcv,
            model_index,
        })
    }
}

/// Views a `[d]` vector as a one-row batch.
pub(crate) fn as_rows(t: &Tensor) -> Result<(Tensor, bool)> {
    match t.shape().len() {
        1 => Ok((t.reshape(&[1, t.shape()[0]])?, true)),
        2 => Ok((t.clone(), false)),
        _ => Err(Error::shape(
            "rows",
            format!("expected [B, K] or [K], got {:?}", t.shape()),
        )),
    }
}

pub(crate) fn unrow(t: Tensor, single: bool) -> Result<Tensor> {
    if single {
        let k = t.shape()[1];
        t.reshape(&[k])
    } else {
        Ok(t)
    }
}

fn validate_one_hot(y: &Array) -> Result<()> {
    let width = *y.shape().last().expect("rank checked by caller");
    for row in y.data().chunks(width) {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != width {
            return Err(Error::InvalidArgument(format!(
                "not a one-hot row: {row:?}"
            )));
        }
    }
    Ok(())
}

/// One-hot encoding of `labels`, shape `[B, classes]`.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Array> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        data[i * classes + y] = 1.0;
    }
    Array::new(vec![labels.len(), classes], data)
}

/// `KL(s || p) = sum_c s log(s / p)` over the last axis, with both
/// operands floored at [`PROB_FLOOR`] inside the logarithms. Gradients
/// flow into both arguments.
pub fn kl_divergence(s: &Tensor, p: &Tensor) -> Result<Tensor> {
    if s.shape() != p.shape() || s.shape().is_empty() {
        return Err(Error::shape(
            "kl_divergence",
            format!("{:?} vs {:?}", s.shape(), p.shape()),
        ));
    }
    let axis = s.shape().len() - 1;
    let log_ratio = s.log_clamped(PROB_FLOOR).sub(&p.log_clamped(PROB_FLOOR))?;
    s.mul(&log_ratio)?.sum(axis, false)
}

/// Per-example member loss: KL from the simulated label distribution to the
/// member's prediction.
pub fn kl_training_loss(sld: &Tensor, p: &Tensor) -> Result<Tensor> {
    kl_divergence(sld, p)
}
