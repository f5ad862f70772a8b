//! Diversity terms and the combined ensemble objective.
//!
//! * `l_ld`: log of the mean over member pairs of `exp(JSD)` between
//!   truncated simulated label distributions (true class removed,
//!   renormalized). Maximized.
//! * `l_gd`: mean over member pairs of `|cos|` between input gradients of
//!   the member losses. Minimized.
//!
//! Per example: `total = mean_i KL_i - alpha * l_ld + beta * l_gd`; the batch
//! loss is the mean over examples.

use crate::error::{Error, Result};
use crate::lcm::{as_rows, kl_divergence, kl_training_loss, one_hot, unrow, LcmView, PROB_FLOOR};
use crate::models::ModelView;
use crate::tensor::{backward, Array, Graph, Tensor};

/// Floor on gradient norms in the cosine.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiversityWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl DiversityWeights {
    pub const NONE: DiversityWeights = DiversityWeights {
        alpha: 0.0,
        beta: 0.0,
    };

    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(DiversityWeights { alpha, beta })
    }
}

/// Drops entry `y[b]` from row `b` of `s` and rescales each row to sum to one.
/// `s` is `[B, C]` (or `[C]` with a single label).
pub fn truncate_sld(s: &Tensor, y: &[usize]) -> Result<Tensor> {
    let (rows, single) = as_rows(s)?;
    let (b, c) = (rows.shape()[0], rows.shape()[1]);
    if c < 2 {
        return Err(Error::InvalidArgument(
            "truncation needs at least two classes".into(),
        ));
    }
    if y.len() != b {
        return Err(Error::shape(
            "truncate_sld",
            format!("{} labels for {b} rows", y.len()),
        ));
    }
    let mut index = Vec::with_capacity(b * (c - 1));
    for (r, &label) in y.iter().enumerate() {
        if label >= c {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        index.extend((0..c).filter(|&k| k != label).map(|k| r * c + k));
    }
    let kept = rows.gather(index.into(), &[b, c - 1])?;
    let total = kept.sum(1, true)?.clamp_min(PROB_FLOOR);
    unrow(kept.div(&total)?, single)
}

/// Jensen-Shannon divergence over the last axis (natural log), one value per row.
pub fn jsd(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    if p.shape() != q.shape() {
        return Err(Error::shape(
            "jsd",
            format!("{:?} vs {:?}", p.shape(), q.shape()),
        ));
    }
    let m = p.add(q)?.scale(0.5);
    kl_divergence(p, &m)?
        .scale(0.5)
        .add(&kl_divergence(q, &m)?.scale(0.5))
}

fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

fn mean_over_pairs(terms: Vec<Tensor>) -> Result<Tensor> {
    let count = terms.len() as f64;
    let mut it = terms.into_iter();
    let mut acc = it.next().expect("at least one pair");
    for t in it {
        acc = acc.add(&t)?;
    }
    Ok(acc.scale(1.0 / count))
}

/// `log(mean_{i<j} exp(JSD(s_i, s_j)))` per row, for N >= 2 truncated SLDs.
pub fn label_diversity_loss(slds: &[Tensor]) -> Result<Tensor> {
    if slds.len() < 2 {
        return Err(Error::InvalidArgument(
            "label diversity needs at least two members".into(),
        ));
    }
    let terms = pairs(slds.len())
        .map(|(i, j)| Ok(jsd(&slds[i], &slds[j])?.exp()))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_over_pairs(terms)?.log())
}

/// Mean over member pairs of `|cos(g_i, g_j)|`, per example. Each gradient is
/// `[B, ...]` and is flattened per example; norms are floored at
/// [`NORM_FLOOR`].
pub fn gradient_alignment_loss(grads: &[Tensor]) -> Result<Tensor> {
    if grads.len() < 2 {
        return Err(Error::InvalidArgument(
            "gradient alignment needs at least two members".into(),
        ));
    }
    let shape = grads[0].shape().to_vec();
    if shape.is_empty() || grads.iter().any(|g| g.shape() != shape.as_slice()) {
        return Err(Error::shape(
            "gradient_alignment_loss",
            "gradients must share a batched shape",
        ));
    }
    let b = shape[0];
    let width: usize = shape[1..].iter().product();
    let flat = grads
        .iter()
        .map(|g| g.reshape(&[b, width]))
        .collect::<Result<Vec<_>>>()?;
    let norms = flat
        .iter()
        .map(|g| {
            let sq = g.mul(g)?.sum(1, false)?;
            if sq.data().iter().any(|&v| v < NORM_FLOOR * NORM_FLOOR) {
                log::warn!(
                    "input gradient with norm below {NORM_FLOOR}; its alignment is treated as zero"
                );
            }
            // Flooring the squared norm keeps sqrt away from its singularity at zero.
            Ok(sq.clamp_min(NORM_FLOOR * NORM_FLOOR).sqrt())
        })
        .collect::<Result<Vec<_>>>()?;
    let terms = pairs(flat.len())
        .map(|(i, j)| {
            let dot = flat[i].mul(&flat[j])?.sum(1, false)?;
            Ok(dot.div(&norms[i].mul(&norms[j])?)?.abs())
        })
        .collect::<Result<Vec<_>>>()?;
    mean_over_pairs(terms)
}

/// All components of the objective for one batch. Every field stays attached
/// to the graph it was built on.
#[derive(Clone, Debug)]
pub struct EnsembleLossReport {
    /// Batch-mean KL of each member.
    pub per_model_kl: Vec<Tensor>,
    pub mean_kl: Tensor,
    pub label_diversity: Tensor,
    pub gradient_alignment: Tensor,
    pub total: Tensor,
}

/// One CSV log row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub mean_kl: f64,
    pub l_ld: f64,
    pub l_gd: f64,
    pub total: f64,
}

impl LossRow {
    pub const HEADER: [&'static str; 6] = ["epoch", "step", "mean_kl", "l_ld", "l_gd", "total"];
}

impl EnsembleLossReport {
    pub fn row(&self, epoch: usize, step: usize) -> LossRow {
        LossRow {
            epoch,
            step,
            mean_kl: self.mean_kl.item(),
            l_ld: self.label_diversity.item(),
            l_gd: self.gradient_alignment.item(),
            total: self.total.item(),
        }
    }
}

/// Builds the full objective on `graph` for a batch.
///
/// `members` and `lcm` are usually bound to `graph`; constant views give a
/// value-only evaluation. The input batch becomes a leaf of `graph` so the
/// member input gradients can be formed; they are kept differentiable only
/// when `beta > 0`. With a single member both diversity terms are zero.
pub fn total_loss(
    graph: &Graph,
    members: &[ModelView],
    lcm: &LcmView,
    images: &Array,
    labels: &[usize],
    weights: DiversityWeights,
) -> Result<EnsembleLossReport> {
    if members.is_empty() {
        return Err(Error::InvalidArgument(
            "total_loss on an empty ensemble".into(),
        ));
    }
    let b = images.shape().first().copied().unwrap_or(0);
    if b == 0 || labels.len() != b {
        return Err(Error::InvalidArgument(format!(
            "batch has {b} images and {} labels",
            labels.len()
        )));
    }
    let diverse = members.len() >= 2;
    let x = if diverse {
        graph.leaf(images.clone())
    } else {
        Tensor::constant(images.clone())
    };
    let classes = lcm.params()[0].shape()[0];
    let y = Tensor::constant(one_hot(labels, classes)?);

    let mut per_example = Vec::with_capacity(members.len());
    let mut truncated = Vec::with_capacity(members.len());
    for (i, m) in members.iter().enumerate() {
        let v = m.encode(&x)?;
        let p = m.classify(&v)?;
        let soft = lcm.simulated_label_distribution(&v, &y, i)?;
        per_example.push(kl_training_loss(&soft.sld, &p)?);
        if diverse {
            truncated.push(truncate_sld(&soft.sld, labels)?);
        }
    }

    let per_model_kl: Vec<Tensor> = per_example.iter().map(Tensor::mean_all).collect();
    let mut mean_kl = per_model_kl[0].clone();
    for t in &per_model_kl[1..] {
        mean_kl = mean_kl.add(t)?;
    }
    let mean_kl = mean_kl.scale(1.0 / members.len() as f64);

    let (label_diversity, gradient_alignment) = if diverse {
        let ld = label_diversity_loss(&truncated)?.mean_all();
        let create_graph = weights.beta > 0.0;
        let grads = per_example
            .iter()
            .map(|l| {
                Ok(backward(&l.sum_all(), &[&x], create_graph)?
                    .into_vec()
                    .remove(0))
            })
            .collect::<Result<Vec<_>>>()?;
        (ld, gradient_alignment_loss(&grads)?.mean_all())
    } else {
        (Tensor::scalar(0.0), Tensor::scalar(0.0))
    };

    let total = mean_kl
        .sub(&label_diversity.scale(weights.alpha))?
        .add(&gradient_alignment.scale(weights.beta))?;
    Ok(EnsembleLossReport {
        per_model_kl,
        mean_kl,
        label_diversity,
        gradient_alignment,
        total,
    })
}

/// Held-out diversity measurements for a trained ensemble.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiversityProbe {
    /// Mean over pairs and examples of the truncated-SLD JSD.
    pub mean_jsd: f64,
    /// Mean over pairs and examples of `|cos|` between member input gradients.
    pub mean_abs_cos: f64,
}

pub fn diversity_probe(
    members: &[ModelView],
    lcm: &LcmView,
    images: &Array,
    labels: &[usize],
) -> Result<DiversityProbe> {
    if members.len() < 2 {
        return Err(Error::InvalidArgument(
            "diversity probe needs at least two members".into(),
        ));
    }
    let graph = Graph::new();
    let x = graph.leaf(images.clone());
    let classes = lcm.params()[0].shape()[0];
    let y = Tensor::constant(one_hot(labels, classes)?);
    let mut truncated = Vec::new();
    let mut grads = Vec::new();
    for (i, m) in members.iter().enumerate() {
        let v = m.encode(&x)?;
        let p = m.classify(&v)?;
        let soft = lcm.simulated_label_distribution(&v, &y, i)?;
        let loss = kl_training_loss(&soft.sld, &p)?.sum_all();
        grads.push(backward(&loss, &[&x], false)?.into_vec().remove(0));
        truncated.push(truncate_sld(&soft.sld.detach(), labels)?);
    }
    let jsds = pairs(members.len())
        .map(|(i, j)| jsd(&truncated[i], &truncated[j]))
        .collect::<Result<Vec<_>>>()?;
    Ok(DiversityProbe {
        mean_jsd: mean_over_pairs(jsds)?.mean_all().item(),
        mean_abs_cos: gradient_alignment_loss(&grads)?.mean_all().item(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>) -> Tensor {
        Tensor::constant(Array::vector(v))
    }

    #[test]
    fn truncation_renormalizes() {
        let out = truncate_sld(&t(vec![0.7, 0.2, 0.1]), &[0]).unwrap();
        assert!((out.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((out.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(truncate_sld(&t(vec![1.0]), &[0]).is_err());
    }

    #[test]
    fn jsd_of_disjoint_point_masses() {
        let v = jsd(&t(vec![1.0, 0.0]), &t(vec![0.0, 1.0])).unwrap().item();
        assert!((v - 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn alignment_of_orthogonal_and_opposite_gradients() {
        let g = |v: Vec<f64>| Tensor::constant(Array::new(vec![1, 2], v).unwrap());
        let orth = gradient_alignment_loss(&[g(vec![1.0, 0.0]), g(vec![0.0, 1.0])]).unwrap();
        assert_eq!(orth.item(), 0.0);
        let anti = gradient_alignment_loss(&[g(vec![1.0, -2.0]), g(vec![-1.0, 2.0])]).unwrap();
        assert!((anti.item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weights_must_be_nonnegative() {
        assert!(DiversityWeights::new(-1.0, 0.0).is_err());
        assert!(DiversityWeights::new(0.0, f64::NAN).is_err());
    }
}
