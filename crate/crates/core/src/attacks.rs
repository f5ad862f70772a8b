//! L∞ attacks (FGSM, BIM, PGD, MIM) and the black-box transfer evaluation.
//!
//! Every attack maximizes a loss of the source model. Iterates are projected
//! onto the ε-ball around the clean input and then onto `[0, 1]`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lcm::{kl_divergence, one_hot, LabelConfusionModel, LcmView, PROB_FLOOR};
use crate::models::{ensemble_predict, Ensemble, ModelView};
use crate::seed::rng_for;
use crate::tensor::{backward, Array, Graph, Tensor};

/// Floor for the per-example L1 norm in MIM.
pub const L1_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttackFamily {
    Fgsm,
    Bim,
    Pgd,
    Mim,
}

impl AttackFamily {
    pub const ALL: [AttackFamily; 4] = [
        AttackFamily::Fgsm,
        AttackFamily::Bim,
        AttackFamily::Pgd,
        AttackFamily::Mim,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Bim => "bim",
            AttackFamily::Pgd => "pgd",
            AttackFamily::Mim => "mim",
        }
    }
}

impl fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for AttackFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackFamily::ALL
            .into_iter()
            .find(|f| f.tag() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown attack family `{s}` (expected fgsm, bim, pgd or mim)"
                ))
            })
    }
}

/// Loss maximized by the attack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackLoss {
    /// `-log p_y` of the ensemble-averaged prediction.
    CrossEntropy,
    /// Mean member KL from the simulated label distribution; needs a label confusion model.
    KlToSld,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub family: AttackFamily,
    pub epsilon: f64,
    pub iterations: usize,
    pub step_size: f64,
    pub momentum: f64,
    pub loss: AttackLoss,
    pub seed: u64,
}

impl AttackConfig {
    /// Defaults: 10 iterations of step ε/5, momentum 1, cross-entropy loss, seed 0.
    pub fn new(family: AttackFamily, epsilon: f64) -> Result<Self> {
        let cfg = AttackConfig {
            family,
            epsilon,
            iterations: 10,
            step_size: epsilon / 5.0,
            momentum: 1.0,
            loss: AttackLoss::CrossEntropy,
            seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.momentum >= 0.0 && self.momentum.is_finite()) {
            return Err(Error::Config(format!(
                "momentum must be >= 0, got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// A differentiable model the attacks can query.
pub trait AttackSource {
    /// Gradient of the summed per-example attack loss with respect to `x`.
    fn loss_gradient(&self, x: &Array, labels: &[usize]) -> Result<Array>;

    /// Hard predictions for `x`.
    fn predict_labels(&self, x: &Array) -> Result<Vec<usize>>;
}

/// An ensemble (optionally with its label confusion model) used as the attack source.
pub struct EnsembleTarget {
    members: Vec<ModelView>,
    lcm: Option<LcmView>,
    loss: AttackLoss,
}

impl EnsembleTarget {
    pub fn new(
        ensemble: &Ensemble,
        lcm: Option<&LabelConfusionModel>,
        loss: AttackLoss,
    ) -> Result<Self> {
        if loss == AttackLoss::KlToSld && lcm.is_none() {
            return Err(Error::InvalidArgument(
                "the KL-to-SLD attack loss needs a label confusion model".into(),
            ));
        }
        Ok(EnsembleTarget {
            members: ensemble.views(),
            lcm: lcm.map(|l| l.view()),
            loss,
        })
    }

    /// Per-batch attack loss (summed over examples) at `x`.
    pub fn loss(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let classes = self.members[0].params().last().map_or(0, |b| b.shape()[0]);
        let y = Tensor::constant(one_hot(labels, classes)?);
        match (self.loss, &self.lcm) {
            (AttackLoss::CrossEntropy, _) => {
                let p = ensemble_predict(&self.members, x)?;
                Ok(p.log_clamped(PROB_FLOOR).mul(&y)?.sum_all().neg())
            }
            (AttackLoss::KlToSld, Some(lcm)) => {
                let mut total: Option<Tensor> = None;
                for (i, m) in self.members.iter().enumerate() {
                    let v = m.encode(x)?;
                    let p = m.classify(&v)?;
                    let s = lcm.simulated_label_distribution(&v, &y, i)?.sld;
                    let kl = kl_divergence(&s, &p)?.sum_all();
                    total = Some(match total {
                        Some(t) => t.add(&kl)?,
                        None => kl,
                    });
                }
                let total = total.expect("ensembles are non-empty");
                Ok(total.scale(1.0 / self.members.len() as f64))
            }
            (AttackLoss::KlToSld, None) => unreachable!("checked in EnsembleTarget::new"),
        }
    }
}

impl AttackSource for EnsembleTarget {
    fn loss_gradient(&self, x: &Array, labels: &[usize]) -> Result<Array> {
        let graph = Graph::new();
        let xl = graph.leaf(x.clone());
        let loss = self.loss(&xl, labels)?;
        let g = backward(&loss, &[&xl], false)?;
        Ok(g[0].value().clone())
    }

    fn predict_labels(&self, x: &Array) -> Result<Vec<usize>> {
        Ok(
            ensemble_predict(&self.members, &Tensor::constant(x.clone()))?
                .value()
                .argmax_rows(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBatch {
    pub original: Array,
    pub adversarial: Array,
    pub labels: Vec<usize>,
    pub config: AttackConfig,
    /// `true` where the source model misclassifies the adversarial example.
    pub success: Vec<bool>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `x'` onto the ε-ball around `x`, then onto `[0, 1]`.
fn project(adv: &mut [f64], x: &[f64], eps: f64) {
    for (a, &o) in adv.iter_mut().zip(x) {
        *a = a.clamp(o - eps, o + eps).clamp(0.0, 1.0);
    }
}

fn check_inputs(x: &Array, labels: &[usize], cfg: &AttackConfig) -> Result<()> {
    cfg.validate()?;
    if x.rank() == 0 || x.shape()[0] != labels.len() {
        return Err(Error::shape(
            "attack",
            format!("{} labels for inputs {:?}", labels.len(), x.shape()),
        ));
    }
    Ok(())
}

fn finish(
    src: &dyn AttackSource,
    x: &Array,
    adv: Array,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    let pred = src.predict_labels(&adv)?;
    Ok(AdversarialBatch {
        original: x.clone(),
        success: pred.iter().zip(labels).map(|(p, y)| p != y).collect(),
        adversarial: adv,
        labels: labels.to_vec(),
        config: *cfg,
    })
}

/// `x' = clip01(x + ε sign(∇ℓ))`.
pub fn fgsm(
    src: &dyn AttackSource,
    x: &Array,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    check_inputs(x, labels, cfg)?;
    let g = src.loss_gradient(x, labels)?;
    let mut adv = x.clone();
    for (a, gi) in adv.data_mut().iter_mut().zip(g.data()) {
        *a = (*a + cfg.epsilon * sign(*gi)).clamp(0.0, 1.0);
    }
    finish(src, x, adv, labels, cfg)
}

/// Iterates of signed-gradient ascent from `start`; `momentum` enables the
/// MIM accumulator. Returns every iterate, starting point included.
fn iterate(
    src: &dyn AttackSource,
    x: &Array,
    labels: &[usize],
    cfg: &AttackConfig,
    start: Array,
    momentum: Option<f64>,
) -> Result<Vec<Array>> {
    let per_example = x.data().len() / labels.len().max(1);
    let mut acc = vec![0.0; x.data().len()];
    let mut cur = start;
    let mut out = Vec::with_capacity(cfg.iterations + 1);
    out.push(cur.clone());
    for _ in 0..cfg.iterations {
        let g = src.loss_gradient(&cur, labels)?;
        let dir: &[f64] = match momentum {
            None => g.data(),
            Some(mu) => {
                for (a_row, g_row) in acc
                    .chunks_mut(per_example)
                    .zip(g.data().chunks(per_example))
                {
                    let l1 = g_row.iter().map(|v| v.abs()).sum::<f64>().max(L1_FLOOR);
                    for (a, gi) in a_row.iter_mut().zip(g_row) {
                        *a = mu * *a + gi / l1;
                    }
                }
                &acc
            }
        };
        let mut next = cur.clone();
        for (a, d) in next.data_mut().iter_mut().zip(dir) {
            *a += cfg.step_size * sign(*d);
        }
        project(next.data_mut(), x.data(), cfg.epsilon);
        out.push(next.clone());
        cur = next;
    }
    Ok(out)
}

/// Uniform start in the ε-ball, clipped to `[0, 1]`.
pub fn pgd_start(x: &Array, cfg: &AttackConfig) -> Array {
    let mut rng = rng_for(cfg.seed, "pgd-init");
    let data = x
        .data()
        .iter()
        .map(|v| (v + rng.random_range(-cfg.epsilon..=cfg.epsilon)).clamp(0.0, 1.0))
        .collect();
    Array::new(x.shape().to_vec(), data).expect("same shape as x")
}

/// All iterates `x'_0 .. x'_r` of an iterative family; FGSM yields `[x, x']`.
pub fn trajectory(
    src: &dyn AttackSource,
    x: &Array,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<Array>> {
    check_inputs(x, labels, cfg)?;
    match cfg.family {
        AttackFamily::Fgsm => Ok(vec![x.clone(), fgsm(src, x, labels, cfg)?.adversarial]),
        AttackFamily::Bim => iterate(src, x, labels, cfg, x.clone(), None),
        AttackFamily::Pgd => iterate(src, x, labels, cfg, pgd_start(x, cfg), None),
        AttackFamily::Mim => iterate(src, x, labels, cfg, x.clone(), Some(cfg.momentum)),
    }
}

fn last_iterate(traj: Vec<Array>) -> Array {
    traj.into_iter()
        .last()
        .expect("trajectory holds the start point")
}

/// Iterated FGSM with projection after every step.
pub fn bim(
    src: &dyn AttackSource,
    x: &Array,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    check_inputs(x, labels, cfg)?;
    let adv = last_iterate(iterate(src, x, labels, cfg, x.clone(), None)?);
    finish(src, x, adv, labels, cfg)
}

/// BIM from a seeded uniform point in the ε-ball.
pub fn pgd(
    src: &dyn AttackSource,
    x: &Array,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    pgd_from(src, x, labels, cfg, pgd_start(x, cfg))
}

/// BIM from an explicit start point (projected first).
pub fn pgd_from(
    src: &dyn AttackSource,
    x: &Array,
    labels: &[usize],
    cfg: &AttackConfig,
    mut start: Array,
) -> Result<AdversarialBatch> {
    check_inputs(x, labels, cfg)?;
    if start.shape() != x.shape() {
        return Err(Error::shape(
            "pgd_from",
            format!("start {:?} vs input {:?}", start.shape(), x.shape()),
        ));
    }
    project(start.data_mut(), x.data(), cfg.epsilon);
    let adv = last_iterate(iterate(src, x, labels, cfg, start, None)?);
    finish(src, x, adv, labels, cfg)
}

/// Momentum iterative attack: `g_i = μ g_{i-1} + ∇ℓ / ‖∇ℓ‖₁` per example.
pub fn mim(
    src: &dyn AttackSource,
    x: &Array,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    check_inputs(x, labels, cfg)?;
    let adv = last_iterate(iterate(src, x, labels, cfg, x.clone(), Some(cfg.momentum))?);
    finish(src, x, adv, labels, cfg)
}

/// Dispatches on `cfg.family`.
pub fn attack(
    src: &dyn AttackSource,
    x: &Array,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    match cfg.family {
        AttackFamily::Fgsm => fgsm(src, x, labels, cfg),
        AttackFamily::Bim => bim(src, x, labels, cfg),
        AttackFamily::Pgd => pgd(src, x, labels, cfg),
        AttackFamily::Mim => mim(src, x, labels, cfg),
    }
}

/// One cell of a transfer table. Accuracies are percentages.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferRow {
    pub dataset: String,
    /// Attack family tag, or `clean` for the unattacked row.
    pub family: String,
    pub epsilon: f64,
    pub n_examples: usize,
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
}

impl TransferRow {
    pub const HEADER: [&'static str; 6] = [
        "dataset",
        "family",
        "epsilon",
        "n_examples",
        "clean_accuracy",
        "adversarial_accuracy",
    ];
}

/// Examples per attack job.
pub const EVAL_CHUNK: usize = 250;

fn percent(correct: usize, n: usize) -> f64 {
    100.0 * correct as f64 / n as f64
}

/// Crafts adversarial examples against `surrogate` and scores `target` on
/// them. The first row is the clean accuracy (`family = clean`, `epsilon = 0`),
/// followed by one row per config in order. Jobs run in parallel.
pub fn blackbox_transfer_eval(
    target: &Ensemble,
    surrogate: &Ensemble,
    dataset: &Dataset,
    dataset_name: &str,
    configs: &[AttackConfig],
) -> Result<Vec<TransferRow>> {
    if target.classes() != surrogate.classes() {
        return Err(Error::InvalidArgument(format!(
            "target has {} classes, surrogate {}",
            target.classes(),
            surrogate.classes()
        )));
    }
    if target.classes() != dataset.classes() {
        return Err(Error::InvalidArgument(
            "dataset and target disagree on the class count".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    for c in configs {
        c.validate()?;
    }
    let n = dataset.len();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(EVAL_CHUNK)
        .map(|s| (s, EVAL_CHUNK.min(n - s)))
        .collect();
    let correct_on = |x: &Array, labels: &[usize]| -> Result<usize> {
        let pred = target.predict_labels(x)?;
        Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count())
    };
    let clean = correct_on(dataset.images(), dataset.labels())?;
    let jobs: Vec<(usize, usize, usize)> = (0..configs.len())
        .flat_map(|c| chunks.iter().map(move |&(s, len)| (c, s, len)))
        .collect();
    let counts = jobs
        .par_iter()
        .map(|&(c, start, len)| -> Result<(usize, usize)> {
            let part = dataset.range(start, len)?;
            // Only the surrogate is visible to the attack.
            let src = EnsembleTarget::new(surrogate, None, AttackLoss::CrossEntropy)?;
            let cfg = AttackConfig {
                seed: crate::seed::derive_seed(configs[c].seed, &format!("chunk-{start}")),
                ..configs[c]
            };
            let adv = attack(&src, part.images(), part.labels(), &cfg)?;
            Ok((c, correct_on(&adv.adversarial, part.labels())?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_config = vec![0usize; configs.len()];
    for (c, k) in counts {
        per_config[c] += k;
    }
    let clean_acc = percent(clean, n);
    let mut rows = vec![TransferRow {
        dataset: dataset_name.to_string(),
        family: "clean".into(),
        epsilon: 0.0,
        n_examples: n,
        clean_accuracy: clean_acc,
        adversarial_accuracy: clean_acc,
    }];
    for (cfg, k) in configs.iter().zip(per_config) {
        rows.push(TransferRow {
            dataset: dataset_name.to_string(),
            family: cfg.family.to_string(),
            epsilon: cfg.epsilon,
            n_examples: n,
            clean_accuracy: clean_acc,
            adversarial_accuracy: percent(k, n),
        });
    }
    Ok(rows)
}

pub fn write_results_csv(path: &Path, rows: &[TransferRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TransferRow::HEADER)?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.family.clone(),
            r.epsilon.to_string(),
            r.n_examples.to_string(),
            format!("{:.4}", r.clean_accuracy),
            format!("{:.4}", r.adversarial_accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<TransferRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != TransferRow::HEADER {
        return Err(Error::format(
            "results csv",
            format!(
                "{}: header {header:?} does not match {:?}",
                path.display(),
                TransferRow::HEADER
            ),
        ));
    }
    let bad = |what: &str, line: usize| {
        Error::format(
            "results csv",
            format!("{}:{line}: bad {what}", path.display()),
        )
    };
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let num = |k: usize, what: &str| rec[k].parse::<f64>().map_err(|_| bad(what, line));
        rows.push(TransferRow {
            dataset: rec[0].to_string(),
            family: rec[1].to_string(),
            epsilon: num(2, "epsilon")?,
            n_examples: rec[3].parse().map_err(|_| bad("n_examples", line))?,
            clean_accuracy: num(4, "clean_accuracy")?,
            adversarial_accuracy: num(5, "adversarial_accuracy")?,
        });
    }
    Ok(rows)
}
