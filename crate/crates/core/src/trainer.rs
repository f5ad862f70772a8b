//! Joint mini-batch training of the ensemble and the label confusion model
//! with Adam, a step learning-rate schedule and per-step loss logging.
//!
//! # Config keys
//!
//! INI-style `key = value`. Sections are optional and only group keys; every
//! key must be unique across the file. Unknown keys are rejected.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `dataset` | `mnist` | `mnist`, `fashion-mnist` or `cifar10` |
//! | `data_dir` | `data/mnist` | directory holding the dataset files |
//! | `train_size` | 10000 | leading training examples used |
//! | `eval_size` | 2000 | leading test examples used for evaluation |
//! | `arch` | `mlp` | `mlp` or `cnn-small` |
//! | `members` | 3 | ensemble size N |
//! | `repr_dim` | 64 | representation width d |
//! | `objective` | `cldl` | `cldl` (KL to simulated labels plus diversity) or `cross-entropy` |
//! | `gamma`, `alpha`, `beta` | 3, 2, 1 | soft-label and diversity weights |
//! | `epochs` | 20 | |
//! | `batch_size` | 128 | |
//! | `lr_members`, `lr_lcm` | 0.001 | Adam learning rates |
//! | `weight_decay` | 0.0001 | decoupled, applied as `lr * wd * param` |
//! | `lr_drop_epochs` | `10,15` | epochs (1-based) at which the rate is multiplied by `lr_drop_factor` |
//! | `lr_drop_factor` | 0.1 | |
//! | `seed` | 0 | root seed |

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{subset_shuffle_batch, Batch, Batches, Dataset};
use crate::diversity::{total_loss, DiversityWeights, EnsembleLossReport, LossRow};
use crate::error::{Error, Result};
use crate::lcm::{one_hot, LabelConfusionModel, PROB_FLOOR};
use crate::models::{Architecture, Ensemble, ModelView, Param};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::{backward, Array, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// KL to the simulated label distribution, minus `alpha * l_ld`, plus `beta * l_gd`.
    Cldl,
    /// Mean member cross-entropy against one-hot labels, no label confusion model.
    CrossEntropy,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cldl" => Ok(Objective::Cldl),
            "cross-entropy" => Ok(Objective::CrossEntropy),
            other => Err(Error::Config(format!(
                "unknown objective `{other}` (expected cldl or cross-entropy)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dataset: String,
    pub data_dir: PathBuf,
    pub train_size: usize,
    pub eval_size: usize,
    pub arch: Architecture,
    pub members: usize,
    pub repr_dim: usize,
    pub objective: Objective,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_members: f64,
    pub lr_lcm: f64,
    pub weight_decay: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: "mnist".into(),
            data_dir: PathBuf::from("data/mnist"),
            train_size: 10_000,
            eval_size: 2_000,
            arch: Architecture::Mlp,
            members: 3,
            repr_dim: 64,
            objective: Objective::Cldl,
            gamma: 3.0,
            alpha: 2.0,
            beta: 1.0,
            epochs: 20,
            batch_size: 128,
            lr_members: 1e-3,
            lr_lcm: 1e-3,
            weight_decay: 1e-4,
            lr_drop_epochs: vec![10, 15],
            lr_drop_factor: 0.1,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl TrainConfig {
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = ini::Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (_, props) in &ini {
            for (key, value) in props.iter() {
                if !seen.insert(key.to_string()) {
                    return Err(Error::Config(format!("key `{key}` given more than once")));
                }
                cfg.set(key, value.trim())?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_ini_str(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = v.to_string(),
            "data_dir" => self.data_dir = PathBuf::from(v),
            "train_size" => self.train_size = parse(key, v)?,
            "eval_size" => self.eval_size = parse(key, v)?,
            "arch" => self.arch = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "members" => self.members = parse(key, v)?,
            "repr_dim" => self.repr_dim = parse(key, v)?,
            "objective" => self.objective = v.parse()?,
            "gamma" => self.gamma = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr_members" => self.lr_members = parse(key, v)?,
            "lr_lcm" => self.lr_lcm = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "lr_drop_epochs" => {
                self.lr_drop_epochs = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "lr_drop_factor" => self.lr_drop_factor = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 || self.members == 0 || self.repr_dim == 0 {
            return fail("epochs, batch_size, members and repr_dim must be at least 1".into());
        }
        if self.train_size == 0 || self.eval_size == 0 {
            return fail("train_size and eval_size must be at least 1".into());
        }
        for (name, v) in [("lr_members", self.lr_members), ("lr_lcm", self.lr_lcm)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return fail(format!(
                "lr_drop_factor must lie in (0, 1], got {}",
                self.lr_drop_factor
            ));
        }
        if self.lr_drop_epochs.contains(&0) {
            return fail("lr_drop_epochs are 1-based".into());
        }
        if self.objective == Objective::CrossEntropy && (self.alpha > 0.0 || self.beta > 0.0) {
            return fail("alpha and beta apply to the cldl objective only; set them to 0".into());
        }
        Ok(())
    }

    pub fn weights(&self) -> DiversityWeights {
        DiversityWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

/// `base * factor^(number of drop epochs <= epoch)`.
pub fn lr_schedule(epoch: usize, base: f64, drop_epochs: &[usize], factor: f64) -> f64 {
    let drops = drop_epochs.iter().filter(|&&d| d <= epoch).count();
    base * factor.powi(drops as i32)
}

/// First and second moment estimates for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Array::zeros(p.value.shape()))
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with decoupled weight decay:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
pub fn adam_step(
    params: &mut [Param],
    grads: &[&Array],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.value.shape() != g.shape() || p.value.shape() != m.shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{}: param {:?}, grad {:?}, moment {:?}",
                    p.name,
                    p.value.shape(),
                    g.shape(),
                    m.shape()
                ),
            ));
        }
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w -= lr * (mh / (vh.sqrt() + eps) + weight_decay * *w);
        }
    }
    Ok(())
}

/// Root-seed split for the shuffle of a given (1-based) epoch.
pub fn epoch_seed(root: u64, epoch: usize) -> u64 {
    derive_seed(root, &format!("epoch-{epoch}"))
}

/// Mean member cross-entropy against one-hot labels.
pub fn cross_entropy_loss(
    members: &[ModelView],
    images: &Array,
    labels: &[usize],
) -> Result<EnsembleLossReport> {
    if members.is_empty() {
        return Err(Error::InvalidArgument(
            "cross-entropy on an empty ensemble".into(),
        ));
    }
    let x = Tensor::constant(images.clone());
    let mut per_model = Vec::with_capacity(members.len());
    let mut classes = None;
    for m in members {
        let p = m.predict(&x)?;
        let c = *classes.get_or_insert(p.shape()[1]);
        let y = Tensor::constant(one_hot(labels, c)?);
        per_model.push(
            p.log_clamped(PROB_FLOOR)
                .mul(&y)?
                .sum(1, false)?
                .mean_all()
                .neg(),
        );
    }
    let mut mean = per_model[0].clone();
    for t in &per_model[1..] {
        mean = mean.add(t)?;
    }
    let mean = mean.scale(1.0 / members.len() as f64);
    Ok(EnsembleLossReport {
        per_model_kl: per_model,
        total: mean.clone(),
        mean_kl: mean,
        label_diversity: Tensor::scalar(0.0),
        gradient_alignment: Tensor::scalar(0.0),
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub ensemble: Ensemble,
    pub lcm: Option<LabelConfusionModel>,
    pub log: Vec<LossRow>,
}

/// Training state. [`train`] drives it over all epochs; the pieces are
/// public so callers can step manually.
pub struct Trainer {
    config: TrainConfig,
    data: Dataset,
    ensemble: Ensemble,
    lcm: Option<LabelConfusionModel>,
    adam_members: Vec<AdamState>,
    adam_lcm: Option<AdamState>,
    log: Vec<LossRow>,
    step: usize,
}

impl Trainer {
    /// Seeded initialization on the first `train_size` examples of `dataset`.
    pub fn new(config: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let input = dataset.input_shape();
        let classes = dataset.classes();
        let ensemble = Ensemble::init(
            config.members,
            config.arch,
            input,
            config.repr_dim,
            classes,
            &mut rng_for(config.seed, "members"),
        )?;
        let lcm = match config.objective {
            Objective::Cldl => Some(LabelConfusionModel::new(
                classes,
                config.repr_dim,
                config.gamma,
                &mut rng_for(config.seed, "lcm"),
            )?),
            Objective::CrossEntropy => None,
        };
        Self::with_state(config, dataset, ensemble, lcm)
    }

    /// Starts from given parameters instead of a fresh initialization.
    pub fn with_state(
        config: &TrainConfig,
        dataset: &Dataset,
        ensemble: Ensemble,
        lcm: Option<LabelConfusionModel>,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.len() < config.train_size {
            return Err(Error::Config(format!(
                "train_size {} exceeds the {} available examples",
                config.train_size,
                dataset.len()
            )));
        }
        if ensemble.classes() != dataset.classes() {
            return Err(Error::InvalidArgument(
                "ensemble and dataset disagree on the class count".into(),
            ));
        }
        if (config.objective == Objective::Cldl) != lcm.is_some() {
            return Err(Error::InvalidArgument(
                "the cldl objective needs a label confusion model and cross-entropy must not have one".into(),
            ));
        }
        let data = dataset.subset(config.train_size)?;
        Ok(Trainer {
            adam_members: ensemble
                .members()
                .iter()
                .map(|m| AdamState::new(m.params()))
                .collect(),
            adam_lcm: lcm.as_ref().map(|l| AdamState::new(l.params())),
            config: config.clone(),
            data,
            ensemble,
            lcm,
            log: Vec::new(),
            step: 0,
        })
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.ensemble
    }

    pub fn lcm(&self) -> Option<&LabelConfusionModel> {
        self.lcm.as_ref()
    }

    pub fn log(&self) -> &[LossRow] {
        &self.log
    }

    /// Shuffled mini-batches for a 1-based epoch.
    pub fn epoch_batches(&self, epoch: usize) -> Result<Batches<'_>> {
        subset_shuffle_batch(
            &self.data,
            self.data.len(),
            epoch_seed(self.config.seed, epoch),
            self.config.batch_size,
        )
    }

    /// Loss report for a batch at the current parameters, built on `graph`.
    fn report(
        &self,
        graph: &Graph,
        batch: &Batch,
    ) -> Result<(
        EnsembleLossReport,
        Vec<ModelView>,
        Option<crate::lcm::LcmView>,
    )> {
        let views = self.ensemble.bind(graph);
        match &self.lcm {
            Some(lcm) => {
                let lv = lcm.bind(graph);
                let rep = total_loss(
                    graph,
                    &views,
                    &lv,
                    &batch.images,
                    &batch.labels,
                    self.config.weights(),
                )?;
                Ok((rep, views, Some(lv)))
            }
            None => Ok((
                cross_entropy_loss(&views, &batch.images, &batch.labels)?,
                views,
                None,
            )),
        }
    }

    /// One optimizer step on `batch`; returns the logged row.
    pub fn train_step(&mut self, epoch: usize, batch: &Batch) -> Result<LossRow> {
        self.step += 1;
        let step = self.step;
        let abort = |component: String| Error::NumericalAbort {
            epoch,
            step,
            component,
        };

        let graph = Graph::new();
        let (rep, views, lcm_view) = self.report(&graph, batch)?;
        for (i, kl) in rep.per_model_kl.iter().enumerate() {
            if !kl.item().is_finite() {
                return Err(abort(format!("member {i} loss")));
            }
        }
        if !rep.label_diversity.item().is_finite() {
            return Err(abort("label diversity l_ld".into()));
        }
        if !rep.gradient_alignment.item().is_finite() {
            return Err(abort("gradient alignment l_gd".into()));
        }
        if !rep.total.item().is_finite() {
            return Err(abort("total loss".into()));
        }

        let mut leaves: Vec<&Tensor> = views.iter().flat_map(|v| v.params()).collect();
        if let Some(lv) = &lcm_view {
            leaves.extend(lv.params());
        }
        let grads = backward(&rep.total, &leaves, false)?;
        let mut k = 0;
        let lr_m = lr_schedule(
            epoch,
            self.config.lr_members,
            &self.config.lr_drop_epochs,
            self.config.lr_drop_factor,
        );
        let lr_l = lr_schedule(
            epoch,
            self.config.lr_lcm,
            &self.config.lr_drop_epochs,
            self.config.lr_drop_factor,
        );
        let wd = self.config.weight_decay;
        for (i, (member, state)) in self
            .ensemble
            .members_mut()
            .iter_mut()
            .zip(&mut self.adam_members)
            .enumerate()
        {
            let n = member.params().len();
            let g: Vec<&Array> = (k..k + n).map(|j| grads[j].value()).collect();
            if let Some(bad) = g
                .iter()
                .position(|a| a.data().iter().any(|v| !v.is_finite()))
            {
                return Err(abort(format!(
                    "gradient of member {i} parameter {}",
                    member.params()[bad].name
                )));
            }
            adam_step(member.params_mut(), &g, state, lr_m, wd)?;
            k += n;
        }
        if let (Some(lcm), Some(state)) = (&mut self.lcm, &mut self.adam_lcm) {
            let n = lcm.params().len();
            let g: Vec<&Array> = (k..k + n).map(|j| grads[j].value()).collect();
            if let Some(bad) = g
                .iter()
                .position(|a| a.data().iter().any(|v| !v.is_finite()))
            {
                return Err(abort(format!(
                    "gradient of LCM parameter {}",
                    lcm.params()[bad].name
                )));
            }
            adam_step(lcm.params_mut(), &g, state, lr_l, wd)?;
        }
        let row = rep.row(epoch, step);
        self.log.push(row);
        Ok(row)
    }

    pub fn run_epoch(&mut self, epoch: usize) -> Result<()> {
        let batches: Vec<Batch> = self.epoch_batches(epoch)?.collect();
        for batch in &batches {
            self.train_step(epoch, batch)?;
        }
        log::debug!(
            "epoch {epoch}: last total {:.5}",
            self.log.last().map_or(f64::NAN, |r| r.total)
        );
        Ok(())
    }

    pub fn finish(self) -> TrainOutput {
        TrainOutput {
            ensemble: self.ensemble,
            lcm: self.lcm,
            log: self.log,
        }
    }
}

/// Full training run: `epochs` passes of shuffled mini-batches.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(config, dataset)?;
    for epoch in 1..=config.epochs {
        trainer.run_epoch(epoch)?;
    }
    Ok(trainer.finish())
}

/// Writes the log as CSV with columns `epoch, step, mean_kl, l_ld, l_gd, total`.
pub fn write_log_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LossRow::HEADER)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            r.mean_kl.to_string(),
            r.l_ld.to_string(),
            r.l_gd.to_string(),
            r.total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
