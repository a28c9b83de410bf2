//! Learning example weights by minimizing the entropic transport cost between
//! the weighted training batch and a balanced meta distribution.
//!
//! Weights are kept as logits `u`, one per training example; the weights of
//! a mini-batch are `softmax(u[batch])`, so every update keeps them on the
//! probability simplex. A weight update is a gradient step on the logits
//! using the source-marginal gradient from [`crate::ot`], pulled back through
//! the softmax Jacobian. [`weightnet`] provides the amortized alternative in
//! which a small network maps features to weights.

pub mod toy;
pub mod weightnet;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::cost::{build_cost, CostConfig, FeatureBatch, LabelBatch};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{extract_features, lookahead, train_step, ModelParams, Sgd};
use crate::ot::{grad_ot_wrt_source, Marginal, SinkhornConfig};

pub use weightnet::{
    load_weight_net, save_weight_net, weight_net_backward, weight_net_forward, weight_net_update, Reduction, WeightNetParams,
    WeightNetVariant,
};

/// Numerically stable softmax.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Whether batch logits persist across iterations or restart from zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightMode {
    Maintained,
    Scratch,
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::Maintained => "maintained",
            WeightMode::Scratch => "scratch",
        })
    }
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maintained" => Ok(WeightMode::Maintained),
            "scratch" => Ok(WeightMode::Scratch),
            other => Err(Error::config(format!("unknown weights mode `{other}`"))),
        }
    }
}

/// Per-example weight logits for the whole training set.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightState {
    logits: Vec<f64>,
    /// Step size on the logits.
    pub beta: f64,
    pub mode: WeightMode,
}

impl WeightState {
    pub fn new(num_examples: usize, beta: f64, mode: WeightMode) -> Self {
        Self {
            logits: vec![0.0; num_examples],
            beta,
            mode,
        }
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn check_indices(&self, indices: &[usize]) -> Result<()> {
        if indices.len() < 2 {
            return Err(Error::input("a weight batch needs at least two examples"));
        }
        let mut seen = vec![false; self.logits.len()];
        for &i in indices {
            match seen.get_mut(i) {
                None => {
                    return Err(Error::input(format!(
                        "index {i} out of range for {} examples",
                        self.logits.len()
                    )))
                }
                Some(true) => return Err(Error::input(format!("duplicate index {i} in batch"))),
                Some(s) => *s = true,
            }
        }
        Ok(())
    }

    /// Softmax of the logits restricted to `indices`.
    pub fn batch_weights(&self, indices: &[usize]) -> Result<Marginal> {
        self.check_indices(indices)?;
        let slice: Vec<f64> = indices.iter().map(|&i| self.logits[i]).collect();
        Marginal::from_unnormalized(&softmax(&slice))
    }

    /// Softmax over every example: the global weight vector.
    pub fn global_weights(&self) -> Vec<f64> {
        softmax(&self.logits)
    }
}

/// How the meta distribution is assembled from the meta set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QMode {
    /// Every meta example, uniform mass.
    Whole,
    /// One class-mean atom per class.
    Prototype,
    /// `sample_k` prototypes drawn without replacement at every iteration.
    RandomSample,
}

impl QMode {
    pub const ALL: [QMode; 3] = [QMode::Prototype, QMode::Whole, QMode::RandomSample];
}

impl fmt::Display for QMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QMode::Whole => "whole",
            QMode::Prototype => "prototype",
            QMode::RandomSample => "random_sample",
        })
    }
}

impl FromStr for QMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whole" => Ok(QMode::Whole),
            "prototype" => Ok(QMode::Prototype),
            "random_sample" => Ok(QMode::RandomSample),
            other => Err(Error::config(format!("unknown q mode `{other}`"))),
        }
    }
}

/// Balanced target distribution. Atoms live in input space and are pushed
/// through the current extractor whenever a feature cost is needed.
#[derive(Debug, Clone)]
pub struct MetaDistribution {
    pub atoms: Array2<f64>,
    pub labels: LabelBatch,
    pub mass: Marginal,
    pub mode: QMode,
    pub sample_k: usize,
    prototypes: Array2<f64>,
}

impl MetaDistribution {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Redraws the atoms in `RandomSample` mode; no-op otherwise.
    pub fn resample(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.mode != QMode::RandomSample {
            return Ok(());
        }
        let k = self.prototypes.nrows();
        let mut picked = sample(rng, k, self.sample_k).into_vec();
        picked.sort_unstable();
        self.atoms = self.prototypes.select(Axis(0), &picked);
        self.labels = LabelBatch::new(picked, k)?;
        self.mass = Marginal::uniform(self.sample_k)?;
        Ok(())
    }
}

fn class_prototypes(meta: &Dataset) -> Array2<f64> {
    let k = meta.num_classes();
    let mut sums = Array2::zeros((k, meta.dim()));
    for (row, &y) in meta.features.rows().into_iter().zip(&meta.labels) {
        let mut target = sums.row_mut(y);
        target += &row;
    }
    for (mut row, &n) in sums.rows_mut().into_iter().zip(&meta.class_counts) {
        row /= n as f64;
    }
    sums
}

/// Builds the meta distribution `Q` from a balanced meta set.
pub fn build_meta_distribution(meta: &Dataset, mode: QMode, sample_k: usize, rng: &mut ChaCha8Rng) -> Result<MetaDistribution> {
    let k = meta.num_classes();
    let per_class = meta.class_counts.first().copied().unwrap_or(0);
    if per_class == 0 {
        return Err(Error::input("meta set has no examples of class 0"));
    }
    if let Some(bad) = meta.class_counts.iter().position(|&n| n != per_class) {
        return Err(Error::input(format!(
            "meta set is unbalanced: class {bad} has {} examples, class 0 has {per_class}",
            meta.class_counts[bad]
        )));
    }
    let prototypes = class_prototypes(meta);
    let mut q = match mode {
        QMode::Whole => MetaDistribution {
            atoms: meta.features.clone(),
            labels: meta.label_batch(),
            mass: Marginal::uniform(meta.len())?,
            mode,
            sample_k,
            prototypes,
        },
        QMode::Prototype | QMode::RandomSample => {
            if mode == QMode::RandomSample && !(1..=k).contains(&sample_k) {
                return Err(Error::input(format!("sample_k must be in 1..={k}, got {sample_k}")));
            }
            MetaDistribution {
                atoms: prototypes.clone(),
                labels: LabelBatch::new((0..k).collect(), k)?,
                mass: Marginal::uniform(k)?,
                mode,
                sample_k,
                prototypes,
            }
        }
    };
    q.resample(rng)?;
    Ok(q)
}

/// A mini-batch of training examples.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Positions in the training set.
    pub indices: Vec<usize>,
    pub x: Array2<f64>,
    pub labels: LabelBatch,
}

impl Batch {
    pub fn from_dataset(data: &Dataset, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
            return Err(Error::input(format!("index {bad} out of range for {} examples", data.len())));
        }
        let (x, labels) = data.select(indices);
        Ok(Self {
            indices: indices.to_vec(),
            x,
            labels: LabelBatch::new(labels, data.num_classes())?,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Cost matrix between a batch and `Q`, extracting features with `model`
/// only when the cost kind needs them.
pub fn batch_cost(batch: &Batch, model: &ModelParams, q: &MetaDistribution, cost: &CostConfig) -> Result<Array2<f64>> {
    if cost.kind.uses_features() {
        let zt = extract_features(model, &batch.x)?;
        let zm = extract_features(model, &q.atoms)?;
        build_cost(cost, Some(&zt), &batch.labels, Some(&zm), &q.labels)
    } else {
        build_cost(cost, None, &batch.labels, None, &q.labels)
    }
}

/// Entropic transport loss of one weight evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightUpdate {
    /// `<C, T>` at the weights before the last step.
    pub ot_loss: f64,
    /// False if any Sinkhorn solve hit its iteration cap.
    pub converged: bool,
}

/// Transport loss and its gradient with respect to batch logits.
#[derive(Debug, Clone)]
pub struct LogitGradient {
    pub gradient: Vec<f64>,
    pub ot_loss: f64,
    pub converged: bool,
}

/// Pulls the source-marginal gradient back through `w = softmax(logits)`:
/// `dL/du_i = w_i (g_i - <w, g>)`.
pub fn ot_logit_gradient(cost: &Array2<f64>, logits: &[f64], target: &Marginal, cfg: &SinkhornConfig) -> Result<LogitGradient> {
    let w = Marginal::from_unnormalized(&softmax(logits))?;
    let sg = grad_ot_wrt_source(cost, &w, target, cfg)?;
    let w = w.as_slice();
    let mean: f64 = w.iter().zip(sg.gradient.iter()).map(|(wi, gi)| wi * gi).sum();
    Ok(LogitGradient {
        gradient: w.iter().zip(sg.gradient.iter()).map(|(wi, gi)| wi * (gi - mean)).collect(),
        ot_loss: sg.plan.ot_cost,
        converged: sg.converged,
    })
}

/// Runs `steps` gradient steps on `logits` against a fixed cost matrix.
///
/// With `steps == 0` the loss at the current logits is still reported.
pub fn descend_logits(
    cost: &Array2<f64>,
    logits: &mut [f64],
    target: &Marginal,
    cfg: &SinkhornConfig,
    beta: f64,
    steps: usize,
) -> Result<WeightUpdate> {
    let mut update = WeightUpdate {
        ot_loss: f64::NAN,
        converged: true,
    };
    for _ in 0..steps.max(1) {
        let lg = ot_logit_gradient(cost, logits, target, cfg)?;
        update.ot_loss = lg.ot_loss;
        update.converged &= lg.converged;
        if steps == 0 {
            break;
        }
        for (u, g) in logits.iter_mut().zip(&lg.gradient) {
            *u -= beta * g;
        }
    }
    Ok(update)
}

/// Direct weight update: `steps` logit-space gradient steps on the batch
/// entries of `state`, with costs computed from `model`'s extractor.
pub fn weight_update_direct(
    state: &mut WeightState,
    batch: &Batch,
    model: &ModelParams,
    q: &MetaDistribution,
    cost: &CostConfig,
    cfg: &SinkhornConfig,
    steps: usize,
) -> Result<WeightUpdate> {
    state.check_indices(&batch.indices)?;
    let c = batch_cost(batch, model, q, cost)?;
    if state.mode == WeightMode::Scratch {
        for &i in &batch.indices {
            state.logits[i] = 0.0;
        }
    }
    let mut local: Vec<f64> = batch.indices.iter().map(|&i| state.logits[i]).collect();
    let update = descend_logits(&c, &mut local, &q.mass, cfg, state.beta, steps)?;
    for (&i, u) in batch.indices.iter().zip(local) {
        state.logits[i] = u;
    }
    Ok(update)
}

/// The logit gradient Step (b) would apply for `batch`, without mutating
/// anything. Depends on the model only through its extractor.
pub fn step_b_logit_gradient(
    state: &WeightState,
    batch: &Batch,
    model: &ModelParams,
    q: &MetaDistribution,
    cost: &CostConfig,
    cfg: &SinkhornConfig,
) -> Result<Vec<f64>> {
    state.check_indices(&batch.indices)?;
    let c = batch_cost(batch, model, q, cost)?;
    let logits: Vec<f64> = batch.indices.iter().map(|&i| state.logits[i]).collect();
    Ok(ot_logit_gradient(&c, &logits, &q.mass, cfg)?.gradient)
}

/// Source of stage-2 example weights.
#[derive(Debug, Clone)]
pub enum Reweighter {
    /// Weight logits updated directly; `steps` gradient steps per iteration.
    Direct { state: WeightState, steps: usize },
    /// Amortized weights from a weight net trained with step size `beta`.
    Net { params: WeightNetParams, beta: f64 },
}

impl Reweighter {
    fn weights_for(&self, batch: &Batch, model: &ModelParams) -> Result<Marginal> {
        match self {
            Reweighter::Direct { state, .. } => state.batch_weights(&batch.indices),
            Reweighter::Net { params, .. } => weight_net_forward(&extract_features(model, &batch.x)?, params),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Config {
    pub cost: CostConfig,
    pub sinkhorn: SinkhornConfig,
    pub sgd: Sgd,
    pub freeze_extractor: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Diagnostics {
    /// True when the lookahead update was unnecessary (label cost or frozen extractor).
    pub step_a_skipped: bool,
    pub ot_loss: f64,
    pub sinkhorn_converged: bool,
    /// Weighted loss of the real model update.
    pub model_loss: f64,
}

/// One stage-2 iteration.
///
/// (a) a lookahead model update with the current weights, used only for its
/// extractor; (b) a weight update against the lookahead features; (c) the
/// real model update with the new weights. Step (a) is skipped when the cost
/// ignores features or the extractor is frozen, since the cost would not
/// change.
pub fn stage2_step(
    model: &mut ModelParams,
    reweighter: &mut Reweighter,
    batch: &Batch,
    q: &MetaDistribution,
    cfg: &Stage2Config,
) -> Result<Stage2Diagnostics> {
    let step_a_skipped = !cfg.cost.kind.uses_features() || cfg.freeze_extractor;
    let ahead = if step_a_skipped {
        None
    } else {
        let current = reweighter.weights_for(batch, model)?;
        Some(lookahead(model, &batch.x, batch.labels.labels(), current.as_slice(), &cfg.sgd)?)
    };
    let feature_model = ahead.as_ref().unwrap_or(model);

    let update = match reweighter {
        Reweighter::Direct { state, steps } => {
            weight_update_direct(state, batch, feature_model, q, &cfg.cost, &cfg.sinkhorn, *steps)?
        }
        Reweighter::Net { params, beta } => {
            weight_net_update(params, batch, feature_model, q, &cfg.cost, &cfg.sinkhorn, *beta)?
        }
    };

    let new_weights = reweighter.weights_for(batch, model)?;
    let model_loss = train_step(
        model,
        &batch.x,
        batch.labels.labels(),
        new_weights.as_slice(),
        &cfg.sgd,
        cfg.freeze_extractor,
    )?;
    Ok(Stage2Diagnostics {
        step_a_skipped,
        ot_loss: update.ot_loss,
        sinkhorn_converged: update.converged,
        model_loss,
    })
}

/// Features of the meta atoms under `model`.
pub fn meta_features(model: &ModelParams, q: &MetaDistribution) -> Result<FeatureBatch> {
    extract_features(model, &q.atoms)
}
