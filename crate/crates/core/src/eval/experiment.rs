//! Two-stage training runs and the ablation grid.
//!
//! Each run seed fixes every random choice through separate ChaCha8 streams:
//! data generation (0-2), model init (3), stage-1 batches (4), stage-2
//! batches (5), meta resampling (6) and weight-net init (7). Runs are
//! independent and executed in parallel; results are returned in seed order.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{confusion_and_metrics, proportion_baseline_weights, MetricsReport};
use crate::config::{ExperimentConfig, Method};
use crate::cost::CostKind;
use crate::data::{load_csv, make_longtailed_split, split_meta, stream, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::model::{extract_features, forward, train_step, ModelParams, ModelShape};
use crate::reweight::toy::class_means;
use crate::reweight::{
    build_meta_distribution, stage2_step, weight_net_forward, Batch, QMode, Reweighter, Stage2Config,
    WeightMode, WeightNetParams, WeightNetVariant, WeightState,
};

const MODEL_STREAM: u64 = 3;
const STAGE1_STREAM: u64 = 4;
const STAGE2_STREAM: u64 = 5;
const META_STREAM: u64 = 6;
const WEIGHTNET_STREAM: u64 = 7;

/// Data and stage-1 model for one seed. Shared by every stage-2 method.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub train: Dataset,
    pub meta: Dataset,
    pub test: Dataset,
    pub model: ModelParams,
    pub stage1: MetricsReport,
}

/// Outcome of one seed.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub stage1: MetricsReport,
    pub stage2: MetricsReport,
    pub train_labels: Vec<usize>,
    pub class_counts: Vec<usize>,
    /// Global weight per training example at the end of stage 2.
    pub final_weights: Vec<f64>,
    /// Global weights after each stage-2 epoch, when dumping is enabled.
    pub epoch_weights: Vec<Vec<f64>>,
    /// Mean transport loss per stage-2 epoch (empty for non-OT methods).
    pub epoch_ot_loss: Vec<f64>,
    /// Mean weighted training loss per stage-2 epoch.
    pub epoch_model_loss: Vec<f64>,
    /// Weight updates whose Sinkhorn solve hit the iteration cap.
    pub sinkhorn_unconverged: usize,
    pub model: ModelParams,
    pub weight_net: Option<WeightNetParams>,
}

impl RunResult {
    /// Mean final weight of each class.
    pub fn class_mean_weights(&self) -> Vec<f64> {
        class_means(&self.final_weights, &self.train_labels, self.class_counts.len())
    }

    /// Whether the smallest class ends with at least the mean weight of the
    /// largest class (first index wins ties in class size).
    pub fn tail_weight_dominates(&self) -> bool {
        let means = self.class_mean_weights();
        let (mut small, mut large) = (0, 0);
        for (k, &n) in self.class_counts.iter().enumerate() {
            if n < self.class_counts[small] {
                small = k;
            }
            if n > self.class_counts[large] {
                large = k;
            }
        }
        means[small] >= means[large]
    }
}

fn load_split(dir: &Path, name: &str, num_classes: usize, split: SplitTag) -> Result<Dataset> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::config(format!("missing data file {}", path.display())));
    }
    load_csv(&path, Some(num_classes), split)
}

fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    match &cfg.data_dir {
        None => {
            let mut spec = cfg.data.clone();
            spec.seed = seed;
            make_longtailed_split(&spec, cfg.meta_per_class)
        }
        Some(dir) => {
            let k = cfg.data.num_classes;
            let train = load_split(dir, "train.csv", k, SplitTag::Train)?;
            let test = load_split(dir, "test.csv", k, SplitTag::Test)?;
            if dir.join("meta.csv").exists() {
                let meta = load_split(dir, "meta.csv", k, SplitTag::Meta)?;
                Ok((train, meta, test))
            } else {
                let (train, meta) = split_meta(&train, cfg.meta_per_class, &mut stream(seed, 2))?;
                Ok((train, meta, test))
            }
        }
    }
}

/// Shuffled mini-batches; a trailing single example joins the previous batch.
fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

fn evaluate(model: &ModelParams, test: &Dataset, seed: u64, fingerprint: &str) -> Result<MetricsReport> {
    let preds = forward(model, &test.features)?.predictions();
    let mut report = confusion_and_metrics(&preds, &test.labels, test.num_classes())?;
    report.seed = seed;
    report.fingerprint = fingerprint.to_string();
    Ok(report)
}

/// Loads or generates the data for `seed` and runs stage 1.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let (train, meta, test) = load_data(cfg, seed)?;
    if train.dim() != test.dim() || train.dim() != meta.dim() {
        return Err(Error::input("train, meta and test feature dimensions differ"));
    }
    let shape = ModelShape {
        input_dim: train.dim(),
        hidden: vec![cfg.hidden],
        feature_dim: cfg.feature_dim,
        num_classes: train.num_classes(),
    };
    let mut model = ModelParams::init(&shape, stream(seed, MODEL_STREAM).next_u64())?;
    let mut rng = stream(seed, STAGE1_STREAM);
    for epoch in 0..cfg.train.epochs_stage1 {
        let mut total = 0.0;
        let batch_list = batches(train.len(), cfg.train.batch_size, &mut rng);
        for idx in &batch_list {
            let (x, y) = train.select(idx);
            total += train_step(&mut model, &x, &y, &vec![1.0; idx.len()], &cfg.train.stage1, false)?;
        }
        log::debug!("seed {seed} stage 1 epoch {epoch}: loss {:.4}", total / batch_list.len() as f64);
    }
    model.reset_momentum();
    let stage1 = evaluate(&model, &test, seed, &cfg.fingerprint())?;
    Ok(Prepared {
        seed,
        train,
        meta,
        test,
        model,
        stage1,
    })
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn proportion_weights(labels: &[usize], counts: &[usize]) -> Result<Vec<f64>> {
    let per_class = proportion_baseline_weights(counts)?;
    let raw: Vec<f64> = labels.iter().map(|&y| per_class.as_slice()[y]).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

fn global_weights(
    method: Method,
    reweighter: Option<&Reweighter>,
    model: &ModelParams,
    train: &Dataset,
) -> Result<Vec<f64>> {
    match (method, reweighter) {
        (_, Some(Reweighter::Direct { state, .. })) => Ok(state.global_weights()),
        (_, Some(Reweighter::Net { params, .. })) => {
            let z = extract_features(model, &train.features)?;
            Ok(weight_net_forward(&z, params)?.into_vec())
        }
        (Method::Proportion, None) => proportion_weights(&train.labels, &train.class_counts),
        _ => Ok(uniform(train.len())),
    }
}

/// Runs the configured stage-2 method from a prepared stage-1 model.
pub fn run_stage2(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<RunResult> {
    let Prepared {
        seed, train, meta, test, ..
    } = prepared;
    let seed = *seed;
    let mut model = prepared.model.clone();
    let sgd = cfg.stage2_sgd();
    let freeze = cfg.train.freeze_extractor_stage2;

    let mut meta_rng = stream(seed, META_STREAM);
    let mut q = if cfg.method.is_ot() {
        Some(build_meta_distribution(meta, cfg.q_mode, cfg.q_sample_k, &mut meta_rng)?)
    } else {
        None
    };
    let mut reweighter = match cfg.method {
        Method::OtDirect => Some(Reweighter::Direct {
            state: WeightState::new(train.len(), cfg.beta, cfg.weights_mode),
            steps: cfg.weights_steps,
        }),
        Method::OtWeightNet => {
            let net_seed = stream(seed, WEIGHTNET_STREAM).next_u64();
            let params = match cfg.weightnet_variant {
                WeightNetVariant::Attention => WeightNetParams::attention(cfg.feature_dim, cfg.weightnet_hidden, net_seed)?,
                WeightNetVariant::SelfAttention => {
                    WeightNetParams::self_attention(cfg.feature_dim, cfg.weightnet_hidden, cfg.weightnet_reduction, net_seed)?
                }
            };
            Some(Reweighter::Net { params, beta: cfg.beta })
        }
        Method::Ce | Method::Proportion => None,
    };
    let stage2_cfg = Stage2Config {
        cost: cfg.cost,
        sinkhorn: cfg.sinkhorn,
        sgd,
        freeze_extractor: freeze,
    };

    let mut rng = stream(seed, STAGE2_STREAM);
    let mut epoch_weights = Vec::new();
    let mut epoch_ot_loss = Vec::new();
    let mut epoch_model_loss = Vec::new();
    let mut unconverged = 0;
    for epoch in 0..cfg.train.epochs_stage2 {
        let batch_list = batches(train.len(), cfg.train.batch_size, &mut rng);
        let (mut ot_total, mut model_total) = (0.0, 0.0);
        for idx in &batch_list {
            let batch = Batch::from_dataset(train, idx)?;
            match (&mut reweighter, &mut q) {
                (Some(rw), Some(q)) => {
                    q.resample(&mut meta_rng)?;
                    let diag = stage2_step(&mut model, rw, &batch, q, &stage2_cfg)?;
                    ot_total += diag.ot_loss;
                    model_total += diag.model_loss;
                    unconverged += usize::from(!diag.sinkhorn_converged);
                }
                _ => {
                    let w = match cfg.method {
                        Method::Proportion => proportion_weights(batch.labels.labels(), &train.class_counts)?,
                        _ => uniform(batch.len()),
                    };
                    model_total += train_step(&mut model, &batch.x, batch.labels.labels(), &w, &sgd, freeze)?;
                }
            }
        }
        let n = batch_list.len() as f64;
        epoch_model_loss.push(model_total / n);
        if cfg.method.is_ot() {
            epoch_ot_loss.push(ot_total / n);
        }
        log::debug!(
            "seed {seed} stage 2 epoch {epoch}: loss {:.4} ot {:.4}",
            model_total / n,
            ot_total / n
        );
        if cfg.dump_weights {
            epoch_weights.push(global_weights(cfg.method, reweighter.as_ref(), &model, train)?);
        }
    }
    if unconverged > 0 {
        log::info!("seed {seed}: {unconverged} weight updates hit the Sinkhorn iteration cap");
    }
    let final_weights = global_weights(cfg.method, reweighter.as_ref(), &model, train)?;
    let stage2 = evaluate(&model, test, seed, &cfg.fingerprint())?;
    let mut stage1 = prepared.stage1.clone();
    stage1.fingerprint = cfg.fingerprint();
    let weight_net = match reweighter {
        Some(Reweighter::Net { params, .. }) => Some(params),
        _ => None,
    };
    Ok(RunResult {
        seed,
        stage1,
        stage2,
        train_labels: train.labels.clone(),
        class_counts: train.class_counts.clone(),
        final_weights,
        epoch_weights,
        epoch_ot_loss,
        epoch_model_loss,
        sinkhorn_unconverged: unconverged,
        model,
        weight_net,
    })
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    run_stage2(cfg, &prepare(cfg, seed)?)
}

/// Every configured seed, in parallel, in seed order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let seeds: Vec<u64> = cfg.seeds().collect();
    seeds.par_iter().map(|&s| run_seed(cfg, s)).collect()
}

/// The ablation grid derived from `base`: baselines, every cost kind times
/// every meta mode with maintained weights, scratch weights per cost kind
/// with prototypes, and the attention weight net.
pub fn ablation_cells(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let with = |method: Method| ExperimentConfig {
        method,
        ..base.clone()
    };
    let mut cells = vec![with(Method::Ce), with(Method::Proportion)];
    for kind in CostKind::ALL {
        for q_mode in QMode::ALL {
            let mut c = with(Method::OtDirect);
            c.cost.kind = kind;
            c.q_mode = q_mode;
            c.weights_mode = WeightMode::Maintained;
            cells.push(c);
        }
    }
    for kind in CostKind::ALL {
        let mut c = with(Method::OtDirect);
        c.cost.kind = kind;
        c.q_mode = QMode::Prototype;
        c.weights_mode = WeightMode::Scratch;
        cells.push(c);
    }
    let mut net = with(Method::OtWeightNet);
    net.q_mode = QMode::Prototype;
    net.weightnet_variant = WeightNetVariant::Attention;
    cells.push(net);
    cells
}

/// Runs every ablation cell over `base`'s seeds, sharing one stage-1 model
/// per seed across cells.
pub fn run_ablation(base: &ExperimentConfig) -> Result<Vec<(ExperimentConfig, Vec<RunResult>)>> {
    base.validate()?;
    let cells = ablation_cells(base);
    for c in &cells {
        c.validate()?;
    }
    let seeds: Vec<u64> = base.seeds().collect();
    let prepared: Vec<Prepared> = seeds.par_iter().map(|&s| prepare(base, s)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..seeds.len()).map(move |s| (c, s))).collect();
    let results: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(c, s)| run_stage2(&cells[c], &prepared[s]))
        .collect::<Result<_>>()?;
    let mut results = results.into_iter();
    Ok(cells
        .into_iter()
        .map(|c| {
            let runs = results.by_ref().take(seeds.len()).collect();
            (c, runs)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(method: &str) -> ExperimentConfig {
        ExperimentConfig::from_kv(&format!(
            "method={method}\nruns=1\ndata.classes=3\ndata.n_head=30\ndata.imbalance_factor=10\ndata.dim=4\ndata.test_per_class=10\ndata.meta_per_class=3\nmodel.hidden=8\nmodel.feature_dim=6\ntrain.batch_size=16\ntrain.epochs_stage1=3\ntrain.epochs_stage2=2\n"
        ))
        .unwrap()
    }

    #[test]
    fn batches_cover_everything_once() {
        let mut rng = stream(0, 0);
        let b = batches(33, 16, &mut rng);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].len(), 17);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..33).collect::<Vec<_>>());
    }

    #[test]
    fn ce_with_zero_alpha_keeps_stage1_metrics() {
        let mut cfg = tiny("ce");
        cfg.train.stage2.alpha = 0.0;
        let run = run_seed(&cfg, 4).unwrap();
        assert_eq!(run.stage1.confusion, run.stage2.confusion);
        assert_eq!(run.stage1.balanced_accuracy, run.stage2.balanced_accuracy);
    }

    #[test]
    fn runs_are_deterministic() {
        for method in ["ce", "proportion", "ot_direct", "ot_weightnet"] {
            let cfg = tiny(method);
            let a = run_seed(&cfg, 1).unwrap();
            let b = run_seed(&cfg, 1).unwrap();
            assert_eq!(a.stage2, b.stage2, "{method}");
            assert_eq!(a.final_weights, b.final_weights, "{method}");
            assert!((a.final_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dump_collects_one_vector_per_epoch() {
        let mut cfg = tiny("ot_direct");
        cfg.dump_weights = true;
        let run = run_seed(&cfg, 0).unwrap();
        assert_eq!(run.epoch_weights.len(), 2);
        assert_eq!(run.epoch_weights[1], run.final_weights);
        assert_eq!(run.epoch_ot_loss.len(), 2);
    }

    #[test]
    fn ablation_grid_shape() {
        let cells = ablation_cells(&tiny("ot_direct"));
        assert_eq!(cells.len(), 15);
        let grid = cells
            .iter()
            .filter(|c| c.method == Method::OtDirect && c.weights_mode == WeightMode::Maintained)
            .count();
        assert_eq!(grid, 9);
    }
}
