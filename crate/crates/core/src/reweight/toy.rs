//! A fixed batch in feature space for studying what weights the transport
//! objective converges to under each cost, without any model in the loop.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{descend_logits, softmax, WeightUpdate};
use crate::cost::{build_cost, CostConfig, FeatureBatch, LabelBatch};
use crate::data::stream;
use crate::error::{Error, Result};
use crate::ot::{Marginal, SinkhornConfig};

/// Batch features and labels plus one prototype atom per class.
#[derive(Debug, Clone)]
pub struct ToyBatch {
    pub features: FeatureBatch,
    pub labels: LabelBatch,
    pub prototypes: FeatureBatch,
    pub prototype_labels: LabelBatch,
    pub target: Marginal,
}

impl ToyBatch {
    /// `counts[k]` examples of class `k`, rows grouped by class. Each class
    /// has a random unit-Gaussian center in `dim` dimensions and examples
    /// scatter around it with standard deviation `noise`; the prototypes are
    /// the centers.
    pub fn new(counts: &[usize], dim: usize, noise: f64, seed: u64) -> Result<Self> {
        let k = counts.len();
        if k < 2 || dim == 0 || counts.contains(&0) {
            return Err(Error::input("need at least two classes, each non-empty, and dim > 0"));
        }
        let mut rng = stream(seed, 0);
        let centers = Array2::from_shape_fn((k, dim), |_| rng.sample::<f64, _>(StandardNormal));
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let features = Array2::from_shape_fn((labels.len(), dim), |(i, d)| {
            centers[[labels[i], d]] + noise * rng.sample::<f64, _>(StandardNormal)
        });
        Ok(Self {
            features: FeatureBatch::new(features)?,
            labels: LabelBatch::new(labels, k)?,
            prototypes: FeatureBatch::new(centers)?,
            prototype_labels: LabelBatch::new((0..k).collect(), k)?,
            target: Marginal::uniform(k)?,
        })
    }

    /// Ten classes with 10, 9, ..., 1 examples in 8 dimensions, noise 0.5.
    pub fn long_tail(seed: u64) -> Result<Self> {
        let counts: Vec<usize> = (1..=10).rev().collect();
        Self::new(&counts, 8, 0.5, seed)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cost(&self, cfg: &CostConfig) -> Result<Array2<f64>> {
        build_cost(
            cfg,
            Some(&self.features),
            &self.labels,
            Some(&self.prototypes),
            &self.prototype_labels,
        )
    }

    /// Runs `steps` logit-space steps from `logits` and returns the weights.
    pub fn optimize(
        &self,
        cost: &CostConfig,
        sinkhorn: &SinkhornConfig,
        beta: f64,
        steps: usize,
        logits: &mut [f64],
    ) -> Result<(Vec<f64>, WeightUpdate)> {
        let c = self.cost(cost)?;
        let update = descend_logits(&c, logits, &self.target, sinkhorn, beta, steps)?;
        Ok((softmax(logits), update))
    }

    /// Mean weight of each class.
    pub fn class_means(&self, weights: &[f64]) -> Vec<f64> {
        class_means(weights, self.labels.labels(), self.labels.num_classes())
    }

    /// Largest max-minus-min weight within any class.
    pub fn within_class_spread(&self, weights: &[f64]) -> f64 {
        let k = self.labels.num_classes();
        let mut lo = vec![f64::INFINITY; k];
        let mut hi = vec![f64::NEG_INFINITY; k];
        for (&w, &y) in weights.iter().zip(self.labels.labels()) {
            lo[y] = lo[y].min(w);
            hi[y] = hi[y].max(w);
        }
        hi.iter().zip(&lo).map(|(h, l)| h - l).fold(0.0, f64::max)
    }
}

/// Largest per-example weight difference between maintained logits and
/// logits restarted from zero, after `rounds` rounds of `steps` steps each.
pub fn maintained_vs_scratch_gap(
    toy: &ToyBatch,
    cost: &CostConfig,
    sinkhorn: &SinkhornConfig,
    beta: f64,
    steps: usize,
    rounds: usize,
) -> Result<f64> {
    let mut maintained = vec![0.0; toy.len()];
    let mut scratch = vec![0.0; toy.len()];
    let (mut wm, mut ws) = (Vec::new(), Vec::new());
    for _ in 0..rounds.max(1) {
        wm = toy.optimize(cost, sinkhorn, beta, steps, &mut maintained)?.0;
        scratch.fill(0.0);
        ws = toy.optimize(cost, sinkhorn, beta, steps, &mut scratch)?.0;
    }
    Ok(wm.iter().zip(&ws).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Mean of `values` per class; zero for absent classes.
pub fn class_means(values: &[f64], labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut sums = Array1::<f64>::zeros(num_classes);
    let mut counts = vec![0usize; num_classes];
    for (&v, &y) in values.iter().zip(labels) {
        sums[y] += v;
        counts[y] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect()
}
