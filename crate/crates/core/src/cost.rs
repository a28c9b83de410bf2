//! Pairwise transport costs between training examples and meta atoms.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

const NORM_FLOOR: f64 = 1e-12;

/// Row-major batch of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    values: Array2<f64>,
}

impl FeatureBatch {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(((i, j), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::input(format!("feature ({i}, {j}) is {v}")));
        }
        Ok(Self { values })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }
}

/// Class ids in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelBatch {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::input(format!("class id {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { labels, num_classes })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CostKind {
    Label,
    Feature,
    Combined,
}

impl CostKind {
    pub const ALL: [CostKind; 3] = [CostKind::Label, CostKind::Feature, CostKind::Combined];

    /// Whether the cost depends on extracted features.
    pub fn uses_features(self) -> bool {
        !matches!(self, CostKind::Label)
    }
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostKind::Label => "label",
            CostKind::Feature => "feature",
            CostKind::Combined => "combined",
        })
    }
}

impl FromStr for CostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label" => Ok(CostKind::Label),
            "feature" => Ok(CostKind::Feature),
            "combined" => Ok(CostKind::Combined),
            other => Err(Error::config(format!("unknown cost kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostConfig {
    pub kind: CostKind,
    /// Coefficient on the label term of the combined cost.
    pub label_coeff: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            kind: CostKind::Combined,
            label_coeff: 1.0,
        }
    }
}

/// 0/1 label disagreement.
pub fn label_cost(train: &LabelBatch, meta: &LabelBatch) -> Result<Array2<f64>> {
    if train.num_classes != meta.num_classes {
        return Err(Error::input(format!(
            "label batches disagree on class count ({} vs {})",
            train.num_classes, meta.num_classes
        )));
    }
    Ok(Array2::from_shape_fn((train.len(), meta.len()), |(i, j)| {
        if train.labels[i] == meta.labels[j] {
            0.0
        } else {
            1.0
        }
    }))
}

/// Cosine distance `1 - cos(z_i, z_j)`, in `[0, 2]`.
///
/// Norms are floored at 1e-12, so an all-zero vector sits at distance 1 from
/// everything.
pub fn feature_cost(train: &FeatureBatch, meta: &FeatureBatch) -> Result<Array2<f64>> {
    if train.dim() != meta.dim() {
        return Err(Error::input(format!(
            "feature dims differ ({} vs {})",
            train.dim(),
            meta.dim()
        )));
    }
    let norms = |b: &FeatureBatch| -> Vec<f64> {
        b.values
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(NORM_FLOOR))
            .collect()
    };
    let (nt, nm) = (norms(train), norms(meta));
    let dots = train.values.dot(&meta.values.t());
    Ok(Array2::from_shape_fn(dots.dim(), |(i, j)| {
        (1.0 - dots[[i, j]] / (nt[i] * nm[j])).clamp(0.0, 2.0)
    }))
}

/// `feature_cost + label_coeff * label_cost`.
pub fn combined_cost(
    z_train: &FeatureBatch,
    y_train: &LabelBatch,
    z_meta: &FeatureBatch,
    y_meta: &LabelBatch,
    label_coeff: f64,
) -> Result<Array2<f64>> {
    if !(label_coeff >= 0.0 && label_coeff.is_finite()) {
        return Err(Error::input(format!("label coefficient must be >= 0, got {label_coeff}")));
    }
    let fc = feature_cost(z_train, z_meta)?;
    let lc = label_cost(y_train, y_meta)?;
    if fc.dim() != lc.dim() {
        return Err(Error::input("feature and label batches disagree on row counts"));
    }
    Ok(fc + lc * label_coeff)
}

/// Dispatches on `cfg.kind`. Features may be omitted for the label cost.
pub fn build_cost(
    cfg: &CostConfig,
    z_train: Option<&FeatureBatch>,
    y_train: &LabelBatch,
    z_meta: Option<&FeatureBatch>,
    y_meta: &LabelBatch,
) -> Result<Array2<f64>> {
    fn need(z: Option<&FeatureBatch>, kind: CostKind) -> Result<&FeatureBatch> {
        z.ok_or_else(|| Error::input(format!("{kind} cost needs features")))
    }
    match cfg.kind {
        CostKind::Label => label_cost(y_train, y_meta),
        CostKind::Feature => feature_cost(need(z_train, cfg.kind)?, need(z_meta, cfg.kind)?),
        CostKind::Combined => combined_cost(
            need(z_train, cfg.kind)?,
            y_train,
            need(z_meta, cfg.kind)?,
            y_meta,
            cfg.label_coeff,
        ),
    }
}
