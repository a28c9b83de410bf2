//! Long-tailed synthetic datasets, meta-set splitting and CSV I/O.
//!
//! All randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`), a
//! counter-based stream cipher generator: a `(seed, stream)` pair fully
//! determines the sequence. Generation uses stream 0 for training draws,
//! stream 1 for the test set and stream 2 for meta splitting.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cost::LabelBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Meta,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Meta => "meta",
            SplitTag::Test => "test",
        })
    }
}

/// Features, labels and per-class counts of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_counts: Vec<usize>,
    pub split: SplitTag,
}

impl Dataset {
    /// Builds a dataset, deriving class counts from the labels.
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize, split: SplitTag) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::input(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        let mut class_counts = vec![0; num_classes];
        for &y in &labels {
            *class_counts
                .get_mut(y)
                .ok_or_else(|| Error::input(format!("label {y} out of range for {num_classes} classes")))? += 1;
        }
        Ok(Self {
            features,
            labels,
            class_counts,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn label_batch(&self) -> LabelBatch {
        LabelBatch::new(self.labels.clone(), self.num_classes()).expect("labels validated on construction")
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        (
            self.features.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    fn subset(&self, indices: &[usize], split: SplitTag) -> Dataset {
        let (features, labels) = self.select(indices);
        Dataset::new(features, labels, self.num_classes(), split).expect("subset of a valid dataset")
    }
}

/// Parameters of the long-tailed Gaussian generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub num_classes: usize,
    /// Size of the largest class.
    pub n_head: usize,
    /// Ratio of largest to smallest class size.
    pub imbalance_factor: f64,
    pub dim: usize,
    /// Distance between neighbouring class means.
    pub class_separation: f64,
    /// Examples per class in the balanced test set.
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for LongTailSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            n_head: 300,
            imbalance_factor: 100.0,
            dim: 16,
            class_separation: 2.0,
            test_per_class: 100,
            seed: 0,
        }
    }
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.n_head == 0 {
            return Err(Error::input("need at least one class and a non-empty head class"));
        }
        if !(self.imbalance_factor >= 1.0 && self.imbalance_factor.is_finite()) {
            return Err(Error::input(format!(
                "imbalance factor must be >= 1, got {}",
                self.imbalance_factor
            )));
        }
        if self.dim < 2 {
            return Err(Error::input("feature dimension must be at least 2"));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(Error::input("class separation must be finite and >= 0"));
        }
        class_sizes(self.num_classes, self.n_head, self.imbalance_factor).map(|_| ())
    }
}

/// Exponential profile `round(n_head * IF^(-k/(K-1)))` for `k = 0..K`.
pub fn class_sizes(num_classes: usize, n_head: usize, imbalance_factor: f64) -> Result<Vec<usize>> {
    if num_classes == 1 {
        return Ok(vec![n_head]);
    }
    let sizes: Vec<usize> = (0..num_classes)
        .map(|k| {
            let exponent = -(k as f64) / (num_classes - 1) as f64;
            (n_head as f64 * imbalance_factor.powf(exponent)).round() as usize
        })
        .collect();
    if sizes.iter().any(|&n| n < 1) {
        return Err(Error::input(format!(
            "imbalance factor {imbalance_factor} leaves the smallest class empty with n_head = {n_head}"
        )));
    }
    Ok(sizes)
}

/// Class means on a ring in the first two coordinates; neighbours sit
/// `class_separation` apart.
pub fn class_means(num_classes: usize, dim: usize, class_separation: f64) -> Array2<f64> {
    let mut means = Array2::zeros((num_classes, dim));
    if num_classes < 2 {
        return means;
    }
    let radius = class_separation / (2.0 * (PI / num_classes as f64).sin());
    for k in 0..num_classes {
        let angle = 2.0 * PI * k as f64 / num_classes as f64;
        means[[k, 0]] = radius * angle.cos();
        means[[k, 1]] = radius * angle.sin();
    }
    means
}

/// Generator for stream `id` under `seed`.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn sample_classes(means: &Array2<f64>, counts: &[usize], rng: &mut ChaCha8Rng, split: SplitTag) -> Dataset {
    let (k, dim) = means.dim();
    let total: usize = counts.iter().sum();
    let mut features = Array2::zeros((total, dim));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for (class, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            for d in 0..dim {
                let noise: f64 = StandardNormal.sample(rng);
                features[[row, d]] = means[[class, d]] + noise;
            }
            labels.push(class);
            row += 1;
        }
    }
    Dataset::new(features, labels, k, split).expect("generated labels are in range")
}

/// Draws a long-tailed training set and a balanced test set.
///
/// Class `k` is an isotropic unit Gaussian around its ring mean; class sizes
/// follow [`class_sizes`]. Rows are grouped by class.
pub fn make_longtailed_gaussians(spec: &LongTailSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let sizes = class_sizes(spec.num_classes, spec.n_head, spec.imbalance_factor)?;
    let means = class_means(spec.num_classes, spec.dim, spec.class_separation);
    let train = sample_classes(&means, &sizes, &mut stream(spec.seed, 0), SplitTag::Train);
    let test = sample_classes(
        &means,
        &vec![spec.test_per_class; spec.num_classes],
        &mut stream(spec.seed, 1),
        SplitTag::Test,
    );
    Ok((train, test))
}

/// Like [`make_longtailed_gaussians`], plus a balanced meta set of
/// `meta_per_class` examples per class.
///
/// Every class is drawn with `meta_per_class` extra examples which
/// [`split_meta`] then removes, so the training split keeps the exact
/// long-tailed profile and even single-example classes get meta examples.
pub fn make_longtailed_split(spec: &LongTailSpec, meta_per_class: usize) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let sizes: Vec<usize> = class_sizes(spec.num_classes, spec.n_head, spec.imbalance_factor)?
        .into_iter()
        .map(|n| n + meta_per_class)
        .collect();
    let means = class_means(spec.num_classes, spec.dim, spec.class_separation);
    let pool = sample_classes(&means, &sizes, &mut stream(spec.seed, 0), SplitTag::Train);
    let test = sample_classes(
        &means,
        &vec![spec.test_per_class; spec.num_classes],
        &mut stream(spec.seed, 1),
        SplitTag::Test,
    );
    let (train, meta) = split_meta(&pool, meta_per_class, &mut stream(spec.seed, 2))?;
    Ok((train, meta, test))
}

/// Moves `per_class` random examples of every class into a balanced meta set.
///
/// When some class has `per_class` or fewer examples, every class contributes
/// `min_count - 1` instead so the meta set stays balanced and each class
/// keeps at least one training example.
pub fn split_meta(train: &Dataset, per_class: usize, rng: &mut ChaCha8Rng) -> Result<(Dataset, Dataset)> {
    if let Some(k) = train.class_counts.iter().position(|&n| n == 0) {
        return Err(Error::input(format!("class {k} has no examples")));
    }
    let min_count = train.class_counts.iter().copied().min().unwrap_or(0);
    let take = if per_class >= min_count && per_class > 0 {
        let reduced = min_count.saturating_sub(1);
        log::warn!("smallest class has {min_count} examples; taking {reduced} meta examples per class instead of {per_class}");
        reduced
    } else {
        per_class
    };
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); train.num_classes()];
    for (i, &y) in train.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut in_meta = vec![false; train.len()];
    let mut meta_idx = Vec::with_capacity(take * train.num_classes());
    for members in &mut by_class {
        members.shuffle(rng);
        for &i in &members[..take] {
            in_meta[i] = true;
            meta_idx.push(i);
        }
    }
    meta_idx.sort_unstable_by_key(|&i| (train.labels[i], i));
    let rest: Vec<usize> = (0..train.len()).filter(|&i| !in_meta[i]).collect();
    Ok((train.subset(&rest, train.split), train.subset(&meta_idx, SplitTag::Meta)))
}

fn csv_header(dim: usize) -> Vec<String> {
    std::iter::once("label".to_string())
        .chain((0..dim).map(|d| format!("f{d}")))
        .collect()
}

/// Writes `label,f0,...,f{D-1}` CSV with shortest round-trip float formatting.
pub fn save_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut out = csv_header(data.dim()).join(",");
    out.push('\n');
    for (row, y) in data.features.rows().into_iter().zip(&data.labels) {
        out.push_str(&y.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads a dataset written by [`save_csv`].
///
/// With `num_classes = None` the class count is inferred as `max label + 1`.
pub fn load_csv(path: &Path, num_classes: Option<usize>, split: SplitTag) -> Result<Dataset> {
    let parse_err = |line: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let text = fs::read_to_string(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(parse_err(1, "no rows".into())),
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
    };
    let dim = header.len().saturating_sub(1);
    let expected = csv_header(dim);
    if dim == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(1, format!("expected header `label,f0,...`, got `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != dim + 1 {
            return Err(parse_err(line, format!("expected {} fields, found {}", dim + 1, record.len())));
        }
        let y: usize = record[0]
            .parse()
            .map_err(|e| parse_err(line, format!("bad label `{}`: {e}", &record[0])))?;
        if let Some(k) = num_classes {
            if y >= k {
                return Err(parse_err(line, format!("label {y} out of range for {k} classes")));
            }
        }
        labels.push(y);
        for field in record.iter().skip(1) {
            let v: f64 = field.parse().map_err(|e| parse_err(line, format!("bad feature `{field}`: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite feature `{field}`")));
            }
            values.push(v);
        }
    }
    if labels.is_empty() {
        return Err(parse_err(1, "no rows".into()));
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().unwrap() + 1);
    let features = Array2::from_shape_vec((labels.len(), dim), values).expect("row lengths checked");
    Dataset::new(features, labels, k, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn exponential_profile() {
        assert_eq!(class_sizes(10, 100, 100.0).unwrap(), vec![100, 60, 36, 22, 13, 8, 5, 3, 2, 1]);
        assert_eq!(class_sizes(6, 40, 1.0).unwrap(), vec![40; 6]);
        assert!(class_sizes(10, 10, 100.0).is_err());
        assert_eq!(class_sizes(1, 7, 50.0).unwrap(), vec![7]);
    }

    #[test]
    fn ratio_matches_imbalance_factor() {
        for &(n_head, imb) in &[(300usize, 100.0f64), (100, 10.0), (500, 200.0)] {
            let sizes = class_sizes(10, n_head, imb).unwrap();
            let (big, small) = (sizes[0] as f64, *sizes.last().unwrap() as f64);
            // Rounding can move the smallest class by at most one unit.
            assert!((big / (small + 1.0)..=big / (small - 1.0).max(0.5)).contains(&imb));
        }
    }

    #[test]
    fn ring_means_are_evenly_spaced() {
        let m = class_means(7, 4, 2.5);
        for k in 0..7 {
            let next = (k + 1) % 7;
            let d = (&m.row(k) - &m.row(next)).mapv(|v| v * v).sum().sqrt();
            assert!((d - 2.5).abs() < 1e-12);
        }
        assert!(m.column(2).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn generation_is_deterministic_and_balanced_test() {
        let spec = LongTailSpec {
            seed: 17,
            n_head: 50,
            imbalance_factor: 10.0,
            ..LongTailSpec::default()
        };
        let (a, ta) = make_longtailed_gaussians(&spec).unwrap();
        let (b, tb) = make_longtailed_gaussians(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(a.class_counts, class_sizes(10, 50, 10.0).unwrap());
        assert!(ta.class_counts.iter().all(|&n| n == spec.test_per_class));
        let (c, _) = make_longtailed_gaussians(&LongTailSpec { seed: 18, ..spec }).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn split_meta_counts_and_disjointness() {
        let spec = LongTailSpec {
            n_head: 40,
            imbalance_factor: 2.0,
            ..LongTailSpec::default()
        };
        let (train, _) = make_longtailed_gaussians(&spec).unwrap();
        let mut rng = stream(1, 9);
        let (rest, meta) = split_meta(&train, 10, &mut rng).unwrap();
        assert_eq!(meta.len(), 100);
        assert_eq!(rest.len(), train.len() - 100);
        assert!(meta.class_counts.iter().all(|&n| n == 10));
        let rows = |d: &Dataset| -> HashSet<Vec<u64>> {
            d.features.rows().into_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect()
        };
        assert!(rows(&rest).is_disjoint(&rows(&meta)));
        assert_eq!(rows(&rest).len() + rows(&meta).len(), train.len());

        let (same, empty) = split_meta(&train, 0, &mut rng).unwrap();
        assert_eq!(same.features, train.features);
        assert!(empty.is_empty());
    }

    #[test]
    fn split_meta_shrinks_to_keep_balance() {
        let spec = LongTailSpec {
            n_head: 40,
            imbalance_factor: 10.0,
            ..LongTailSpec::default()
        };
        let (train, _) = make_longtailed_gaussians(&spec).unwrap();
        let (rest, meta) = split_meta(&train, 10, &mut stream(0, 2)).unwrap();
        assert!(meta.class_counts.iter().all(|&n| n == 3));
        assert!(rest.class_counts.iter().all(|&n| n >= 1));
    }

    #[test]
    fn split_with_meta_pool_keeps_profile() {
        let spec = LongTailSpec {
            n_head: 100,
            ..LongTailSpec::default()
        };
        let (train, meta, test) = make_longtailed_split(&spec, 10).unwrap();
        assert_eq!(train.class_counts, vec![100, 60, 36, 22, 13, 8, 5, 3, 2, 1]);
        assert!(meta.class_counts.iter().all(|&n| n == 10));
        assert_eq!(test.len(), 1000);
        assert_eq!(meta.split, SplitTag::Meta);
    }

    #[test]
    fn empty_class_is_rejected() {
        let d = Dataset::new(Array2::zeros((2, 2)), vec![0, 0], 2, SplitTag::Train).unwrap();
        assert!(split_meta(&d, 1, &mut stream(0, 0)).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let spec = LongTailSpec {
            n_head: 10,
            imbalance_factor: 3.0,
            num_classes: 3,
            dim: 4,
            ..LongTailSpec::default()
        };
        let (train, _) = make_longtailed_gaussians(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        save_csv(&train, &path).unwrap();
        let back = load_csv(&path, Some(3), SplitTag::Train).unwrap();
        assert_eq!(back, train);

        fs::write(&path, "label,x0\n0,1.0\n").unwrap();
        assert!(matches!(load_csv(&path, None, SplitTag::Train), Err(Error::Parse { line: 1, .. })));
        fs::write(&path, "").unwrap();
        let err = load_csv(&path, None, SplitTag::Train).unwrap_err();
        assert!(err.to_string().contains("no rows"));
        fs::write(&path, "label,f0,f1\n0,1,2\n1,oops,3\n").unwrap();
        assert!(matches!(load_csv(&path, None, SplitTag::Train), Err(Error::Parse { line: 3, .. })));
        fs::write(&path, "label,f0\n0,1\n5,2\n").unwrap();
        assert!(matches!(load_csv(&path, Some(3), SplitTag::Train), Err(Error::Parse { line: 3, .. })));
    }
}
