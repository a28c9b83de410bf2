//! Small MLP classifier split into a feature extractor and a linear head.
//!
//! The extractor is a stack of dense `tanh` layers; the classifier is one
//! dense layer on top of the extracted features. Gradients are computed by
//! hand and applied with momentum SGD.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost::FeatureBatch;
use crate::error::{Error, Result};

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    fn uniform(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (input as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((output, input), |_| rng.random_range(-s..s)),
            bias: Array1::from_shape_fn(output, |_| rng.random_range(-s..s)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    fn all_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Layer widths: `input -> hidden... -> feature_dim` (extractor), then `feature_dim -> num_classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl ModelShape {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64],
            feature_dim: 32,
            num_classes,
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.feature_dim);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Feature extractor layers, each followed by `tanh`.
    pub extractor: Vec<Dense>,
    pub classifier: Dense,
    /// Momentum buffers: one per extractor layer, then the classifier.
    velocity: Vec<Dense>,
}

impl ModelParams {
    pub fn init(shape: &ModelShape, seed: u64) -> Result<Self> {
        let widths = shape.widths();
        if widths.contains(&0) || shape.num_classes == 0 {
            return Err(Error::input(format!("zero-width layer in {shape:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = widths.windows(2).map(|w| Dense::uniform(w[0], w[1], &mut rng)).collect();
        let classifier = Dense::uniform(shape.feature_dim, shape.num_classes, &mut rng);
        Ok(Self::from_layers(extractor, classifier))
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(shape: &ModelShape) -> Self {
        let widths = shape.widths();
        let extractor = widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self::from_layers(extractor, Dense::zeros(shape.feature_dim, shape.num_classes))
    }

    fn from_layers(extractor: Vec<Dense>, classifier: Dense) -> Self {
        let velocity = extractor
            .iter()
            .chain(std::iter::once(&classifier))
            .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
            .collect();
        Self {
            extractor,
            classifier,
            velocity,
        }
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            input_dim: self.extractor[0].input_dim(),
            hidden: self.extractor[..self.extractor.len() - 1]
                .iter()
                .map(Dense::output_dim)
                .collect(),
            feature_dim: self.classifier.input_dim(),
            num_classes: self.classifier.output_dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.extractor[0].input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    /// Zeroes the momentum buffers, e.g. when switching optimizer stages.
    pub fn reset_momentum(&mut self) {
        for v in &mut self.velocity {
            v.weight.fill(0.0);
            v.bias.fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.extractor.iter().all(Dense::all_finite) && self.classifier.all_finite()
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = (&mut Dense, &mut Dense)> {
        self.extractor
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .zip(self.velocity.iter_mut())
    }
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Input followed by every extractor output; the last entry is `z`.
    activations: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
}

impl Forward {
    pub fn features(&self) -> &Array2<f64> {
        self.activations.last().expect("forward pass keeps the input")
    }

    pub fn feature_batch(&self) -> FeatureBatch {
        FeatureBatch::new(self.features().clone()).expect("forward pass checks finiteness")
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.logits.rows().into_iter().map(|r| argmax(r.iter().copied())).collect()
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn check_finite(layer: usize, values: &Array2<f64>) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(Error::Numeric {
            layer,
            detail: format!("entry {pos} is {}", values.iter().nth(pos).unwrap()),
        }),
        None => Ok(()),
    }
}

fn check_input(params: &ModelParams, x: &Array2<f64>) -> Result<()> {
    if x.ncols() != params.input_dim() {
        return Err(Error::input(format!(
            "input has {} columns, model expects {}",
            x.ncols(),
            params.input_dim()
        )));
    }
    Ok(())
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

fn run_extractor(params: &ModelParams, x: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
    check_input(params, x)?;
    let mut activations = Vec::with_capacity(params.extractor.len() + 1);
    activations.push(x.clone());
    for (l, layer) in params.extractor.iter().enumerate() {
        let next = layer.apply(activations.last().unwrap()).mapv(f64::tanh);
        check_finite(l, &next)?;
        activations.push(next);
    }
    Ok(activations)
}

pub fn forward(params: &ModelParams, x: &Array2<f64>) -> Result<Forward> {
    let activations = run_extractor(params, x)?;
    let logits = params.classifier.apply(activations.last().unwrap());
    check_finite(params.extractor.len(), &logits)?;
    let probs = softmax_rows(&logits);
    Ok(Forward {
        activations,
        logits,
        probs,
    })
}

/// Extractor output only.
pub fn extract_features(params: &ModelParams, x: &Array2<f64>) -> Result<FeatureBatch> {
    let mut acts = run_extractor(params, x)?;
    FeatureBatch::new(acts.pop().unwrap())
}

fn check_weights(rows: usize, labels: &[usize], weights: &[f64], classes: usize) -> Result<()> {
    if labels.len() != rows || weights.len() != rows {
        return Err(Error::input(format!(
            "batch has {rows} rows, {} labels and {} weights",
            labels.len(),
            weights.len()
        )));
    }
    if rows == 0 {
        return Err(Error::input("empty batch"));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::input(format!("label {bad} out of range for {classes} classes")));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::input("example weights must be finite and nonnegative"));
    }
    Ok(())
}

/// `(1/|B|) * sum_i w_i * (-ln p_i[y_i])`, probabilities floored at 1e-12.
pub fn weighted_ce_loss(probs: &Array2<f64>, labels: &[usize], weights: &[f64]) -> Result<f64> {
    check_weights(probs.nrows(), labels, weights, probs.ncols())?;
    let n = probs.nrows() as f64;
    Ok(labels
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (&y, w))| w * -probs[[i, y]].max(PROB_FLOOR).ln())
        .sum::<f64>()
        / n)
}

/// Parameter gradients with the same layout as [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub extractor: Vec<Dense>,
    pub classifier: Dense,
}

/// Backpropagates [`weighted_ce_loss`] through a cached forward pass.
pub fn backward(params: &ModelParams, fwd: &Forward, labels: &[usize], weights: &[f64]) -> Result<Gradients> {
    let rows = fwd.probs.nrows();
    check_weights(rows, labels, weights, params.num_classes())?;
    let n = rows as f64;
    let mut delta = fwd.probs.clone();
    for (i, (&y, w)) in labels.iter().zip(weights).enumerate() {
        delta[[i, y]] -= 1.0;
        delta.row_mut(i).mapv_inplace(|v| v * w / n);
    }
    let z = fwd.features();
    let classifier = Dense {
        weight: delta.t().dot(z),
        bias: delta.sum_axis(Axis(0)),
    };
    let mut upstream = delta.dot(&params.classifier.weight);
    let mut extractor = Vec::with_capacity(params.extractor.len());
    for l in (0..params.extractor.len()).rev() {
        let out = &fwd.activations[l + 1];
        let pre = upstream * &out.mapv(|a| 1.0 - a * a);
        let input = &fwd.activations[l];
        extractor.push(Dense {
            weight: pre.t().dot(input),
            bias: pre.sum_axis(Axis(0)),
        });
        upstream = pre.dot(&params.extractor[l].weight);
    }
    extractor.reverse();
    Ok(Gradients { extractor, classifier })
}

/// Momentum SGD settings for one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub alpha: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::input(format!("step size must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::input(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::input("weight decay must be >= 0"));
        }
        Ok(())
    }
}

/// Training schedule shared by both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub stage1: Sgd,
    pub stage2: Sgd,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub freeze_extractor_stage2: bool,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            stage1: Sgd {
                alpha: 0.1,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            stage2: Sgd {
                alpha: 2e-5,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            batch_size: 64,
            epochs_stage1: 40,
            epochs_stage2: 20,
            freeze_extractor_stage2: true,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.batch_size < 2 {
            return Err(Error::input("batch size must be at least 2"));
        }
        Ok(())
    }
}

fn apply_update(layer: &mut Dense, velocity: &mut Dense, grad: &Dense, sgd: &Sgd) {
    let step = |param: &mut f64, vel: &mut f64, g: f64| {
        *vel = sgd.momentum * *vel + g + sgd.weight_decay * *param;
        *param -= sgd.alpha * *vel;
    };
    ndarray::Zip::from(&mut layer.weight)
        .and(&mut velocity.weight)
        .and(&grad.weight)
        .for_each(|p, v, g| step(p, v, *g));
    ndarray::Zip::from(&mut layer.bias)
        .and(&mut velocity.bias)
        .and(&grad.bias)
        .for_each(|p, v, g| step(p, v, *g));
}

/// One momentum-SGD step on the weighted cross-entropy of a batch.
///
/// Returns the loss before the update. With `freeze_extractor` the extractor
/// weights and their momentum buffers are left untouched.
pub fn train_step(
    params: &mut ModelParams,
    x: &Array2<f64>,
    labels: &[usize],
    weights: &[f64],
    sgd: &Sgd,
    freeze_extractor: bool,
) -> Result<f64> {
    sgd.validate()?;
    let fwd = forward(params, x)?;
    let loss = weighted_ce_loss(&fwd.probs, labels, weights)?;
    let grads = backward(params, &fwd, labels, weights)?;
    let frozen = if freeze_extractor { params.extractor.len() } else { 0 };
    let all_grads: Vec<&Dense> = grads.extractor.iter().chain(std::iter::once(&grads.classifier)).collect();
    for (idx, (layer, velocity)) in params.layers_mut().enumerate() {
        if idx >= frozen {
            apply_update(layer, velocity, all_grads[idx], sgd);
        }
    }
    if !params.is_finite() {
        return Err(Error::Numeric {
            layer: params.extractor.len(),
            detail: "parameters became non-finite after the update".into(),
        });
    }
    Ok(loss)
}

/// Plain gradient step `theta - alpha * (grad + wd * theta)` on a copy.
///
/// Momentum buffers are neither read nor written.
pub fn lookahead(params: &ModelParams, x: &Array2<f64>, labels: &[usize], weights: &[f64], sgd: &Sgd) -> Result<ModelParams> {
    sgd.validate()?;
    let fwd = forward(params, x)?;
    let grads = backward(params, &fwd, labels, weights)?;
    let mut next = params.clone();
    let all_grads = grads.extractor.iter().chain(std::iter::once(&grads.classifier));
    for (layer, grad) in next
        .extractor
        .iter_mut()
        .chain(std::iter::once(&mut next.classifier))
        .zip(all_grads)
    {
        ndarray::Zip::from(&mut layer.weight)
            .and(&grad.weight)
            .for_each(|p, g| *p -= sgd.alpha * (g + sgd.weight_decay * *p));
        ndarray::Zip::from(&mut layer.bias)
            .and(&grad.bias)
            .for_each(|p, g| *p -= sgd.alpha * (g + sgd.weight_decay * *p));
    }
    Ok(next)
}

const CHECKPOINT_HEADER: &str = "name,rows,cols,values";

fn tensor_names(params: &ModelParams) -> Vec<(String, Array2<f64>)> {
    let mut out = Vec::new();
    for (l, layer) in params.extractor.iter().enumerate() {
        out.push((format!("extractor.{l}.weight"), layer.weight.clone()));
        out.push((format!("extractor.{l}.bias"), layer.bias.clone().insert_axis(Axis(0))));
    }
    out.push(("classifier.weight".into(), params.classifier.weight.clone()));
    out.push(("classifier.bias".into(), params.classifier.bias.clone().insert_axis(Axis(0))));
    out
}

/// Writes named tensors as CSV: header `name,rows,cols,values`, then one
/// line per tensor with its row-major values in shortest round-trip form.
pub(crate) fn write_tensors(path: &Path, tensors: &[(String, Array2<f64>)]) -> Result<()> {
    let mut out = String::from(CHECKPOINT_HEADER);
    out.push('\n');
    for (name, t) in tensors {
        out.push_str(&format!("{name},{},{}", t.nrows(), t.ncols()));
        for v in t.iter() {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads tensors written by [`write_tensors`], in file order.
pub(crate) fn read_tensors(path: &Path) -> Result<Vec<(String, Array2<f64>)>> {
    let text = fs::read_to_string(path)?;
    let parse_err = |line: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CHECKPOINT_HEADER => {}
        _ => return Err(parse_err(1, format!("expected header `{CHECKPOINT_HEADER}`"))),
    }
    let mut tensors: Vec<(String, Array2<f64>)> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(parse_err(lineno, "expected name,rows,cols,values".into()));
        }
        let dim = |s: &str| s.parse::<usize>().map_err(|e| parse_err(lineno, format!("bad dimension `{s}`: {e}")));
        let (rows, cols) = (dim(fields[1])?, dim(fields[2])?);
        let values = fields[3..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| parse_err(lineno, format!("bad value `{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let t = Array2::from_shape_vec((rows, cols), values)
            .map_err(|_| parse_err(lineno, format!("{} has wrong number of values for {rows}x{cols}", fields[0])))?;
        tensors.push((fields[0].to_string(), t));
    }
    Ok(tensors)
}

/// Saves model weights (momentum buffers are not saved).
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    write_tensors(path, &tensor_names(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let tensors = read_tensors(path)?;
    if tensors.len() < 4 || tensors.len() % 2 != 0 {
        return Err(Error::File {
            path: path.to_path_buf(),
            detail: "incomplete checkpoint".into(),
        });
    }
    let mut layers = Vec::new();
    for pair in tensors.chunks(2) {
        let (wname, w) = &pair[0];
        let (bname, b) = &pair[1];
        if !wname.ends_with(".weight") || !bname.ends_with(".bias") || b.nrows() != 1 || b.ncols() != w.nrows() {
            return Err(Error::File {
                path: path.to_path_buf(),
                detail: format!("tensors `{wname}`/`{bname}` do not form a dense layer"),
            });
        }
        layers.push(Dense {
            weight: w.clone(),
            bias: b.row(0).to_owned(),
        });
    }
    for pair in layers.windows(2) {
        if pair[0].output_dim() != pair[1].input_dim() {
            return Err(Error::File {
                path: path.to_path_buf(),
                detail: "layer shapes do not chain".into(),
            });
        }
    }
    let classifier = layers.pop().unwrap();
    Ok(ModelParams::from_layers(layers, classifier))
}
