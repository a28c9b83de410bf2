//! Experiment configuration as flat `key=value` text with dotted keys.
//!
//! Unknown keys and keys that do not apply to the chosen method are config
//! errors. [`ExperimentConfig::to_kv`] emits every key that applies, so the
//! echoed file reproduces the run exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::cost::{CostConfig, CostKind};
use crate::data::LongTailSpec;
use crate::error::{Error, Result};
use crate::model::{Sgd, TrainHyper};
use crate::ot::SinkhornConfig;
use crate::reweight::{QMode, Reduction, WeightMode, WeightNetVariant};

/// Stage-2 training method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Plain cross-entropy, uniform weights.
    Ce,
    /// Inverse class frequency weights.
    Proportion,
    /// Weights learned directly by transport-loss gradient steps.
    OtDirect,
    /// Weights produced by a weight net trained on the transport loss.
    OtWeightNet,
}

impl Method {
    pub fn is_ot(self) -> bool {
        matches!(self, Method::OtDirect | Method::OtWeightNet)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ce => "ce",
            Method::Proportion => "proportion",
            Method::OtDirect => "ot_direct",
            Method::OtWeightNet => "ot_weightnet",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Method::Ce),
            "proportion" => Ok(Method::Proportion),
            "ot_direct" => Ok(Method::OtDirect),
            "ot_weightnet" => Ok(Method::OtWeightNet),
            other => Err(Error::config(format!("unknown method `{other}`"))),
        }
    }
}

/// Everything needed to reproduce a set of runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    /// First run seed; run `r` uses `seed + r`.
    pub seed: u64,
    pub runs: usize,
    pub dump_weights: bool,
    /// Generator settings; its `seed` field is replaced by each run seed.
    pub data: LongTailSpec,
    pub meta_per_class: usize,
    /// Directory holding `train.csv`, `meta.csv`, `test.csv`; overrides generation.
    pub data_dir: Option<PathBuf>,
    pub hidden: usize,
    pub feature_dim: usize,
    /// Its `seed` field is replaced by each run seed.
    pub train: TrainHyper,
    pub beta: f64,
    pub cost: CostConfig,
    pub q_mode: QMode,
    pub q_sample_k: usize,
    pub weights_mode: WeightMode,
    pub weights_steps: usize,
    pub weightnet_variant: WeightNetVariant,
    pub weightnet_hidden: usize,
    pub weightnet_reduction: Reduction,
    pub sinkhorn: SinkhornConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::OtDirect,
            seed: 0,
            runs: 5,
            dump_weights: false,
            data: LongTailSpec::default(),
            meta_per_class: 10,
            data_dir: None,
            hidden: 64,
            feature_dim: 32,
            train: TrainHyper::default(),
            beta: 1e-3,
            cost: CostConfig::default(),
            q_mode: QMode::Prototype,
            q_sample_k: 5,
            weights_mode: WeightMode::Maintained,
            weights_steps: 1,
            weightnet_variant: WeightNetVariant::Attention,
            weightnet_hidden: 64,
            weightnet_reduction: Reduction::RowMean,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

/// Which methods a key applies to.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Scope {
    All,
    Ot,
    Direct,
    Net,
}

impl Scope {
    fn applies(self, method: Method) -> bool {
        match self {
            Scope::All => true,
            Scope::Ot => method.is_ot(),
            Scope::Direct => method == Method::OtDirect,
            Scope::Net => method == Method::OtWeightNet,
        }
    }
}

const KEYS: &[(&str, Scope)] = &[
    ("method", Scope::All),
    ("seed", Scope::All),
    ("runs", Scope::All),
    ("dump_weights", Scope::All),
    ("data.dir", Scope::All),
    ("data.classes", Scope::All),
    ("data.n_head", Scope::All),
    ("data.imbalance_factor", Scope::All),
    ("data.dim", Scope::All),
    ("data.separation", Scope::All),
    ("data.test_per_class", Scope::All),
    ("data.meta_per_class", Scope::All),
    ("model.hidden", Scope::All),
    ("model.feature_dim", Scope::All),
    ("train.batch_size", Scope::All),
    ("train.epochs_stage1", Scope::All),
    ("train.epochs_stage2", Scope::All),
    ("train.stage1_alpha", Scope::All),
    ("train.alpha", Scope::All),
    ("train.momentum", Scope::All),
    ("train.weight_decay", Scope::All),
    ("train.freeze_extractor", Scope::All),
    ("train.beta", Scope::Ot),
    ("cost.kind", Scope::Ot),
    ("cost.label_coeff", Scope::Ot),
    ("q.mode", Scope::Ot),
    ("q.sample_k", Scope::Ot),
    ("sinkhorn.lambda", Scope::Ot),
    ("sinkhorn.max_iter", Scope::Ot),
    ("sinkhorn.tol", Scope::Ot),
    ("weights.mode", Scope::Direct),
    ("weights.steps", Scope::Direct),
    ("weightnet.variant", Scope::Net),
    ("weightnet.hidden", Scope::Net),
    ("weightnet.reduction", Scope::Net),
];

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// repeated keys are an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
        let key = key.trim().to_string();
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::config(format!("line {}: duplicate key `{key}`", i + 1)));
        }
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

impl ExperimentConfig {
    /// Defaults overridden by `entries`, then validated.
    pub fn from_entries(entries: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(m) = entries.get("method") {
            cfg.method = m.parse()?;
        }
        if cfg.method == Method::OtWeightNet && !entries.contains_key("weightnet.hidden") {
            if let Some(v) = entries.get("weightnet.variant") {
                if v.parse::<WeightNetVariant>()? == WeightNetVariant::SelfAttention {
                    cfg.weightnet_hidden = 128;
                }
            }
        }
        for (key, value) in entries {
            let scope = KEYS
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, s)| *s)
                .ok_or_else(|| Error::config(format!("unknown key `{key}`")))?;
            if !scope.applies(cfg.method) {
                return Err(Error::config(format!("`{key}` does not apply to method {}", cfg.method)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        Self::from_entries(&parse_kv(text)?)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "method" => self.method = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "runs" => self.runs = parse(key, v)?,
            "dump_weights" => self.dump_weights = parse(key, v)?,
            "data.dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.classes" => self.data.num_classes = parse(key, v)?,
            "data.n_head" => self.data.n_head = parse(key, v)?,
            "data.imbalance_factor" => self.data.imbalance_factor = parse(key, v)?,
            "data.dim" => self.data.dim = parse(key, v)?,
            "data.separation" => self.data.class_separation = parse(key, v)?,
            "data.test_per_class" => self.data.test_per_class = parse(key, v)?,
            "data.meta_per_class" => self.meta_per_class = parse(key, v)?,
            "model.hidden" => self.hidden = parse(key, v)?,
            "model.feature_dim" => self.feature_dim = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.epochs_stage1" => self.train.epochs_stage1 = parse(key, v)?,
            "train.epochs_stage2" => self.train.epochs_stage2 = parse(key, v)?,
            "train.stage1_alpha" => self.train.stage1.alpha = parse(key, v)?,
            "train.alpha" => self.train.stage2.alpha = parse(key, v)?,
            "train.momentum" => {
                let m = parse(key, v)?;
                self.train.stage1.momentum = m;
                self.train.stage2.momentum = m;
            }
            "train.weight_decay" => {
                let wd = parse(key, v)?;
                self.train.stage1.weight_decay = wd;
                self.train.stage2.weight_decay = wd;
            }
            "train.freeze_extractor" => self.train.freeze_extractor_stage2 = parse(key, v)?,
            "train.beta" => self.beta = parse(key, v)?,
            "cost.kind" => self.cost.kind = v.parse::<CostKind>()?,
            "cost.label_coeff" => self.cost.label_coeff = parse(key, v)?,
            "q.mode" => self.q_mode = v.parse()?,
            "q.sample_k" => self.q_sample_k = parse(key, v)?,
            "sinkhorn.lambda" => self.sinkhorn.lambda = parse(key, v)?,
            "sinkhorn.max_iter" => self.sinkhorn.max_iter = parse(key, v)?,
            "sinkhorn.tol" => self.sinkhorn.tol = parse(key, v)?,
            "weights.mode" => self.weights_mode = v.parse()?,
            "weights.steps" => self.weights_steps = parse(key, v)?,
            "weightnet.variant" => self.weightnet_variant = v.parse()?,
            "weightnet.hidden" => self.weightnet_hidden = parse(key, v)?,
            "weightnet.reduction" => self.weightnet_reduction = v.parse()?,
            other => return Err(Error::config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Input(msg) => Error::Config(msg),
            other => other,
        };
        if self.runs == 0 {
            return Err(Error::config("runs must be at least 1"));
        }
        if self.hidden == 0 || self.feature_dim == 0 {
            return Err(Error::config("model widths must be positive"));
        }
        if self.data_dir.is_none() {
            self.data.validate().map_err(as_config)?;
        }
        self.train.validate().map_err(as_config)?;
        if self.method.is_ot() {
            self.sinkhorn.validate().map_err(as_config)?;
            if !(self.beta >= 0.0 && self.beta.is_finite()) {
                return Err(Error::config(format!("train.beta must be >= 0, got {}", self.beta)));
            }
            if !(self.cost.label_coeff >= 0.0 && self.cost.label_coeff.is_finite()) {
                return Err(Error::config("cost.label_coeff must be >= 0"));
            }
            if self.q_mode == QMode::RandomSample && !(1..=self.data.num_classes).contains(&self.q_sample_k) {
                return Err(Error::config(format!(
                    "q.sample_k must be in 1..={}, got {}",
                    self.data.num_classes, self.q_sample_k
                )));
            }
            if self.method == Method::OtWeightNet && self.weightnet_hidden == 0 {
                return Err(Error::config("weightnet.hidden must be positive"));
            }
        }
        if self.meta_per_class == 0 {
            return Err(Error::config("data.meta_per_class must be positive"));
        }
        Ok(())
    }

    /// Every applicable key with its resolved value, one per line, in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (key, scope) in KEYS {
            if !scope.applies(self.method) {
                continue;
            }
            let value = match *key {
                "method" => self.method.to_string(),
                "seed" => self.seed.to_string(),
                "runs" => self.runs.to_string(),
                "dump_weights" => self.dump_weights.to_string(),
                "data.dir" => match &self.data_dir {
                    Some(d) => d.display().to_string(),
                    None => continue,
                },
                "data.classes" => self.data.num_classes.to_string(),
                "data.n_head" => self.data.n_head.to_string(),
                "data.imbalance_factor" => self.data.imbalance_factor.to_string(),
                "data.dim" => self.data.dim.to_string(),
                "data.separation" => self.data.class_separation.to_string(),
                "data.test_per_class" => self.data.test_per_class.to_string(),
                "data.meta_per_class" => self.meta_per_class.to_string(),
                "model.hidden" => self.hidden.to_string(),
                "model.feature_dim" => self.feature_dim.to_string(),
                "train.batch_size" => self.train.batch_size.to_string(),
                "train.epochs_stage1" => self.train.epochs_stage1.to_string(),
                "train.epochs_stage2" => self.train.epochs_stage2.to_string(),
                "train.stage1_alpha" => self.train.stage1.alpha.to_string(),
                "train.alpha" => self.train.stage2.alpha.to_string(),
                "train.momentum" => self.train.stage2.momentum.to_string(),
                "train.weight_decay" => self.train.stage2.weight_decay.to_string(),
                "train.freeze_extractor" => self.train.freeze_extractor_stage2.to_string(),
                "train.beta" => self.beta.to_string(),
                "cost.kind" => self.cost.kind.to_string(),
                "cost.label_coeff" => self.cost.label_coeff.to_string(),
                "q.mode" => self.q_mode.to_string(),
                "q.sample_k" => self.q_sample_k.to_string(),
                "sinkhorn.lambda" => self.sinkhorn.lambda.to_string(),
                "sinkhorn.max_iter" => self.sinkhorn.max_iter.to_string(),
                "sinkhorn.tol" => self.sinkhorn.tol.to_string(),
                "weights.mode" => self.weights_mode.to_string(),
                "weights.steps" => self.weights_steps.to_string(),
                "weightnet.variant" => self.weightnet_variant.to_string(),
                "weightnet.hidden" => self.weightnet_hidden.to_string(),
                "weightnet.reduction" => self.weightnet_reduction.to_string(),
                _ => unreachable!("every key is rendered"),
            };
            out.push_str(&format!("{key}={value}\n"));
        }
        out
    }

    /// Hex SHA-256 prefix of the resolved config, ignoring the seed range.
    pub fn fingerprint(&self) -> String {
        let body: String = self
            .to_kv()
            .lines()
            .filter(|l| !l.starts_with("seed=") && !l.starts_with("runs="))
            .map(|l| format!("{l}\n"))
            .collect();
        hex::encode(&Sha256::digest(body.as_bytes())[..8])
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.runs as u64).map(move |r| self.seed.wrapping_add(r))
    }

    /// Stage-2 optimizer.
    pub fn stage2_sgd(&self) -> Sgd {
        self.train.stage2
    }

    /// Short label such as `ot_direct/combined/prototype/maintained`.
    pub fn cell_label(&self) -> String {
        match self.method {
            Method::Ce | Method::Proportion => self.method.to_string(),
            Method::OtDirect => format!("{}/{}/{}/{}", self.method, self.cost.kind, self.q_mode, self.weights_mode),
            Method::OtWeightNet => format!("{}/{}/{}/{}", self.method, self.cost.kind, self.q_mode, self.weightnet_variant),
        }
    }
}
