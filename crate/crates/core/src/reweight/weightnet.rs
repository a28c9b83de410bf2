//! Weight nets: small networks mapping a batch of features to a weight vector
//! on the simplex.
//!
//! * attention: `s_i = w_att . tanh(W_vz z_i)`, `w = softmax(s)`.
//! * self-attention: `P = rowsoftmax((Z W1^T)(Z W2^T)^T / sqrt(d))`, reduced
//!   to a weight vector either by averaging the rows of `P` or by taking its
//!   diagonal and renormalizing.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batch_cost, softmax, Batch, MetaDistribution, WeightUpdate};
use crate::cost::{CostConfig, FeatureBatch};
use crate::error::{Error, Result};
use crate::model::{extract_features, read_tensors, softmax_rows, write_tensors, ModelParams};
use crate::ot::{grad_ot_wrt_source, Marginal, SinkhornConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightNetVariant {
    Attention,
    SelfAttention,
}

impl fmt::Display for WeightNetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightNetVariant::Attention => "attention",
            WeightNetVariant::SelfAttention => "self_attention",
        })
    }
}

impl FromStr for WeightNetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(WeightNetVariant::Attention),
            "self_attention" => Ok(WeightNetVariant::SelfAttention),
            other => Err(Error::config(format!("unknown weight net variant `{other}`"))),
        }
    }
}

/// How the self-attention matrix is reduced to one weight per example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reduction {
    /// `w_j = mean_i P_ij`.
    RowMean,
    /// `w_i = P_ii / sum_k P_kk`.
    Diagonal,
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::RowMean => "row_mean",
            Reduction::Diagonal => "diagonal",
        })
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row_mean" => Ok(Reduction::RowMean),
            "diagonal" => Ok(Reduction::Diagonal),
            other => Err(Error::config(format!("unknown reduction `{other}`"))),
        }
    }
}

/// Weight net parameters. Also used to hold their gradients.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightNetParams {
    Attention {
        /// `A`
        w_att: Array1<f64>,
        /// `A x E`
        w_vz: Array2<f64>,
    },
    SelfAttention {
        /// `d x E`
        w1: Array2<f64>,
        /// `d x E`
        w2: Array2<f64>,
        reduction: Reduction,
    },
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let s = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-s..s))
}

impl WeightNetParams {
    pub fn attention(feature_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if feature_dim == 0 || hidden == 0 {
            return Err(Error::input("weight net dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_vz = uniform(hidden, feature_dim, &mut rng);
        let w_att = uniform(1, hidden, &mut rng).row(0).to_owned();
        Ok(WeightNetParams::Attention { w_att, w_vz })
    }

    pub fn self_attention(feature_dim: usize, hidden: usize, reduction: Reduction, seed: u64) -> Result<Self> {
        if feature_dim == 0 || hidden == 0 {
            return Err(Error::input("weight net dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = uniform(hidden, feature_dim, &mut rng);
        let w2 = uniform(hidden, feature_dim, &mut rng);
        Ok(WeightNetParams::SelfAttention { w1, w2, reduction })
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            WeightNetParams::Attention { w_vz, .. } => w_vz.ncols(),
            WeightNetParams::SelfAttention { w1, .. } => w1.ncols(),
        }
    }

    pub fn variant(&self) -> WeightNetVariant {
        match self {
            WeightNetParams::Attention { .. } => WeightNetVariant::Attention,
            WeightNetParams::SelfAttention { .. } => WeightNetVariant::SelfAttention,
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            WeightNetParams::Attention { w_att, w_vz } => {
                vec![w_att.as_slice_mut().unwrap(), w_vz.as_slice_mut().unwrap()]
            }
            WeightNetParams::SelfAttention { w1, w2, .. } => {
                vec![w1.as_slice_mut().unwrap(), w2.as_slice_mut().unwrap()]
            }
        }
    }

    /// `self -= step * grad`.
    pub fn descend(&mut self, grad: &mut WeightNetParams, step: f64) {
        for (p, g) in self.tensors_mut().into_iter().zip(grad.tensors_mut()) {
            for (pv, gv) in p.iter_mut().zip(g.iter()) {
                *pv -= step * gv;
            }
        }
    }
}

struct AttentionCache {
    hidden: Array2<f64>,
    weights: Vec<f64>,
}

struct SelfAttentionCache {
    queries: Array2<f64>,
    keys: Array2<f64>,
    probs: Array2<f64>,
    weights: Vec<f64>,
}

fn check_input(z: &FeatureBatch, params: &WeightNetParams) -> Result<()> {
    if z.rows() < 2 {
        return Err(Error::input("a weight batch needs at least two examples"));
    }
    if z.dim() != params.feature_dim() {
        return Err(Error::input(format!(
            "weight net expects {} features, got {}",
            params.feature_dim(),
            z.dim()
        )));
    }
    Ok(())
}

fn attention_forward(z: &Array2<f64>, w_att: &Array1<f64>, w_vz: &Array2<f64>) -> AttentionCache {
    let hidden = z.dot(&w_vz.t()).mapv(f64::tanh);
    let scores = hidden.dot(w_att);
    AttentionCache {
        weights: softmax(scores.as_slice().unwrap()),
        hidden,
    }
}

fn self_attention_forward(z: &Array2<f64>, w1: &Array2<f64>, w2: &Array2<f64>, reduction: Reduction) -> SelfAttentionCache {
    let queries = z.dot(&w1.t());
    let keys = z.dot(&w2.t());
    let scale = (w1.nrows() as f64).sqrt();
    let probs = softmax_rows(&(queries.dot(&keys.t()) / scale));
    let weights = match reduction {
        Reduction::RowMean => probs.mean_axis(Axis(0)).unwrap().to_vec(),
        Reduction::Diagonal => {
            let diag = probs.diag();
            let total = diag.sum();
            diag.iter().map(|v| v / total).collect()
        }
    };
    SelfAttentionCache {
        queries,
        keys,
        probs,
        weights,
    }
}

fn forward_weights(z: &FeatureBatch, params: &WeightNetParams) -> Vec<f64> {
    match params {
        WeightNetParams::Attention { w_att, w_vz } => attention_forward(z.values(), w_att, w_vz).weights,
        WeightNetParams::SelfAttention { w1, w2, reduction } => {
            self_attention_forward(z.values(), w1, w2, *reduction).weights
        }
    }
}

/// Weights for a batch of features.
pub fn weight_net_forward(z: &FeatureBatch, params: &WeightNetParams) -> Result<Marginal> {
    check_input(z, params)?;
    let w = forward_weights(z, params);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            layer: 0,
            detail: "weight net produced non-finite weights".into(),
        });
    }
    Marginal::from_unnormalized(&w)
}

/// Gradient of a loss with respect to the weight net parameters, given the
/// loss gradient `dl_dw` with respect to the output weights.
pub fn weight_net_backward(z: &FeatureBatch, params: &WeightNetParams, dl_dw: &[f64]) -> Result<WeightNetParams> {
    check_input(z, params)?;
    if dl_dw.len() != z.rows() {
        return Err(Error::input(format!(
            "gradient has {} entries for {} examples",
            dl_dw.len(),
            z.rows()
        )));
    }
    let zv = z.values();
    match params {
        WeightNetParams::Attention { w_att, w_vz } => {
            let cache = attention_forward(zv, w_att, w_vz);
            let w = &cache.weights;
            let mean: f64 = w.iter().zip(dl_dw).map(|(a, b)| a * b).sum();
            let ds = Array1::from_iter(w.iter().zip(dl_dw).map(|(wi, gi)| wi * (gi - mean)));
            let d_att = cache.hidden.t().dot(&ds);
            let mut dpre = ds.insert_axis(Axis(1)).dot(&w_att.view().insert_axis(Axis(0)));
            dpre.zip_mut_with(&cache.hidden, |d, h| *d *= 1.0 - h * h);
            Ok(WeightNetParams::Attention {
                w_att: d_att,
                w_vz: dpre.t().dot(zv),
            })
        }
        WeightNetParams::SelfAttention { w1, w2, reduction } => {
            let cache = self_attention_forward(zv, w1, w2, *reduction);
            let n = zv.nrows();
            let dp = match reduction {
                Reduction::RowMean => Array2::from_shape_fn((n, n), |(_, j)| dl_dw[j] / n as f64),
                Reduction::Diagonal => {
                    let total = cache.probs.diag().sum();
                    let w = &cache.weights;
                    let mean: f64 = w.iter().zip(dl_dw).map(|(a, b)| a * b).sum();
                    Array2::from_shape_fn((n, n), |(i, j)| if i == j { (dl_dw[i] - mean) / total } else { 0.0 })
                }
            };
            // Row-softmax Jacobian: dS_ij = P_ij (dP_ij - sum_k P_ik dP_ik).
            let row_dot = (&cache.probs * &dp).sum_axis(Axis(1));
            let ds = Array2::from_shape_fn((n, n), |(i, j)| cache.probs[[i, j]] * (dp[[i, j]] - row_dot[i]));
            let scale = (w1.nrows() as f64).sqrt();
            let dq = ds.dot(&cache.keys) / scale;
            let dk = ds.t().dot(&cache.queries) / scale;
            Ok(WeightNetParams::SelfAttention {
                w1: dq.t().dot(zv),
                w2: dk.t().dot(zv),
                reduction: *reduction,
            })
        }
    }
}

/// One gradient step of size `beta` on the weight net, minimizing the
/// transport loss between its batch weights and `Q`. Features come from
/// `model`'s extractor.
pub fn weight_net_update(
    params: &mut WeightNetParams,
    batch: &Batch,
    model: &ModelParams,
    q: &MetaDistribution,
    cost: &CostConfig,
    cfg: &SinkhornConfig,
    beta: f64,
) -> Result<WeightUpdate> {
    let z = extract_features(model, &batch.x)?;
    let w = weight_net_forward(&z, params)?;
    let c = batch_cost(batch, model, q, cost)?;
    let sg = grad_ot_wrt_source(&c, &w, &q.mass, cfg)?;
    let mut grad = weight_net_backward(&z, params, sg.gradient.as_slice().unwrap())?;
    params.descend(&mut grad, beta);
    Ok(WeightUpdate {
        ot_loss: sg.plan.ot_cost,
        converged: sg.converged,
    })
}

/// Saves weight net parameters in the model checkpoint format.
pub fn save_weight_net(params: &WeightNetParams, path: &Path) -> Result<()> {
    let tensors = match params {
        WeightNetParams::Attention { w_att, w_vz } => vec![
            ("attention.w_att".to_string(), w_att.clone().insert_axis(Axis(0))),
            ("attention.w_vz".to_string(), w_vz.clone()),
        ],
        WeightNetParams::SelfAttention { w1, w2, reduction } => vec![
            (format!("self_attention.{reduction}.w1"), w1.clone()),
            (format!("self_attention.{reduction}.w2"), w2.clone()),
        ],
    };
    write_tensors(path, &tensors)
}

pub fn load_weight_net(path: &Path) -> Result<WeightNetParams> {
    let bad = |detail: String| Error::File {
        path: path.to_path_buf(),
        detail,
    };
    let tensors = read_tensors(path)?;
    let [(n1, t1), (n2, t2)] = <[(String, Array2<f64>); 2]>::try_from(tensors)
        .map_err(|t| bad(format!("expected 2 tensors, found {}", t.len())))?;
    let params = match (n1.as_str(), n2.as_str()) {
        ("attention.w_att", "attention.w_vz") if t1.nrows() == 1 => WeightNetParams::Attention {
            w_att: t1.row(0).to_owned(),
            w_vz: t2,
        },
        (a, b) if a.starts_with("self_attention.") && a.ends_with(".w1") && b.ends_with(".w2") => {
            let reduction = a
                .trim_start_matches("self_attention.")
                .trim_end_matches(".w1")
                .parse()
                .map_err(|e: Error| bad(e.to_string()))?;
            WeightNetParams::SelfAttention { w1: t1, w2: t2, reduction }
        }
        _ => return Err(bad(format!("unrecognized tensors `{n1}`, `{n2}`"))),
    };
    let consistent = match &params {
        WeightNetParams::Attention { w_att, w_vz } => w_att.len() == w_vz.nrows(),
        WeightNetParams::SelfAttention { w1, w2, .. } => w1.dim() == w2.dim(),
    };
    if !consistent {
        return Err(bad("tensor shapes do not match".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn features(n: usize, e: usize, seed: u64) -> FeatureBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureBatch::new(Array2::from_shape_fn((n, e), |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    fn nets() -> Vec<WeightNetParams> {
        vec![
            WeightNetParams::attention(4, 6, 1).unwrap(),
            WeightNetParams::self_attention(4, 5, Reduction::RowMean, 2).unwrap(),
            WeightNetParams::self_attention(4, 5, Reduction::Diagonal, 3).unwrap(),
        ]
    }

    #[test]
    fn outputs_lie_on_simplex() {
        let z = features(7, 4, 0);
        for net in nets() {
            let w = weight_net_forward(&z, &net).unwrap();
            assert_eq!(w.len(), 7);
            assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.as_slice().iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn zero_params_give_uniform_weights() {
        let z = features(5, 4, 0);
        let zero = [
            WeightNetParams::Attention {
                w_att: Array1::zeros(3),
                w_vz: Array2::zeros((3, 4)),
            },
            WeightNetParams::SelfAttention {
                w1: Array2::zeros((3, 4)),
                w2: Array2::zeros((3, 4)),
                reduction: Reduction::RowMean,
            },
            WeightNetParams::SelfAttention {
                w1: Array2::zeros((3, 4)),
                w2: Array2::zeros((3, 4)),
                reduction: Reduction::Diagonal,
            },
        ];
        for net in zero {
            let w = weight_net_forward(&z, &net).unwrap();
            assert!(w.as_slice().iter().all(|v| (v - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn permutation_equivariance() {
        let z = features(6, 4, 3);
        let perm = [4, 2, 5, 0, 3, 1];
        let zp = FeatureBatch::new(z.values().select(Axis(0), &perm)).unwrap();
        for net in nets() {
            let w = weight_net_forward(&z, &net).unwrap();
            let wp = weight_net_forward(&zp, &net).unwrap();
            for (k, &p) in perm.iter().enumerate() {
                assert!((wp.as_slice()[k] - w.as_slice()[p]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (i, net) in nets().into_iter().enumerate() {
            let path = dir.path().join(format!("net{i}.csv"));
            save_weight_net(&net, &path).unwrap();
            assert_eq!(load_weight_net(&path).unwrap(), net);
        }
        let path = dir.path().join("model.csv");
        std::fs::write(&path, "name,rows,cols,values\nfoo,1,1,0\n").unwrap();
        assert!(load_weight_net(&path).is_err());
    }

    #[test]
    fn attention_gradient_on_four_examples() {
        let z = features(4, 3, 21);
        let net = WeightNetParams::attention(3, 5, 8).unwrap();
        let c = [1.0, -0.5, 0.25, 2.0];
        let loss = |p: &WeightNetParams| -> f64 {
            forward_weights(&z, p).iter().zip(&c).map(|(w, ci)| w * ci).sum()
        };
        let grad = weight_net_backward(&z, &net, &c).unwrap();
        let WeightNetParams::Attention { w_vz: g_vz, .. } = grad else { unreachable!() };
        for ((r, col), &a) in g_vz.indexed_iter() {
            let h = 1e-6;
            let shifted = |d: f64| {
                let mut p = net.clone();
                if let WeightNetParams::Attention { w_vz, .. } = &mut p {
                    w_vz[[r, col]] += d;
                }
                loss(&p)
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            assert!((numeric - a).abs() <= 1e-4 * a.abs().max(1e-6), "{r},{col}: {numeric} vs {a}");
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let net = WeightNetParams::attention(4, 6, 1).unwrap();
        assert!(weight_net_forward(&features(5, 3, 0), &net).is_err());
        assert!(weight_net_forward(&features(1, 4, 0), &net).is_err());
        assert!(weight_net_backward(&features(5, 4, 0), &net, &[1.0; 4]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let z = features(6, 4, 11);
        let c = [0.3, -1.2, 0.8, 0.1, 2.0, -0.4];
        let loss = |p: &WeightNetParams| -> f64 {
            forward_weights(&z, p).iter().zip(&c).map(|(w, ci)| w * ci).sum()
        };
        for net in nets() {
            let mut grad = weight_net_backward(&z, &net, &c).unwrap();
            let analytic: Vec<f64> = grad.tensors_mut().into_iter().flat_map(|t| t.to_vec()).collect();
            let mut idx = 0;
            let mut probe = net.clone();
            let sizes: Vec<usize> = probe.tensors_mut().iter().map(|t| t.len()).collect();
            for (t, &len) in sizes.iter().enumerate() {
                for k in 0..len {
                    let h = 1e-6;
                    let mut up = net.clone();
                    up.tensors_mut()[t][k] += h;
                    let mut down = net.clone();
                    down.tensors_mut()[t][k] -= h;
                    let numeric = (loss(&up) - loss(&down)) / (2.0 * h);
                    let a = analytic[idx];
                    assert!(
                        (numeric - a).abs() <= 1e-7 + 1e-5 * a.abs(),
                        "{:?} tensor {t} entry {k}: {numeric} vs {a}",
                        net.variant()
                    );
                    idx += 1;
                }
            }
        }
    }

    #[test]
    fn zero_beta_update_leaves_params() {
        use crate::cost::LabelBatch;
        use crate::model::ModelShape;
        use crate::reweight::QMode;

        let model = ModelParams::init(
            &ModelShape {
                input_dim: 3,
                hidden: vec![5],
                feature_dim: 4,
                num_classes: 2,
            },
            0,
        )
        .unwrap();
        let x = features(4, 3, 5).values().clone();
        let batch = Batch {
            indices: vec![0, 1, 2, 3],
            x: x.clone(),
            labels: LabelBatch::new(vec![0, 0, 0, 1], 2).unwrap(),
        };
        let q = MetaDistribution {
            atoms: x.select(Axis(0), &[0, 3]),
            labels: LabelBatch::new(vec![0, 1], 2).unwrap(),
            mass: Marginal::uniform(2).unwrap(),
            mode: QMode::Prototype,
            sample_k: 0,
            prototypes: x.select(Axis(0), &[0, 3]),
        };
        for net in nets() {
            let mut p = net.clone();
            let up = weight_net_update(&mut p, &batch, &model, &q, &CostConfig::default(), &SinkhornConfig::default(), 0.0).unwrap();
            assert_eq!(p, net);
            assert!(up.ot_loss.is_finite());
        }
    }

    proptest! {
        #[test]
        fn equivariant_under_any_permutation(seed in any::<u64>(), perm in Just((0..8).collect::<Vec<usize>>()).prop_shuffle()) {
            let z = features(8, 4, seed);
            let zp = FeatureBatch::new(z.values().select(Axis(0), &perm)).unwrap();
            for net in nets() {
                let w = weight_net_forward(&z, &net).unwrap();
                let wp = weight_net_forward(&zp, &net).unwrap();
                prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (k, &p) in perm.iter().enumerate() {
                    prop_assert!(wp.as_slice()[k] > 0.0);
                    prop_assert!((wp.as_slice()[k] - w.as_slice()[p]).abs() < 1e-14);
                }
            }
        }
    }
}
