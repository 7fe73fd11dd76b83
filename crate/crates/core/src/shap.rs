//! Gradient SHAP over the classification head's input features.
//!
//! For a target `a`, the attribution of feature `i` to output `j` is the
//! Monte Carlo mean over draws `(a', alpha, eps)` of
//! `d f_j / d a_i` evaluated at `a' + alpha (a - a') + eps`, times `a_i - a'_i`,
//! with `a'` drawn uniformly from a background set, `alpha ~ U(0, 1)` and
//! `eps ~ N(0, noise_std^2)` per feature. Per-sample matrices are then
//! averaged over the batch, made absolute and min-max scaled into `[0, 1]`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Graph, Tensor, Var};

/// How the `(a', alpha)` pairs of one target are drawn. Either way each
/// draw has `a'` uniform over the background and `alpha ~ U(0, 1)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathSampling {
    /// Background rows are dealt in shuffled rounds so each is used equally
    /// often, and the alphas paired with one row fall one per stratum of
    /// `[0, 1]`.
    #[default]
    Stratified,
    /// Every pair drawn independently.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapConfig {
    pub num_path_samples: usize,
    pub noise_std: f64,
    pub background_size: usize,
    /// Take `|S|` per sample before averaging instead of after.
    pub abs_before_mean: bool,
    pub sampling: PathSampling,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ShapConfig {
    fn default() -> Self {
        ShapConfig {
            num_path_samples: 64,
            noise_std: 0.01,
            background_size: 16,
            abs_before_mean: false,
            sampling: PathSampling::Stratified,
            seed: 0,
        }
    }
}

impl ShapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_path_samples == 0 {
            return Err(Error::config("shap.num_path_samples", "must be at least 1"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("shap.noise_std", "must be finite and non-negative"));
        }
        if self.background_size == 0 {
            return Err(Error::config("shap.background_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// A frozen differentiable map from head features to class scores.
pub trait DifferentiableHead: Sync {
    fn input_width(&self) -> usize;
    fn num_outputs(&self) -> usize;
    /// Records the head on `g`, mapping `[batch, input_width]` to `[batch, num_outputs]`.
    fn forward(&self, g: &mut Graph, features: Var) -> Result<Var>;
}

/// `logits = features · Wᵀ + b`, with `W` of shape `[k, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    weight: Tensor,
    bias: Tensor,
}

impl LinearHead {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::Dimension {
                op: "linear head",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(LinearHead { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

impl DifferentiableHead for LinearHead {
    fn input_width(&self) -> usize {
        self.weight.shape()[1]
    }

    fn num_outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    fn forward(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let w = g.leaf(self.weight.clone());
        let b = g.leaf(self.bias.clone());
        g.linear(features, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImportanceStage {
    /// Per-sample attributions `S`.
    Raw,
    /// Batch reduction `S'`, non-negative.
    Reduced,
    /// Min-max normalized `S*`, in `[0, 1]`.
    Normalized,
    /// Convex blend of `S*` with normalized head weights, in `[0, 1]`.
    Blended,
}

/// `n × k` matrix of feature-by-class importances, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMatrix {
    features: usize,
    classes: usize,
    values: Vec<f32>,
    stage: ImportanceStage,
}

impl ImportanceMatrix {
    pub fn new(features: usize, classes: usize, values: Vec<f32>, stage: ImportanceStage) -> Result<Self> {
        if features * classes != values.len() || features == 0 || classes == 0 {
            return Err(Error::Dimension {
                op: "importance matrix",
                lhs: vec![features, classes],
                rhs: vec![values.len()],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("importance matrix".into()));
        }
        let ok = match stage {
            ImportanceStage::Raw => true,
            ImportanceStage::Reduced => values.iter().all(|&v| v >= 0.0),
            ImportanceStage::Normalized | ImportanceStage::Blended => {
                values.iter().all(|&v| (0.0..=1.0).contains(&v))
            }
        };
        if !ok {
            return Err(Error::Contract(format!("values out of range for stage {stage:?}")));
        }
        Ok(ImportanceMatrix {
            features,
            classes,
            values,
            stage,
        })
    }

    /// The all-ones `S*`, under which importance scaling is the identity.
    pub fn uniform(features: usize, classes: usize) -> Self {
        ImportanceMatrix {
            features,
            classes,
            values: vec![1.0; features * classes],
            stage: ImportanceStage::Normalized,
        }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn stage(&self) -> ImportanceStage {
        self.stage
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, feature: usize, class: usize) -> f32 {
        self.values[feature * self.classes + class]
    }

    pub fn is_scale(&self) -> bool {
        matches!(self.stage, ImportanceStage::Normalized | ImportanceStage::Blended)
    }
}

/// Gradient SHAP attributions, one raw `n × k` matrix per row of `targets`.
///
/// Draws for target `t` come from their own seeded stream, so targets are
/// evaluated in parallel without affecting the result.
pub fn gradient_shap(
    head: &dyn DifferentiableHead,
    targets: &Tensor,
    background: &[&[f32]],
    cfg: &ShapConfig,
) -> Result<Vec<ImportanceMatrix>> {
    cfg.validate()?;
    let n = head.input_width();
    if targets.rank() != 2 || targets.shape()[1] != n {
        return Err(Error::Dimension {
            op: "gradient_shap targets",
            lhs: vec![targets.shape()[0], n],
            rhs: targets.shape().to_vec(),
        });
    }
    if background.is_empty() {
        return Err(Error::config("shap.background", "background set is empty"));
    }
    if let Some(bad) = background.iter().find(|row| row.len() != n) {
        return Err(Error::Dimension {
            op: "gradient_shap background",
            lhs: vec![n],
            rhs: vec![bad.len()],
        });
    }
    let noise = (cfg.noise_std > 0.0)
        .then(|| Normal::new(0.0, cfg.noise_std).expect("validated std"));

    (0..targets.shape()[0])
        .into_par_iter()
        .map(|t| attribute_one(head, targets.row(t), background, cfg, noise.as_ref(), t))
        .collect()
}

fn attribute_one(
    head: &dyn DifferentiableHead,
    target: &[f32],
    background: &[&[f32]],
    cfg: &ShapConfig,
    noise: Option<&Normal<f64>>,
    index: usize,
) -> Result<ImportanceMatrix> {
    let n = target.len();
    let k = head.num_outputs();
    let samples = cfg.num_path_samples;
    let mut rng = rng::rng(cfg.seed, Stream::ShapPaths, index as u64);

    let pairs = path_pairs(&mut rng, samples, background.len(), cfg.sampling);
    let mut points = Vec::with_capacity(samples * n);
    let mut displacement = Vec::with_capacity(samples * n);
    for &(row, alpha) in &pairs {
        let base = background[row];
        for i in 0..n {
            let d = target[i] as f64 - base[i] as f64;
            let eps = noise.map_or(0.0, |dist| dist.sample(&mut rng));
            points.push((base[i] as f64 + alpha * d + eps) as f32);
            displacement.push(d);
        }
    }

    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![samples, n], points)?);
    let out = head.forward(&mut g, x)?;
    if g.value(out).shape() != [samples, k] {
        return Err(Error::Dimension {
            op: "head output",
            lhs: vec![samples, k],
            rhs: g.value(out).shape().to_vec(),
        });
    }

    let mut phi = vec![0.0f32; n * k];
    for j in 0..k {
        let mut mask = Tensor::zeros(&[samples, k]);
        for s in 0..samples {
            mask.data_mut()[s * k + j] = 1.0;
        }
        let m = g.leaf(mask);
        let picked = g.mul(out, m)?;
        let total = g.sum(picked)?;
        g.backward(total)?;
        let grad = g.grad(x).expect("input requires grad");
        for i in 0..n {
            let mut acc = 0.0f64;
            for s in 0..samples {
                acc += grad[s * n + i] as f64 * displacement[s * n + i];
            }
            phi[i * k + j] = (acc / samples as f64) as f32;
        }
    }
    ImportanceMatrix::new(n, k, phi, ImportanceStage::Raw)
}

/// `(background row, alpha)` for each path sample.
pub fn path_pairs(rng: &mut rng::Rng, samples: usize, rows: usize, sampling: PathSampling) -> Vec<(usize, f64)> {
    match sampling {
        PathSampling::Independent => (0..samples)
            .map(|_| {
                let alpha: f64 = rng.random();
                (rng.random_range(0..rows), alpha)
            })
            .collect(),
        PathSampling::Stratified => {
            let mut order = Vec::with_capacity(samples + rows);
            while order.len() < samples {
                let mut round: Vec<usize> = (0..rows).collect();
                round.shuffle(rng);
                order.extend(round);
            }
            order.truncate(samples);
            let mut counts = vec![0usize; rows];
            for &r in &order {
                counts[r] += 1;
            }
            let mut strata: Vec<Vec<usize>> = counts
                .iter()
                .map(|&c| {
                    let mut s: Vec<usize> = (0..c).collect();
                    s.shuffle(rng);
                    s
                })
                .collect();
            order
                .into_iter()
                .map(|r| {
                    let stratum = strata[r].pop().expect("one stratum per use");
                    let u: f64 = rng.random();
                    (r, (stratum as f64 + u) / counts[r] as f64)
                })
                .collect()
        }
    }
}

fn check_stack(samples: &[ImportanceMatrix]) -> Result<(usize, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("need at least one attribution matrix".into()))?;
    for s in samples {
        if s.stage != ImportanceStage::Raw {
            return Err(Error::Contract(format!("expected raw attributions, got {:?}", s.stage)));
        }
        if (s.features, s.classes) != (first.features, first.classes) {
            return Err(Error::Dimension {
                op: "attribution stack",
                lhs: vec![first.features, first.classes],
                rhs: vec![s.features, s.classes],
            });
        }
    }
    Ok((first.features, first.classes))
}

/// Signed mean over samples, entry by entry.
pub fn raw_mean(samples: &[ImportanceMatrix]) -> Result<Vec<f64>> {
    let (n, k) = check_stack(samples)?;
    let m = samples.len() as f64;
    Ok((0..n * k)
        .map(|e| samples.iter().map(|s| s.values[e] as f64).sum::<f64>() / m)
        .collect())
}

/// `S'_ij = |(1/m) sum_t S_ijt|`, or the mean of `|S_ijt|` with `abs_before_mean`.
pub fn batch_mean_abs(samples: &[ImportanceMatrix], abs_before_mean: bool) -> Result<ImportanceMatrix> {
    let (n, k) = check_stack(samples)?;
    let m = samples.len() as f64;
    let values = (0..n * k)
        .map(|e| {
            let total: f64 = if abs_before_mean {
                samples.iter().map(|s| (s.values[e] as f64).abs()).sum()
            } else {
                samples.iter().map(|s| s.values[e] as f64).sum()
            };
            (total / m).abs() as f32
        })
        .collect();
    ImportanceMatrix::new(n, k, values, ImportanceStage::Reduced)
}

/// Global min-max scaling into `[0, 1]`; a constant input maps to all ones.
pub(crate) fn minmax_unit(values: &[f32]) -> Vec<f32> {
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == min {
        return vec![1.0; values.len()];
    }
    let span = max as f64 - min as f64;
    values
        .iter()
        .map(|&v| ((v as f64 - min as f64) / span) as f32)
        .collect()
}

/// `S'` to `S*`.
pub fn minmax_normalize(reduced: &ImportanceMatrix) -> Result<ImportanceMatrix> {
    if reduced.stage != ImportanceStage::Reduced {
        return Err(Error::Contract(format!(
            "min-max normalization expects a reduced matrix, got {:?}",
            reduced.stage
        )));
    }
    ImportanceMatrix::new(
        reduced.features,
        reduced.classes,
        minmax_unit(&reduced.values),
        ImportanceStage::Normalized,
    )
}

/// Every stage of one explanation run.
#[derive(Clone, Debug)]
pub struct Explanation {
    pub raw_mean: Vec<f64>,
    pub reduced: ImportanceMatrix,
    pub normalized: ImportanceMatrix,
}

/// Attribution, reduction and normalization in one call.
pub fn explain(
    head: &dyn DifferentiableHead,
    targets: &Tensor,
    background: &[&[f32]],
    cfg: &ShapConfig,
) -> Result<Explanation> {
    let raw = gradient_shap(head, targets, background, cfg)?;
    let reduced = batch_mean_abs(&raw, cfg.abs_before_mean)?;
    let normalized = minmax_normalize(&reduced)?;
    Ok(Explanation {
        raw_mean: raw_mean(&raw)?,
        reduced,
        normalized,
    })
}
