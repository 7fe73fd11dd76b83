//! Weight-update rules: Adam with bias correction, importance scaling of the
//! head weights, min-max normalized weights and the λ blend of the two.
//!
//! Importance scaling is a Hadamard product: head weight `W[j, i]` (class
//! `j`, feature `i`) is multiplied by `S*[i, j]`. Only the head weight is
//! scaled; its bias and the backbone get plain Adam updates.

use serde::{Deserialize, Serialize};

use crate::convnet::Model;
use crate::error::{Error, Result};
use crate::shap::{minmax_unit, ImportanceMatrix, ImportanceStage};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("adam.lr", "must be positive"));
        }
        for (key, b) in [("adam.beta1", self.beta1), ("adam.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("adam.eps", "must be positive"));
        }
        Ok(())
    }
}

/// Per-parameter first and second moments, kept in 64-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    t: u64,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[(String, usize)]) -> Self {
        AdamState {
            config,
            t: 0,
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            m: params.iter().map(|&(_, len)| vec![0.0; len]).collect(),
            v: params.iter().map(|&(_, len)| vec![0.0; len]).collect(),
        }
    }

    pub fn for_model(model: &Model, config: AdamConfig) -> Self {
        let params: Vec<(String, usize)> = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.numel()))
            .collect();
        Self::new(config, &params)
    }

    pub fn from_parts(
        config: AdamConfig,
        t: u64,
        names: Vec<String>,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if names.len() != m.len() || m.len() != v.len() {
            return Err(Error::Contract("adam buffers disagree in count".into()));
        }
        for (i, (mi, vi)) in m.iter().zip(&v).enumerate() {
            if mi.len() != vi.len() {
                return Err(Error::Contract(format!("adam buffers for `{}` differ in length", names[i])));
            }
            if vi.iter().any(|&x| !(x >= 0.0)) || mi.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("adam moments for `{}`", names[i])));
            }
        }
        Ok(AdamState { config, t, names, m, v })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn moments(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.m[i], &self.v[i])
    }

    /// Advances `t` by one and returns the update `-lr * m_hat / (sqrt(v_hat) + eps)`
    /// for every parameter. The state is untouched when a gradient is non-finite.
    pub fn step(&mut self, grads: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != self.m[i].len() {
                return Err(Error::Dimension {
                    op: "adam gradient",
                    lhs: vec![self.m[i].len()],
                    rhs: vec![g.len()],
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("gradient of `{}`", self.names[i])));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let mut deltas = Vec::with_capacity(grads.len());
        for ((g, m), v) in grads.iter().zip(&mut self.m).zip(&mut self.v) {
            let mut d = Vec::with_capacity(g.len());
            for ((&gi, mi), vi) in g.iter().zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                d.push(-lr * m_hat / (v_hat.sqrt() + eps));
            }
            deltas.push(d);
        }
        Ok(deltas)
    }
}

/// `w <- w + delta`, rounded to f32.
pub fn apply_delta(weights: &mut [f32], delta: &[f64]) {
    for (w, &d) in weights.iter_mut().zip(delta) {
        *w = (*w as f64 + d) as f32;
    }
}

/// One plain Adam step over every model parameter.
pub fn adam_update(model: &mut Model, adam: &mut AdamState, grads: &[Vec<f32>]) -> Result<()> {
    let deltas = adam.step(grads)?;
    for (p, d) in model.params_mut().iter_mut().zip(&deltas) {
        apply_delta(p.tensor.data_mut(), d);
        p.tensor.ensure_finite(&p.name)?;
    }
    Ok(())
}

fn check_scale_shape(weights: &Tensor, scale: &ImportanceMatrix) -> Result<(usize, usize)> {
    if !scale.is_scale() {
        return Err(Error::Contract(format!(
            "importance scaling needs a normalized or blended matrix, got {:?}",
            scale.stage()
        )));
    }
    if weights.rank() != 2 || weights.shape() != [scale.classes(), scale.features()] {
        return Err(Error::Dimension {
            op: "importance scaling (weights [k,n] vs importance [n,k])",
            lhs: weights.shape().to_vec(),
            rhs: vec![scale.features(), scale.classes()],
        });
    }
    Ok((scale.classes(), scale.features()))
}

/// `W'[j, i] = S[i, j] * W[j, i]`.
pub fn apply_importance(weights: &Tensor, scale: &ImportanceMatrix) -> Result<Tensor> {
    let (k, n) = check_scale_shape(weights, scale)?;
    let mut out = weights.clone();
    let data = out.data_mut();
    for j in 0..k {
        for i in 0..n {
            data[j * n + i] *= scale.get(i, j);
        }
    }
    Ok(out)
}

/// Global min-max scaling of the weights into `[0, 1]`; constant weights give all ones.
pub fn normalize_weights(weights: &Tensor) -> Tensor {
    Tensor::new(weights.shape().to_vec(), minmax_unit(weights.data())).expect("same shape")
}

/// `B = λ S* + (1 - λ) W*ᵀ`, an `n × k` scale matrix.
pub fn blended_scale_matrix(
    importance: &ImportanceMatrix,
    normalized_weights: &Tensor,
    lambda: f32,
) -> Result<ImportanceMatrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("lambda", format!("{lambda} is outside [0, 1]")));
    }
    if importance.stage() != ImportanceStage::Normalized {
        return Err(Error::Contract(format!(
            "blend expects a normalized importance matrix, got {:?}",
            importance.stage()
        )));
    }
    let (k, n) = check_scale_shape(normalized_weights, importance)?;
    let w = normalized_weights.data();
    let mut values = Vec::with_capacity(n * k);
    for i in 0..n {
        for j in 0..k {
            values.push(lambda * importance.get(i, j) + (1.0 - lambda) * w[j * n + i]);
        }
    }
    ImportanceMatrix::new(n, k, values, ImportanceStage::Blended)
}

/// When importance scaling touches the head weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleCadence {
    /// Once, when a new importance matrix is installed.
    PerEpoch,
    /// Inside every optimizer step: `W <- S ∘ W + delta`.
    PerStep,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendConfig {
    pub lambda: f32,
    pub cadence: ScaleCadence,
}

impl BlendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", format!("{} is outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// Adam plus importance scaling of the head weight.
#[derive(Clone, Debug)]
pub struct SicdnOptimizer {
    adam: AdamState,
    cadence: ScaleCadence,
    scale: Option<ImportanceMatrix>,
}

impl SicdnOptimizer {
    pub fn new(adam: AdamState, cadence: ScaleCadence) -> Self {
        SicdnOptimizer {
            adam,
            cadence,
            scale: None,
        }
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn into_adam(self) -> AdamState {
        self.adam
    }

    pub fn scale(&self) -> Option<&ImportanceMatrix> {
        self.scale.as_ref()
    }

    /// Installs a new scale matrix. With [`ScaleCadence::PerEpoch`] the head
    /// weight is scaled right away.
    pub fn refresh(&mut self, model: &mut Model, scale: ImportanceMatrix) -> Result<()> {
        check_scale_shape(model.fc_weight(), &scale)?;
        if self.cadence == ScaleCadence::PerEpoch {
            let scaled = apply_importance(model.fc_weight(), &scale)?;
            *model.fc_weight_mut() = scaled;
        }
        self.scale = Some(scale);
        Ok(())
    }

    /// Cross-entropy gradients on `(images, labels)` followed by [`Self::step_with_grads`].
    pub fn step(&mut self, model: &mut Model, images: &Tensor, labels: &Tensor) -> Result<f32> {
        let (loss, grads) = model.loss_and_grads(images, labels)?;
        self.step_with_grads(model, &grads)?;
        Ok(loss)
    }

    pub fn step_with_grads(&mut self, model: &mut Model, grads: &[Vec<f32>]) -> Result<()> {
        match self.cadence {
            ScaleCadence::PerEpoch => adam_update(model, &mut self.adam, grads),
            ScaleCadence::PerStep => {
                let scale = self.scale.as_ref().ok_or_else(|| {
                    Error::Contract("per-step scaling needs an importance matrix; call refresh first".into())
                })?;
                let (k, n) = check_scale_shape(model.fc_weight(), scale).map_err(|e| {
                    Error::Contract(format!("stale importance matrix: {e}"))
                })?;
                let deltas = self.adam.step(grads)?;
                let fc = model.fc_weight_index();
                for (idx, (p, d)) in model.params_mut().iter_mut().zip(&deltas).enumerate() {
                    if idx == fc {
                        let w = p.tensor.data_mut();
                        for j in 0..k {
                            for i in 0..n {
                                let e = j * n + i;
                                w[e] = ((scale.get(i, j) * w[e]) as f64 + d[e]) as f32;
                            }
                        }
                    } else {
                        apply_delta(p.tensor.data_mut(), d);
                    }
                    p.tensor.ensure_finite(&p.name)?;
                }
                Ok(())
            }
        }
    }
}
