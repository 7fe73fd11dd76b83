//! Small plain CNN backbone followed by one fully connected head.
//!
//! Each stage is `conv(k×k, same padding, no bias) -> relu -> pool`. After the
//! last stage the maps are either globally averaged or flattened into the
//! head's `n` input features, which are what the explainer attributes.

mod checkpoint;

pub use checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint, Checkpoint};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::shap::LinearHead;
use crate::tensor::{kernels, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub channels: usize,
    pub kernel: usize,
}

/// Pooling applied after every stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    None,
    Max2,
    Avg2,
}

/// How the last stage's maps become the head's input vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    GlobalAvg,
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub stages: Vec<Stage>,
    pub pool: Pool,
    pub readout: Readout,
    pub fc_input_width: usize,
    pub num_classes: usize,
    #[serde(skip)]
    pub seed: u64,
}

pub const PRESETS: &[&str] = &["tiny", "densenet121-analog"];

impl BackboneConfig {
    /// 1×32×32 input, three stages, 32 head features, 2 classes.
    pub fn tiny() -> Self {
        BackboneConfig {
            input: [1, 32, 32],
            stages: vec![
                Stage { channels: 8, kernel: 3 },
                Stage { channels: 16, kernel: 3 },
                Stage { channels: 32, kernel: 3 },
            ],
            pool: Pool::Max2,
            readout: Readout::GlobalAvg,
            fc_input_width: 32,
            num_classes: 2,
            seed: 0,
        }
    }

    /// Same head shape as DenseNet-121's classifier: 1024 features into 2 classes.
    pub fn densenet121_analog() -> Self {
        BackboneConfig {
            input: [1, 32, 32],
            stages: vec![
                Stage { channels: 16, kernel: 3 },
                Stage { channels: 32, kernel: 3 },
                Stage { channels: 64, kernel: 3 },
                Stage { channels: 1024, kernel: 1 },
            ],
            pool: Pool::Max2,
            readout: Readout::GlobalAvg,
            fc_input_width: 1024,
            num_classes: 2,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "densenet121-analog" => Ok(Self::densenet121_analog()),
            other => Err(Error::config(
                "backbone",
                format!("unknown preset `{other}`, expected one of {PRESETS:?}"),
            )),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Width of the flattened feature vector this config produces.
    pub fn feature_width(&self) -> Result<usize> {
        let [c, mut h, mut w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config("backbone.input", "dimensions must be positive"));
        }
        if self.stages.is_empty() {
            return Err(Error::config("backbone.stages", "at least one stage is required"));
        }
        let mut channels = c;
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.channels == 0 || stage.kernel == 0 {
                return Err(Error::config(
                    format!("backbone.stages[{i}]"),
                    "channels and kernel must be positive",
                ));
            }
            let pad = stage.kernel / 2;
            let (Some(nh), Some(nw)) = (
                kernels::conv_out_dim(h, stage.kernel, 1, pad),
                kernels::conv_out_dim(w, stage.kernel, 1, pad),
            ) else {
                return Err(Error::config(
                    format!("backbone.stages[{i}].kernel"),
                    format!("kernel {} larger than padded {h}x{w} input", stage.kernel),
                ));
            };
            (h, w) = (nh, nw);
            if self.pool != Pool::None {
                if h < 2 || w < 2 {
                    return Err(Error::config(
                        format!("backbone.stages[{i}]"),
                        format!("{h}x{w} map too small to pool"),
                    ));
                }
                (h, w) = (h / 2, w / 2);
            }
            channels = stage.channels;
        }
        Ok(match self.readout {
            Readout::GlobalAvg => channels,
            Readout::Flatten => channels * h * w,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.feature_width()?;
        if width != self.fc_input_width {
            return Err(Error::config(
                "backbone.fc_input_width",
                format!(
                    "backbone produces {width} features but fc_input_width is {}",
                    self.fc_input_width
                ),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config(
                "backbone.num_classes",
                format!("need at least 2 classes, got {}", self.num_classes),
            ));
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::with_capacity(self.stages.len() + 2);
        let mut in_ch = self.input[0];
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![s.channels, in_ch, s.kernel, s.kernel]));
            in_ch = s.channels;
        }
        out.push(("fc.weight".into(), vec![self.num_classes, self.fc_input_width]));
        out.push(("fc.bias".into(), vec![self.num_classes]));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Output of a differentiable forward pass.
pub struct ForwardTrace {
    pub params: Vec<Var>,
    pub features: Var,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: BackboneConfig,
    params: Vec<Param>,
}

impl Model {
    /// Fan-in scaled uniform init `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero bias.
    pub fn build(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng(config.seed, Stream::Init, 0);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![0.0; numel]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
                };
                Param {
                    name,
                    tensor: Tensor::new(shape, data).expect("shape from config"),
                }
            })
            .collect();
        Ok(Model { config, params })
    }

    /// Assembles a model from named tensors, checking names and shapes against `config`.
    pub fn from_params(config: BackboneConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::CheckpointShape {
                name: "<parameter count>".into(),
                expected: vec![expected.len()],
                found: vec![params.len()],
            });
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.tensor.shape() {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: p.tensor.shape().to_vec(),
                });
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn fc_weight_index(&self) -> usize {
        self.params.len() - 2
    }

    pub fn fc_weight(&self) -> &Tensor {
        &self.params[self.fc_weight_index()].tensor
    }

    pub fn fc_weight_mut(&mut self) -> &mut Tensor {
        let idx = self.fc_weight_index();
        &mut self.params[idx].tensor
    }

    pub fn fc_bias(&self) -> &Tensor {
        &self.params[self.params.len() - 1].tensor
    }

    /// Frozen copy of the classification head.
    pub fn head(&self) -> LinearHead {
        LinearHead::new(self.fc_weight().clone(), self.fc_bias().clone())
            .expect("head shapes follow the config")
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let [c, h, w] = self.config.input;
        if batch.rank() != 4 || batch.shape()[1..] != [c, h, w] {
            let mut expected = vec![batch.shape().first().copied().unwrap_or(1)];
            expected.extend_from_slice(&self.config.input);
            return Err(Error::Dimension {
                op: "model input",
                lhs: expected,
                rhs: batch.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Records the full network on `g`. Parameters become gradient leaves when `trainable`.
    pub fn trace(&self, g: &mut Graph, batch: Tensor, trainable: bool) -> Result<ForwardTrace> {
        self.check_input(&batch)?;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                let t = p.tensor.clone();
                if trainable {
                    g.param(t)
                } else {
                    g.leaf(t)
                }
            })
            .collect();
        let mut x = g.leaf(batch);
        for (i, stage) in self.config.stages.iter().enumerate() {
            x = g.conv2d(x, params[i], 1, stage.kernel / 2)?;
            x = g.relu(x)?;
            x = match self.config.pool {
                Pool::None => x,
                Pool::Max2 => g.max_pool2d(x, 2)?,
                Pool::Avg2 => g.avg_pool2d(x, 2)?,
            };
        }
        let features = match self.config.readout {
            Readout::GlobalAvg => g.global_avg_pool(x)?,
            Readout::Flatten => g.flatten(x)?,
        };
        let n = self.params.len();
        let logits = g.linear(features, params[n - 2], params[n - 1])?;
        Ok(ForwardTrace {
            params,
            features,
            logits,
        })
    }

    /// Class logits `[batch, k]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let trace = self.trace(&mut g, batch.clone(), false)?;
        Ok(g.value(trace.logits).clone())
    }

    /// The flattened head input `[batch, n]`, exactly what `forward` feeds the head.
    pub fn extract_features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let trace = self.trace(&mut g, batch.clone(), false)?;
        Ok(g.value(trace.features).clone())
    }

    /// Softmax class probabilities `[batch, k]`.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(kernels::softmax(&self.forward(batch)?))
    }

    /// Cross-entropy of softmax(logits) against one-hot `labels` and its
    /// gradient for every parameter, in parameter order.
    pub fn loss_and_grads(&self, batch: &Tensor, labels: &Tensor) -> Result<(f32, Vec<Vec<f32>>)> {
        let mut g = Graph::new();
        let trace = self.trace(&mut g, batch.clone(), true)?;
        let probs = g.softmax(trace.logits)?;
        let loss = g.cross_entropy(probs, labels)?;
        g.backward(loss)?;
        let grads = trace
            .params
            .iter()
            .map(|&p| g.grad(p).expect("trainable leaf").to_vec())
            .collect();
        Ok((g.value(loss).data()[0], grads))
    }
}
