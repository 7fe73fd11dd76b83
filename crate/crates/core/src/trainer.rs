//! Two-phase protocol: pretrain a plain-Adam baseline and keep the epoch with
//! the best validation accuracy, then continue training with importance
//! scaling of the head. `lambda_sweep` repeats the second phase for several
//! blend weights from one shared pretrained model.

use std::path::PathBuf;

use log::info;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convnet::{checkpoint_hash, save_checkpoint, BackboneConfig, Model};
use crate::datasets::{batches, make_batch, Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{classify_metrics, roc_auc, ClassifyMetrics, RocPoint};
use crate::report::{best_epoch_index, EpochRecord, ReportMode, RunReport, Summary, SweepRow};
use crate::rng::{self, derive_seed, Stream};
use crate::shap::{explain, Explanation, ImportanceMatrix, ShapConfig};
use crate::tensor::Tensor;
use crate::update::{
    adam_update, blended_scale_matrix, normalize_weights, AdamConfig, AdamState, BlendConfig,
    ScaleCadence, SicdnOptimizer,
};

/// Blend weights evaluated by the default sweep.
pub const DEFAULT_LAMBDAS: [f64; 6] = [0.40, 0.45, 0.50, 0.55, 0.60, 1.00];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Defaults to `epochs`.
    pub pretrain_epochs: Option<usize>,
    pub batch_size: usize,
    /// Blend weight for a single run.
    pub lambda: f64,
    /// Blend weights for a sweep.
    pub lambdas: Vec<f64>,
    pub scale_cadence: ScaleCadence,
    /// Epochs between importance recomputations.
    pub shap_refresh: usize,
    /// Samples averaged per importance matrix; defaults to `batch_size`.
    pub shap_batch: Option<usize>,
    /// Replace every importance matrix by all ones (ablation baseline).
    pub uniform_importance: bool,
    pub report_mode: ReportMode,
    pub eval_batch_size: usize,
    pub adam: AdamConfig,
    #[serde(skip)]
    pub seed: u64,
    /// When set, per-epoch checkpoints are written here.
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            pretrain_epochs: None,
            batch_size: 8,
            lambda: 1.0,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            scale_cadence: ScaleCadence::PerEpoch,
            shap_refresh: 1,
            shap_batch: None,
            uniform_importance: false,
            report_mode: ReportMode::PerEpochTest,
            eval_batch_size: 64,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.epochs", self.epochs),
            ("train.batch_size", self.batch_size),
            ("train.shap_refresh", self.shap_refresh),
            ("train.eval_batch_size", self.eval_batch_size),
            ("train.pretrain_epochs", self.pretrain_epochs.unwrap_or(1)),
            ("train.shap_batch", self.shap_batch.unwrap_or(1)),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("train.lambda", format!("{} is outside [0, 1]", self.lambda)));
        }
        if self.lambdas.is_empty() {
            return Err(Error::config("train.lambdas", "list is empty"));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l > 0.0 && **l <= 1.0)) {
            return Err(Error::config("train.lambdas", format!("{l} is outside (0, 1]")));
        }
        self.adam.validate()
    }

    pub fn pretrain_epochs(&self) -> usize {
        self.pretrain_epochs.unwrap_or(self.epochs)
    }

    pub fn shap_batch(&self) -> usize {
        self.shap_batch.unwrap_or(self.batch_size)
    }

    fn blend(&self) -> BlendConfig {
        BlendConfig {
            lambda: self.lambda as f32,
            cadence: self.scale_cadence,
        }
    }
}

/// Test-style metrics of a model on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub metrics: ClassifyMetrics,
    pub auc: f64,
    pub roc: Vec<RocPoint>,
}

/// Accuracy by arg-max (the 0.5 threshold when `k = 2`); recall, F1 and AUC
/// treat class 1 as positive.
pub fn evaluate(model: &Model, samples: &[Sample], batch_size: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let k = model.config().num_classes;
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut argmax_hits = 0usize;
    let order: Vec<usize> = (0..samples.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let batch = make_batch(samples, chunk, k)?;
        let probs = model.predict_proba(&batch.images)?;
        for (row, &i) in chunk.iter().enumerate() {
            let p = probs.row(row);
            scores.push(p[1] as f64);
            labels.push(usize::from(samples[i].label == 1));
            let pred = (0..k).fold(0, |best, j| if p[j] > p[best] { j } else { best });
            argmax_hits += usize::from(pred == samples[i].label);
        }
    }
    let metrics = classify_metrics(&scores, &labels)?;
    let (roc, auc) = roc_auc(&scores, &labels)?;
    let accuracy = if k == 2 {
        metrics.accuracy
    } else {
        argmax_hits as f64 / samples.len() as f64
    };
    Ok(Evaluation {
        accuracy,
        metrics,
        auc,
        roc,
    })
}

/// Keeps the first maximum seen.
#[derive(Debug)]
pub struct BestTracker<T> {
    best: Option<(usize, f64, T)>,
}

impl<T> Default for BestTracker<T> {
    fn default() -> Self {
        BestTracker { best: None }
    }
}

impl<T> BestTracker<T> {
    /// `snapshot` runs only when `score` strictly improves.
    pub fn observe(&mut self, epoch: usize, score: f64, snapshot: impl FnOnce() -> T) {
        if self.best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            self.best = Some((epoch, score, snapshot()));
        }
    }

    pub fn best(&self) -> Option<(usize, f64, &T)> {
        self.best.as_ref().map(|(e, s, t)| (*e, *s, t))
    }

    pub fn into_best(self) -> Option<(usize, f64, T)> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: Model,
    /// 1-based.
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub log: Vec<PretrainRecord>,
}

fn checkpoint_path(cfg: &TrainConfig, parts: &[&str]) -> Option<PathBuf> {
    cfg.checkpoint_dir
        .as_ref()
        .map(|d| parts.iter().fold(d.clone(), |p, s| p.join(s)))
}

fn epoch_file(epoch: usize) -> String {
    format!("epoch_{epoch:03}.sicd")
}

/// Plain Adam from a fresh model; returns the epoch with the highest
/// validation accuracy (earliest on ties).
pub fn pretrain(backbone: &BackboneConfig, cfg: &TrainConfig, ds: &Dataset) -> Result<Pretrained> {
    cfg.validate()?;
    ds.check_nonempty()?;
    let mut model = Model::build(backbone.clone())?;
    check_dataset(&model, ds)?;
    let mut adam = AdamState::for_model(&model, cfg.adam);
    let k = ds.num_classes();
    let mut tracker = BestTracker::default();
    let mut log = Vec::with_capacity(cfg.pretrain_epochs());
    for epoch in 1..=cfg.pretrain_epochs() {
        let ctx = |e: Error| e.context(format!("pretrain epoch {epoch}"));
        let seed = derive_seed(cfg.seed, Stream::PretrainBatches, epoch as u64);
        let mut loss_sum = 0.0f64;
        for batch in batches(&ds.train, k, cfg.batch_size, seed)? {
            let batch = batch?;
            let (loss, grads) = model.loss_and_grads(&batch.images, &batch.labels).map_err(ctx)?;
            adam_update(&mut model, &mut adam, &grads).map_err(ctx)?;
            loss_sum += loss as f64 * batch.indices.len() as f64;
        }
        let val = evaluate(&model, &ds.val, cfg.eval_batch_size).map_err(ctx)?;
        let record = PretrainRecord {
            epoch,
            train_loss: loss_sum / ds.train.len() as f64,
            val_acc: val.accuracy,
        };
        info!("pretrain epoch {epoch}: loss {:.4} val_acc {:.4}", record.train_loss, record.val_acc);
        if let Some(path) = checkpoint_path(cfg, &["pretrain", &epoch_file(epoch)]) {
            save_checkpoint(&model, Some(&adam), &path)?;
        }
        tracker.observe(epoch, val.accuracy, || model.clone());
        log.push(record);
    }
    let (best_epoch, best_val_acc, model) = tracker.into_best().expect("at least one epoch");
    if let Some(path) = checkpoint_path(cfg, &["best_val.sicd"]) {
        save_checkpoint(&model, None, &path)?;
    }
    Ok(Pretrained {
        model,
        best_epoch,
        best_val_acc,
        log,
    })
}

fn check_dataset(model: &Model, ds: &Dataset) -> Result<()> {
    if ds.image_shape != model.config().input {
        return Err(Error::config(
            "backbone.input",
            format!("dataset images are {:?}, model expects {:?}", ds.image_shape, model.config().input),
        ));
    }
    if ds.num_classes() != model.config().num_classes {
        return Err(Error::config(
            "backbone.num_classes",
            format!("dataset has {} classes, model has {}", ds.num_classes(), model.config().num_classes),
        ));
    }
    Ok(())
}

/// Head-input features for `count` distinct training samples drawn from `stream`.
fn sample_features(model: &Model, train: &[Sample], count: usize, seed: u64, stream: Stream, refresh: u64) -> Result<Tensor> {
    let count = count.min(train.len());
    let mut r = rng::rng(seed, stream, refresh);
    let mut picked = index::sample(&mut r, train.len(), count).into_vec();
    picked.sort_unstable();
    let batch = make_batch(train, &picked, model.config().num_classes)?;
    model.extract_features(&batch.images)
}

/// Gradient SHAP of the current head on a seeded `shap_batch` of training
/// features against a seeded background; `refresh` selects the draw.
pub fn explain_model(
    model: &Model,
    cfg: &TrainConfig,
    shap: &ShapConfig,
    train: &[Sample],
    refresh: usize,
) -> Result<Explanation> {
    let r = refresh as u64;
    let targets = sample_features(model, train, cfg.shap_batch(), cfg.seed, Stream::ShapTargets, r)?;
    let background = sample_features(model, train, shap.background_size, cfg.seed, Stream::ShapBackground, r)?;
    let rows: Vec<&[f32]> = (0..background.shape()[0]).map(|i| background.row(i)).collect();
    let shap_cfg = ShapConfig {
        seed: derive_seed(cfg.seed ^ shap.seed.rotate_left(32), Stream::ShapPaths, r),
        ..shap.clone()
    };
    explain(&model.head(), &targets, &rows, &shap_cfg)
}

/// Normalized importance for the current model, blended with the normalized
/// head weights when `λ < 1`.
pub fn importance_for(
    model: &Model,
    cfg: &TrainConfig,
    shap: &ShapConfig,
    train: &[Sample],
    refresh: usize,
) -> Result<ImportanceMatrix> {
    let explanation = explain_model(model, cfg, shap, train, refresh)?;
    blend_with_weights(model, explanation.normalized, cfg.blend())
}

fn blend_with_weights(model: &Model, normalized: ImportanceMatrix, blend: BlendConfig) -> Result<ImportanceMatrix> {
    blend.validate()?;
    if blend.lambda >= 1.0 {
        return Ok(normalized);
    }
    let w_star = normalize_weights(model.fc_weight());
    blended_scale_matrix(&normalized, &w_star, blend.lambda)
}

/// Importance-scaled training from `start`, logging validation and test
/// metrics every epoch.
pub fn sicdn_train(start: &Model, cfg: &TrainConfig, shap: &ShapConfig, ds: &Dataset) -> Result<(Model, RunReport)> {
    cfg.validate()?;
    shap.validate()?;
    ds.check_nonempty()?;
    check_dataset(start, ds)?;
    let mut model = start.clone();
    let mut opt = SicdnOptimizer::new(AdamState::for_model(&model, cfg.adam), cfg.scale_cadence);
    let (n, k) = (model.config().fc_input_width, model.config().num_classes);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut shap_invocations = 0;
    let mut best_roc: Option<(usize, Vec<RocPoint>)> = None;

    for epoch in 1..=cfg.epochs {
        let ctx = |e: Error| e.context(format!("epoch {epoch}"));
        if (epoch - 1) % cfg.shap_refresh == 0 {
            let refresh = (epoch - 1) / cfg.shap_refresh;
            let scale = if cfg.uniform_importance {
                blend_with_weights(&model, ImportanceMatrix::uniform(n, k), cfg.blend())
            } else {
                shap_invocations += 1;
                importance_for(&model, cfg, shap, &ds.train, refresh)
            }
            .map_err(ctx)?;
            opt.refresh(&mut model, scale).map_err(ctx)?;
        }

        let seed = derive_seed(cfg.seed, Stream::TrainBatches, epoch as u64);
        let mut loss_sum = 0.0f64;
        for batch in batches(&ds.train, k, cfg.batch_size, seed)? {
            let batch = batch?;
            let loss = opt.step(&mut model, &batch.images, &batch.labels).map_err(ctx)?;
            loss_sum += loss as f64 * batch.indices.len() as f64;
        }

        let val = evaluate(&model, &ds.val, cfg.eval_batch_size).map_err(ctx)?;
        let test = evaluate(&model, &ds.test, cfg.eval_batch_size).map_err(ctx)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / ds.train.len() as f64,
            val_acc: val.accuracy,
            test_acc: test.accuracy,
            recall: test.metrics.recall,
            f1: test.metrics.f1,
            auc: test.auc,
        };
        info!(
            "epoch {epoch}: loss {:.4} val_acc {:.4} test_acc {:.4} auc {:.4}",
            record.train_loss, record.val_acc, record.test_acc, record.auc
        );
        records.push(record);
        if best_epoch_index(&records, cfg.report_mode) == records.len() - 1 {
            best_roc = Some((epoch, test.roc));
        }
        if let Some(path) = checkpoint_path(cfg, &[&epoch_file(epoch)]) {
            save_checkpoint(&model, Some(opt.adam()), &path)?;
        }
    }

    let summary = Summary::from_records(&records, cfg.report_mode)?;
    let (best_epoch, roc) = best_roc.expect("at least one epoch");
    Ok((
        model,
        RunReport {
            records,
            summary,
            best_epoch,
            roc,
            shap_invocations,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub pretrained_hash: String,
    pub rows: Vec<SweepRow>,
    pub reports: Vec<RunReport>,
    /// Hash of the checkpoint each λ run started from.
    pub start_hashes: Vec<String>,
}

/// One pretrain, then one importance-scaled run per λ, on up to `jobs` threads.
pub fn lambda_sweep(
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
    shap: &ShapConfig,
    ds: &Dataset,
    jobs: usize,
) -> Result<SweepResult> {
    cfg.validate()?;
    let pretrained = pretrain(backbone, cfg, ds)?;
    let pretrained_hash = checkpoint_hash(&pretrained.model);
    let run = |&lambda: &f64| -> Result<(RunReport, String)> {
        let run_cfg = TrainConfig {
            lambda,
            checkpoint_dir: None,
            ..cfg.clone()
        };
        let start_hash = checkpoint_hash(&pretrained.model);
        let (_, report) = sicdn_train(&pretrained.model, &run_cfg, shap, ds)
            .map_err(|e| e.context(format!("lambda {lambda}")))?;
        Ok((report, start_hash))
    };
    let results: Vec<(RunReport, String)> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::config("jobs", e.to_string()))?;
        pool.install(|| cfg.lambdas.par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        cfg.lambdas.iter().map(run).collect::<Result<Vec<_>>>()?
    };
    let rows = cfg
        .lambdas
        .iter()
        .zip(&results)
        .map(|(&lambda, (r, _))| SweepRow {
            lambda,
            summary: r.summary,
        })
        .collect();
    let (reports, start_hashes) = results.into_iter().unzip();
    Ok(SweepResult {
        pretrained_hash,
        rows,
        reports,
        start_hashes,
    })
}
