//! `sicdn` command line: configuration loading, flag overrides and the
//! train / sweep / explain / evaluate / gen-data commands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Deserializer, Serialize};

use sicdn_core::convnet::load_checkpoint;
use sicdn_core::datasets::{load_dir, synth_generate, write_synthetic, Split};
use sicdn_core::report::{write_report_csv, write_roc_csv, write_sweep_csv};
use sicdn_core::trainer::{evaluate, explain_model, lambda_sweep, pretrain, sicdn_train};
use sicdn_core::{BackboneConfig, Dataset, Error, Result, ScaleCadence, ShapConfig, SynthConfig, TrainConfig};

pub const SEED_ENV: &str = "SICDN_SEED";

/// Backbone given either as a preset name or as a full object.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum BackboneSpec {
    Preset(String),
    Custom(BackboneConfig),
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec::Preset("tiny".into())
    }
}

impl<'de> Deserialize<'de> for BackboneSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(d)?;
        match value {
            serde_json::Value::String(name) => Ok(BackboneSpec::Preset(name)),
            other => serde_json::from_value(other)
                .map(BackboneSpec::Custom)
                .map_err(serde::de::Error::custom),
        }
    }
}

impl BackboneSpec {
    pub fn resolve(&self) -> Result<BackboneConfig> {
        match self {
            BackboneSpec::Preset(name) => BackboneConfig::preset(name),
            BackboneSpec::Custom(cfg) => Ok(cfg.clone()),
        }
    }
}

/// The JSON configuration document. Every field is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    /// `"tiny"`, `"densenet121-analog"` or a backbone object.
    pub backbone: BackboneSpec,
    pub shap: ShapConfig,
    pub train: TrainConfig,
    /// Used when `dataset_path` is unset.
    pub synth: SynthConfig,
    /// Root of a `train/ val/ test/` image tree.
    pub dataset_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            backbone: BackboneSpec::default(),
            shap: ShapConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            dataset_path: None,
            output_dir: PathBuf::from("out"),
            seed: None,
        }
    }
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::config(key, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            let detail = if e.kind() == std::io::ErrorKind::NotFound {
                format!("config file {} not found", path.display())
            } else {
                format!("cannot read {}: {e}", path.display())
            };
            Error::config("--config", detail)
        })?;
        Self::from_json(&text).map_err(|e| e.context(format!("in {}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.resolve()?.validate()?;
        self.shap.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Cadence {
    PerEpoch,
    PerStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sicdn", version, about = "Gradient-SHAP importance scaling for CNN classifiers")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command; each overrides the matching config value.
#[derive(Debug, Default, Args)]
pub struct Common {
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (falls back to the config, then SICDN_SEED, then 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
    /// Image dataset root; the synthetic generator is used when absent.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Backbone preset.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Comma-separated blend weights for `sweep`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long, global = true, value_enum)]
    pub cadence: Option<Cadence>,
    #[arg(long, global = true)]
    pub shap_refresh: Option<usize>,
    #[arg(long, global = true)]
    pub shap_samples: Option<usize>,
    /// Replace SHAP importance by all ones.
    #[arg(long, global = true)]
    pub uniform_importance: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain, then importance-scaled training; writes report.csv, roc.csv and checkpoints.
    Train,
    /// One pretrain, then one run per λ; writes sweep.csv.
    Sweep {
        /// Parallel λ runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Importance matrices of a checkpoint; writes importance.csv.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which seeded sample draw to explain.
        #[arg(long, default_value_t = 0)]
        draw: usize,
    },
    /// Prints metrics of a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Writes the synthetic stripes dataset and its manifest.
    GenData,
}

/// Config file, then flags, then the resolved master seed.
pub fn resolve_config(common: &Common, env_seed: Option<&str>) -> Result<CliConfig> {
    let mut cfg = match &common.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    if let Some(v) = &common.output {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = &common.data {
        cfg.dataset_path = Some(v.clone());
    }
    if let Some(v) = &common.preset {
        cfg.backbone = BackboneSpec::Preset(v.clone());
    }
    let t = &mut cfg.train;
    if let Some(v) = common.epochs {
        t.epochs = v;
    }
    if let Some(v) = common.pretrain_epochs {
        t.pretrain_epochs = Some(v);
    }
    if let Some(v) = common.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = common.lr {
        t.adam.lr = v;
    }
    if let Some(v) = common.lambda {
        t.lambda = v;
    }
    if let Some(v) = &common.lambdas {
        t.lambdas = v.clone();
    }
    if let Some(v) = common.cadence {
        t.scale_cadence = match v {
            Cadence::PerEpoch => ScaleCadence::PerEpoch,
            Cadence::PerStep => ScaleCadence::PerStep,
        };
    }
    if let Some(v) = common.shap_refresh {
        t.shap_refresh = v;
    }
    if common.uniform_importance {
        t.uniform_importance = true;
    }
    if let Some(v) = common.shap_samples {
        cfg.shap.num_path_samples = v;
    }

    let env_seed = env_seed
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| Error::config(SEED_ENV, format!("`{s}` is not a seed: {e}")))
        })
        .transpose()?;
    let seed = common.seed.or(cfg.seed).or(env_seed).unwrap_or(0);
    cfg.seed = Some(seed);
    cfg.train.seed = seed;
    cfg.shap.seed = seed;
    cfg.synth.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

fn backbone(cfg: &CliConfig) -> Result<BackboneConfig> {
    Ok(cfg.backbone.resolve()?.with_seed(cfg.train.seed))
}

fn dataset(cfg: &CliConfig, backbone: &BackboneConfig) -> Result<Dataset> {
    match &cfg.dataset_path {
        Some(root) => load_dir(root, backbone.input),
        None => synth_generate(&cfg.synth),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Runs one command, writing human-readable results to `out`.
pub fn run(command: &Command, cfg: &CliConfig, out: &mut dyn Write) -> Result<()> {
    let dir = &cfg.output_dir;
    let say = |out: &mut dyn Write, line: String| {
        writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
    };
    match command {
        Command::Train => {
            let b = backbone(cfg)?;
            let ds = dataset(cfg, &b)?;
            let train = TrainConfig {
                checkpoint_dir: Some(dir.join("ckpt")),
                ..cfg.train.clone()
            };
            let pre = pretrain(&b, &train, &ds)?;
            let (_, report) = sicdn_train(&pre.model, &train, &cfg.shap, &ds)?;
            write_report_csv(&dir.join("report.csv"), &report.records)?;
            write_roc_csv(&dir.join("roc.csv"), &report.roc)?;
            let s = report.summary;
            say(out, format!("pretrain best epoch {} (val acc {:.4})", pre.best_epoch, pre.best_val_acc))?;
            say(out, format!("acc {:.4} ({:.4})  recall {:.4} ({:.4})", s.top_acc, s.avg_acc, s.top_recall, s.avg_recall))?;
            say(out, format!("f1  {:.4} ({:.4})  auc    {:.4} ({:.4})", s.top_f1, s.avg_f1, s.top_auc, s.avg_auc))?;
        }
        Command::Sweep { jobs } => {
            let b = backbone(cfg)?;
            let ds = dataset(cfg, &b)?;
            let train = TrainConfig {
                checkpoint_dir: Some(dir.join("ckpt")),
                ..cfg.train.clone()
            };
            let result = lambda_sweep(&b, &train, &cfg.shap, &ds, (*jobs).max(1))?;
            write_sweep_csv(&dir.join("sweep.csv"), &result.rows)?;
            for (row, report) in result.rows.iter().zip(&result.reports) {
                let name = format!("lambda_{:.2}", row.lambda);
                write_report_csv(&dir.join("runs").join(format!("{name}.csv")), &report.records)?;
                say(out, format!("λ={:.2}  acc {:.4} ({:.4})  auc {:.4} ({:.4})", row.lambda, row.summary.top_acc, row.summary.avg_acc, row.summary.top_auc, row.summary.avg_auc))?;
            }
        }
        Command::Explain { checkpoint, draw } => {
            let b = backbone(cfg)?;
            let (model, _) = load_checkpoint(checkpoint, &b)?;
            let ds = dataset(cfg, &b)?;
            ds.check_nonempty()?;
            let e = explain_model(&model, &cfg.train, &cfg.shap, &ds.train, *draw)?;
            create_dir(dir)?;
            let path = dir.join("importance.csv");
            let mut text = String::from("feature_index,class_index,s_raw_mean,s_prime,s_star\n");
            let k = e.reduced.classes();
            for i in 0..e.reduced.features() {
                for j in 0..k {
                    text += &format!(
                        "{i},{j},{},{},{}\n",
                        e.raw_mean[i * k + j],
                        e.reduced.get(i, j),
                        e.normalized.get(i, j)
                    );
                }
            }
            fs::write(&path, text).map_err(|err| Error::io(&path, err))?;
            say(out, format!("wrote {}", path.display()))?;
        }
        Command::Evaluate { checkpoint, split } => {
            let b = backbone(cfg)?;
            let (model, _) = load_checkpoint(checkpoint, &b)?;
            let ds = dataset(cfg, &b)?;
            let split = Split::from(*split);
            let ev = evaluate(&model, ds.split(split), cfg.train.eval_batch_size)?;
            let c = ev.metrics.counts;
            say(out, format!("split     {}", split.dir_name()))?;
            say(out, format!("accuracy  {:.6}", ev.accuracy))?;
            say(out, format!("precision {:.6}", ev.metrics.precision))?;
            say(out, format!("recall    {:.6}", ev.metrics.recall))?;
            say(out, format!("f1        {:.6}", ev.metrics.f1))?;
            say(out, format!("auc       {:.6}", ev.auc))?;
            say(out, format!("tp {} fp {} tn {} fn {}", c.tp, c.fp, c.tn, c.fn_))?;
        }
        Command::GenData => {
            let manifest = write_synthetic(&cfg.synth, dir)?;
            say(out, format!("wrote {} classes to {}", manifest.class_names.len(), dir.display()))?;
        }
    }
    Ok(())
}

/// 1 for configuration and shape problems, 2 for data and files, 3 for numerics.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Config { .. }
        | Error::Dimension { .. }
        | Error::Contract(_)
        | Error::CheckpointShape { .. } => 1,
        Error::Data(_)
        | Error::Layout { .. }
        | Error::Decode { .. }
        | Error::CorruptCheckpoint { .. }
        | Error::Io { .. } => 2,
        Error::Numeric(_) | Error::Domain { .. } => 3,
        Error::Context { .. } => unreachable!("root strips context"),
    }
}
