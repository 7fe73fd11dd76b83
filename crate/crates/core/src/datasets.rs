//! Image datasets: a `root/{train,val,test}/{class}/*.png` loader, a
//! synthetic stripes generator and seeded mini-batching.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[c, h, w]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub image_shape: [usize; 3],
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Per-class sample counts for one split.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in self.split(split) {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn check_nonempty(&self) -> Result<()> {
        for split in SPLITS {
            if self.split(split).is_empty() {
                return Err(Error::Data(format!("split `{}` is empty", split.dir_name())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// `[c, h, w]`
    pub image_size: [usize; 3],
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub stripe_period: usize,
    pub foreground: f32,
    pub background: f32,
    pub noise_std: f32,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: [1, 32, 32],
            train_per_class: 200,
            val_per_class: 40,
            test_per_class: 40,
            stripe_period: 4,
            foreground: 1.0,
            background: 0.0,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size.contains(&0) {
            return Err(Error::config("synth.image_size", "dimensions must be positive"));
        }
        if self.stripe_period == 0 {
            return Err(Error::config("synth.stripe_period", "must be positive"));
        }
        for (key, v) in [("synth.foreground", self.foreground), ("synth.background", self.background)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, "intensity must lie in [0, 1]"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("synth.noise_std", "must be finite and non-negative"));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("synth", "every split needs at least one sample per class"));
        }
        Ok(())
    }
}

pub const SYNTH_CLASSES: [&str; 2] = ["horizontal", "vertical"];

/// Class 0 lights rows `r` with `floor(r / period)` even, class 1 does the
/// same for columns. Seeded Gaussian noise is added and clamped to `[0, 1]`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let [c, h, w] = cfg.image_size;
    let mut rng = rng::rng(cfg.seed, Stream::Synth, 0);
    let noise = (cfg.noise_std > 0.0)
        .then(|| Normal::new(0.0f32, cfg.noise_std).expect("validated std"));
    let mut make_split = |per_class: usize| -> Vec<Sample> {
        let mut out = Vec::with_capacity(per_class * 2);
        for _ in 0..per_class {
            for label in 0..2 {
                let mut data = Vec::with_capacity(c * h * w);
                for _ in 0..c {
                    for r in 0..h {
                        for col in 0..w {
                            let band = if label == 0 { r } else { col } / cfg.stripe_period;
                            let base = if band.is_multiple_of(2) { cfg.foreground } else { cfg.background };
                            let eps = noise.as_ref().map_or(0.0, |n| n.sample(&mut rng));
                            data.push((base + eps).clamp(0.0, 1.0));
                        }
                    }
                }
                out.push(Sample {
                    image: Tensor::new(vec![c, h, w], data).expect("shape from config"),
                    label,
                });
            }
        }
        out
    };
    let train = make_split(cfg.train_per_class);
    let val = make_split(cfg.val_per_class);
    let test = make_split(cfg.test_per_class);
    Ok(Dataset {
        class_names: SYNTH_CLASSES.iter().map(|s| s.to_string()).collect(),
        image_shape: cfg.image_size,
        train,
        val,
        test,
    })
}

fn layout_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Layout {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| layout_err(dir, e.to_string()))?;
    let mut out = rd
        .map(|e| e.map(|e| e.path()).map_err(|err| layout_err(dir, err.to_string())))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn decode(path: &Path, [c, h, w]: [usize; 3]) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let data: Vec<f32> = match c {
        1 => {
            let g = image::imageops::resize(&img.to_luma8(), w as u32, h as u32, FilterType::Nearest);
            g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
        }
        3 => {
            let rgb = image::imageops::resize(&img.to_rgb8(), w as u32, h as u32, FilterType::Nearest);
            let raw = rgb.into_raw();
            // HWC -> CHW
            (0..3)
                .flat_map(|ch| raw.iter().skip(ch).step_by(3).map(|&v| v as f32 / 255.0).collect::<Vec<_>>())
                .collect()
        }
        other => {
            return Err(Error::config(
                "backbone.input",
                format!("images must have 1 or 3 channels, got {other}"),
            ))
        }
    };
    Tensor::new(vec![c, h, w], data)
}

/// Loads PNGs from `root/{train,val,test}/{class}/`, classes in lexicographic
/// order of their directory names, resized (nearest neighbour) to `shape`.
pub fn load_dir(root: &Path, shape: [usize; 3]) -> Result<Dataset> {
    if shape.contains(&0) {
        return Err(Error::config("backbone.input", "dimensions must be positive"));
    }
    let mut class_names: Option<Vec<String>> = None;
    let mut files: Vec<(Split, usize, PathBuf)> = Vec::new();
    for split in SPLITS {
        let dir = root.join(split.dir_name());
        if !dir.is_dir() {
            return Err(layout_err(&dir, "missing split directory"));
        }
        let classes: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()).collect();
        let names: Vec<String> = classes
            .iter()
            .map(|p| p.file_name().expect("entry").to_string_lossy().into_owned())
            .collect();
        if names.is_empty() {
            return Err(layout_err(&dir, "no class directories"));
        }
        match &class_names {
            None => class_names = Some(names.clone()),
            Some(expected) if *expected != names => {
                return Err(layout_err(
                    &dir,
                    format!("classes {names:?} differ from train classes {expected:?}"),
                ))
            }
            Some(_) => {}
        }
        for (label, class_dir) in classes.iter().enumerate() {
            let pngs: Vec<PathBuf> = sorted_entries(class_dir)?
                .into_iter()
                .filter(|p| {
                    p.is_file()
                        && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
                })
                .collect();
            if pngs.is_empty() {
                return Err(layout_err(class_dir, "no .png images"));
            }
            files.extend(pngs.into_iter().map(|p| (split, label, p)));
        }
    }
    let class_names = class_names.expect("train split visited");
    if class_names.len() < 2 {
        return Err(layout_err(root, "need at least two classes"));
    }

    let mut seen = HashSet::new();
    for (_, _, p) in &files {
        let id = fs::canonicalize(p).map_err(|e| Error::io(p, e))?;
        if !seen.insert(id) {
            return Err(layout_err(p, "file appears in more than one split"));
        }
    }

    let images = files
        .par_iter()
        .map(|(_, _, p)| decode(p, shape))
        .collect::<Result<Vec<_>>>()?;

    let mut ds = Dataset {
        class_names,
        image_shape: shape,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for ((split, label, _), image) in files.into_iter().zip(images) {
        let sample = Sample { image, label };
        match split {
            Split::Train => ds.train.push(sample),
            Split::Val => ds.val.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    Ok(ds)
}

/// Summary written next to a generated dataset.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub counts: BTreeMap<Split, BTreeMap<String, usize>>,
    pub seed: u64,
    pub generator: SynthConfig,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `dataset` as 8-bit PNGs in the loader's layout.
pub fn write_dir(dataset: &Dataset, root: &Path) -> Result<()> {
    let [c, h, w] = dataset.image_shape;
    for split in SPLITS {
        let mut per_class = vec![0usize; dataset.num_classes()];
        for sample in dataset.split(split) {
            let dir = root.join(split.dir_name()).join(&dataset.class_names[sample.label]);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(format!("{:05}.png", per_class[sample.label]));
            per_class[sample.label] += 1;
            let d = sample.image.data();
            let saved = match c {
                1 => image::GrayImage::from_raw(w as u32, h as u32, d.iter().map(|&v| to_u8(v)).collect())
                    .expect("buffer size")
                    .save(&path),
                3 => {
                    let plane = h * w;
                    let hwc = (0..plane).flat_map(|p| (0..3).map(move |ch| to_u8(d[ch * plane + p]))).collect();
                    image::RgbImage::from_raw(w as u32, h as u32, hwc).expect("buffer size").save(&path)
                }
                other => {
                    return Err(Error::config("synth.image_size", format!("cannot write {other}-channel PNG")))
                }
            };
            saved.map_err(|e| Error::Decode {
                path: path.clone(),
                detail: e.to_string(),
            })?;
        }
    }
    Ok(())
}

/// Generates the synthetic dataset under `root` and writes `manifest.json`.
pub fn write_synthetic(cfg: &SynthConfig, root: &Path) -> Result<Manifest> {
    let ds = synth_generate(cfg)?;
    write_dir(&ds, root)?;
    let mut counts = BTreeMap::new();
    for split in SPLITS {
        let per_class = ds
            .class_names
            .iter()
            .cloned()
            .zip(ds.class_counts(split))
            .collect();
        counts.insert(split, per_class);
    }
    let manifest = Manifest {
        class_names: ds.class_names.clone(),
        counts,
        seed: cfg.seed,
        generator: cfg.clone(),
    };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// One mini-batch: images `[b, c, h, w]`, one-hot labels `[b, k]`, and the
/// split indices the rows came from.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Tensor,
    pub indices: Vec<usize>,
}

/// Stacks the given samples into a batch.
pub fn make_batch(samples: &[Sample], indices: &[usize], num_classes: usize) -> Result<Batch> {
    let imgs: Vec<&Tensor> = indices.iter().map(|&i| &samples[i].image).collect();
    let images = Tensor::stack(&imgs)?;
    let mut labels = Tensor::zeros(&[indices.len(), num_classes]);
    for (row, &i) in indices.iter().enumerate() {
        let l = samples[i].label;
        if l >= num_classes {
            return Err(Error::Data(format!("label {l} out of range for {num_classes} classes")));
        }
        labels.data_mut()[row * num_classes + l] = 1.0;
    }
    Ok(Batch {
        images,
        labels,
        indices: indices.to_vec(),
    })
}

/// Seeded shuffle, then consecutive chunks; the last batch may be short.
pub fn batches<'a>(
    samples: &'a [Sample],
    num_classes: usize,
    batch_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    if batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng::rng(seed, Stream::TrainBatches, 0));
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    Ok(chunks
        .into_iter()
        .map(move |idx| make_batch(samples, &idx, num_classes)))
}
