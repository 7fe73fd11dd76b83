//! Optimizer identities and the end-to-end desk experiment.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use sicdn_core::convnet::checkpoint_hash;
use sicdn_core::datasets::{batches, synth_generate, Dataset, Sample};
use sicdn_core::report::RunReport;
use sicdn_core::rng::{derive_seed, Stream};
use sicdn_core::shap::minmax_normalize;
use sicdn_core::trainer::{pretrain, sicdn_train};
use sicdn_core::update::{adam_update, apply_importance, blended_scale_matrix, normalize_weights, SicdnOptimizer};
use sicdn_core::{
    AdamConfig, AdamState, BackboneConfig, ImportanceMatrix, ImportanceStage, Model, ScaleCadence, ShapConfig,
    SynthConfig, TrainConfig,
};

use crate::{ensure, Gen, Outcome};

fn params_bits(m: &Model) -> Vec<Vec<u32>> {
    m.params().iter().map(|p| p.tensor.data().iter().map(|v| v.to_bits()).collect()).collect()
}

fn small_dataset() -> Dataset {
    synth_generate(&SynthConfig {
        train_per_class: 12,
        val_per_class: 4,
        test_per_class: 4,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn random_scale(gen: &mut Gen, n: usize, k: usize) -> ImportanceMatrix {
    let reduced = ImportanceMatrix::new(n, k, gen.vec(n * k, 0.0, 3.0), ImportanceStage::Reduced).unwrap();
    minmax_normalize(&reduced).unwrap()
}

/// One epoch with `S* = 1` through the trainer equals hand-rolled plain Adam on the same batches.
fn uniform_epoch_is_plain_adam() -> Result<(), String> {
    let ds = small_dataset();
    let start = Model::build(BackboneConfig::tiny()).unwrap();
    let adam = AdamConfig { lr: 1e-3, ..AdamConfig::default() };
    for cadence in [ScaleCadence::PerEpoch, ScaleCadence::PerStep] {
        let cfg = TrainConfig {
            epochs: 1,
            uniform_importance: true,
            scale_cadence: cadence,
            adam,
            seed: 9,
            ..TrainConfig::default()
        };
        let (trained, report) = sicdn_train(&start, &cfg, &ShapConfig::default(), &ds).unwrap();
        ensure!(report.shap_invocations == 0, "uniform run called the explainer");

        let mut plain = start.clone();
        let mut state = AdamState::for_model(&plain, adam);
        let seed = derive_seed(cfg.seed, Stream::TrainBatches, 1);
        for batch in batches(&ds.train, 2, cfg.batch_size, seed).unwrap() {
            let batch = batch.unwrap();
            let (_, grads) = plain.loss_and_grads(&batch.images, &batch.labels).unwrap();
            adam_update(&mut plain, &mut state, &grads).unwrap();
        }
        ensure!(params_bits(&trained) == params_bits(&plain), "{cadence:?}: S* = 1 epoch differs from plain Adam");
    }
    Ok(())
}

fn blend_endpoints() -> Result<(), String> {
    for case in 0..100u64 {
        let mut gen = Gen::new(5000, case);
        let (n, k) = (gen.int(1, 64), gen.int(1, 4));
        let s = random_scale(&mut gen, n, k);
        let w = normalize_weights(&gen.tensor(&[k, n], -2.0, 2.0));
        let one = blended_scale_matrix(&s, &w, 1.0).unwrap();
        let zero = blended_scale_matrix(&s, &w, 0.0).unwrap();
        for i in 0..n {
            for j in 0..k {
                ensure!(one.get(i, j).to_bits() == s.get(i, j).to_bits(), "case {case}: λ=1 differs from S*");
                ensure!(zero.get(i, j).to_bits() == w.data()[j * n + i].to_bits(), "case {case}: λ=0 differs from W*ᵀ");
            }
        }
    }
    Ok(())
}

/// Interleaved refreshes and steps against `apply_importance` followed by plain Adam.
fn per_epoch_matches_composition() -> Result<(), String> {
    let mut gen = Gen::new(5100, 0);
    let adam = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
    let start = Model::build(BackboneConfig::tiny().with_seed(4)).unwrap();
    let (n, k) = (32, 2);
    let mut model = start.clone();
    let mut opt = SicdnOptimizer::new(AdamState::for_model(&model, adam), ScaleCadence::PerEpoch);
    let mut oracle = start.clone();
    let mut state = AdamState::for_model(&oracle, adam);
    for round in 0..5 {
        let scale = random_scale(&mut gen, n, k);
        opt.refresh(&mut model, scale.clone()).unwrap();
        *oracle.fc_weight_mut() = apply_importance(oracle.fc_weight(), &scale).unwrap();
        for _ in 0..4 {
            let grads: Vec<Vec<f32>> = model.params().iter().map(|p| gen.vec(p.tensor.numel(), -1.0, 1.0)).collect();
            opt.step_with_grads(&mut model, &grads).unwrap();
            adam_update(&mut oracle, &mut state, &grads).unwrap();
        }
        ensure!(params_bits(&model) == params_bits(&oracle), "round {round}: per_epoch sequence diverged from oracle");
    }
    Ok(())
}

/// Worst deviation of moments and updates from an f64 Adam written out longhand.
fn adam_reference() -> Result<f64, String> {
    let cfg = AdamConfig::default();
    let sizes = [37usize, 5];
    let mut state = AdamState::new(cfg, &[("a".into(), sizes[0]), ("b".into(), sizes[1])]);
    let mut m: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
    let mut v = m.clone();
    let mut theta_ref = m.clone();
    let mut theta = m.clone();
    let mut gen = Gen::new(5200, 0);
    let mut worst = 0.0f64;
    for t in 1..=100 {
        let grads: Vec<Vec<f32>> = sizes.iter().map(|&s| gen.vec(s, -3.0, 3.0)).collect();
        let deltas = state.step(&grads).unwrap();
        for p in 0..sizes.len() {
            let (mt, vt) = state.moments(p);
            for i in 0..sizes[p] {
                let g = grads[p][i] as f64;
                m[p][i] = cfg.beta1 * m[p][i] + (1.0 - cfg.beta1) * g;
                v[p][i] = cfg.beta2 * v[p][i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[p][i] / (1.0 - cfg.beta1.powi(t));
                let v_hat = v[p][i] / (1.0 - cfg.beta2.powi(t));
                theta_ref[p][i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                theta[p][i] += deltas[p][i];
                for err in [(mt[i] - m[p][i]).abs(), (vt[i] - v[p][i]).abs(), (theta[p][i] - theta_ref[p][i]).abs()] {
                    worst = worst.max(err);
                }
            }
        }
    }
    ensure!(worst <= 1e-10, "Adam deviates from the f64 reference by {worst:.2e}");
    Ok(worst)
}

pub fn update_identities() -> Outcome {
    uniform_epoch_is_plain_adam()?;
    blend_endpoints()?;
    per_epoch_matches_composition()?;
    let worst = adam_reference()?;
    Ok(format!(
        "S*=1 epoch bit-identical (both cadences); blend endpoints exact; per_epoch oracle exact; Adam worst {worst:.1e} over 100 steps"
    ))
}

/// Horizontal stripes vary down the rows, vertical ones across the columns.
fn stripe_oracle(s: &Sample) -> usize {
    let [_, h, w] = [s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]];
    let d = s.image.data();
    let var = |means: Vec<f64>| {
        let mu = means.iter().sum::<f64>() / means.len() as f64;
        means.iter().map(|m| (m - mu).powi(2)).sum::<f64>()
    };
    let row_means = (0..h).map(|r| d[r * w..(r + 1) * w].iter().map(|&v| v as f64).sum::<f64>() / w as f64).collect();
    let col_means = (0..w).map(|c| (0..h).map(|r| d[r * w + c] as f64).sum::<f64>() / h as f64).collect();
    usize::from(var(col_means) > var(row_means))
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/desk_experiment.csv")
}

fn golden_rows(runs: &[(&str, &RunReport)], pretrain_hash: &str) -> String {
    let mut out = String::from("run,top_acc,avg_acc,top_recall,avg_recall,top_f1,avg_f1,top_auc,avg_auc\n");
    for (name, r) in runs {
        let s = r.summary;
        out += &format!(
            "{name},{},{},{},{},{},{},{},{}\n",
            s.top_acc, s.avg_acc, s.top_recall, s.avg_recall, s.top_f1, s.avg_f1, s.top_auc, s.avg_auc
        );
    }
    out + &format!("# pretrained {pretrain_hash}\n")
}

pub const DESK_PRETRAIN_EPOCHS: usize = 10;
pub const DESK_SICDN_EPOCHS: usize = 10;

pub fn desk_experiment() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let (text, detail) = pool.install(|| -> Result<(String, String), String> {
        let ds = synth_generate(&SynthConfig::default()).unwrap();
        for (name, split) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
            let hits = split.iter().filter(|s| stripe_oracle(s) == s.label).count();
            ensure!(hits == split.len(), "separability oracle {hits}/{} on {name}", split.len());
        }
        let base = TrainConfig {
            epochs: DESK_SICDN_EPOCHS,
            pretrain_epochs: Some(DESK_PRETRAIN_EPOCHS),
            seed: 0,
            ..TrainConfig::default()
        };
        let shap = ShapConfig::default();
        let pre = pretrain(&BackboneConfig::tiny(), &base, &ds).unwrap();
        let baseline_cfg = TrainConfig { uniform_importance: true, ..base.clone() };
        let (_, baseline) = sicdn_train(&pre.model, &baseline_cfg, &shap, &ds).unwrap();
        let sicdn_cfg = TrainConfig { lambda: 1.0, scale_cadence: ScaleCadence::PerEpoch, ..base };
        let (_, sicdn) = sicdn_train(&pre.model, &sicdn_cfg, &shap, &ds).unwrap();
        for (name, r) in [("baseline", &baseline), ("sicdn", &sicdn)] {
            ensure!(r.summary.top_acc >= 0.95, "{name} top test accuracy {:.4} < 0.95", r.summary.top_acc);
        }
        let text = golden_rows(&[("baseline", &baseline), ("sicdn", &sicdn)], &checkpoint_hash(&pre.model));
        let detail = format!(
            "top test acc baseline {:.4} ({:.4}), sicdn {:.4} ({:.4})",
            baseline.summary.top_acc, baseline.summary.avg_acc, sicdn.summary.top_acc, sicdn.summary.avg_acc
        );
        Ok((text, detail))
    })?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 300.0, "took {secs:.0}s on one thread");

    let path = golden_path();
    if std::env::var_os("SICDN_BLESS").is_some() {
        fs::write(&path, &text).map_err(|e| format!("writing {}: {e}", path.display()))?;
    }
    let golden = fs::read_to_string(&path).map_err(|e| format!("golden file {}: {e} (set SICDN_BLESS=1 to create)", path.display()))?;
    ensure!(golden == text, "results differ from {}:\n{text}", path.display());
    Ok(format!(
        "{detail}; {DESK_PRETRAIN_EPOCHS}+{DESK_SICDN_EPOCHS} epochs in {secs:.0}s on one thread; matches golden file"
    ))
}
