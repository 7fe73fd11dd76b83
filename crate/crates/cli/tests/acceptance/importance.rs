//! Attribution oracles, normalization properties and the noise-feature test.

use rand_distr::{Distribution, Normal};
use sicdn_core::datasets::{make_batch, synth_generate};
use sicdn_core::shap::{explain, gradient_shap, minmax_normalize, DifferentiableHead};
use sicdn_core::trainer::pretrain;
use sicdn_core::update::normalize_weights;
use sicdn_core::{
    AdamConfig, BackboneConfig, Graph, ImportanceMatrix, ImportanceStage, LinearHead, Result,
    ShapConfig, SynthConfig, Tensor, TrainConfig, Var,
};

use crate::{ensure, Gen, Outcome};

fn rows(t: &Tensor) -> Vec<&[f32]> {
    (0..t.shape()[0]).map(|i| t.row(i)).collect()
}

fn shap(samples: usize, noise: f64, seed: u64) -> ShapConfig {
    ShapConfig {
        num_path_samples: samples,
        noise_std: noise,
        seed,
        ..ShapConfig::default()
    }
}

pub fn linear_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let mut gen = Gen::new(3000, case);
        let (n, k) = (gen.int(1, 20), gen.int(1, 4));
        let samples = [1, 2, 3, 7, 16, 64][case as usize % 6];
        let head = LinearHead::new(gen.tensor(&[k, n], -1.0, 1.0), gen.tensor(&[k], -1.0, 1.0)).unwrap();
        let target = gen.tensor(&[1, n], -1.0, 1.0);
        let background = gen.tensor(&[1, n], -1.0, 1.0);
        let phi = gradient_shap(&head, &target, &rows(&background), &shap(samples, 0.0, case)).unwrap();
        for i in 0..n {
            for j in 0..k {
                let exact = head.weight().data()[j * n + i] as f64
                    * (target.data()[i] as f64 - background.data()[i] as f64);
                let err = (phi[0].get(i, j) as f64 - exact).abs();
                ensure!(err <= 1e-6, "case {case} ({samples} samples): phi[{i},{j}] off by {err:.2e}");
                worst = worst.max(err);
            }
        }
    }

    // Dummy and symmetry, with a shared multi-row background.
    for case in 0..50u64 {
        let mut gen = Gen::new(3100, case);
        let (n, k, m) = (gen.int(3, 12), gen.int(1, 3), gen.int(1, 4));
        let mut w = gen.tensor(&[k, n], -1.0, 1.0);
        let mut targets = gen.tensor(&[m, n], -1.0, 1.0);
        let mut background = gen.tensor(&[4, n], -1.0, 1.0);
        let (dummy, p, q) = (0, 1, 2);
        for j in 0..k {
            w.data_mut()[j * n + dummy] = 0.0;
            w.data_mut()[j * n + q] = w.data()[j * n + p];
        }
        for t in [&mut targets, &mut background] {
            for r in 0..t.shape()[0] {
                t.data_mut()[r * n + q] = t.data()[r * n + p];
            }
        }
        let linear = LinearHead::new(w.clone(), gen.tensor(&[k], -1.0, 1.0)).unwrap();
        let tanh = TanhHead::random(&mut gen, n, 6, k);
        let tanh = tanh.with_tied_columns(p, q);
        let heads: [&dyn DifferentiableHead; 2] = [&linear, &tanh];
        for (h, head) in heads.into_iter().enumerate() {
            let phi = gradient_shap(head, &targets, &rows(&background), &shap(16, 0.0, case)).unwrap();
            for (t, s) in phi.iter().enumerate() {
                for j in 0..k {
                    if h == 0 {
                        ensure!(s.get(dummy, j) == 0.0, "case {case}: dummy feature got {}", s.get(dummy, j));
                    }
                    ensure!(
                        s.get(p, j).to_bits() == s.get(q, j).to_bits(),
                        "case {case} head {h} target {t}: symmetric features got {} and {}",
                        s.get(p, j),
                        s.get(q, j)
                    );
                }
            }
        }
    }
    Ok(format!("100 linear heads, worst |phi - w(a - a')| {worst:.2e}; dummy and symmetry exact in 50 cases"))
}

/// `tanh(x W1ᵀ + b1) W2ᵀ + b2`.
struct TanhHead {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl TanhHead {
    fn random(gen: &mut Gen, n: usize, hidden: usize, k: usize) -> Self {
        TanhHead {
            w1: gen.tensor(&[hidden, n], -0.8, 0.8),
            b1: gen.tensor(&[hidden], -0.5, 0.5),
            w2: gen.tensor(&[k, hidden], -1.0, 1.0),
            b2: gen.tensor(&[k], -0.5, 0.5),
        }
    }

    fn with_tied_columns(mut self, p: usize, q: usize) -> Self {
        let n = self.w1.shape()[1];
        for h in 0..self.w1.shape()[0] {
            self.w1.data_mut()[h * n + q] = self.w1.data()[h * n + p];
        }
        self
    }

    fn eval(&self, a: &[f32]) -> Vec<f64> {
        let (hidden, n) = (self.w1.shape()[0], self.w1.shape()[1]);
        let k = self.w2.shape()[0];
        let h: Vec<f64> = (0..hidden)
            .map(|r| {
                let z = self.b1.data()[r] as f64
                    + (0..n).map(|i| self.w1.data()[r * n + i] as f64 * a[i] as f64).sum::<f64>();
                z.tanh()
            })
            .collect();
        (0..k)
            .map(|j| self.b2.data()[j] as f64 + (0..hidden).map(|r| self.w2.data()[j * hidden + r] as f64 * h[r]).sum::<f64>())
            .collect()
    }
}

impl DifferentiableHead for TanhHead {
    fn input_width(&self) -> usize {
        self.w1.shape()[1]
    }

    fn num_outputs(&self) -> usize {
        self.w2.shape()[0]
    }

    fn forward(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let (w1, b1) = (g.leaf(self.w1.clone()), g.leaf(self.b1.clone()));
        let (w2, b2) = (g.leaf(self.w2.clone()), g.leaf(self.b2.clone()));
        let h = g.linear(features, w1, b1)?;
        let h = g.tanh(h)?;
        g.linear(h, w2, b2)
    }
}

const COMPLETENESS_TOLERANCE: f64 = 0.02;
/// Output gaps smaller than this are redrawn; a relative error is meaningless near zero.
const MIN_GAP: f64 = 0.1;

/// `∇f(a')·(a - a')` averaged over the background: the first-order estimate
/// that completeness has to beat on a curved head.
fn endpoint_estimate(head: &TanhHead, target: &[f32], background: &[&[f32]], j: usize) -> f64 {
    let n = target.len();
    let h = 1e-5f64;
    let mut total = 0.0;
    for base in background {
        let mut p: Vec<f32> = base.to_vec();
        for i in 0..n {
            let x0 = p[i];
            p[i] = (x0 as f64 + h) as f32;
            let up = head.eval(&p)[j];
            p[i] = (x0 as f64 - h) as f32;
            let down = head.eval(&p)[j];
            p[i] = x0;
            let step = ((x0 as f64 + h) as f32 - (x0 as f64 - h) as f32) as f64;
            total += (up - down) / step * (target[i] as f64 - base[i] as f64);
        }
    }
    total / background.len() as f64
}

pub fn completeness() -> Outcome {
    let (n, hidden, k, background_rows) = (8, 16, 2, 4);
    let (mut worst, mut worst_first_order) = (0.0f64, 0.0f64);
    let mut redrawn = 0;
    let mut case = 0u64;
    let mut draw = 0u64;
    while case < 20 {
        let mut gen = Gen::new(3200, draw);
        draw += 1;
        let head = TanhHead::random(&mut gen, n, hidden, k);
        let target = gen.tensor(&[1, n], -1.0, 1.0);
        let background = gen.tensor(&[background_rows, n], -1.0, 1.0);
        let bg = rows(&background);
        let fa = head.eval(target.data());
        let gaps: Vec<f64> = (0..k)
            .map(|j| fa[j] - bg.iter().map(|r| head.eval(r)[j]).sum::<f64>() / background_rows as f64)
            .collect();
        if gaps.iter().any(|g| g.abs() < MIN_GAP) {
            redrawn += 1;
            continue;
        }
        let phi = gradient_shap(&head, &target, &bg, &shap(256, 0.0, case)).unwrap();
        for (j, gap) in gaps.iter().enumerate() {
            let total: f64 = (0..n).map(|i| phi[0].get(i, j) as f64).sum();
            let err = (total - gap).abs() / gap.abs();
            ensure!(
                err < COMPLETENESS_TOLERANCE,
                "case {case} class {j}: sum phi {total:.5} vs f(a) - E f(a') {gap:.5} ({:.2}%)",
                err * 100.0
            );
            worst = worst.max(err);
            let first_order = endpoint_estimate(&head, target.data(), &bg, j);
            worst_first_order = worst_first_order.max((first_order - gap).abs() / gap.abs());
        }
        case += 1;
    }
    Ok(format!(
        "20 cases x {k} classes, worst relative gap {:.2}% (first-order estimate: {:.1}%; {redrawn} near-zero gaps redrawn)",
        worst * 100.0,
        worst_first_order * 100.0
    ))
}

/// Range, endpoints, degenerate branch and order preservation of one normalized vector.
fn check_minmax(input: &[f32], output: &[f32], what: &str) -> std::result::Result<(), String> {
    ensure!(output.iter().all(|v| (0.0..=1.0).contains(v)), "{what}: value outside [0, 1]");
    let (lo, hi) = input.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if lo == hi {
        ensure!(output.iter().all(|&v| v == 1.0), "{what}: degenerate input not all ones");
        return Ok(());
    }
    for (x, y) in input.iter().zip(output) {
        if *x == lo {
            ensure!(*y == 0.0, "{what}: minimum maps to {y}");
        }
        if *x == hi {
            ensure!(*y == 1.0, "{what}: maximum maps to {y}");
        }
    }
    for (a, ya) in input.iter().zip(output) {
        for (b, yb) in input.iter().zip(output) {
            if a < b {
                ensure!(ya <= yb, "{what}: order broken ({a} < {b} but {ya} > {yb})");
            } else if a == b {
                ensure!(ya == yb, "{what}: ties split");
            }
        }
    }
    Ok(())
}

pub fn normalization() -> Outcome {
    let mut degenerate = 0;
    for case in 0..1000u64 {
        let mut gen = Gen::new(3300, case);
        let (n, k) = (gen.int(1, 40), gen.int(1, 4));
        let mut values = gen.vec(n * k, 0.0, 5.0);
        match case % 5 {
            0 => values.iter_mut().for_each(|v| *v = 0.3),
            1 => values.iter_mut().for_each(|v| *v = (*v * 2.0).round() / 2.0),
            _ => {}
        }
        let reduced = ImportanceMatrix::new(n, k, values.clone(), ImportanceStage::Reduced).unwrap();
        let s_star = minmax_normalize(&reduced).unwrap();
        check_minmax(&values, s_star.values(), &format!("S* case {case}"))?;

        let mut w = gen.tensor(&[k, n], -3.0, 3.0);
        if case % 7 == 0 {
            w.data_mut().iter_mut().for_each(|v| *v = -0.25);
        }
        let w_star = normalize_weights(&w);
        check_minmax(w.data(), w_star.data(), &format!("W* case {case}"))?;
        degenerate += usize::from(s_star.values().iter().all(|&v| v == 1.0));
    }
    Ok(format!("1000 random S' and W matrices ({degenerate} degenerate S')"))
}

/// Full-batch gradient descent on a zero-initialized linear head over fixed
/// features, so a weight grows only as far as its gradient pushes it.
fn train_head(features: &Tensor, labels: &Tensor, steps: usize, lr: f32) -> LinearHead {
    let (n, k) = (features.shape()[1], labels.shape()[1]);
    let mut w = Tensor::zeros(&[k, n]);
    let mut b = Tensor::zeros(&[k]);
    for _ in 0..steps {
        let mut g = Graph::new();
        let x = g.leaf(features.clone());
        let (wv, bv) = (g.param(w.clone()), g.param(b.clone()));
        let logits = g.linear(x, wv, bv).unwrap();
        let probs = g.softmax(logits).unwrap();
        let loss = g.cross_entropy(probs, labels).unwrap();
        g.backward(loss).unwrap();
        for (t, v) in [(&mut w, wv), (&mut b, bv)] {
            let grad = g.grad(v).unwrap();
            t.data_mut().iter_mut().zip(grad).for_each(|(p, d)| *p -= lr * d);
        }
    }
    LinearHead::new(w, b).unwrap()
}

pub fn informativeness() -> Outcome {
    const DRAWS: u64 = 8;
    let ds = synth_generate(&SynthConfig {
        train_per_class: 60,
        val_per_class: 10,
        test_per_class: 10,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
        ..TrainConfig::default()
    };
    let backbone = pretrain(&BackboneConfig::tiny(), &cfg, &ds).unwrap().model;
    let all: Vec<usize> = (0..ds.train.len()).collect();
    let batch = make_batch(&ds.train, &all, 2).unwrap();
    let features = backbone.extract_features(&batch.images).unwrap();
    let (rows_n, n) = (features.shape()[0], features.shape()[1]);
    let extra = n / 2;

    // Noise scale matched to the live features.
    let stds: Vec<f64> = (0..n)
        .map(|i| {
            let col: Vec<f64> = (0..rows_n).map(|r| features.data()[r * n + i] as f64).collect();
            let mean = col.iter().sum::<f64>() / rows_n as f64;
            (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows_n as f64).sqrt()
        })
        .filter(|s| *s > 0.0)
        .collect();
    let sigma = (stds.iter().sum::<f64>() / stds.len() as f64) as f32;

    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let mut gen = Gen::new(3400, seed);
        let normal = Normal::new(0.0f32, sigma).unwrap();
        let width = n + extra;
        let mut data = Vec::with_capacity(rows_n * width);
        for r in 0..rows_n {
            data.extend_from_slice(features.row(r));
            data.extend((0..extra).map(|_| normal.sample(gen.rng())));
        }
        let augmented = Tensor::new(vec![rows_n, width], data).unwrap();
        let head = train_head(&augmented, &batch.labels, 300, 0.5);

        let pick = |gen: &mut Gen, count: usize| -> Tensor {
            let idx: Vec<usize> = (0..count).map(|_| gen.int(0, rows_n - 1)).collect();
            let rows: Vec<&[f32]> = idx.iter().map(|&i| augmented.row(i)).collect();
            Tensor::from_rows(&rows)
        };
        // S* from one batch of 8 targets swings with the batch's class mix,
        // so the group means are averaged over several draws.
        let (mut informative, mut noise) = (0.0, 0.0);
        for draw in 0..DRAWS {
            let targets = pick(&mut gen, 8);
            let background = pick(&mut gen, 16);
            let e = explain(&head, &targets, &rows(&background), &shap(64, 0.01, seed * DRAWS + draw)).unwrap();
            let mean = |range: std::ops::Range<usize>| -> f64 {
                let len = range.len() * 2;
                range.flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| e.normalized.get(i, j) as f64).sum::<f64>()
                    / len as f64
            };
            informative += mean(0..n) / DRAWS as f64;
            noise += mean(n..width) / DRAWS as f64;
        }
        ensure!(
            informative > noise,
            "seed {seed}: mean S* informative {informative:.4} <= noise {noise:.4}"
        );
        lines.push(format!("{informative:.3}>{noise:.3}"));
    }
    Ok(format!("{n} backbone + {extra} noise features, mean S* over {DRAWS} draws per seed: {}", lines.join(", ")))
}
