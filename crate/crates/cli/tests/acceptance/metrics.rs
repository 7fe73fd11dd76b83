//! AUC against the pairwise statistic, and scripted confusion arithmetic.

use sicdn_core::metrics::{classify_metrics, confusion, roc_auc, ConfusionCounts};

use crate::{ensure, Gen, Outcome};

/// `P(s+ > s-) + P(s+ = s-) / 2` over all positive/negative pairs.
fn pairwise_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let (mut wins, mut pairs) = (0.0f64, 0.0f64);
    for (sp, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 1) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 0) {
            pairs += 1.0;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

pub fn auc_and_confusion() -> Outcome {
    let mut worst = 0.0f64;
    for case in 0..1000u64 {
        let mut gen = Gen::new(9000, case);
        let len = gen.int(2, 80);
        let mut labels: Vec<usize> = (0..len).map(|_| usize::from(gen.coin())).collect();
        labels[0] = 0;
        labels[1] = 1;
        let quantize = case % 2 == 0;
        let scores: Vec<f64> = (0..len)
            .map(|_| {
                let s = gen.uniform(0.0, 1.0) as f64;
                if quantize { (s * 10.0).round() / 10.0 } else { s }
            })
            .collect();
        let (_, auc) = roc_auc(&scores, &labels).unwrap();
        let err = (auc - pairwise_auc(&scores, &labels)).abs();
        ensure!(err <= 1e-12, "case {case}: AUC off by {err:.2e}");
        worst = worst.max(err);
    }

    let scripted = ConfusionCounts { tp: 3, fp: 1, tn: 4, fn_: 2 }.metrics();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
    ensure!(close(scripted.accuracy, 7.0 / 10.0), "accuracy {}", scripted.accuracy);
    ensure!(close(scripted.precision, 3.0 / 4.0), "precision {}", scripted.precision);
    ensure!(close(scripted.recall, 3.0 / 5.0), "recall {}", scripted.recall);
    ensure!(close(scripted.f1, 2.0 * 0.75 * 0.6 / 1.35), "f1 {}", scripted.f1);

    let scores = [0.9, 0.5, 0.49, 0.1, 0.7, 0.3];
    let labels = [1, 1, 1, 0, 0, 0];
    let c = confusion(&scores, &labels, 0.5).unwrap();
    ensure!(c == ConfusionCounts { tp: 2, fp: 1, tn: 2, fn_: 1 }, "counts {c:?}");
    let m = classify_metrics(&scores, &labels).unwrap();
    ensure!(close(m.recall, 2.0 / 3.0) && close(m.f1, 2.0 / 3.0), "threshold metrics {m:?}");
    let none = classify_metrics(&[0.2, 0.1], &[0, 0]).unwrap();
    ensure!(none.recall == 0.0 && none.f1 == 0.0, "zero-denominator metrics {none:?}");
    Ok(format!("1000 score sets (half with ties), worst |AUC - pairwise| {worst:.1e}; scripted confusion exact"))
}
