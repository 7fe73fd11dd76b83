//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Extra arguments select criteria by substring.

mod importance;
mod metrics;
mod training;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use sicdn_core::rng::{rng, Rng as ChaCha, Stream};
use sicdn_core::Tensor;

/// `Ok` carries a one-line summary of what was measured.
pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}
pub(crate) use ensure;

/// Seeded value generator for test instances.
pub struct Gen(ChaCha);

impl Gen {
    pub fn new(seed: u64, index: u64) -> Self {
        Gen(rng(seed, Stream::Noise, index))
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        self.0.random_range(lo..hi)
    }

    pub fn int(&mut self, lo: usize, hi_inclusive: usize) -> usize {
        self.0.random_range(lo..=hi_inclusive)
    }

    pub fn coin(&mut self) -> bool {
        self.0.random()
    }

    pub fn vec(&mut self, len: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..len).map(|_| self.uniform(lo, hi)).collect()
    }

    pub fn tensor(&mut self, shape: &[usize], lo: f32, hi: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), self.vec(n, lo, hi)).unwrap()
    }

    pub fn rng(&mut self) -> &mut ChaCha {
        &mut self.0
    }
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradients::finite_differences),
        ("gradient shap linear oracle", importance::linear_oracle),
        ("completeness", importance::completeness),
        ("normalization", importance::normalization),
        ("update-rule identities", training::update_identities),
        ("desk experiment", training::desk_experiment),
        ("informativeness", importance::informativeness),
        ("lambda sweep", cli_runs::lambda_sweep),
        ("metrics", metrics::auc_and_confusion),
        ("cli determinism", cli_runs::determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| Err(panic_text(p)));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} ({secs:.1}s)", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
