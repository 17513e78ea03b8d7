//! Planted-rule benchmark datasets.
//!
//! Every variable is a noisy sinusoid around a level of +1 ("high") or -1
//! ("low"). A sample is `normal` exactly when every planted variable is
//! high; the matching classifier is a conjunction of interval rules over
//! the planted variables. Other variables are irrelevant by construction.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::{BuiltinSpec, IntervalRule};
use crate::data::{save_dataset, DataError, Dataset, Manifest};
use crate::series::MultivariateSeries;

pub const NORMAL: usize = 0;
pub const ABNORMAL: usize = 1;
pub const MODEL_FILE: &str = "model.json";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub variables: usize,
    pub timesteps: usize,
    /// Variables the classifier depends on.
    pub planted: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
    /// Fraction of test samples whose recorded label disagrees with the
    /// planted rule, producing misclassifications.
    pub mislabel_rate: f64,
    pub noise: f64,
    pub gain: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            variables: 8,
            timesteps: 32,
            planted: vec![2],
            n_train: 200,
            n_test: 100,
            mislabel_rate: 0.2,
            noise: 0.2,
            gain: 10.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub train: Dataset,
    pub test: Dataset,
    pub model: BuiltinSpec,
    pub planted: Vec<usize>,
    /// Planted variables each sample holds low, keyed by sample id.
    pub violated: BTreeMap<String, Vec<usize>>,
}

pub fn manifest(variables: usize, timesteps: usize) -> Manifest {
    Manifest {
        class_names: vec!["normal".into(), "abnormal".into()],
        variable_names: (0..variables).map(|i| format!("var{i}")).collect(),
        timesteps,
    }
}

/// Conjunction of full-window mean rules, positive class `normal`.
pub fn planted_model(planted: &[usize], timesteps: usize, gain: f64) -> BuiltinSpec {
    BuiltinSpec::IntervalRule {
        rules: planted
            .iter()
            .map(|&variable| IntervalRule {
                variable,
                start: 0,
                end: timesteps,
                threshold: 0.0,
                gain,
            })
            .collect(),
        positive_class: NORMAL,
    }
}

fn row(rng: &mut ChaCha8Rng, level: f64, timesteps: usize, noise: f64) -> Vec<f64> {
    let freq = rng.gen_range(1..=3) as f64;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = rng.gen_range(0.1..0.4);
    (0..timesteps)
        .map(|t| {
            let angle = std::f64::consts::TAU * freq * t as f64 / timesteps as f64 + phase;
            level + amp * angle.sin() + rng.gen_range(-noise..=noise)
        })
        .collect()
}

/// Draw one sample; `low` lists the planted variables to hold low.
fn draw(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    names: &[String],
    low: &[usize],
) -> MultivariateSeries {
    let rows = (0..cfg.variables)
        .map(|v| {
            let high = if cfg.planted.contains(&v) {
                !low.contains(&v)
            } else {
                rng.gen_bool(0.5)
            };
            row(rng, if high { 1.0 } else { -1.0 }, cfg.timesteps, cfg.noise)
        })
        .collect();
    MultivariateSeries::new(names.to_vec(), rows).expect("generated rows are valid")
}

fn validate(cfg: &SyntheticConfig) -> Result<(), DataError> {
    let bad = |m: &str| Err(DataError::Shape(format!("synthetic config: {m}")));
    if cfg.variables == 0 || cfg.timesteps == 0 {
        return bad("variables and timesteps must be positive");
    }
    if cfg.planted.is_empty() || cfg.planted.iter().any(|&p| p >= cfg.variables) {
        return bad("planted variables must be a nonempty set of valid indices");
    }
    if !(0.0..=1.0).contains(&cfg.mislabel_rate) {
        return bad("mislabel_rate must lie in [0, 1]");
    }
    if !(cfg.noise >= 0.0 && cfg.noise < 0.5) {
        return bad("noise must lie in [0, 0.5)");
    }
    Ok(())
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticBenchmark, DataError> {
    validate(cfg)?;
    let mut cfg = cfg.clone();
    cfg.planted.sort_unstable();
    cfg.planted.dedup();
    let m = manifest(cfg.variables, cfg.timesteps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut violated = BTreeMap::new();
    let mut build = |prefix: &str,
                     n: usize,
                     mislabel: f64,
                     rng: &mut ChaCha8Rng|
     -> Result<Dataset, DataError> {
        let mut ds = Dataset::new(m.clone())?;
        for i in 0..n {
            let id = format!("{prefix}-{i:04}");
            let normal = i % 2 == 0;
            let low: Vec<usize> = if normal {
                Vec::new()
            } else {
                let k = rng.gen_range(1..=cfg.planted.len());
                let mut low: Vec<usize> = cfg.planted.choose_multiple(rng, k).copied().collect();
                low.sort_unstable();
                low
            };
            let sample = draw(rng, &cfg, &m.variable_names, &low);
            let mut label = if normal { NORMAL } else { ABNORMAL };
            if mislabel > 0.0 && rng.gen_bool(mislabel) {
                label = 1 - label;
            }
            violated.insert(id.clone(), low);
            ds.insert(id, sample, label)?;
        }
        Ok(ds)
    };
    let train = build("train", cfg.n_train, 0.0, &mut rng)?;
    let test = build("test", cfg.n_test, cfg.mislabel_rate, &mut rng)?;
    Ok(SyntheticBenchmark {
        train,
        test,
        model: planted_model(&cfg.planted, cfg.timesteps, cfg.gain),
        planted: cfg.planted,
        violated,
    })
}

/// Write `train/`, `test/` and `model.json` under `root`.
pub fn write_benchmark(bench: &SyntheticBenchmark, root: &Path) -> Result<(), DataError> {
    save_dataset(&bench.train, root.join("train"))?;
    save_dataset(&bench.test, root.join("test"))?;
    let path = root.join(MODEL_FILE);
    let mut json = serde_json::to_string_pretty(&bench.model).expect("model serializes");
    json.push('\n');
    std::fs::write(&path, json).map_err(|source| DataError::Io { path, source })
}
