//! Counterfactual explanations for black-box multivariate time-series
//! classifiers.
//!
//! Given a sample and a target class, the engine retrieves the nearest
//! correctly classified training samples of the target class and finds the
//! fewest variables (or variable/time-window segments) whose values, copied
//! from one of them, make the classifier predict the target.
//!
//! ```no_run
//! use std::sync::Arc;
//! use tscf::{build_store, explain, load_dataset, make_builtin, BuiltinSpec, SearchConfig};
//!
//! let train = Arc::new(load_dataset("bench/train")?);
//! let test = load_dataset("bench/test")?;
//! let spec = BuiltinSpec::from_json(&std::fs::read_to_string("bench/model.json")?)?;
//! let clf = make_builtin(spec, train.shape())?;
//! let store = build_store(train.clone(), &clf)?;
//! let e = explain(&clf, &store, &test, "test-0001", 0, &SearchConfig::default())?;
//! println!("{}", e.to_json(test.manifest()));
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod bridge;
pub mod classifier;
pub mod cli;
pub mod data;
pub mod eval;
pub mod kdtree;
pub mod par;
pub mod plot;
pub mod search;
pub mod series;
pub mod store;
pub mod synthetic;

pub use bridge::{bridge_open, BridgeConfig, BridgeError};
pub use classifier::{
    make_builtin, BuiltinSpec, ClassifierHandle, PredictionRule, ScoreError, ScoreVector, Scorer,
};
pub use data::{load_dataset, quality_filter, save_dataset, DataError, Dataset, Manifest};
pub use eval::{
    eval_comprehensibility, eval_coverage, ComprehensibilityReport, CoverageOptions, CoverageReport,
};
pub use par::Execution;
pub use plot::{render_overlay, OverlayLabels};
pub use search::{
    apply_substitution, explain, Explanation, SearchConfig, SearchError, SubstitutionSet,
};
pub use series::{MultivariateSeries, Shape};
pub use store::{build_store, DistractorStore};
