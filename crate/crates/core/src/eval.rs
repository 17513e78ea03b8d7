//! Quantitative evaluation of explanations: how many atoms they need
//! (comprehensibility) and how far one explanation transfers to other
//! misclassifications of the same kind (coverage).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierHandle, ScoreError};
use crate::data::{DataError, Dataset, Manifest};
use crate::par::{self, Execution};
use crate::search::{
    apply_substitution, explain, Explanation, ExplanationRecord, SearchConfig, SearchError,
};
use crate::series::MultivariateSeries;
use crate::store::DistractorStore;

const SCORE_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation sample {0} is also a training sample of the distractor store")]
    Leakage(String),
    #[error("evaluation sample {sample} is already predicted as the target {target}")]
    AlreadyTarget { sample: String, target: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Search(#[from] SearchError),
}

fn check_disjoint(store: &DistractorStore, eval_ids: &[String]) -> Result<(), EvalError> {
    match eval_ids.iter().find(|id| store.contains(id)) {
        Some(id) => Err(EvalError::Leakage(id.clone())),
        None => Ok(()),
    }
}

fn predict_all(
    clf: &ClassifierHandle,
    dataset: &Dataset,
    ids: &[String],
) -> Result<Vec<usize>, EvalError> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(SCORE_BATCH) {
        let batch = chunk
            .iter()
            .map(|id| dataset.sample(id).cloned())
            .collect::<Result<Vec<_>, _>>()?;
        out.extend(clf.predict_labels(&batch)?);
    }
    Ok(out)
}

/// Mean, mode (smallest on ties) and histogram of explanation sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSummary {
    pub mean: f64,
    pub mode: usize,
    pub histogram: BTreeMap<usize, usize>,
}

pub fn summarize_counts(counts: &[usize]) -> Option<CountSummary> {
    if counts.is_empty() {
        return None;
    }
    let mut histogram = BTreeMap::new();
    for &c in counts {
        *histogram.entry(c).or_insert(0) += 1;
    }
    // BTreeMap iterates ascending, so the first maximum is the smallest count
    let mode = histogram
        .iter()
        .fold(
            (0, 0),
            |(m, f), (&c, &n)| if n > f { (c, n) } else { (m, f) },
        )
        .0;
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    Some(CountSummary {
        mean,
        mode,
        histogram,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComprehensibilityReport {
    pub target: String,
    pub per_sample: BTreeMap<String, usize>,
    pub mean: Option<f64>,
    pub mode: Option<usize>,
    pub histogram: BTreeMap<usize, usize>,
    /// Samples for which no counterfactual was found; excluded above.
    pub failures: Vec<String>,
}

impl ComprehensibilityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "target: {}", self.target);
        let _ = writeln!(
            out,
            "explained: {}  failed: {}",
            self.per_sample.len(),
            self.failures.len()
        );
        match (self.mean, self.mode) {
            (Some(mean), Some(mode)) => {
                let _ = writeln!(out, "mean atoms: {mean:.3}  mode: {mode}");
            }
            _ => {
                let _ = writeln!(out, "mean atoms: n/a  mode: n/a");
            }
        }
        let _ = writeln!(out, "{:>6}  {:>6}", "atoms", "count");
        for (k, v) in &self.histogram {
            let _ = writeln!(out, "{k:>6}  {v:>6}");
        }
        out
    }
}

/// Explain every sample of `eval_ids` towards `target` and summarise the
/// explanation sizes.
pub fn eval_comprehensibility(
    clf: &ClassifierHandle,
    store: &DistractorStore,
    dataset: &Dataset,
    eval_ids: &[String],
    target: usize,
    cfg: &SearchConfig,
    exec: Execution,
) -> Result<ComprehensibilityReport, EvalError> {
    check_disjoint(store, eval_ids)?;
    let manifest = dataset.manifest();
    let target_name = manifest
        .class_names
        .get(target)
        .ok_or_else(|| DataError::Shape(format!("class index {target} out of range")))?
        .clone();
    let predicted = predict_all(clf, dataset, eval_ids)?;
    if let Some((id, _)) = eval_ids.iter().zip(&predicted).find(|(_, p)| **p == target) {
        return Err(EvalError::AlreadyTarget {
            sample: id.clone(),
            target: target_name,
        });
    }
    let results = par::map(exec, eval_ids, |id| {
        explain(clf, store, dataset, id, target, cfg)
    });
    let mut per_sample = BTreeMap::new();
    let mut failures = Vec::new();
    for (id, r) in eval_ids.iter().zip(results) {
        match r {
            Ok(e) => {
                per_sample.insert(id.clone(), e.substitutions.len());
            }
            Err(SearchError::NoCounterfactual { .. }) => failures.push(id.clone()),
            Err(e) => return Err(e.into()),
        }
    }
    let counts: Vec<usize> = per_sample.values().copied().collect();
    let summary = summarize_counts(&counts);
    Ok(ComprehensibilityReport {
        target: target_name,
        per_sample,
        mean: summary.as_ref().map(|s| s.mean),
        mode: summary.as_ref().map(|s| s.mode),
        histogram: summary.map(|s| s.histogram).unwrap_or_default(),
        failures,
    })
}

/// Options for [`eval_coverage`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoverageOptions {
    /// Groups with fewer misclassified samples are skipped.
    pub min_group_size: usize,
    pub execution: Execution,
}

impl Default for CoverageOptions {
    fn default() -> Self {
        Self {
            min_group_size: 1,
            execution: Execution::default(),
        }
    }
}

/// Coverage of one `(true, predicted)` misclassification type.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageGroup {
    pub true_label: usize,
    pub predicted_label: usize,
    pub members: Vec<String>,
    pub seed_sample_id: String,
    /// `None` when the seed has no counterfactual.
    pub hits: Option<usize>,
    pub explanation: Option<Explanation>,
    pub reason: Option<String>,
}

impl CoverageGroup {
    pub fn n(&self) -> usize {
        self.members.len()
    }

    pub fn coverage(&self) -> Option<f64> {
        self.hits.map(|h| h as f64 / self.n() as f64)
    }

    /// Whole percent, halves rounded up, computed in integers.
    pub fn coverage_percent(&self) -> Option<usize> {
        let n = self.n();
        self.hits.map(|h| (200 * h + n) / (2 * n))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub groups: Vec<CoverageGroup>,
}

#[derive(Serialize)]
struct GroupRecord<'a> {
    true_label: &'a str,
    predicted_label: &'a str,
    n: usize,
    hits: Option<usize>,
    coverage: Option<f64>,
    coverage_percent: Option<usize>,
    seed_sample_id: &'a str,
    explanation: Option<ExplanationRecord>,
    reason: Option<&'a str>,
}

impl CoverageReport {
    pub fn to_json(&self, manifest: &Manifest) -> String {
        let groups: Vec<GroupRecord<'_>> = self
            .groups
            .iter()
            .map(|g| GroupRecord {
                true_label: manifest.class_name(g.true_label),
                predicted_label: manifest.class_name(g.predicted_label),
                n: g.n(),
                hits: g.hits,
                coverage: g.coverage(),
                coverage_percent: g.coverage_percent(),
                seed_sample_id: &g.seed_sample_id,
                explanation: g.explanation.as_ref().map(|e| e.to_record(manifest)),
                reason: g.reason.as_deref(),
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({ "groups": groups }))
            .expect("report serializes")
    }

    /// Aligned text table: type, coverage %, N.
    pub fn to_table(&self, manifest: &Manifest) -> String {
        let rows: Vec<[String; 3]> = self
            .groups
            .iter()
            .map(|g| {
                [
                    format!(
                        "({}, {})",
                        manifest.class_name(g.true_label),
                        manifest.class_name(g.predicted_label)
                    ),
                    g.coverage_percent()
                        .map_or_else(|| "n/a".to_string(), |p| format!("{p}%")),
                    g.n().to_string(),
                ]
            })
            .collect();
        let header = [
            "Misclassification type (true, predicted)",
            "Coverage (%)",
            "N",
        ];
        let mut widths = header.map(str::len);
        for r in &rows {
            for (w, cell) in widths.iter_mut().zip(r) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: [&str; 3]| {
            let _ = writeln!(
                out,
                "{:<w0$}  {:>w1$}  {:>w2$}",
                cells[0],
                cells[1],
                cells[2],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2]
            );
        };
        line(&mut out, header);
        for r in &rows {
            line(&mut out, [&r[0], &r[1], &r[2]]);
        }
        out
    }
}

/// Group the misclassified samples of `eval_ids` by (true, predicted), explain
/// the first of each group towards its true label, and count how many group
/// members that same substitution corrects.
pub fn eval_coverage(
    clf: &ClassifierHandle,
    store: &DistractorStore,
    dataset: &Dataset,
    eval_ids: &[String],
    cfg: &SearchConfig,
    opts: CoverageOptions,
) -> Result<CoverageReport, EvalError> {
    check_disjoint(store, eval_ids)?;
    let predicted = predict_all(clf, dataset, eval_ids)?;
    let mut groups: BTreeMap<(usize, usize), Vec<String>> = BTreeMap::new();
    for (id, &pred) in eval_ids.iter().zip(&predicted) {
        let truth = dataset.label(id)?;
        if truth != pred {
            groups.entry((truth, pred)).or_default().push(id.clone());
        }
    }
    let groups: Vec<((usize, usize), Vec<String>)> = groups
        .into_iter()
        .filter(|(_, m)| m.len() >= opts.min_group_size.max(1))
        .collect();
    let evaluated = par::try_map(opts.execution, &groups, |((truth, pred), members)| {
        coverage_group(clf, store, dataset, *truth, *pred, members, cfg)
    })?;
    Ok(CoverageReport { groups: evaluated })
}

fn coverage_group(
    clf: &ClassifierHandle,
    store: &DistractorStore,
    dataset: &Dataset,
    truth: usize,
    pred: usize,
    members: &[String],
    cfg: &SearchConfig,
) -> Result<CoverageGroup, EvalError> {
    let seed = members[0].clone();
    let mut group = CoverageGroup {
        true_label: truth,
        predicted_label: pred,
        members: members.to_vec(),
        seed_sample_id: seed.clone(),
        hits: None,
        explanation: None,
        reason: None,
    };
    let explanation = match explain(clf, store, dataset, &seed, truth, cfg) {
        Ok(e) => e,
        Err(e @ SearchError::NoCounterfactual { .. }) => {
            group.reason = Some(e.to_string());
            return Ok(group);
        }
        Err(e) => return Err(e.into()),
    };
    let distractor = store
        .distractor(&explanation.distractor_id)
        .expect("distractor comes from the store");
    let hits = transfer_hits(clf, dataset, members, distractor, &explanation, truth)?;
    group.hits = Some(hits);
    group.explanation = Some(explanation);
    Ok(group)
}

/// Number of `members` predicted as `truth` after applying `explanation`'s
/// substitutions with `distractor`'s values.
pub fn transfer_hits(
    clf: &ClassifierHandle,
    dataset: &Dataset,
    members: &[String],
    distractor: &MultivariateSeries,
    explanation: &Explanation,
    truth: usize,
) -> Result<usize, EvalError> {
    let mut hits = 0;
    for chunk in members.chunks(SCORE_BATCH) {
        let batch = chunk
            .iter()
            .map(|id| {
                Ok(apply_substitution(
                    dataset.sample(id)?,
                    distractor,
                    &explanation.substitutions,
                )?)
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        hits += clf
            .predict_labels(&batch)?
            .into_iter()
            .filter(|&l| l == truth)
            .count();
    }
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_statistics() {
        let s = summarize_counts(&[2, 2, 4]).unwrap();
        assert!((s.mean - 8.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.mode, 2);
        assert_eq!(s.histogram, BTreeMap::from([(2, 2), (4, 1)]));
        let s = summarize_counts(&[3]).unwrap();
        assert_eq!((s.mean, s.mode), (3.0, 3));
        // tie goes to the smaller count
        assert_eq!(summarize_counts(&[5, 1, 5, 1]).unwrap().mode, 1);
        assert!(summarize_counts(&[]).is_none());
    }

    fn group(hits: usize, n: usize) -> CoverageGroup {
        CoverageGroup {
            true_label: 0,
            predicted_label: 1,
            members: (0..n).map(|i| i.to_string()).collect(),
            seed_sample_id: "0".into(),
            hits: Some(hits),
            explanation: None,
            reason: None,
        }
    }

    #[test]
    fn coverage_rounding() {
        assert_eq!(group(28, 49).coverage_percent(), Some(57));
        assert_eq!(group(1, 2).coverage_percent(), Some(50));
        assert_eq!(group(1, 8).coverage_percent(), Some(13));
        assert_eq!(group(3, 8).coverage_percent(), Some(38));
        assert_eq!(group(49, 49).coverage(), Some(1.0));
    }

    #[test]
    fn table_layout() {
        let m = Manifest {
            class_names: vec!["normal".into(), "1dAVb".into()],
            variable_names: vec!["x".into()],
            timesteps: 1,
        };
        let t = CoverageReport {
            groups: vec![group(28, 49)],
        }
        .to_table(&m);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("(normal, 1dAVb)"));
        assert!(lines[1].trim_end().ends_with("57%  49"));
        assert_eq!(lines[0].len(), lines[1].len());
    }
}
