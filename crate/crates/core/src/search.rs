//! Counterfactual search.
//!
//! For a sample and a target class, take the nearest correctly classified
//! training samples of the target class (distractors) and find the smallest
//! set of atoms whose values, copied from one distractor, make the
//! classifier predict the target. An atom is a whole variable or, with
//! windows enabled, one variable over one fixed time window.
//!
//! Per distractor the search runs random-restart hill climbing over atom
//! subsets, falls back to greedy forward selection if no restart reaches a
//! feasible state, and finally prunes the result to an irreducible set.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierHandle, ScoreError};
use crate::data::{DataError, Dataset, Manifest};
use crate::series::MultivariateSeries;
use crate::store::{DistractorStore, StoreError};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("sample {sample} is already predicted as {target}; nothing to explain")]
    AlreadyTarget { sample: String, target: String },
    #[error(
        "no counterfactual found for sample {sample} towards {target} \
         (best target score {best_score:.6}): {reason}"
    )]
    NoCounterfactual {
        sample: String,
        target: String,
        best_score: f64,
        reason: String,
    },
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error("invalid substitution: {0}")]
    Substitution(String),
}

/// Search hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub restarts: usize,
    pub max_iters_per_restart: usize,
    pub k_distractors: usize,
    pub rng_seed: u64,
    pub initial_subset_size: usize,
    /// Width of the fixed time windows used as atoms; `None` searches over
    /// whole variables.
    pub window_width: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iters_per_restart: 100,
            k_distractors: 3,
            rng_seed: 42,
            initial_subset_size: 1,
            window_width: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, timesteps: usize) -> Result<(), SearchError> {
        let positive = [
            ("restarts", self.restarts),
            ("max_iters_per_restart", self.max_iters_per_restart),
            ("k_distractors", self.k_distractors),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(SearchError::Config(format!("{name} must be positive")));
            }
        }
        if let Some(w) = self.window_width {
            if w == 0 || w > timesteps {
                return Err(SearchError::Config(format!(
                    "window width {w} must be in 1..={timesteps}"
                )));
            }
        }
        Ok(())
    }

    pub fn enable_windows(&self) -> bool {
        self.window_width.is_some()
    }
}

/// One substitutable unit: a variable, optionally restricted to `[t0, t1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Atom {
    pub variable: usize,
    pub window: Option<(usize, usize)>,
}

/// The atoms replaced by distractor values, sorted and distinct.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct SubstitutionSet {
    atoms: Vec<Atom>,
}

impl SubstitutionSet {
    pub fn new(mut atoms: Vec<Atom>) -> Self {
        atoms.sort();
        atoms.dedup();
        Self { atoms }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Whole-variable substitution.
    pub fn variables(variables: impl IntoIterator<Item = usize>) -> Self {
        Self::new(
            variables
                .into_iter()
                .map(|variable| Atom {
                    variable,
                    window: None,
                })
                .collect(),
        )
    }

    /// The same window applied to every listed variable.
    pub fn windowed(variables: impl IntoIterator<Item = usize>, window: (usize, usize)) -> Self {
        Self::new(
            variables
                .into_iter()
                .map(|variable| Atom {
                    variable,
                    window: Some(window),
                })
                .collect(),
        )
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Distinct substituted variables, ascending.
    pub fn variable_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.atoms.iter().map(|a| a.variable).collect();
        v.dedup();
        v
    }

    /// The window shared by every atom (`Some(None)` for whole variables),
    /// or `None` when atoms mix windows.
    pub fn common_window(&self) -> Option<Option<(usize, usize)>> {
        let first = self.atoms.first().and_then(|a| a.window);
        self.atoms
            .iter()
            .all(|a| a.window == first)
            .then_some(first)
    }

    pub fn without(&self, index: usize) -> Self {
        let mut atoms = self.atoms.clone();
        atoms.remove(index);
        Self { atoms }
    }

    pub fn validate(&self, variables: usize, timesteps: usize) -> Result<(), SearchError> {
        for a in &self.atoms {
            if a.variable >= variables {
                return Err(SearchError::Substitution(format!(
                    "variable index {} out of range for {variables} variables",
                    a.variable
                )));
            }
            if let Some((t0, t1)) = a.window {
                if t0 >= t1 || t1 > timesteps {
                    return Err(SearchError::Substitution(format!(
                        "window [{t0}, {t1}) invalid for {timesteps} timesteps"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Copy of `original` with the atoms of `subs` taken from `distractor`.
pub fn apply_substitution(
    original: &MultivariateSeries,
    distractor: &MultivariateSeries,
    subs: &SubstitutionSet,
) -> Result<MultivariateSeries, SearchError> {
    if original.shape() != distractor.shape() {
        return Err(SearchError::Substitution(format!(
            "original has shape {:?}, distractor {:?}",
            original.shape(),
            distractor.shape()
        )));
    }
    subs.validate(original.num_variables(), original.timesteps())?;
    Ok(splice(original, distractor, subs.atoms()))
}

fn splice(
    original: &MultivariateSeries,
    distractor: &MultivariateSeries,
    atoms: &[Atom],
) -> MultivariateSeries {
    let t = original.timesteps();
    let src = distractor.as_flat();
    original.map_values(|dst| {
        for a in atoms {
            let (t0, t1) = a.window.unwrap_or((0, t));
            let base = a.variable * t;
            dst[base + t0..base + t1].copy_from_slice(&src[base + t0..base + t1]);
        }
    })
}

/// Counters describing how an explanation was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStats {
    pub restarts_used: usize,
    /// Samples sent to the classifier during the whole `explain` call.
    pub model_queries: usize,
    pub fallback_used: bool,
}

/// A counterfactual: the atoms of `distractor_id` that flip `sample_id`
/// from `original_label` to `target_label`.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub sample_id: String,
    pub original_label: usize,
    pub target_label: usize,
    pub distractor_id: String,
    pub substitutions: SubstitutionSet,
    pub score_before: f64,
    pub score_after: f64,
    pub search_stats: SearchStats,
}

// ---------------------------------------------------------------------------
// search state

#[derive(Debug, Clone, Copy, PartialEq)]
struct Eval {
    feasible: bool,
    score: f64,
    size: usize,
}

/// Strict preference: feasible first, then fewer atoms / higher target
/// score (feasible) or higher score / fewer atoms (infeasible).
fn better(a: &Eval, b: &Eval) -> bool {
    match (a.feasible, b.feasible) {
        (true, false) => true,
        (false, true) => false,
        (true, true) => a.size < b.size || (a.size == b.size && a.score > b.score),
        (false, false) => a.score > b.score || (a.score == b.score && a.size < b.size),
    }
}

type Mask = Vec<bool>;

struct Evaluator<'a> {
    clf: &'a ClassifierHandle,
    original: &'a MultivariateSeries,
    distractor: &'a MultivariateSeries,
    atoms: &'a [Atom],
    target: usize,
    cache: HashMap<Mask, Eval>,
    queries: usize,
}

impl Evaluator<'_> {
    fn selected(&self, mask: &[bool]) -> Vec<Atom> {
        self.atoms
            .iter()
            .zip(mask)
            .filter(|(_, &on)| on)
            .map(|(a, _)| *a)
            .collect()
    }

    fn eval_batch(&mut self, masks: &[Mask]) -> Result<Vec<Eval>, ScoreError> {
        let mut pending: Vec<&Mask> = Vec::new();
        for m in masks {
            if !self.cache.contains_key(m) && !pending.contains(&m) {
                pending.push(m);
            }
        }
        if !pending.is_empty() {
            let batch: Vec<MultivariateSeries> = pending
                .iter()
                .map(|m| splice(self.original, self.distractor, &self.selected(m)))
                .collect();
            let scores = self.clf.predict_scores(&batch)?;
            self.queries += batch.len();
            for (m, s) in pending.into_iter().zip(scores) {
                let eval = Eval {
                    feasible: self.clf.label_of(&s) == self.target,
                    score: s.get(self.target),
                    size: m.iter().filter(|&&b| b).count(),
                };
                self.cache.insert(m.clone(), eval);
            }
        }
        Ok(masks.iter().map(|m| self.cache[m]).collect())
    }

    fn eval(&mut self, mask: &Mask) -> Result<Eval, ScoreError> {
        Ok(self.eval_batch(std::slice::from_ref(mask))?[0])
    }
}

struct Found {
    mask: Mask,
    eval: Eval,
    restarts_used: usize,
    fallback_used: bool,
}

enum Outcome {
    Found(Found),
    Infeasible { best_score: f64 },
}

/// FNV-1a over the restart identity, so each (seed, sample, distractor,
/// restart) gets its own reproducible stream.
fn restart_seed(seed: u64, sample_id: &str, distractor_id: &str, restart: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(&seed.to_le_bytes());
    eat(sample_id.as_bytes());
    eat(&[0xff]);
    eat(distractor_id.as_bytes());
    eat(&[0xff]);
    eat(&(restart as u64).to_le_bytes());
    h
}

fn hill_climb(
    ev: &mut Evaluator<'_>,
    cfg: &SearchConfig,
    sample_id: &str,
    distractor_id: &str,
) -> Result<(Option<(Mask, Eval)>, f64), ScoreError> {
    let n = ev.atoms.len();
    let mut best: Option<(Mask, Eval)> = None;
    let mut best_infeasible = f64::NEG_INFINITY;
    for r in 0..cfg.restarts {
        let mut rng =
            ChaCha8Rng::seed_from_u64(restart_seed(cfg.rng_seed, sample_id, distractor_id, r));
        let mut cur = vec![false; n];
        for i in rand::seq::index::sample(&mut rng, n, cfg.initial_subset_size.min(n)) {
            cur[i] = true;
        }
        let mut cur_eval = ev.eval(&cur)?;
        for _ in 0..cfg.max_iters_per_restart {
            let neighbours: Vec<Mask> = (0..n)
                .map(|i| {
                    let mut m = cur.clone();
                    m[i] = !m[i];
                    m
                })
                .collect();
            let evals = ev.eval_batch(&neighbours)?;
            let mut pick: Option<usize> = None;
            for (i, e) in evals.iter().enumerate() {
                if pick.is_none_or(|p| better(e, &evals[p])) {
                    pick = Some(i);
                }
            }
            match pick {
                Some(i) if better(&evals[i], &cur_eval) => {
                    cur = neighbours[i].clone();
                    cur_eval = evals[i];
                }
                _ => break,
            }
        }
        if cur_eval.feasible {
            if best.as_ref().is_none_or(|(_, b)| better(&cur_eval, b)) {
                best = Some((cur, cur_eval));
            }
        } else {
            best_infeasible = best_infeasible.max(cur_eval.score);
        }
    }
    Ok((best, best_infeasible))
}

fn greedy(ev: &mut Evaluator<'_>) -> Result<(Mask, Eval), ScoreError> {
    let n = ev.atoms.len();
    let mut cur = vec![false; n];
    let mut cur_eval = ev.eval(&cur)?;
    while !cur_eval.feasible && cur_eval.size < n {
        let candidates: Vec<usize> = (0..n).filter(|&i| !cur[i]).collect();
        let masks: Vec<Mask> = candidates
            .iter()
            .map(|&i| {
                let mut m = cur.clone();
                m[i] = true;
                m
            })
            .collect();
        let evals = ev.eval_batch(&masks)?;
        let mut pick = 0;
        for (j, e) in evals.iter().enumerate().skip(1) {
            if e.score > evals[pick].score {
                pick = j;
            }
        }
        cur = masks[pick].clone();
        cur_eval = evals[pick];
    }
    Ok((cur, cur_eval))
}

/// Drop atoms (ascending) while the state stays feasible, to a fixpoint.
fn prune(
    ev: &mut Evaluator<'_>,
    mut mask: Mask,
    mut eval: Eval,
) -> Result<(Mask, Eval), ScoreError> {
    loop {
        let mut changed = false;
        for i in 0..mask.len() {
            if !mask[i] {
                continue;
            }
            let mut m = mask.clone();
            m[i] = false;
            let e = ev.eval(&m)?;
            if e.feasible {
                mask = m;
                eval = e;
                changed = true;
            }
        }
        if !changed {
            return Ok((mask, eval));
        }
    }
}

fn search_distractor(
    ev: &mut Evaluator<'_>,
    cfg: &SearchConfig,
    sample_id: &str,
    distractor_id: &str,
) -> Result<Outcome, ScoreError> {
    let (climbed, mut best_infeasible) = hill_climb(ev, cfg, sample_id, distractor_id)?;
    let (mask, eval, fallback_used) = match climbed {
        Some((m, e)) => (m, e, false),
        None => {
            let (m, e) = greedy(ev)?;
            if !e.feasible {
                best_infeasible = best_infeasible.max(e.score);
                return Ok(Outcome::Infeasible {
                    best_score: best_infeasible,
                });
            }
            (m, e, true)
        }
    };
    let (mask, eval) = prune(ev, mask, eval)?;
    Ok(Outcome::Found(Found {
        mask,
        eval,
        restarts_used: cfg.restarts,
        fallback_used,
    }))
}

/// The atom universe for a sample shape.
pub fn atom_universe(variables: usize, timesteps: usize, window_width: Option<usize>) -> Vec<Atom> {
    match window_width {
        None => (0..variables)
            .map(|variable| Atom {
                variable,
                window: None,
            })
            .collect(),
        Some(w) => (0..variables)
            .flat_map(|variable| {
                (0..timesteps).step_by(w).map(move |t0| Atom {
                    variable,
                    window: Some((t0, (t0 + w).min(timesteps))),
                })
            })
            .collect(),
    }
}

/// Explain why `sample_id` (from `dataset`) is not classified as `target`.
///
/// Each of the `k_distractors` nearest distractors is searched in turn; the
/// winner has the fewest atoms, then the highest target score, then the
/// nearest distractor.
pub fn explain(
    clf: &ClassifierHandle,
    store: &DistractorStore,
    dataset: &Dataset,
    sample_id: &str,
    target: usize,
    cfg: &SearchConfig,
) -> Result<Explanation, SearchError> {
    let manifest = dataset.manifest();
    cfg.validate(manifest.timesteps)?;
    if target >= manifest.num_classes() {
        return Err(StoreError::UnknownClass(target).into());
    }
    let original = dataset.sample(sample_id)?;
    let before = clf.predict_scores(std::slice::from_ref(original))?;
    let mut queries = 1;
    let original_label = clf.label_of(&before[0]);
    if original_label == target {
        return Err(SearchError::AlreadyTarget {
            sample: sample_id.to_string(),
            target: manifest.class_name(target).to_string(),
        });
    }
    let distractors = store.nearest_distractors(original, target, cfg.k_distractors)?;
    let atoms = atom_universe(
        manifest.variable_names.len(),
        manifest.timesteps,
        cfg.window_width,
    );

    let mut best: Option<(usize, Found)> = None;
    let mut best_infeasible = f64::NEG_INFINITY;
    for (rank, d) in distractors.iter().enumerate() {
        let distractor = store
            .distractor(&d.sample_id)
            .expect("store ids come from its dataset");
        let mut ev = Evaluator {
            clf,
            original,
            distractor,
            atoms: &atoms,
            target,
            cache: HashMap::new(),
            queries: 0,
        };
        let outcome = search_distractor(&mut ev, cfg, sample_id, &d.sample_id);
        queries += ev.queries;
        match outcome? {
            Outcome::Found(found) => {
                let wins = best.as_ref().is_none_or(|(_, b)| {
                    found.eval.size < b.eval.size
                        || (found.eval.size == b.eval.size && found.eval.score > b.eval.score)
                });
                if wins {
                    best = Some((rank, found));
                }
            }
            Outcome::Infeasible { best_score } => {
                best_infeasible = best_infeasible.max(best_score);
            }
        }
    }

    let Some((rank, found)) = best else {
        let first = &distractors[0];
        let distractor = store.distractor(&first.sample_id).expect("indexed id");
        let relabel = clf.predict_label(distractor)?;
        let reason = if relabel == target {
            format!(
                "distractor {} is classified as the target when scored alone but not when \
                 substituted in full; the classifier is non-deterministic",
                first.sample_id
            )
        } else {
            format!(
                "distractor {} is no longer classified as the target; the distractor store is \
                 stale or the distractor is mislabelled",
                first.sample_id
            )
        };
        return Err(SearchError::NoCounterfactual {
            sample: sample_id.to_string(),
            target: manifest.class_name(target).to_string(),
            best_score: best_infeasible,
            reason,
        });
    };
    let substitutions = SubstitutionSet::new(
        atoms
            .iter()
            .zip(&found.mask)
            .filter(|(_, &on)| on)
            .map(|(a, _)| *a)
            .collect(),
    );
    Ok(Explanation {
        sample_id: sample_id.to_string(),
        original_label,
        target_label: target,
        distractor_id: distractors[rank].sample_id.clone(),
        substitutions,
        score_before: before[0].get(target),
        score_after: found.eval.score,
        search_stats: SearchStats {
            restarts_used: found.restarts_used,
            model_queries: queries,
            fallback_used: found.fallback_used,
        },
    })
}

// ---------------------------------------------------------------------------
// JSON form, with class and variable names from the manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub variable: String,
    pub window: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionRecord {
    pub variables: Vec<String>,
    pub window: Option<[usize; 2]>,
    /// Present only when atoms use different windows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<SegmentRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub sample_id: String,
    pub original_label: String,
    pub target_label: String,
    pub distractor_id: String,
    pub substitutions: SubstitutionRecord,
    pub score_before: f64,
    pub score_after: f64,
    pub search_stats: SearchStats,
}

impl Explanation {
    pub fn to_record(&self, manifest: &Manifest) -> ExplanationRecord {
        let name = |v: usize| manifest.variable_names[v].clone();
        let subs = &self.substitutions;
        let substitutions = match subs.common_window() {
            Some(window) => SubstitutionRecord {
                variables: subs.variable_indices().into_iter().map(name).collect(),
                window: window.map(|(a, b)| [a, b]),
                segments: None,
            },
            None => SubstitutionRecord {
                variables: subs.variable_indices().into_iter().map(name).collect(),
                window: None,
                segments: Some(
                    subs.atoms()
                        .iter()
                        .map(|a| SegmentRecord {
                            variable: name(a.variable),
                            window: a.window.map(|(x, y)| [x, y]),
                        })
                        .collect(),
                ),
            },
        };
        ExplanationRecord {
            sample_id: self.sample_id.clone(),
            original_label: manifest.class_name(self.original_label).to_string(),
            target_label: manifest.class_name(self.target_label).to_string(),
            distractor_id: self.distractor_id.clone(),
            substitutions,
            score_before: self.score_before,
            score_after: self.score_after,
            search_stats: self.search_stats,
        }
    }

    pub fn to_json(&self, manifest: &Manifest) -> String {
        serde_json::to_string_pretty(&self.to_record(manifest)).expect("explanation serializes")
    }

    pub fn from_record(
        record: &ExplanationRecord,
        manifest: &Manifest,
    ) -> Result<Self, SearchError> {
        let var = |name: &str| {
            manifest
                .variable_names
                .iter()
                .position(|v| v == name)
                .ok_or_else(|| SearchError::Substitution(format!("unknown variable {name}")))
        };
        let atoms = match &record.substitutions.segments {
            Some(segments) => segments
                .iter()
                .map(|s| {
                    Ok(Atom {
                        variable: var(&s.variable)?,
                        window: s.window.map(|[a, b]| (a, b)),
                    })
                })
                .collect::<Result<Vec<_>, SearchError>>()?,
            None => record
                .substitutions
                .variables
                .iter()
                .map(|v| {
                    Ok(Atom {
                        variable: var(v)?,
                        window: record.substitutions.window.map(|[a, b]| (a, b)),
                    })
                })
                .collect::<Result<Vec<_>, SearchError>>()?,
        };
        let substitutions = SubstitutionSet::new(atoms);
        substitutions.validate(manifest.variable_names.len(), manifest.timesteps)?;
        Ok(Explanation {
            sample_id: record.sample_id.clone(),
            original_label: manifest.class_index(&record.original_label)?,
            target_label: manifest.class_index(&record.target_label)?,
            distractor_id: record.distractor_id.clone(),
            substitutions,
            score_before: record.score_before,
            score_after: record.score_after,
            search_stats: record.search_stats,
        })
    }
}
