//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tscf::classifier::IntervalRule;
use tscf::data::Manifest;
use tscf::search::Atom;
use tscf::store::DistractorStore;
use tscf::{
    apply_substitution, build_store, make_builtin, BuiltinSpec, ClassifierHandle, Dataset,
    Explanation, MultivariateSeries, Shape, SubstitutionSet,
};

pub fn manifest(classes: usize, variables: usize, timesteps: usize) -> Manifest {
    Manifest {
        class_names: (0..classes).map(|c| format!("class{c}")).collect(),
        variable_names: (0..variables).map(|v| format!("var{v}")).collect(),
        timesteps,
    }
}

pub fn series(m: &Manifest, rows: Vec<Vec<f64>>) -> MultivariateSeries {
    MultivariateSeries::new(m.variable_names.clone(), rows).unwrap()
}

/// Independent minimum: smallest feasible whole-variable subset for one
/// (sample, distractor) pair, by enumerating all 2^V subsets.
pub fn brute_force_min(
    clf: &ClassifierHandle,
    original: &MultivariateSeries,
    distractor: &MultivariateSeries,
    target: usize,
) -> Option<usize> {
    let v = original.num_variables();
    assert!(v <= 16, "brute force is exponential");
    let masks: Vec<u32> = (0..1u32 << v).collect();
    let batch: Vec<MultivariateSeries> = masks
        .iter()
        .map(|&m| {
            let mut rows: Vec<Vec<f64>> = original.rows().map(<[f64]>::to_vec).collect();
            for (i, row) in rows.iter_mut().enumerate() {
                if m & (1 << i) != 0 {
                    row.copy_from_slice(distractor.row(i));
                }
            }
            MultivariateSeries::new(original.variables().to_vec(), rows).unwrap()
        })
        .collect();
    let labels = clf.predict_labels(&batch).unwrap();
    masks
        .iter()
        .zip(labels)
        .filter(|(_, l)| *l == target)
        .map(|(m, _)| m.count_ones() as usize)
        .min()
}

/// Linear-scan k nearest of `class` in the store, by (distance, id).
pub fn linear_scan(
    store: &DistractorStore,
    query: &MultivariateSeries,
    class: usize,
    k: usize,
) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = store
        .class_ids(class)
        .iter()
        .map(|id| {
            let p = store.dataset().sample(id).unwrap().as_flat();
            let d: f64 = query
                .as_flat()
                .iter()
                .zip(p)
                .map(|(q, x)| (q - x) * (q - x))
                .sum::<f64>()
                .sqrt();
            (id.clone(), d)
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Validity: the counterfactual is predicted as the target.
pub fn is_valid(
    clf: &ClassifierHandle,
    original: &MultivariateSeries,
    distractor: &MultivariateSeries,
    e: &Explanation,
) -> bool {
    let cf = apply_substitution(original, distractor, &e.substitutions).unwrap();
    clf.predict_label(&cf).unwrap() == e.target_label
}

/// Irreducibility: dropping any single atom loses the target prediction.
pub fn is_irreducible(
    clf: &ClassifierHandle,
    original: &MultivariateSeries,
    distractor: &MultivariateSeries,
    e: &Explanation,
) -> bool {
    (0..e.substitutions.len()).all(|i| {
        let cf = apply_substitution(original, distractor, &e.substitutions.without(i)).unwrap();
        clf.predict_label(&cf).unwrap() != e.target_label
    })
}

pub fn whole_variables(e: &Explanation) -> Vec<usize> {
    assert!(e
        .substitutions
        .atoms()
        .iter()
        .all(|a: &Atom| a.window.is_none()));
    e.substitutions.variable_indices()
}

/// A randomized explain case: train set, store, query sample and target.
pub struct RandomCase {
    pub clf: ClassifierHandle,
    pub train: Arc<Dataset>,
    pub store: DistractorStore,
    pub queries: Dataset,
    pub sample_id: String,
    pub target: usize,
    pub kind: &'static str,
}

fn random_rows(rng: &mut ChaCha8Rng, v: usize, t: usize, offsets: &[f64]) -> Vec<Vec<f64>> {
    (0..v)
        .map(|i| {
            (0..t)
                .map(|_| offsets[i] + rng.gen_range(-1.0..1.0))
                .collect()
        })
        .collect()
}

/// Random dataset with class-dependent per-variable offsets and a random
/// built-in classifier; returns `None` when the draw yields no usable
/// (sample, target) pair.
pub fn random_case(seed: u64, max_v: usize, max_t: usize) -> Option<RandomCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = rng.gen_range(1..=max_v);
    let t = rng.gen_range(1..=max_t);
    let kind_pick = rng.gen_range(0..3);
    let classes = if kind_pick == 0 {
        rng.gen_range(2..=3)
    } else {
        2
    };
    let m = manifest(classes, v, t);
    let shape = Shape::new(v, t);
    let class_offsets: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..v).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();

    let mut raw = Vec::new();
    for i in 0..40 {
        let c = i % classes;
        raw.push(random_rows(&mut rng, v, t, &class_offsets[c]));
    }
    let (spec, kind) = match kind_pick {
        0 => {
            let centroids = (0..classes)
                .map(|c| {
                    let rows: Vec<&Vec<Vec<f64>>> = raw.iter().skip(c).step_by(classes).collect();
                    let mut mean = vec![0.0; v * t];
                    for r in &rows {
                        for (acc, x) in mean.iter_mut().zip(r.iter().flatten()) {
                            *acc += x / rows.len() as f64;
                        }
                    }
                    mean
                })
                .collect();
            (
                BuiltinSpec::NearestCentroid { centroids },
                "nearest_centroid",
            )
        }
        1 => {
            let n_rules = rng.gen_range(1..=v.min(3));
            let mut vars: Vec<usize> = (0..v).collect();
            vars.shuffle(&mut rng);
            let rules = vars[..n_rules]
                .iter()
                .map(|&variable| {
                    let start = rng.gen_range(0..t);
                    let end = rng.gen_range(start + 1..=t);
                    IntervalRule {
                        variable,
                        start,
                        end,
                        threshold: rng.gen_range(-1.0..1.0),
                        gain: rng.gen_range(1.0..10.0),
                    }
                })
                .collect();
            (
                BuiltinSpec::IntervalRule {
                    rules,
                    positive_class: rng.gen_range(0..2),
                },
                "interval_rule",
            )
        }
        _ => (
            BuiltinSpec::LinearMeans {
                weights: (0..v).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                bias: rng.gen_range(-0.5..0.5),
            },
            "linear_means",
        ),
    };
    let clf = make_builtin(spec, shape).unwrap();

    // training labels follow the model, with a few flipped
    let mut train = Dataset::new(m.clone()).unwrap();
    for (i, rows) in raw.into_iter().enumerate() {
        let s = series(&m, rows);
        let mut label = clf.predict_label(&s).unwrap();
        if rng.gen_bool(0.1) {
            label = (label + 1) % classes;
        }
        train.insert(format!("train-{i:03}"), s, label).unwrap();
    }
    let train = Arc::new(train);
    let store = build_store(train.clone(), &clf).unwrap();

    let mut queries = Dataset::new(m.clone()).unwrap();
    for attempt in 0..10 {
        let c = rng.gen_range(0..classes);
        let s = series(&m, random_rows(&mut rng, v, t, &class_offsets[c]));
        let pred = clf.predict_label(&s).unwrap();
        let targets: Vec<usize> = (0..classes)
            .filter(|&k| k != pred && store.class_len(k) > 0)
            .collect();
        if let Some(&target) = targets.choose(&mut rng) {
            let id = format!("query-{attempt}");
            queries.insert(id.clone(), s, c).unwrap();
            return Some(RandomCase {
                clf,
                train,
                store,
                queries,
                sample_id: id,
                target,
                kind,
            });
        }
    }
    None
}

/// Whole-variable substitution set from indices.
pub fn vars(v: &[usize]) -> SubstitutionSet {
    SubstitutionSet::variables(v.iter().copied())
}

/// Two-variable conjunction fixture for coverage. Class 0 ("normal") needs
/// both variables high. The evaluation set holds samples labelled normal but
/// predicted abnormal: the first `rule0` of them have only variable 0 low,
/// the next `rule1` only variable 1 low. Ids sort in that order.
pub struct CoverageFixture {
    pub spec: BuiltinSpec,
    pub clf: ClassifierHandle,
    pub train: Arc<Dataset>,
    pub store: DistractorStore,
    pub eval: Dataset,
}

pub fn coverage_fixture(rule0: usize, rule1: usize) -> CoverageFixture {
    let t = 4;
    let m = Manifest {
        class_names: vec!["normal".into(), "abnormal".into()],
        variable_names: vec!["var0".into(), "var1".into()],
        timesteps: t,
    };
    let full = |variable| IntervalRule {
        variable,
        start: 0,
        end: t,
        threshold: 0.0,
        gain: 10.0,
    };
    let spec = BuiltinSpec::IntervalRule {
        rules: vec![full(0), full(1)],
        positive_class: 0,
    };
    let clf = make_builtin(spec.clone(), Shape::new(2, t)).unwrap();
    let row = |level: f64, i: usize| {
        (0..t)
            .map(|k| level + 0.01 * ((i + k) % 5) as f64)
            .collect::<Vec<_>>()
    };
    let mut train = Dataset::new(m.clone()).unwrap();
    for i in 0..12 {
        let (a, b, label) = match i % 3 {
            0 => (1.0, 1.0, 0),
            1 => (-1.0, 1.0, 1),
            _ => (1.0, -1.0, 1),
        };
        train
            .insert(
                format!("train-{i:02}"),
                series(&m, vec![row(a, i), row(b, i)]),
                label,
            )
            .unwrap();
    }
    let train = Arc::new(train);
    let store = build_store(train.clone(), &clf).unwrap();
    let mut eval = Dataset::new(m.clone()).unwrap();
    for i in 0..rule0 + rule1 {
        let (a, b) = if i < rule0 { (-1.0, 1.0) } else { (1.0, -1.0) };
        eval.insert(
            format!("eval-{i:03}"),
            series(&m, vec![row(a, i), row(b, i)]),
            0,
        )
        .unwrap();
    }
    CoverageFixture {
        spec,
        clf,
        train,
        store,
        eval,
    }
}

pub fn ids(d: &Dataset) -> Vec<String> {
    d.ids().map(str::to_string).collect()
}
