mod common;

use std::collections::BTreeMap;

use common::*;
use proptest::prelude::*;
use tscf::data::FilterOutcome;
use tscf::eval::summarize_counts;
use tscf::search::Atom;
use tscf::{
    apply_substitution, load_dataset, make_builtin, quality_filter, save_dataset, BuiltinSpec,
    Dataset, MultivariateSeries, PredictionRule, ScoreVector, Shape, SubstitutionSet,
};

fn shape_and_values() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..5, 1usize..7).prop_flat_map(|(v, t)| {
        (
            Just(v),
            Just(t),
            prop::collection::vec(-100.0f64..100.0, v * t),
        )
    })
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (1usize..4, 1usize..5, 1usize..12).prop_flat_map(|(v, t, n)| {
        prop::collection::vec(
            (
                prop::collection::vec(prop_oneof![Just(1.0f64), -3.0f64..3.0], v * t),
                0usize..3,
            ),
            n,
        )
        .prop_map(move |samples| {
            let m = manifest(3, v, t);
            let mut ds = Dataset::new(m.clone()).unwrap();
            for (i, (values, label)) in samples.into_iter().enumerate() {
                let s = MultivariateSeries::from_flat(m.variable_names.clone(), t, values).unwrap();
                ds.insert(format!("s{i:02}"), s, label).unwrap();
            }
            ds
        })
    })
}

fn partition_ok(ds: &Dataset, out: &FilterOutcome) -> bool {
    let mut all: Vec<String> = out
        .kept
        .ids()
        .map(str::to_string)
        .chain(out.removed.iter().cloned())
        .collect();
    all.sort();
    all == ids(ds)
}

proptest! {
    #[test]
    fn flatten_is_a_bijection((v, t, values) in shape_and_values()) {
        let names: Vec<String> = (0..v).map(|i| format!("v{i}")).collect();
        let s = MultivariateSeries::from_flat(names.clone(), t, values.clone()).unwrap();
        prop_assert_eq!(s.flatten(), values.clone());
        let rows: Vec<Vec<f64>> = values.chunks(t).map(<[f64]>::to_vec).collect();
        prop_assert_eq!(MultivariateSeries::new(names, rows).unwrap(), s);
    }

    #[test]
    fn quality_filter_is_monotone(ds in dataset_strategy(), a in 0.0f64..2.0, b in 0.0f64..2.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = quality_filter(&ds, None, lo);
        let large = quality_filter(&ds, None, hi);
        prop_assert!(small.removed.iter().all(|id| large.removed.contains(id)));
        prop_assert!(partition_ok(&ds, &small) && partition_ok(&ds, &large));
        prop_assert!(quality_filter(&ds, None, 0.0).removed.is_empty());
    }

    #[test]
    fn quality_filter_respects_class(ds in dataset_strategy(), class in 0usize..3, th in 0.0f64..2.0) {
        let out = quality_filter(&ds, Some(class), th);
        for id in &out.removed {
            prop_assert_eq!(ds.label(id).unwrap(), class);
            prop_assert!(tscf::series::population_std(ds.sample(id).unwrap().as_flat()) < th);
        }
        prop_assert!(partition_ok(&ds, &out));
    }

    #[test]
    fn dataset_round_trips_through_disk(ds in dataset_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        prop_assert_eq!(back.manifest(), ds.manifest());
        prop_assert_eq!(ids(&back), ids(&ds));
        for (id, s, label) in ds.iter() {
            prop_assert_eq!(back.sample(id).unwrap(), s);
            prop_assert_eq!(back.label(id).unwrap(), label);
        }
    }

    #[test]
    fn argmax_picks_first_maximum(scores in prop::collection::vec(prop_oneof![Just(0.5f64), 0.0f64..1.0], 1..6)) {
        let label = PredictionRule::Argmax.apply(&ScoreVector::new(scores.clone()));
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(label, scores.iter().position(|&s| s == max).unwrap());
    }

    #[test]
    fn argmax_is_invariant_under_monotone_maps(scores in prop::collection::vec(0.0f64..1.0, 2..6)) {
        let squashed: Vec<f64> = scores.iter().map(|s| s * s * 0.5 + 0.1).collect();
        prop_assert_eq!(
            PredictionRule::Argmax.apply(&ScoreVector::new(scores)),
            PredictionRule::Argmax.apply(&ScoreVector::new(squashed))
        );
    }

    #[test]
    fn thresholded_falls_back_iff_nothing_qualifies(
        cases in (2usize..6).prop_flat_map(|c| (
            prop::collection::vec(0.0f64..1.0, c),
            prop::collection::vec(0.0f64..1.0, c),
            0..c,
        ))
    ) {
        let (scores, thresholds, background) = cases;
        let rule = PredictionRule::Thresholded { thresholds: thresholds.clone(), background };
        rule.validate(scores.len()).unwrap();
        let label = rule.apply(&ScoreVector::new(scores.clone()));
        let qualifying: Vec<usize> = (0..scores.len())
            .filter(|&c| c != background && scores[c] >= thresholds[c])
            .collect();
        if qualifying.is_empty() {
            prop_assert_eq!(label, background);
        } else {
            prop_assert!(qualifying.contains(&label));
            let margin = |c: usize| scores[c] - thresholds[c];
            prop_assert!(qualifying.iter().all(|&c| margin(c) <= margin(label)));
        }
    }

    #[test]
    fn substitution_touches_only_listed_atoms(
        (v, t, a) in shape_and_values(),
        seed in any::<u64>(),
    ) {
        let b: Vec<f64> = a.iter().map(|x| x + 1000.0).collect();
        let names: Vec<String> = (0..v).map(|i| format!("v{i}")).collect();
        let original = MultivariateSeries::from_flat(names.clone(), t, a.clone()).unwrap();
        let distractor = MultivariateSeries::from_flat(names, t, b.clone()).unwrap();
        let vars: Vec<usize> = (0..v).filter(|i| (seed >> i) & 1 == 1).collect();
        let t0 = (seed as usize >> 8) % t;
        let t1 = t0 + 1 + (seed as usize >> 16) % (t - t0);
        for subs in [SubstitutionSet::variables(vars.clone()), SubstitutionSet::windowed(vars.clone(), (t0, t1))] {
            let cf = apply_substitution(&original, &distractor, &subs).unwrap();
            for var in 0..v {
                for k in 0..t {
                    let hit = subs.atoms().iter().any(|at: &Atom| {
                        at.variable == var && at.window.is_none_or(|(s, e)| (s..e).contains(&k))
                    });
                    let want = if hit { b[var * t + k] } else { a[var * t + k] };
                    prop_assert_eq!(cf.row(var)[k], want);
                }
            }
            prop_assert_eq!(original.as_flat(), &a[..]);
        }
    }

    #[test]
    fn count_summary_matches_definition(counts in prop::collection::vec(1usize..8, 1..40)) {
        let s = summarize_counts(&counts).unwrap();
        let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
        prop_assert!((s.mean - mean).abs() < 1e-12);
        let mut freq = BTreeMap::new();
        for &c in &counts {
            *freq.entry(c).or_insert(0usize) += 1;
        }
        let top = *freq.values().max().unwrap();
        prop_assert_eq!(s.mode, *freq.iter().find(|(_, &f)| f == top).unwrap().0);
        prop_assert_eq!(s.histogram, freq);
    }

    #[test]
    fn batch_scoring_preserves_order(
        values in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 6), 1..20),
        weights in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let clf = make_builtin(BuiltinSpec::LinearMeans { weights, bias: 0.1 }, Shape::new(2, 3)).unwrap();
        let batch: Vec<MultivariateSeries> = values
            .into_iter()
            .map(|v| MultivariateSeries::from_flat(vec!["a".into(), "b".into()], 3, v).unwrap())
            .collect();
        let together = clf.predict_scores(&batch).unwrap();
        for (s, want) in batch.iter().zip(&together) {
            prop_assert_eq!(&clf.predict_scores(std::slice::from_ref(s)).unwrap()[0], want);
        }
        prop_assert_eq!(clf.predict_scores(&batch).unwrap(), together);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn store_indexes_only_correct_samples(seed in any::<u64>()) {
        if let Some(case) = random_case(seed, 4, 6) {
            for class in 0..case.train.manifest().num_classes() {
                for id in case.store.class_ids(class) {
                    prop_assert_eq!(case.train.label(id).unwrap(), class);
                    prop_assert_eq!(case.clf.predict_label(case.train.sample(id).unwrap()).unwrap(), class);
                }
            }
            let indexed: usize = (0..case.train.manifest().num_classes()).map(|c| case.store.class_len(c)).sum();
            let correct = case.train.iter().filter(|(_, s, l)| case.clf.predict_label(s).unwrap() == *l).count();
            prop_assert_eq!(indexed, correct);
        }
    }
}
