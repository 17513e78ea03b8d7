//! Per-class nearest-neighbour index of correctly classified samples.

use std::sync::Arc;

use thiserror::Error;

use crate::classifier::{ClassifierHandle, ScoreError};
use crate::data::Dataset;
use crate::kdtree::KdTree;
use crate::series::MultivariateSeries;

// samples per scoring request while building
const BUILD_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no distractors available for class {0}")]
    NoDistractors(String),
    #[error("class index {0} out of range")]
    UnknownClass(usize),
    #[error("query has shape {got:?}, store holds {expected:?}")]
    ShapeMismatch {
        expected: crate::series::Shape,
        got: crate::series::Shape,
    },
    #[error("cannot build a store from an empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Score(#[from] ScoreError),
}

#[derive(Debug, Clone)]
struct ClassIndex {
    // ascending sample id; tree point i is ids[i]
    ids: Vec<String>,
    tree: KdTree,
}

/// One retrieved distractor.
#[derive(Debug, Clone, PartialEq)]
pub struct Distractor {
    pub sample_id: String,
    pub distance: f64,
}

/// Class-specific KD-trees over the flattened training samples the
/// classifier gets right. Immutable after [`build_store`].
#[derive(Debug, Clone)]
pub struct DistractorStore {
    dataset: Arc<Dataset>,
    classes: Vec<ClassIndex>,
}

/// Score every sample of `dataset` once and index the correctly classified
/// ones under their label. A class nobody gets right has an empty tree.
pub fn build_store(
    dataset: Arc<Dataset>,
    clf: &ClassifierHandle,
) -> Result<DistractorStore, StoreError> {
    if dataset.is_empty() {
        return Err(StoreError::EmptyDataset);
    }
    let entries: Vec<(&str, &MultivariateSeries, usize)> = dataset.iter().collect();
    let mut predicted = Vec::with_capacity(entries.len());
    for chunk in entries.chunks(BUILD_BATCH) {
        let batch: Vec<MultivariateSeries> = chunk.iter().map(|(_, s, _)| (*s).clone()).collect();
        predicted.extend(clf.predict_labels(&batch)?);
    }
    let dim = dataset.shape().len();
    let classes = (0..dataset.manifest().num_classes())
        .map(|class| {
            let members: Vec<&(&str, &MultivariateSeries, usize)> = entries
                .iter()
                .zip(&predicted)
                .filter(|((_, _, label), pred)| *label == class && **pred == class)
                .map(|(e, _)| e)
                .collect();
            let ids = members.iter().map(|(id, _, _)| id.to_string()).collect();
            let points = members
                .iter()
                .flat_map(|(_, s, _)| s.as_flat().iter().copied())
                .collect();
            ClassIndex {
                ids,
                tree: KdTree::build(dim, points),
            }
        })
        .collect();
    Ok(DistractorStore { dataset, classes })
}

impl DistractorStore {
    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn class_len(&self, class: usize) -> usize {
        self.classes.get(class).map_or(0, |c| c.ids.len())
    }

    /// Indexed sample ids of `class`, ascending.
    pub fn class_ids(&self, class: usize) -> &[String] {
        self.classes.get(class).map_or(&[], |c| &c.ids)
    }

    pub fn contains(&self, sample_id: &str) -> bool {
        self.dataset.contains(sample_id)
    }

    pub fn nearest_distractors(
        &self,
        query: &MultivariateSeries,
        target: usize,
        k: usize,
    ) -> Result<Vec<Distractor>, StoreError> {
        let index = self
            .classes
            .get(target)
            .ok_or(StoreError::UnknownClass(target))?;
        if query.shape() != self.dataset.shape() {
            return Err(StoreError::ShapeMismatch {
                expected: self.dataset.shape(),
                got: query.shape(),
            });
        }
        if index.ids.is_empty() {
            return Err(StoreError::NoDistractors(
                self.dataset.manifest().class_name(target).to_string(),
            ));
        }
        Ok(index
            .tree
            .nearest(query.as_flat(), k.max(1))
            .into_iter()
            .map(|nb| Distractor {
                sample_id: index.ids[nb.index].clone(),
                distance: nb.distance(),
            })
            .collect())
    }

    pub fn distractor(&self, sample_id: &str) -> Option<&MultivariateSeries> {
        self.dataset.sample(sample_id).ok()
    }
}
