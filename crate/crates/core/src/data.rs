//! Labelled datasets, their on-disk layout and the flatline quality filter.
//!
//! A dataset directory holds three files:
//!
//! * `manifest.json`: `{"class_names":[..],"variable_names":[..],"timesteps":N}`
//! * `data.csv`: long form, header `sample_id,variable,t,value`
//! * `labels.csv`: header `sample_id,label`, label is a 0-based class index
//!
//! Rows may come in any order; values are placed by `(variable, t)`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::series::{population_std, MultivariateSeries, Shape};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.csv";
pub const LABELS_FILE: &str = "labels.csv";

/// Default population-std cutoff below which a sample counts as flatlined.
pub const DEFAULT_STD_THRESHOLD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("malformed row at {file} line {line}: {message}")]
    Malformed {
        file: &'static str,
        line: u64,
        message: String,
    },
    #[error("non-finite value at {file} line {line} (sample {key})")]
    NonFinite {
        file: &'static str,
        line: u64,
        key: String,
    },
    #[error("duplicate entry {key} at {file} line {line}")]
    Duplicate {
        file: &'static str,
        line: u64,
        key: String,
    },
    #[error("label for unknown sample {sample} at {file} line {line}")]
    UnknownSample {
        file: &'static str,
        line: u64,
        sample: String,
    },
    #[error("unknown class index {label} for sample {sample} at {file} line {line}")]
    UnknownClass {
        file: &'static str,
        line: u64,
        sample: String,
        label: usize,
    },
    #[error("sample {sample} is incomplete: {message}")]
    Incomplete { sample: String, message: String },
    #[error("sample {0} has no label")]
    Unlabelled(String),
    #[error("{0}")]
    Shape(String),
    #[error("unknown sample {0}")]
    NoSuchSample(String),
    #[error("unknown class {name}; valid classes: {}", valid.join(", "))]
    NoSuchClass { name: String, valid: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub variable_names: Vec<String>,
    pub timesteps: usize,
}

impl Manifest {
    pub fn shape(&self) -> Shape {
        Shape::new(self.variable_names.len(), self.timesteps)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Result<usize, DataError> {
        self.class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| DataError::NoSuchClass {
                name: name.to_string(),
                valid: self.class_names.clone(),
            })
    }

    pub fn class_name(&self, index: usize) -> &str {
        &self.class_names[index]
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.class_names.is_empty() {
            return Err(DataError::Manifest("class_names is empty".into()));
        }
        if self.variable_names.is_empty() {
            return Err(DataError::Manifest("variable_names is empty".into()));
        }
        if self.timesteps == 0 {
            return Err(DataError::Manifest("timesteps must be positive".into()));
        }
        for (what, names) in [
            ("class", &self.class_names),
            ("variable", &self.variable_names),
        ] {
            let mut seen = std::collections::HashSet::new();
            for n in names {
                if n.is_empty() || !seen.insert(n) {
                    return Err(DataError::Manifest(format!(
                        "{what} names must be unique and nonempty ({n:?})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Id-keyed labelled samples conforming to one manifest.
///
/// Samples iterate in ascending `sample_id` order, which is the canonical
/// dataset order used everywhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    manifest: Manifest,
    samples: BTreeMap<String, MultivariateSeries>,
    labels: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn new(manifest: Manifest) -> Result<Self, DataError> {
        manifest.validate()?;
        Ok(Self {
            manifest,
            samples: BTreeMap::new(),
            labels: BTreeMap::new(),
        })
    }

    /// Add one sample; the sample's variable names must match the manifest.
    pub fn insert(
        &mut self,
        id: impl Into<String>,
        sample: MultivariateSeries,
        label: usize,
    ) -> Result<(), DataError> {
        let id = id.into();
        if id.is_empty() {
            return Err(DataError::Shape("sample ids must be nonempty".into()));
        }
        if sample.variables() != self.manifest.variable_names.as_slice()
            || sample.timesteps() != self.manifest.timesteps
        {
            return Err(DataError::Shape(format!(
                "sample {id} does not conform to the manifest"
            )));
        }
        if label >= self.manifest.num_classes() {
            return Err(DataError::Shape(format!(
                "label {label} of sample {id} is out of range"
            )));
        }
        if self.samples.contains_key(&id) {
            return Err(DataError::Shape(format!("duplicate sample id {id}")));
        }
        self.labels.insert(id.clone(), label);
        self.samples.insert(id, sample);
        Ok(())
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn shape(&self) -> Shape {
        self.manifest.shape()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.keys().map(String::as_str)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.samples.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &MultivariateSeries, usize)> {
        self.samples
            .iter()
            .map(|(id, s)| (id.as_str(), s, self.labels[id]))
    }

    pub fn sample(&self, id: &str) -> Result<&MultivariateSeries, DataError> {
        self.samples
            .get(id)
            .ok_or_else(|| DataError::NoSuchSample(id.to_string()))
    }

    pub fn label(&self, id: &str) -> Result<usize, DataError> {
        self.labels
            .get(id)
            .copied()
            .ok_or_else(|| DataError::NoSuchSample(id.to_string()))
    }

    /// A new dataset with the same manifest holding only `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&str) -> bool) -> Dataset {
        let samples: BTreeMap<_, _> = self
            .samples
            .iter()
            .filter(|(id, _)| keep(id))
            .map(|(id, s)| (id.clone(), s.clone()))
            .collect();
        let labels = samples
            .keys()
            .map(|id| (id.clone(), self.labels[id]))
            .collect();
        Dataset {
            manifest: self.manifest.clone(),
            samples,
            labels,
        }
    }
}

#[derive(Deserialize)]
struct DataRow {
    sample_id: String,
    variable: String,
    t: usize,
    value: f64,
}

#[derive(Deserialize)]
struct LabelRow {
    sample_id: String,
    label: usize,
}

fn open(path: &Path) -> Result<File, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_error(file: &'static str, err: csv::Error) -> DataError {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    DataError::Malformed {
        file,
        line,
        message: err.to_string(),
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest, DataError> {
    let manifest: Manifest = serde_json::from_reader(open(path)?)
        .map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Read a dataset directory, validating every row.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let root = root.as_ref();
    let manifest = load_manifest(&root.join(MANIFEST_FILE))?;
    let var_index: HashMap<&str, usize> = manifest
        .variable_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let v = manifest.variable_names.len();
    let t_len = manifest.timesteps;

    // per sample: values plus a filled mask
    let mut raw: BTreeMap<String, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(open(&root.join(DATA_FILE))?);
    check_header(
        &mut reader,
        DATA_FILE,
        &["sample_id", "variable", "t", "value"],
    )?;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(DATA_FILE, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: DataRow = record.deserialize(None).map_err(|e| DataError::Malformed {
            file: DATA_FILE,
            line,
            message: e.to_string(),
        })?;
        if row.sample_id.is_empty() {
            return Err(DataError::Malformed {
                file: DATA_FILE,
                line,
                message: "empty sample_id".into(),
            });
        }
        let key = format!("{}/{}/{}", row.sample_id, row.variable, row.t);
        if !row.value.is_finite() {
            return Err(DataError::NonFinite {
                file: DATA_FILE,
                line,
                key,
            });
        }
        let var = *var_index
            .get(row.variable.as_str())
            .ok_or_else(|| DataError::Malformed {
                file: DATA_FILE,
                line,
                message: format!(
                    "unknown variable {} (sample {})",
                    row.variable, row.sample_id
                ),
            })?;
        if row.t >= t_len {
            return Err(DataError::Malformed {
                file: DATA_FILE,
                line,
                message: format!("t={} out of range for sample {}", row.t, row.sample_id),
            });
        }
        let (values, filled) = raw
            .entry(row.sample_id)
            .or_insert_with(|| (vec![0.0; v * t_len], vec![false; v * t_len]));
        let slot = var * t_len + row.t;
        if filled[slot] {
            return Err(DataError::Duplicate {
                file: DATA_FILE,
                line,
                key,
            });
        }
        filled[slot] = true;
        values[slot] = row.value;
    }

    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(open(&root.join(LABELS_FILE))?);
    check_header(&mut reader, LABELS_FILE, &["sample_id", "label"])?;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(LABELS_FILE, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: LabelRow = record.deserialize(None).map_err(|e| DataError::Malformed {
            file: LABELS_FILE,
            line,
            message: e.to_string(),
        })?;
        if !raw.contains_key(&row.sample_id) {
            return Err(DataError::UnknownSample {
                file: LABELS_FILE,
                line,
                sample: row.sample_id,
            });
        }
        if row.label >= manifest.num_classes() {
            return Err(DataError::UnknownClass {
                file: LABELS_FILE,
                line,
                sample: row.sample_id,
                label: row.label,
            });
        }
        if labels.insert(row.sample_id.clone(), row.label).is_some() {
            return Err(DataError::Duplicate {
                file: LABELS_FILE,
                line,
                key: row.sample_id,
            });
        }
    }

    let mut dataset = Dataset::new(manifest)?;
    for (id, (values, filled)) in raw {
        if let Some(missing) = filled.iter().position(|f| !f) {
            return Err(DataError::Incomplete {
                message: format!(
                    "no value for variable {} at t={}",
                    dataset.manifest.variable_names[missing / t_len],
                    missing % t_len
                ),
                sample: id,
            });
        }
        let label = *labels
            .get(&id)
            .ok_or_else(|| DataError::Unlabelled(id.clone()))?;
        let series =
            MultivariateSeries::from_flat(dataset.manifest.variable_names.clone(), t_len, values)?;
        dataset.insert(id, series, label)?;
    }
    Ok(dataset)
}

fn check_header(
    reader: &mut csv::Reader<File>,
    file: &'static str,
    expected: &[&str],
) -> Result<(), DataError> {
    let header = reader.headers().map_err(|e| csv_error(file, e))?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(DataError::Malformed {
            file,
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    Ok(())
}

/// Write `dataset` in canonical order (sample id, variable, t).
pub fn save_dataset(dataset: &Dataset, root: impl AsRef<Path>) -> Result<(), DataError> {
    let root = root.as_ref();
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    std::fs::create_dir_all(root).map_err(io_err(root))?;

    let manifest_path = root.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| DataError::Manifest(e.to_string()))?;
    json.push('\n');
    std::fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;

    let data_path = root.join(DATA_FILE);
    let file = File::create(&data_path).map_err(io_err(&data_path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_io = |e: csv::Error| DataError::Malformed {
        file: DATA_FILE,
        line: 0,
        message: e.to_string(),
    };
    w.write_record(["sample_id", "variable", "t", "value"])
        .map_err(csv_io)?;
    for (id, sample, _) in dataset.iter() {
        for (name, row) in sample.variables().iter().zip(sample.rows()) {
            for (t, value) in row.iter().enumerate() {
                w.write_record([id, name, &t.to_string(), &value.to_string()])
                    .map_err(csv_io)?;
            }
        }
    }
    w.flush().map_err(io_err(&data_path))?;

    let labels_path = root.join(LABELS_FILE);
    let file = File::create(&labels_path).map_err(io_err(&labels_path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["sample_id", "label"]).map_err(csv_io)?;
    for (id, _, label) in dataset.iter() {
        w.write_record([id, &label.to_string()]).map_err(csv_io)?;
    }
    w.flush().map_err(io_err(&labels_path))?;
    Ok(())
}

/// Result of [`quality_filter`].
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: Dataset,
    pub removed: Vec<String>,
}

/// Drop flatlined samples: population std of the flattened sample below
/// `threshold`, optionally only among samples labelled `class_filter`.
pub fn quality_filter(
    dataset: &Dataset,
    class_filter: Option<usize>,
    threshold: f64,
) -> FilterOutcome {
    let removed: Vec<String> = dataset
        .iter()
        .filter(|(_, sample, label)| {
            class_filter.is_none_or(|c| c == *label) && population_std(sample.as_flat()) < threshold
        })
        .map(|(id, _, _)| id.to_string())
        .collect();
    let kept = dataset.filter(|id| removed.binary_search_by(|r| r.as_str().cmp(id)).is_err());
    FilterOutcome { kept, removed }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(v: usize, t: usize) -> Manifest {
        Manifest {
            class_names: vec!["normal".into(), "abnormal".into()],
            variable_names: (0..v).map(|i| format!("lead{i}")).collect(),
            timesteps: t,
        }
    }

    fn series(m: &Manifest, rows: Vec<Vec<f64>>) -> MultivariateSeries {
        MultivariateSeries::new(m.variable_names.clone(), rows).unwrap()
    }

    fn write(dir: &Path, data: &str, labels: &str) {
        let m = manifest(2, 2);
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        std::fs::write(dir.join(DATA_FILE), data).unwrap();
        std::fs::write(dir.join(LABELS_FILE), labels).unwrap();
    }

    const GOOD: &str = "sample_id,variable,t,value\n\
        s1,lead1,1,4\ns1,lead0,0,1\ns1,lead0,1,2\ns1,lead1,0,3\n";

    #[test]
    fn loads_out_of_order_rows() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), GOOD, "sample_id,label\ns1,1\n");
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.sample("s1").unwrap().flatten(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ds.label("s1").unwrap(), 1);
    }

    #[test]
    fn save_then_load_is_identity() {
        let m = manifest(2, 4);
        let mut ds = Dataset::new(m.clone()).unwrap();
        ds.insert(
            "a",
            series(&m, vec![vec![0.1, 0.2, 1e-300, -7.0], vec![1.0 / 3.0; 4]]),
            0,
        )
        .unwrap();
        ds.insert(
            "b",
            series(&m, vec![vec![2.0; 4], vec![-0.0, 5.5, 6.0, 1e17]]),
            1,
        )
        .unwrap();
        ds.insert("c", series(&m, vec![vec![9.0; 4], vec![8.0; 4]]), 0)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back, ds);
    }

    #[test]
    fn non_finite_value_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let data = format!("{GOOD}s1,lead0,0,NaN\n");
        write(dir.path(), &data, "sample_id,label\ns1,0\n");
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, DataError::NonFinite { line: 6, .. }), "{err}");
        assert!(err
            .to_string()
            .contains("non-finite value at data.csv line 6"));
    }

    #[test]
    fn label_for_unknown_sample() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), GOOD, "sample_id,label\ns1,0\ns9,0\n");
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(
            err.to_string().contains("label for unknown sample s9"),
            "{err}"
        );
    }

    #[test]
    fn structural_errors() {
        let dir = tempfile::tempdir().unwrap();
        // duplicate triple
        write(
            dir.path(),
            &format!("{GOOD}s1,lead1,1,4\n"),
            "sample_id,label\ns1,0\n",
        );
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::Duplicate { line: 6, .. })
        ));
        // missing timestep
        write(
            dir.path(),
            "sample_id,variable,t,value\ns1,lead0,0,1\ns1,lead0,1,1\ns1,lead1,0,1\n",
            "sample_id,label\ns1,0\n",
        );
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::Incomplete { .. })
        ));
        // bad class
        write(dir.path(), GOOD, "sample_id,label\ns1,2\n");
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::UnknownClass { .. })
        ));
        // malformed value
        write(
            dir.path(),
            "sample_id,variable,t,value\ns1,lead0,x,1\n",
            "sample_id,label\n",
        );
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::Malformed { line: 2, .. })
        ));
        // no label
        write(dir.path(), GOOD, "sample_id,label\n");
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::Unlabelled(_))
        ));
        // missing file
        std::fs::remove_file(dir.path().join(LABELS_FILE)).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::MissingFile(_))
        ));
    }

    fn filter_fixture() -> Dataset {
        let m = Manifest {
            class_names: vec!["normal".into(), "abnormal".into()],
            variable_names: vec!["v".into()],
            timesteps: 4,
        };
        let mut ds = Dataset::new(m.clone()).unwrap();
        ds.insert("flat", series(&m, vec![vec![1.0; 4]]), 0)
            .unwrap();
        ds.insert("ok", series(&m, vec![vec![0.0, 0.0, 0.0, 2.0]]), 0)
            .unwrap();
        ds.insert("flat-abn", series(&m, vec![vec![3.0; 4]]), 1)
            .unwrap();
        ds
    }

    #[test]
    fn quality_filter_cases() {
        let ds = filter_fixture();
        let out = quality_filter(&ds, None, DEFAULT_STD_THRESHOLD);
        assert_eq!(out.removed, vec!["flat", "flat-abn"]);
        assert_eq!(out.kept.ids().collect::<Vec<_>>(), vec!["ok"]);

        let out = quality_filter(&ds, Some(0), 0.1);
        assert_eq!(out.removed, vec!["flat"]);
        assert_eq!(out.kept.len(), 2);

        let out = quality_filter(&ds, None, 0.0);
        assert!(out.removed.is_empty());
        assert_eq!(out.kept, ds);
    }
}
