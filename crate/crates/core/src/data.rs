//! Tabular ingestion: dataset spec files, delimited-text loading, one-hot
//! and z-score encoding, seeded splits, and a synthetic generator with
//! controllable attribute leakage.
//!
//! Protected columns never enter the feature matrix. They are routed to a
//! separate binary matrix used for training the attribute branches and for
//! auditing predictions.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("column `{0}` is not present")]
    MissingColumn(String),
    #[error("{path}:{line}: column `{column}`: cannot parse `{value}` as {kind}")]
    Parse {
        path: PathBuf,
        line: u64,
        column: String,
        value: String,
        kind: ColumnKind,
    },
    #[error("{path}:{line}: expected {expected} fields, found {actual}")]
    RowLength {
        path: PathBuf,
        line: u64,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("split fractions {0:?} must be positive and sum to 1")]
    Fractions((f64, f64, f64)),
    #[error("split of {n} rows with fractions {fractions:?} leaves the {part} split empty")]
    EmptySplit {
        n: usize,
        fractions: (f64, f64, f64),
        part: &'static str,
    },
    #[error("synthetic data: {0}")]
    Synth(String),
    #[error("schema audit failed: {0}")]
    Audit(String),
    #[error("no rows left after loading")]
    Empty,
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Categorical,
    Binary,
    /// Present in the file but not used.
    Ignore,
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnKind::Continuous => "continuous",
            ColumnKind::Categorical => "categorical",
            ColumnKind::Binary => "binary",
            ColumnKind::Ignore => "ignore",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPolicy {
    /// Continuous and binary: train-split mean. Categorical: its own category.
    #[default]
    Impute,
    DropRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// Binary columns: values read as 1. Defaults to "1", "true", "yes".
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub one: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub column: String,
    pub positive: Vec<String>,
    /// When set, target values in neither list make the row unparseable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtectedSpec {
    pub name: String,
    pub column: String,
    /// Categorical or binary source: values mapped to group 1.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub group1: Vec<String>,
    /// Continuous source: values strictly above this are group 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

fn default_delimiter() -> String {
    ",".into()
}

fn default_missing() -> Vec<String> {
    vec!["?".into(), String::new()]
}

/// Description of one tabular dataset, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    /// Files read in order and concatenated. Relative paths are resolved
    /// against the directory of the dataset spec file.
    pub sources: Vec<PathBuf>,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    #[serde(default)]
    pub header: bool,
    /// Lines starting with this character are skipped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    #[serde(default = "default_missing")]
    pub missing_values: Vec<String>,
    #[serde(default)]
    pub missing_policy: MissingPolicy,
    pub target: TargetSpec,
    #[serde(default)]
    pub protected: Vec<ProtectedSpec>,
    /// Every column of the file, in file order.
    pub columns: Vec<ColumnSpec>,
}

impl DatasetSpec {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut spec: DatasetSpec =
            toml::from_str(text).map_err(|e| DataError::Spec(e.to_string()))?;
        for src in &mut spec.sources {
            if src.is_relative() {
                *src = base_dir.join(&*src);
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("dataset spec serializes")
    }

    fn column(&self, name: &str) -> Result<&ColumnSpec> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(DataError::Spec("no sources listed".into()));
        }
        if self.delimiter.len() != 1 {
            return Err(DataError::Spec(format!(
                "delimiter must be one byte, got {:?}",
                self.delimiter
            )));
        }
        let mut seen = BTreeSet::new();
        for c in &self.columns {
            if !seen.insert(&c.name) {
                return Err(DataError::Spec(format!("duplicate column `{}`", c.name)));
            }
        }
        self.column(&self.target.column)?;
        if self.target.positive.is_empty() {
            return Err(DataError::Spec("target needs at least one positive value".into()));
        }
        let mut names = BTreeSet::new();
        for p in &self.protected {
            if !names.insert(&p.name) {
                return Err(DataError::Spec(format!("duplicate protected name `{}`", p.name)));
            }
            let col = self.column(&p.column)?;
            if p.column == self.target.column {
                return Err(DataError::Spec(format!(
                    "protected `{}` uses the target column",
                    p.name
                )));
            }
            match col.kind {
                ColumnKind::Continuous if p.threshold.is_none() => {
                    return Err(DataError::Spec(format!(
                        "protected `{}` reads continuous column `{}` and needs a threshold",
                        p.name, p.column
                    )))
                }
                ColumnKind::Categorical if p.group1.is_empty() => {
                    return Err(DataError::Spec(format!(
                        "protected `{}` reads categorical column `{}` and needs group1 values",
                        p.name, p.column
                    )))
                }
                ColumnKind::Ignore => {
                    return Err(DataError::Spec(format!(
                        "protected `{}` reads ignored column `{}`",
                        p.name, p.column
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn is_protected_column(&self, name: &str) -> bool {
        self.protected.iter().any(|p| p.column == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ColumnValues {
    Continuous(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
    Binary(Vec<Option<u8>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawColumn {
    pub name: String,
    pub values: ColumnValues,
}

/// Typed feature columns plus target and protected labels, one entry per
/// kept row.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    /// Feature columns: every schema column except ignored, target and
    /// protected ones.
    pub columns: Vec<RawColumn>,
    pub target: Vec<u8>,
    pub protected: Vec<Vec<u8>>,
    pub protected_names: Vec<String>,
    pub dropped_rows: usize,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }
}

enum Cell {
    Missing,
    Value(String),
}

fn binary_value(col: &ColumnSpec, s: &str) -> Option<u8> {
    if col.one.is_empty() {
        match s.to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" => Some(1),
            "0" | "false" | "no" => Some(0),
            _ => None,
        }
    } else {
        Some(u8::from(col.one.iter().any(|v| v == s)))
    }
}

/// Reads every source of `spec` into typed columns. Rows whose target is
/// missing or unrecognized are dropped and counted; so are rows with a
/// missing protected value, or any missing value under `drop-row`.
pub fn load_table(spec: &DatasetSpec) -> Result<RawTable> {
    spec.validate()?;
    let delim = spec.delimiter.as_bytes()[0];
    let comment = spec.comment.as_ref().and_then(|c| c.bytes().next());

    // per-column string cells for kept rows
    let mut cells: Vec<Vec<Cell>> = spec.columns.iter().map(|_| Vec::new()).collect();
    let mut target = Vec::new();
    let mut dropped = 0usize;
    let target_idx = spec
        .columns
        .iter()
        .position(|c| c.name == spec.target.column)
        .expect("validated");

    for path in &spec.sources {
        let file = fs::File::open(path).map_err(|source| DataError::Io {
            path: path.clone(),
            source,
        })?;
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(delim)
            .has_headers(spec.header)
            .comment(comment)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(file);

        // file position of each schema column
        let positions: Vec<usize> = if spec.header {
            let header = reader
                .headers()
                .map_err(|source| DataError::Csv {
                    path: path.clone(),
                    source,
                })?
                .clone();
            spec.columns
                .iter()
                .map(|c| {
                    header
                        .iter()
                        .position(|h| h == c.name)
                        .ok_or_else(|| DataError::MissingColumn(c.name.clone()))
                })
                .collect::<Result<_>>()?
        } else {
            (0..spec.columns.len()).collect()
        };
        let needed = positions.iter().max().map_or(0, |m| m + 1);

        for record in reader.records() {
            let record = record.map_err(|source| DataError::Csv {
                path: path.clone(),
                source,
            })?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() == 1 && record[0].is_empty() {
                continue;
            }
            if record.len() < needed {
                return Err(DataError::RowLength {
                    path: path.clone(),
                    line,
                    expected: needed,
                    actual: record.len(),
                });
            }
            let raw_target = &record[positions[target_idx]];
            let label = if spec.missing_values.iter().any(|m| m == raw_target) {
                None
            } else if spec.target.positive.iter().any(|p| p == raw_target) {
                Some(1u8)
            } else {
                match &spec.target.negative {
                    Some(neg) if !neg.iter().any(|v| v == raw_target) => None,
                    _ => Some(0u8),
                }
            };
            let Some(label) = label else {
                dropped += 1;
                continue;
            };

            let mut row = Vec::with_capacity(spec.columns.len());
            let mut drop_row = false;
            for (col, &pos) in spec.columns.iter().zip(&positions) {
                let v = &record[pos];
                let missing = spec.missing_values.iter().any(|m| m == v);
                if missing {
                    let protected = spec.is_protected_column(&col.name);
                    if col.kind != ColumnKind::Ignore
                        && (protected || spec.missing_policy == MissingPolicy::DropRow)
                    {
                        drop_row = true;
                    }
                    row.push(Cell::Missing);
                    continue;
                }
                let ok = match col.kind {
                    ColumnKind::Continuous => v.parse::<f64>().is_ok_and(f64::is_finite),
                    ColumnKind::Binary => binary_value(col, v).is_some(),
                    _ => true,
                };
                if !ok {
                    return Err(DataError::Parse {
                        path: path.clone(),
                        line,
                        column: col.name.clone(),
                        value: v.to_string(),
                        kind: col.kind,
                    });
                }
                row.push(Cell::Value(v.to_string()));
            }
            if drop_row {
                dropped += 1;
                continue;
            }
            for (dst, cell) in cells.iter_mut().zip(row) {
                dst.push(cell);
            }
            target.push(label);
        }
    }
    if dropped > 0 {
        info!("{}: dropped {} rows", spec.name, dropped);
    }
    if target.is_empty() {
        return Err(DataError::Empty);
    }

    let mut protected = Vec::new();
    for p in &spec.protected {
        let idx = spec.columns.iter().position(|c| c.name == p.column).expect("validated");
        let col = &spec.columns[idx];
        let values = cells[idx]
            .iter()
            .map(|cell| {
                let Cell::Value(v) = cell else {
                    unreachable!("rows with missing protected values are dropped")
                };
                match (col.kind, p.threshold) {
                    (ColumnKind::Continuous, Some(t)) => u8::from(v.parse::<f64>().unwrap() > t),
                    (ColumnKind::Binary, _) if p.group1.is_empty() => binary_value(col, v).unwrap(),
                    _ => u8::from(p.group1.iter().any(|g| g == v)),
                }
            })
            .collect();
        protected.push(values);
    }

    let mut columns = Vec::new();
    for (col, values) in spec.columns.iter().zip(cells) {
        if col.kind == ColumnKind::Ignore
            || col.name == spec.target.column
            || spec.is_protected_column(&col.name)
        {
            continue;
        }
        let values = match col.kind {
            ColumnKind::Continuous => ColumnValues::Continuous(
                values
                    .into_iter()
                    .map(|c| match c {
                        Cell::Value(v) => Some(v.parse().unwrap()),
                        Cell::Missing => None,
                    })
                    .collect(),
            ),
            ColumnKind::Binary => ColumnValues::Binary(
                values
                    .into_iter()
                    .map(|c| match c {
                        Cell::Value(v) => binary_value(col, &v),
                        Cell::Missing => None,
                    })
                    .collect(),
            ),
            ColumnKind::Categorical => ColumnValues::Categorical(
                values
                    .into_iter()
                    .map(|c| match c {
                        Cell::Value(v) => Some(v),
                        Cell::Missing => None,
                    })
                    .collect(),
            ),
            ColumnKind::Ignore => unreachable!(),
        };
        columns.push(RawColumn {
            name: col.name.clone(),
            values,
        });
    }

    Ok(RawTable {
        columns,
        target,
        protected,
        protected_names: spec.protected.iter().map(|p| p.name.clone()).collect(),
        dropped_rows: dropped,
    })
}

const MISSING_CATEGORY: &str = "<missing>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    /// z-scored with train statistics; missing values take the train mean.
    Continuous,
    /// 0/1, missing values take the train mean, not rescaled.
    Binary,
    OneHot,
}

/// Per-feature transform `(fill_if_missing(raw) - center) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub fill: f64,
    pub center: f64,
    pub scale: f64,
}

/// Everything learned from a training table: category vocabularies and
/// per-feature scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingStats {
    /// Vocabulary of every categorical column, in its one-hot order.
    pub categories: Vec<(String, Vec<String>)>,
    pub scaling: Vec<Scaling>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDataset {
    /// Encoded and standardized x̃, `rows × features`, finite.
    pub features: Tensor,
    pub feature_names: Vec<String>,
    pub feature_kinds: Vec<FeatureKind>,
    pub target: Vec<u8>,
    /// One binary column per protected attribute.
    pub protected: Vec<Vec<u8>>,
    pub protected_names: Vec<String>,
    pub stats: EncodingStats,
    /// Pre-scaling values, NaN where missing; kept so splits can refit the
    /// scaling on their own train part.
    raw: Vec<f64>,
}

fn fit_scaling(raw: &[f64], d: usize, kinds: &[FeatureKind]) -> Vec<Scaling> {
    let n = raw.len() / d.max(1);
    (0..d)
        .map(|j| {
            let vals: Vec<f64> = (0..n).map(|i| raw[i * d + j]).filter(|v| !v.is_nan()).collect();
            let mean = if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            match kinds[j] {
                FeatureKind::Continuous => {
                    let var = if vals.is_empty() {
                        0.0
                    } else {
                        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64
                    };
                    let std = var.sqrt();
                    Scaling {
                        fill: mean,
                        center: mean,
                        scale: if std > 0.0 { std } else { 1.0 },
                    }
                }
                FeatureKind::Binary => Scaling {
                    fill: mean,
                    center: 0.0,
                    scale: 1.0,
                },
                FeatureKind::OneHot => Scaling {
                    fill: 0.0,
                    center: 0.0,
                    scale: 1.0,
                },
            }
        })
        .collect()
}

fn apply_scaling(raw: &[f64], scaling: &[Scaling]) -> Vec<f64> {
    let d = scaling.len();
    raw.iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = scaling[i % d];
            let v = if v.is_nan() { s.fill } else { v };
            (v - s.center) / s.scale
        })
        .collect()
}

/// Encodes a table. Without `train_stats` the vocabularies and scaling are
/// learned from `table` itself; with them, unseen categories encode as
/// all-zero one-hot rows (with a warning).
pub fn encode(table: &RawTable, spec: &DatasetSpec, train_stats: Option<&EncodingStats>) -> Result<EncodedDataset> {
    let n = table.len();
    let mut names = Vec::new();
    let mut kinds = Vec::new();
    let mut categories = Vec::new();
    let mut blocks: Vec<Vec<f64>> = Vec::new(); // column-major raw features

    for col in &table.columns {
        match &col.values {
            ColumnValues::Continuous(v) => {
                names.push(col.name.clone());
                kinds.push(FeatureKind::Continuous);
                blocks.push(v.iter().map(|x| x.unwrap_or(f64::NAN)).collect());
            }
            ColumnValues::Binary(v) => {
                names.push(col.name.clone());
                kinds.push(FeatureKind::Binary);
                blocks.push(v.iter().map(|x| x.map_or(f64::NAN, f64::from)).collect());
            }
            ColumnValues::Categorical(v) => {
                let vocab: Vec<String> = match train_stats {
                    Some(stats) => stats
                        .categories
                        .iter()
                        .find(|(name, _)| name == &col.name)
                        .map(|(_, vocab)| vocab.clone())
                        .ok_or_else(|| DataError::MissingColumn(col.name.clone()))?,
                    None => v
                        .iter()
                        .map(|x| x.as_deref().unwrap_or(MISSING_CATEGORY).to_string())
                        .collect::<BTreeSet<_>>()
                        .into_iter()
                        .collect(),
                };
                let mut unseen = 0usize;
                let mut onehot = vec![vec![0.0; n]; vocab.len()];
                for (i, x) in v.iter().enumerate() {
                    let key = x.as_deref().unwrap_or(MISSING_CATEGORY);
                    match vocab.binary_search_by(|c| c.as_str().cmp(key)) {
                        Ok(k) => onehot[k][i] = 1.0,
                        Err(_) => unseen += 1,
                    }
                }
                if unseen > 0 {
                    warn!(
                        "column `{}`: {} rows with categories unseen in training encode as all zeros",
                        col.name, unseen
                    );
                }
                for (value, block) in vocab.iter().zip(onehot) {
                    names.push(format!("{}={}", col.name, value));
                    kinds.push(FeatureKind::OneHot);
                    blocks.push(block);
                }
                categories.push((col.name.clone(), vocab));
            }
        }
    }

    let d = names.len();
    if d == 0 {
        return Err(DataError::Spec("no feature columns remain after excluding protected ones".into()));
    }
    let mut raw = vec![0.0; n * d];
    for (j, block) in blocks.iter().enumerate() {
        for (i, &v) in block.iter().enumerate() {
            raw[i * d + j] = v;
        }
    }
    let scaling = match train_stats {
        Some(stats) if stats.scaling.len() == d => stats.scaling.clone(),
        Some(stats) => {
            return Err(DataError::Spec(format!(
                "train statistics cover {} features, table encodes to {}",
                stats.scaling.len(),
                d
            )))
        }
        None => fit_scaling(&raw, d, &kinds),
    };
    let features = Tensor::matrix(n, d, apply_scaling(&raw, &scaling)).expect("shape is n×d");
    let ds = EncodedDataset {
        features,
        feature_names: names,
        feature_kinds: kinds,
        target: table.target.clone(),
        protected: table.protected.clone(),
        protected_names: table.protected_names.clone(),
        stats: EncodingStats { categories, scaling },
        raw,
    };
    ds.audit(spec)?;
    Ok(ds)
}

/// `load_table` followed by `encode` with statistics learned from the file.
pub fn load_dataset(spec: &DatasetSpec) -> Result<EncodedDataset> {
    encode(&load_table(spec)?, spec, None)
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Index of a protected attribute by name.
    pub fn protected_index(&self, name: &str) -> Option<usize> {
        self.protected_names.iter().position(|p| p == name)
    }

    /// Checks that no protected column leaked into x̃, by name or as an
    /// exact copy of its values.
    pub fn audit(&self, spec: &DatasetSpec) -> Result<()> {
        for p in &spec.protected {
            let prefix = format!("{}=", p.column);
            if let Some(f) = self
                .feature_names
                .iter()
                .find(|f| **f == p.column || **f == p.name || f.starts_with(&prefix))
            {
                return Err(DataError::Audit(format!(
                    "feature `{f}` is derived from protected column `{}`",
                    p.column
                )));
            }
        }
        self.audit_values()
    }

    fn audit_values(&self) -> Result<()> {
        let d = self.n_features();
        for (name, a) in self.protected_names.iter().zip(&self.protected) {
            for j in 0..d {
                let same = (0..self.len()).all(|i| self.raw[i * d + j] == f64::from(a[i]));
                if same && self.len() > 1 {
                    return Err(DataError::Audit(format!(
                        "feature `{}` duplicates protected attribute `{name}`",
                        self.feature_names[j]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rows by index, keeping the current statistics.
    pub fn subset(&self, indices: &[usize]) -> EncodedDataset {
        let d = self.n_features();
        let mut raw = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            raw.extend_from_slice(&self.raw[i * d..(i + 1) * d]);
        }
        EncodedDataset {
            features: self.features.select_rows(indices),
            feature_names: self.feature_names.clone(),
            feature_kinds: self.feature_kinds.clone(),
            target: indices.iter().map(|&i| self.target[i]).collect(),
            protected: self
                .protected
                .iter()
                .map(|col| indices.iter().map(|&i| col[i]).collect())
                .collect(),
            protected_names: self.protected_names.clone(),
            stats: self.stats.clone(),
            raw,
        }
    }

    /// Re-derives the scaling from this dataset's rows.
    fn refit(&mut self) {
        self.stats.scaling = fit_scaling(&self.raw, self.n_features(), &self.feature_kinds);
        self.rescale(&self.stats.scaling.clone());
    }

    fn rescale(&mut self, scaling: &[Scaling]) {
        self.stats.scaling = scaling.to_vec();
        self.features = Tensor::matrix(self.len(), self.n_features(), apply_scaling(&self.raw, scaling))
            .expect("shape unchanged");
    }

    /// Writes the pre-scaling features, protected attributes and target as
    /// a headed CSV that [`synthetic_spec`] describes.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io_err = |e: csv::Error| DataError::Csv {
            path: path.to_path_buf(),
            source: e,
        };
        let mut w = csv::Writer::from_path(path).map_err(io_err)?;
        let mut header: Vec<String> = self.feature_names.clone();
        header.extend(self.protected_names.iter().cloned());
        header.push("y".into());
        w.write_record(&header).map_err(io_err)?;
        let d = self.n_features();
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.raw[i * d..(i + 1) * d]
                .iter()
                .map(|v| format!("{v:?}"))
                .collect();
            rec.extend(self.protected.iter().map(|a| a[i].to_string()));
            rec.push(self.target[i].to_string());
            w.write_record(&rec).map_err(io_err)?;
        }
        w.flush().map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Train / validation / test parts of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: EncodedDataset,
    pub val: EncodedDataset,
    pub test: EncodedDataset,
    pub fractions: (f64, f64, f64),
    /// Source row indices of (train, val, test).
    pub indices: (Vec<usize>, Vec<usize>, Vec<usize>),
}

pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.5, 0.2, 0.3);

/// Seeded random partition. Scaling is refit on the train part and applied
/// to all three.
pub fn split(ds: &EncodedDataset, fractions: (f64, f64, f64), rng_seed: u64) -> Result<Splits> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(DataError::Fractions(fractions));
    }
    let n = ds.len();
    let n_train = (n as f64 * a).round() as usize;
    let n_val = ((n as f64 * b).round() as usize).min(n - n_train);
    let n_test = n.saturating_sub(n_train + n_val);
    for (size, part) in [(n_train, "train"), (n_val, "validation"), (n_test, "test")] {
        if size == 0 {
            return Err(DataError::EmptySplit { n, fractions, part });
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    let (tr, rest) = order.split_at(n_train);
    let (va, te) = rest.split_at(n_val);

    let mut train = ds.subset(tr);
    train.refit();
    let scaling = train.stats.scaling.clone();
    let mut val = ds.subset(va);
    val.rescale(&scaling);
    let mut test = ds.subset(te);
    test.rescale(&scaling);
    Ok(Splits {
        train,
        val,
        test,
        fractions,
        indices: (tr.to_vec(), va.to_vec(), te.to_vec()),
    })
}

/// Dataset spec describing a CSV written by [`EncodedDataset::write_csv`]
/// for a synthetic dataset.
pub fn synthetic_spec(ds: &EncodedDataset, csv_name: &str) -> DatasetSpec {
    let mut columns: Vec<ColumnSpec> = ds
        .feature_names
        .iter()
        .map(|n| ColumnSpec {
            name: n.clone(),
            kind: ColumnKind::Continuous,
            one: Vec::new(),
        })
        .collect();
    let mut protected = Vec::new();
    for p in &ds.protected_names {
        columns.push(ColumnSpec {
            name: p.clone(),
            kind: ColumnKind::Binary,
            one: Vec::new(),
        });
        protected.push(ProtectedSpec {
            name: p.clone(),
            column: p.clone(),
            group1: vec!["1".into()],
            threshold: None,
        });
    }
    columns.push(ColumnSpec {
        name: "y".into(),
        kind: ColumnKind::Binary,
        one: Vec::new(),
    });
    DatasetSpec {
        name: "synthetic".into(),
        sources: vec![PathBuf::from(csv_name)],
        delimiter: ",".into(),
        header: true,
        comment: None,
        missing_values: default_missing(),
        missing_policy: MissingPolicy::Impute,
        target: TargetSpec {
            column: "y".into(),
            positive: vec!["1".into()],
            negative: Some(vec!["0".into()]),
        },
        protected,
        columns,
    }
}

/// How strongly each protected attribute shifts the label logit at bias 1.
pub const SYNTH_LABEL_SHIFT: f64 = 1.5;
/// Noise on the signal features around the latent score.
pub const SYNTH_SIGNAL_NOISE: f64 = 0.5;
pub const SYNTH_MIN_ROWS: usize = 100;

/// Synthetic data with controllable attribute leakage.
///
/// For each row: protected bits `a_j ~ Bernoulli(0.5)` with signs
/// `s_j = 2 a_j − 1`, a latent score `u ~ N(0, 1)`, and the label
/// `y = 1[u + SYNTH_LABEL_SHIFT · Σ_j b_j s_j + ε > 0]` with `ε ~ N(0, 0.25)`.
/// The first `m = bias.len()` features are leakage channels
/// `b_j s_j + (1 − b_j) η`, the remaining `d − m` are signal channels
/// `u + SYNTH_SIGNAL_NOISE · η`, every `η ~ N(0, 1)` drawn fresh.
///
/// At bias 0 the attributes are independent of both label and features; at
/// bias 1 each leakage channel equals its attribute's sign exactly.
pub fn synth_biased(n: usize, d: usize, bias: &[f64], rng_seed: u64) -> Result<EncodedDataset> {
    if n < SYNTH_MIN_ROWS {
        return Err(DataError::Synth(format!("n must be at least {SYNTH_MIN_ROWS}, got {n}")));
    }
    if bias.is_empty() {
        return Err(DataError::Synth("need at least one bias entry".into()));
    }
    if let Some(b) = bias.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(DataError::Synth(format!("bias {b} outside [0, 1]")));
    }
    let m = bias.len();
    if d <= m {
        return Err(DataError::Synth(format!(
            "d = {d} must exceed the number of attributes ({m}) to leave a signal feature"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut raw = Vec::with_capacity(n * d);
    let mut target = Vec::with_capacity(n);
    let mut protected = vec![Vec::with_capacity(n); m];
    for _ in 0..n {
        let bits: Vec<u8> = (0..m).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let signs: Vec<f64> = bits.iter().map(|&a| 2.0 * f64::from(a) - 1.0).collect();
        let u: f64 = rng.sample(StandardNormal);
        let eps: f64 = rng.sample::<f64, _>(StandardNormal) * 0.5;
        let shift: f64 = bias.iter().zip(&signs).map(|(b, s)| b * s).sum::<f64>() * SYNTH_LABEL_SHIFT;
        target.push(u8::from(u + shift + eps > 0.0));
        for j in 0..m {
            let eta: f64 = rng.sample(StandardNormal);
            raw.push(bias[j] * signs[j] + (1.0 - bias[j]) * eta);
            protected[j].push(bits[j]);
        }
        for _ in m..d {
            let eta: f64 = rng.sample(StandardNormal);
            raw.push(u + SYNTH_SIGNAL_NOISE * eta);
        }
    }
    let mut feature_names: Vec<String> = (0..m).map(|j| format!("leak{j}")).collect();
    feature_names.extend((0..d - m).map(|k| format!("signal{k}")));
    let kinds = vec![FeatureKind::Continuous; d];
    let scaling = fit_scaling(&raw, d, &kinds);
    let features = Tensor::matrix(n, d, apply_scaling(&raw, &scaling)).expect("shape is n×d");
    Ok(EncodedDataset {
        features,
        feature_names,
        feature_kinds: kinds,
        target,
        protected,
        protected_names: (0..m).map(|j| format!("attr{j}")).collect(),
        stats: EncodingStats {
            categories: Vec::new(),
            scaling,
        },
        raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        fs::File::create(&path).unwrap().write_all(body.as_bytes()).unwrap();
        path
    }

    const TOY_SPEC: &str = r#"
name = "toy"
sources = ["toy.csv"]
header = true
[target]
column = "label"
positive = ["yes"]
negative = ["no"]
[[protected]]
name = "gender"
column = "sex"
group1 = ["F"]
[[columns]]
name = "age"
kind = "continuous"
[[columns]]
name = "color"
kind = "categorical"
[[columns]]
name = "sex"
kind = "categorical"
[[columns]]
name = "label"
kind = "categorical"
"#;

    fn toy(dir: &Path, body: &str) -> DatasetSpec {
        write(dir, "toy.csv", body);
        DatasetSpec::from_toml_str(TOY_SPEC, dir).unwrap()
    }

    #[test]
    fn loads_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let spec = toy(
            dir.path(),
            "age,color,sex,label\n30,red,F,yes\n40,blue,M,no\n50,green,F,no\n",
        );
        let t = load_table(&spec).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.target, vec![1, 0, 0]);
        assert_eq!(t.protected, vec![vec![1, 0, 1]]);
        assert_eq!(t.columns.len(), 2);
        assert_eq!(
            t.columns[0].values,
            ColumnValues::Continuous(vec![Some(30.0), Some(40.0), Some(50.0)])
        );
    }

    #[test]
    fn missing_target_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let spec = toy(dir.path(), "age,color,sex\n30,red,F\n");
        match load_table(&spec).unwrap_err() {
            DataError::MissingColumn(c) => assert_eq!(c, "label"),
            e => panic!("unexpected {e}"),
        }
        let bad = TOY_SPEC.replace("column = \"label\"", "column = \"outcome\"");
        assert!(matches!(
            DatasetSpec::from_toml_str(&bad, dir.path()),
            Err(DataError::MissingColumn(c)) if c == "outcome"
        ));
    }

    #[test]
    fn type_violation_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let spec = toy(dir.path(), "age,color,sex,label\n30,red,F,yes\nold,blue,M,no\n");
        match load_table(&spec).unwrap_err() {
            DataError::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "age");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unparseable_targets_are_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let spec = toy(
            dir.path(),
            "age,color,sex,label\n30,red,F,yes\n40,blue,M,maybe\n41,blue,M,?\n50,red,?,no\n",
        );
        let t = load_table(&spec).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.dropped_rows, 3);
    }

    #[test]
    fn missing_continuous_takes_train_mean() {
        let dir = tempfile::tempdir().unwrap();
        let spec = toy(
            dir.path(),
            "age,color,sex,label\n30,red,F,yes\n?,blue,M,no\n60,blue,F,no\n",
        );
        let t = load_table(&spec).unwrap();
        let ds = encode(&t, &spec, None).unwrap();
        let s = ds.stats.scaling[0];
        assert_eq!(s.fill, 45.0);
        // imputed row standardizes to the mean
        assert_eq!(ds.features.get(1, 0), 0.0);
        assert_eq!(ds.features.get(0, 0), -1.0);
    }

    #[test]
    fn encode_one_hot_and_exclusion() {
        let dir = tempfile::tempdir().unwrap();
        let spec = toy(
            dir.path(),
            "age,color,sex,label\n0,red,F,yes\n2,blue,M,no\n2,green,F,no\n0,red,M,yes\n",
        );
        let ds = load_dataset(&spec).unwrap();
        assert_eq!(
            ds.feature_names,
            vec!["age", "color=blue", "color=green", "color=red"]
        );
        assert!(!ds.feature_names.iter().any(|f| f.starts_with("sex")));
        assert_eq!(ds.protected_names, vec!["gender"]);
        for i in 0..4 {
            let hot: f64 = ds.features.row(i)[1..].iter().sum();
            assert_eq!(hot, 1.0);
        }
        let age: Vec<f64> = (0..4).map(|i| ds.features.get(i, 0)).collect();
        assert_eq!(age, vec![-1.0, 1.0, 1.0, -1.0]);
    }

    #[test]
    fn unseen_category_is_all_zero() {
        let dir = tempfile::tempdir().unwrap();
        let spec = toy(dir.path(), "age,color,sex,label\n0,red,M,yes\n2,blue,F,no\n2,red,F,no\n");
        let train = load_dataset(&spec).unwrap();
        write(dir.path(), "toy.csv", "age,color,sex,label\n1,purple,F,yes\n1,red,M,no\n");
        let test = encode(&load_table(&spec).unwrap(), &spec, Some(&train.stats)).unwrap();
        assert_eq!(&test.features.row(0)[1..], &[0.0, 0.0]);
        assert_eq!(&test.features.row(1)[1..], &[0.0, 1.0]);
        assert_eq!(test.stats, train.stats);
    }

    #[test]
    fn headerless_with_comments_and_threshold() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "g.data", "|junk line\nA1 24 1\nA2 40 2\nA1 26 1\n\n");
        let spec = DatasetSpec::from_toml_str(
            r#"
name = "g"
sources = ["g.data"]
delimiter = " "
comment = "|"
[target]
column = "good"
positive = ["1"]
negative = ["2"]
[[protected]]
name = "age"
column = "age"
threshold = 25.0
[[columns]]
name = "status"
kind = "categorical"
[[columns]]
name = "age"
kind = "continuous"
[[columns]]
name = "good"
kind = "categorical"
"#,
            dir.path(),
        )
        .unwrap();
        let ds = load_dataset(&spec).unwrap();
        assert_eq!(ds.target, vec![1, 0, 1]);
        assert_eq!(ds.protected, vec![vec![0, 1, 1]]);
        assert_eq!(ds.feature_names, vec!["status=A1", "status=A2"]);
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = synth_biased(100, 3, &[0.5], 1).unwrap().subset(&(0..10).collect::<Vec<_>>());
        let s = split(&ds, (0.5, 0.2, 0.3), 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (5, 2, 3));
        assert_eq!(s, split(&ds, (0.5, 0.2, 0.3), 7).unwrap());
        assert!(split(&ds, (0.5, 0.2, 0.2), 7).is_err());
        assert!(split(&ds, (0.98, 0.01, 0.01), 7).is_err());
    }

    #[test]
    fn split_refits_scaling_on_train() {
        let ds = synth_biased(400, 4, &[0.3], 2).unwrap();
        let s = split(&ds, DEFAULT_FRACTIONS, 3).unwrap();
        let n = s.train.len() as f64;
        for j in 0..4 {
            let col: Vec<f64> = (0..s.train.len()).map(|i| s.train.features.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
        assert_eq!(s.val.stats.scaling, s.train.stats.scaling);
    }

    #[test]
    fn synth_validation() {
        assert!(synth_biased(99, 3, &[0.5], 0).is_err());
        assert!(synth_biased(100, 3, &[1.5], 0).is_err());
        assert!(synth_biased(100, 1, &[0.5], 0).is_err());
        assert_eq!(synth_biased(200, 3, &[0.5], 4).unwrap(), synth_biased(200, 3, &[0.5], 4).unwrap());
    }

    #[test]
    fn audit_catches_duplicated_protected_values() {
        let mut ds = synth_biased(100, 3, &[1.0], 0).unwrap();
        let d = ds.n_features();
        for i in 0..ds.len() {
            ds.raw[i * d + 1] = f64::from(ds.protected[0][i]);
        }
        assert!(matches!(ds.audit_values(), Err(DataError::Audit(_))));
    }
}
