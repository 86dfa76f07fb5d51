//! Records, datasets, train/test splits and CSV ingestion.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Index of a level of the discrete sensitive attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SensitiveLevel(pub(crate) usize);

impl SensitiveLevel {
    pub fn new(index: usize, cardinality: usize) -> Result<Self> {
        if index >= cardinality {
            return Err(Error::LevelOutOfRange { index, cardinality });
        }
        Ok(SensitiveLevel(index))
    }

    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Regression => "regression",
            Task::Classification => "classification",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            other => Err(Error::InvalidInput(format!("unknown task `{other}`"))),
        }
    }
}

/// Which sensitive column to read: the true attribute `d` or its
/// privatized version `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attribute {
    True,
    Privatized,
}

impl Attribute {
    fn name(self) -> &'static str {
        match self {
            Attribute::True => "true (d)",
            Attribute::Privatized => "privatized (s)",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub x: Vec<f64>,
    pub y: f64,
    pub d: Option<SensitiveLevel>,
    pub s: Option<SensitiveLevel>,
}

impl Record {
    pub fn attribute(&self, which: Attribute) -> Option<SensitiveLevel> {
        match which {
            Attribute::True => self.d,
            Attribute::Privatized => self.s,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<Record>,
    feature_names: Vec<String>,
    sensitive_cardinality: usize,
    task: Task,
}

impl Dataset {
    /// Validates and builds a dataset. An empty record list is allowed
    /// (e.g. the test side of a degenerate split); operations that need
    /// data reject it themselves.
    pub fn new(
        records: Vec<Record>,
        feature_names: Vec<String>,
        sensitive_cardinality: usize,
        task: Task,
    ) -> Result<Self> {
        if sensitive_cardinality < 2 {
            return Err(Error::InvalidInput(format!(
                "sensitive cardinality must be at least 2, got {sensitive_cardinality}"
            )));
        }
        let dim = feature_names.len();
        for (i, r) in records.iter().enumerate() {
            if r.x.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: r.x.len(),
                });
            }
            if !r.y.is_finite() {
                return Err(Error::InvalidInput(format!("record {i}: outcome is not finite")));
            }
            if r.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("record {i}: non-finite feature")));
            }
            if task == Task::Classification && r.y != 0.0 && r.y != 1.0 {
                return Err(Error::InvalidInput(format!(
                    "record {i}: classification outcome must be 0 or 1, got {}",
                    r.y
                )));
            }
            for level in [r.d, r.s].into_iter().flatten() {
                if level.index() >= sensitive_cardinality {
                    return Err(Error::LevelOutOfRange {
                        index: level.index(),
                        cardinality: sensitive_cardinality,
                    });
                }
            }
        }
        Ok(Dataset {
            records,
            feature_names,
            sensitive_cardinality,
            task,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn sensitive_cardinality(&self) -> usize {
        self.sensitive_cardinality
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.x.clone()).collect()
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.y).collect()
    }

    /// The chosen sensitive column, failing on the first record without it.
    pub fn levels(&self, which: Attribute) -> Result<Vec<SensitiveLevel>> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.attribute(which).ok_or(Error::MissingAttribute {
                    record: i,
                    attribute: which.name(),
                })
            })
            .collect()
    }

    /// Same schema, different records (re-validated).
    pub fn with_records(&self, records: Vec<Record>) -> Result<Dataset> {
        Dataset::new(
            records,
            self.feature_names.clone(),
            self.sensitive_cardinality,
            self.task,
        )
    }

    /// Replaces the feature matrix, keeping outcomes and sensitive columns.
    pub fn with_features(&self, names: Vec<String>, features: Vec<Vec<f64>>) -> Result<Dataset> {
        if features.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: features.len(),
            });
        }
        let records = self
            .records
            .iter()
            .zip(features)
            .map(|(r, x)| Record { x, ..r.clone() })
            .collect();
        Dataset::new(records, names, self.sensitive_cardinality, self.task)
    }

    /// First `n` records (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            records: self.records.iter().take(n).cloned().collect(),
            ..self.clone_schema()
        }
    }

    fn clone_schema(&self) -> Dataset {
        Dataset {
            records: Vec::new(),
            feature_names: self.feature_names.clone(),
            sensitive_cardinality: self.sensitive_cardinality,
            task: self.task,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitConfig {
    pub fn new(test_fraction: f64, seed: u64) -> Result<Self> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::InvalidInput(format!(
                "test_fraction must lie in (0, 1), got {test_fraction}"
            )));
        }
        Ok(SplitConfig {
            test_fraction,
            seed,
        })
    }
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Seeded train/test partition. The test part holds `round(n · test_fraction)`
/// records; both parts keep the original record order.
pub fn split(dataset: &Dataset, cfg: &SplitConfig) -> Result<(Dataset, Dataset)> {
    let cfg = SplitConfig::new(cfg.test_fraction, cfg.seed)?;
    let n = dataset.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let n_test = (n as f64 * cfg.test_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, rng::streams::SPLIT));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let mut train = dataset.clone_schema();
    let mut test = dataset.clone_schema();
    for (r, t) in dataset.records.iter().zip(is_test) {
        if t {
            test.records.push(r.clone());
        } else {
            train.records.push(r.clone());
        }
    }
    Ok((train, test))
}

/// Empirical distribution of the chosen sensitive column: entry k is
/// `count(attr = k) / n`.
pub fn empirical_marginal(dataset: &Dataset, which: Attribute) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let counts = level_counts(&dataset.levels(which)?, dataset.sensitive_cardinality());
    let n = dataset.len() as f64;
    Ok(counts.iter().map(|&c| c as f64 / n).collect())
}

pub fn level_counts(levels: &[SensitiveLevel], cardinality: usize) -> Vec<usize> {
    let mut counts = vec![0usize; cardinality];
    for l in levels {
        counts[l.index()] += 1;
    }
    counts
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub outcome: String,
    /// Column holding the true sensitive attribute, if present.
    pub sensitive: Option<String>,
    /// Column holding the privatized attribute, if present.
    pub privatized: Option<String>,
    pub task: Task,
    /// Explicit level labels in index order. When absent, integer labels
    /// `0..k` are used as indices directly, otherwise distinct labels are
    /// sorted.
    pub sensitive_levels: Option<Vec<String>>,
    /// Columns to ignore entirely (e.g. record identifiers).
    pub drop: Vec<String>,
}

impl CsvSchema {
    pub fn new(outcome: &str, task: Task) -> Self {
        CsvSchema {
            outcome: outcome.to_string(),
            sensitive: None,
            privatized: None,
            task,
            sensitive_levels: None,
            drop: Vec::new(),
        }
    }

    pub fn sensitive_columns(&self) -> Vec<&str> {
        [self.sensitive.as_deref(), self.privatized.as_deref()]
            .into_iter()
            .flatten()
            .collect()
    }
}

/// How one source column became one or more feature columns.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnEncoding {
    Numeric { column: String },
    OneHot { column: String, levels: Vec<String> },
}

/// Feature encoding map plus the sensitive level labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub columns: Vec<ColumnEncoding>,
    pub sensitive_levels: Vec<String>,
}

impl Encoding {
    /// Flat text rendering, one line per source column.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.columns {
            match c {
                ColumnEncoding::Numeric { column } => {
                    out.push_str(&format!("{column} = numeric\n"));
                }
                ColumnEncoding::OneHot { column, levels } => {
                    out.push_str(&format!("{column} = one_hot[{}]\n", levels.join(",")));
                }
            }
        }
        out.push_str(&format!(
            "sensitive_levels = [{}]\n",
            self.sensitive_levels.join(",")
        ));
        out
    }
}

/// A raw string table read from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read<R: Read>(reader: R) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Csv(format!(
                    "row {} has {} fields, header has {}",
                    rows.len() + 1,
                    rec.len(),
                    header.len()
                )));
            }
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(Table { header, rows })
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("column `{name}` not found")))
    }

    pub fn column(&self, name: &str) -> Result<Vec<&str>> {
        let idx = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[idx].as_str()).collect())
    }
}

/// Level labels for the sensitive columns and the label→index map.
fn sensitive_level_labels(table: &Table, schema: &CsvSchema) -> Result<Vec<String>> {
    if let Some(levels) = &schema.sensitive_levels {
        return Ok(levels.clone());
    }
    let mut distinct = BTreeSet::new();
    for col in schema.sensitive_columns() {
        for v in table.column(col)? {
            distinct.insert(v.to_string());
        }
    }
    let ints: Option<Vec<usize>> = distinct.iter().map(|v| v.parse::<usize>().ok()).collect();
    if let Some(ints) = ints {
        let k = ints.iter().copied().max().map_or(2, |m| (m + 1).max(2));
        return Ok((0..k).map(|i| i.to_string()).collect());
    }
    let mut labels: Vec<String> = distinct.into_iter().collect();
    while labels.len() < 2 {
        labels.push(format!("_unused{}", labels.len()));
    }
    Ok(labels)
}

/// Reads a dataset from CSV. Numeric feature columns are used as-is,
/// any other feature column is one-hot encoded (levels sorted) in column
/// order. Empty or non-finite outcomes are rejected.
pub fn read_dataset<R: Read>(reader: R, schema: &CsvSchema) -> Result<(Dataset, Encoding)> {
    let table = Table::read(reader)?;
    dataset_from_table(&table, schema)
}

pub fn dataset_from_table(table: &Table, schema: &CsvSchema) -> Result<(Dataset, Encoding)> {
    let outcome_idx = table.column_index(&schema.outcome)?;
    let sens_idx = schema.sensitive.as_deref().map(|c| table.column_index(c)).transpose()?;
    let priv_idx = schema.privatized.as_deref().map(|c| table.column_index(c)).transpose()?;
    for d in &schema.drop {
        table.column_index(d)?;
    }
    let levels = sensitive_level_labels(table, schema)?;
    let level_of = |v: &str, row: usize| -> Result<SensitiveLevel> {
        levels
            .iter()
            .position(|l| l == v)
            .map(SensitiveLevel)
            .ok_or_else(|| {
                Error::InvalidInput(format!("row {}: unknown sensitive level `{v}`", row + 1))
            })
    };

    let mut encodings = Vec::new();
    let mut names = Vec::new();
    let mut feature_cols = Vec::new();
    for (j, h) in table.header.iter().enumerate() {
        if j == outcome_idx
            || Some(j) == sens_idx
            || Some(j) == priv_idx
            || schema.drop.iter().any(|d| d == h)
        {
            continue;
        }
        let numeric = table.rows.iter().all(|r| r[j].parse::<f64>().is_ok());
        if numeric {
            encodings.push(ColumnEncoding::Numeric { column: h.clone() });
            names.push(h.clone());
        } else {
            let lv: BTreeSet<&str> = table.rows.iter().map(|r| r[j].as_str()).collect();
            let lv: Vec<String> = lv.into_iter().map(str::to_string).collect();
            for l in &lv {
                names.push(format!("{h}={l}"));
            }
            encodings.push(ColumnEncoding::OneHot {
                column: h.clone(),
                levels: lv,
            });
        }
        feature_cols.push(j);
    }

    let mut records = Vec::with_capacity(table.rows.len());
    for (i, row) in table.rows.iter().enumerate() {
        let y: f64 = row[outcome_idx].parse().map_err(|_| {
            Error::InvalidInput(format!(
                "row {}: outcome `{}` is not a number",
                i + 1,
                row[outcome_idx]
            ))
        })?;
        let mut x = Vec::with_capacity(names.len());
        for (&j, enc) in feature_cols.iter().zip(&encodings) {
            match enc {
                ColumnEncoding::Numeric { .. } => x.push(row[j].parse::<f64>().unwrap_or(f64::NAN)),
                ColumnEncoding::OneHot { levels, .. } => {
                    x.extend(levels.iter().map(|l| if *l == row[j] { 1.0 } else { 0.0 }))
                }
            }
        }
        let d = sens_idx.map(|j| level_of(&row[j], i)).transpose()?;
        let s = priv_idx.map(|j| level_of(&row[j], i)).transpose()?;
        records.push(Record { x, y, d, s });
    }
    let dataset = Dataset::new(records, names, levels.len(), schema.task)?;
    Ok((
        dataset,
        Encoding {
            columns: encodings,
            sensitive_levels: levels,
        },
    ))
}

/// Writes the encoded dataset: feature columns, `y`, then `d` and `s`
/// when any record carries them. Values use shortest round-trip formatting.
pub fn write_dataset<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let has_d = dataset.records.iter().any(|r| r.d.is_some());
    let has_s = dataset.records.iter().any(|r| r.s.is_some());
    let mut header: Vec<String> = dataset.feature_names.clone();
    header.push("y".into());
    if has_d {
        header.push("d".into());
    }
    if has_s {
        header.push("s".into());
    }
    let fmt_level = |l: Option<SensitiveLevel>| l.map_or(String::new(), |l| l.index().to_string());
    let rows = dataset
        .records
        .iter()
        .map(|r| {
            let mut row: Vec<String> = r.x.iter().map(|v| format!("{v}")).collect();
            row.push(format!("{}", r.y));
            if has_d {
                row.push(fmt_level(r.d));
            }
            if has_s {
                row.push(fmt_level(r.s));
            }
            row
        })
        .collect();
    Table { header, rows }.write(writer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let records = (0..n)
            .map(|i| Record {
                x: vec![i as f64],
                y: i as f64 * 2.0,
                d: Some(SensitiveLevel(i % 2)),
                s: None,
            })
            .collect();
        Dataset::new(records, vec!["x".into()], 2, Task::Regression).unwrap()
    }

    #[test]
    fn split_sizes() {
        let (tr, te) = split(&toy(10), &SplitConfig::new(0.2, 3).unwrap()).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let (tr, te) = split(&toy(1338), &SplitConfig::new(0.2, 11).unwrap()).unwrap();
        assert_eq!((tr.len(), te.len()), (1070, 268));
    }

    #[test]
    fn split_is_deterministic_and_exact() {
        let data = toy(57);
        let cfg = SplitConfig::new(0.3, 42).unwrap();
        let a = split(&data, &cfg).unwrap();
        let b = split(&data, &cfg).unwrap();
        assert_eq!(a, b);
        let mut seen: Vec<f64> = a.0.records().iter().chain(a.1.records()).map(|r| r.x[0]).collect();
        seen.sort_by(f64::total_cmp);
        let all: Vec<f64> = (0..57).map(|i| i as f64).collect();
        assert_eq!(seen, all);
        // order preserved within each side
        assert!(a.0.records().windows(2).all(|w| w[0].x[0] < w[1].x[0]));
    }

    #[test]
    fn split_rejects_empty_and_bad_fraction() {
        let empty = toy(0);
        assert_eq!(split(&empty, &SplitConfig::default()), Err(Error::EmptyDataset));
        assert!(SplitConfig::new(1.0, 0).is_err());
        assert!(SplitConfig::new(0.0, 0).is_err());
    }

    #[test]
    fn marginals() {
        let mk = |levels: &[usize]| {
            let recs = levels
                .iter()
                .map(|&l| Record {
                    x: vec![],
                    y: 0.0,
                    d: Some(SensitiveLevel(l)),
                    s: None,
                })
                .collect();
            Dataset::new(recs, vec![], 2, Task::Regression).unwrap()
        };
        assert_eq!(empirical_marginal(&mk(&[0, 1, 0, 1]), Attribute::True).unwrap(), vec![0.5, 0.5]);
        let p = empirical_marginal(&mk(&[0, 0, 0, 1, 1, 1, 1, 1, 1, 1]), Attribute::True).unwrap();
        assert!((p[0] - 0.3).abs() < 1e-15 && (p[1] - 0.7).abs() < 1e-15);
        assert!(matches!(
            empirical_marginal(&mk(&[0, 1]), Attribute::Privatized),
            Err(Error::MissingAttribute { record: 0, .. })
        ));
    }

    #[test]
    fn rejects_invalid_records() {
        let bad_y = Record { x: vec![1.0], y: f64::NAN, d: None, s: None };
        assert!(Dataset::new(vec![bad_y], vec!["x".into()], 2, Task::Regression).is_err());
        let bad_x = Record { x: vec![f64::INFINITY], y: 1.0, d: None, s: None };
        assert!(Dataset::new(vec![bad_x], vec!["x".into()], 2, Task::Regression).is_err());
        let bad_level = Record { x: vec![1.0], y: 1.0, d: Some(SensitiveLevel(3)), s: None };
        assert!(Dataset::new(vec![bad_level], vec!["x".into()], 2, Task::Regression).is_err());
        let bad_class = Record { x: vec![1.0], y: 0.5, d: None, s: None };
        assert!(Dataset::new(vec![bad_class], vec!["x".into()], 2, Task::Classification).is_err());
    }

    #[test]
    fn csv_one_hot_and_levels() {
        let csv = "id,age,region,sex,charges\n1,20,north,female,100.5\n2,30,south,male,200\n3,40,north,male,300\n";
        let mut schema = CsvSchema::new("charges", Task::Regression);
        schema.sensitive = Some("sex".into());
        schema.drop = vec!["id".into()];
        let (ds, enc) = read_dataset(csv.as_bytes(), &schema).unwrap();
        assert_eq!(ds.feature_names(), &["age", "region=north", "region=south"]);
        assert_eq!(ds.records()[1].x, vec![30.0, 0.0, 1.0]);
        assert_eq!(enc.sensitive_levels, vec!["female", "male"]);
        assert_eq!(ds.records()[0].d.unwrap().index(), 0);
        assert_eq!(ds.records()[2].y, 300.0);
        assert!(enc.to_text().contains("region = one_hot[north,south]"));
    }

    #[test]
    fn csv_rejects_missing_outcome() {
        let csv = "x,y\n1,\n";
        let schema = CsvSchema::new("y", Task::Regression);
        assert!(read_dataset(csv.as_bytes(), &schema).is_err());
    }

    #[test]
    fn csv_round_trip_through_writer() {
        let data = toy(5);
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        let mut schema = CsvSchema::new("y", Task::Regression);
        schema.sensitive = Some("d".into());
        let (back, _) = read_dataset(buf.as_slice(), &schema).unwrap();
        assert_eq!(back, data);
    }
}
