//! Discrete-time person-interval panels.
//!
//! A panel holds one row per subject per interval, in long format, with the
//! within-interval order `(L_k, B_k, H_k, C_k, Y_k)`. `B` is the superior
//! treatment, `H` the inferior one, `C` censoring and `Y` death. Rows stop after
//! death, after the censoring interval, and never carry a second treatment.
//!
//! Loading derives the eligibility indicators
//! `R_k = 1{no death before k, no treatment before k}` and `S_k = R_k (1 - B_k)`.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: empty value in column `{column}`")]
    MissingValue { line: usize, column: String },
    #[error("line {line}: column `{column}` must be 0 or 1, got `{value}`")]
    NonBinaryFlag {
        line: usize,
        column: String,
        value: String,
    },
    #[error("line {line}: column `{column}` is not a number: `{value}`")]
    BadNumber {
        line: usize,
        column: String,
        value: String,
    },
    #[error("line {line}: level `{value}` is not declared for covariate `{column}`")]
    UnknownLevel {
        line: usize,
        column: String,
        value: String,
    },
    #[error("subject `{id}` has more than one record for interval {k}")]
    DuplicateSubjectInterval { id: String, k: u32 },
    #[error("subject `{id}`: expected interval {expected}, found {found}")]
    GapInIntervals { id: String, expected: u32, found: u32 },
    #[error("subject `{id}` receives both treatments in interval {k}")]
    BothTreatments { id: String, k: u32 },
    #[error("subject `{id}` receives a second treatment in interval {k}")]
    DuplicateTreatment { id: String, k: u32 },
    #[error("subject `{id}` has a record at interval {k} after death")]
    RecordAfterDeath { id: String, k: u32 },
    #[error("subject `{id}` has a record at interval {k} after censoring")]
    RecordAfterCensoring { id: String, k: u32 },
    #[error("schema: {0}")]
    Schema(String),
    #[error("horizon must be at least 1, got {0}")]
    InvalidHorizon(u32),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateKind {
    Numeric,
    /// One-hot encoded at load time; `reference` gets no column.
    Categorical {
        levels: Vec<String>,
        reference: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    /// Measured at k = 1 and carried forward.
    Baseline,
    #[default]
    TimeVarying,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: CovariateKind,
    #[serde(default)]
    pub timing: Timing,
}

impl CovariateSpec {
    pub fn numeric(name: &str, timing: Timing) -> Self {
        Self {
            name: name.to_string(),
            kind: CovariateKind::Numeric,
            timing,
        }
    }

    pub fn categorical(name: &str, levels: &[&str], reference: &str, timing: Timing) -> Self {
        Self {
            name: name.to_string(),
            kind: CovariateKind::Categorical {
                levels: levels.iter().map(|s| s.to_string()).collect(),
                reference: reference.to_string(),
            },
            timing,
        }
    }

    fn encoded_names(&self) -> Vec<String> {
        match &self.kind {
            CovariateKind::Numeric => vec![self.name.clone()],
            CovariateKind::Categorical { levels, reference } => levels
                .iter()
                .filter(|l| *l != reference)
                .map(|l| format!("{}[{}]", self.name, l))
                .collect(),
        }
    }
}

fn default_col(name: &str) -> String {
    name.to_string()
}

/// Column mapping for the long-format input plus covariate declarations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSchema {
    #[serde(default = "id_col")]
    pub id: String,
    #[serde(default = "k_col")]
    pub k: String,
    #[serde(default = "b_col")]
    pub b: String,
    #[serde(default = "h_col")]
    pub h: String,
    #[serde(default = "c_col")]
    pub c: String,
    #[serde(default = "y_col")]
    pub y: String,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
}

fn id_col() -> String {
    default_col("id")
}
fn k_col() -> String {
    default_col("k")
}
fn b_col() -> String {
    default_col("B")
}
fn h_col() -> String {
    default_col("H")
}
fn c_col() -> String {
    default_col("C")
}
fn y_col() -> String {
    default_col("Y")
}

impl PanelSchema {
    pub fn new(covariates: Vec<CovariateSpec>) -> Self {
        Self {
            id: id_col(),
            k: k_col(),
            b: b_col(),
            h: h_col(),
            c: c_col(),
            y: y_col(),
            covariates,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = std::collections::HashSet::new();
        for cov in &self.covariates {
            if !seen.insert(cov.name.as_str()) {
                return Err(DataError::Schema(format!(
                    "covariate `{}` declared twice",
                    cov.name
                )));
            }
            if let CovariateKind::Categorical { levels, reference } = &cov.kind {
                if !levels.contains(reference) {
                    return Err(DataError::Schema(format!(
                        "reference level `{reference}` of `{}` is not among its levels",
                        cov.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn covariate(&self, name: &str) -> Option<(usize, &CovariateSpec)> {
        self.covariates
            .iter()
            .enumerate()
            .find(|(_, c)| c.name == name)
    }
}

/// One subject-interval. `x` holds the encoded covariate columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRecord {
    pub k: u32,
    pub x: Vec<f64>,
    pub b: bool,
    pub h: bool,
    pub c: bool,
    pub y: bool,
    /// Eligible for the superior treatment.
    pub r: bool,
    /// Eligible for the inferior treatment.
    pub s: bool,
}

impl PanelRecord {
    pub fn new(k: u32, x: Vec<f64>, b: bool, h: bool, c: bool, y: bool) -> Self {
        Self {
            k,
            x,
            b,
            h,
            c,
            y,
            r: false,
            s: false,
        }
    }

    /// At risk of censoring: untreated through this interval.
    pub fn censor_eligible(&self) -> bool {
        self.s && !self.h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub records: Vec<PanelRecord>,
}

impl Subject {
    pub fn baseline(&self) -> &PanelRecord {
        &self.records[0]
    }

    /// Number of interval rows (the K* of the cloned dataset).
    pub fn rows(&self) -> usize {
        self.records.len()
    }
}

/// Validated panel, subjects sorted by id and records by interval.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    schema: PanelSchema,
    columns: Vec<String>,
    /// Encoded column range per declared covariate.
    spans: Vec<(usize, usize)>,
    subjects: Vec<Subject>,
    horizon: u32,
}

fn compare_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

impl PanelDataset {
    /// Build from already-encoded records. Records may be in any order.
    pub fn from_records(
        schema: PanelSchema,
        records: Vec<(String, PanelRecord)>,
    ) -> Result<Self, DataError> {
        schema.validate()?;
        let (columns, spans) = encode_layout(&schema);
        let mut groups: HashMap<String, Vec<PanelRecord>> = HashMap::new();
        for (id, rec) in records {
            if rec.x.len() != columns.len() {
                return Err(DataError::Schema(format!(
                    "record for `{id}` has {} covariate values, schema encodes {}",
                    rec.x.len(),
                    columns.len()
                )));
            }
            groups.entry(id).or_default().push(rec);
        }
        let mut subjects: Vec<Subject> = groups
            .into_iter()
            .map(|(id, mut records)| {
                records.sort_by_key(|r| r.k);
                Subject { id, records }
            })
            .collect();
        subjects.sort_by(|a, b| compare_ids(&a.id, &b.id));
        for subject in &mut subjects {
            validate_subject(subject)?;
            carry_baseline(&schema, &spans, subject);
        }
        let horizon = subjects
            .iter()
            .map(|s| s.records.last().map_or(0, |r| r.k))
            .max()
            .unwrap_or(0);
        let panel = Self {
            schema,
            columns,
            spans,
            subjects,
            horizon,
        };
        Ok(derive_eligibility(panel))
    }

    pub fn schema(&self) -> &PanelSchema {
        &self.schema
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    /// Encoded column indices of a declared covariate.
    pub fn covariate_columns(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.schema
            .covariate(name)
            .map(|(i, _)| self.spans[i].0..self.spans[i].1)
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn total_rows(&self) -> usize {
        self.subjects.iter().map(Subject::rows).sum()
    }

    pub fn has_censoring(&self) -> bool {
        self.subjects
            .iter()
            .any(|s| s.records.iter().any(|r| r.c))
    }

    /// Panel made of the given subjects (by index, repeats allowed). Repeated
    /// subjects get distinct ids so they stay separate units.
    pub fn resample(&self, picks: &[usize]) -> Self {
        let mut counts: HashMap<usize, usize> = HashMap::new();
        let subjects = picks
            .iter()
            .map(|&i| {
                let c = counts.entry(i).or_insert(0);
                *c += 1;
                let mut s = self.subjects[i].clone();
                if *c > 1 {
                    s.id = format!("{}#{}", s.id, *c);
                }
                s
            })
            .collect();
        Self {
            schema: self.schema.clone(),
            columns: self.columns.clone(),
            spans: self.spans.clone(),
            subjects,
            horizon: self.horizon,
        }
    }
}

fn encode_layout(schema: &PanelSchema) -> (Vec<String>, Vec<(usize, usize)>) {
    let mut columns = Vec::new();
    let mut spans = Vec::new();
    for cov in &schema.covariates {
        let start = columns.len();
        columns.extend(cov.encoded_names());
        spans.push((start, columns.len()));
    }
    (columns, spans)
}

fn validate_subject(subject: &Subject) -> Result<(), DataError> {
    let id = &subject.id;
    let mut treated = false;
    let mut dead = false;
    let mut censored = false;
    for (i, rec) in subject.records.iter().enumerate() {
        let expected = i as u32 + 1;
        if i > 0 && rec.k == subject.records[i - 1].k {
            return Err(DataError::DuplicateSubjectInterval {
                id: id.clone(),
                k: rec.k,
            });
        }
        if rec.k != expected {
            return Err(DataError::GapInIntervals {
                id: id.clone(),
                expected,
                found: rec.k,
            });
        }
        if dead {
            return Err(DataError::RecordAfterDeath {
                id: id.clone(),
                k: rec.k,
            });
        }
        if censored {
            return Err(DataError::RecordAfterCensoring {
                id: id.clone(),
                k: rec.k,
            });
        }
        if rec.b && rec.h {
            return Err(DataError::BothTreatments {
                id: id.clone(),
                k: rec.k,
            });
        }
        if treated && (rec.b || rec.h) {
            return Err(DataError::DuplicateTreatment {
                id: id.clone(),
                k: rec.k,
            });
        }
        treated |= rec.b || rec.h;
        censored |= rec.c;
        // a censored interval hides its death indicator
        dead |= rec.y && !rec.c;
    }
    Ok(())
}

fn carry_baseline(schema: &PanelSchema, spans: &[(usize, usize)], subject: &mut Subject) {
    for (cov, &(a, b)) in schema.covariates.iter().zip(spans) {
        if cov.timing != Timing::Baseline {
            continue;
        }
        let base: Vec<f64> = subject.records[0].x[a..b].to_vec();
        for rec in subject.records.iter_mut().skip(1) {
            rec.x[a..b].copy_from_slice(&base);
        }
    }
}

/// Annotate every record with `R_k` and `S_k`.
pub fn derive_eligibility(mut panel: PanelDataset) -> PanelDataset {
    for subject in &mut panel.subjects {
        let mut treated_before = false;
        for rec in &mut subject.records {
            rec.r = !treated_before;
            rec.s = rec.r && !rec.b;
            treated_before |= rec.b || rec.h;
        }
    }
    panel
}

/// Drop every record with `k > horizon`.
pub fn truncate_horizon(panel: &PanelDataset, horizon: u32) -> Result<PanelDataset, DataError> {
    if horizon < 1 {
        return Err(DataError::InvalidHorizon(horizon));
    }
    let mut out = panel.clone();
    for subject in &mut out.subjects {
        subject.records.truncate(horizon as usize);
    }
    out.horizon = out.horizon.min(horizon);
    Ok(out)
}

fn parse_flag(value: &str, line: usize, column: &str) -> Result<bool, DataError> {
    match value.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        "" => Err(DataError::MissingValue {
            line,
            column: column.to_string(),
        }),
        other => Err(DataError::NonBinaryFlag {
            line,
            column: column.to_string(),
            value: other.to_string(),
        }),
    }
}

/// Read a comma-separated panel with a header row.
pub fn load_panel<R: Read>(source: R, schema: &PanelSchema) -> Result<PanelDataset, DataError> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let id_i = find(&schema.id)?;
    let k_i = find(&schema.k)?;
    let b_i = find(&schema.b)?;
    let h_i = find(&schema.h)?;
    let c_i = find(&schema.c)?;
    let y_i = find(&schema.y)?;
    let cov_i = schema
        .covariates
        .iter()
        .map(|c| find(&c.name))
        .collect::<Result<Vec<_>, _>>()?;
    let (columns, _) = encode_layout(schema);

    let mut records = Vec::new();
    for (row, result) in reader.records().enumerate() {
        let rec = result?;
        let line = row + 2;
        let field = |i: usize, name: &str| -> Result<&str, DataError> {
            let v = rec.get(i).unwrap_or("");
            if v.is_empty() {
                Err(DataError::MissingValue {
                    line,
                    column: name.to_string(),
                })
            } else {
                Ok(v)
            }
        };
        let id = field(id_i, &schema.id)?.to_string();
        let k_raw = field(k_i, &schema.k)?;
        let k: u32 = k_raw.parse().map_err(|_| DataError::BadNumber {
            line,
            column: schema.k.clone(),
            value: k_raw.to_string(),
        })?;
        let mut x = Vec::with_capacity(columns.len());
        for (cov, &ci) in schema.covariates.iter().zip(&cov_i) {
            let v = field(ci, &cov.name)?;
            match &cov.kind {
                CovariateKind::Numeric => {
                    let num: f64 = v.parse().map_err(|_| DataError::BadNumber {
                        line,
                        column: cov.name.clone(),
                        value: v.to_string(),
                    })?;
                    if !num.is_finite() {
                        return Err(DataError::BadNumber {
                            line,
                            column: cov.name.clone(),
                            value: v.to_string(),
                        });
                    }
                    x.push(num);
                }
                CovariateKind::Categorical { levels, reference } => {
                    if !levels.iter().any(|l| l == v) {
                        return Err(DataError::UnknownLevel {
                            line,
                            column: cov.name.clone(),
                            value: v.to_string(),
                        });
                    }
                    for level in levels.iter().filter(|l| *l != reference) {
                        x.push(if level == v { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        let b = parse_flag(rec.get(b_i).unwrap_or(""), line, &schema.b)?;
        let h = parse_flag(rec.get(h_i).unwrap_or(""), line, &schema.h)?;
        let c = parse_flag(rec.get(c_i).unwrap_or(""), line, &schema.c)?;
        let y = parse_flag(rec.get(y_i).unwrap_or(""), line, &schema.y)?;
        records.push((id, PanelRecord::new(k, x, b, h, c, y)));
    }
    PanelDataset::from_records(schema.clone(), records)
}

/// Write the panel in the same long format `load_panel` reads.
pub fn write_panel<W: Write>(panel: &PanelDataset, sink: W) -> Result<(), DataError> {
    let schema = &panel.schema;
    let mut writer = csv::Writer::from_writer(sink);
    let mut header = vec![schema.id.clone(), schema.k.clone()];
    header.extend(schema.covariates.iter().map(|c| c.name.clone()));
    header.extend([
        schema.b.clone(),
        schema.h.clone(),
        schema.c.clone(),
        schema.y.clone(),
    ]);
    writer.write_record(&header)?;
    let flag = |v: bool| if v { "1" } else { "0" }.to_string();
    for subject in &panel.subjects {
        for rec in &subject.records {
            let mut row = vec![subject.id.clone(), rec.k.to_string()];
            for (cov, &(a, b)) in schema.covariates.iter().zip(&panel.spans) {
                match &cov.kind {
                    CovariateKind::Numeric => row.push(rec.x[a].to_string()),
                    CovariateKind::Categorical { levels, reference } => {
                        let level = levels
                            .iter()
                            .filter(|l| *l != reference)
                            .zip(&rec.x[a..b])
                            .find(|(_, v)| **v == 1.0)
                            .map(|(l, _)| l.clone())
                            .unwrap_or_else(|| reference.clone());
                        row.push(level);
                    }
                }
            }
            row.extend([flag(rec.b), flag(rec.h), flag(rec.c), flag(rec.y)]);
            writer.write_record(&row)?;
        }
    }
    writer.flush()?;
    Ok(())
}
