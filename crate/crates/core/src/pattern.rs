//! Multitype marked point patterns and CSV ingestion.
//!
//! A pattern is a set of locations with a categorical type per point
//! (immune phenotype), an optional tissue compartment label, optional named
//! continuous marks, and an observation window. Cell tables arrive as CSV
//! together with one clinical record per patient; a [`CsvSchema`] maps the
//! columns of a given export onto those roles.

use crate::geometry::{ripley_rasson_window, GeometryError, Point2, Window};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Read;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("required column '{0}' not found in CSV header")]
    MissingColumn(String),
    #[error("row {row}: {reason}")]
    UnparsableRow { row: usize, reason: String },
    #[error("patient '{0}' has no usable points")]
    NoPointsForPatient(String),
    #[error("unknown level '{0}'")]
    UnknownLevel(String),
    #[error("pattern is inconsistent: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

/// The four immune phenotypes used throughout.
pub const IMMUNE_TYPES: [&str; 4] = ["B-cell", "CD4 T-cell", "CD8 T-cell", "Macrophage"];

/// A multitype marked point pattern with its observation window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultitypePattern {
    patient_id: String,
    points: Vec<Point2>,
    type_names: Vec<String>,
    type_labels: Vec<u32>,
    tissue_names: Vec<String>,
    tissue_labels: Option<Vec<u32>>,
    marks: BTreeMap<String, Vec<Option<f64>>>,
    window: Window,
}

impl MultitypePattern {
    pub fn new(
        patient_id: impl Into<String>,
        points: Vec<Point2>,
        type_names: Vec<String>,
        type_labels: Vec<u32>,
        window: Window,
    ) -> Result<Self, PatternError> {
        let p = MultitypePattern {
            patient_id: patient_id.into(),
            points,
            type_names,
            type_labels,
            tissue_names: Vec::new(),
            tissue_labels: None,
            marks: BTreeMap::new(),
            window,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_tissue(
        mut self,
        tissue_names: Vec<String>,
        tissue_labels: Vec<u32>,
    ) -> Result<Self, PatternError> {
        self.tissue_names = tissue_names;
        self.tissue_labels = Some(tissue_labels);
        self.validate()?;
        Ok(self)
    }

    pub fn with_mark(
        mut self,
        name: impl Into<String>,
        values: Vec<Option<f64>>,
    ) -> Result<Self, PatternError> {
        self.marks.insert(name.into(), values);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), PatternError> {
        let n = self.points.len();
        if self.type_labels.len() != n {
            return Err(PatternError::Invalid("type labels length mismatch".into()));
        }
        if self.type_names.is_empty() {
            return Err(PatternError::Invalid("at least one type level".into()));
        }
        if self.type_labels.iter().any(|&l| l as usize >= self.type_names.len()) {
            return Err(PatternError::Invalid("type label out of range".into()));
        }
        if let Some(t) = &self.tissue_labels {
            if t.len() != n {
                return Err(PatternError::Invalid("tissue labels length mismatch".into()));
            }
            if t.iter().any(|&l| l as usize >= self.tissue_names.len()) {
                return Err(PatternError::Invalid("tissue label out of range".into()));
            }
        }
        for (name, vals) in &self.marks {
            if vals.len() != n {
                return Err(PatternError::Invalid(format!("mark '{name}' length mismatch")));
            }
            if vals.iter().flatten().any(|v| !v.is_finite()) {
                return Err(PatternError::Invalid(format!("mark '{name}' has non-finite value")));
            }
        }
        for p in &self.points {
            if !p.is_finite() {
                return Err(PatternError::Invalid("non-finite point coordinate".into()));
            }
            if !self.window.contains(*p) {
                return Err(PatternError::Invalid(format!(
                    "point ({}, {}) lies outside the window",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    /// Patient id without a `/sample` suffix, for clinical-table joins when
    /// patterns are keyed per sample.
    pub fn base_patient_id(&self) -> &str {
        self.patient_id.split('/').next().unwrap_or(&self.patient_id)
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn type_names(&self) -> &[String] {
        &self.type_names
    }

    pub fn type_labels(&self) -> &[u32] {
        &self.type_labels
    }

    pub fn tissue_names(&self) -> &[String] {
        &self.tissue_names
    }

    pub fn tissue_labels(&self) -> Option<&[u32]> {
        self.tissue_labels.as_deref()
    }

    pub fn mark(&self, name: &str) -> Option<&[Option<f64>]> {
        self.marks.get(name).map(|v| v.as_slice())
    }

    pub fn mark_names(&self) -> impl Iterator<Item = &str> {
        self.marks.keys().map(|s| s.as_str())
    }

    pub fn type_index(&self, name: &str) -> Option<u32> {
        self.type_names.iter().position(|t| t == name).map(|i| i as u32)
    }

    /// Number of points of each type level.
    pub fn type_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.type_names.len()];
        for &l in &self.type_labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Point indices of one type level.
    pub fn indices_of_type(&self, type_idx: u32) -> Vec<usize> {
        self.type_labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == type_idx)
            .map(|(i, _)| i)
            .collect()
    }

    /// Replaces the type labels (used by label-permutation nulls). Counts of
    /// each level must be preserved by the caller.
    pub(crate) fn with_labels(&self, labels: Vec<u32>) -> MultitypePattern {
        let mut out = self.clone();
        out.type_labels = labels;
        out
    }
}

/// Selector for [`restrict`].
#[derive(Debug, Clone)]
pub enum Selector<'a> {
    /// Keep points of one type level.
    Type(&'a str),
    /// Keep points of one tissue level.
    Tissue(&'a str),
    /// Collapse all type labels to a single level.
    Unmarked,
    /// Keep points inside the window and make it the new observation window.
    SubWindow(&'a Window),
}

/// Restricts a pattern by type, tissue, mark collapse, or sub-window.
pub fn restrict(pattern: &MultitypePattern, selector: Selector<'_>) -> Result<MultitypePattern, PatternError> {
    match selector {
        Selector::Type(level) => {
            let idx = pattern
                .type_index(level)
                .ok_or_else(|| PatternError::UnknownLevel(level.to_string()))?;
            keep_indices(pattern, |i| pattern.type_labels[i] == idx)
        }
        Selector::Tissue(level) => {
            let labels = pattern
                .tissue_labels
                .as_ref()
                .ok_or_else(|| PatternError::UnknownLevel(level.to_string()))?;
            let idx = pattern
                .tissue_names
                .iter()
                .position(|t| t == level)
                .ok_or_else(|| PatternError::UnknownLevel(level.to_string()))? as u32;
            keep_indices(pattern, |i| labels[i] == idx)
        }
        Selector::Unmarked => {
            let mut out = pattern.clone();
            out.type_names = vec!["all".to_string()];
            out.type_labels = vec![0; pattern.n()];
            Ok(out)
        }
        Selector::SubWindow(w) => {
            let mut out = keep_indices(pattern, |i| w.contains(pattern.points[i]))?;
            out.window = w.clone();
            out.validate()?;
            Ok(out)
        }
    }
}

fn keep_indices(
    pattern: &MultitypePattern,
    keep: impl Fn(usize) -> bool,
) -> Result<MultitypePattern, PatternError> {
    let idx: Vec<usize> = (0..pattern.n()).filter(|&i| keep(i)).collect();
    let mut out = pattern.clone();
    out.points = idx.iter().map(|&i| pattern.points[i]).collect();
    out.type_labels = idx.iter().map(|&i| pattern.type_labels[i]).collect();
    out.tissue_labels = pattern
        .tissue_labels
        .as_ref()
        .map(|t| idx.iter().map(|&i| t[i]).collect());
    out.marks = pattern
        .marks
        .iter()
        .map(|(k, v)| (k.clone(), idx.iter().map(|&i| v[i]).collect()))
        .collect();
    Ok(out)
}

/// Keeps the patterns in which every one of the four immune types has at
/// least `k` points.
pub fn filter_min_type_count(patterns: &[MultitypePattern], k: usize) -> Vec<MultitypePattern> {
    patterns
        .iter()
        .filter(|p| {
            IMMUNE_TYPES.iter().all(|t| {
                p.type_index(t)
                    .map(|idx| p.type_counts()[idx as usize] >= k)
                    .unwrap_or(k == 0)
            })
        })
        .cloned()
        .collect()
}

/// Cancer stage levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
    III,
    IV,
}

impl Stage {
    pub fn parse(s: &str) -> Option<Stage> {
        let t = s.trim().trim_start_matches("Stage").trim_start_matches("stage").trim();
        match t {
            "I" | "1" => Some(Stage::I),
            "II" | "2" => Some(Stage::II),
            "III" | "3" => Some(Stage::III),
            "IV" | "4" => Some(Stage::IV),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::I => "I",
            Stage::II => "II",
            Stage::III => "III",
            Stage::IV => "IV",
        }
    }
}

/// Clinical covariates carried per patient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub primary_tumour: bool,
    pub prior_chemo: bool,
    pub brca: bool,
    pub parpi: bool,
    /// Cancer stage; absent when the clinical table leaves it blank.
    pub stage: Option<Stage>,
    pub age: f64,
    pub death: bool,
    /// Survival time in days; carried through but unused by the analyses.
    pub survival_time: Option<f64>,
}

/// Phenotype indicator columns of the cell table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhenotypeColumns {
    pub cd19: String,
    pub cd68: String,
    pub cd3: String,
    pub cd8: String,
}

/// Where the observation window of each pattern comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WindowSource {
    /// One explicit polygon applied to every pattern.
    Explicit { vertices: Vec<[f64; 2]> },
    /// Convex-hull dilation from each pattern's own points.
    RipleyRasson,
}

/// Column mapping for a cell-table export plus its clinical table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub x: String,
    pub y: String,
    pub patient: String,
    /// Sample/slide column; used when `pool_samples` is false.
    pub sample: Option<String>,
    /// Pool all samples of a patient into one pattern (true) or emit one
    /// pattern per sample (false).
    pub pool_samples: bool,
    pub tissue: Option<String>,
    pub phenotype: PhenotypeColumns,
    /// Mark name -> column.
    pub marks: BTreeMap<String, String>,
    pub window: WindowSource,
    /// Values of an indicator column that count as positive; a trailing '+'
    /// also counts (e.g. "CD19+").
    pub positive_values: Vec<String>,
    /// Clinical table columns.
    pub clinical: ClinicalColumns,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClinicalColumns {
    pub patient: String,
    pub primary_tumour: String,
    pub prior_chemo: String,
    pub brca: String,
    pub parpi: String,
    pub stage: String,
    pub age: String,
    pub death: String,
    pub survival_time: Option<String>,
}

impl Default for ClinicalColumns {
    fn default() -> Self {
        ClinicalColumns {
            patient: "patient_id".into(),
            primary_tumour: "primary".into(),
            prior_chemo: "chemo".into(),
            brca: "brca_mutation".into(),
            parpi: "parpi_inhibitor".into(),
            stage: "stage".into(),
            age: "age_at_diagnosis".into(),
            death: "death".into(),
            survival_time: Some("survival_time".into()),
        }
    }
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            x: "x".into(),
            y: "y".into(),
            patient: "patient_id".into(),
            sample: Some("sample_id".into()),
            pool_samples: true,
            tissue: Some("tissue_category".into()),
            phenotype: PhenotypeColumns {
                cd19: "phenotype_cd19".into(),
                cd68: "phenotype_cd68".into(),
                cd3: "phenotype_cd3".into(),
                cd8: "phenotype_cd8".into(),
            },
            marks: BTreeMap::new(),
            window: WindowSource::RipleyRasson,
            positive_values: vec!["1".into(), "true".into(), "yes".into(), "pos".into()],
            clinical: ClinicalColumns::default(),
        }
    }
}

impl CsvSchema {
    fn is_positive(&self, raw: &str) -> bool {
        let t = raw.trim();
        if t.ends_with('+') {
            return true;
        }
        self.positive_values.iter().any(|v| v.eq_ignore_ascii_case(t))
    }
}

/// Row-level bookkeeping from one parse run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ParseLog {
    /// Rows whose phenotype matched none of the four immune rules.
    pub untyped_rows: usize,
    /// Rows where more than one phenotype rule fired (resolved by priority).
    pub phenotype_conflicts: usize,
    /// Mark cells that were empty or unparsable and stored as absent.
    pub missing_mark_values: usize,
}

/// Parses a cell table and a clinical table into patterns and records.
///
/// Immune types are derived from the phenotype indicators (CD19 -> B-cell,
/// CD68 -> Macrophage, CD3 with CD8 -> CD8 T-cell, CD3 without CD8 -> CD4
/// T-cell); conflicts resolve by the fixed priority B-cell > Macrophage >
/// CD8 > CD4. Rows matching no rule are skipped and counted in the log.
pub fn parse_pattern_csv(
    cells: impl Read,
    clinical: impl Read,
    schema: &CsvSchema,
) -> Result<(Vec<MultitypePattern>, Vec<PatientRecord>, ParseLog), PatternError> {
    let mut log = ParseLog::default();
    let records = parse_clinical(clinical, schema)?;

    let mut reader = csv::Reader::from_reader(cells);
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize, PatternError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PatternError::MissingColumn(name.to_string()))
    };
    let x_col = col(&schema.x)?;
    let y_col = col(&schema.y)?;
    let patient_col = col(&schema.patient)?;
    let sample_col = match (&schema.sample, schema.pool_samples) {
        (Some(name), false) => Some(col(name)?),
        _ => None,
    };
    let tissue_col = schema.tissue.as_ref().map(|n| col(n)).transpose()?;
    let cd19 = col(&schema.phenotype.cd19)?;
    let cd68 = col(&schema.phenotype.cd68)?;
    let cd3 = col(&schema.phenotype.cd3)?;
    let cd8 = col(&schema.phenotype.cd8)?;
    let mark_cols: Vec<(String, usize)> = schema
        .marks
        .iter()
        .map(|(name, c)| col(c).map(|i| (name.clone(), i)))
        .collect::<Result<_, _>>()?;

    struct Group {
        points: Vec<Point2>,
        types: Vec<u32>,
        tissues: Vec<u32>,
        tissue_names: Vec<String>,
        marks: BTreeMap<String, Vec<Option<f64>>>,
    }
    let mut groups: BTreeMap<String, Group> = BTreeMap::new();
    let mut seen_keys: Vec<String> = Vec::new();

    for (row_idx, row) in reader.records().enumerate() {
        let row = row?;
        let row_no = row_idx + 2; // 1-based, after header
        let field = |i: usize| row.get(i).unwrap_or("");
        let x: f64 = field(x_col).trim().parse().map_err(|_| PatternError::UnparsableRow {
            row: row_no,
            reason: format!("bad x value '{}'", field(x_col)),
        })?;
        let y: f64 = field(y_col).trim().parse().map_err(|_| PatternError::UnparsableRow {
            row: row_no,
            reason: format!("bad y value '{}'", field(y_col)),
        })?;
        if !(x.is_finite() && y.is_finite()) {
            return Err(PatternError::UnparsableRow {
                row: row_no,
                reason: "non-finite coordinate".into(),
            });
        }
        let patient = field(patient_col).trim().to_string();
        if patient.is_empty() {
            return Err(PatternError::UnparsableRow {
                row: row_no,
                reason: "empty patient id".into(),
            });
        }

        let key = match sample_col {
            Some(c) => format!("{patient}/{}", field(c).trim()),
            None => patient.clone(),
        };
        if !seen_keys.contains(&key) {
            seen_keys.push(key.clone());
        }

        let pos19 = schema.is_positive(field(cd19));
        let pos68 = schema.is_positive(field(cd68));
        let pos3 = schema.is_positive(field(cd3));
        let pos8 = schema.is_positive(field(cd8));
        let fired = [pos19, pos68, pos3 && pos8, pos3 && !pos8];
        if fired.iter().filter(|&&f| f).count() > 1 {
            log.phenotype_conflicts += 1;
        }
        let type_idx = if pos19 {
            0 // B-cell
        } else if pos68 {
            3 // Macrophage
        } else if pos3 && pos8 {
            2 // CD8 T-cell
        } else if pos3 {
            1 // CD4 T-cell
        } else {
            log.untyped_rows += 1;
            continue;
        };
        let group = groups.entry(key).or_insert_with(|| Group {
            points: Vec::new(),
            types: Vec::new(),
            tissues: Vec::new(),
            tissue_names: Vec::new(),
            marks: mark_cols
                .iter()
                .map(|(name, _)| (name.clone(), Vec::new()))
                .collect(),
        });
        group.points.push(Point2::new(x, y));
        group.types.push(type_idx);
        if let Some(c) = tissue_col {
            let level = field(c).trim().to_string();
            let idx = match group.tissue_names.iter().position(|t| *t == level) {
                Some(i) => i,
                None => {
                    group.tissue_names.push(level);
                    group.tissue_names.len() - 1
                }
            };
            group.tissues.push(idx as u32);
        }
        for (name, c) in &mark_cols {
            let raw = field(*c).trim();
            let value = if raw.is_empty() {
                None
            } else {
                raw.parse::<f64>().ok().filter(|v| v.is_finite())
            };
            if value.is_none() {
                log.missing_mark_values += 1;
            }
            group.marks.get_mut(name).unwrap().push(value);
        }
    }

    // Patients whose rows all failed the phenotype rules would silently
    // vanish otherwise.
    for key in &seen_keys {
        if !groups.contains_key(key) {
            return Err(PatternError::NoPointsForPatient(key.clone()));
        }
    }
    let mut patterns = Vec::new();
    for (key, group) in groups {
        if group.points.is_empty() {
            return Err(PatternError::NoPointsForPatient(key));
        }
        let window = match &schema.window {
            WindowSource::Explicit { vertices } => Window::try_new(
                vertices.iter().map(|[x, y]| Point2::new(*x, *y)).collect(),
            )?,
            WindowSource::RipleyRasson => ripley_rasson_window(&group.points)
                .map_err(|_| PatternError::NoPointsForPatient(key.clone()))?,
        };
        let mut pattern = MultitypePattern::new(
            key,
            group.points,
            IMMUNE_TYPES.iter().map(|s| s.to_string()).collect(),
            group.types,
            window,
        )?;
        if !group.tissues.is_empty() {
            pattern = pattern.with_tissue(group.tissue_names, group.tissues)?;
        }
        for (name, values) in group.marks {
            pattern = pattern.with_mark(name, values)?;
        }
        patterns.push(pattern);
    }
    Ok((patterns, records, log))
}

fn parse_clinical(reader: impl Read, schema: &CsvSchema) -> Result<Vec<PatientRecord>, PatternError> {
    let cols = &schema.clinical;
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize, PatternError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PatternError::MissingColumn(name.to_string()))
    };
    let patient = col(&cols.patient)?;
    let primary = col(&cols.primary_tumour)?;
    let chemo = col(&cols.prior_chemo)?;
    let brca = col(&cols.brca)?;
    let parpi = col(&cols.parpi)?;
    let stage = col(&cols.stage)?;
    let age = col(&cols.age)?;
    let death = col(&cols.death)?;
    let survival = cols.survival_time.as_ref().map(|n| col(n)).transpose()?;

    let mut out = Vec::new();
    for (row_idx, row) in rdr.records().enumerate() {
        let row = row?;
        let row_no = row_idx + 2;
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let flag = |i: usize| schema.is_positive(field(i));
        let stage_raw = field(stage);
        let stage_val = if stage_raw.is_empty() {
            None
        } else {
            Some(Stage::parse(stage_raw).ok_or_else(|| PatternError::UnparsableRow {
                row: row_no,
                reason: format!("unknown stage '{stage_raw}'"),
            })?)
        };
        let age_val: f64 = field(age).parse().map_err(|_| PatternError::UnparsableRow {
            row: row_no,
            reason: format!("bad age '{}'", field(age)),
        })?;
        if age_val.is_nan() || age_val <= 0.0 {
            return Err(PatternError::UnparsableRow {
                row: row_no,
                reason: format!("non-positive age {age_val}"),
            });
        }
        out.push(PatientRecord {
            patient_id: field(patient).to_string(),
            primary_tumour: flag(primary),
            prior_chemo: flag(chemo),
            brca: flag(brca),
            parpi: flag(parpi),
            stage: stage_val,
            age: age_val,
            death: flag(death),
            survival_time: survival.and_then(|i| field(i).parse().ok()),
        });
    }
    Ok(out)
}
