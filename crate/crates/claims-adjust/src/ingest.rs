//! Cohort ingestion: claims and registry files, code hierarchies, and
//! comorbidity-index construction.
//!
//! Input layout (both files are headered CSV):
//!
//! * **claims**: `subject_id,code` — one row per diagnosis code occurrence.
//!   Repeated (subject, code) pairs collapse to a single indicator.
//! * **registry**: `subject_id,treatment` plus any number of `y_*` binary
//!   outcome columns and numeric baseline covariate columns. Row order in
//!   the registry defines subject order everywhere downstream.
//!
//! Codes are kept as strings: ICD-9 identifiers are labels, not numbers
//! ("0413" would silently lose its leading zero as an integer, and V/E codes
//! are not numeric at all). The 3-character prefix defines the code
//! hierarchy used by the grouped prior families.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Codes

/// A normalized ICD-9 code: trimmed, uppercased, decimal point removed,
/// 3–5 alphanumeric characters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Icd9Code(String);

impl Icd9Code {
    /// Parse and normalize a raw code string. `"414.01"`, `" 41401 "`, and
    /// `"41401"` all normalize to `41401`; anything that is not 3–5
    /// alphanumeric characters after normalization is rejected.
    pub fn parse(raw: &str) -> Result<Self> {
        let mut s = raw.trim().to_ascii_uppercase();
        // Tolerate the conventional decimal form NNN.xx.
        if s.len() > 3 && s.as_bytes().get(3) == Some(&b'.') {
            s.remove(3);
        }
        if !(3..=5).contains(&s.len()) || !s.bytes().all(|b| b.is_ascii_alphanumeric()) {
            return Err(Error::Validation(format!(
                "invalid ICD-9 code {raw:?}: expected 3-5 alphanumeric characters"
            )));
        }
        Ok(Icd9Code(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The 3-character parent prefix that defines the code hierarchy.
    pub fn prefix3(&self) -> &str {
        &self.0[..3]
    }
}

impl std::fmt::Display for Icd9Code {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

// ---------------------------------------------------------------------------
// Dataset

/// What the claims block of a dataset currently holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClaimsKind {
    /// Binary indicators for individual diagnosis codes.
    Codes,
    /// Binary indicators for comorbidity categories.
    ComorbidityIndicator,
    /// A single real-valued weighted comorbidity score column.
    ComorbidityScore,
}

/// An analysis-ready cohort: treatment, outcomes, baseline covariates, and
/// the claims-derived covariate block.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisDataset {
    pub subject_ids: Vec<String>,
    /// Treatment indicator per subject (0/1).
    pub treatment: Vec<u8>,
    /// Binary outcome columns in registry order, names keep their `y_` prefix.
    pub outcomes: Vec<(String, Vec<u8>)>,
    pub baseline_names: Vec<String>,
    /// n × q baseline covariates (registry column order).
    pub baseline: Array2<f64>,
    /// Claims-block column labels: code strings for [`ClaimsKind::Codes`],
    /// category names otherwise. Always lexicographically sorted.
    pub claims_names: Vec<String>,
    /// n × p claims covariates.
    pub claims: Array2<f64>,
    pub claims_kind: ClaimsKind,
}

impl AnalysisDataset {
    pub fn n(&self) -> usize {
        self.subject_ids.len()
    }

    /// Number of baseline covariates.
    pub fn q(&self) -> usize {
        self.baseline_names.len()
    }

    /// Number of claims-block covariates.
    pub fn p(&self) -> usize {
        self.claims_names.len()
    }

    pub fn outcome(&self, name: &str) -> Option<&[u8]> {
        self.outcomes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, y)| y.as_slice())
    }

    pub fn outcome_names(&self) -> Vec<String> {
        self.outcomes.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Structural consistency: shapes line up, indicators are 0/1, ids are
    /// unique, claims columns are sorted.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::Validation("dataset has no subjects".into()));
        }
        if self.treatment.len() != n
            || self.baseline.nrows() != n
            || self.claims.nrows() != n
            || self.baseline.ncols() != self.q()
            || self.claims.ncols() != self.p()
        {
            return Err(Error::Validation("dataset block shapes disagree".into()));
        }
        if self.treatment.iter().any(|&x| x > 1) {
            return Err(Error::Validation("treatment entries must be 0/1".into()));
        }
        for (name, y) in &self.outcomes {
            if y.len() != n {
                return Err(Error::Validation(format!("outcome {name} has wrong length")));
            }
            if y.iter().any(|&v| v > 1) {
                return Err(Error::Validation(format!("outcome {name} entries must be 0/1")));
            }
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &self.subject_ids {
            if !seen.insert(id) {
                return Err(Error::Validation(format!("duplicate subject_id {id:?}")));
            }
        }
        if self.claims_kind != ClaimsKind::ComorbidityScore {
            if self.claims.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Validation(
                    "claims indicators must be 0/1 for this claims kind".into(),
                ));
            }
        }
        if self.baseline.iter().any(|v| !v.is_finite())
            || self.claims.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Validation("covariates must be finite".into()));
        }
        let mut sorted = self.claims_names.clone();
        sorted.sort();
        if sorted != self.claims_names {
            return Err(Error::Validation("claims columns must be sorted".into()));
        }
        Ok(())
    }

    /// Write the claims block back out as a `subject_id,code` CSV. Only
    /// meaningful while the block still holds raw codes.
    pub fn write_claims_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        if self.claims_kind != ClaimsKind::Codes {
            return Err(Error::Validation(
                "claims block no longer holds raw codes; cannot serialize as claims CSV".into(),
            ));
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["subject_id", "code"])?;
        for (i, id) in self.subject_ids.iter().enumerate() {
            for (j, code) in self.claims_names.iter().enumerate() {
                if self.claims[[i, j]] == 1.0 {
                    w.write_record([id.as_str(), code.as_str()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Write the registry CSV: `subject_id,treatment`, outcome columns,
    /// then baseline columns.
    pub fn write_registry_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["subject_id".to_string(), "treatment".to_string()];
        header.extend(self.outcomes.iter().map(|(n, _)| n.clone()));
        header.extend(self.baseline_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut row = vec![self.subject_ids[i].clone(), self.treatment[i].to_string()];
            for (_, y) in &self.outcomes {
                row.push(y[i].to_string());
            }
            for j in 0..self.q() {
                row.push(format!("{}", self.baseline[[i, j]]));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parsing

fn header_index(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim() == name)
}

fn parse_binary(field: &str, what: &str, path: &str, record: usize) -> Result<u8> {
    match field.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Parse {
            path: path.to_string(),
            record,
            msg: format!("{what} must be 0 or 1, got {other:?}"),
        }),
    }
}

/// Parse a cohort from a claims CSV and a registry CSV.
///
/// Subject order follows the registry. Claims rows referring to unknown
/// subjects are an error (a silent drop would hide joins gone wrong).
/// Distinct codes become lexicographically sorted indicator columns.
pub fn parse_claims<P: AsRef<Path>, Q: AsRef<Path>>(
    claims_path: P,
    registry_path: Q,
) -> Result<AnalysisDataset> {
    let reg_path_str = registry_path.as_ref().display().to_string();
    let mut reg = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(registry_path.as_ref())?;
    let headers = reg.headers()?.clone();

    let id_col = header_index(&headers, "subject_id").ok_or_else(|| Error::Validation(
        format!("{reg_path_str}: registry must have a subject_id column"),
    ))?;
    let treat_col = header_index(&headers, "treatment").ok_or_else(|| Error::Validation(
        format!("{reg_path_str}: registry must have a treatment column"),
    ))?;

    let mut outcome_cols: Vec<(usize, String)> = Vec::new();
    let mut baseline_cols: Vec<(usize, String)> = Vec::new();
    for (idx, name) in headers.iter().enumerate() {
        if idx == id_col || idx == treat_col {
            continue;
        }
        if name.starts_with("y_") {
            outcome_cols.push((idx, name.to_string()));
        } else {
            baseline_cols.push((idx, name.to_string()));
        }
    }

    let mut subject_ids: Vec<String> = Vec::new();
    let mut treatment: Vec<u8> = Vec::new();
    let mut outcome_data: Vec<Vec<u8>> = vec![Vec::new(); outcome_cols.len()];
    let mut baseline_rows: Vec<Vec<f64>> = Vec::new();
    let mut row_of: HashMap<String, usize> = HashMap::new();

    for (i, rec) in reg.records().enumerate() {
        let record = i + 2; // 1-based file line; header is line 1
        let rec = rec?;
        let id = rec.get(id_col).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                path: reg_path_str.clone(),
                record,
                msg: "empty subject_id".into(),
            });
        }
        if row_of.insert(id.clone(), subject_ids.len()).is_some() {
            return Err(Error::Parse {
                path: reg_path_str.clone(),
                record,
                msg: format!("duplicate subject_id {id:?}"),
            });
        }
        treatment.push(parse_binary(
            rec.get(treat_col).unwrap_or(""),
            "treatment",
            &reg_path_str,
            record,
        )?);
        for (k, (idx, name)) in outcome_cols.iter().enumerate() {
            let field = rec.get(*idx).unwrap_or("");
            outcome_data[k].push(parse_binary(field, name, &reg_path_str, record)?);
        }
        let mut row = Vec::with_capacity(baseline_cols.len());
        for (idx, name) in &baseline_cols {
            let field = rec.get(*idx).unwrap_or("").trim();
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                path: reg_path_str.clone(),
                record,
                msg: format!("baseline {name} must be numeric, got {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: reg_path_str.clone(),
                    record,
                    msg: format!("baseline {name} must be finite, got {field:?}"),
                });
            }
            row.push(v);
        }
        baseline_rows.push(row);
        subject_ids.push(id);
    }
    let n = subject_ids.len();
    if n == 0 {
        return Err(Error::Validation(format!("{reg_path_str}: registry has no subjects")));
    }

    // First pass over claims: collect (row, code) memberships and the code set.
    let claims_path_str = claims_path.as_ref().display().to_string();
    let mut claims_rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(claims_path.as_ref())?;
    let cheaders = claims_rdr.headers()?.clone();
    let c_id = header_index(&cheaders, "subject_id").ok_or_else(|| Error::Validation(
        format!("{claims_path_str}: claims must have a subject_id column"),
    ))?;
    let c_code = header_index(&cheaders, "code").ok_or_else(|| Error::Validation(
        format!("{claims_path_str}: claims must have a code column"),
    ))?;

    let mut memberships: Vec<(usize, Icd9Code)> = Vec::new();
    let mut code_set: BTreeSet<Icd9Code> = BTreeSet::new();
    for (i, rec) in claims_rdr.records().enumerate() {
        let record = i + 2;
        let rec = rec?;
        let id = rec.get(c_id).unwrap_or("").trim();
        let row = *row_of.get(id).ok_or_else(|| Error::Parse {
            path: claims_path_str.clone(),
            record,
            msg: format!("claims row refers to unknown subject_id {id:?}"),
        })?;
        let code = Icd9Code::parse(rec.get(c_code).unwrap_or("")).map_err(|e| Error::Parse {
            path: claims_path_str.clone(),
            record,
            msg: e.to_string(),
        })?;
        code_set.insert(code.clone());
        memberships.push((row, code));
    }

    let claims_names: Vec<String> = code_set.iter().map(|c| c.as_str().to_string()).collect();
    let col_of: HashMap<&str, usize> = claims_names
        .iter()
        .enumerate()
        .map(|(j, c)| (c.as_str(), j))
        .collect();
    let mut claims = Array2::<f64>::zeros((n, claims_names.len()));
    for (row, code) in &memberships {
        claims[[*row, col_of[code.as_str()]]] = 1.0;
    }

    let q = baseline_cols.len();
    let mut baseline = Array2::<f64>::zeros((n, q));
    for (i, row) in baseline_rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            baseline[[i, j]] = *v;
        }
    }

    let ds = AnalysisDataset {
        subject_ids,
        treatment,
        outcomes: outcome_cols
            .into_iter()
            .map(|(_, name)| name)
            .zip(outcome_data)
            .collect(),
        baseline_names: baseline_cols.into_iter().map(|(_, n)| n).collect(),
        baseline,
        claims_names,
        claims,
        claims_kind: ClaimsKind::Codes,
    };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Prevalence filter

/// Drop claims columns carried by fewer than `min_subjects` distinct
/// subjects. Returns the filtered dataset and the dropped column names.
///
/// Because the claims block is an indicator matrix (one column entry per
/// subject), the column sum *is* the distinct-subject carrier count —
/// duplicate claims rows were already collapsed at parse time.
pub fn filter_by_prevalence(
    ds: &AnalysisDataset,
    min_subjects: usize,
) -> Result<(AnalysisDataset, Vec<String>)> {
    if ds.claims_kind == ClaimsKind::ComorbidityScore {
        return Err(Error::Validation(
            "prevalence filter applies to indicator columns, not a score column".into(),
        ));
    }
    let keep: Vec<usize> = (0..ds.p())
        .filter(|&j| {
            let count = ds.claims.column(j).iter().filter(|&&v| v == 1.0).count();
            count >= min_subjects
        })
        .collect();
    let dropped: Vec<String> = (0..ds.p())
        .filter(|j| !keep.contains(j))
        .map(|j| ds.claims_names[j].clone())
        .collect();

    let mut claims = Array2::<f64>::zeros((ds.n(), keep.len()));
    for (new_j, &j) in keep.iter().enumerate() {
        claims.column_mut(new_j).assign(&ds.claims.column(j));
    }
    let out = AnalysisDataset {
        claims_names: keep.iter().map(|&j| ds.claims_names[j].clone()).collect(),
        claims,
        ..ds.clone()
    };
    Ok((out, dropped))
}

// ---------------------------------------------------------------------------
// Code hierarchy

/// A 3-digit parent holding at least two observed codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeGroup {
    pub prefix: String,
    /// Column indices into the dataset's claims block, lexicographic order.
    pub member_cols: Vec<usize>,
}

/// Partition of claims columns into multi-code prefix groups and singletons.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeHierarchy {
    /// Groups in lexicographic prefix order.
    pub groups: Vec<CodeGroup>,
    /// Columns whose prefix has exactly one observed code, ascending.
    pub singleton_cols: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct HierarchyStats {
    pub total_codes: usize,
    pub n_groups: usize,
    /// Codes covered by multi-code groups.
    pub grouped_codes: usize,
    pub n_singletons: usize,
    pub max_group_size: usize,
}

impl CodeHierarchy {
    pub fn stats(&self) -> HierarchyStats {
        let grouped_codes = self.groups.iter().map(|g| g.member_cols.len()).sum();
        HierarchyStats {
            total_codes: grouped_codes + self.singleton_cols.len(),
            n_groups: self.groups.len(),
            grouped_codes,
            n_singletons: self.singleton_cols.len(),
            max_group_size: self.groups.iter().map(|g| g.member_cols.len()).max().unwrap_or(0),
        }
    }
}

/// Group the dataset's code columns by 3-character prefix. Prefixes with a
/// single observed code become singletons; every column lands in exactly
/// one place.
pub fn build_hierarchy(ds: &AnalysisDataset) -> Result<CodeHierarchy> {
    if ds.claims_kind != ClaimsKind::Codes {
        return Err(Error::Validation(
            "code hierarchy requires raw code columns, not comorbidity categories".into(),
        ));
    }
    let mut by_prefix: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (j, name) in ds.claims_names.iter().enumerate() {
        // Names were validated at parse time; defend anyway.
        if name.len() < 3 {
            return Err(Error::Validation(format!("claims column {name:?} too short for a code")));
        }
        by_prefix.entry(&name[..3]).or_default().push(j);
    }
    let mut groups = Vec::new();
    let mut singleton_cols = Vec::new();
    for (prefix, cols) in by_prefix {
        if cols.len() >= 2 {
            groups.push(CodeGroup { prefix: prefix.to_string(), member_cols: cols });
        } else {
            singleton_cols.extend(cols);
        }
    }
    singleton_cols.sort_unstable();
    Ok(CodeHierarchy { groups, singleton_cols })
}

// ---------------------------------------------------------------------------
// Comorbidity index

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComorbidityMode {
    /// One binary column per category.
    Indicator,
    /// A single weighted-sum score column.
    Continuous,
}

/// A prefix → category map (optionally weighted), longest-prefix matched.
#[derive(Debug, Clone, PartialEq)]
pub struct ComorbidityMap {
    /// prefix → (category, weight)
    entries: BTreeMap<String, (String, Option<f64>)>,
    /// category → weight, validated consistent across rows.
    weights: BTreeMap<String, Option<f64>>,
}

impl ComorbidityMap {
    /// Read a `prefix,category[,weight]` CSV. The weight column is optional
    /// per row but must be consistent within a category.
    pub fn from_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path_str = path.as_ref().display().to_string();
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path.as_ref())?;
        let headers = rdr.headers()?.clone();
        let p_col = header_index(&headers, "prefix").ok_or_else(|| Error::Validation(
            format!("{path_str}: map must have a prefix column"),
        ))?;
        let c_col = header_index(&headers, "category").ok_or_else(|| Error::Validation(
            format!("{path_str}: map must have a category column"),
        ))?;
        let w_col = header_index(&headers, "weight");

        let mut entries = BTreeMap::new();
        let mut weights: BTreeMap<String, Option<f64>> = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let record = i + 2;
            let rec = rec?;
            let prefix = rec.get(p_col).unwrap_or("").trim().to_ascii_uppercase();
            let category = rec.get(c_col).unwrap_or("").trim().to_string();
            if prefix.len() < 3 || prefix.len() > 5
                || !prefix.bytes().all(|b| b.is_ascii_alphanumeric())
            {
                return Err(Error::Parse {
                    path: path_str.clone(),
                    record,
                    msg: format!("invalid prefix {prefix:?}: expected 3-5 alphanumeric characters"),
                });
            }
            if category.is_empty() {
                return Err(Error::Parse {
                    path: path_str.clone(),
                    record,
                    msg: "empty category".into(),
                });
            }
            let weight = match w_col {
                Some(idx) => {
                    let field = rec.get(idx).unwrap_or("").trim();
                    if field.is_empty() {
                        None
                    } else {
                        let w: f64 = field.parse().map_err(|_| Error::Parse {
                            path: path_str.clone(),
                            record,
                            msg: format!("weight must be numeric, got {field:?}"),
                        })?;
                        Some(w)
                    }
                }
                None => None,
            };
            if entries.insert(prefix.clone(), (category.clone(), weight)).is_some() {
                return Err(Error::Parse {
                    path: path_str.clone(),
                    record,
                    msg: format!("duplicate prefix {prefix:?} in map"),
                });
            }
            match weights.entry(category.clone()) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(weight);
                }
                std::collections::btree_map::Entry::Occupied(e) => {
                    if *e.get() != weight {
                        return Err(Error::Parse {
                            path: path_str.clone(),
                            record,
                            msg: format!("conflicting weights for category {category:?}"),
                        });
                    }
                }
            }
        }
        if entries.is_empty() {
            return Err(Error::Validation(format!("{path_str}: comorbidity map is empty")));
        }
        Ok(ComorbidityMap { entries, weights })
    }

    /// Longest-prefix match: a 5-digit entry beats a 4-digit entry beats the
    /// 3-digit parent. Returns the category, or `None` if unmapped.
    pub fn map_code(&self, code: &str) -> Option<&str> {
        let upper_len = code.len().min(5);
        for len in (3..=upper_len).rev() {
            if let Some((cat, _)) = self.entries.get(&code[..len]) {
                return Some(cat);
            }
        }
        None
    }

    pub fn category_weight(&self, category: &str) -> Option<f64> {
        self.weights.get(category).copied().flatten()
    }

    pub fn categories(&self) -> Vec<String> {
        self.weights.keys().cloned().collect()
    }
}

/// What [`apply_comorbidity_index`] did: which codes had no category and
/// which categories were dropped for rarity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComorbidityReport {
    pub unmapped_codes: Vec<String>,
    pub dropped_categories: Vec<String>,
    pub kept_categories: Vec<String>,
}

/// Replace the code columns with comorbidity categories.
///
/// Indicator mode yields one 0/1 column per category that at least
/// `min_subjects` subjects carry; continuous mode yields a single
/// `comorbidity_score` column equal to the weighted sum of category
/// indicators (all categories, no rarity filter) and requires every mapped
/// category to have a weight.
pub fn apply_comorbidity_index(
    ds: &AnalysisDataset,
    map: &ComorbidityMap,
    mode: ComorbidityMode,
    min_subjects: usize,
) -> Result<(AnalysisDataset, ComorbidityReport)> {
    if ds.claims_kind != ClaimsKind::Codes {
        return Err(Error::Validation(
            "comorbidity index must be built from raw code columns".into(),
        ));
    }
    let n = ds.n();

    // Category list in lexicographic order, restricted to observed codes.
    let mut unmapped = Vec::new();
    let mut cat_cols: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (j, code) in ds.claims_names.iter().enumerate() {
        match map.map_code(code) {
            Some(cat) => cat_cols.entry(cat).or_default().push(j),
            None => unmapped.push(code.clone()),
        }
    }

    // Category indicator: subject carries >= 1 member code.
    let cats: Vec<&str> = cat_cols.keys().copied().collect();
    let mut indicator = Array2::<f64>::zeros((n, cats.len()));
    for (k, cat) in cats.iter().enumerate() {
        for &j in &cat_cols[cat] {
            for i in 0..n {
                if ds.claims[[i, j]] == 1.0 {
                    indicator[[i, k]] = 1.0;
                }
            }
        }
    }

    match mode {
        ComorbidityMode::Indicator => {
            let keep: Vec<usize> = (0..cats.len())
                .filter(|&k| {
                    indicator.column(k).iter().filter(|&&v| v == 1.0).count() >= min_subjects
                })
                .collect();
            let dropped: Vec<String> = (0..cats.len())
                .filter(|k| !keep.contains(k))
                .map(|k| cats[k].to_string())
                .collect();
            let mut claims = Array2::<f64>::zeros((n, keep.len()));
            for (new_k, &k) in keep.iter().enumerate() {
                claims.column_mut(new_k).assign(&indicator.column(k));
            }
            let kept: Vec<String> = keep.iter().map(|&k| cats[k].to_string()).collect();
            let out = AnalysisDataset {
                claims_names: kept.clone(),
                claims,
                claims_kind: ClaimsKind::ComorbidityIndicator,
                ..ds.clone()
            };
            out.validate()?;
            Ok((out, ComorbidityReport {
                unmapped_codes: unmapped,
                dropped_categories: dropped,
                kept_categories: kept,
            }))
        }
        ComorbidityMode::Continuous => {
            let mut score = Array2::<f64>::zeros((n, 1));
            for (k, cat) in cats.iter().enumerate() {
                let w = map.category_weight(cat).ok_or_else(|| Error::Validation(
                    format!("continuous comorbidity score requires a weight for category {cat:?}"),
                ))?;
                for i in 0..n {
                    score[[i, 0]] += w * indicator[[i, k]];
                }
            }
            let out = AnalysisDataset {
                claims_names: vec!["comorbidity_score".to_string()],
                claims: score,
                claims_kind: ClaimsKind::ComorbidityScore,
                ..ds.clone()
            };
            out.validate()?;
            Ok((out, ComorbidityReport {
                unmapped_codes: unmapped,
                dropped_categories: Vec::new(),
                kept_categories: cats.iter().map(|c| c.to_string()).collect(),
            }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, content: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    fn fixture(dir: &tempfile::TempDir) -> (std::path::PathBuf, std::path::PathBuf) {
        let claims = write_file(
            dir,
            "claims.csv",
            "subject_id,code\n\
             s1,4140\n\
             s1,414.1\n\
             s1,4140\n\
             s2,4271\n\
             s3,2500\n\
             s3,v450\n\
             s4,4141\n",
        );
        let registry = write_file(
            dir,
            "registry.csv",
            "subject_id,treatment,y_death,age,male\n\
             s1,1,0,72.5,1\n\
             s2,0,1,61,0\n\
             s3,1,0,58.25,1\n\
             s4,0,0,80,0\n",
        );
        (claims, registry)
    }

    #[test]
    fn parse_builds_sorted_indicator_columns() {
        let dir = tempfile::tempdir().unwrap();
        let (claims, registry) = fixture(&dir);
        let ds = parse_claims(&claims, &registry).unwrap();

        assert_eq!(ds.n(), 4);
        assert_eq!(ds.q(), 2);
        assert_eq!(ds.claims_names, vec!["2500", "4140", "4141", "4271", "V450"]);
        assert_eq!(ds.baseline_names, vec!["age", "male"]);
        assert_eq!(ds.treatment, vec![1, 0, 1, 0]);
        assert_eq!(ds.outcome("y_death").unwrap(), &[0, 1, 0, 0]);

        // s1 carries 4140 (deduplicated) and 414.1 -> 4141.
        let s1: Vec<f64> = ds.claims.row(0).to_vec();
        assert_eq!(s1, vec![0.0, 1.0, 1.0, 0.0, 0.0]);
        // s4 carries only 4141.
        let s4: Vec<f64> = ds.claims.row(3).to_vec();
        assert_eq!(s4, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!((ds.baseline[[2, 0]] - 58.25).abs() < 1e-15);
        ds.validate().unwrap();
    }

    #[test]
    fn code_normalization_and_rejection() {
        assert_eq!(Icd9Code::parse(" 414.01 ").unwrap().as_str(), "41401");
        assert_eq!(Icd9Code::parse("v4501").unwrap().as_str(), "V4501");
        assert_eq!(Icd9Code::parse("4140").unwrap().prefix3(), "414");
        for bad in ["41", "123456", "41.4", "41 40", ""] {
            assert!(Icd9Code::parse(bad).is_err(), "{bad:?} should be rejected");
        }
    }

    #[test]
    fn claims_referencing_unknown_subject_fail_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let claims = write_file(&dir, "c.csv", "subject_id,code\nghost,4140\n");
        let registry = write_file(&dir, "r.csv", "subject_id,treatment\ns1,1\n");
        let err = parse_claims(&claims, &registry).unwrap_err();
        assert!(err.to_string().contains("ghost"), "got: {err}");
    }

    #[test]
    fn registry_problems_name_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let claims = write_file(&dir, "c.csv", "subject_id,code\n");

        let dup = write_file(&dir, "dup.csv", "subject_id,treatment\ns1,1\ns1,0\n");
        let err = parse_claims(&claims, &dup).unwrap_err();
        assert!(err.to_string().contains("record 3"), "got: {err}");

        let badt = write_file(&dir, "badt.csv", "subject_id,treatment\ns1,2\n");
        let err = parse_claims(&claims, &badt).unwrap_err();
        assert!(err.to_string().contains("treatment"), "got: {err}");

        let missing = write_file(&dir, "missing.csv", "subject_id,arm\ns1,1\n");
        let err = parse_claims(&claims, &missing).unwrap_err();
        assert!(err.to_string().contains("treatment column"), "got: {err}");

        let bady = write_file(&dir, "bady.csv", "subject_id,treatment,y_out\ns1,1,yes\n");
        let err = parse_claims(&claims, &bady).unwrap_err();
        assert!(err.to_string().contains("y_out"), "got: {err}");
    }

    #[test]
    fn prevalence_filter_counts_distinct_subjects_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let (claims, registry) = fixture(&dir);
        let ds = parse_claims(&claims, &registry).unwrap();

        // 4141 is carried by s1 and s4; everything else by one subject.
        let (kept, dropped) = filter_by_prevalence(&ds, 2).unwrap();
        assert_eq!(kept.claims_names, vec!["4141"]);
        assert_eq!(dropped, vec!["2500", "4140", "4271", "V450"]);

        let (again, dropped2) = filter_by_prevalence(&kept, 2).unwrap();
        assert_eq!(again, kept, "filtering twice must be a fixed point");
        assert!(dropped2.is_empty());

        // Threshold 1 keeps everything.
        let (all, none) = filter_by_prevalence(&ds, 1).unwrap();
        assert_eq!(all, ds);
        assert!(none.is_empty());
    }

    #[test]
    fn hierarchy_partitions_columns_by_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let (claims, registry) = fixture(&dir);
        let ds = parse_claims(&claims, &registry).unwrap();
        let h = build_hierarchy(&ds).unwrap();

        // Columns: 2500, 4140, 4141, 4271, V450. Only prefix 414 repeats.
        assert_eq!(h.groups.len(), 1);
        assert_eq!(h.groups[0].prefix, "414");
        assert_eq!(h.groups[0].member_cols, vec![1, 2]);
        assert_eq!(h.singleton_cols, vec![0, 3, 4]);

        let stats = h.stats();
        assert_eq!(stats.total_codes, 5);
        assert_eq!(stats.grouped_codes + stats.n_singletons, stats.total_codes);
        assert_eq!(stats.max_group_size, 2);
    }

    #[test]
    fn comorbidity_indicator_mode_maps_and_filters_categories() {
        let dir = tempfile::tempdir().unwrap();
        let (claims, registry) = fixture(&dir);
        let ds = parse_claims(&claims, &registry).unwrap();
        let map_path = write_file(
            &dir,
            "map.csv",
            "prefix,category,weight\n\
             414,ischemic,1.5\n\
             4141,aneurysm,2.0\n\
             427,arrhythmia,0.5\n\
             250,diabetes,1.0\n",
        );
        let map = ComorbidityMap::from_csv(&map_path).unwrap();

        // Longest prefix wins: 4141 -> aneurysm, 4140 -> ischemic.
        assert_eq!(map.map_code("4141"), Some("aneurysm"));
        assert_eq!(map.map_code("4140"), Some("ischemic"));
        assert_eq!(map.map_code("9999"), None);

        let (out, report) = apply_comorbidity_index(&ds, &map, ComorbidityMode::Indicator, 1)
            .unwrap();
        assert_eq!(out.claims_names, vec!["aneurysm", "arrhythmia", "diabetes", "ischemic"]);
        assert_eq!(out.claims_kind, ClaimsKind::ComorbidityIndicator);
        assert_eq!(report.unmapped_codes, vec!["V450"]);
        // s1: 4140 + 4141 -> ischemic + aneurysm.
        assert_eq!(out.claims.row(0).to_vec(), vec![1.0, 0.0, 0.0, 1.0]);

        // A carrier threshold of 2 drops every single-carrier category
        // except aneurysm (s1, s4).
        let (rare, report) = apply_comorbidity_index(&ds, &map, ComorbidityMode::Indicator, 2)
            .unwrap();
        assert_eq!(rare.claims_names, vec!["aneurysm"]);
        assert_eq!(
            report.dropped_categories,
            vec!["arrhythmia", "diabetes", "ischemic"]
        );
    }

    #[test]
    fn comorbidity_continuous_mode_builds_weighted_score() {
        let dir = tempfile::tempdir().unwrap();
        let (claims, registry) = fixture(&dir);
        let ds = parse_claims(&claims, &registry).unwrap();
        let map_path = write_file(
            &dir,
            "map.csv",
            "prefix,category,weight\n\
             414,ischemic,1.5\n\
             4141,aneurysm,2.0\n\
             427,arrhythmia,0.5\n\
             250,diabetes,1.0\n",
        );
        let map = ComorbidityMap::from_csv(&map_path).unwrap();
        let (out, _) = apply_comorbidity_index(&ds, &map, ComorbidityMode::Continuous, 1).unwrap();

        assert_eq!(out.claims_names, vec!["comorbidity_score"]);
        assert_eq!(out.claims_kind, ClaimsKind::ComorbidityScore);
        // s1: ischemic (1.5) + aneurysm (2.0) = 3.5; s2: arrhythmia 0.5.
        assert!((out.claims[[0, 0]] - 3.5).abs() < 1e-15);
        assert!((out.claims[[1, 0]] - 0.5).abs() < 1e-15);

        // Score without weights must fail.
        let unweighted = write_file(&dir, "nw.csv", "prefix,category\n414,ischemic\n");
        let map = ComorbidityMap::from_csv(&unweighted).unwrap();
        let err = apply_comorbidity_index(&ds, &map, ComorbidityMode::Continuous, 1).unwrap_err();
        assert!(err.to_string().contains("weight"), "got: {err}");
    }

    #[test]
    fn map_rejects_duplicates_and_conflicts() {
        let dir = tempfile::tempdir().unwrap();
        let dup = write_file(&dir, "dup.csv", "prefix,category\n414,a\n414,b\n");
        assert!(ComorbidityMap::from_csv(&dup).is_err());

        let conflict = write_file(
            &dir,
            "conflict.csv",
            "prefix,category,weight\n414,a,1.0\n427,a,2.0\n",
        );
        let err = ComorbidityMap::from_csv(&conflict).unwrap_err();
        assert!(err.to_string().contains("conflicting"), "got: {err}");
    }

    #[test]
    fn round_trip_through_files_is_a_fixed_point() {
        let dir = tempfile::tempdir().unwrap();
        let (claims, registry) = fixture(&dir);
        let ds = parse_claims(&claims, &registry).unwrap();

        let c2 = dir.path().join("claims2.csv");
        let r2 = dir.path().join("registry2.csv");
        ds.write_claims_csv(&c2).unwrap();
        ds.write_registry_csv(&r2).unwrap();
        let ds2 = parse_claims(&c2, &r2).unwrap();
        assert_eq!(ds, ds2);

        // And the files themselves are stable under a second round trip.
        let c3 = dir.path().join("claims3.csv");
        let r3 = dir.path().join("registry3.csv");
        ds2.write_claims_csv(&c3).unwrap();
        ds2.write_registry_csv(&r3).unwrap();
        assert_eq!(std::fs::read(&c2).unwrap(), std::fs::read(&c3).unwrap());
        assert_eq!(std::fs::read(&r2).unwrap(), std::fs::read(&r3).unwrap());
    }
}
