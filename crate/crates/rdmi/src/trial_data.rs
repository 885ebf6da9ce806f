//! Long-format trial data: ingestion, validation and the derived
//! compliance variables the imputation models regress on.
//!
//! A dataset holds one record per patient with change-from-baseline outcomes
//! at visits `1..=J`. Each patient carries the visit index of their last
//! on-treatment visit `D` and last observed visit `S >= D`. Visits after `S`
//! are missing; visits in `D+1..=S` are observed off-treatment (retrieved
//! dropout).

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model_spec::CoreModelKind;

/// Treatment arm; 0 is the reference (placebo) arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Arm {
    Reference,
    Active,
}

impl Arm {
    pub fn index(self) -> usize {
        match self {
            Arm::Reference => 0,
            Arm::Active => 1,
        }
    }

    pub fn from_index(i: usize) -> Arm {
        if i == 0 {
            Arm::Reference
        } else {
            Arm::Active
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// Ordered, contiguous visit indices `1..=J`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisitGrid {
    n_visits: usize,
}

impl VisitGrid {
    pub fn new(n_visits: usize) -> Result<VisitGrid> {
        if n_visits == 0 {
            return Err(Error::InvalidDataset("need at least one visit".into()));
        }
        Ok(VisitGrid { n_visits })
    }

    /// Number of post-baseline visits J.
    pub fn len(&self) -> usize {
        self.n_visits
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Visit indices 1..=J.
    pub fn visits(&self) -> impl Iterator<Item = usize> {
        1..=self.n_visits
    }

    pub fn contains(&self, visit: usize) -> bool {
        visit >= 1 && visit <= self.n_visits
    }
}

/// One patient's data. Outcomes are change from baseline, indexed by
/// visit - 1, `None` for missing.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub arm: Arm,
    pub baseline: f64,
    /// Optional extra covariate (e.g. a pooled-site indicator).
    pub extra_covariate: Option<f64>,
    /// Last on-treatment visit D.
    pub last_on_treatment: usize,
    /// Last observed visit S (>= D).
    pub last_observed: usize,
    pub outcomes: Vec<Option<f64>>,
}

impl PatientRecord {
    pub fn outcome(&self, visit: usize) -> Option<f64> {
        self.outcomes[visit - 1]
    }

    pub fn is_deviator(&self, n_visits: usize) -> bool {
        self.last_on_treatment < n_visits
    }

    /// Visits with a missing outcome before or at the last observed visit
    /// (possible only when the dataset was loaded in permissive mode).
    pub fn interim_missing(&self) -> Vec<usize> {
        (1..=self.last_observed)
            .filter(|&j| self.outcomes[j - 1].is_none())
            .collect()
    }
}

/// Per-visit regression variables derived from (arm, D) under a core model.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedVisitVars {
    /// 1 when the visit is after the last on-treatment visit.
    pub off_t: Vec<u8>,
    /// min(visit, D): the compliance history so far.
    pub pattern: Vec<usize>,
    /// Reference level off treatment and for the whole reference arm;
    /// active level only while an active patient is on treatment.
    pub j2r_factor: Vec<u8>,
    /// Per visit, a flattened 2 x J array of core-mean loadings; entry
    /// `t * J + (v - 1)` multiplies the arm-t visit-v core mean.
    pub trt_by_vis: Vec<Vec<f64>>,
    /// Fixed offset added to the mean after deviation (MAR+delta cores).
    pub delta_offset: Vec<f64>,
}

/// Pure function of (arm, D, grid, core); recomputation is bit-identical.
pub fn derive_compliance_vars(
    p: &PatientRecord,
    core: CoreModelKind,
    grid: &VisitGrid,
) -> DerivedVisitVars {
    let j_total = grid.len();
    let d = p.last_on_treatment;
    let active = p.arm == Arm::Active;

    let mut off_t = Vec::with_capacity(j_total);
    let mut pattern = Vec::with_capacity(j_total);
    let mut j2r_factor = Vec::with_capacity(j_total);
    let mut trt_by_vis = Vec::with_capacity(j_total);
    let mut delta_offset = Vec::with_capacity(j_total);

    for j in grid.visits() {
        let off = j > d;
        off_t.push(off as u8);
        pattern.push(j.min(d));
        j2r_factor.push((active && !off) as u8);

        let t = p.arm.index();
        let mut row = vec![0.0; 2 * j_total];
        let cell = |t: usize, v: usize| t * j_total + (v - 1);
        match core {
            CoreModelKind::Mar | CoreModelKind::MarDelta(_) => row[cell(t, j)] = 1.0,
            CoreModelKind::J2r => {
                if !active || !off {
                    row[cell(t, j)] = 1.0;
                } else {
                    row[cell(0, j)] = 1.0;
                }
            }
            CoreModelKind::Cir => {
                if !active || !off {
                    row[cell(t, j)] = 1.0;
                } else {
                    row[cell(0, j)] += 1.0;
                    row[cell(1, d)] += 1.0;
                    row[cell(0, d)] -= 1.0;
                }
            }
            CoreModelKind::Lmcf => {
                if !off {
                    row[cell(t, j)] = 1.0;
                } else {
                    row[cell(t, d)] = 1.0;
                }
            }
            CoreModelKind::Rtb => {
                if !off {
                    row[cell(t, j)] = 1.0;
                }
                // off treatment: expected change is zero, row stays empty
            }
        }
        trt_by_vis.push(row);

        let offset = match core {
            CoreModelKind::MarDelta(delta) if active && off => delta * (j - d) as f64,
            _ => 0.0,
        };
        delta_offset.push(offset);
    }

    DerivedVisitVars {
        off_t,
        pattern,
        j2r_factor,
        trt_by_vis,
        delta_offset,
    }
}

/// Validated, immutable trial dataset. Safe to share across workers.
#[derive(Debug, Clone)]
pub struct TrialDataset {
    grid: VisitGrid,
    patients: Vec<PatientRecord>,
    /// Derived variables under the J2R encoding (the canonical core);
    /// design construction re-derives for the configured core model.
    derived: Vec<DerivedVisitVars>,
    provenance: String,
}

impl TrialDataset {
    pub fn new(
        grid: VisitGrid,
        patients: Vec<PatientRecord>,
        provenance: impl Into<String>,
    ) -> Result<TrialDataset> {
        let j_total = grid.len();
        let mut seen = HashMap::new();
        let mut arm_counts = [0usize; 2];
        for (idx, p) in patients.iter().enumerate() {
            if let Some(prev) = seen.insert(p.id.clone(), idx) {
                return Err(Error::InvalidDataset(format!(
                    "patient id `{}` appears twice (records {prev} and {idx})",
                    p.id
                )));
            }
            arm_counts[p.arm.index()] += 1;
            if p.outcomes.len() != j_total {
                return Err(Error::InvalidDataset(format!(
                    "patient `{}` has {} outcome slots, expected {j_total}",
                    p.id,
                    p.outcomes.len()
                )));
            }
            if !grid.contains(p.last_on_treatment) {
                return Err(Error::InvalidDataset(format!(
                    "patient `{}` last on-treatment visit {} outside 1..={j_total}",
                    p.id, p.last_on_treatment
                )));
            }
            if p.last_observed < p.last_on_treatment || !grid.contains(p.last_observed) {
                return Err(Error::InvalidDataset(format!(
                    "patient `{}` last observed visit {} invalid (D = {})",
                    p.id, p.last_observed, p.last_on_treatment
                )));
            }
            for j in grid.visits() {
                if j > p.last_observed && p.outcomes[j - 1].is_some() {
                    return Err(Error::InvalidDataset(format!(
                        "patient `{}` has an outcome at visit {j} after last observed visit {}",
                        p.id, p.last_observed
                    )));
                }
                if let Some(v) = p.outcomes[j - 1] {
                    if !v.is_finite() {
                        return Err(Error::InvalidDataset(format!(
                            "patient `{}` has a non-finite outcome at visit {j}",
                            p.id
                        )));
                    }
                }
            }
            if !p.baseline.is_finite() {
                return Err(Error::InvalidDataset(format!(
                    "patient `{}` has a non-finite baseline",
                    p.id
                )));
            }
        }
        if arm_counts[0] == 0 || arm_counts[1] == 0 {
            return Err(Error::InvalidDataset(
                "both treatment arms must be non-empty".into(),
            ));
        }

        let derived = patients
            .iter()
            .map(|p| derive_compliance_vars(p, CoreModelKind::J2r, &grid))
            .collect();

        Ok(TrialDataset {
            grid,
            patients,
            derived,
            provenance: provenance.into(),
        })
    }

    pub fn grid(&self) -> &VisitGrid {
        &self.grid
    }

    pub fn n_visits(&self) -> usize {
        self.grid.len()
    }

    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }

    pub fn derived(&self) -> &[DerivedVisitVars] {
        &self.derived
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn arm_size(&self, arm: Arm) -> usize {
        self.patients.iter().filter(|p| p.arm == arm).count()
    }

    /// (patient index, visit) pairs with a missing outcome.
    pub fn missing_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for (i, p) in self.patients.iter().enumerate() {
            for j in self.grid.visits() {
                if p.outcomes[j - 1].is_none() {
                    cells.push((i, j));
                }
            }
        }
        cells
    }

    pub fn n_missing(&self) -> usize {
        self.missing_cells().len()
    }

    /// Observed mean outcome at a visit, per arm when `arm` is given.
    pub fn observed_mean(&self, visit: usize, arm: Option<Arm>) -> Option<f64> {
        let values: Vec<f64> = self
            .patients
            .iter()
            .filter(|p| arm.is_none_or(|a| p.arm == a))
            .filter_map(|p| p.outcomes[visit - 1])
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }

    /// Sample variance of observed outcomes at a visit (both arms pooled).
    pub fn observed_variance(&self, visit: usize) -> Option<f64> {
        let values: Vec<f64> = self
            .patients
            .iter()
            .filter_map(|p| p.outcomes[visit - 1])
            .collect();
        if values.len() < 2 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        Some(ss / (values.len() - 1) as f64)
    }

    /// Copy of the dataset with off-treatment observations discarded
    /// (outcomes after D set missing), as used by the classic RBI fit.
    pub fn on_treatment_only(&self) -> TrialDataset {
        let patients = self
            .patients
            .iter()
            .map(|p| {
                let mut q = p.clone();
                for j in self.grid.visits() {
                    if j > p.last_on_treatment {
                        q.outcomes[j - 1] = None;
                    }
                }
                q.last_observed = p.last_on_treatment;
                q
            })
            .collect();
        TrialDataset::new(
            self.grid.clone(),
            patients,
            format!("{}|on-treatment-only", self.provenance),
        )
        .expect("restriction of a valid dataset is valid")
    }
}

/// Column-name mapping for CSV input. Defaults follow the documented schema
/// `patient,arm,visit,basval,change,lastvis`.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub patient: String,
    pub arm: String,
    pub visit: String,
    pub basval: String,
    pub change: String,
    /// Column holding the last on-treatment visit index, constant per patient.
    pub lastvis: Option<String>,
    /// Alternative: per-visit 0/1 off-treatment flag from which D is derived.
    pub off_flag: Option<String>,
    /// Optional extra covariate column, constant per patient.
    pub extra: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            patient: "patient".into(),
            arm: "arm".into(),
            visit: "visit".into(),
            basval: "basval".into(),
            change: "change".into(),
            lastvis: Some("lastvis".into()),
            off_flag: None,
            extra: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Enforce monotone follow-up (no interim missing data). Default true.
    pub strict: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { strict: true }
    }
}

struct RawRow {
    visit: usize,
    change: Option<f64>,
    lastvis: Option<usize>,
    off_flag: Option<u8>,
}

struct RawPatient {
    id: String,
    arm: Arm,
    baseline: f64,
    extra: Option<f64>,
    rows: Vec<RawRow>,
}

/// Load a long-format CSV (one row per patient-visit) into a validated
/// dataset with derived variables computed.
pub fn load_csv(path: &Path, schema: &CsvSchema, opts: &LoadOptions) -> Result<TrialDataset> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let digest = format!("sha256:{:x}", Sha256::digest(&bytes));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());

    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let c_patient = col(&schema.patient)?;
    let c_arm = col(&schema.arm)?;
    let c_visit = col(&schema.visit)?;
    let c_basval = col(&schema.basval)?;
    let c_change = col(&schema.change)?;
    let c_lastvis = match &schema.lastvis {
        Some(name) => Some(col(name)?),
        None => None,
    };
    let c_off = match &schema.off_flag {
        Some(name) => Some(col(name)?),
        None => None,
    };
    if c_lastvis.is_none() && c_off.is_none() {
        return Err(Error::MissingColumn(
            "lastvis (or an off-treatment flag column)".into(),
        ));
    }
    let c_extra = match &schema.extra {
        Some(name) => Some(col(name)?),
        None => None,
    };

    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, RawPatient> = HashMap::new();
    let mut max_visit = 0usize;

    for record in reader.records() {
        let record = record?;
        let id = record.get(c_patient).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::InvalidField {
                column: schema.patient.clone(),
                patient: "<blank>".into(),
                value: "empty patient id".into(),
            });
        }
        let field = |idx: usize| record.get(idx).unwrap_or("").to_string();

        let arm = parse_arm(&field(c_arm))?;
        let visit = parse_index(&field(c_visit), &schema.visit, &id)?;
        let baseline = parse_f64(&field(c_basval), &schema.basval, &id)?;
        let change = parse_missing_f64(&field(c_change), &schema.change, &id)?;
        let lastvis = match c_lastvis {
            Some(c) => Some(parse_index(&field(c), "lastvis", &id)?),
            None => None,
        };
        let off_flag = match c_off {
            Some(c) => {
                let v = parse_f64(&field(c), "off-treatment flag", &id)?;
                if v != 0.0 && v != 1.0 {
                    return Err(Error::InvalidField {
                        column: "off-treatment flag".into(),
                        patient: id.clone(),
                        value: format!("{v} (expected 0 or 1)"),
                    });
                }
                Some(v as u8)
            }
            None => None,
        };
        let extra = match c_extra {
            Some(c) => Some(parse_f64(&field(c), "extra covariate", &id)?),
            None => None,
        };

        max_visit = max_visit.max(visit);
        let entry = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            RawPatient {
                id: id.clone(),
                arm,
                baseline,
                extra,
                rows: Vec::new(),
            }
        });
        if entry.arm != arm {
            return Err(Error::InvalidField {
                column: schema.arm.clone(),
                patient: id,
                value: "treatment arm differs between rows".into(),
            });
        }
        if (entry.baseline - baseline).abs() > 1e-9 {
            return Err(Error::InvalidField {
                column: schema.basval.clone(),
                patient: id,
                value: "baseline differs between rows".into(),
            });
        }
        if entry.rows.iter().any(|r| r.visit == visit) {
            return Err(Error::DuplicatePatientVisit { patient: id, visit });
        }
        entry.rows.push(RawRow {
            visit,
            change,
            lastvis,
            off_flag,
        });
    }

    if order.is_empty() || max_visit == 0 {
        return Err(Error::InsufficientData("input file has no data rows".into()));
    }
    let grid = VisitGrid::new(max_visit)?;

    let mut patients = Vec::with_capacity(order.len());
    for id in order {
        let raw = by_id.remove(&id).expect("id collected above");
        patients.push(assemble_patient(raw, &grid, opts)?);
    }

    TrialDataset::new(grid, patients, digest)
}

fn assemble_patient(raw: RawPatient, grid: &VisitGrid, opts: &LoadOptions) -> Result<PatientRecord> {
    let j_total = grid.len();
    let mut outcomes: Vec<Option<f64>> = vec![None; j_total];
    let mut off_flags: Vec<Option<u8>> = vec![None; j_total];
    let mut lastvis: Option<usize> = None;

    for row in &raw.rows {
        if !grid.contains(row.visit) {
            return Err(Error::InvalidField {
                column: "visit".into(),
                patient: raw.id.clone(),
                value: format!("{} outside 1..={j_total}", row.visit),
            });
        }
        outcomes[row.visit - 1] = row.change;
        off_flags[row.visit - 1] = row.off_flag;
        if let Some(lv) = row.lastvis {
            match lastvis {
                None => lastvis = Some(lv),
                Some(prev) if prev != lv => {
                    return Err(Error::InvalidField {
                        column: "lastvis".into(),
                        patient: raw.id.clone(),
                        value: format!("inconsistent values {prev} and {lv}"),
                    });
                }
                _ => {}
            }
        }
    }

    let last_on_treatment = match lastvis {
        Some(lv) => {
            if !grid.contains(lv) {
                return Err(Error::InvalidField {
                    column: "lastvis".into(),
                    patient: raw.id.clone(),
                    value: format!("{lv} outside 1..={j_total}"),
                });
            }
            lv
        }
        None => derive_lastvis_from_flags(&off_flags, &raw.id)?,
    };

    let last_seen = (1..=j_total)
        .rev()
        .find(|&j| outcomes[j - 1].is_some())
        .unwrap_or(0);

    if opts.strict {
        if last_seen < last_on_treatment {
            return Err(Error::InvalidDataset(format!(
                "patient `{}` last observed visit {last_seen} precedes last on-treatment visit {last_on_treatment}",
                raw.id
            )));
        }
        for j in 1..=last_seen {
            if outcomes[j - 1].is_none() {
                return Err(Error::NonMonotoneFollowUp {
                    patient: raw.id.clone(),
                    gap: j,
                    observed: last_seen,
                });
            }
        }
    }
    let last_observed = last_seen.max(last_on_treatment);

    Ok(PatientRecord {
        id: raw.id,
        arm: raw.arm,
        baseline: raw.baseline,
        extra_covariate: raw.extra,
        last_on_treatment,
        last_observed,
        outcomes,
    })
}

fn derive_lastvis_from_flags(flags: &[Option<u8>], id: &str) -> Result<usize> {
    // Flags must be 0 (on treatment) up to some visit and 1 afterwards.
    let mut d = 0usize;
    let mut seen_off = false;
    for (i, flag) in flags.iter().enumerate() {
        let visit = i + 1;
        match flag {
            Some(0) => {
                if seen_off {
                    return Err(Error::InvalidField {
                        column: "off-treatment flag".into(),
                        patient: id.to_string(),
                        value: format!("back on treatment at visit {visit}"),
                    });
                }
                d = visit;
            }
            Some(1) => seen_off = true,
            Some(_) => unreachable!("validated at parse"),
            None => {}
        }
    }
    if d == 0 {
        return Err(Error::InvalidField {
            column: "off-treatment flag".into(),
            patient: id.to_string(),
            value: "patient is off treatment at visit 1".into(),
        });
    }
    Ok(d)
}

fn parse_arm(s: &str) -> Result<Arm> {
    match s.parse::<f64>() {
        Ok(v) if v == 0.0 => Ok(Arm::Reference),
        Ok(v) if v == 1.0 => Ok(Arm::Active),
        _ => Err(Error::ArmNotBinary(s.to_string())),
    }
}

fn parse_index(s: &str, column: &str, patient: &str) -> Result<usize> {
    let v: f64 = s.parse().map_err(|_| Error::InvalidField {
        column: column.to_string(),
        patient: patient.to_string(),
        value: s.to_string(),
    })?;
    if v.fract() != 0.0 || v < 1.0 || v > 1e6 {
        return Err(Error::InvalidField {
            column: column.to_string(),
            patient: patient.to_string(),
            value: s.to_string(),
        });
    }
    Ok(v as usize)
}

fn parse_f64(s: &str, column: &str, patient: &str) -> Result<f64> {
    let v: f64 = s.parse().map_err(|_| Error::InvalidField {
        column: column.to_string(),
        patient: patient.to_string(),
        value: s.to_string(),
    })?;
    if !v.is_finite() {
        return Err(Error::InvalidField {
            column: column.to_string(),
            patient: patient.to_string(),
            value: s.to_string(),
        });
    }
    Ok(v)
}

fn parse_missing_f64(s: &str, column: &str, patient: &str) -> Result<Option<f64>> {
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s == "." {
        return Ok(None);
    }
    parse_f64(s, column, patient).map(Some)
}

// --- summaries -------------------------------------------------------------

/// Per arm and visit: patients on treatment, observed off treatment, and
/// missing off treatment. The three counts partition the arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MissCounts {
    pub on: usize,
    pub off_obs: usize,
    pub off_miss: usize,
}

/// Cohort within a deviation pattern: stopped follow-up at deviation, or
/// continued under observation off treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cohort {
    Stopped,
    Continued,
}

#[derive(Debug, Clone)]
pub struct PatternCell {
    pub deviation_visit: usize,
    pub cohort: Cohort,
    pub count: usize,
    /// Mean observed outcome per visit; `None` where no data.
    pub means: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct SummaryTables {
    pub n_visits: usize,
    /// `missingness[arm][visit - 1]`.
    pub missingness: [Vec<MissCounts>; 2],
    /// Pattern means per arm, ordered by (deviation visit, Stopped then
    /// Continued); completers (D = J) appear once as Continued.
    pub patterns: [Vec<PatternCell>; 2],
}

/// Missingness and pattern-mean tables mirroring the standard trial summary
/// layout.
pub fn summarize(d: &TrialDataset) -> SummaryTables {
    let j_total = d.n_visits();
    let mut missingness = [vec![], vec![]];
    let mut patterns = [vec![], vec![]];

    for arm_idx in 0..2 {
        let arm = Arm::from_index(arm_idx);
        let members: Vec<&PatientRecord> =
            d.patients().iter().filter(|p| p.arm == arm).collect();

        let mut counts = Vec::with_capacity(j_total);
        for j in 1..=j_total {
            let mut c = MissCounts {
                on: 0,
                off_obs: 0,
                off_miss: 0,
            };
            for p in &members {
                if j <= p.last_on_treatment {
                    c.on += 1;
                } else if p.outcomes[j - 1].is_some() {
                    c.off_obs += 1;
                } else {
                    c.off_miss += 1;
                }
            }
            counts.push(c);
        }
        missingness[arm_idx] = counts;

        let mut cells = Vec::new();
        for dev in 1..=j_total {
            let cohorts: &[Cohort] = if dev == j_total {
                &[Cohort::Continued]
            } else {
                &[Cohort::Stopped, Cohort::Continued]
            };
            for &cohort in cohorts {
                let group: Vec<&&PatientRecord> = members
                    .iter()
                    .filter(|p| {
                        p.last_on_treatment == dev
                            && (dev == j_total
                                || match cohort {
                                    Cohort::Stopped => p.last_observed == dev,
                                    Cohort::Continued => p.last_observed > dev,
                                })
                    })
                    .collect();
                let means = (1..=j_total)
                    .map(|j| {
                        let vals: Vec<f64> =
                            group.iter().filter_map(|p| p.outcomes[j - 1]).collect();
                        if vals.is_empty() {
                            None
                        } else {
                            Some(vals.iter().sum::<f64>() / vals.len() as f64)
                        }
                    })
                    .collect();
                cells.push(PatternCell {
                    deviation_visit: dev,
                    cohort,
                    count: group.len(),
                    means,
                });
            }
        }
        patterns[arm_idx] = cells;
    }

    SummaryTables {
        n_visits: j_total,
        missingness,
        patterns,
    }
}

impl SummaryTables {
    pub fn missingness_csv(&self) -> String {
        let mut out = String::from("arm,visit,on,off_obs,off_miss\n");
        for arm in 0..2 {
            for (j, c) in self.missingness[arm].iter().enumerate() {
                out.push_str(&format!(
                    "{arm},{},{},{},{}\n",
                    j + 1,
                    c.on,
                    c.off_obs,
                    c.off_miss
                ));
            }
        }
        out
    }

    pub fn means_csv(&self) -> String {
        let mut out = String::from("arm,deviation_visit,cohort,count");
        for j in 1..=self.n_visits {
            out.push_str(&format!(",mean_v{j}"));
        }
        out.push('\n');
        for arm in 0..2 {
            for cell in &self.patterns[arm] {
                let cohort = match cell.cohort {
                    Cohort::Stopped => "stop",
                    Cohort::Continued => "cont",
                };
                out.push_str(&format!(
                    "{arm},{},{cohort},{}",
                    cell.deviation_visit, cell.count
                ));
                for m in &cell.means {
                    match m {
                        Some(v) => out.push_str(&format!(",{v:.4}")),
                        None => out.push(','),
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

impl fmt::Display for SummaryTables {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "On / Off-observed / Off-missing by visit")?;
        writeln!(f, "{:>5}  {:^17}  {:^17}", "", "reference", "active")?;
        writeln!(
            f,
            "{:>5}  {:>5} {:>5} {:>5}  {:>5} {:>5} {:>5}",
            "visit", "on", "obs", "miss", "on", "obs", "miss"
        )?;
        for j in 0..self.n_visits {
            let a = &self.missingness[0][j];
            let b = &self.missingness[1][j];
            writeln!(
                f,
                "{:>5}  {:>5} {:>5} {:>5}  {:>5} {:>5} {:>5}",
                j + 1,
                a.on,
                a.off_obs,
                a.off_miss,
                b.on,
                b.off_obs,
                b.off_miss
            )?;
        }
        for arm in 0..2 {
            writeln!(f)?;
            writeln!(
                f,
                "Mean change by deviation pattern, arm {} ({})",
                arm,
                if arm == 0 { "reference" } else { "active" }
            )?;
            write!(f, "{:>7}", "visit")?;
            for cell in &self.patterns[arm] {
                let label = format!(
                    "D{}{}",
                    cell.deviation_visit,
                    match cell.cohort {
                        Cohort::Stopped => "st",
                        Cohort::Continued => "co",
                    }
                );
                write!(f, " {label:>8}")?;
            }
            writeln!(f)?;
            for j in 0..self.n_visits {
                write!(f, "{:>7}", j + 1)?;
                for cell in &self.patterns[arm] {
                    match cell.means[j] {
                        Some(v) => write!(f, " {v:>8.2}")?,
                        None => write!(f, " {:>8}", "")?,
                    }
                }
                writeln!(f)?;
            }
            write!(f, "{:>7}", "count")?;
            for cell in &self.patterns[arm] {
                write!(f, " {:>8}", cell.count)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn patient(id: &str, arm: Arm, d: usize, s: usize, outcomes: Vec<Option<f64>>) -> PatientRecord {
        PatientRecord {
            id: id.into(),
            arm,
            baseline: 17.0,
            extra_covariate: None,
            last_on_treatment: d,
            last_observed: s,
            outcomes,
        }
    }

    #[test]
    fn derive_active_mid_deviation() {
        let grid = VisitGrid::new(4).unwrap();
        let p = patient(
            "a",
            Arm::Active,
            2,
            4,
            vec![Some(-1.0), Some(-2.0), Some(-2.5), Some(-3.0)],
        );
        let v = derive_compliance_vars(&p, CoreModelKind::J2r, &grid);
        assert_eq!(v.off_t, vec![0, 0, 1, 1]);
        assert_eq!(v.pattern, vec![1, 2, 2, 2]);
        assert_eq!(v.j2r_factor, vec![1, 1, 0, 0]);
    }

    #[test]
    fn derive_completer() {
        let grid = VisitGrid::new(4).unwrap();
        let p = patient(
            "c",
            Arm::Reference,
            4,
            4,
            vec![Some(0.0), Some(0.0), Some(0.0), Some(0.0)],
        );
        let v = derive_compliance_vars(&p, CoreModelKind::J2r, &grid);
        assert_eq!(v.off_t, vec![0, 0, 0, 0]);
        assert_eq!(v.pattern, vec![1, 2, 3, 4]);
    }

    #[test]
    fn derive_cir_row_entries() {
        let grid = VisitGrid::new(4).unwrap();
        let p = patient("a", Arm::Active, 2, 2, vec![Some(0.0), Some(0.0), None, None]);
        let v = derive_compliance_vars(&p, CoreModelKind::Cir, &grid);
        // visit 3 row: +1 at (arm0, vis3), +1 at (arm1, vis2), -1 at (arm0, vis2)
        let row = &v.trt_by_vis[2];
        assert_eq!(row[2], 1.0); // (0, 3)
        assert_eq!(row[4 + 1], 1.0); // (1, 2)
        assert_eq!(row[1], -1.0); // (0, 2)
        assert_eq!(row.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn derive_mar_delta_offsets() {
        let grid = VisitGrid::new(4).unwrap();
        let p = patient("a", Arm::Active, 2, 2, vec![Some(0.0), Some(0.0), None, None]);
        let v = derive_compliance_vars(&p, CoreModelKind::MarDelta(2.0), &grid);
        assert_eq!(v.delta_offset, vec![0.0, 0.0, 2.0, 4.0]);
        // reference patients get no offset
        let q = patient("r", Arm::Reference, 2, 2, vec![Some(0.0), Some(0.0), None, None]);
        let w = derive_compliance_vars(&q, CoreModelKind::MarDelta(2.0), &grid);
        assert_eq!(w.delta_offset, vec![0.0; 4]);
    }

    #[test]
    fn derive_rtb_off_rows_zero() {
        let grid = VisitGrid::new(3).unwrap();
        let p = patient("a", Arm::Active, 1, 1, vec![Some(0.0), None, None]);
        let v = derive_compliance_vars(&p, CoreModelKind::Rtb, &grid);
        assert!(v.trt_by_vis[1].iter().all(|&x| x == 0.0));
        assert!(v.trt_by_vis[2].iter().all(|&x| x == 0.0));
        assert_eq!(v.trt_by_vis[0][3], 1.0); // (arm1, visit1)
    }

    #[test]
    fn load_minimal_complete() {
        let f = write_csv(
            "patient,arm,visit,basval,change,lastvis\n\
             p1,0,1,17,-1,2\np1,0,2,17,-2,2\n\
             p2,1,1,18,-3,2\np2,1,2,18,-4,2\n",
        );
        let d = load_csv(f.path(), &CsvSchema::default(), &LoadOptions::default()).unwrap();
        assert_eq!(d.n_visits(), 2);
        assert_eq!(d.arm_size(Arm::Reference), 1);
        assert_eq!(d.arm_size(Arm::Active), 1);
        assert_eq!(d.n_missing(), 0);
        assert!(d.provenance().starts_with("sha256:"));
    }

    #[test]
    fn load_missing_column() {
        let f = write_csv("patient,arm,visit,basval,change\np1,0,1,17,-1\n");
        let err = load_csv(f.path(), &CsvSchema::default(), &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(_)));
    }

    #[test]
    fn load_non_monotone_strict() {
        // outcome at visit 4 but none at visit 3
        let f = write_csv(
            "patient,arm,visit,basval,change,lastvis\n\
             p1,0,1,17,-1,1\np1,0,2,17,-2,1\np1,0,3,17,,1\np1,0,4,17,-4,1\n\
             p2,1,1,18,-3,4\np2,1,2,18,-3,4\np2,1,3,18,-3,4\np2,1,4,18,-3,4\n",
        );
        let err = load_csv(f.path(), &CsvSchema::default(), &LoadOptions::default()).unwrap_err();
        assert!(matches!(
            err,
            Error::NonMonotoneFollowUp { gap: 3, observed: 4, .. }
        ));
    }

    #[test]
    fn load_non_monotone_permissive() {
        let f = write_csv(
            "patient,arm,visit,basval,change,lastvis\n\
             p1,0,1,17,-1,1\np1,0,2,17,-2,1\np1,0,3,17,,1\np1,0,4,17,-4,1\n\
             p2,1,1,18,-3,4\np2,1,2,18,-3,4\np2,1,3,18,-3,4\np2,1,4,18,-3,4\n",
        );
        let d = load_csv(f.path(), &CsvSchema::default(), &LoadOptions { strict: false }).unwrap();
        assert_eq!(d.patients()[0].interim_missing(), vec![3]);
    }

    #[test]
    fn load_duplicate_visit() {
        let f = write_csv(
            "patient,arm,visit,basval,change,lastvis\n\
             p1,0,1,17,-1,1\np1,0,1,17,-2,1\n\
             p2,1,1,18,-3,1\n",
        );
        let err = load_csv(f.path(), &CsvSchema::default(), &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DuplicatePatientVisit { visit: 1, .. }));
    }

    #[test]
    fn load_arm_not_binary() {
        let f = write_csv(
            "patient,arm,visit,basval,change,lastvis\np1,2,1,17,-1,1\n",
        );
        let err = load_csv(f.path(), &CsvSchema::default(), &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::ArmNotBinary(_)));
    }

    #[test]
    fn load_off_flag_derivation() {
        let schema = CsvSchema {
            lastvis: None,
            off_flag: Some("offt".into()),
            ..CsvSchema::default()
        };
        let f = write_csv(
            "patient,arm,visit,basval,change,offt\n\
             p1,0,1,17,-1,0\np1,0,2,17,-2,0\np1,0,3,17,-3,1\n\
             p2,1,1,18,-3,0\np2,1,2,18,-4,0\np2,1,3,18,-5,0\n",
        );
        let d = load_csv(f.path(), &schema, &LoadOptions::default()).unwrap();
        assert_eq!(d.patients()[0].last_on_treatment, 2);
        assert_eq!(d.patients()[1].last_on_treatment, 3);
    }

    #[test]
    fn summary_partition_invariant() {
        let patients = vec![
            patient("r1", Arm::Reference, 1, 1, vec![Some(1.0), None, None]),
            patient("r2", Arm::Reference, 2, 3, vec![Some(0.0), Some(1.0), Some(2.0)]),
            patient("r3", Arm::Reference, 3, 3, vec![Some(0.0), Some(0.5), Some(1.5)]),
            patient("a1", Arm::Active, 1, 3, vec![Some(-1.0), Some(-2.0), Some(-3.0)]),
            patient("a2", Arm::Active, 3, 3, vec![Some(-1.0), Some(-2.0), Some(-4.0)]),
        ];
        let d = TrialDataset::new(VisitGrid::new(3).unwrap(), patients, "test").unwrap();
        let s = summarize(&d);
        for arm in 0..2 {
            let size = d.arm_size(Arm::from_index(arm));
            for c in &s.missingness[arm] {
                assert_eq!(c.on + c.off_obs + c.off_miss, size);
            }
            let total: usize = s.patterns[arm].iter().map(|c| c.count).sum();
            assert_eq!(total, size);
        }
        // reference visit 2: r1 off-missing, r2 on... r2 D=2 so on, r3 on
        assert_eq!(s.missingness[0][1], MissCounts { on: 2, off_obs: 0, off_miss: 1 });
        // empty stratum gives an empty cell, not a number
        let empty = s.patterns[1]
            .iter()
            .find(|c| c.deviation_visit == 2)
            .unwrap();
        assert_eq!(empty.count, 0);
        assert!(empty.means.iter().all(|m| m.is_none()));
    }

    #[test]
    fn on_treatment_only_discards_off_data() {
        let patients = vec![
            patient("r1", Arm::Reference, 1, 3, vec![Some(1.0), Some(2.0), Some(3.0)]),
            patient("a1", Arm::Active, 3, 3, vec![Some(0.0), Some(0.0), Some(0.0)]),
        ];
        let d = TrialDataset::new(VisitGrid::new(3).unwrap(), patients, "test").unwrap();
        let on = d.on_treatment_only();
        assert_eq!(on.patients()[0].outcomes, vec![Some(1.0), None, None]);
        assert_eq!(on.patients()[0].last_observed, 1);
        assert_eq!(on.patients()[1].outcomes, vec![Some(0.0); 3]);
    }

    #[test]
    fn derived_vars_recomputable() {
        let patients = vec![
            patient("r1", Arm::Reference, 1, 3, vec![Some(1.0), Some(2.0), Some(3.0)]),
            patient("a1", Arm::Active, 2, 2, vec![Some(0.0), Some(0.0), None]),
        ];
        let d = TrialDataset::new(VisitGrid::new(3).unwrap(), patients, "test").unwrap();
        for (p, dv) in d.patients().iter().zip(d.derived()) {
            let again = derive_compliance_vars(p, CoreModelKind::J2r, d.grid());
            assert_eq!(dv, &again);
        }
    }
}
