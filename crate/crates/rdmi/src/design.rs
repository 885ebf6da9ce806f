//! Per-patient design matrices for the extended model, with the named
//! partition into core-mean, deviation and covariate columns, the matching
//! prior over the coefficient vector, and the estimability ledger.
//!
//! Off-treatment rows carry the core-model loadings (shared with the
//! on-treatment means) plus a single deviation loading, so the coefficient
//! of each deviation column is the departure of that stratum's mean from
//! the reference-based core projection.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model_spec::{BaselineCovariate, CoreModelKind, ModelSpec};
use crate::trial_data::{derive_compliance_vars, Arm, TrialDataset};

/// Identity of one design column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ColumnKey {
    /// Core mean mu_{tj}.
    CoreMean { arm: usize, visit: usize },
    /// Deviation parameter: gamma*_{tkj} (historic, `pattern = Some(k)`) or
    /// alpha*_{tj} (current, `pattern = None`).
    Deviation {
        arm: usize,
        visit: usize,
        pattern: Option<usize>,
    },
    /// Baseline covariate slope, optionally arm-specific.
    Baseline { arm: Option<usize>, visit: usize },
    /// Extra covariate slope (by visit).
    Extra { visit: usize },
}

impl ColumnKey {
    pub fn is_deviation(&self) -> bool {
        matches!(self, ColumnKey::Deviation { .. })
    }

    /// Human-readable label; deviation labels follow the SAS naming used in
    /// published template code so dumps can be audited against it.
    pub fn label(&self) -> String {
        match self {
            ColumnKey::CoreMean { arm, visit } => format!("Core*Trt {arm}*visit {visit}"),
            ColumnKey::Deviation {
                arm,
                visit,
                pattern: Some(k),
            } => format!("OffT*Trt {arm}*visit {visit}*Pattern {k}"),
            ColumnKey::Deviation {
                arm,
                visit,
                pattern: None,
            } => format!("OffT*Trt {arm}*visit {visit}"),
            ColumnKey::Baseline {
                arm: Some(t),
                visit,
            } => format!("Basval*Trt {t}*visit {visit}"),
            ColumnKey::Baseline { arm: None, visit } => format!("Basval*visit {visit}"),
            ColumnKey::Extra { visit } => format!("Extra*visit {visit}"),
        }
    }
}

/// Whether a deviation column can be estimated from the data it loads on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimability {
    /// At least one observed outcome loads on the column.
    Identified,
    /// Only missing outcomes load on it: the posterior is the prior, and the
    /// column is required for imputation.
    Unidentified,
    /// No patient-visit loads on it at all (e.g. the current-model visit-1
    /// columns: nobody is off treatment at visit 1).
    Void,
}

#[derive(Debug, Clone)]
pub struct LedgerEntry {
    pub column: usize,
    pub key: ColumnKey,
    pub observed_loads: usize,
    pub missing_loads: usize,
    pub status: Estimability,
}

/// Column layout, per-patient rows, response offsets and the prior.
#[derive(Debug, Clone)]
pub struct DesignSystem {
    spec: ModelSpec,
    columns: Vec<ColumnKey>,
    index: BTreeMap<ColumnKey, usize>,
    /// Per patient: J x P matrix, rows in visit order.
    rows: Vec<DMatrix<f64>>,
    /// Per patient: fixed offsets subtracted from the response before
    /// sampling and added back to imputed values (delta cores).
    offsets: Vec<DVector<f64>>,
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
    ledger: Vec<LedgerEntry>,
}

/// Core-column treatment on off-treatment rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignVariant {
    /// The extended model: off-treatment rows keep the core loadings and the
    /// deviation coefficients are departures from the core projection.
    Extended,
    /// The plain compliance model: off-treatment rows load only their
    /// deviation column (plus covariates), so deviation coefficients are the
    /// stratum means themselves. Used for unpenalized comparison fits.
    DirectCompliance,
}

/// Build the extended-model design for a validated spec.
pub fn build_design(data: &TrialDataset, spec: &ModelSpec) -> Result<DesignSystem> {
    build_design_variant(data, spec, DesignVariant::Extended)
}

pub fn build_design_variant(
    data: &TrialDataset,
    spec: &ModelSpec,
    variant: DesignVariant,
) -> Result<DesignSystem> {
    spec.validate()?;
    let j_total = data.n_visits();

    if spec.use_extra_covariate {
        if let Some(p) = data.patients().iter().find(|p| p.extra_covariate.is_none()) {
            return Err(Error::InvalidConfig(format!(
                "extra covariate requested but patient `{}` has none",
                p.id
            )));
        }
    }

    // column layout: (term, arm, visit, pattern), deterministic
    let mut columns = Vec::new();
    for arm in 0..2 {
        for visit in 1..=j_total {
            columns.push(ColumnKey::CoreMean { arm, visit });
        }
    }
    match spec.extension {
        crate::model_spec::ExtensionKind::None => {}
        crate::model_spec::ExtensionKind::Current => {
            for arm in 0..2 {
                for visit in 1..=j_total {
                    columns.push(ColumnKey::Deviation {
                        arm,
                        visit,
                        pattern: None,
                    });
                }
            }
        }
        crate::model_spec::ExtensionKind::Historic => {
            // only k < j: columns with k >= j are structurally void
            for arm in 0..2 {
                for visit in 2..=j_total {
                    for pattern in 1..visit {
                        columns.push(ColumnKey::Deviation {
                            arm,
                            visit,
                            pattern: Some(pattern),
                        });
                    }
                }
            }
        }
    }
    match spec.baseline_covariate {
        BaselineCovariate::ByVisitByArm => {
            for arm in 0..2 {
                for visit in 1..=j_total {
                    columns.push(ColumnKey::Baseline {
                        arm: Some(arm),
                        visit,
                    });
                }
            }
        }
        BaselineCovariate::ByVisit => {
            for visit in 1..=j_total {
                columns.push(ColumnKey::Baseline { arm: None, visit });
            }
        }
        BaselineCovariate::None => {}
    }
    if spec.use_extra_covariate {
        for visit in 1..=j_total {
            columns.push(ColumnKey::Extra { visit });
        }
    }

    let index: BTreeMap<ColumnKey, usize> =
        columns.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let p_total = columns.len();

    // per-patient rows and offsets
    let mut rows = Vec::with_capacity(data.patients().len());
    let mut offsets = Vec::with_capacity(data.patients().len());
    for patient in data.patients() {
        let derived = derive_compliance_vars(patient, spec.core, data.grid());
        let mut x = DMatrix::<f64>::zeros(j_total, p_total);
        for j in 1..=j_total {
            let r = j - 1;
            let off = derived.off_t[r] == 1;
            let suppress_core = off && variant == DesignVariant::DirectCompliance;
            if !suppress_core {
                for arm in 0..2 {
                    for v in 1..=j_total {
                        let w = derived.trt_by_vis[r][arm * j_total + (v - 1)];
                        if w != 0.0 {
                            x[(r, index[&ColumnKey::CoreMean { arm, visit: v }])] = w;
                        }
                    }
                }
            }
            if off {
                let key = match spec.extension {
                    crate::model_spec::ExtensionKind::None => None,
                    crate::model_spec::ExtensionKind::Current => Some(ColumnKey::Deviation {
                        arm: patient.arm.index(),
                        visit: j,
                        pattern: None,
                    }),
                    crate::model_spec::ExtensionKind::Historic => Some(ColumnKey::Deviation {
                        arm: patient.arm.index(),
                        visit: j,
                        pattern: Some(derived.pattern[r]),
                    }),
                };
                if let Some(key) = key {
                    x[(r, index[&key])] = 1.0;
                }
            }
            // covariates apply on and off treatment, except under RTB where
            // the off-treatment expected change is exactly zero
            let zero_change = spec.core == CoreModelKind::Rtb && off;
            if !zero_change {
                match spec.baseline_covariate {
                    BaselineCovariate::ByVisitByArm => {
                        let key = ColumnKey::Baseline {
                            arm: Some(patient.arm.index()),
                            visit: j,
                        };
                        x[(r, index[&key])] = patient.baseline;
                    }
                    BaselineCovariate::ByVisit => {
                        let key = ColumnKey::Baseline { arm: None, visit: j };
                        x[(r, index[&key])] = patient.baseline;
                    }
                    BaselineCovariate::None => {}
                }
                if spec.use_extra_covariate {
                    let key = ColumnKey::Extra { visit: j };
                    x[(r, index[&key])] = patient.extra_covariate.expect("checked above");
                }
            }
        }
        rows.push(x);
        offsets.push(DVector::from_vec(derived.delta_offset.clone()));
    }

    // prior
    let mut prior_mean = DVector::<f64>::zeros(p_total);
    let mut prior_cov = DMatrix::<f64>::zeros(p_total, p_total);
    for (i, key) in columns.iter().enumerate() {
        if key.is_deviation() {
            prior_mean[i] = spec.priors.deviation_mean;
            prior_cov[(i, i)] = spec.priors.deviation_variance;
        } else {
            prior_cov[(i, i)] = spec.priors.core_prior_variance;
        }
    }
    let rho = spec.priors.adjacent_correlation;
    if rho != 0.0 {
        let cov = rho * spec.priors.deviation_variance;
        for (i, key) in columns.iter().enumerate() {
            if let ColumnKey::Deviation { arm, visit, pattern } = key {
                let next = ColumnKey::Deviation {
                    arm: *arm,
                    visit: visit + 1,
                    pattern: *pattern,
                };
                if let Some(&jcol) = index.get(&next) {
                    prior_cov[(i, jcol)] = cov;
                    prior_cov[(jcol, i)] = cov;
                }
            }
        }
        if linalg::cholesky(&prior_cov, "prior").is_err() {
            return Err(Error::InvalidConfig(format!(
                "adjacent correlation {rho} makes the deviation prior non positive definite"
            )));
        }
    }

    // estimability ledger over deviation columns
    let mut ledger = Vec::new();
    for (i, key) in columns.iter().enumerate() {
        if !key.is_deviation() {
            continue;
        }
        let mut observed_loads = 0;
        let mut missing_loads = 0;
        for (p_idx, patient) in data.patients().iter().enumerate() {
            for j in 1..=j_total {
                if rows[p_idx][(j - 1, i)] != 0.0 {
                    if patient.outcomes[j - 1].is_some() {
                        observed_loads += 1;
                    } else {
                        missing_loads += 1;
                    }
                }
            }
        }
        let status = if observed_loads > 0 {
            Estimability::Identified
        } else if missing_loads > 0 {
            Estimability::Unidentified
        } else {
            Estimability::Void
        };
        ledger.push(LedgerEntry {
            column: i,
            key: *key,
            observed_loads,
            missing_loads,
            status,
        });
    }

    Ok(DesignSystem {
        spec: spec.clone(),
        columns,
        index,
        rows,
        offsets,
        prior_mean,
        prior_cov,
        ledger,
    })
}

impl DesignSystem {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn columns(&self) -> &[ColumnKey] {
        &self.columns
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn column_index(&self, key: &ColumnKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn row(&self, patient: usize) -> &DMatrix<f64> {
        &self.rows[patient]
    }

    pub fn rows(&self) -> &[DMatrix<f64>] {
        &self.rows
    }

    pub fn offset(&self, patient: usize) -> &DVector<f64> {
        &self.offsets[patient]
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    pub fn prior_cov(&self) -> &DMatrix<f64> {
        &self.prior_cov
    }

    pub fn ledger(&self) -> &[LedgerEntry] {
        &self.ledger
    }

    pub fn unidentified(&self) -> Vec<&LedgerEntry> {
        self.ledger
            .iter()
            .filter(|e| e.status == Estimability::Unidentified)
            .collect()
    }

    /// Core off-treatment mean (outcome scale) for this design's core model.
    pub fn core_projection(
        &self,
        beta: &DVector<f64>,
        arm: Arm,
        pattern: usize,
        visit: usize,
        baseline: f64,
        extra: Option<f64>,
    ) -> f64 {
        self.core_projection_for(self.spec.core, beta, arm, pattern, visit, baseline, extra)
    }

    /// Core off-treatment mean under `core` using this design's coefficient
    /// layout. Requires `visit > pattern`. For MAR+delta the fixed offset is
    /// included, so the value is on the outcome scale.
    pub fn core_projection_for(
        &self,
        core: CoreModelKind,
        beta: &DVector<f64>,
        arm: Arm,
        pattern: usize,
        visit: usize,
        baseline: f64,
        extra: Option<f64>,
    ) -> f64 {
        debug_assert!(visit > pattern, "core projection is an off-treatment mean");
        let t = arm.index();
        let mu = |arm: usize, visit: usize| {
            beta[self.index[&ColumnKey::CoreMean { arm, visit }]]
        };
        let core_mean = match core {
            CoreModelKind::Mar => mu(t, visit),
            CoreModelKind::J2r => mu(0, visit),
            CoreModelKind::Cir => mu(0, visit) + mu(t, pattern) - mu(0, pattern),
            CoreModelKind::Lmcf => mu(t, pattern),
            CoreModelKind::Rtb => return 0.0,
            CoreModelKind::MarDelta(delta) => {
                mu(t, visit) + delta * (visit - pattern) as f64 * t as f64
            }
        };
        core_mean + self.covariate_contribution(beta, t, visit, baseline, extra)
    }

    fn covariate_contribution(
        &self,
        beta: &DVector<f64>,
        arm: usize,
        visit: usize,
        baseline: f64,
        extra: Option<f64>,
    ) -> f64 {
        let mut value = 0.0;
        match self.spec.baseline_covariate {
            BaselineCovariate::ByVisitByArm => {
                value += baseline
                    * beta[self.index[&ColumnKey::Baseline {
                        arm: Some(arm),
                        visit,
                    }]];
            }
            BaselineCovariate::ByVisit => {
                value += baseline * beta[self.index[&ColumnKey::Baseline { arm: None, visit }]];
            }
            BaselineCovariate::None => {}
        }
        if self.spec.use_extra_covariate {
            value += extra.expect("extra covariate required by spec")
                * beta[self.index[&ColumnKey::Extra { visit }]];
        }
        value
    }

    /// Own-arm on-treatment mean mu_{tj} plus covariate contribution.
    pub fn on_treatment_mean(
        &self,
        beta: &DVector<f64>,
        arm: Arm,
        visit: usize,
        baseline: f64,
        extra: Option<f64>,
    ) -> f64 {
        let t = arm.index();
        beta[self.index[&ColumnKey::CoreMean { arm: t, visit }]]
            + self.covariate_contribution(beta, t, visit, baseline, extra)
    }

    /// Dump the design matrix and prior table as CSV for audit.
    pub fn write_debug_csv(&self, data: &TrialDataset, dir: &Path) -> Result<()> {
        let io_err = |source: std::io::Error| Error::Io {
            path: dir.to_path_buf(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io_err)?;

        let mut design = String::from("patient,visit");
        for key in &self.columns {
            design.push(',');
            design.push_str(&format!("\"{}\"", key.label()));
        }
        design.push('\n');
        for (i, patient) in data.patients().iter().enumerate() {
            for j in 1..=data.n_visits() {
                design.push_str(&format!("{},{j}", patient.id));
                for c in 0..self.n_columns() {
                    design.push_str(&format!(",{}", self.rows[i][(j - 1, c)]));
                }
                design.push('\n');
            }
        }
        let mut f = std::fs::File::create(dir.join("design.csv")).map_err(io_err)?;
        f.write_all(design.as_bytes()).map_err(io_err)?;

        let mut priors = String::from("column,label,prior_mean,prior_variance,status\n");
        let status_of: BTreeMap<usize, Estimability> = self
            .ledger
            .iter()
            .map(|e| (e.column, e.status))
            .collect();
        for (i, key) in self.columns.iter().enumerate() {
            let status = match status_of.get(&i) {
                Some(Estimability::Identified) => "identified",
                Some(Estimability::Unidentified) => "unidentified",
                Some(Estimability::Void) => "void",
                None => "",
            };
            priors.push_str(&format!(
                "{i},\"{}\",{},{},{status}\n",
                key.label(),
                self.prior_mean[i],
                self.prior_cov[(i, i)]
            ));
        }
        let mut f = std::fs::File::create(dir.join("priors.csv")).map_err(io_err)?;
        f.write_all(priors.as_bytes()).map_err(io_err)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_spec::{ExtensionKind, SamplerSpec};
    use crate::trial_data::{PatientRecord, TrialDataset, VisitGrid};

    fn patient(id: &str, arm: Arm, d: usize, s: usize, base: f64) -> PatientRecord {
        let outcomes = (1..=4)
            .map(|j| if j <= s { Some(j as f64 - base / 10.0) } else { None })
            .collect();
        PatientRecord {
            id: id.into(),
            arm,
            baseline: base,
            extra_covariate: None,
            last_on_treatment: d,
            last_observed: s,
            outcomes,
        }
    }

    fn small_dataset() -> TrialDataset {
        let patients = vec![
            patient("r1", Arm::Reference, 4, 4, 17.0),
            patient("r2", Arm::Reference, 2, 4, 19.0),
            patient("a1", Arm::Active, 4, 4, 18.0),
            patient("a2", Arm::Active, 2, 2, 20.0),
        ];
        TrialDataset::new(VisitGrid::new(4).unwrap(), patients, "test").unwrap()
    }

    fn spec(core: CoreModelKind, ext: ExtensionKind) -> ModelSpec {
        ModelSpec::new(core, ext, SamplerSpec::new(10, 1))
    }

    #[test]
    fn column_counts_historic() {
        let ds = build_design(&small_dataset(), &spec(CoreModelKind::J2r, ExtensionKind::Historic))
            .unwrap();
        let dev = ds.columns().iter().filter(|k| k.is_deviation()).count();
        assert_eq!(dev, 12); // 2 arms x {(k,j): 1<=k<j<=4}
        assert_eq!(ds.n_columns(), 8 + 12 + 8);
    }

    #[test]
    fn column_counts_current() {
        let ds = build_design(&small_dataset(), &spec(CoreModelKind::J2r, ExtensionKind::Current))
            .unwrap();
        let dev = ds.columns().iter().filter(|k| k.is_deviation()).count();
        assert_eq!(dev, 8);
        // visit-1 deviation columns exist but nothing can load on them
        let ledger = ds.ledger();
        for e in ledger {
            if let ColumnKey::Deviation { visit: 1, .. } = e.key {
                assert_eq!(e.status, Estimability::Void);
            }
        }
    }

    #[test]
    fn completer_rows_have_no_deviation_loadings() {
        let ds = build_design(&small_dataset(), &spec(CoreModelKind::J2r, ExtensionKind::Historic))
            .unwrap();
        let x = ds.row(0); // r1 is a completer
        for (c, key) in ds.columns().iter().enumerate() {
            if key.is_deviation() {
                for r in 0..4 {
                    assert_eq!(x[(r, c)], 0.0);
                }
            }
        }
    }

    #[test]
    fn nesting_error_propagates() {
        let err = build_design(&small_dataset(), &spec(CoreModelKind::Cir, ExtensionKind::Current))
            .unwrap_err();
        assert!(matches!(err, Error::NotNested { .. }));
    }

    #[test]
    fn cir_projection_arithmetic() {
        let ds = build_design(&small_dataset(), &spec(CoreModelKind::Cir, ExtensionKind::Historic))
            .unwrap();
        let mut beta = DVector::zeros(ds.n_columns());
        beta[ds.column_index(&ColumnKey::CoreMean { arm: 0, visit: 3 }).unwrap()] = -4.0;
        beta[ds.column_index(&ColumnKey::CoreMean { arm: 1, visit: 2 }).unwrap()] = -5.0;
        beta[ds.column_index(&ColumnKey::CoreMean { arm: 0, visit: 2 }).unwrap()] = -3.0;
        let proj = ds.core_projection(&beta, Arm::Active, 2, 3, 0.0, None);
        assert_eq!(proj, -6.0);
    }

    #[test]
    fn dot_product_identity() {
        // x' beta + offset == core projection + deviation coefficient,
        // exactly, for arbitrary beta, on every off-treatment row.
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let data = small_dataset();
        for core in [
            CoreModelKind::Mar,
            CoreModelKind::J2r,
            CoreModelKind::Cir,
            CoreModelKind::Lmcf,
            CoreModelKind::Rtb,
            CoreModelKind::MarDelta(2.0),
        ] {
            for ext in [ExtensionKind::Current, ExtensionKind::Historic] {
                if crate::model_spec::validate_nesting(core, ext).is_err() {
                    continue;
                }
                let ds = build_design(&data, &spec(core, ext)).unwrap();
                let beta =
                    DVector::from_fn(ds.n_columns(), |_, _| rng.random_range(-5.0..5.0));
                for (i, p) in data.patients().iter().enumerate() {
                    let derived = derive_compliance_vars(p, core, data.grid());
                    for j in 1..=4usize {
                        if derived.off_t[j - 1] == 0 {
                            continue;
                        }
                        let x = ds.row(i).row(j - 1).transpose();
                        let lhs = x.dot(&beta) + ds.offset(i)[j - 1];
                        let dev_key = match ext {
                            ExtensionKind::Current => ColumnKey::Deviation {
                                arm: p.arm.index(),
                                visit: j,
                                pattern: None,
                            },
                            ExtensionKind::Historic => ColumnKey::Deviation {
                                arm: p.arm.index(),
                                visit: j,
                                pattern: Some(p.last_on_treatment),
                            },
                            ExtensionKind::None => unreachable!(),
                        };
                        let rhs = ds.core_projection(
                            &beta,
                            p.arm,
                            p.last_on_treatment,
                            j,
                            p.baseline,
                            None,
                        ) + beta[ds.column_index(&dev_key).unwrap()];
                        assert!(
                            (lhs - rhs).abs() < 1e-12,
                            "core {core:?} ext {ext:?} patient {i} visit {j}: {lhs} vs {rhs}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn adjacent_correlation_prior_structure() {
        let mut sp = spec(CoreModelKind::J2r, ExtensionKind::Historic);
        sp.priors.adjacent_correlation = 0.5;
        sp.priors.deviation_variance = 40.0;
        let ds = build_design(&small_dataset(), &sp).unwrap();
        let a = ds
            .column_index(&ColumnKey::Deviation { arm: 1, visit: 2, pattern: Some(1) })
            .unwrap();
        let b = ds
            .column_index(&ColumnKey::Deviation { arm: 1, visit: 3, pattern: Some(1) })
            .unwrap();
        let c = ds
            .column_index(&ColumnKey::Deviation { arm: 1, visit: 4, pattern: Some(1) })
            .unwrap();
        assert_eq!(ds.prior_cov()[(a, b)], 20.0);
        assert_eq!(ds.prior_cov()[(b, c)], 20.0);
        assert_eq!(ds.prior_cov()[(a, c)], 0.0);
        // different pattern blocks stay independent
        let d = ds
            .column_index(&ColumnKey::Deviation { arm: 1, visit: 3, pattern: Some(2) })
            .unwrap();
        assert_eq!(ds.prior_cov()[(b, d)], 0.0);
    }

    #[test]
    fn zero_correlation_prior_is_diagonal() {
        let ds = build_design(&small_dataset(), &spec(CoreModelKind::J2r, ExtensionKind::Historic))
            .unwrap();
        let p = ds.n_columns();
        for r in 0..p {
            for c in 0..p {
                if r != c {
                    assert_eq!(ds.prior_cov()[(r, c)], 0.0);
                }
            }
        }
    }
}
