//! Completed datasets: one per retained posterior draw, via either the
//! extended-model augmentation (imputation = data augmentation) or classic
//! reference-based imputation with optional merge-back of observed
//! off-treatment values.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::design::build_design;
use crate::error::{Error, Result};
use crate::exec;
use crate::gibbs::{run_chain, Chain};
use crate::linalg;
use crate::model_spec::{CoreModelKind, ExtensionKind, ModelSpec, SamplerSpec};
use crate::trial_data::{TrialDataset, VisitGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImputationSource {
    Extended,
    ClassicRbi,
}

impl ImputationSource {
    pub fn label(&self) -> &'static str {
        match self {
            ImputationSource::Extended => "extended",
            ImputationSource::ClassicRbi => "classic_rbi",
        }
    }
}

/// One completed dataset: a base plus fills for its missing cells.
///
/// For classic RBI the base is the on-treatment-only view of the input (the
/// method discards observed off-treatment data and re-imputes every
/// post-deviation cell; merge-back then overwrites fills with the original
/// observed values where they exist). Observed values in the base are never
/// altered.
#[derive(Debug, Clone)]
pub struct ImputedDataset {
    base: Arc<TrialDataset>,
    fills: BTreeMap<usize, Vec<(usize, f64)>>,
    pub imputation_index: usize,
    pub source: ImputationSource,
}

impl ImputedDataset {
    pub fn base(&self) -> &TrialDataset {
        &self.base
    }

    pub fn fills(&self) -> &BTreeMap<usize, Vec<(usize, f64)>> {
        &self.fills
    }

    /// Completed outcome: observed value where present, fill otherwise.
    pub fn completed(&self, patient: usize, visit: usize) -> f64 {
        match self.base.patients()[patient].outcomes[visit - 1] {
            Some(v) => v,
            None => self.fill(patient, visit).expect("fills cover missing cells"),
        }
    }

    fn fill(&self, patient: usize, visit: usize) -> Option<f64> {
        self.fills
            .get(&patient)?
            .iter()
            .find(|(j, _)| *j == visit)
            .map(|(_, v)| *v)
    }

    /// Check the fills exactly cover the base's missing cells with finite
    /// values.
    pub fn validate(&self) -> Result<()> {
        let mut expected = self.base.missing_cells();
        expected.sort_unstable();
        let mut got: Vec<(usize, usize)> = self
            .fills
            .iter()
            .flat_map(|(&p, vs)| vs.iter().map(move |&(j, _)| (p, j)))
            .collect();
        got.sort_unstable();
        if expected != got {
            return Err(Error::InvalidDataset(
                "imputation fills do not cover exactly the missing cells".into(),
            ));
        }
        for vs in self.fills.values() {
            for &(_, v) in vs {
                if !v.is_finite() {
                    return Err(Error::InvalidDataset("imputed value is not finite".into()));
                }
            }
        }
        Ok(())
    }

    /// Materialize as a fully observed dataset (passes the same validation
    /// as any trial dataset).
    pub fn to_completed_dataset(&self) -> Result<TrialDataset> {
        let j_total = self.base.n_visits();
        let patients = self
            .base
            .patients()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut q = p.clone();
                for j in 1..=j_total {
                    if q.outcomes[j - 1].is_none() {
                        q.outcomes[j - 1] = self.fill(i, j);
                    }
                }
                q.last_observed = j_total;
                q
            })
            .collect();
        TrialDataset::new(
            VisitGrid::new(j_total)?,
            patients,
            format!(
                "{}|imputation={}",
                self.base.provenance(),
                self.imputation_index
            ),
        )
    }
}

/// Extended-model imputation: draw m's augmented values become completed
/// dataset m verbatim (data augmentation is the imputation), M = n_draws.
pub fn impute_extended(chain: &Chain, data: &Arc<TrialDataset>) -> Vec<ImputedDataset> {
    exec::map_indexed(chain.draws().len(), |m| {
        let draw = &chain.draws()[m];
        ImputedDataset {
            base: Arc::clone(data),
            fills: draw.augmented.clone(),
            imputation_index: m,
            source: ImputationSource::Extended,
        }
    })
}

/// Classic reference-based imputation.
///
/// Fits the MAR repeated-measures model by Gibbs on on-treatment data only,
/// then per posterior draw builds each deviator's pattern-specific mean
/// vector from the core model and imputes every post-deviation cell from
/// the conditional multivariate normal given that patient's on-treatment
/// history. With `merge_observed`, imputed cells are overwritten by observed
/// off-treatment measurements where available.
pub fn impute_classic_rbi(
    data: &Arc<TrialDataset>,
    core: CoreModelKind,
    spec: &SamplerSpec,
    merge_observed: bool,
) -> Result<Vec<ImputedDataset>> {
    if matches!(core, CoreModelKind::MarDelta(_)) {
        return Err(Error::InvalidConfig(
            "classic RBI supports MAR, J2R, CIR, LMCF and RTB cores".into(),
        ));
    }
    let j_total = data.n_visits();

    // the reference profile must be estimable at every visit
    for visit in 1..=j_total {
        let n_ref = data
            .patients()
            .iter()
            .filter(|p| {
                p.arm == crate::trial_data::Arm::Reference
                    && p.last_on_treatment >= visit
                    && p.outcomes[visit - 1].is_some()
            })
            .count();
        if n_ref == 0 {
            return Err(Error::InsufficientReferenceData(visit));
        }
    }

    let on_only = Arc::new(data.on_treatment_only());
    let fit_spec = ModelSpec::new(CoreModelKind::Mar, ExtensionKind::None, *spec);
    let ds = build_design(&on_only, &fit_spec)?;
    let chain = run_chain(&ds, &on_only, spec)?;

    let results = exec::map_indexed(chain.draws().len(), |m| -> Result<ImputedDataset> {
        let draw = &chain.draws()[m];
        let mut rng = ChaCha8Rng::seed_from_u64(exec::stream_seed(spec.seed, 0xc1a5_51c0 + m as u64));
        let mut fills: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();

        for (i, patient) in on_only.patients().iter().enumerate() {
            let d = patient.last_on_treatment;
            let mis: Vec<usize> = (1..=j_total)
                .filter(|&j| patient.outcomes[j - 1].is_none())
                .collect();
            if mis.is_empty() {
                continue;
            }

            // pattern-specific mean vector: own-arm means on treatment, core
            // projection after deviation
            let mean = DVector::from_iterator(
                j_total,
                (1..=j_total).map(|j| {
                    if j <= d {
                        ds.on_treatment_mean(
                            &draw.beta,
                            patient.arm,
                            j,
                            patient.baseline,
                            patient.extra_covariate,
                        )
                    } else {
                        ds.core_projection_for(
                            core,
                            &draw.beta,
                            patient.arm,
                            d,
                            j,
                            patient.baseline,
                            patient.extra_covariate,
                        )
                    }
                }),
            );

            // condition on the observed on-treatment history only
            let observed: Vec<(usize, f64)> = (1..=d)
                .filter_map(|j| patient.outcomes[j - 1].map(|v| (j - 1, v)))
                .collect();
            let (cond_mean, cond_cov) =
                crate::gibbs::conditional_normal(&mean, &draw.sigma, &observed)?;
            let drawn =
                linalg::sample_normal_from_covariance(&cond_mean, &cond_cov, &mut rng, "classic RBI")?;

            let mut vals: Vec<(usize, f64)> = mis
                .iter()
                .enumerate()
                .map(|(slot, &j)| (j, drawn[slot]))
                .collect();
            if merge_observed {
                for (j, v) in vals.iter_mut() {
                    if let Some(orig) = data.patients()[i].outcomes[*j - 1] {
                        *v = orig;
                    }
                }
            }
            fills.insert(i, vals);
        }

        Ok(ImputedDataset {
            base: Arc::clone(&on_only),
            fills,
            imputation_index: m,
            source: ImputationSource::ClassicRbi,
        })
    });
    results.into_iter().collect()
}

/// Stacked long CSV of all completed datasets with an `_imputation_` column.
pub fn write_stacked_csv(imputations: &[ImputedDataset], path: &Path) -> Result<()> {
    let io_err = |source: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = String::from("_imputation_,patient,arm,visit,basval,change,lastvis\n");
    for imp in imputations {
        let base = imp.base();
        for (i, p) in base.patients().iter().enumerate() {
            for j in 1..=base.n_visits() {
                out.push_str(&format!(
                    "{},{},{},{j},{},{:.6},{}\n",
                    imp.imputation_index,
                    p.id,
                    p.arm.index(),
                    p.baseline,
                    imp.completed(i, j),
                    p.last_on_treatment
                ));
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(out.as_bytes()).map_err(io_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial_data::{Arm, PatientRecord};

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

    fn tiny() -> Arc<TrialDataset> {
        let patients = vec![
            patient("r1", Arm::Reference, 3, 3, vec![Some(-1.0), Some(-2.0), Some(-3.0)]),
            patient("r2", Arm::Reference, 3, 3, vec![Some(0.0), Some(-1.0), Some(-2.0)]),
            patient("r3", Arm::Reference, 1, 3, vec![Some(-1.0), Some(-1.5), Some(-2.5)]),
            patient("r4", Arm::Reference, 1, 1, vec![Some(-0.5), None, None]),
            patient("a1", Arm::Active, 3, 3, vec![Some(-2.0), Some(-4.0), Some(-6.0)]),
            patient("a2", Arm::Active, 3, 3, vec![Some(-1.0), Some(-3.0), Some(-5.0)]),
            patient("a3", Arm::Active, 2, 2, vec![Some(-2.0), Some(-3.5), None]),
        ];
        Arc::new(TrialDataset::new(VisitGrid::new(3).unwrap(), patients, "tiny").unwrap())
    }

    #[test]
    fn extended_no_missing_gives_identical_copies() {
        let patients = vec![
            patient("r1", Arm::Reference, 2, 2, vec![Some(1.0), Some(2.0)]),
            patient("a1", Arm::Active, 2, 2, vec![Some(3.0), Some(4.0)]),
            patient("r2", Arm::Reference, 2, 2, vec![Some(0.0), Some(1.0)]),
            patient("a2", Arm::Active, 2, 2, vec![Some(2.0), Some(3.0)]),
        ];
        let data =
            Arc::new(TrialDataset::new(VisitGrid::new(2).unwrap(), patients, "full").unwrap());
        let spec = ModelSpec::new(
            CoreModelKind::J2r,
            ExtensionKind::None,
            SamplerSpec {
                n_draws: 5,
                burn_in: 10,
                thin: 1,
                seed: 3,
            },
        );
        let ds = build_design(&data, &spec).unwrap();
        let chain = run_chain(&ds, &data, &spec.sampler).unwrap();
        let imps = impute_extended(&chain, &data);
        assert_eq!(imps.len(), 5);
        for imp in &imps {
            imp.validate().unwrap();
            assert!(imp.fills().is_empty());
            for (i, _) in data.patients().iter().enumerate() {
                for j in 1..=2 {
                    assert_eq!(
                        imp.completed(i, j),
                        data.patients()[i].outcomes[j - 1].unwrap()
                    );
                }
            }
        }
    }

    #[test]
    fn classic_j2r_fills_cover_post_deviation() {
        let data = tiny();
        let spec = SamplerSpec {
            n_draws: 4,
            burn_in: 20,
            thin: 1,
            seed: 5,
        };
        let imps = impute_classic_rbi(&data, CoreModelKind::J2r, &spec, false).unwrap();
        assert_eq!(imps.len(), 4);
        for imp in &imps {
            imp.validate().unwrap();
            // r3 continued off treatment: without merge its observed values
            // at visits 2 and 3 are replaced by imputations in the base view
            assert!(imp.base().patients()[2].outcomes[1].is_none());
            assert!(imp.fill(2, 2).is_some());
            imp.to_completed_dataset().unwrap();
        }
    }

    #[test]
    fn classic_merge_restores_observed_off_treatment() {
        let data = tiny();
        let spec = SamplerSpec {
            n_draws: 3,
            burn_in: 20,
            thin: 1,
            seed: 5,
        };
        let imps = impute_classic_rbi(&data, CoreModelKind::J2r, &spec, true).unwrap();
        for imp in &imps {
            // r3's observed off-treatment values come back verbatim
            assert_eq!(imp.completed(2, 2), -1.5);
            assert_eq!(imp.completed(2, 3), -2.5);
            // a3 visit 3 was truly missing: stays imputed, varies by draw
            assert!(imp.completed(6, 3).is_finite());
        }
    }

    #[test]
    fn classic_rejects_delta_core() {
        let data = tiny();
        let spec = SamplerSpec::new(2, 1);
        let err = impute_classic_rbi(&data, CoreModelKind::MarDelta(2.0), &spec, false).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn classic_requires_reference_data_everywhere() {
        // reference arm deviates at visit 1 across the board: no reference
        // information at later visits
        let patients = vec![
            patient("r1", Arm::Reference, 1, 1, vec![Some(0.0), None, None]),
            patient("r2", Arm::Reference, 1, 1, vec![Some(0.2), None, None]),
            patient("a1", Arm::Active, 3, 3, vec![Some(0.0), Some(0.1), Some(0.2)]),
            patient("a2", Arm::Active, 3, 3, vec![Some(0.1), Some(0.2), Some(0.3)]),
        ];
        let data =
            Arc::new(TrialDataset::new(VisitGrid::new(3).unwrap(), patients, "bad").unwrap());
        let err =
            impute_classic_rbi(&data, CoreModelKind::J2r, &SamplerSpec::new(2, 1), false)
                .unwrap_err();
        assert!(matches!(err, Error::InsufficientReferenceData(2)));
    }
}
