//! Analysis configuration: core model, compliance extension, priors and
//! sampler settings, with the nesting rule between core and extension.

use std::fmt;

use crate::error::{Error, Result};
use crate::trial_data::TrialDataset;

/// Reference-based core model for off-treatment means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoreModelKind {
    /// Means ignore compliance: mu_{tj} on and off treatment.
    Mar,
    /// Jump to reference: off-treatment mean is the reference mean mu_{0j}.
    J2r,
    /// Copy increment from reference: mu_{0j} + mu_{tk} - mu_{0k}.
    Cir,
    /// Last mean carried forward: off-treatment mean stays at mu_{tk}.
    Lmcf,
    /// Return to baseline: off-treatment expected change is zero.
    Rtb,
    /// MAR plus a fixed per-visit increment after deviation (active arm).
    MarDelta(f64),
}

impl CoreModelKind {
    pub fn label(&self) -> String {
        match self {
            CoreModelKind::Mar => "MAR".into(),
            CoreModelKind::J2r => "J2R".into(),
            CoreModelKind::Cir => "CIR".into(),
            CoreModelKind::Lmcf => "LMCF".into(),
            CoreModelKind::Rtb => "RTB".into(),
            CoreModelKind::MarDelta(d) => format!("MAR+{d}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let CoreModelKind::MarDelta(d) = self {
            if !d.is_finite() {
                return Err(Error::InvalidConfig("delta must be finite".into()));
            }
        }
        Ok(())
    }
}

impl fmt::Display for CoreModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// Compliance model used to extend the core.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtensionKind {
    /// No deviation parameters: the core model alone.
    None,
    /// One deviation parameter per (arm, visit): being off treatment has the
    /// same effect however long ago the deviation occurred.
    Current,
    /// One deviation parameter per (arm, last on-treatment visit, visit).
    Historic,
}

impl ExtensionKind {
    pub fn label(&self) -> &'static str {
        match self {
            ExtensionKind::None => "none",
            ExtensionKind::Current => "current",
            ExtensionKind::Historic => "historic",
        }
    }
}

impl fmt::Display for ExtensionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// The core model must be nested within the compliance model: with a fully
/// uninformative deviation prior the compliance model has to be recoverable.
/// Cores whose off-treatment mean depends on the deviation visit (CIR, LMCF,
/// MAR+delta) therefore require the historic extension.
pub fn validate_nesting(core: CoreModelKind, extension: ExtensionKind) -> Result<()> {
    let ok = match extension {
        ExtensionKind::None | ExtensionKind::Historic => true,
        ExtensionKind::Current => matches!(
            core,
            CoreModelKind::Mar | CoreModelKind::J2r | CoreModelKind::Rtb
        ),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::NotNested {
            core: core.label(),
            extension: extension.label().into(),
        })
    }
}

/// Priors: mildly informative zero-centred normals on deviation parameters,
/// effectively flat proper normals on everything else.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec {
    pub deviation_mean: f64,
    pub deviation_variance: f64,
    /// Correlation between deviation parameters at adjacent visits within
    /// the same (arm, pattern) block.
    pub adjacent_correlation: f64,
    pub core_prior_variance: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            deviation_mean: 0.0,
            deviation_variance: 40.0,
            adjacent_correlation: 0.0,
            core_prior_variance: 1e6,
        }
    }
}

impl PriorSpec {
    pub fn with_variance(deviation_variance: f64) -> PriorSpec {
        PriorSpec {
            deviation_variance,
            ..PriorSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.deviation_variance.is_finite() && self.deviation_variance > 0.0) {
            return Err(Error::InvalidConfig(
                "deviation variance must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.adjacent_correlation) {
            return Err(Error::InvalidConfig(
                "adjacent correlation must lie in [0, 1)".into(),
            ));
        }
        if !(self.core_prior_variance.is_finite() && self.core_prior_variance > 0.0) {
            return Err(Error::InvalidConfig(
                "core prior variance must be positive".into(),
            ));
        }
        if !self.deviation_mean.is_finite() {
            return Err(Error::InvalidConfig("deviation mean must be finite".into()));
        }
        Ok(())
    }
}

/// Gibbs run lengths. `n_draws` retained draws become the M imputations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerSpec {
    pub n_draws: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl SamplerSpec {
    pub fn new(n_draws: usize, seed: u64) -> SamplerSpec {
        SamplerSpec {
            n_draws,
            burn_in: 1000,
            thin: 5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_draws == 0 || self.thin == 0 {
            return Err(Error::InvalidConfig(
                "draws and thin must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Baseline covariate structure in the imputation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaselineCovariate {
    /// Baseline crossed with visit and arm (2J columns).
    #[default]
    ByVisitByArm,
    /// Baseline crossed with visit only (J columns).
    ByVisit,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RbiMode {
    /// Replace imputed off-treatment cells with observed measurements where
    /// they exist (classic RBI merge-back).
    pub merge_observed: bool,
}

/// Full analysis configuration, validated for nesting.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub core: CoreModelKind,
    pub extension: ExtensionKind,
    pub priors: PriorSpec,
    pub sampler: SamplerSpec,
    pub baseline_covariate: BaselineCovariate,
    /// Include the optional extra covariate (crossed with visit) when the
    /// dataset provides one.
    pub use_extra_covariate: bool,
    pub rbi_mode: RbiMode,
}

impl ModelSpec {
    pub fn new(core: CoreModelKind, extension: ExtensionKind, sampler: SamplerSpec) -> ModelSpec {
        ModelSpec {
            core,
            extension,
            priors: PriorSpec::default(),
            sampler,
            baseline_covariate: BaselineCovariate::default(),
            use_extra_covariate: false,
            rbi_mode: RbiMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.core.validate()?;
        validate_nesting(self.core, self.extension)?;
        self.priors.validate()?;
        self.sampler.validate()
    }
}

/// Proposed deviation-prior variance: the residual variance of the outcome
/// at the final visit from an on-treatment-only MAR fit, so the prior adds
/// roughly one patient-visit worth of likelihood per parameter.
pub fn default_prior_variance(d: &TrialDataset) -> Result<f64> {
    use crate::trial_data::Arm;

    let j_total = d.n_visits();
    let on_only = d.on_treatment_only();
    for arm in [Arm::Reference, Arm::Active] {
        let n_final = on_only
            .patients()
            .iter()
            .filter(|p| p.arm == arm && p.outcomes[j_total - 1].is_some())
            .count();
        if n_final < 2 {
            return Err(Error::InsufficientData(format!(
                "arm {} has {n_final} on-treatment completers at the final visit; need at least 2",
                arm.index()
            )));
        }
    }

    let spec = ModelSpec::new(
        CoreModelKind::Mar,
        ExtensionKind::None,
        SamplerSpec {
            n_draws: 500,
            burn_in: 200,
            thin: 2,
            seed: 1,
        },
    );
    let ds = crate::design::build_design(&on_only, &spec)?;
    let chain = crate::gibbs::run_chain(&ds, &on_only, &spec.sampler)?;
    let mean_final_var = chain
        .draws()
        .iter()
        .map(|dr| dr.sigma[(j_total - 1, j_total - 1)])
        .sum::<f64>()
        / chain.draws().len() as f64;
    Ok(mean_final_var)
}
