//! Conjugate Gibbs sampler for the Bayesian multivariate-normal repeated
//! measures model, with data augmentation of missing outcomes.
//!
//! Each sweep draws, in order: missing outcomes from their conditional
//! multivariate normal given the observed components; the coefficient vector
//! from its generalized-least-squares normal posterior; the unstructured
//! residual covariance from its inverse-Wishart posterior. All conditionals
//! are conjugate, so sampling is direct and serial correlation is low.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::design::DesignSystem;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model_spec::SamplerSpec;
use crate::trial_data::TrialDataset;

/// One retained draw. Augmented values are on the outcome scale (any fixed
/// delta offset already added back), keyed by patient index then visit.
#[derive(Debug, Clone)]
pub struct PosteriorDraw {
    pub beta: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub augmented: BTreeMap<usize, Vec<(usize, f64)>>,
    pub draw_index: usize,
}

/// Retained, thinned draws plus the column metadata needed for diagnostics.
#[derive(Debug, Clone)]
pub struct Chain {
    draws: Vec<PosteriorDraw>,
    labels: Vec<String>,
    deviation_flags: Vec<bool>,
    prior_sd: Vec<f64>,
    n_visits: usize,
}

impl Chain {
    pub fn draws(&self) -> &[PosteriorDraw] {
        &self.draws
    }

    pub fn n_visits(&self) -> usize {
        self.n_visits
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Posterior mean of the coefficient vector.
    pub fn beta_mean(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.draws[0].beta.len());
        for d in &self.draws {
            acc += &d.beta;
        }
        acc / self.draws.len() as f64
    }

    /// One CSV row per retained draw: draw index, all coefficients by column
    /// key, then the lower triangle of Sigma.
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let io_err = |source: std::io::Error| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = String::from("draw");
        for label in &self.labels {
            out.push_str(&format!(",\"{label}\""));
        }
        for r in 0..self.n_visits {
            for c in 0..=r {
                out.push_str(&format!(",\"Sigma[{},{}]\"", r + 1, c + 1));
            }
        }
        out.push('\n');
        for d in &self.draws {
            out.push_str(&d.draw_index.to_string());
            for v in d.beta.iter() {
                out.push_str(&format!(",{v:.10e}"));
            }
            for r in 0..self.n_visits {
                for c in 0..=r {
                    out.push_str(&format!(",{:.10e}", d.sigma[(r, c)]));
                }
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(io_err)?;
        f.write_all(out.as_bytes()).map_err(io_err)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct GibbsOptions {
    /// Hold the residual covariance fixed instead of sampling it
    /// (diagnostic mode for conjugate-limit checks).
    pub fixed_sigma: Option<DMatrix<f64>>,
}

/// Conditional distribution of the unobserved components of a multivariate
/// normal given observed components: returns the mean and covariance of the
/// missing block, indices ascending.
pub fn conditional_normal(
    mean: &DVector<f64>,
    sigma: &DMatrix<f64>,
    observed: &[(usize, f64)],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let j = mean.len();
    let mut seen = vec![false; j];
    for &(idx, _) in observed {
        if idx >= j || seen[idx] {
            return Err(Error::InvalidConfig(format!(
                "invalid or repeated observed index {idx}"
            )));
        }
        seen[idx] = true;
    }
    let mis: Vec<usize> = (0..j).filter(|&i| !seen[i]).collect();
    if observed.is_empty() {
        return Ok((mean.clone(), sigma.clone()));
    }
    if mis.is_empty() {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    let obs: Vec<usize> = observed.iter().map(|&(i, _)| i).collect();
    let sigma_oo = sigma.select_rows(&obs).select_columns(&obs);
    let sigma_mo = sigma.select_rows(&mis).select_columns(&obs);
    let sigma_mm = sigma.select_rows(&mis).select_columns(&mis);
    let chol = Cholesky::new(sigma_oo).ok_or(Error::SingularObservedBlock)?;

    let resid = DVector::from_iterator(
        obs.len(),
        observed.iter().map(|&(i, y)| y - mean[i]),
    );
    let cond_mean = DVector::from_iterator(mis.len(), mis.iter().map(|&i| mean[i]))
        + &sigma_mo * chol.solve(&resid);
    let mut cond_cov = &sigma_mm - &sigma_mo * chol.solve(&sigma_mo.transpose());
    linalg::symmetrize(&mut cond_cov);
    Ok((cond_mean, cond_cov))
}

// Conditional machinery for one missingness pattern, reused across patients
// sharing it within a sweep.
struct CondKernel {
    obs: Vec<usize>,
    mis: Vec<usize>,
    /// Sigma_mo Sigma_oo^-1.
    gain: DMatrix<f64>,
    cond_chol: Cholesky<f64, Dyn>,
}

impl CondKernel {
    fn build(sigma: &DMatrix<f64>, mis: &[usize]) -> Result<CondKernel> {
        let j = sigma.nrows();
        let obs: Vec<usize> = (0..j).filter(|i| !mis.contains(i)).collect();
        if obs.is_empty() {
            let cond_chol = linalg::cholesky(sigma, "marginal covariance")?;
            return Ok(CondKernel {
                obs,
                mis: mis.to_vec(),
                gain: DMatrix::zeros(j, 0),
                cond_chol,
            });
        }
        let sigma_oo = sigma.select_rows(&obs).select_columns(&obs);
        let sigma_mo = sigma.select_rows(mis).select_columns(&obs);
        let sigma_mm = sigma.select_rows(mis).select_columns(mis);
        let chol_oo = Cholesky::new(sigma_oo).ok_or(Error::SingularObservedBlock)?;
        let gain = chol_oo.solve(&sigma_mo.transpose()).transpose();
        let mut cond_cov = &sigma_mm - &gain * sigma_mo.transpose();
        linalg::symmetrize(&mut cond_cov);
        let cond_chol = linalg::cholesky(&cond_cov, "conditional covariance")?;
        Ok(CondKernel {
            obs,
            mis: mis.to_vec(),
            gain,
            cond_chol,
        })
    }

    fn draw(&self, mu: &DVector<f64>, y: &DVector<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let resid = DVector::from_iterator(
            self.obs.len(),
            self.obs.iter().map(|&i| y[i] - mu[i]),
        );
        let cond_mean = DVector::from_iterator(self.mis.len(), self.mis.iter().map(|&i| mu[i]))
            + &self.gain * resid;
        let z = linalg::std_normal_vector(self.mis.len(), rng);
        cond_mean + self.cond_chol.l() * z
    }
}

/// Run one chain: deterministic given (design, data, spec.seed).
pub fn run_chain(ds: &DesignSystem, data: &TrialDataset, spec: &SamplerSpec) -> Result<Chain> {
    run_chain_with_options(ds, data, spec, &GibbsOptions::default())
}

pub fn run_chain_with_options(
    ds: &DesignSystem,
    data: &TrialDataset,
    spec: &SamplerSpec,
    options: &GibbsOptions,
) -> Result<Chain> {
    spec.validate()?;
    let j_total = data.n_visits();
    let n = data.patients().len();
    let p_total = ds.n_columns();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // responses on the adjusted scale (delta offsets subtracted)
    let mut completed: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut missing: Vec<Vec<usize>> = Vec::with_capacity(n);
    for (i, patient) in data.patients().iter().enumerate() {
        let offset = ds.offset(i);
        let mut y = DVector::zeros(j_total);
        let mut mis = Vec::new();
        for j in 0..j_total {
            match patient.outcomes[j] {
                Some(v) => y[j] = v - offset[j],
                None => mis.push(j),
            }
        }
        completed.push(y);
        missing.push(mis);
    }

    // adjusted per-visit moments for initialization and the Sigma prior scale
    let adjusted_visit_values = |visit: usize, arm: Option<crate::trial_data::Arm>| {
        data.patients()
            .iter()
            .enumerate()
            .filter(|(_, p)| arm.is_none_or(|a| p.arm == a))
            .filter_map(|(i, p)| {
                p.outcomes[visit].map(|v| v - ds.offset(i)[visit])
            })
            .collect::<Vec<f64>>()
    };
    let overall: Vec<f64> = (0..j_total)
        .flat_map(|j| adjusted_visit_values(j, None))
        .collect();
    let overall_mean = if overall.is_empty() {
        0.0
    } else {
        overall.iter().sum::<f64>() / overall.len() as f64
    };
    let overall_var = if overall.len() < 2 {
        1.0
    } else {
        let ss: f64 = overall.iter().map(|v| (v - overall_mean).powi(2)).sum();
        (ss / (overall.len() - 1) as f64).max(1e-12)
    };
    let visit_var: Vec<f64> = (0..j_total)
        .map(|j| {
            let vals = adjusted_visit_values(j, None);
            if vals.len() < 2 {
                return overall_var;
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let ss: f64 = vals.iter().map(|v| (v - m).powi(2)).sum();
            (ss / (vals.len() - 1) as f64).max(1e-12)
        })
        .collect();

    // Sigma prior: nu0 = J + 2 with scale matching the empirical diagonal,
    // so E[Sigma] under the prior is diag(visit variances). Weak: it adds
    // one observation's worth of information.
    let nu0 = (j_total + 2) as f64;
    let scale0 = DMatrix::from_diagonal(&DVector::from_vec(visit_var.clone()));

    // initialization: beta at the prior mean, Sigma at the prior mean,
    // missing values at per-arm per-visit observed means
    let mut beta = ds.prior_mean().clone();
    let mut sigma = match &options.fixed_sigma {
        Some(s) => s.clone(),
        None => scale0.clone(),
    };
    for (i, patient) in data.patients().iter().enumerate() {
        for &j in &missing[i] {
            let arm_vals = adjusted_visit_values(j, Some(patient.arm));
            completed[i][j] = if arm_vals.is_empty() {
                let all = adjusted_visit_values(j, None);
                if all.is_empty() {
                    overall_mean
                } else {
                    all.iter().sum::<f64>() / all.len() as f64
                }
            } else {
                arm_vals.iter().sum::<f64>() / arm_vals.len() as f64
            };
        }
    }

    let prior_chol = linalg::cholesky(ds.prior_cov(), "prior covariance")?;
    let prior_precision = prior_chol.inverse();
    let prior_shift = &prior_precision * ds.prior_mean();

    let total_sweeps = spec.burn_in + spec.n_draws * spec.thin;
    let mut draws = Vec::with_capacity(spec.n_draws);

    for sweep in 0..total_sweeps {
        // (a) missing outcomes | beta, Sigma
        let mut kernels: BTreeMap<Vec<usize>, CondKernel> = BTreeMap::new();
        for i in 0..n {
            if missing[i].is_empty() {
                continue;
            }
            let kernel = match kernels.get(&missing[i]) {
                Some(k) => k,
                None => {
                    let k = CondKernel::build(&sigma, &missing[i])?;
                    kernels.entry(missing[i].clone()).or_insert(k)
                }
            };
            let mu = ds.row(i) * &beta;
            let drawn = kernel.draw(&mu, &completed[i], &mut rng);
            for (slot, &j) in kernel.mis.iter().enumerate() {
                completed[i][j] = drawn[slot];
            }
        }

        // (b) beta | completed data, Sigma (GLS posterior)
        let sigma_chol = linalg::cholesky(&sigma, "residual covariance")?;
        let l = sigma_chol.l();
        let mut precision = prior_precision.clone();
        let mut shift = prior_shift.clone();
        for i in 0..n {
            let w = l
                .solve_lower_triangular(ds.row(i))
                .ok_or(Error::NonPositiveDefinite("whitening"))?;
            let z = l
                .solve_lower_triangular(&completed[i])
                .ok_or(Error::NonPositiveDefinite("whitening"))?;
            precision.gemm_tr(1.0, &w, &w, 1.0);
            shift.gemm_tr(1.0, &w, &z, 1.0);
        }
        linalg::symmetrize(&mut precision);
        let precision_chol = Cholesky::new(precision).ok_or(Error::SingularPrecision)?;
        let post_mean = precision_chol.solve(&shift);
        beta = linalg::sample_normal_from_precision(&post_mean, &precision_chol, &mut rng);

        // (c) Sigma | completed data, beta (inverse-Wishart posterior)
        if options.fixed_sigma.is_none() {
            let mut scale = scale0.clone();
            for i in 0..n {
                let resid = &completed[i] - ds.row(i) * &beta;
                scale.ger(1.0, &resid, &resid, 1.0);
            }
            linalg::symmetrize(&mut scale);
            sigma = linalg::sample_inverse_wishart(nu0 + n as f64, &scale, &mut rng)?;
            linalg::symmetrize(&mut sigma);
        }

        // retain after burn-in, once per thinning block
        if sweep >= spec.burn_in && (sweep - spec.burn_in) % spec.thin == spec.thin - 1 {
            let mut augmented = BTreeMap::new();
            for i in 0..n {
                if missing[i].is_empty() {
                    continue;
                }
                let vals: Vec<(usize, f64)> = missing[i]
                    .iter()
                    .map(|&j| (j + 1, completed[i][j] + ds.offset(i)[j]))
                    .collect();
                augmented.insert(i, vals);
            }
            draws.push(PosteriorDraw {
                beta: beta.clone(),
                sigma: sigma.clone(),
                augmented,
                draw_index: draws.len(),
            });
        }
    }

    let labels = ds.columns().iter().map(|k| k.label()).collect();
    let deviation_flags = ds.columns().iter().map(|k| k.is_deviation()).collect();
    let prior_sd = (0..p_total).map(|i| ds.prior_cov()[(i, i)].sqrt()).collect();
    Ok(Chain {
        draws,
        labels,
        deviation_flags,
        prior_sd,
        n_visits: j_total,
    })
}

// --- diagnostics -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ParamDiagnostics {
    pub label: String,
    pub mean: f64,
    pub sd: f64,
    /// Lag-1 autocorrelation of the retained draws; `None` for a constant
    /// chain where it is undefined.
    pub lag1: Option<f64>,
    /// |mean(second half) - mean(first half)| / posterior sd.
    pub drift: f64,
    /// For deviation parameters: true when the posterior sd has not shrunk
    /// below prior sd / k, i.e. the draws roam at prior scale.
    pub roaming: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct DiagnosticsReport {
    pub params: Vec<ParamDiagnostics>,
    pub roaming_factor: f64,
}

impl DiagnosticsReport {
    pub fn roaming_labels(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.roaming == Some(true))
            .map(|p| p.label.as_str())
            .collect()
    }
}

/// Default roaming threshold factor.
pub const DEFAULT_ROAMING_FACTOR: f64 = 1.5;

fn series_diagnostics(values: &[f64]) -> (f64, f64, Option<f64>, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1).max(1) as f64;
    let sd = var.sqrt();
    let lag1 = if sd <= 1e-300 || n < 3 {
        None
    } else {
        let num: f64 = (1..n)
            .map(|i| (values[i] - mean) * (values[i - 1] - mean))
            .sum();
        let den: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        Some(num / den)
    };
    let half = n / 2;
    let m1 = values[..half].iter().sum::<f64>() / half.max(1) as f64;
    let m2 = values[half..].iter().sum::<f64>() / (n - half).max(1) as f64;
    let drift = if sd <= 1e-300 {
        0.0
    } else {
        (m2 - m1).abs() / sd
    };
    (mean, sd, lag1, drift)
}

/// Per-parameter trace summaries with a roaming flag on deviation
/// parameters whose posterior stayed at prior scale.
pub fn diagnostics(chain: &Chain, roaming_factor: f64) -> DiagnosticsReport {
    let mut params = Vec::new();
    let n_beta = chain.labels.len();
    for c in 0..n_beta {
        let series: Vec<f64> = chain.draws.iter().map(|d| d.beta[c]).collect();
        let (mean, sd, lag1, drift) = series_diagnostics(&series);
        let roaming = if chain.deviation_flags[c] {
            Some(sd * roaming_factor > chain.prior_sd[c])
        } else {
            None
        };
        params.push(ParamDiagnostics {
            label: chain.labels[c].clone(),
            mean,
            sd,
            lag1,
            drift,
            roaming,
        });
    }
    for r in 0..chain.n_visits {
        for c in 0..=r {
            let series: Vec<f64> = chain.draws.iter().map(|d| d.sigma[(r, c)]).collect();
            let (mean, sd, lag1, drift) = series_diagnostics(&series);
            params.push(ParamDiagnostics {
                label: format!("Sigma[{},{}]", r + 1, c + 1),
                mean,
                sd,
                lag1,
                drift,
                roaming: None,
            });
        }
    }
    DiagnosticsReport {
        params,
        roaming_factor,
    }
}
