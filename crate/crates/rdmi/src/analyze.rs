//! Substantive analysis per completed dataset (ANCOVA on the final-visit
//! change) and Rubin's-rules pooling across imputations.

use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::exec;
use crate::impute::ImputedDataset;

/// Treatment-policy estimate from one completed dataset.
#[derive(Debug, Clone, Copy)]
pub struct FitResult {
    /// Treatment coefficient (active minus reference), outcome units.
    pub estimate: f64,
    /// Its squared standard error.
    pub variance: f64,
    pub n_used: usize,
}

/// OLS of final-visit change on {intercept, treatment indicator, baseline}.
pub fn ancova(imp: &ImputedDataset) -> Result<FitResult> {
    let data = imp.base();
    let j = data.n_visits();
    let n = data.patients().len();
    if n < 4 {
        return Err(Error::InsufficientData(
            "ANCOVA needs more patients than parameters".into(),
        ));
    }
    let x = DMatrix::from_fn(n, 3, |r, c| {
        let p = &data.patients()[r];
        match c {
            0 => 1.0,
            1 => p.arm.index() as f64,
            _ => p.baseline,
        }
    });
    let y = DVector::from_fn(n, |r, _| imp.completed(r, j));

    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let chol = Cholesky::new(xtx).ok_or(Error::RankDeficient)?;
    let beta = chol.solve(&xty);
    let resid = &y - &x * &beta;
    let rss = resid.dot(&resid);
    let s2 = rss / (n - 3) as f64;
    let cov = chol.inverse() * s2;

    Ok(FitResult {
        estimate: beta[1],
        variance: cov[(1, 1)],
        n_used: n,
    })
}

/// ANCOVA across all imputations; independent fits run in parallel.
pub fn ancova_all(imputations: &[ImputedDataset]) -> Result<Vec<FitResult>> {
    exec::map_indexed(imputations.len(), |m| ancova(&imputations[m]))
        .into_iter()
        .collect()
}

/// Rubin's-rules pooled result for the treatment-policy contrast.
#[derive(Debug, Clone, Copy)]
pub struct PooledResult {
    pub qbar: f64,
    pub within_w: f64,
    pub between_b: f64,
    pub total_t: f64,
    pub se: f64,
    /// Degrees of freedom; infinite when the between-imputation variance is
    /// zero.
    pub df: f64,
    pub ci95: (f64, f64),
    /// Monte Carlo standard error of the pooled estimate, sqrt(B/m).
    pub mc_se: f64,
    pub m: usize,
}

fn t_975(df: f64) -> f64 {
    if !df.is_finite() || df > 1e8 {
        1.959963984540054
    } else {
        StudentsT::new(0.0, 1.0, df)
            .expect("valid dof")
            .inverse_cdf(0.975)
    }
}

/// Pool per-imputation estimates with Rubin's rules. Inputs are reduced in a
/// canonical sorted order, so the result is exactly invariant to permutation
/// of the imputations.
pub fn pool(fits: &[FitResult]) -> Result<PooledResult> {
    let m = fits.len();
    if m < 2 {
        return Err(Error::TooFewImputations(m));
    }
    let mut ordered: Vec<(f64, f64)> = fits.iter().map(|f| (f.estimate, f.variance)).collect();
    if ordered.iter().any(|(q, v)| !q.is_finite() || !(*v > 0.0)) {
        return Err(Error::InvalidDataset(
            "per-imputation estimates must be finite with positive variance".into(),
        ));
    }
    ordered.sort_by(|a, b| a.partial_cmp(b).expect("finite"));

    let mf = m as f64;
    let qbar = ordered.iter().map(|(q, _)| q).sum::<f64>() / mf;
    let within_w = ordered.iter().map(|(_, v)| v).sum::<f64>() / mf;
    let between_b = ordered.iter().map(|(q, _)| (q - qbar).powi(2)).sum::<f64>() / (mf - 1.0);

    let (total_t, df) = if between_b == 0.0 {
        (within_w, f64::INFINITY)
    } else {
        let inflation = (1.0 + 1.0 / mf) * between_b;
        let df = (mf - 1.0) * (1.0 + within_w / inflation).powi(2);
        (within_w + inflation, df)
    };
    let se = total_t.sqrt();
    let t = t_975(df);
    Ok(PooledResult {
        qbar,
        within_w,
        between_b,
        total_t,
        se,
        df,
        ci95: (qbar - t * se, qbar + t * se),
        mc_se: (between_b / mf).sqrt(),
        m,
    })
}

/// Barnard-Rubin small-sample degrees of freedom, given the complete-data
/// degrees of freedom. Optional; the classic rule is the default everywhere.
pub fn pool_barnard_rubin(fits: &[FitResult], complete_df: f64) -> Result<PooledResult> {
    let mut pooled = pool(fits)?;
    if !pooled.df.is_finite() {
        return Ok(pooled);
    }
    let lambda = (1.0 + 1.0 / pooled.m as f64) * pooled.between_b / pooled.total_t;
    let df_obs = (complete_df + 1.0) / (complete_df + 3.0) * complete_df * (1.0 - lambda);
    let df = 1.0 / (1.0 / pooled.df + 1.0 / df_obs);
    let t = t_975(df);
    pooled.df = df;
    pooled.ci95 = (pooled.qbar - t * pooled.se, pooled.qbar + t * pooled.se);
    Ok(pooled)
}

/// One line of the results CSV: full provenance plus the pooled summary.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub dataset: String,
    pub method: String,
    pub core: String,
    pub extension: String,
    pub prior_variance: Option<f64>,
    pub m: usize,
    pub seed: u64,
    pub pooled: PooledResult,
}

pub const RESULT_CSV_HEADER: &str =
    "dataset,method,core,extension,prior_variance,m,seed,estimate,se,df,ci_low,ci_high,mc_se";

impl ResultRow {
    pub fn to_csv_row(&self) -> String {
        let var = self
            .prior_variance
            .map(|v| format!("{v}"))
            .unwrap_or_default();
        let df = if self.pooled.df.is_finite() {
            format!("{:.2}", self.pooled.df)
        } else {
            "inf".into()
        };
        format!(
            "{},{},{},{},{var},{},{},{:.4},{:.4},{df},{:.4},{:.4},{:.4}",
            self.dataset,
            self.method,
            self.core,
            self.extension,
            self.m,
            self.seed,
            self.pooled.qbar,
            self.pooled.se,
            self.pooled.ci95.0,
            self.pooled.ci95.1,
            self.pooled.mc_se,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fit(estimate: f64, variance: f64) -> FitResult {
        FitResult {
            estimate,
            variance,
            n_used: 10,
        }
    }

    #[test]
    fn pool_hand_computed() {
        // estimates {2,3,4}, variances {1,1,1}: qbar 3, W 1, B 1, T 7/3
        let fits = [fit(2.0, 1.0), fit(3.0, 1.0), fit(4.0, 1.0)];
        let p = pool(&fits).unwrap();
        assert_relative_eq!(p.qbar, 3.0, epsilon = 1e-12);
        assert_relative_eq!(p.within_w, 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.between_b, 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.total_t, 7.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(p.se, (7.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert!((p.se - 1.5275).abs() < 1e-4);
        // df = (m-1)(1 + W/((1+1/m)B))^2 = 2 * (1 + 3/4)^2 = 6.125
        assert_relative_eq!(p.df, 6.125, epsilon = 1e-12);
        assert_relative_eq!(p.mc_se, (1.0f64 / 3.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn pool_degenerate_between() {
        let fits = [fit(1.5, 2.0), fit(1.5, 4.0)];
        let p = pool(&fits).unwrap();
        assert_eq!(p.between_b, 0.0);
        assert!(p.df.is_infinite());
        assert_relative_eq!(p.total_t, 3.0);
        assert_eq!(p.mc_se, 0.0);
    }

    #[test]
    fn pool_too_few() {
        assert!(matches!(
            pool(&[fit(1.0, 1.0)]),
            Err(Error::TooFewImputations(1))
        ));
    }

    #[test]
    fn pool_permutation_invariant_exactly() {
        let fits = [
            fit(2.13, 1.01),
            fit(2.71, 0.93),
            fit(1.97, 1.22),
            fit(2.44, 1.07),
            fit(2.05, 0.99),
        ];
        let p1 = pool(&fits).unwrap();
        let mut rev = fits;
        rev.reverse();
        let p2 = pool(&rev).unwrap();
        assert_eq!(p1.qbar.to_bits(), p2.qbar.to_bits());
        assert_eq!(p1.total_t.to_bits(), p2.total_t.to_bits());
        assert_eq!(p1.df.to_bits(), p2.df.to_bits());
        assert_eq!(p1.ci95.0.to_bits(), p2.ci95.0.to_bits());
    }

    #[test]
    fn barnard_rubin_shrinks_df() {
        let fits = [fit(2.0, 1.0), fit(3.0, 1.0), fit(4.0, 1.0)];
        let classic = pool(&fits).unwrap();
        let br = pool_barnard_rubin(&fits, 100.0).unwrap();
        assert!(br.df < classic.df);
    }
}
