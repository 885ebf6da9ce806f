//! Dense linear-algebra helpers shared by the sampler.
//!
//! Everything goes through Cholesky factorizations; explicit inverses are
//! reserved for the independent oracles in [`crate::verify`].

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Cholesky-factor a symmetric matrix, naming the call site on failure.
pub fn cholesky(m: &DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or(Error::NonPositiveDefinite(what))
}

/// Vector of iid standard normals.
pub fn std_normal_vector<R: Rng>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Draw from N(mean, A^-1) given the Cholesky factorization of the precision
/// matrix A = C C^T: beta = mean + C^-T z.
pub fn sample_normal_from_precision<R: Rng>(
    mean: &DVector<f64>,
    precision_chol: &Cholesky<f64, Dyn>,
    rng: &mut R,
) -> DVector<f64> {
    let z = std_normal_vector(mean.len(), rng);
    let l_t = precision_chol.l().transpose();
    let shift = l_t
        .solve_upper_triangular(&z)
        .expect("Cholesky factor has nonzero diagonal");
    mean + shift
}

/// Draw from N(mean, cov) via the covariance Cholesky factor.
pub fn sample_normal_from_covariance<R: Rng>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
    what: &'static str,
) -> Result<DVector<f64>> {
    let chol = cholesky(cov, what)?;
    let z = std_normal_vector(mean.len(), rng);
    Ok(mean + chol.l() * z)
}

/// Draw Sigma ~ InverseWishart(df, scale) by the Bartlett decomposition.
///
/// With scale = L L^T and A the Bartlett factor of Wishart(df, I), the draw
/// is Sigma = (L A^-T)(L A^-T)^T, which avoids forming any explicit inverse.
pub fn sample_inverse_wishart<R: Rng>(
    df: f64,
    scale: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let j = scale.nrows();
    assert!(df > (j as f64) - 1.0, "inverse-Wishart df too small");
    let scale_chol = cholesky(scale, "inverse-Wishart scale")?;

    let mut bartlett = DMatrix::<f64>::zeros(j, j);
    for r in 0..j {
        let chi = ChiSquared::new(df - r as f64).expect("positive dof");
        bartlett[(r, r)] = chi.sample(rng).max(1e-300).sqrt();
        for c in 0..r {
            bartlett[(r, c)] = StandardNormal.sample(rng);
        }
    }

    // G^T = A^-1 L^T  =>  G = L A^-T, Sigma = G G^T
    let l_t = scale_chol.l().transpose();
    let g_t = bartlett
        .solve_lower_triangular(&l_t)
        .ok_or(Error::NonPositiveDefinite("Bartlett factor"))?;
    Ok(g_t.transpose() * g_t)
}

/// Symmetrize in place; counters drift from accumulated outer products.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for r in 0..n {
        for c in 0..r {
            let avg = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = avg;
            m[(c, r)] = avg;
        }
    }
}
