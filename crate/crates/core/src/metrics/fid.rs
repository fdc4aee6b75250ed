use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Ridge added to sample covariances.
pub const DEFAULT_COVARIANCE_EPS: f64 = 1e-6;

const SYMMETRY_TOL: f64 = 1e-10;
const EIGEN_FLOOR: f64 = -1e-8;

/// Gaussian fit of a feature distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureMoments {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension(format!(
                "covariance {}×{} for a {}-vector mean",
                cov.nrows(),
                cov.ncols(),
                mean.len()
            )));
        }
        check_symmetric(&cov)?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Contract(format!(
            "{}×{} matrix is not square",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::Contract(format!(
            "matrix is not symmetric (max |M - Mᵀ| = {asym:e})"
        )));
    }
    Ok(())
}

/// Symmetric square root of a symmetric positive semi-definite matrix.
///
/// Eigenvalues down to `-1e-8` (relative to the largest entry) are treated as
/// rounding noise and clamped to zero.
pub fn matrix_sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(m)?;
    let sym = (m + m.transpose()) * 0.5;
    let scale = sym.amax().max(1.0);
    let eig = SymmetricEigen::new(sym);
    if let Some(low) = eig
        .eigenvalues
        .iter()
        .copied()
        .find(|&l| l < EIGEN_FLOOR * scale)
    {
        return Err(Error::Contract(format!(
            "matrix is not positive semi-definite (eigenvalue {low:e})"
        )));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let r = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok((&r + r.transpose()) * 0.5)
}

/// Fréchet distance between two Gaussians,
/// `‖μp − μq‖² + Tr(Σp + Σq − 2·(Σp^½ Σq Σp^½)^½)`, clamped at zero.
pub fn fid(p: &FeatureMoments, q: &FeatureMoments) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::Contract(format!(
            "fid between {}- and {}-dim moments",
            p.dim(),
            q.dim()
        )));
    }
    let mean_term = (&p.mean - &q.mean).norm_squared();
    let sp = matrix_sqrt_psd(&p.cov)?;
    let inner = &sp * &q.cov * &sp;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = matrix_sqrt_psd(&inner)?.trace();
    let value = mean_term + p.cov.trace() + q.cov.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite fid".into()));
    }
    Ok(value.max(0.0))
}

/// Sample mean and unbiased covariance plus `eps·I`.
pub fn moments_of(features: &[Vec<f64>], eps: f64) -> Result<FeatureMoments> {
    if features.len() < 2 {
        return Err(Error::Contract(format!(
            "moments need at least 2 vectors, got {}",
            features.len()
        )));
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(Error::Dimension(format!(
            "feature of length {} among length {d}",
            bad.len()
        )));
    }
    let n = features.len() as f64;
    let mut mean = DVector::zeros(d);
    for f in features {
        mean += DVector::from_column_slice(f);
    }
    mean /= n;
    let mut centered = DMatrix::zeros(d, features.len());
    for (k, f) in features.iter().enumerate() {
        centered.set_column(k, &(DVector::from_column_slice(f) - &mean));
    }
    let mut cov = &centered * centered.transpose() / (n - 1.0);
    cov = (&cov + cov.transpose()) * 0.5;
    for i in 0..d {
        cov[(i, i)] += eps;
    }
    FeatureMoments::new(mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_psd(d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        &a * a.transpose()
    }

    fn moments(mean: &[f64], cov: DMatrix<f64>) -> FeatureMoments {
        FeatureMoments::new(DVector::from_column_slice(mean), cov).unwrap()
    }

    #[test]
    fn sqrt_of_simple_matrices() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_psd(&id).unwrap() - &id).amax() < 1e-15);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let r = matrix_sqrt_psd(&d).unwrap();
        assert!((r - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).amax() < 1e-14);
    }

    #[test]
    fn sqrt_reconstructs_random_psd() {
        for seed in 0..10 {
            let m = random_psd(8, seed);
            let r = matrix_sqrt_psd(&m).unwrap();
            let rel = (&r * &r - &m).norm() / m.norm();
            assert!(rel <= 1e-8, "seed {seed}: {rel:e}");
            assert!((&r - r.transpose()).amax() == 0.0);
        }
    }

    #[test]
    fn sqrt_clamps_rounding_noise_and_rejects_indefinite() {
        let mut m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-12]));
        assert_eq!(matrix_sqrt_psd(&m).unwrap()[(1, 1)], 0.0);
        m[(1, 1)] = -0.5;
        assert!(matches!(matrix_sqrt_psd(&m), Err(Error::Contract(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(matrix_sqrt_psd(&asym), Err(Error::Contract(_))));
    }

    #[test]
    fn fid_closed_forms() {
        let p = moments(&[0.0], DMatrix::from_element(1, 1, 1.0));
        let q = moments(&[0.0], DMatrix::from_element(1, 1, 4.0));
        assert!((fid(&p, &q).unwrap() - 1.0).abs() < 1e-8);
        for d in [1, 2, 5, 16] {
            let p = moments(&vec![0.0; d], DMatrix::identity(d, d));
            let q = moments(&vec![1.0; d], DMatrix::identity(d, d));
            assert!((fid(&p, &q).unwrap() - d as f64).abs() < 1e-8);
        }
    }

    #[test]
    fn fid_is_symmetric_and_zero_on_the_diagonal() {
        for seed in 0..5 {
            let p = moments(&[0.1, -0.2, 0.3, 0.0, 1.0, 2.0], random_psd(6, seed));
            let q = moments(&[1.0, 0.0, -1.0, 0.5, 0.5, 0.5], random_psd(6, seed + 100));
            let (a, b) = (fid(&p, &q).unwrap(), fid(&q, &p).unwrap());
            assert!((a - b).abs() < 1e-8 * a.max(1.0), "{a} vs {b}");
            assert!(fid(&p, &p).unwrap() < 1e-8);
        }
        let p = moments(&[0.0], DMatrix::identity(1, 1));
        let q = moments(&[0.0, 0.0], DMatrix::identity(2, 2));
        assert!(matches!(fid(&p, &q), Err(Error::Contract(_))));
    }

    #[test]
    fn moments_of_small_sets() {
        let m = moments_of(&[vec![1.0, 2.0], vec![1.0, 2.0]], 1e-6).unwrap();
        assert_eq!(m.mean.as_slice(), &[1.0, 2.0]);
        assert_eq!(m.cov, DMatrix::identity(2, 2) * 1e-6);
        let m = moments_of(&[vec![1.0, 0.0], vec![0.0, 1.0]], 0.0).unwrap();
        assert_eq!(m.mean.as_slice(), &[0.5, 0.5]);
        // Deviations are ±(0.5, -0.5); unbiased with n = 2 divides by 1.
        assert_eq!(
            m.cov,
            DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5])
        );
        assert!(matches!(
            moments_of(&[vec![1.0]], 0.0),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            moments_of(&[vec![1.0], vec![1.0, 2.0]], 0.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn moments_of_gaussian_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mu = [1.0, -2.0, 0.5];
        let sd = [1.0, 2.0, 0.5];
        let draws: Vec<Vec<f64>> = (0..100_000)
            .map(|_| {
                (0..3)
                    .map(|k| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mu[k] + sd[k] * z
                    })
                    .collect()
            })
            .collect();
        let m = moments_of(&draws, DEFAULT_COVARIANCE_EPS).unwrap();
        for k in 0..3 {
            assert!((m.mean[k] - mu[k]).abs() <= 0.02 * mu[k].abs(), "mean {k}");
            let var = sd[k] * sd[k];
            assert!((m.cov[(k, k)] - var).abs() <= 0.02 * var, "var {k}");
        }
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(m.cov[(i, j)].abs() < 0.02 * sd[i] * sd[j]);
                }
            }
        }
    }
}
