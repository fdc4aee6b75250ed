//! Image-quality metrics: PSNR, SSIM, an LPIPS-form feature distance and FID.
//!
//! Phantom intensities live in `[-1, 1]`, so the evaluation code passes
//! [`DATA_RANGE`] as both the PSNR peak and the SSIM dynamic range.

mod features;
mod fid;
mod report;

pub use features::{lpips, FeatureExtractor, FeatureMap, DEFAULT_FEATURE_CHANNELS};
pub use fid::{fid, matrix_sqrt_psd, moments_of, FeatureMoments, DEFAULT_COVARIANCE_EPS};
pub use report::{mean_std, GroupSummary, ImageScore, MetricReport, CSV_HEADER};

use crate::error::{Error, Result};
use crate::frequency::GaussianKernel;
use crate::image::Image;

/// Peak-to-peak range of normalized phantom intensities.
pub const DATA_RANGE: f64 = 2.0;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Side and sigma of the Gaussian window used by [`ssim_windowed`].
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_WINDOW_SIGMA: f64 = 1.5;

/// Peak signal-to-noise ratio `10·log10(max² / MSE)` in dB.
///
/// Identical images give `f64::INFINITY`; callers treat that as a sentinel and
/// leave it out of averages.
pub fn psnr(x: &Image, y: &Image, max_val: f64) -> Result<f64> {
    x.ensure_same_dims(y)?;
    if !(max_val > 0.0 && max_val.is_finite()) {
        return Err(Error::Contract(format!(
            "psnr peak must be positive, got {max_val}"
        )));
    }
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

fn ssim_constants(range: f64) -> Result<(f64, f64)> {
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::Contract(format!(
            "ssim dynamic range must be positive, got {range}"
        )));
    }
    Ok(((SSIM_K1 * range).powi(2), (SSIM_K2 * range).powi(2)))
}

fn ssim_from_moments(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// SSIM from whole-image statistics (population moments).
pub fn ssim(x: &Image, y: &Image, range: f64) -> Result<f64> {
    x.ensure_same_dims(y)?;
    let (c1, c2) = ssim_constants(range)?;
    let n = x.len() as f64;
    let mx = x.mean();
    let my = y.mean();
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.data().iter().zip(y.data()) {
        let (dx, dy) = (a - mx, b - my);
        vx += dx * dx;
        vy += dy * dy;
        cxy += dx * dy;
    }
    Ok(ssim_from_moments(mx, my, vx / n, vy / n, cxy / n, c1, c2))
}

/// Mean SSIM over every fully contained 11×11 Gaussian window (stride 1).
pub fn ssim_windowed(x: &Image, y: &Image, range: f64) -> Result<f64> {
    x.ensure_same_dims(y)?;
    let (c1, c2) = ssim_constants(range)?;
    let (h, w) = x.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "windowed ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let kernel = GaussianKernel::new(SSIM_WINDOW, SSIM_WINDOW_SIGMA)?;
    let k = kernel.weights();
    let (xd, yd) = (x.data(), y.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - SSIM_WINDOW {
        for j in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for m in 0..SSIM_WINDOW {
                for n in 0..SSIM_WINDOW {
                    let wgt = k[m * SSIM_WINDOW + n];
                    let idx = (i + m) * w + j + n;
                    let (a, b) = (xd[idx], yd[idx]);
                    mx += wgt * a;
                    my += wgt * b;
                    sxx += wgt * a * a;
                    syy += wgt * b * b;
                    sxy += wgt * a * b;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            total += ssim_from_moments(mx, my, vx, vy, cxy, c1, c2);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
        let data = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn psnr_of_constant_offset_is_twenty_db() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(16, 16, &mut rng);
        let y = x.map(|v| v + 0.1);
        let db = psnr(&x, &y, 1.0).unwrap();
        assert!((db - 20.0).abs() < 1e-9, "{db}");
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let x = Image::filled(4, 4, 0.3);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_matches_two_pass_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_image(9, 7, &mut rng);
        let y = random_image(9, 7, &mut rng);
        let diff: Vec<f64> = x.data().iter().zip(y.data()).map(|(a, b)| a - b).collect();
        let mse = diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
        let expected = 20.0 * 2.0f64.log10() - 10.0 * mse.log10();
        assert!((psnr(&x, &y, 2.0).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn psnr_falls_as_noise_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(16, 16, &mut rng);
        let noise = random_image(16, 16, &mut rng);
        let scores: Vec<f64> = [0.01, 0.05, 0.1, 0.2, 0.4]
            .iter()
            .map(|&a| {
                let y = x.zip_map(&noise, |v, n| v + a * n).unwrap();
                psnr(&x, &y, 2.0).unwrap()
            })
            .collect();
        assert!(scores.windows(2).all(|p| p[1] < p[0]), "{scores:?}");
    }

    #[test]
    fn psnr_rejects_bad_arguments() {
        let x = Image::zeros(3, 3);
        assert!(matches!(
            psnr(&x, &Image::zeros(3, 4), 1.0),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(psnr(&x, &x, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn ssim_of_identical_images_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x = random_image(12, 10, &mut rng).map(|v| 3.0 * v + 0.7);
            assert_eq!(ssim(&x, &x, 2.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn ssim_of_opposite_constants() {
        let x = Image::filled(8, 8, 0.5);
        let y = Image::filled(8, 8, -0.5);
        let c1 = (0.01f64 * 2.0).powi(2);
        let expected = (-0.5 + c1) / (0.5 + c1);
        let got = ssim(&x, &y, 2.0).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got + 0.9984).abs() < 1e-4);
    }

    #[test]
    fn ssim_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_image(10, 10, &mut rng);
        let y = random_image(10, 10, &mut rng);
        let n = 100.0;
        let mx = x.data().iter().sum::<f64>() / n;
        let my = y.data().iter().sum::<f64>() / n;
        let vx = x.data().iter().map(|a| a * a).sum::<f64>() / n - mx * mx;
        let vy = y.data().iter().map(|b| b * b).sum::<f64>() / n - my * my;
        let cxy = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n
            - mx * my;
        let (c1, c2) = (0.0004, 0.0036);
        let expected =
            (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        assert!((ssim(&x, &y, 2.0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_invariant_to_joint_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_image(10, 10, &mut rng);
        let y = x
            .zip_map(&random_image(10, 10, &mut rng), |a, b| a + 0.3 * b)
            .unwrap();
        let base = ssim(&x, &y, 2.0).unwrap();
        for a in [0.1, 3.0, 250.0] {
            let scaled = ssim(&x.map(|v| a * v), &y.map(|v| a * v), 2.0 * a).unwrap();
            assert!((scaled - base).abs() < 1e-10, "{a}: {scaled} vs {base}");
        }
    }

    #[test]
    fn ssim_rejects_degenerate_range() {
        let x = Image::zeros(3, 3);
        assert!(matches!(ssim(&x, &x, 0.0), Err(Error::Contract(_))));
        assert!(matches!(ssim(&x, &x, f64::NAN), Err(Error::Contract(_))));
    }

    #[test]
    fn windowed_ssim_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_image(16, 16, &mut rng);
        assert!((ssim_windowed(&x, &x, 2.0).unwrap() - 1.0).abs() < 1e-12);
        let y = x
            .zip_map(&random_image(16, 16, &mut rng), |a, b| a + 0.5 * b)
            .unwrap();
        let s = ssim_windowed(&x, &y, 2.0).unwrap();
        assert!(s < 1.0 && s > -1.0);
        // An 11×11 image has a single window whose weights are the kernel itself.
        let xs = random_image(11, 11, &mut rng);
        let ys = random_image(11, 11, &mut rng);
        let k = GaussianKernel::new(11, 1.5).unwrap();
        let wsum = |f: &dyn Fn(usize) -> f64| (0..121).map(|i| k.weights()[i] * f(i)).sum::<f64>();
        let (a, b) = (xs.data(), ys.data());
        let mx = wsum(&|i| a[i]);
        let my = wsum(&|i| b[i]);
        let vx = wsum(&|i| (a[i] - mx).powi(2));
        let vy = wsum(&|i| (b[i] - my).powi(2));
        let cxy = wsum(&|i| (a[i] - mx) * (b[i] - my));
        let expected = ssim_from_moments(mx, my, vx, vy, cxy, 0.0004, 0.0036);
        assert!((ssim_windowed(&xs, &ys, 2.0).unwrap() - expected).abs() < 1e-12);
        assert!(matches!(
            ssim_windowed(&Image::zeros(8, 20), &Image::zeros(8, 20), 2.0),
            Err(Error::Dimension(_))
        ));
    }
}
