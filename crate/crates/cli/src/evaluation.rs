//! Synthesis over task lists, scoring, and the small statistics the reports need.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use freqdiff::conditioning::{AvailabilityMask, MODALITIES};
use freqdiff::denoiser::DenoiserParams;
use freqdiff::image::Image;
use freqdiff::metrics::{
    fid, lpips, moments_of, psnr, ssim, ssim_windowed, FeatureExtractor, ImageScore, MetricReport,
    DATA_RANGE, DEFAULT_COVARIANCE_EPS,
};
use freqdiff::phantoms::{splitmix64, PhantomSample};
use freqdiff::trainer::{synthesize_batch, Pipeline, SynthesisRequest};
use freqdiff::{Error, Result};

use crate::config::SsimMode;

/// One synthesis job: test-sample index and availability mask.
pub type Task = (usize, AvailabilityMask);

/// Every sample under every mask, mask-major.
pub fn crossed_tasks(samples: usize, masks: &[AvailabilityMask]) -> Vec<Task> {
    masks
        .iter()
        .flat_map(|&m| (0..samples).map(move |i| (i, m)))
        .collect()
}

/// Each sample once, masks assigned round-robin.
pub fn cycled_tasks(samples: usize, masks: &[AvailabilityMask]) -> Vec<Task> {
    (0..samples).map(|i| (i, masks[i % masks.len()])).collect()
}

/// Noise seed of one task; depends only on the base seed, the sample and the mask.
pub fn request_seed(base: u64, sample: usize, mask: AvailabilityMask) -> u64 {
    let mut state = base ^ ((sample as u64) << 8 | u64::from(mask.bits()));
    splitmix64(&mut state)
}

pub fn synthesize_tasks(
    params: &DenoiserParams,
    pipeline: &Pipeline,
    samples: &[PhantomSample],
    tasks: &[Task],
    base_seed: u64,
) -> Result<Vec<Vec<Image>>> {
    let requests = tasks
        .iter()
        .map(|&(i, mask)| {
            let sample = samples.get(i).ok_or_else(|| {
                Error::Input(format!("task refers to sample {i} of {}", samples.len()))
            })?;
            Ok(SynthesisRequest {
                sample,
                mask,
                seed: request_seed(base_seed, i, mask),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    synthesize_batch(params, pipeline, &requests, &mut |_, _| {})
}

#[derive(Clone, Debug)]
pub struct Scorer {
    pub ssim_mode: SsimMode,
    pub extractor: FeatureExtractor,
}

impl Scorer {
    pub fn new(ssim_mode: SsimMode, feature_seed: u64) -> Self {
        Self {
            ssim_mode,
            extractor: FeatureExtractor::with_default_channels(feature_seed),
        }
    }

    pub fn score(&self, output: &Image, reference: &Image) -> Result<(f64, f64, f64)> {
        let p = psnr(output, reference, DATA_RANGE)?;
        let s = match self.ssim_mode {
            SsimMode::Global => ssim(output, reference, DATA_RANGE)?,
            SsimMode::Window => ssim_windowed(output, reference, DATA_RANGE)?,
        };
        let l = lpips(output, reference, &self.extractor)?;
        Ok((p, s, l))
    }

    /// Per-image scores grouped by mask string, plus per-mask FID when a
    /// mask has at least two synthesized images.
    pub fn report(
        &self,
        samples: &[PhantomSample],
        tasks: &[Task],
        outputs: &[Vec<Image>],
    ) -> Result<MetricReport> {
        if tasks.len() != outputs.len() {
            return Err(Error::Contract(format!(
                "{} tasks but {} outputs",
                tasks.len(),
                outputs.len()
            )));
        }
        let mut report = MetricReport::default();
        let mut groups: Vec<(AvailabilityMask, Vec<Vec<f64>>, Vec<Vec<f64>>)> = Vec::new();
        for (&(i, mask), images) in tasks.iter().zip(outputs) {
            let slot = match groups.iter().position(|g| g.0 == mask) {
                Some(k) => k,
                None => {
                    groups.push((mask, Vec::new(), Vec::new()));
                    groups.len() - 1
                }
            };
            for (img, m) in images.iter().zip(mask.missing()) {
                let reference = &samples[i].modalities[m];
                let (p, s, l) = self.score(img, reference)?;
                report.push(ImageScore {
                    group: mask.to_string(),
                    sample: i,
                    modality: MODALITIES[m].to_string(),
                    psnr: p,
                    ssim: s,
                    lpips: l,
                });
                groups[slot].1.push(self.extractor.embedding(reference)?);
                groups[slot].2.push(self.extractor.embedding(img)?);
            }
        }
        for (mask, real, fake) in groups {
            if real.len() >= 2 {
                let value = fid(
                    &moments_of(&real, DEFAULT_COVARIANCE_EPS)?,
                    &moments_of(&fake, DEFAULT_COVARIANCE_EPS)?,
                )?;
                report.set_fid(&mask.to_string(), value);
            }
        }
        Ok(report)
    }
}

/// Mean and one-sided bootstrap bounds of a paired difference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bootstrap {
    pub mean: f64,
    /// 5th percentile of resampled means.
    pub lower: f64,
    /// 95th percentile of resampled means.
    pub upper: f64,
}

/// Percentile bootstrap of the mean of `diffs`.
pub fn bootstrap_mean(diffs: &[f64], resamples: usize, seed: u64) -> Result<Bootstrap> {
    if diffs.is_empty() || resamples == 0 {
        return Err(Error::Contract(
            "bootstrap needs data and at least one resample".into(),
        ));
    }
    let n = diffs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| diffs[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    Ok(Bootstrap {
        mean: diffs.iter().sum::<f64>() / n as f64,
        lower: at(0.05),
        upper: at(0.95),
    })
}

/// Least-squares line `y = slope·x + intercept` and its R².
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract(
            "linear fit needs two or more paired points".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Contract(
            "linear fit needs two distinct x values".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok((slope, intercept, r2))
}

/// 8-bit binary graymap, `[-1, 1]` mapped affinely onto `0..=255`.
pub fn write_pgm(image: &Image, path: &Path) -> Result<()> {
    let (h, w) = image.dims();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        image
            .data()
            .iter()
            .map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8),
    );
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Little-endian grayscale float map (rows stored bottom to top).
pub fn write_pfm(image: &Image, path: &Path) -> Result<()> {
    let (h, w) = image.dims();
    let mut bytes = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for row in image.data().chunks(w).rev() {
        for v in row {
            bytes
                .write_all(&(*v as f32).to_le_bytes())
                .expect("writing to a Vec");
        }
    }
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Inverse of [`write_pfm`] for the grayscale little-endian case.
pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |why: &str| Error::Format {
        path: path.to_path_buf(),
        reason: why.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "Pf" || fields[3] != "-1.0" {
        return Err(bad("not a little-endian grayscale float map"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let body = bytes.get(pos..).ok_or_else(|| bad("truncated body"))?;
    if body.len() != w * h * 4 {
        return Err(bad("body length does not match the header"));
    }
    let rows: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let data: Vec<f64> = rows.chunks(w).rev().flatten().copied().collect();
    Image::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_lists() {
        let masks: Vec<AvailabilityMask> = ["0111", "1000"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(crossed_tasks(3, &masks).len(), 6);
        let cycled = cycled_tasks(3, &masks);
        assert_eq!(
            cycled.iter().map(|t| t.1).collect::<Vec<_>>(),
            vec![masks[0], masks[1], masks[0]]
        );
    }

    #[test]
    fn request_seeds_are_distinct() {
        let masks = AvailabilityMask::synthesis_tasks(4);
        let mut seeds: Vec<u64> = crossed_tasks(50, &masks)
            .iter()
            .map(|&(i, m)| request_seed(7, i, m))
            .collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 50 * 14);
    }

    #[test]
    fn bootstrap_brackets_the_mean() {
        let diffs: Vec<f64> = (0..200)
            .map(|i| 0.5 + ((i * 37) % 11) as f64 / 10.0 - 0.5)
            .collect();
        let b = bootstrap_mean(&diffs, 1000, 1).unwrap();
        assert!(b.lower < b.mean && b.mean < b.upper);
        assert!(b.lower > 0.0);
        assert_eq!(b, bootstrap_mean(&diffs, 1000, 1).unwrap());
        let centered: Vec<f64> = diffs.iter().map(|d| d - b.mean).collect();
        assert!(bootstrap_mean(&centered, 1000, 1).unwrap().lower < 0.0);
        assert!(bootstrap_mean(&[], 10, 0).is_err());
    }

    #[test]
    fn linear_fit_recovers_a_line() {
        let x = [25.0, 50.0, 100.0, 200.0];
        let y: Vec<f64> = x.iter().map(|v| 0.3 * v + 2.0).collect();
        let (s, c, r2) = linear_fit(&x, &y).unwrap();
        assert!((s - 0.3).abs() < 1e-12 && (c - 2.0).abs() < 1e-10 && (r2 - 1.0).abs() < 1e-12);
        let (_, _, r2) = linear_fit(&x, &[1.0, 5.0, 2.0, 4.0]).unwrap();
        assert!(r2 < 0.9);
        assert!(linear_fit(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn image_dumps() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(3, 5, |i, j| (i as f64 - j as f64) / 4.0);
        let pfm = dir.path().join("a.pfm");
        write_pfm(&img, &pfm).unwrap();
        let back = read_pfm(&pfm).unwrap();
        assert_eq!(back.dims(), (3, 5));
        for (a, b) in back.data().iter().zip(img.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let pgm = dir.path().join("a.pgm");
        write_pgm(&Image::new(1, 3, vec![-1.0, 0.0, 1.0]).unwrap(), &pgm).unwrap();
        let bytes = std::fs::read(&pgm).unwrap();
        assert_eq!(&bytes[..], b"P5\n3 1\n255\n\x00\x80\xff");
        std::fs::write(&pfm, b"Pf\n2 2\n-1.0\n1234").unwrap();
        assert!(matches!(read_pfm(&pfm), Err(Error::Format { .. })));
    }
}
