//! Synthetic, perfectly registered multi-contrast phantoms.
//!
//! Each sample is a label image (background, two tissues, and in about half
//! the samples an elliptical lesion with a rim) rendered through a fixed
//! per-modality contrast table, then blurred, noised and clamped to `[-1, 1]`.
//! Blur widths decrease from the T1 analog to the T1ce analog, so the low- to
//! high-frequency ordering of the channels follows the canonical modality
//! order.

mod container;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::frequency::{glpf, GaussianKernel};
use crate::image::Image;

pub use container::{read_dataset, write_dataset, Dataset, DatasetManifest, DATASET_VERSION};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_TISSUE_A: u8 = 1;
pub const LABEL_TISSUE_B: u8 = 2;
pub const LABEL_LESION: u8 = 3;
pub const LABEL_RIM: u8 = 4;
pub const LABEL_COUNT: usize = 5;

/// Intensity per label (background, tissue A, tissue B, lesion, rim) for each
/// modality in canonical order.
pub const CONTRAST_TABLE: [[f64; LABEL_COUNT]; 4] = [
    [-1.0, 0.15, 0.60, -0.30, -0.10],
    [-1.0, 0.55, -0.25, 0.80, 0.70],
    [-1.0, 0.10, 0.20, 0.95, 0.85],
    [-1.0, -0.30, 0.10, -0.20, 1.00],
];

/// Per-modality blur width in pixels at a 32-pixel image size.
pub const SMOOTHING_SIGMA: [f64; 4] = [1.6, 1.0, 0.7, 0.35];

pub const NOISE_SIGMA: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    /// One image per modality, canonical order.
    pub modalities: Vec<Image>,
    pub tissue_map: Vec<u8>,
    pub seed: u64,
}

impl PhantomSample {
    pub fn dims(&self) -> (usize, usize) {
        self.modalities[0].dims()
    }

    pub fn has_lesion(&self) -> bool {
        self.tissue_map.contains(&LABEL_LESION)
    }
}

/// One step of the splitmix64 generator.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent per-sample seeds derived from a master seed.
pub fn sample_seeds(master: u64, count: usize) -> Vec<u64> {
    let mut state = master;
    (0..count).map(|_| splitmix64(&mut state)).collect()
}

/// Render a label image through the contrast table, without blur or noise.
pub fn apply_contrast(
    tissue_map: &[u8],
    height: usize,
    width: usize,
    modality: usize,
) -> Result<Image> {
    let row = CONTRAST_TABLE
        .get(modality)
        .ok_or_else(|| Error::Contract(format!("no contrast row for modality {modality}")))?;
    let data = tissue_map
        .iter()
        .map(|&l| {
            row.get(l as usize)
                .copied()
                .ok_or_else(|| Error::Contract(format!("unknown tissue label {l}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    Image::new(height, width, data)
}

fn tissue_map(size: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let cx = rng.gen_range(-0.08..0.08);
    let cy = rng.gen_range(-0.08..0.08);
    let ax = rng.gen_range(0.65..0.85);
    let ay = rng.gen_range(0.70..0.90);
    let theta: f64 = rng.gen_range(-0.3..0.3);
    let (st, ct) = theta.sin_cos();

    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(3..6))
        .map(|_| {
            let r = rng.gen_range(0.0..0.5);
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let width = rng.gen_range(0.12..0.30);
            let amp = rng.gen_range(0.6..1.2) * if rng.gen_bool(0.8) { 1.0 } else { -0.5 };
            (cx + r * phi.cos(), cy + r * phi.sin(), width, amp)
        })
        .collect();

    let lesion = rng.gen_bool(0.5).then(|| {
        let r = rng.gen_range(0.0..0.4);
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let lx = rng.gen_range(0.15..0.30);
        let ly = rng.gen_range(0.15..0.30);
        let rot: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        (
            cx + r * phi.cos(),
            cy + r * phi.sin(),
            lx,
            ly,
            rot.sin_cos(),
        )
    });

    let mut map = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let y = (i as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let x = (j as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let (dx, dy) = (x - cx, y - cy);
            let (u, v) = (ct * dx + st * dy, -st * dx + ct * dy);
            if (u / ax).powi(2) + (v / ay).powi(2) > 1.0 {
                map.push(LABEL_BACKGROUND);
                continue;
            }
            let mut label = LABEL_TISSUE_A;
            let field: f64 = blobs
                .iter()
                .map(|&(bx, by, w, a)| {
                    a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * w * w)).exp()
                })
                .sum();
            if field > 0.5 {
                label = LABEL_TISSUE_B;
            }
            if let Some((lx0, ly0, rx, ry, (ls, lc))) = lesion {
                let (ddx, ddy) = (x - lx0, y - ly0);
                let (lu, lv) = (lc * ddx + ls * ddy, -ls * ddx + lc * ddy);
                let rho = ((lu / rx).powi(2) + (lv / ry).powi(2)).sqrt();
                if rho <= 0.65 {
                    label = LABEL_LESION;
                } else if rho <= 1.0 {
                    label = LABEL_RIM;
                }
            }
            map.push(label);
        }
    }
    map
}

/// Deterministically generate one `size × size` sample from `seed`.
pub fn generate_sample(seed: u64, size: usize) -> Result<PhantomSample> {
    if size < 4 {
        return Err(Error::Config(format!(
            "phantom size must be at least 4, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = tissue_map(size, &mut rng);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let scale = size as f64 / 32.0;
    let modalities = (0..CONTRAST_TABLE.len())
        .map(|m| {
            let clean = apply_contrast(&labels, size, size, m)?;
            let sigma = SMOOTHING_SIGMA[m] * scale;
            let ksize = 2 * (3.0 * sigma).ceil() as usize + 1;
            let blurred = glpf(&clean, &GaussianKernel::new(ksize, sigma)?);
            let mut out = blurred;
            for v in out.data_mut() {
                let noisy = (*v + noise.sample(&mut rng)).clamp(-1.0, 1.0);
                // Stored values are exactly representable in the 32-bit container.
                *v = noisy as f32 as f64;
            }
            Ok(out)
        })
        .collect::<Result<Vec<Image>>>()?;
    Ok(PhantomSample {
        modalities,
        tissue_map: labels,
        seed,
    })
}

/// `count` samples whose seeds are derived from `seed`.
pub fn generate_dataset(count: usize, size: usize, seed: u64) -> Result<Dataset> {
    let samples = sample_seeds(seed, count)
        .into_iter()
        .map(|s| generate_sample(s, size))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(samples, seed))
}

/// Affine map of `[lo, hi]` onto `[-1, 1]`, clamped.
pub fn normalize_intensity(image: &Image, lo: f64, hi: f64) -> Result<Image> {
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Contract(format!(
            "degenerate intensity range [{lo}, {hi}]"
        )));
    }
    Ok(image.map(|v| (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)))
}
