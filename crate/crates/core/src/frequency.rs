//! Gaussian low/high-pass filtering and the choice of which available
//! modality supplies each guidance band.
//!
//! Low-frequency guidance comes from the first available modality scanning
//! `T1, T2, FLAIR, T1ce` left to right; high-frequency guidance from the first
//! available one scanning right to left.

use std::str::FromStr;

use crate::conditioning::AvailabilityMask;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::reflect_index;
use crate::phantoms::PhantomSample;

/// Default kernel side length.
pub const DEFAULT_KERNEL_SIZE: usize = 21;

/// Truncated, unit-sum 2-D Gaussian on a centered integer grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    size: usize,
    sigma: f64,
    weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn new(size: usize, sigma: f64) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd and positive, got {size}"
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!(
                "kernel sigma must be positive, got {sigma}"
            )));
        }
        let r = (size / 2) as isize;
        let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
        let mut weights = Vec::with_capacity(size * size);
        for i in -r..=r {
            for j in -r..=r {
                let d2 = (i * i + j * j) as f64;
                weights.push(norm * (-0.5 * d2 / (sigma * sigma)).exp());
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self {
            size,
            sigma,
            weights,
        })
    }

    /// Kernel with `sigma = size / 6`, so the support spans ±3σ.
    pub fn with_default_sigma(size: usize) -> Result<Self> {
        Self::new(size, default_sigma(size))
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at offset `(di, dj)` from the center.
    pub fn at(&self, di: isize, dj: isize) -> f64 {
        let r = self.radius() as isize;
        self.weights[((di + r) * self.size as isize + dj + r) as usize]
    }
}

pub fn default_sigma(size: usize) -> f64 {
    size as f64 / 6.0
}

/// How the high-pass image is formed from the low-pass one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HighPassMode {
    /// `1 − lowpass(x)`.
    AsWritten,
    /// `x − lowpass(x)`.
    Residual,
}

impl HighPassMode {
    pub fn name(self) -> &'static str {
        match self {
            HighPassMode::AsWritten => "as-written",
            HighPassMode::Residual => "residual",
        }
    }
}

impl FromStr for HighPassMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-written" => Ok(HighPassMode::AsWritten),
            "residual" => Ok(HighPassMode::Residual),
            _ => Err(Error::Config(format!(
                "unknown high-pass mode {s:?} (as-written, residual)"
            ))),
        }
    }
}

/// Gaussian low-pass with reflect borders:
/// `LF[i,j] = Σ_{m,n} κ[m,n] · x[i+m, j+n]`.
pub fn glpf(image: &Image, kernel: &GaussianKernel) -> Image {
    let (h, w) = image.dims();
    let r = kernel.radius() as isize;
    let data = image.data();
    // Row/column lookups are shared by every output pixel.
    let rows: Vec<Vec<usize>> = (0..h)
        .map(|i| (-r..=r).map(|m| reflect_index(i as isize + m, h)).collect())
        .collect();
    let cols: Vec<Vec<usize>> = (0..w)
        .map(|j| (-r..=r).map(|n| reflect_index(j as isize + n, w)).collect())
        .collect();
    let size = kernel.size();
    let weights = kernel.weights();
    Image::from_fn(h, w, |i, j| {
        let mut acc = 0.0;
        for (m, &si) in rows[i].iter().enumerate() {
            let krow = &weights[m * size..(m + 1) * size];
            let src = &data[si * w..(si + 1) * w];
            for (kw, &sj) in krow.iter().zip(&cols[j]) {
                acc += kw * src[sj];
            }
        }
        acc
    })
}

/// Gaussian high-pass in the requested form.
pub fn ghpf(image: &Image, kernel: &GaussianKernel, mode: HighPassMode) -> Image {
    let low = glpf(image, kernel);
    match mode {
        HighPassMode::AsWritten => low.map(|v| 1.0 - v),
        HighPassMode::Residual => image
            .zip_map(&low, |x, l| x - l)
            .expect("low-pass preserves dimensions"),
    }
}

/// First available modality scanning left to right.
pub fn select_lf_source(mask: AvailabilityMask) -> Result<usize> {
    mask.available()
        .next()
        .ok_or_else(|| Error::Contract(format!("mask {mask} has no available modality")))
}

/// First available modality scanning right to left.
pub fn select_hf_source(mask: AvailabilityMask) -> Result<usize> {
    mask.available()
        .last()
        .ok_or_else(|| Error::Contract(format!("mask {mask} has no available modality")))
}

/// Whether each band gets its own scan direction or both follow the
/// left-to-right scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SourceSelection {
    Dynamic,
    Fixed,
}

impl SourceSelection {
    pub fn sources(self, mask: AvailabilityMask) -> Result<(usize, usize)> {
        let lf = select_lf_source(mask)?;
        let hf = match self {
            SourceSelection::Dynamic => select_hf_source(mask)?,
            SourceSelection::Fixed => lf,
        };
        Ok((lf, hf))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidancePair {
    pub lf_image: Image,
    pub hf_image: Image,
    pub lf_source: usize,
    pub hf_source: usize,
}

/// Low-pass of the left-to-right source and high-pass of the right-to-left
/// source, computed from the mask-multiplied modalities.
pub fn build_guidance(
    sample: &PhantomSample,
    mask: AvailabilityMask,
    kernel: &GaussianKernel,
    mode: HighPassMode,
    selection: SourceSelection,
) -> Result<GuidancePair> {
    let (lf_source, hf_source) = selection.sources(mask)?;
    let masked: Vec<Image> = (0..mask.len())
        .map(|m| {
            let keep = if mask.is_available(m) { 1.0 } else { 0.0 };
            sample.modalities[m].map(|v| keep * v)
        })
        .collect();
    Ok(GuidancePair {
        lf_image: glpf(&masked[lf_source], kernel),
        hf_image: ghpf(&masked[hf_source], kernel, mode),
        lf_source,
        hf_source,
    })
}

/// Both bands of every modality of one sample, computed once and reused for
/// every mask drawn during training or evaluation.
#[derive(Clone, Debug)]
pub struct GuidanceBank {
    low: Vec<Image>,
    high: Vec<Image>,
}

impl GuidanceBank {
    pub fn new(sample: &PhantomSample, kernel: &GaussianKernel, mode: HighPassMode) -> Self {
        let low: Vec<Image> = sample.modalities.iter().map(|m| glpf(m, kernel)).collect();
        let high = match mode {
            HighPassMode::AsWritten => low.iter().map(|l| l.map(|v| 1.0 - v)).collect(),
            HighPassMode::Residual => sample
                .modalities
                .iter()
                .zip(&low)
                .map(|(m, l)| m.zip_map(l, |x, y| x - y).expect("same dims"))
                .collect(),
        };
        Self { low, high }
    }

    pub fn pair(&self, mask: AvailabilityMask, selection: SourceSelection) -> Result<GuidancePair> {
        let (lf_source, hf_source) = selection.sources(mask)?;
        Ok(GuidancePair {
            lf_image: self.low[lf_source].clone(),
            hf_image: self.high[hf_source].clone(),
            lf_source,
            hf_source,
        })
    }
}

/// Filter settings shared by training and sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyConfig {
    pub kernel: GaussianKernel,
    pub high_pass: HighPassMode,
    pub selection: SourceSelection,
}

impl Default for FrequencyConfig {
    fn default() -> Self {
        Self {
            kernel: GaussianKernel::with_default_sigma(DEFAULT_KERNEL_SIZE)
                .expect("default kernel is valid"),
            high_pass: HighPassMode::Residual,
            selection: SourceSelection::Dynamic,
        }
    }
}
