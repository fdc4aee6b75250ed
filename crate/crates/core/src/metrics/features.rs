use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::Image;

/// Output channels of the default three-layer extractor.
pub const DEFAULT_FEATURE_CHANNELS: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    in_channels: usize,
    out_channels: usize,
    /// `[out, in, 3, 3]`
    kernel: Vec<f64>,
    bias: Vec<f64>,
}

/// Channel-major activations of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Fixed random convolutional feature extractor.
///
/// Each layer is a 3×3 zero-padded convolution, ReLU, then 2×2 average
/// pooling, so layer `l` has spatial size `(H >> (l+1), W >> (l+1))`. The
/// weights are drawn once from the seed and never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    layers: Vec<Layer>,
    layer_weights: Vec<f64>,
    seed: u64,
}

impl FeatureExtractor {
    pub fn new(channels: &[usize], seed: u64) -> Result<Self> {
        if channels.is_empty() || channels.contains(&0) {
            return Err(Error::Config(format!(
                "invalid feature channels {channels:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(channels.len());
        let mut in_channels = 1;
        for &out_channels in channels {
            let std = (2.0 / (9 * in_channels) as f64).sqrt();
            let kernel = (0..out_channels * in_channels * 9)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    std * z
                })
                .collect();
            let bias = (0..out_channels)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    0.1 * z
                })
                .collect();
            layers.push(Layer {
                in_channels,
                out_channels,
                kernel,
                bias,
            });
            in_channels = out_channels;
        }
        Ok(Self {
            layer_weights: vec![1.0; layers.len()],
            layers,
            seed,
        })
    }

    pub fn with_default_channels(seed: u64) -> Self {
        Self::new(&DEFAULT_FEATURE_CHANNELS, seed).expect("default channels are valid")
    }

    /// Replace the per-layer weights `w_l` used by [`lpips`].
    pub fn with_layer_weights(mut self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "{} layer weights for {} layers",
                weights.len(),
                self.layers.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "layer weights must be non-negative, got {weights:?}"
            )));
        }
        self.layer_weights = weights.to_vec();
        Ok(self)
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_weights(&self) -> &[f64] {
        &self.layer_weights
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Length of [`FeatureExtractor::embedding`].
    pub fn embedding_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn accepts(&self, height: usize, width: usize) -> bool {
        let n = self.layers.len();
        n < usize::BITS as usize && (height >> n) > 0 && (width >> n) > 0
    }

    /// Activations after every layer.
    pub fn features(&self, image: &Image) -> Result<Vec<FeatureMap>> {
        let (h, w) = image.dims();
        if !self.accepts(h, w) {
            return Err(Error::Dimension(format!(
                "{h}×{w} image is too small for a {}-layer extractor",
                self.layers.len()
            )));
        }
        let mut current = FeatureMap {
            channels: 1,
            height: h,
            width: w,
            data: image.data().to_vec(),
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            current = pool2(&relu_conv3(layer, &current));
            out.push(current.clone());
        }
        Ok(out)
    }

    /// Final-layer activations averaged over space; the FID feature vector.
    pub fn embedding(&self, image: &Image) -> Result<Vec<f64>> {
        let last = self.features(image)?.pop().expect("at least one layer");
        let n = (last.height * last.width) as f64;
        Ok((0..last.channels)
            .map(|c| last.channel(c).iter().sum::<f64>() / n)
            .collect())
    }
}

fn relu_conv3(layer: &Layer, x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height, x.width);
    let mut data = vec![0.0; layer.out_channels * h * w];
    for o in 0..layer.out_channels {
        let out = &mut data[o * h * w..(o + 1) * h * w];
        out.iter_mut().for_each(|v| *v = layer.bias[o]);
        for c in 0..layer.in_channels {
            let src = x.channel(c);
            let k = &layer.kernel[(o * layer.in_channels + c) * 9..][..9];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for di in 0..3 {
                        let si = i as isize + di as isize - 1;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for dj in 0..3 {
                            let sj = j as isize + dj as isize - 1;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            acc += k[di * 3 + dj] * src[si as usize * w + sj as usize];
                        }
                    }
                    out[i * w + j] += acc;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    FeatureMap {
        channels: layer.out_channels,
        height: h,
        width: w,
        data,
    }
}

/// 2×2 mean pooling; a trailing odd row or column is dropped.
fn pool2(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut data = Vec::with_capacity(x.channels * h * w);
    for c in 0..x.channels {
        let src = x.channel(c);
        for i in 0..h {
            for j in 0..w {
                let at = |a: usize, b: usize| src[(2 * i + a) * x.width + 2 * j + b];
                data.push(0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)));
            }
        }
    }
    FeatureMap {
        channels: x.channels,
        height: h,
        width: w,
        data,
    }
}

/// LPIPS-form distance `Σ_l w_l / (H_l W_l) · Σ_{h,w} ‖φ_l(x) − φ_l(y)‖²`,
/// the norm taken over channels.
pub fn lpips(x: &Image, y: &Image, extractor: &FeatureExtractor) -> Result<f64> {
    x.ensure_same_dims(y)?;
    let fx = extractor.features(x)?;
    let fy = extractor.features(y)?;
    Ok(fx
        .iter()
        .zip(&fy)
        .zip(extractor.layer_weights())
        .map(|((a, b), wl)| {
            let sq: f64 = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            wl * sq / (a.height * a.width) as f64
        })
        .sum())
}
