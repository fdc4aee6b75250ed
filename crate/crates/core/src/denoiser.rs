//! Encoder–decoder noise predictor over the conditioning stack.
//!
//! Every 3×3 convolution is followed by batch norm and ReLU. Each encoder
//! level applies two such blocks and then 2×2 max pooling; the bottleneck
//! applies two more, with a sinusoidal timestep embedding projected to the
//! bottleneck width and added after the first. Each decoder level upsamples,
//! applies one block, concatenates the matching encoder output and applies two
//! blocks. A 1×1 convolution with bias produces one channel per modality.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::ConditioningStack;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{BatchNormState, Element, Graph, NormMode, Padding, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DenoiserConfig {
    pub depth: usize,
    pub base_width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub time_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_width: 16,
            in_channels: 5,
            out_channels: 4,
            time_embed_dim: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0
            || self.base_width == 0
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::Config(format!(
                "denoiser sizes must be positive: {self:?}"
            )));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        if self.depth > 8 {
            return Err(Error::Config(format!("depth {} is too large", self.depth)));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// One parameterized layer of the network, in evaluation order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
    },
    Norm {
        name: String,
        channels: usize,
    },
    Linear {
        name: String,
        inputs: usize,
        outputs: usize,
    },
}

impl LayerSpec {
    /// `(name, shape)` of each trainable tensor of the layer.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            LayerSpec::Conv {
                name,
                in_channels,
                out_channels,
                kernel,
                bias,
            } => {
                let mut v = vec![(
                    format!("{name}.weight"),
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                )];
                if *bias {
                    v.push((format!("{name}.bias"), vec![*out_channels]));
                }
                v
            }
            LayerSpec::Norm { name, channels } => vec![
                (format!("{name}.scale"), vec![*channels]),
                (format!("{name}.shift"), vec![*channels]),
            ],
            LayerSpec::Linear {
                name,
                inputs,
                outputs,
            } => vec![
                (format!("{name}.weight"), vec![*outputs, *inputs]),
                (format!("{name}.bias"), vec![*outputs]),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

fn block(plan: &mut Vec<LayerSpec>, name: String, cin: usize, cout: usize) {
    plan.push(LayerSpec::Conv {
        name: name.clone(),
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
        bias: false,
    });
    plan.push(LayerSpec::Norm {
        name: format!("{name}.norm"),
        channels: cout,
    });
}

pub fn layer_plan(config: &DenoiserConfig) -> Vec<LayerSpec> {
    let mut plan = Vec::new();
    let mut cin = config.in_channels;
    for level in 0..config.depth {
        let w = config.width_at(level);
        block(&mut plan, format!("enc{level}.a"), cin, w);
        block(&mut plan, format!("enc{level}.b"), w, w);
        cin = w;
    }
    let wb = config.width_at(config.depth);
    block(&mut plan, "mid.a".into(), cin, wb);
    plan.push(LayerSpec::Linear {
        name: "time".into(),
        inputs: config.time_embed_dim,
        outputs: wb,
    });
    block(&mut plan, "mid.b".into(), wb, wb);
    let mut cin = wb;
    for level in (0..config.depth).rev() {
        let w = config.width_at(level);
        block(&mut plan, format!("dec{level}.up"), cin, w);
        block(&mut plan, format!("dec{level}.a"), 2 * w, w);
        block(&mut plan, format!("dec{level}.b"), w, w);
        cin = w;
    }
    plan.push(LayerSpec::Conv {
        name: "out".into(),
        in_channels: cin,
        out_channels: config.out_channels,
        kernel: 1,
        bias: true,
    });
    plan
}

/// Total number of trainable scalars.
pub fn count_params(config: &DenoiserConfig) -> usize {
    layer_plan(config).iter().map(LayerSpec::param_count).sum()
}

/// Named trainable tensors in layer-plan order plus the running statistics
/// of every norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f32>>,
    pub norms: Vec<BatchNormState<f32>>,
}

impl DenoiserParams {
    /// He-uniform weights, unit norm scales, zero shifts and biases.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut norms = Vec::new();
        for layer in layer_plan(&config) {
            for (name, shape) in layer.tensors() {
                let t = if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
                } else if name.ends_with(".scale") {
                    Tensor::full(&shape, 1.0)
                } else {
                    Tensor::zeros(&shape)
                };
                names.push(name);
                tensors.push(t);
            }
            if let LayerSpec::Norm { channels, .. } = layer {
                norms.push(BatchNormState::new(channels));
            }
        }
        Ok(Self {
            config,
            names,
            tensors,
            norms,
        })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Shapes must match the layer plan of `config`.
    pub fn check_layout(&self) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = layer_plan(&self.config)
            .iter()
            .flat_map(LayerSpec::tensors)
            .collect();
        if expected.len() != self.tensors.len() || expected.len() != self.names.len() {
            return Err(Error::Contract(format!(
                "{} tensors for a plan of {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape), (n, t)) in expected.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::Contract(format!(
                    "tensor {n} {:?} where {name} {shape:?} expected",
                    t.shape()
                )));
            }
        }
        let norms = layer_plan(&self.config)
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Norm { channels, .. } => Some(*channels),
                _ => None,
            })
            .collect::<Vec<_>>();
        if norms
            != self
                .norms
                .iter()
                .map(BatchNormState::channels)
                .collect::<Vec<_>>()
        {
            return Err(Error::Contract(
                "norm state does not match the layer plan".into(),
            ));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of each timestep, `[B, dim]`: the first half holds
/// `sin(t·ω_k)`, the second `cos(t·ω_k)`, with `ω_k = 10000^(−k/(dim/2))`.
pub fn timestep_embedding<T: Element>(timesteps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp());
        let angles: Vec<f64> = freqs.map(|w| t as f64 * w).collect();
        data.extend(angles.iter().map(|a| T::from_f64(a.sin())));
        data.extend(angles.iter().map(|a| T::from_f64(a.cos())));
    }
    Tensor::new(vec![timesteps.len(), dim], data).expect("shape matches data")
}

struct Cursor<'a, T> {
    vars: &'a [Var],
    next: usize,
    norms: &'a mut [BatchNormState<T>],
    next_norm: usize,
    mode: NormMode,
}

impl<T: Element> Cursor<'_, T> {
    fn var(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }

    fn conv_norm_relu(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = self.var();
        let y = g.conv2d(x, w, None, Padding::Zero)?;
        let (scale, shift) = (self.var(), self.var());
        let state = &mut self.norms[self.next_norm];
        self.next_norm += 1;
        let y = g.batchnorm(y, scale, shift, state, self.mode)?;
        Ok(g.relu(y))
    }
}

/// Record the network on `graph`.
///
/// `vars` are the parameter leaves in layer-plan order, `input` is
/// `[B, in_channels, H, W]` and `timesteps` has one entry per batch element.
pub fn trace<T: Element>(
    graph: &mut Graph<T>,
    config: &DenoiserConfig,
    vars: &[Var],
    norms: &mut [BatchNormState<T>],
    input: Var,
    timesteps: &[usize],
    mode: NormMode,
) -> Result<Var> {
    let (b, c, h, w) = graph.value(input).dims4()?;
    let m = config.size_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} input is not divisible by {m} for depth {}",
            config.depth
        )));
    }
    if c != config.in_channels {
        return Err(Error::Dimension(format!(
            "{c} input channels, expected {}",
            config.in_channels
        )));
    }
    if timesteps.len() != b {
        return Err(Error::Dimension(format!(
            "{} timesteps for a batch of {b}",
            timesteps.len()
        )));
    }
    let expected = layer_plan(config)
        .iter()
        .map(|l| l.tensors().len())
        .sum::<usize>();
    if vars.len() != expected {
        return Err(Error::Contract(format!(
            "{} parameter leaves, expected {expected}",
            vars.len()
        )));
    }
    let mut cur = Cursor {
        vars,
        next: 0,
        norms,
        next_norm: 0,
        mode,
    };

    let mut x = input;
    let mut skips = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        x = cur.conv_norm_relu(graph, x)?;
        x = cur.conv_norm_relu(graph, x)?;
        skips.push(x);
        x = graph.maxpool2(x)?;
    }
    x = cur.conv_norm_relu(graph, x)?;
    let emb = graph.constant(timestep_embedding(timesteps, config.time_embed_dim));
    let (tw, tb) = (cur.var(), cur.var());
    let temb = graph.linear(emb, tw, tb)?;
    x = graph.add_channel_bias(x, temb)?;
    x = cur.conv_norm_relu(graph, x)?;
    for skip in skips.into_iter().rev() {
        x = graph.upsample_nearest2(x)?;
        x = cur.conv_norm_relu(graph, x)?;
        x = graph.concat_channels(x, skip)?;
        x = cur.conv_norm_relu(graph, x)?;
        x = cur.conv_norm_relu(graph, x)?;
    }
    let (ow, ob) = (cur.var(), cur.var());
    graph.conv2d(x, ow, Some(ob), Padding::Zero)
}

/// Pack stacks into a `[B, C, H, W]` tensor.
pub fn stack_batch<T: Element>(stacks: &[ConditioningStack]) -> Result<Tensor<T>> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let c = first.channels.len();
    let (h, w) = first.channels[0].dims();
    let mut data = Vec::with_capacity(stacks.len() * c * h * w);
    for s in stacks {
        if s.channels.len() != c {
            return Err(Error::Dimension(
                "stacks with different channel counts".into(),
            ));
        }
        for ch in &s.channels {
            if ch.dims() != (h, w) {
                return Err(Error::Dimension(
                    "stacks with different spatial sizes".into(),
                ));
            }
            data.extend(ch.data().iter().map(|&v| T::from_f64(v)));
        }
    }
    Tensor::new(vec![stacks.len(), c, h, w], data)
}

/// Split a `[B, C, H, W]` output into per-sample channel images.
pub fn unstack_batch<T: Element>(out: &Tensor<T>) -> Result<Vec<Vec<Image>>> {
    let (b, c, h, w) = out.dims4()?;
    let d = out.data();
    (0..b)
        .map(|bi| {
            (0..c)
                .map(|ch| {
                    let start = (bi * c + ch) * h * w;
                    Image::new(
                        h,
                        w,
                        d[start..start + h * w].iter().map(|v| v.as_f64()).collect(),
                    )
                })
                .collect()
        })
        .collect()
}

/// Eval-mode prediction of the noise for each stack, at each stack's own `t`.
pub fn forward(params: &DenoiserParams, stacks: &[ConditioningStack]) -> Result<Vec<Vec<Image>>> {
    let input = stack_batch::<f32>(stacks)?;
    let timesteps: Vec<usize> = stacks.iter().map(|s| s.t).collect();
    let out = predict(params, input, &timesteps)?;
    unstack_batch(&out)
}

/// Eval-mode prediction on a packed batch.
pub fn predict(
    params: &DenoiserParams,
    input: Tensor<f32>,
    timesteps: &[usize],
) -> Result<Tensor<f32>> {
    let mut graph = Graph::new();
    let vars: Vec<Var> = params
        .tensors
        .iter()
        .map(|t| graph.leaf(t.clone(), false))
        .collect();
    let x = graph.constant(input);
    let mut norms = params.norms.clone();
    let out = trace(
        &mut graph,
        &params.config,
        &vars,
        &mut norms,
        x,
        timesteps,
        NormMode::Eval,
    )?;
    Ok(graph.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check_many;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            depth: 1,
            base_width: 4,
            in_channels: 5,
            out_channels: 4,
            time_embed_dim: 4,
        }
    }

    /// Parameter count written out level by level, independent of the plan.
    fn closed_form_count(c: &DenoiserConfig) -> usize {
        let conv = |i: usize, o: usize| 9 * i * o;
        let norm = |ch: usize| 2 * ch;
        let mut total = 0;
        let mut cin = c.in_channels;
        for l in 0..c.depth {
            let w = c.base_width * 2usize.pow(l as u32);
            total += conv(cin, w) + norm(w) + conv(w, w) + norm(w);
            cin = w;
        }
        let wb = c.base_width * 2usize.pow(c.depth as u32);
        total += conv(cin, wb) + norm(wb) + conv(wb, wb) + norm(wb);
        total += c.time_embed_dim * wb + wb;
        for l in (0..c.depth).rev() {
            let w = c.base_width * 2usize.pow(l as u32);
            let up_in = 2 * w;
            total += conv(up_in, w) + norm(w) + conv(2 * w, w) + norm(w) + conv(w, w) + norm(w);
        }
        total + c.base_width * c.out_channels + c.out_channels
    }

    #[test]
    fn single_conv_count() {
        let spec = LayerSpec::Conv {
            name: "c".into(),
            in_channels: 5,
            out_channels: 4,
            kernel: 3,
            bias: true,
        };
        assert_eq!(spec.param_count(), 184);
    }

    #[test]
    fn counts_match_closed_form_and_enumeration() {
        for (depth, width) in [(1, 4), (2, 8), (3, 16), (4, 8)] {
            let cfg = DenoiserConfig {
                depth,
                base_width: width,
                ..DenoiserConfig::default()
            };
            assert_eq!(count_params(&cfg), closed_form_count(&cfg));
            let p = DenoiserParams::init(cfg, 1).unwrap();
            assert_eq!(p.param_count(), count_params(&cfg));
            p.check_layout().unwrap();
        }
        let d1 = count_params(&DenoiserConfig {
            depth: 1,
            ..Default::default()
        });
        let d2 = count_params(&DenoiserConfig {
            depth: 2,
            ..Default::default()
        });
        assert!(d1 < d2);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            DenoiserConfig {
                depth: 0,
                ..Default::default()
            },
            DenoiserConfig {
                base_width: 0,
                ..Default::default()
            },
            DenoiserConfig {
                time_embed_dim: 3,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                DenoiserParams::init(cfg, 0),
                Err(Error::Config(_))
            ));
        }
    }

    fn random_input(b: usize, c: usize, h: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, c, h, h], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn output_shape_and_divisibility() {
        let p = DenoiserParams::init(DenoiserConfig::default(), 3).unwrap();
        let out = predict(&p, random_input(2, 5, 32, 1), &[1, 7]).unwrap();
        assert_eq!(out.shape(), &[2, 4, 32, 32]);
        assert!(matches!(
            predict(&p, random_input(1, 5, 12, 1), &[1]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            predict(&p, random_input(1, 4, 32, 1), &[1]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            predict(&p, random_input(2, 5, 32, 1), &[1]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn timestep_is_live_and_eval_is_deterministic() {
        let p = DenoiserParams::init(DenoiserConfig::default(), 4).unwrap();
        let x = random_input(1, 5, 32, 2);
        let a = predict(&p, x.clone(), &[3]).unwrap();
        let b = predict(&p, x.clone(), &[40]).unwrap();
        assert_ne!(a.data(), b.data());
        assert_eq!(a.data(), predict(&p, x, &[3]).unwrap().data());
    }

    #[test]
    fn batch_elements_are_independent_in_eval_mode() {
        let p = DenoiserParams::init(
            DenoiserConfig {
                depth: 2,
                base_width: 8,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let pair = random_input(2, 5, 16, 3);
        let both = predict(&p, pair.clone(), &[5, 9]).unwrap();
        let second = Tensor::new(vec![1, 5, 16, 16], pair.data()[5 * 256..].to_vec()).unwrap();
        let alone = predict(&p, second, &[9]).unwrap();
        for (x, y) in both.data()[4 * 256..].iter().zip(alone.data()) {
            assert!((x - y).abs() <= 1e-5 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn embedding_values() {
        let e = timestep_embedding::<f64>(&[0, 3], 4);
        assert_eq!(e.data()[..4], [0.0, 0.0, 1.0, 1.0]);
        let w1 = (-(10000f64.ln()) / 2.0).exp();
        let want = [3f64.sin(), (3.0 * w1).sin(), 3f64.cos(), (3.0 * w1).cos()];
        for (g, w) in e.data()[4..].iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let cfg = tiny();
        let params = DenoiserParams::init(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut points: Vec<Tensor<f64>> = params.tensors.iter().map(|t| t.cast()).collect();
        // Nonzero shifts and biases so every branch of every ReLU is exercised.
        for (name, t) in params.names.iter().zip(points.iter_mut()) {
            if !name.ends_with(".weight") {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v += rng.gen_range(-0.3..0.3));
            }
        }
        let b = 3;
        let input = Tensor::<f64>::from_fn(&[b, 5, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let target = Tensor::<f64>::from_fn(&[b, 4, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let mask: Vec<bool> = (0..b * 4).map(|i| i % 3 != 0).collect();
        let norms: Vec<BatchNormState<f64>> = params.norms.iter().map(|n| n.cast()).collect();
        let n_params = points.len();
        points.push(input);

        let mut coords = Vec::new();
        for (arg, p) in points.iter().enumerate() {
            let n = p.numel();
            for k in 0..n.min(6) {
                coords.push((arg, (k * 7919) % n));
            }
        }
        let err = grad_check_many(
            |g, vars| {
                let mut local = norms.clone();
                let out = trace(
                    g,
                    &cfg,
                    &vars[..n_params],
                    &mut local,
                    vars[n_params],
                    &[1, 17, 40],
                    NormMode::Train,
                )?;
                let tgt = g.constant(target.clone());
                g.masked_mse(out, tgt, &mask)
            },
            &points,
            1e-5,
            Some(&coords),
        )
        .unwrap();
        assert!(err <= 1e-6, "max relative error {err}");
    }
}
