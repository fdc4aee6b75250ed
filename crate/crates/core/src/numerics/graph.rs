//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so the node list is always a
//! valid topological order and the backward pass is a single reverse sweep.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Border handling for [`Graph::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Mirror without repeating the edge sample (`dcb|abcd|cba`).
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn cast<U: Element>(&self) -> BatchNormState<U> {
        BatchNormState {
            running_mean: self
                .running_mean
                .iter()
                .map(|&x| U::from_f64(x.as_f64()))
                .collect(),
            running_var: self
                .running_var
                .iter()
                .map(|&x| U::from_f64(x.as_f64()))
                .collect(),
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: Padding,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: Var,
    },
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        mode: NormMode,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    AddChannelBias {
        input: Var,
        bias: Var,
    },
    Sum {
        input: Var,
    },
    MseMean {
        a: Var,
        b: Var,
    },
    MaskedMse {
        pred: Var,
        target: Var,
        mask: Vec<bool>,
        denom: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Build it forward, then call [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`]; `None` for values that do not depend on any
/// leaf marked `requires_grad`.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mirror `i` into `0..n` without repeating the edge.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

/// For each kernel offset, the source index of every output position along one axis.
fn axis_maps(len: usize, k: usize, padding: Padding) -> Vec<Vec<Option<usize>>> {
    let half = (k / 2) as isize;
    (0..k)
        .map(|off| {
            (0..len)
                .map(|i| {
                    let src = i as isize + off as isize - half;
                    match padding {
                        Padding::Zero if src < 0 || src >= len as isize => None,
                        Padding::Zero => Some(src as usize),
                        Padding::Reflect => Some(reflect_index(src, len)),
                    }
                })
                .collect()
        })
        .collect()
}

/// Number of columns (samples × pixels) unfolded at once. Large enough for
/// efficient GEMM, small enough for the unfolded block to stay in cache.
const CONV_CHUNK_COLUMNS: usize = 2048;

struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    k: usize,
    padding: Padding,
    rows: Vec<Vec<Option<usize>>>,
    cols: Vec<Vec<Option<usize>>>,
}

impl ConvGeometry {
    fn new(c: usize, h: usize, w: usize, k: usize, padding: Padding) -> Self {
        Self {
            channels: c,
            height: h,
            width: w,
            k,
            padding,
            rows: axis_maps(h, k, padding),
            cols: axis_maps(w, k, padding),
        }
    }

    fn patch_len(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn samples_per_chunk(&self) -> usize {
        (CONV_CHUNK_COLUMNS / (self.height * self.width)).max(1)
    }

    /// Valid output range `lo..hi` along the width for kernel column `kj`
    /// under zero padding, and the source shift.
    fn zero_span(&self, kj: usize) -> (usize, usize, isize) {
        let shift = kj as isize - (self.k / 2) as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (self.width as isize - shift)
            .min(self.width as isize)
            .max(lo as isize) as usize;
        (lo, hi, shift)
    }

    /// Unfold `nb` samples of `x` (starting at the first) into a
    /// `[C*k*k, nb*H*W]` matrix. Under zero padding the positions that fall
    /// outside the image are left untouched, so `out` must hold zeros there.
    fn im2col<T: Element>(&self, x: &[T], nb: usize, out: &mut [T]) {
        let (h, w, k) = (self.height, self.width, self.k);
        let hw = h * w;
        let ncols = nb * hw;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst_row = &mut out[row * ncols..(row + 1) * ncols];
                    let (lo, hi, shift) = self.zero_span(kj);
                    let cmap = &self.cols[kj];
                    for b in 0..nb {
                        let plane =
                            &x[(b * self.channels + c) * hw..(b * self.channels + c + 1) * hw];
                        for i in 0..h {
                            let Some(si) = self.rows[ki][i] else { continue };
                            let src = &plane[si * w..(si + 1) * w];
                            let dst = &mut dst_row[b * hw + i * w..b * hw + (i + 1) * w];
                            match self.padding {
                                Padding::Zero => {
                                    let s0 = (lo as isize + shift) as usize;
                                    dst[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                                }
                                Padding::Reflect => {
                                    for (d, sj) in dst.iter_mut().zip(cmap) {
                                        *d = src[sj.expect("reflect maps every index")];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-add columns back into `nb` images.
    fn col2im<T: Element>(&self, cols: &[T], nb: usize, dx: &mut [T]) {
        let (h, w, k) = (self.height, self.width, self.k);
        let hw = h * w;
        let ncols = nb * hw;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src_row = &cols[row * ncols..(row + 1) * ncols];
                    let (lo, hi, shift) = self.zero_span(kj);
                    let cmap = &self.cols[kj];
                    for b in 0..nb {
                        let plane =
                            &mut dx[(b * self.channels + c) * hw..(b * self.channels + c + 1) * hw];
                        for i in 0..h {
                            let Some(si) = self.rows[ki][i] else { continue };
                            let src = &src_row[b * hw + i * w..b * hw + (i + 1) * w];
                            let dst = &mut plane[si * w..(si + 1) * w];
                            match self.padding {
                                Padding::Zero => {
                                    let d0 = (lo as isize + shift) as usize;
                                    for (d, s) in dst[d0..d0 + hi - lo].iter_mut().zip(&src[lo..hi])
                                    {
                                        *d = *d + *s;
                                    }
                                }
                                Padding::Reflect => {
                                    for (s, sj) in src.iter().zip(cmap) {
                                        let sj = sj.expect("reflect maps every index");
                                        dst[sj] = dst[sj] + *s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// The single element of a scalar-valued node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        let t = self.value(v);
        if t.numel() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Same-size 2-D cross-correlation: `input [B,C,H,W]`, `weight [O,C,k,k]`, `bias [O]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: Padding,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        let (o, wc, kh, kw) = self.value(weight).dims4()?;
        if wc != c || kh != kw || kh % 2 == 0 {
            return Err(Error::Dimension(format!(
                "conv2d: weight {:?} incompatible with input {:?} (need [O,{c},k,k], k odd)",
                self.value(weight).shape(),
                self.value(input).shape()
            )));
        }
        if let Some(bv) = bias {
            if self.value(bv).shape() != [o] {
                return Err(Error::Dimension(format!(
                    "conv2d: bias shape {:?}, expected [{o}]",
                    self.value(bv).shape()
                )));
            }
        }
        let geom = ConvGeometry::new(c, h, w, kh, padding);
        let hw = h * w;
        let kk = geom.patch_len();
        let chunk = geom.samples_per_chunk().min(b);
        let mut cols = vec![T::zero(); kk * chunk * hw];
        let mut mat = vec![T::zero(); o * chunk * hw];
        let mut out = vec![T::zero(); b * o * hw];
        let bias_data = bias.map(|bv| self.value(bv).data().to_vec());
        let xd = self.value(input).data();
        let wd = self.value(weight).data();
        for b0 in (0..b).step_by(chunk) {
            let nb = chunk.min(b - b0);
            let n = nb * hw;
            geom.im2col(
                &xd[b0 * c * hw..(b0 + nb) * c * hw],
                nb,
                &mut cols[..kk * n],
            );
            T::gemm(
                o,
                kk,
                n,
                T::one(),
                wd,
                kk as isize,
                1,
                &cols[..kk * n],
                n as isize,
                1,
                T::zero(),
                &mut mat[..o * n],
                n as isize,
                1,
            );
            for oc in 0..o {
                let add = bias_data.as_ref().map_or(T::zero(), |bd| bd[oc]);
                for bi in 0..nb {
                    let src = &mat[oc * n + bi * hw..oc * n + (bi + 1) * hw];
                    let dst = &mut out[((b0 + bi) * o + oc) * hw..((b0 + bi) * o + oc + 1) * hw];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = *s + add;
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, o, h, w], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            },
            &inputs,
        ))
    }

    /// 2×2 max pooling with stride 2.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "maxpool2: odd spatial size {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let candidates = [
                        base + 2 * i * w + 2 * j,
                        base + 2 * i * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ];
                    let mut best = candidates[0];
                    for &idx in &candidates[1..] {
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(vec![b, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, &[input]))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4()?;
        let (ho, wo) = (2 * h, 2 * w);
        let xd = x.data();
        let mut out = vec![T::zero(); b * c * ho * wo];
        for plane in 0..b * c {
            for i in 0..ho {
                for j in 0..wo {
                    out[plane * ho * wo + i * wo + j] = xd[plane * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor::new(vec![b, c, ho, wo], out)?;
        Ok(self.push(value, Op::Upsample2 { input }, &[input]))
    }

    /// Per-channel batch normalization followed by `scale * x̂ + shift`.
    ///
    /// Train mode normalizes by batch statistics (biased variance) and folds
    /// them into `state` with the state's momentum, using the unbiased variance
    /// for the running estimate. Eval mode normalizes by the running statistics.
    pub fn batchnorm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        state: &mut BatchNormState<T>,
        mode: NormMode,
    ) -> Result<Var> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4()?;
        if self.value(scale).shape() != [c]
            || self.value(shift).shape() != [c]
            || state.channels() != c
        {
            return Err(Error::Dimension(format!(
                "batchnorm: parameters do not match {c} channels"
            )));
        }
        if mode == NormMode::Train && b < 2 {
            return Err(Error::Config(
                "batchnorm in train mode needs a batch of at least 2".into(),
            ));
        }
        let hw = h * w;
        let count = (b * hw) as f64;
        let xd = x.data();
        let eps = state.eps;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        match mode {
            NormMode::Train => {
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        s += xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                            .iter()
                            .map(|v| v.as_f64())
                            .sum::<f64>();
                    }
                    let m = s / count;
                    let mut sq = 0.0;
                    for bi in 0..b {
                        sq += xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v.as_f64() - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count;
                }
            }
            NormMode::Eval => {
                for ch in 0..c {
                    mean[ch] = state.running_mean[ch].as_f64();
                    var[ch] = state.running_var[ch].as_f64();
                }
            }
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|v| T::from_f64(1.0 / (v + eps).sqrt()))
            .collect();
        let sd = self.value(scale).data();
        let hd = self.value(shift).data();
        let mut normalized = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let m = T::from_f64(mean[ch]);
                let range = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                for idx in range {
                    let xh = (xd[idx] - m) * inv_std[ch];
                    normalized[idx] = xh;
                    out[idx] = sd[ch] * xh + hd[ch];
                }
            }
        }
        if mode == NormMode::Train {
            let mom = state.momentum;
            for ch in 0..c {
                let unbiased = var[ch] * count / (count - 1.0);
                let rm = state.running_mean[ch].as_f64();
                let rv = state.running_var[ch].as_f64();
                state.running_mean[ch] = T::from_f64((1.0 - mom) * rm + mom * mean[ch]);
                state.running_var[ch] = T::from_f64((1.0 - mom) * rv + mom * unbiased);
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                scale,
                shift,
                normalized,
                inv_std,
                mode,
            },
            &[input, scale, shift],
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self
            .value(input)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(value, Op::Relu { input }, &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Concatenate along the channel axis of two `[B,C,H,W]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::Dimension(format!(
                "concat_channels: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let hw = ha * wa;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * hw);
        for bi in 0..ba {
            out.extend_from_slice(&ad[bi * ca * hw..(bi + 1) * ca * hw]);
            out.extend_from_slice(&bd[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let value = Tensor::new(vec![ba, ca + cb, ha, wa], out)?;
        Ok(self.push(value, Op::ConcatChannels { a, b }, &[a, b]))
    }

    /// `input [B,I] · weightᵀ [I,O] + bias [O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        let (b, i, o) = match (xs, ws, bs) {
            ([b, i], [o, wi], [bo]) if i == wi && o == bo => (*b, *i, *o),
            _ => {
                return Err(Error::Dimension(format!(
                    "linear: input {xs:?}, weight {ws:?}, bias {bs:?}"
                )))
            }
        };
        let mut out: Vec<T> = (0..b)
            .flat_map(|_| self.value(bias).data().iter().copied())
            .collect();
        T::gemm(
            b,
            i,
            o,
            T::one(),
            self.value(input).data(),
            i as isize,
            1,
            self.value(weight).data(),
            1,
            i as isize,
            T::one(),
            &mut out,
            o as isize,
            1,
        );
        let value = Tensor::new(vec![b, o], out)?;
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    /// Broadcast-add a per-sample, per-channel `[B,C]` bias over `[B,C,H,W]`.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if self.value(bias).shape() != [b, c] {
            return Err(Error::Dimension(format!(
                "add_channel_bias: bias {:?}, expected [{b}, {c}]",
                self.value(bias).shape()
            )));
        }
        let hw = h * w;
        let bd = self.value(bias).data();
        let data = self
            .value(input)
            .data()
            .iter()
            .enumerate()
            .map(|(idx, x)| *x + bd[idx / hw])
            .collect();
        let value = Tensor::new(vec![b, c, h, w], data)?;
        Ok(self.push(value, Op::AddChannelBias { input, bias }, &[input, bias]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::from_fn(&[1], |_| self.value(input).sum());
        self.push(value, Op::Sum { input }, &[input])
    }

    /// Mean of squared differences over all elements.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mse_mean")?;
        let n = self.value(a).numel();
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (*x - *y) * (*x - *y))
            .sum();
        let value = Tensor::from_fn(&[1], |_| s / T::from_f64(n as f64));
        Ok(self.push(value, Op::MseMean { a, b }, &[a, b]))
    }

    /// Mean squared error over the `(sample, channel)` planes selected by
    /// `mask` (row-major over `[B, C]`). Unselected planes contribute neither
    /// to the value nor to the gradient.
    pub fn masked_mse(&mut self, pred: Var, target: Var, mask: &[bool]) -> Result<Var> {
        same_shape(self.value(pred), self.value(target), "masked_mse")?;
        let (b, c, h, w) = self.value(pred).dims4()?;
        if mask.len() != b * c {
            return Err(Error::Dimension(format!(
                "masked_mse: mask of length {} for {b}x{c} planes",
                mask.len()
            )));
        }
        let selected = mask.iter().filter(|&&m| m).count();
        if selected == 0 {
            return Err(Error::Contract(
                "masked_mse: mask selects no channel".into(),
            ));
        }
        let hw = h * w;
        let (pd, td) = (self.value(pred).data(), self.value(target).data());
        let mut s = T::zero();
        for (plane, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for idx in plane * hw..(plane + 1) * hw {
                let d = pd[idx] - td[idx];
                s = s + d * d;
            }
        }
        let denom = selected * hw;
        let value = Tensor::from_fn(&[1], |_| s / T::from_f64(denom as f64));
        Ok(self.push(
            value,
            Op::MaskedMse {
                pred,
                target,
                mask: mask.to_vec(),
                denom,
            },
            &[pred, target],
        ))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![T::one()]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.wants(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn accumulate_owned(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        match &mut grads[v.0] {
            Some(slot) => slot.iter_mut().zip(&delta).for_each(|(s, d)| *s = *s + *d),
            empty => *empty = Some(delta),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            } => {
                let (b, c, h, w) = self.value(*input).dims4()?;
                let (o, _, k, _) = self.value(*weight).dims4()?;
                let geom = ConvGeometry::new(c, h, w, k, *padding);
                let hw = h * w;
                let kk = geom.patch_len();
                let chunk = geom.samples_per_chunk().min(b);
                if let Some(bv) = bias {
                    self.accumulate(grads, *bv, |gb| {
                        for bi in 0..b {
                            for (oc, slot) in gb.iter_mut().enumerate() {
                                let plane = &g[(bi * o + oc) * hw..(bi * o + oc + 1) * hw];
                                *slot = *slot + plane.iter().copied().sum::<T>();
                            }
                        }
                    });
                }
                let (want_w, want_x) = (self.wants(*weight), self.wants(*input));
                if !want_w && !want_x {
                    return Ok(());
                }
                let xd = self.value(*input).data();
                let wd = self.value(*weight).data();
                let mut gw = want_w.then(|| vec![T::zero(); o * kk]);
                let mut gx = want_x.then(|| vec![T::zero(); b * c * hw]);
                let mut gmat = vec![T::zero(); o * chunk * hw];
                let mut cols = vec![T::zero(); kk * chunk * hw];
                let mut gcols = vec![T::zero(); kk * chunk * hw];
                for b0 in (0..b).step_by(chunk) {
                    let nb = chunk.min(b - b0);
                    let n = nb * hw;
                    for bi in 0..nb {
                        for oc in 0..o {
                            gmat[oc * n + bi * hw..oc * n + (bi + 1) * hw].copy_from_slice(
                                &g[((b0 + bi) * o + oc) * hw..((b0 + bi) * o + oc + 1) * hw],
                            );
                        }
                    }
                    let gm = &gmat[..o * n];
                    if let Some(gw) = gw.as_mut() {
                        let cb = &mut cols[..kk * n];
                        geom.im2col(&xd[b0 * c * hw..(b0 + nb) * c * hw], nb, cb);
                        T::gemm(
                            o,
                            n,
                            kk,
                            T::one(),
                            gm,
                            n as isize,
                            1,
                            cb,
                            1,
                            n as isize,
                            T::one(),
                            gw,
                            kk as isize,
                            1,
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gc = &mut gcols[..kk * n];
                        T::gemm(
                            kk,
                            o,
                            n,
                            T::one(),
                            wd,
                            1,
                            kk as isize,
                            gm,
                            n as isize,
                            1,
                            T::zero(),
                            gc,
                            n as isize,
                            1,
                        );
                        geom.col2im(gc, nb, &mut gx[b0 * c * hw..(b0 + nb) * c * hw]);
                    }
                }
                if let Some(gw) = gw {
                    self.accumulate_owned(grads, *weight, gw);
                }
                if let Some(gx) = gx {
                    self.accumulate_owned(grads, *input, gx);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                self.accumulate(grads, *input, |gx| {
                    for (gi, &src) in g.iter().zip(argmax) {
                        gx[src as usize] = gx[src as usize] + *gi;
                    }
                });
            }
            Op::Upsample2 { input } => {
                let (b, c, h, w) = self.value(*input).dims4()?;
                let (ho, wo) = (2 * h, 2 * w);
                self.accumulate(grads, *input, |gx| {
                    for plane in 0..b * c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let dst = plane * h * w + (i / 2) * w + j / 2;
                                gx[dst] = gx[dst] + g[plane * ho * wo + i * wo + j];
                            }
                        }
                    }
                });
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                normalized,
                inv_std,
                mode,
            } => {
                let (b, c, h, w) = self.value(*input).dims4()?;
                let hw = h * w;
                let count = T::from_f64((b * hw) as f64);
                let sd = self.value(*scale).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        for idx in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                            sum_g[ch] = sum_g[ch] + g[idx];
                            sum_gx[ch] = sum_gx[ch] + g[idx] * normalized[idx];
                        }
                    }
                }
                self.accumulate(grads, *shift, |gs| {
                    for (slot, v) in gs.iter_mut().zip(&sum_g) {
                        *slot = *slot + *v;
                    }
                });
                self.accumulate(grads, *scale, |gs| {
                    for (slot, v) in gs.iter_mut().zip(&sum_gx) {
                        *slot = *slot + *v;
                    }
                });
                self.accumulate(grads, *input, |gx| {
                    for bi in 0..b {
                        for ch in 0..c {
                            let a = sd[ch] * inv_std[ch];
                            for idx in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                                let d = match mode {
                                    NormMode::Eval => a * g[idx],
                                    NormMode::Train => {
                                        a * (g[idx]
                                            - sum_g[ch] / count
                                            - normalized[idx] * sum_gx[ch] / count)
                                    }
                                };
                                gx[idx] = gx[idx] + d;
                            }
                        }
                    }
                });
            }
            Op::Relu { input } => {
                let xd = self.value(*input).data();
                self.accumulate(grads, *input, |gx| {
                    for ((slot, gi), x) in gx.iter_mut().zip(g).zip(xd) {
                        if *x > T::zero() {
                            *slot = *slot + *gi;
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |gx| {
                        for (slot, gi) in gx.iter_mut().zip(g) {
                            *slot = *slot + *gi;
                        }
                    });
                }
            }
            Op::ConcatChannels { a, b } => {
                let (bsz, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.value(*b).dims4()?.1;
                let hw = h * w;
                let ct = ca + cb;
                self.accumulate(grads, *a, |ga| {
                    for bi in 0..bsz {
                        let src = &g[bi * ct * hw..bi * ct * hw + ca * hw];
                        for (slot, gi) in ga[bi * ca * hw..(bi + 1) * ca * hw].iter_mut().zip(src) {
                            *slot = *slot + *gi;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for bi in 0..bsz {
                        let src = &g[bi * ct * hw + ca * hw..(bi + 1) * ct * hw];
                        for (slot, gi) in gb[bi * cb * hw..(bi + 1) * cb * hw].iter_mut().zip(src) {
                            *slot = *slot + *gi;
                        }
                    }
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (b, i) = (self.value(*input).shape()[0], self.value(*input).shape()[1]);
                let o = self.value(*weight).shape()[0];
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(o) {
                        for (slot, gi) in gb.iter_mut().zip(row) {
                            *slot = *slot + *gi;
                        }
                    }
                });
                let xd = self.value(*input).data();
                self.accumulate(grads, *weight, |gw| {
                    // gW[o,i] += Σ_b g[b,o] x[b,i]
                    T::gemm(
                        o,
                        b,
                        i,
                        T::one(),
                        g,
                        1,
                        o as isize,
                        xd,
                        i as isize,
                        1,
                        T::one(),
                        gw,
                        i as isize,
                        1,
                    );
                });
                let wd = self.value(*weight).data();
                self.accumulate(grads, *input, |gx| {
                    T::gemm(
                        b,
                        o,
                        i,
                        T::one(),
                        g,
                        o as isize,
                        1,
                        wd,
                        i as isize,
                        1,
                        T::one(),
                        gx,
                        i as isize,
                        1,
                    );
                });
            }
            Op::AddChannelBias { input, bias } => {
                let (_, _, h, w) = self.value(*input).dims4()?;
                let hw = h * w;
                self.accumulate(grads, *input, |gx| {
                    for (slot, gi) in gx.iter_mut().zip(g) {
                        *slot = *slot + *gi;
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for (plane, slot) in gb.iter_mut().enumerate() {
                        *slot = *slot + g[plane * hw..(plane + 1) * hw].iter().copied().sum::<T>();
                    }
                });
            }
            Op::Sum { input } => {
                self.accumulate(grads, *input, |gx| {
                    for slot in gx.iter_mut() {
                        *slot = *slot + g[0];
                    }
                });
            }
            Op::MseMean { a, b } => {
                let n = T::from_f64(self.value(*a).numel() as f64);
                let scale = (T::one() + T::one()) * g[0] / n;
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((slot, x), y) in ga.iter_mut().zip(ad).zip(bd) {
                        *slot = *slot + scale * (*x - *y);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((slot, x), y) in gb.iter_mut().zip(ad).zip(bd) {
                        *slot = *slot - scale * (*x - *y);
                    }
                });
            }
            Op::MaskedMse {
                pred,
                target,
                mask,
                denom,
            } => {
                let hw = self.value(*pred).numel() / mask.len();
                let scale = (T::one() + T::one()) * g[0] / T::from_f64(*denom as f64);
                let (pd, td) = (self.value(*pred).data(), self.value(*target).data());
                for (v, sign) in [(*pred, T::one()), (*target, -T::one())] {
                    self.accumulate(grads, v, |gx| {
                        for (plane, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                            for idx in plane * hw..(plane + 1) * hw {
                                gx[idx] = gx[idx] + sign * scale * (pd[idx] - td[idx]);
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}
