//! Binary checkpoint of a [`TrainState`].
//!
//! All integers are little-endian `u64` unless noted, reals are `f64`, and
//! array payloads are raw little-endian `f32`:
//!
//! ```text
//! magic "FQDCKPT\0", version u32
//! denoiser   depth, base_width, in_channels, out_channels, time_embed_dim
//! schedule   steps, beta_start, beta_end, phase_boundary
//! frequency  kernel_size, sigma, high_pass u8, selection u8
//! stack      guidance u8, source_channels u8
//! training   batch_size, seed, lr, beta1, beta2, eps, clip flag u8, clip,
//!            stage count, stages × {kind u8, missing, epochs}
//! progress   step, epoch, adam_t
//! tensors    count × {name length, name bytes, rank, dims, f32 data}
//! moments    count × {length, f32 m}, count × {length, f32 v}
//! norms      count × {channels, momentum, eps, f32 mean, f32 var}
//! crc32 u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::conditioning::{GuidanceMode, StackOptions};
use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::frequency::{FrequencyConfig, GaussianKernel, HighPassMode, SourceSelection};
use crate::numerics::{BatchNormState, Tensor};
use crate::schedule::NoiseSchedule;

use super::{AdamConfig, AdamState, CurriculumSchedule, Pipeline, Stage, TrainConfig, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FQDCKPT\0";

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, v: &[f32]) {
        self.usize(v.len());
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.bad(format!("length {v} out of range")))
    }

    /// A count or length that must fit in the remaining bytes at
    /// `unit` bytes per element.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(unit) > self.bytes.len() - self.pos {
            return Err(self.bad(format!("length {n} exceeds the file")));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.len(4)?;
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    fn bad(&self, reason: String) -> Error {
        Error::format(self.path, reason)
    }
}

fn encode(state: &TrainState) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

    let c = &state.params.config;
    for v in [
        c.depth,
        c.base_width,
        c.in_channels,
        c.out_channels,
        c.time_embed_dim,
    ] {
        w.usize(v);
    }
    let s = &state.pipeline.schedule;
    w.usize(s.steps());
    w.f64(s.beta_start());
    w.f64(s.beta_end());
    w.usize(s.phase_boundary());
    let f = &state.pipeline.frequency;
    w.usize(f.kernel.size());
    w.f64(f.kernel.sigma());
    w.u8(match f.high_pass {
        HighPassMode::AsWritten => 0,
        HighPassMode::Residual => 1,
    });
    w.u8(match f.selection {
        SourceSelection::Dynamic => 0,
        SourceSelection::Fixed => 1,
    });
    w.u8(state.pipeline.options.guidance.code());
    w.u8(u8::from(state.pipeline.options.source_channels));

    let t = &state.train;
    w.usize(t.batch_size);
    w.u64(t.seed);
    for v in [t.adam.lr, t.adam.beta1, t.adam.beta2, t.adam.eps] {
        w.f64(v);
    }
    w.u8(u8::from(t.adam.clip_norm.is_some()));
    w.f64(t.adam.clip_norm.unwrap_or(0.0));
    w.usize(t.curriculum.stages().len());
    for &(stage, span) in t.curriculum.stages() {
        match stage {
            Stage::Missing(k) => {
                w.u8(0);
                w.usize(k);
            }
            Stage::Mixed => {
                w.u8(1);
                w.usize(0);
            }
        }
        w.usize(span);
    }

    w.u64(state.step);
    w.usize(state.epoch);
    w.u64(state.adam.t);

    w.usize(state.params.tensors.len());
    for (name, tensor) in state.params.names.iter().zip(&state.params.tensors) {
        w.usize(name.len());
        w.buf.extend_from_slice(name.as_bytes());
        w.usize(tensor.shape().len());
        for &d in tensor.shape() {
            w.usize(d);
        }
        w.f32s(tensor.data());
    }
    for moments in [&state.adam.m, &state.adam.v] {
        w.usize(moments.len());
        for m in moments {
            w.f32s(m);
        }
    }
    w.usize(state.params.norms.len());
    for n in &state.params.norms {
        w.usize(n.channels());
        w.f64(n.momentum);
        w.f64(n.eps);
        w.f32s(&n.running_mean);
        w.f32s(&n.running_var);
    }
    let crc = crc32fast::hash(&w.buf);
    w.buf.extend_from_slice(&crc.to_le_bytes());
    w.buf
}

fn decode(bytes: &[u8], path: &Path) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::format(path, "file shorter than header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::format(path, "bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"),
        ));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(Error::format(
            path,
            "CRC mismatch (file truncated or corrupted)",
        ));
    }
    let mut r = Reader {
        bytes: body,
        pos: 12,
        path,
    };

    let config = DenoiserConfig {
        depth: r.usize()?,
        base_width: r.usize()?,
        in_channels: r.usize()?,
        out_channels: r.usize()?,
        time_embed_dim: r.usize()?,
    };
    config.validate()?;
    let steps = r.usize()?;
    let (beta_start, beta_end) = (r.f64()?, r.f64()?);
    let boundary = r.usize()?;
    let schedule =
        NoiseSchedule::linear(steps, beta_start, beta_end)?.with_phase_boundary(boundary)?;
    let kernel = GaussianKernel::new(r.usize()?, r.f64()?)?;
    let high_pass = match r.u8()? {
        0 => HighPassMode::AsWritten,
        1 => HighPassMode::Residual,
        v => return Err(r.bad(format!("unknown high-pass code {v}"))),
    };
    let selection = match r.u8()? {
        0 => SourceSelection::Dynamic,
        1 => SourceSelection::Fixed,
        v => return Err(r.bad(format!("unknown selection code {v}"))),
    };
    let options = StackOptions {
        guidance: GuidanceMode::from_code(r.u8()?)?,
        source_channels: r.u8()? != 0,
    };

    let batch_size = r.usize()?;
    let seed = r.u64()?;
    let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let has_clip = r.u8()? != 0;
    let clip = r.f64()?;
    let stage_count = r.len(17)?;
    let mut stages = Vec::with_capacity(stage_count);
    for _ in 0..stage_count {
        let kind = r.u8()?;
        let k = r.usize()?;
        let span = r.usize()?;
        stages.push((
            match kind {
                0 => Stage::Missing(k),
                1 => Stage::Mixed,
                v => return Err(r.bad(format!("unknown stage code {v}"))),
            },
            span,
        ));
    }
    let curriculum = CurriculumSchedule::new(stages, config.out_channels)?;
    let step = r.u64()?;
    let epoch = r.usize()?;
    let adam_t = r.u64()?;

    let count = r.len(16)?;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.len(1)?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| r.bad("tensor name is not UTF-8".into()))?;
        let rank = r.len(8)?;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let data = r.f32s()?;
        tensors.push(Tensor::new(shape, data).map_err(|e| r.bad(format!("tensor {name}: {e}")))?);
        names.push(name);
    }
    let mut moments = Vec::with_capacity(2);
    for _ in 0..2 {
        let n = r.len(8)?;
        moments.push((0..n).map(|_| r.f32s()).collect::<Result<Vec<_>>>()?);
    }
    let v = moments.pop().expect("two moment sets");
    let m = moments.pop().expect("two moment sets");
    let norm_count = r.len(24)?;
    let mut norms = Vec::with_capacity(norm_count);
    for _ in 0..norm_count {
        let channels = r.usize()?;
        let momentum = r.f64()?;
        let eps = r.f64()?;
        let running_mean = r.f32s()?;
        let running_var = r.f32s()?;
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(r.bad("norm statistics do not match their channel count".into()));
        }
        norms.push(BatchNormState {
            running_mean,
            running_var,
            momentum,
            eps,
        });
    }
    if r.pos != body.len() {
        return Err(r.bad(format!("{} unexpected trailing bytes", body.len() - r.pos)));
    }

    let params = DenoiserParams {
        config,
        names,
        tensors,
        norms,
    };
    params.check_layout().map_err(|e| r.bad(e.to_string()))?;
    let shapes_match = |arrays: &[Vec<f32>]| {
        arrays.len() == params.tensors.len()
            && arrays
                .iter()
                .zip(&params.tensors)
                .all(|(a, t)| a.len() == t.numel())
    };
    if !shapes_match(&m) || !shapes_match(&v) {
        return Err(r.bad("optimizer moments do not match the parameters".into()));
    }
    Ok(TrainState {
        params,
        pipeline: Pipeline {
            schedule,
            frequency: FrequencyConfig {
                kernel,
                high_pass,
                selection,
            },
            options,
        },
        train: TrainConfig {
            batch_size,
            adam: AdamConfig {
                lr,
                beta1,
                beta2,
                eps,
                clip_norm: has_clip.then_some(clip),
            },
            curriculum,
            seed,
        },
        adam: AdamState { m, v, t: adam_t },
        step,
        epoch,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, encode(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
pub(super) fn encode_for_test(state: &TrainState) -> Vec<u8> {
    encode(state)
}
