use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{assemble_input, split_output, AvailabilityMask, ConditioningStack};
use crate::denoiser::{predict, stack_batch, unstack_batch, DenoiserParams};
use crate::error::{Error, Result};
use crate::frequency::{build_guidance, GuidancePair};
use crate::image::Image;
use crate::phantoms::PhantomSample;

use super::{gaussian_image, Pipeline};

/// Trajectories evaluated together in one network call.
const SAMPLING_CHUNK: usize = 32;

/// One trajectory: which sample, which modalities are given, and the seed of
/// its private noise stream.
#[derive(Clone, Copy, Debug)]
pub struct SynthesisRequest<'a> {
    pub sample: &'a PhantomSample,
    pub mask: AvailabilityMask,
    pub seed: u64,
}

/// Synthesize the missing modalities of one sample, drawing all noise from `rng`.
pub fn synthesize<R: Rng>(
    params: &DenoiserParams,
    pipeline: &Pipeline,
    sample: &PhantomSample,
    mask: AvailabilityMask,
    rng: &mut R,
) -> Result<Vec<Image>> {
    let request = SynthesisRequest {
        sample,
        mask,
        seed: rng.gen(),
    };
    let mut out = synthesize_batch(params, pipeline, &[request], &mut |_, _| {})?;
    Ok(out.pop().expect("one request"))
}

/// Run the reverse process for many trajectories at once.
///
/// Missing channels start as standard Gaussian noise and are updated by one
/// ancestral step per timestep from `T` down to 1; available channels always
/// carry the clean sources. The final estimates are clamped to the data range
/// `[-1, 1]` and returned in increasing modality order. `observer` sees every
/// network input as `(request index, stack)`.
pub fn synthesize_batch(
    params: &DenoiserParams,
    pipeline: &Pipeline,
    requests: &[SynthesisRequest<'_>],
    observer: &mut dyn FnMut(usize, &ConditioningStack),
) -> Result<Vec<Vec<Image>>> {
    let mut results = Vec::with_capacity(requests.len());
    for (chunk_idx, chunk) in requests.chunks(SAMPLING_CHUNK).enumerate() {
        let offset = chunk_idx * SAMPLING_CHUNK;
        results.extend(run_chunk(params, pipeline, chunk, offset, observer)?);
    }
    Ok(results)
}

struct Trajectory {
    rng: ChaCha8Rng,
    guidance: GuidancePair,
    states: Vec<Image>,
}

fn run_chunk(
    params: &DenoiserParams,
    pipeline: &Pipeline,
    requests: &[SynthesisRequest<'_>],
    offset: usize,
    observer: &mut dyn FnMut(usize, &ConditioningStack),
) -> Result<Vec<Vec<Image>>> {
    let schedule = &pipeline.schedule;
    let freq = &pipeline.frequency;
    let n = params.config.out_channels;
    let mut trajectories = requests
        .iter()
        .map(|r| {
            r.mask.ensure_synthesis_task()?;
            if r.mask.len() != n {
                return Err(Error::Contract(format!(
                    "mask {} for a {n}-modality model",
                    r.mask
                )));
            }
            let (h, w) = r.sample.dims();
            let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
            let states = r
                .mask
                .missing()
                .map(|_| gaussian_image(h, w, &mut rng))
                .collect();
            let guidance = build_guidance(
                r.sample,
                r.mask,
                &freq.kernel,
                freq.high_pass,
                freq.selection,
            )?;
            Ok(Trajectory {
                rng,
                guidance,
                states,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    for t in (1..=schedule.steps()).rev() {
        let stacks = requests
            .iter()
            .zip(&trajectories)
            .map(|(r, tr)| {
                assemble_input(
                    r.sample,
                    r.mask,
                    &tr.states,
                    &tr.guidance,
                    t,
                    schedule,
                    pipeline.options,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, s) in stacks.iter().enumerate() {
            observer(offset + i, s);
        }
        let input = stack_batch::<f32>(&stacks)?;
        let out = unstack_batch(&predict(params, input, &vec![t; stacks.len()])?)?;
        for ((r, tr), eps) in requests.iter().zip(trajectories.iter_mut()).zip(out) {
            let eps = split_output(&eps, r.mask, r.sample)?;
            for (state, m) in tr.states.iter_mut().zip(r.mask.missing()) {
                let (h, w) = state.dims();
                let z = if t > 1 {
                    gaussian_image(h, w, &mut tr.rng)
                } else {
                    Image::zeros(h, w)
                };
                let next = schedule.reverse_step(state.data(), t, eps[m].data(), z.data())?;
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite sample state at t = {t}"
                    )));
                }
                *state = Image::new(h, w, next)?;
            }
        }
    }
    Ok(trajectories
        .into_iter()
        .map(|tr| {
            tr.states
                .into_iter()
                .map(|s| s.map(|v| v.clamp(-1.0, 1.0)))
                .collect()
        })
        .collect())
}
