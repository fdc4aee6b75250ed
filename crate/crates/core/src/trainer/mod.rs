//! Curriculum-scheduled training of the noise predictor, checkpoints and the
//! full reverse-diffusion sampling loop.

mod checkpoint;
mod sampling;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conditioning::{assemble_input, AvailabilityMask, StackOptions};
use crate::denoiser::{stack_batch, trace, DenoiserParams};
use crate::error::{Error, Result};
use crate::frequency::{FrequencyConfig, GuidanceBank};
use crate::image::Image;
use crate::numerics::{Graph, NormMode, Tensor, Var};
use crate::phantoms::PhantomSample;
use crate::schedule::NoiseSchedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use sampling::{synthesize, synthesize_batch, SynthesisRequest};

/// Difficulty of the masks drawn during one part of training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Exactly this many modalities missing.
    Missing(usize),
    /// Uniform over every synthesis task.
    Mixed,
}

impl Stage {
    pub fn name(self) -> String {
        match self {
            Stage::Missing(k) => format!("missing-{k}"),
            Stage::Mixed => "mixed".to_string(),
        }
    }
}

/// Ordered `(stage, epochs)` spans.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CurriculumSchedule {
    stages: Vec<(Stage, usize)>,
}

impl CurriculumSchedule {
    pub fn new(stages: Vec<(Stage, usize)>, modalities: usize) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Config("curriculum has no stages".into()));
        }
        let mut last = 0;
        for &(stage, span) in &stages {
            if span == 0 {
                return Err(Error::Config(format!(
                    "stage {} has an empty span",
                    stage.name()
                )));
            }
            if let Stage::Missing(k) = stage {
                if k == 0 || k >= modalities {
                    return Err(Error::Config(format!(
                        "stage {} impossible with {modalities} modalities",
                        stage.name()
                    )));
                }
                if k < last {
                    return Err(Error::Config(
                        "curriculum stages must run from easy to hard".into(),
                    ));
                }
                last = k;
            }
        }
        Ok(Self { stages })
    }

    /// One stage per missing count, `epochs` split as evenly as possible
    /// (earlier stages take the remainder), then a mixed stage lasting a
    /// tenth of `epochs`, rounded up.
    pub fn staged(epochs: usize, modalities: usize) -> Result<Self> {
        let levels = modalities.saturating_sub(1);
        if levels == 0 || epochs < levels {
            return Err(Error::Config(format!(
                "{epochs} epochs cannot cover {levels} curriculum stages"
            )));
        }
        let mut stages: Vec<(Stage, usize)> = (1..=levels)
            .map(|k| {
                (
                    Stage::Missing(k),
                    epochs / levels + usize::from(k <= epochs % levels),
                )
            })
            .collect();
        stages.push((Stage::Mixed, epochs.div_ceil(10)));
        Self::new(stages, modalities)
    }

    /// The no-curriculum variant: every epoch draws from all tasks.
    pub fn uniform(epochs: usize) -> Result<Self> {
        Self::new(vec![(Stage::Mixed, epochs)], usize::MAX)
    }

    pub fn stages(&self) -> &[(Stage, usize)] {
        &self.stages
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.1).sum()
    }

    /// Stage in force during `epoch` (0-based); the last stage persists past the end.
    pub fn stage_at(&self, epoch: usize) -> Stage {
        let mut end = 0;
        for &(stage, span) in &self.stages {
            end += span;
            if epoch < end {
                return stage;
            }
        }
        self.stages.last().expect("non-empty").0
    }
}

/// Uniform draw over the masks with exactly `missing` absent modalities.
pub fn sample_mask_for_stage<R: Rng>(
    missing: usize,
    modalities: usize,
    rng: &mut R,
) -> Result<AvailabilityMask> {
    if missing == 0 || missing >= modalities {
        return Err(Error::Contract(format!(
            "cannot draw a task with {missing} of {modalities} modalities missing"
        )));
    }
    let support = AvailabilityMask::with_missing_count(modalities, missing);
    Ok(*support.choose(rng).expect("non-empty support"))
}

pub fn sample_mask<R: Rng>(
    stage: Stage,
    modalities: usize,
    rng: &mut R,
) -> Result<AvailabilityMask> {
    match stage {
        Stage::Missing(k) => sample_mask_for_stage(k, modalities, rng),
        Stage::Mixed => Ok(*AvailabilityMask::synthesis_tasks(modalities)
            .choose(rng)
            .ok_or_else(|| {
                Error::Contract(format!("no synthesis task with {modalities} modalities"))
            })?),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// First and second moment estimates, one array per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(tensors: &[Tensor<f32>]) -> Self {
        Self {
            m: tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
            t: 0,
        }
    }

    /// Clip, then apply one bias-corrected Adam update. Returns the gradient
    /// norm before clipping.
    pub fn update(
        &mut self,
        config: &AdamConfig,
        params: &mut [Tensor<f32>],
        grads: &[Vec<f32>],
    ) -> Result<f64> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Contract(
                "optimizer state does not match parameters".into(),
            ));
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let scale = match config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - config.beta1.powi(self.t as i32);
        let bc2 = 1.0 - config.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if p.numel() != g.len() {
                return Err(Error::Dimension(
                    "gradient does not match its parameter".into(),
                ));
            }
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi as f64 * scale;
                let m_new = config.beta1 * *mi as f64 + (1.0 - config.beta1) * gi;
                let v_new = config.beta2 * *vi as f64 + (1.0 - config.beta2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let step = config.lr * (m_new / bc1) / ((v_new / bc2).sqrt() + config.eps);
                *pi = (*pi as f64 - step) as f32;
            }
        }
        Ok(norm)
    }
}

/// Everything besides the network weights that training and sampling must agree on.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    pub schedule: NoiseSchedule,
    pub frequency: FrequencyConfig,
    pub options: StackOptions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub curriculum: CurriculumSchedule,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub pipeline: Pipeline,
    pub train: TrainConfig,
    pub adam: AdamState,
    pub step: u64,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(params: DenoiserParams, pipeline: Pipeline, train: TrainConfig) -> Result<Self> {
        params.check_layout()?;
        let n = params.config.out_channels;
        if params.config.in_channels != n + 1 {
            return Err(Error::Config(format!(
                "{} input channels for {n} modalities plus guidance",
                params.config.in_channels
            )));
        }
        if train.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size {} is below the norm-layer minimum of 2",
                train.batch_size
            )));
        }
        let adam = AdamState::zeros_like(&params.tensors);
        Ok(Self {
            params,
            pipeline,
            train,
            adam,
            step: 0,
            epoch: 0,
        })
    }

    pub fn modalities(&self) -> usize {
        self.params.config.out_channels
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.train.curriculum.total_epochs()
    }
}

/// A sample together with its precomputed guidance bands.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub sample: PhantomSample,
    pub bank: GuidanceBank,
}

pub fn prepare(samples: &[PhantomSample], frequency: &FrequencyConfig) -> Vec<PreparedSample> {
    samples
        .iter()
        .map(|s| PreparedSample {
            sample: s.clone(),
            bank: GuidanceBank::new(s, &frequency.kernel, frequency.high_pass),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub step: u64,
    pub stage: Stage,
    /// One mask per batch element.
    pub masks: Vec<AvailabilityMask>,
    pub loss: f64,
    pub grad_norm: f64,
}

fn gaussian_image<R: Rng>(h: usize, w: usize, rng: &mut R) -> Image {
    Image::new(
        h,
        w,
        (0..h * w).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .expect("positive size")
}

/// One optimizer step on `batch`. Every sample gets its own mask from the
/// current curriculum stage (all masks are drawn first), then its own
/// timestep and noise. The
/// loss covers the missing-modality channels only.
pub fn train_step<R: Rng>(
    state: &mut TrainState,
    batch: &[&PreparedSample],
    rng: &mut R,
) -> Result<StepOutcome> {
    if batch.len() < 2 {
        return Err(Error::Config(format!(
            "batch of {} is below the norm-layer minimum of 2",
            batch.len()
        )));
    }
    let n = state.modalities();
    let stage = state.train.curriculum.stage_at(state.epoch);
    let masks = draw_masks(stage, n, batch.len(), rng)?;
    let schedule = &state.pipeline.schedule;
    let (h, w) = batch[0].sample.dims();

    let mut stacks = Vec::with_capacity(batch.len());
    let mut timesteps = Vec::with_capacity(batch.len());
    let mut target = vec![0.0f32; batch.len() * n * h * w];
    let mut planes = vec![false; batch.len() * n];
    for (bi, (item, &mask)) in batch.iter().zip(&masks).enumerate() {
        let t = rng.gen_range(1..=schedule.steps());
        let mut noisy = Vec::with_capacity(mask.missing_count());
        for m in mask.missing() {
            let eps = gaussian_image(h, w, rng);
            let x0 = &item.sample.modalities[m];
            let xt = schedule.forward_sample(x0.data(), t, eps.data())?;
            noisy.push(Image::new(h, w, xt)?);
            let plane = bi * n + m;
            planes[plane] = true;
            for (dst, &e) in target[plane * h * w..(plane + 1) * h * w]
                .iter_mut()
                .zip(eps.data())
            {
                *dst = e as f32;
            }
        }
        let guidance = item.bank.pair(mask, state.pipeline.frequency.selection)?;
        stacks.push(assemble_input(
            &item.sample,
            mask,
            &noisy,
            &guidance,
            t,
            schedule,
            state.pipeline.options,
        )?);
        timesteps.push(t);
    }

    let mut graph = Graph::new();
    let vars: Vec<Var> = state
        .params
        .tensors
        .iter()
        .map(|t| graph.leaf(t.clone(), true))
        .collect();
    let input = graph.constant(stack_batch::<f32>(&stacks)?);
    let out = trace(
        &mut graph,
        &state.params.config,
        &vars,
        &mut state.params.norms,
        input,
        &timesteps,
        NormMode::Train,
    )?;
    let target = graph.constant(Tensor::new(vec![batch.len(), n, h, w], target)?);
    let loss_var = graph.masked_mse(out, target, &planes)?;
    let loss = graph.scalar(loss_var)? as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "training loss became {loss} at step {}",
            state.step
        )));
    }
    let mut grads = graph.backward(loss_var)?;
    let flat: Vec<Vec<f32>> = vars
        .iter()
        .zip(&state.params.tensors)
        .map(|(v, t)| grads.take(*v).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(graph);
    let grad_norm = state
        .adam
        .update(&state.train.adam, &mut state.params.tensors, &flat)?;
    state.step += 1;
    Ok(StepOutcome {
        step: state.step,
        stage,
        masks,
        loss,
        grad_norm,
    })
}

/// Generator for training step `step` of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(!seed);
    rng.set_stream(epoch as u64);
    rng
}

fn draw_masks<R: Rng>(
    stage: Stage,
    modalities: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<AvailabilityMask>> {
    (0..count)
        .map(|_| sample_mask(stage, modalities, rng))
        .collect()
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub outcome: StepOutcome,
    pub wall_ms: f64,
}

/// Deterministic training log; the `masks` column lists the batch's masks
/// separated by spaces.
pub const TRAIN_LOG_HEADER: &str = "step,stage,masks,loss,grad_norm";

/// Wall-clock companion log, kept apart so the training log stays reproducible.
pub const TIMING_LOG_HEADER: &str = "step,wall_ms";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6}",
            self.outcome.step,
            self.outcome.stage.name(),
            self.outcome
                .masks
                .iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            self.outcome.loss,
            self.outcome.grad_norm
        )
    }

    pub fn timing_row(&self) -> String {
        format!("{},{:.1}", self.outcome.step, self.wall_ms)
    }
}

/// Train from the state's current epoch to the end of its curriculum, or
/// for at most `max_epochs` more epochs. Every sample appears once per epoch
/// in a seeded order; a trailing batch smaller than 2 is skipped.
pub fn train(
    state: &mut TrainState,
    data: &[PreparedSample],
    max_epochs: Option<usize>,
    on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<Vec<f64>> {
    if data.len() < 2 {
        return Err(Error::Input(format!(
            "{} training samples, need at least 2",
            data.len()
        )));
    }
    let started = Instant::now();
    let total = state.train.curriculum.total_epochs();
    let stop = max_epochs.map_or(total, |e| (state.epoch + e).min(total));
    let mut losses = Vec::new();
    while state.epoch < stop {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut epoch_rng(state.train.seed, state.epoch));
        for chunk in order.chunks(state.train.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &data[i]).collect();
            let mut rng = step_rng(state.train.seed, state.step);
            let outcome = train_step(state, &batch, &mut rng)?;
            losses.push(outcome.loss);
            on_step(&StepRecord {
                outcome,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            })?;
        }
        state.epoch += 1;
    }
    Ok(losses)
}

/// Sizes of the batches [`train`] runs per epoch.
fn batch_sizes(samples: usize, batch_size: usize) -> Vec<usize> {
    let mut sizes = vec![batch_size; samples / batch_size];
    if samples % batch_size >= 2 {
        sizes.push(samples % batch_size);
    }
    sizes
}

/// The stage and per-sample masks every step of a full run over `samples`
/// training samples will draw, in order.
pub fn mask_plan(
    train: &TrainConfig,
    modalities: usize,
    samples: usize,
) -> Result<Vec<(Stage, Vec<AvailabilityMask>)>> {
    let sizes = batch_sizes(samples, train.batch_size);
    let mut plan = Vec::new();
    for epoch in 0..train.curriculum.total_epochs() {
        let stage = train.curriculum.stage_at(epoch);
        for &size in &sizes {
            let mut rng = step_rng(train.seed, plan.len() as u64);
            plan.push((stage, draw_masks(stage, modalities, size, &mut rng)?));
        }
    }
    Ok(plan)
}

/// Mean of the `window` losses ending at 1-based step `step`.
pub fn running_loss(losses: &[f64], step: usize, window: usize) -> Option<f64> {
    if step == 0 || step > losses.len() || window == 0 {
        return None;
    }
    let lo = step.saturating_sub(window);
    let slice = &losses[lo..step];
    Some(slice.iter().sum::<f64>() / slice.len() as f64)
}
