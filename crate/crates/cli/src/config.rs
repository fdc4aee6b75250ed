//! Flat `key = value` run configuration.
//!
//! Every key has a default, can be set from a config file, and can be
//! overridden by the command-line flag of the same name (underscores become
//! dashes). Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use freqdiff::conditioning::{AvailabilityMask, GuidanceMode, StackOptions};
use freqdiff::denoiser::DenoiserConfig;
use freqdiff::frequency::{
    default_sigma, FrequencyConfig, GaussianKernel, HighPassMode, SourceSelection,
};
use freqdiff::schedule::NoiseSchedule;
use freqdiff::trainer::{AdamConfig, CurriculumSchedule, Pipeline, Stage, TrainConfig};
use freqdiff::{Error, Result};

/// Number of modalities every model in this tool handles.
pub const MODALITY_COUNT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsimMode {
    Global,
    Window,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurriculumMode {
    Staged,
    Uniform,
}

/// Which masks `eval` and friends run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskSelection {
    All,
    List(Vec<AvailabilityMask>),
}

impl MaskSelection {
    pub fn masks(&self) -> Vec<AvailabilityMask> {
        match self {
            MaskSelection::All => AvailabilityMask::synthesis_tasks(MODALITY_COUNT),
            MaskSelection::List(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_reference_steps: usize,
    pub phase_boundary: Option<usize>,
    pub kernel_size: usize,
    pub kernel_sigma: Option<f64>,
    pub hf_mode: HighPassMode,
    pub selection: SourceSelection,
    pub guidance: GuidanceMode,
    pub source_channels: bool,
    pub depth: usize,
    pub base_width: usize,
    pub time_embed_dim: usize,
    pub epochs: usize,
    pub curriculum: CurriculumMode,
    pub stage_epochs: Option<Vec<usize>>,
    pub mixed_epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub init_seed: u64,
    pub train_seed: u64,
    pub sample_seed: u64,
    pub feature_seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub data_seed: u64,
    pub mask: Option<AvailabilityMask>,
    pub masks: MaskSelection,
    pub limit: usize,
    pub ssim_mode: SsimMode,
    pub variants: Vec<String>,
    pub t_list: Vec<usize>,
    pub bootstrap_resamples: usize,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub family_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let net = DenoiserConfig::default();
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            beta_reference_steps: 200,
            phase_boundary: None,
            kernel_size: 21,
            kernel_sigma: None,
            hf_mode: HighPassMode::Residual,
            selection: SourceSelection::Dynamic,
            guidance: GuidanceMode::Phased,
            source_channels: true,
            depth: net.depth,
            base_width: net.base_width,
            time_embed_dim: net.time_embed_dim,
            epochs: 30,
            curriculum: CurriculumMode::Staged,
            stage_epochs: None,
            mixed_epochs: None,
            batch_size: 16,
            lr: adam.lr,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            clip_norm: adam.clip_norm.unwrap_or(0.0),
            init_seed: 0,
            train_seed: 1,
            sample_seed: 2,
            feature_seed: 3,
            count: 2000,
            image_size: 32,
            data_seed: 1,
            mask: None,
            masks: MaskSelection::All,
            limit: 0,
            ssim_mode: SsimMode::Global,
            variants: ABLATION_VARIANTS.iter().map(|s| s.to_string()).collect(),
            t_list: vec![25, 50, 100, 200],
            bootstrap_resamples: 2000,
            train_data: None,
            test_data: None,
            checkpoint: None,
            family_dir: None,
            out: None,
        }
    }
}

/// Variants `ablate` knows how to build, in report order.
pub const ABLATION_VARIANTS: [&str; 7] = [
    "full",
    "no-guidance",
    "no-source-channels",
    "lf-only",
    "hf-only",
    "no-curriculum",
    "fixed-source",
];

/// Documentation for one key; the default comes from [`RunConfig::default`].
pub struct KeySpec {
    pub name: &'static str,
    pub help: &'static str,
    /// Subcommands that read the key.
    pub commands: &'static [&'static str],
}

const MODEL: &[&str] = &["train", "ablate", "sweep-t"];
const EVAL: &[&str] = &["eval", "ablate", "sweep-t"];

pub const KEYS: &[KeySpec] = &[
    KeySpec { name: "steps", help: "diffusion steps T", commands: MODEL },
    KeySpec { name: "beta_start", help: "first noise variance of the linear schedule", commands: MODEL },
    KeySpec { name: "beta_end", help: "last noise variance of the linear schedule", commands: MODEL },
    KeySpec {
        name: "beta_reference_steps",
        help: "chain length the beta endpoints are quoted for; they are scaled by this/T (0 = use as given)",
        commands: MODEL,
    },
    KeySpec { name: "phase_boundary", help: "last fine-phase timestep (auto = T/2)", commands: MODEL },
    KeySpec { name: "kernel_size", help: "Gaussian kernel side (odd)", commands: MODEL },
    KeySpec { name: "kernel_sigma", help: "Gaussian kernel sigma (auto = size/6)", commands: MODEL },
    KeySpec { name: "hf_mode", help: "high-pass form: residual | as-written", commands: MODEL },
    KeySpec { name: "selection", help: "guidance source selection: dynamic | fixed", commands: MODEL },
    KeySpec { name: "guidance", help: "guide channel: phased | low-only | high-only | off", commands: MODEL },
    KeySpec { name: "source_channels", help: "feed available modalities to the network: true | false", commands: MODEL },
    KeySpec { name: "depth", help: "UNet resolution levels", commands: MODEL },
    KeySpec { name: "base_width", help: "channels at the top level", commands: MODEL },
    KeySpec { name: "time_embed_dim", help: "timestep embedding size", commands: MODEL },
    KeySpec { name: "epochs", help: "curriculum epochs E (a mixed stage of ceil(E/10) follows)", commands: MODEL },
    KeySpec { name: "curriculum", help: "staged | uniform", commands: MODEL },
    KeySpec { name: "stage_epochs", help: "epochs per missing-count stage, e.g. 4,3,3 (auto = even split)", commands: MODEL },
    KeySpec { name: "mixed_epochs", help: "epochs of the final mixed stage (auto = ceil(E/10))", commands: MODEL },
    KeySpec { name: "batch_size", help: "training batch size (>= 2)", commands: MODEL },
    KeySpec { name: "lr", help: "Adam learning rate", commands: MODEL },
    KeySpec { name: "adam_beta1", help: "Adam first-moment decay", commands: MODEL },
    KeySpec { name: "adam_beta2", help: "Adam second-moment decay", commands: MODEL },
    KeySpec { name: "adam_eps", help: "Adam denominator epsilon", commands: MODEL },
    KeySpec { name: "clip_norm", help: "global gradient-norm clip (0 = off)", commands: MODEL },
    KeySpec { name: "init_seed", help: "weight initialization seed", commands: MODEL },
    KeySpec { name: "train_seed", help: "shuffling, mask, timestep and noise seed", commands: MODEL },
    KeySpec {
        name: "sample_seed",
        help: "base seed of the sampling noise",
        commands: &["synth", "eval", "ablate", "sweep-t"],
    },
    KeySpec { name: "feature_seed", help: "seed of the LPIPS/FID feature extractor", commands: &["synth", "eval", "ablate", "sweep-t"] },
    KeySpec { name: "count", help: "samples to generate", commands: &["gen-data"] },
    KeySpec { name: "image_size", help: "phantom side length", commands: &["gen-data"] },
    KeySpec { name: "data_seed", help: "phantom generator seed", commands: &["gen-data"] },
    KeySpec { name: "mask", help: "availability mask for synth, e.g. 0111 (T1,T2,FLAIR,T1ce)", commands: &["synth"] },
    KeySpec { name: "masks", help: "all14 or a comma list of masks", commands: EVAL },
    KeySpec { name: "limit", help: "use only the first N test samples (0 = all)", commands: &["synth", "eval", "ablate", "sweep-t"] },
    KeySpec { name: "ssim_mode", help: "global | window (11x11 Gaussian)", commands: &["synth", "eval", "ablate", "sweep-t"] },
    KeySpec { name: "variants", help: "comma list of ablation variants", commands: &["ablate"] },
    KeySpec { name: "t_list", help: "comma list of step counts to sweep", commands: &["sweep-t"] },
    KeySpec { name: "bootstrap_resamples", help: "resamples for ablation intervals", commands: &["ablate"] },
    KeySpec { name: "train_data", help: "training dataset container", commands: MODEL },
    KeySpec { name: "test_data", help: "test dataset container", commands: &["synth", "eval", "ablate", "sweep-t"] },
    KeySpec { name: "checkpoint", help: "trained model to load", commands: &["synth", "eval"] },
    KeySpec { name: "family_dir", help: "directory of per-variant checkpoints, reused when present", commands: &["ablate", "sweep-t"] },
    KeySpec {
        name: "out",
        help: "output: dataset file (gen-data), checkpoint file (train) or report directory",
        commands: &["gen-data", "train", "synth", "eval", "ablate", "sweep-t"] },
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items = value
        .split(',')
        .map(|s| parse(key, s.trim()))
        .collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    Ok(items)
}

fn parse_masks(value: &str) -> Result<MaskSelection> {
    if value == "all14" || value == "all" {
        return Ok(MaskSelection::All);
    }
    let masks = value
        .split(',')
        .map(|s| {
            let m: AvailabilityMask = s.trim().parse()?;
            check_task_mask(m)?;
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskSelection::List(masks))
}

/// A mask this tool can synthesize for: four modalities, at least one given,
/// at least one missing.
pub fn check_task_mask(mask: AvailabilityMask) -> Result<()> {
    if mask.len() != MODALITY_COUNT {
        return Err(Error::Input(format!(
            "mask {mask} has {} positions, expected {MODALITY_COUNT}",
            mask.len()
        )));
    }
    mask.ensure_synthesis_task()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn show_auto<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("auto".to_string(), |x| x.to_string())
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or(String::new(), |p| p.display().to_string())
}

fn path_value(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "steps" => self.steps = parse(key, v)?,
            "beta_start" => self.beta_start = parse(key, v)?,
            "beta_end" => self.beta_end = parse(key, v)?,
            "beta_reference_steps" => self.beta_reference_steps = parse(key, v)?,
            "phase_boundary" => self.phase_boundary = parse_auto(key, v)?,
            "kernel_size" => self.kernel_size = parse(key, v)?,
            "kernel_sigma" => self.kernel_sigma = parse_auto(key, v)?,
            "hf_mode" => self.hf_mode = v.parse()?,
            "selection" => {
                self.selection = match v {
                    "dynamic" => SourceSelection::Dynamic,
                    "fixed" => SourceSelection::Fixed,
                    _ => {
                        return Err(Error::Config(format!(
                            "selection: expected dynamic or fixed, got {v:?}"
                        )))
                    }
                }
            }
            "guidance" => self.guidance = v.parse()?,
            "source_channels" => self.source_channels = parse_bool(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "base_width" => self.base_width = parse(key, v)?,
            "time_embed_dim" => self.time_embed_dim = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "curriculum" => {
                self.curriculum = match v {
                    "staged" => CurriculumMode::Staged,
                    "uniform" => CurriculumMode::Uniform,
                    _ => {
                        return Err(Error::Config(format!(
                            "curriculum: expected staged or uniform, got {v:?}"
                        )))
                    }
                }
            }
            "stage_epochs" => {
                self.stage_epochs = if v == "auto" {
                    None
                } else {
                    Some(parse_list(key, v)?)
                }
            }
            "mixed_epochs" => self.mixed_epochs = parse_auto(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "init_seed" => self.init_seed = parse(key, v)?,
            "train_seed" => self.train_seed = parse(key, v)?,
            "sample_seed" => self.sample_seed = parse(key, v)?,
            "feature_seed" => self.feature_seed = parse(key, v)?,
            "count" => self.count = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "mask" => {
                self.mask = if v.is_empty() {
                    None
                } else {
                    let m: AvailabilityMask = v.parse()?;
                    check_task_mask(m)?;
                    Some(m)
                }
            }
            "masks" => self.masks = parse_masks(v)?,
            "limit" => self.limit = parse(key, v)?,
            "ssim_mode" => {
                self.ssim_mode = match v {
                    "global" => SsimMode::Global,
                    "window" => SsimMode::Window,
                    _ => {
                        return Err(Error::Config(format!(
                            "ssim_mode: expected global or window, got {v:?}"
                        )))
                    }
                }
            }
            "variants" => {
                let list: Vec<String> = v.split(',').map(|s| s.trim().to_string()).collect();
                if let Some(bad) = list
                    .iter()
                    .find(|s| !ABLATION_VARIANTS.contains(&s.as_str()))
                {
                    return Err(Error::Config(format!(
                        "variants: unknown variant {bad:?} (known: {})",
                        ABLATION_VARIANTS.join(", ")
                    )));
                }
                self.variants = list;
            }
            "t_list" => self.t_list = parse_list(key, v)?,
            "bootstrap_resamples" => self.bootstrap_resamples = parse(key, v)?,
            "train_data" => self.train_data = path_value(v),
            "test_data" => self.test_data = path_value(v),
            "checkpoint" => self.checkpoint = path_value(v),
            "family_dir" => self.family_dir = path_value(v),
            "out" => self.out = path_value(v),
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Current value of `key` in the syntax [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "steps" => self.steps.to_string(),
            "beta_start" => self.beta_start.to_string(),
            "beta_end" => self.beta_end.to_string(),
            "beta_reference_steps" => self.beta_reference_steps.to_string(),
            "phase_boundary" => show_auto(&self.phase_boundary),
            "kernel_size" => self.kernel_size.to_string(),
            "kernel_sigma" => show_auto(&self.kernel_sigma),
            "hf_mode" => self.hf_mode.name().to_string(),
            "selection" => match self.selection {
                SourceSelection::Dynamic => "dynamic".into(),
                SourceSelection::Fixed => "fixed".into(),
            },
            "guidance" => self.guidance.name().to_string(),
            "source_channels" => self.source_channels.to_string(),
            "depth" => self.depth.to_string(),
            "base_width" => self.base_width.to_string(),
            "time_embed_dim" => self.time_embed_dim.to_string(),
            "epochs" => self.epochs.to_string(),
            "curriculum" => match self.curriculum {
                CurriculumMode::Staged => "staged".into(),
                CurriculumMode::Uniform => "uniform".into(),
            },
            "stage_epochs" => self
                .stage_epochs
                .as_ref()
                .map_or("auto".into(), |v| join(v)),
            "mixed_epochs" => show_auto(&self.mixed_epochs),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "init_seed" => self.init_seed.to_string(),
            "train_seed" => self.train_seed.to_string(),
            "sample_seed" => self.sample_seed.to_string(),
            "feature_seed" => self.feature_seed.to_string(),
            "count" => self.count.to_string(),
            "image_size" => self.image_size.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "mask" => self.mask.map_or(String::new(), |m| m.to_string()),
            "masks" => match &self.masks {
                MaskSelection::All => "all14".into(),
                MaskSelection::List(v) => join(v),
            },
            "limit" => self.limit.to_string(),
            "ssim_mode" => match self.ssim_mode {
                SsimMode::Global => "global".into(),
                SsimMode::Window => "window".into(),
            },
            "variants" => self.variants.join(","),
            "t_list" => join(&self.t_list),
            "bootstrap_resamples" => self.bootstrap_resamples.to_string(),
            "train_data" => show_path(&self.train_data),
            "test_data" => show_path(&self.test_data),
            "checkpoint" => show_path(&self.checkpoint),
            "family_dir" => show_path(&self.family_dir),
            "out" => show_path(&self.out),
            _ => return None,
        })
    }

    /// Apply a `key = value` file; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key = value",
                    origin.display(),
                    n + 1
                ))
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(msg) => {
                    Error::Config(format!("{}:{}: {msg}", origin.display(), n + 1))
                }
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_text(&text, path)
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| {
                format!(
                    "{} = {}\n",
                    k.name,
                    self.get(k.name).expect("every key has a value")
                )
            })
            .collect()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let schedule = if self.beta_reference_steps == 0 {
            NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)?
        } else {
            NoiseSchedule::linear_rescaled(
                self.steps,
                self.beta_start,
                self.beta_end,
                self.beta_reference_steps,
            )?
        };
        match self.phase_boundary {
            Some(b) => schedule.with_phase_boundary(b),
            None => Ok(schedule),
        }
    }

    pub fn pipeline(&self) -> Result<Pipeline> {
        let sigma = self
            .kernel_sigma
            .unwrap_or_else(|| default_sigma(self.kernel_size));
        Ok(Pipeline {
            schedule: self.schedule()?,
            frequency: FrequencyConfig {
                kernel: GaussianKernel::new(self.kernel_size, sigma)?,
                high_pass: self.hf_mode,
                selection: self.selection,
            },
            options: StackOptions {
                guidance: self.guidance,
                source_channels: self.source_channels,
            },
        })
    }

    pub fn denoiser(&self) -> Result<DenoiserConfig> {
        let config = DenoiserConfig {
            depth: self.depth,
            base_width: self.base_width,
            in_channels: MODALITY_COUNT + 1,
            out_channels: MODALITY_COUNT,
            time_embed_dim: self.time_embed_dim,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn curriculum_schedule(&self) -> Result<CurriculumSchedule> {
        let levels = MODALITY_COUNT - 1;
        let staged = CurriculumSchedule::staged(self.epochs, MODALITY_COUNT)?;
        let mut stages: Vec<(Stage, usize)> = staged.stages().to_vec();
        if let Some(spans) = &self.stage_epochs {
            if spans.len() != levels {
                return Err(Error::Config(format!(
                    "stage_epochs needs {levels} entries, got {}",
                    spans.len()
                )));
            }
            for (slot, &span) in stages.iter_mut().zip(spans) {
                slot.1 = span;
            }
        }
        if let Some(mixed) = self.mixed_epochs {
            let last = stages
                .last_mut()
                .expect("staged schedule ends in a mixed stage");
            last.1 = mixed;
            if mixed == 0 {
                stages.pop();
            }
        }
        match self.curriculum {
            CurriculumMode::Staged => CurriculumSchedule::new(stages, MODALITY_COUNT),
            // Same total length, every epoch drawing from all tasks.
            CurriculumMode::Uniform => {
                CurriculumSchedule::uniform(stages.iter().map(|s| s.1).sum())
            }
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let clip = self.clip_norm;
        if !(clip >= 0.0 && clip.is_finite()) {
            return Err(Error::Config(format!(
                "clip_norm must be non-negative, got {clip}"
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        Ok(TrainConfig {
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
                clip_norm: (clip > 0.0).then_some(clip),
            },
            curriculum: self.curriculum_schedule()?,
            seed: self.train_seed,
        })
    }

    /// The configuration of one ablation variant derived from this one.
    pub fn variant(&self, name: &str) -> Result<RunConfig> {
        let mut c = self.clone();
        match name {
            "full" => {}
            "no-guidance" => c.guidance = GuidanceMode::Off,
            "no-source-channels" => c.source_channels = false,
            "lf-only" => c.guidance = GuidanceMode::LowOnly,
            "hf-only" => c.guidance = GuidanceMode::HighOnly,
            "no-curriculum" => c.curriculum = CurriculumMode::Uniform,
            "fixed-source" => c.selection = SourceSelection::Fixed,
            _ => return Err(Error::Config(format!("unknown ablation variant {name:?}"))),
        }
        Ok(c)
    }

    pub fn require_path(&self, key: &str) -> Result<&Path> {
        let p = match key {
            "train_data" => &self.train_data,
            "test_data" => &self.test_data,
            "checkpoint" => &self.checkpoint,
            "family_dir" => &self.family_dir,
            "out" => &self.out,
            _ => return Err(Error::Config(format!("{key} is not a path key"))),
        };
        p.as_deref()
            .ok_or_else(|| Error::Config(format!("--{} is required", key.replace('_', "-"))))
    }
}
