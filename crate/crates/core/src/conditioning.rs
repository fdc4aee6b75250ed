//! Availability masks, assembly of the five-channel network input and the
//! condition-channel drop applied to network outputs.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::frequency::GuidancePair;
use crate::image::Image;
use crate::phantoms::PhantomSample;
use crate::schedule::{NoiseSchedule, Phase};

/// Canonical modality order. Channel `i` of every stack and every network
/// output belongs to `MODALITIES[i]`.
pub const MODALITIES: [&str; 4] = ["T1", "T2", "FLAIR", "T1ce"];

/// Ordered presence flags over the modality list; bit `i` set means modality
/// `i` is provided as an input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AvailabilityMask {
    bits: u8,
    len: u8,
}

impl AvailabilityMask {
    pub const MAX_MODALITIES: usize = 8;

    pub fn new(flags: &[bool]) -> Result<Self> {
        if flags.is_empty() || flags.len() > Self::MAX_MODALITIES {
            return Err(Error::Input(format!(
                "masks cover 1..={} modalities, got {}",
                Self::MAX_MODALITIES,
                flags.len()
            )));
        }
        let bits = flags
            .iter()
            .enumerate()
            .fold(0u8, |acc, (i, &f)| if f { acc | (1 << i) } else { acc });
        Ok(Self {
            bits,
            len: flags.len() as u8,
        })
    }

    /// Mask from the low `len` bits of `bits` (bit `i` is modality `i`).
    pub fn from_bits(bits: u8, len: usize) -> Result<Self> {
        if len == 0 || len > Self::MAX_MODALITIES || (len < 8 && bits >> len != 0) {
            return Err(Error::Input(format!(
                "bits {bits:#b} do not fit {len} modalities"
            )));
        }
        Ok(Self {
            bits,
            len: len as u8,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn is_available(&self, modality: usize) -> bool {
        modality < self.len() && self.bits & (1 << modality) != 0
    }

    pub fn flags(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.is_available(i)).collect()
    }

    pub fn available(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.is_available(i))
    }

    pub fn missing(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| !self.is_available(i))
    }

    pub fn available_count(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn missing_count(&self) -> usize {
        self.len() - self.available_count()
    }

    /// At least one input and at least one target.
    pub fn is_synthesis_task(&self) -> bool {
        self.available_count() > 0 && self.missing_count() > 0
    }

    pub fn ensure_synthesis_task(&self) -> Result<()> {
        match (self.available_count(), self.missing_count()) {
            (0, _) => Err(Error::Task(format!(
                "mask {self} provides no input modality"
            ))),
            (_, 0) => Err(Error::Task(format!(
                "mask {self} leaves nothing to synthesize"
            ))),
            _ => Ok(()),
        }
    }

    /// All `2^len` masks in increasing bit order.
    pub fn all(len: usize) -> Vec<Self> {
        (0..1u16 << len)
            .map(|b| Self {
                bits: b as u8,
                len: len as u8,
            })
            .collect()
    }

    /// The `2^len − 2` masks that define a synthesis task, in the order they
    /// appear in reports: by number of available modalities, then by string.
    pub fn synthesis_tasks(len: usize) -> Vec<Self> {
        let mut tasks: Vec<Self> = Self::all(len)
            .into_iter()
            .filter(Self::is_synthesis_task)
            .collect();
        tasks.sort_by_key(|m| (m.available_count(), m.to_string()));
        tasks
    }

    /// Masks with exactly `missing` modalities absent.
    pub fn with_missing_count(len: usize, missing: usize) -> Vec<Self> {
        Self::all(len)
            .into_iter()
            .filter(|m| m.missing_count() == missing)
            .collect()
    }

    pub fn available_names(&self) -> Vec<&'static str> {
        self.available()
            .filter_map(|i| MODALITIES.get(i).copied())
            .collect()
    }
}

impl fmt::Display for AvailabilityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len() {
            f.write_str(if self.is_available(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for AvailabilityMask {
    type Err = Error;

    /// Parses the `b0b1b2b3` form, e.g. `"0111"`.
    fn from_str(s: &str) -> Result<Self> {
        let flags = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Input(format!(
                    "invalid character {other:?} in mask {s:?}"
                ))),
            })
            .collect::<Result<Vec<bool>>>()?;
        Self::new(&flags)
    }
}

/// Mask over [`MODALITIES`] from a set of modality names (case-insensitive).
pub fn encode_mask(available: &[&str]) -> Result<AvailabilityMask> {
    encode_mask_in(&MODALITIES, available)
}

/// Mask over an arbitrary modality list.
pub fn encode_mask_in(modalities: &[&str], available: &[&str]) -> Result<AvailabilityMask> {
    let mut flags = vec![false; modalities.len()];
    for name in available {
        let idx = modalities
            .iter()
            .position(|m| m.eq_ignore_ascii_case(name))
            .ok_or_else(|| {
                Error::Input(format!(
                    "unknown modality {name:?}; expected one of {modalities:?}"
                ))
            })?;
        flags[idx] = true;
    }
    AvailabilityMask::new(&flags)
}

/// What the guidance channel carries along the trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GuidanceMode {
    /// Low-pass guide in the coarse phase, high-pass guide in the fine phase.
    Phased,
    LowOnly,
    HighOnly,
    /// Guidance channel held at zero.
    Off,
}

impl GuidanceMode {
    pub fn name(self) -> &'static str {
        match self {
            GuidanceMode::Phased => "phased",
            GuidanceMode::LowOnly => "low-only",
            GuidanceMode::HighOnly => "high-only",
            GuidanceMode::Off => "off",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            GuidanceMode::Phased => 0,
            GuidanceMode::LowOnly => 1,
            GuidanceMode::HighOnly => 2,
            GuidanceMode::Off => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => GuidanceMode::Phased,
            1 => GuidanceMode::LowOnly,
            2 => GuidanceMode::HighOnly,
            3 => GuidanceMode::Off,
            _ => return Err(Error::Config(format!("unknown guidance mode code {code}"))),
        })
    }
}

impl FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phased" => Ok(GuidanceMode::Phased),
            "low-only" => Ok(GuidanceMode::LowOnly),
            "high-only" => Ok(GuidanceMode::HighOnly),
            "off" => Ok(GuidanceMode::Off),
            _ => Err(Error::Config(format!(
                "unknown guidance mode {s:?} (phased, low-only, high-only, off)"
            ))),
        }
    }
}

/// Switches used by the ablation variants; the default is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StackOptions {
    pub guidance: GuidanceMode,
    /// When false, available-modality channels are fed as zeros.
    pub source_channels: bool,
}

impl Default for StackOptions {
    fn default() -> Self {
        Self {
            guidance: GuidanceMode::Phased,
            source_channels: true,
        }
    }
}

/// The network input: one channel per modality followed by the guidance channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningStack {
    pub channels: Vec<Image>,
    pub mask: AvailabilityMask,
    pub t: usize,
    pub phase: Phase,
}

impl ConditioningStack {
    pub fn guidance(&self) -> &Image {
        self.channels
            .last()
            .expect("stack always carries a guidance channel")
    }
}

/// Build the network input for one sample at timestep `t`.
///
/// `noisy` holds the current states of the missing modalities, in increasing
/// modality order.
pub fn assemble_input(
    sample: &PhantomSample,
    mask: AvailabilityMask,
    noisy: &[Image],
    guidance: &GuidancePair,
    t: usize,
    schedule: &NoiseSchedule,
    options: StackOptions,
) -> Result<ConditioningStack> {
    mask.ensure_synthesis_task()?;
    let n = mask.len();
    if sample.modalities.len() < n {
        return Err(Error::Contract(format!(
            "sample has {} modalities, mask covers {n}",
            sample.modalities.len()
        )));
    }
    if noisy.len() != mask.missing_count() {
        return Err(Error::Contract(format!(
            "mask {mask} has {} missing modalities but {} noisy states were supplied",
            mask.missing_count(),
            noisy.len()
        )));
    }
    let dims = sample.dims();
    for img in noisy.iter().chain([&guidance.lf_image, &guidance.hf_image]) {
        if img.dims() != dims {
            return Err(Error::Dimension(format!(
                "state of size {:?} for a {:?} sample",
                img.dims(),
                dims
            )));
        }
    }
    let phase = schedule.phase_of(t)?;
    let mut states = noisy.iter();
    let mut channels = Vec::with_capacity(n + 1);
    for m in 0..n {
        if mask.is_available(m) {
            channels.push(if options.source_channels {
                sample.modalities[m].clone()
            } else {
                Image::zeros(dims.0, dims.1)
            });
        } else {
            channels.push(states.next().expect("count checked above").clone());
        }
    }
    let guide = match (options.guidance, phase) {
        (GuidanceMode::Phased, Phase::Coarse) | (GuidanceMode::LowOnly, _) => {
            guidance.lf_image.clone()
        }
        (GuidanceMode::Phased, Phase::Fine) | (GuidanceMode::HighOnly, _) => {
            guidance.hf_image.clone()
        }
        (GuidanceMode::Off, _) => Image::zeros(dims.0, dims.1),
    };
    channels.push(guide);
    Ok(ConditioningStack {
        channels,
        mask,
        t,
        phase,
    })
}

/// Keep the network's outputs for missing modalities and replace the ones
/// for available modalities with the clean sources.
pub fn split_output(
    net_out: &[Image],
    mask: AvailabilityMask,
    sample: &PhantomSample,
) -> Result<Vec<Image>> {
    if net_out.len() != mask.len() {
        return Err(Error::Contract(format!(
            "network produced {} channels, mask covers {}",
            net_out.len(),
            mask.len()
        )));
    }
    net_out
        .iter()
        .enumerate()
        .map(|(m, img)| {
            if mask.is_available(m) {
                Ok(sample.modalities[m].clone())
            } else {
                img.ensure_same_dims(&sample.modalities[m])?;
                Ok(img.clone())
            }
        })
        .collect()
}
