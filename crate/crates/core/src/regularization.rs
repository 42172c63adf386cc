//! Random masking with a trainable masking factor, and SpecAugment-style
//! time/frequency masking of input features.

use mcsae_tensor::{Mode, Parameter, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;

/// Independent keep/drop draws: `0.0` (masked) with probability `p`,
/// otherwise `1.0`.
pub fn sample_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let p = p.clamp(0.0, 1.0);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 })
        .collect()
}

/// Masking gate whose masking probability is a trainable scalar.
#[derive(Clone, Debug)]
pub struct RandomMask {
    pub factor: Parameter,
}

impl RandomMask {
    pub fn new(name: impl Into<String>, initial_factor: f64) -> Self {
        Self {
            factor: Parameter::new(name, Tensor::scalar(initial_factor)),
        }
    }

    /// Masking probability actually used when sampling.
    pub fn probability(&self) -> f64 {
        self.factor.tensor.item().clamp(0.0, 1.0)
    }
}

/// Applies a freshly sampled mask to every row of `x` in train mode; the
/// identity in eval mode.
///
/// The sampled map is a constant. The result is further multiplied by
/// `1 - (p - stop_grad(p))`, which is exactly one in value but hands the
/// factor `p` a gradient of `-Σ g·x·m`: raising the masking probability is
/// credited with shrinking the kept activations.
pub fn mask_gate<R: Rng + ?Sized>(x: &Tensor, mask: &RandomMask, mode: Mode, rng: &mut R) -> Result<Tensor> {
    match mode {
        Mode::Eval => Ok(x.clone()),
        Mode::Train => {
            let map = Tensor::new(x.shape(), sample_mask(x.numel(), mask.probability(), rng))?;
            let p = &mask.factor.tensor;
            let surrogate = p.detach().sub(p)?.add_scalar(1.0);
            Ok(x.mul(&map)?.scale_by(&surrogate)?)
        }
    }
}

/// SpecAugment parameters: up to `freq_masks` bands of at most
/// `max_freq_width` mel bins and up to `time_masks` spans of at most
/// `max_time_width` frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecAugmentConfig {
    pub max_freq_width: usize,
    pub max_time_width: usize,
    pub freq_masks: usize,
    pub time_masks: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            max_freq_width: 8,
            max_time_width: 100,
            freq_masks: 1,
            time_masks: 1,
        }
    }
}

impl SpecAugmentConfig {
    pub fn validate(&self, bins: usize, frames: usize) -> Result<()> {
        if self.max_freq_width > bins || self.max_time_width > frames {
            return Err(Error::Config(format!(
                "specaug.F ({}) must be <= {bins} bins and specaug.T ({}) <= {frames} frames",
                self.max_freq_width, self.max_time_width
            )));
        }
        Ok(())
    }
}

/// Zeroes whole mel bands `(start, width)` and frame spans `(start, width)`.
/// Ranges are clipped to the matrix.
pub fn zero_regions(f: &FeatureMatrix, bands: &[(usize, usize)], spans: &[(usize, usize)]) -> FeatureMatrix {
    let mut out = f.clone();
    let (d, l) = (f.bins(), f.frames());
    for &(start, width) in bands {
        for bin in start.min(d)..(start + width).min(d) {
            out.values[bin * l..(bin + 1) * l].fill(0.0);
        }
    }
    for &(start, width) in spans {
        for bin in 0..d {
            out.values[bin * l + start.min(l)..bin * l + (start + width).min(l)].fill(0.0);
        }
    }
    out
}

fn draw_region<R: Rng + ?Sized>(max_width: usize, extent: usize, rng: &mut R) -> (usize, usize) {
    let width = rng.gen_range(0..=max_width.min(extent));
    let start = rng.gen_range(0..=extent - width);
    (start, width)
}

/// Random frequency and time masking for the training path.
pub fn spec_augment<R: Rng + ?Sized>(f: &FeatureMatrix, cfg: &SpecAugmentConfig, rng: &mut R) -> FeatureMatrix {
    let bands: Vec<_> = (0..cfg.freq_masks)
        .map(|_| draw_region(cfg.max_freq_width, f.bins(), rng))
        .collect();
    let spans: Vec<_> = (0..cfg.time_masks)
        .map(|_| draw_region(cfg.max_time_width, f.frames(), rng))
        .collect();
    zero_regions(f, &bands, &spans)
}
