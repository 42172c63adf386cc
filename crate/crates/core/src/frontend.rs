//! Log-mel filterbank features, sliding-window normalization and fixed-length
//! cropping, plus the binary feature file and WAV input.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, IoContext, Result};

pub const LOG_FLOOR: f64 = 1e-10;
pub const STD_FLOOR: f64 = 1e-8;
pub const FEATURE_MAGIC: &[u8; 4] = b"MCF1";

/// `D × L` log filterbank energies stored bin-major (`values[bin * L + frame]`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    bins: usize,
    frames: usize,
    pub values: Vec<f64>,
    pub frame_shift_ms: f64,
    pub frame_len_ms: f64,
    pub sample_rate: u32,
}

impl FeatureMatrix {
    pub fn from_values(bins: usize, frames: usize, values: Vec<f64>) -> Result<Self> {
        if bins == 0 || frames == 0 || values.len() != bins * frames {
            return Err(Error::Input(format!(
                "feature matrix {bins}×{frames} cannot hold {} values",
                values.len()
            )));
        }
        Ok(Self {
            bins,
            frames,
            values,
            frame_shift_ms: 10.0,
            frame_len_ms: 25.0,
            sample_rate: 16_000,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    fn with_values(&self, frames: usize, values: Vec<f64>) -> Self {
        Self {
            bins: self.bins,
            frames,
            values,
            ..*self
        }
    }

    /// Frames `[start, start + len)` (which must lie inside the matrix).
    pub fn frame_slice(&self, start: usize, len: usize) -> Self {
        let mut values = Vec::with_capacity(self.bins * len);
        for b in 0..self.bins {
            values.extend_from_slice(&self.values[b * self.frames + start..b * self.frames + start + len]);
        }
        self.with_values(len, values)
    }

    /// Writes the `MCF1` container: magic, `u32` bins, frames and sample rate
    /// (little-endian), then the values as little-endian `f32`, bin-major.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        for v in [self.bins as u32, self.frames as u32, self.sample_rate] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for &v in &self.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(r: &mut R) -> std::result::Result<Self, String> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head).map_err(|e| format!("header: {e}"))?;
        if &head[..4] != FEATURE_MAGIC {
            return Err(format!("bad magic {:?}", &head[..4]));
        }
        let field = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (bins, frames, sample_rate) = (field(0) as usize, field(1) as usize, field(2));
        let mut raw = vec![0u8; bins * frames * 4];
        r.read_exact(&mut raw).map_err(|e| format!("values: {e}"))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let mut f = Self::from_values(bins, frames, values).map_err(|e| e.to_string())?;
        f.sample_rate = sample_rate;
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).at(path)?);
        self.write_to(&mut w).at(path)?;
        w.flush().at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).at(path)?);
        Self::read_from(&mut r).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over `[0, sr/2]`, one row of `n_fft/2 + 1` weights per band.
pub struct MelFilterbank {
    pub bands: usize,
    pub n_fft: usize,
    pub weights: Vec<Vec<f64>>,
    /// Band edge frequencies in Hz: `bands + 2` points, centers at `1..=bands`.
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(bands: usize, n_fft: usize, sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges_hz: Vec<f64> = (0..bands + 2)
            .map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let weights = (0..bands)
            .map(|m| {
                let (lo, center, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * sample_rate as f64 / n_fft as f64;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= center {
                            (f - lo) / (center - lo)
                        } else {
                            (hi - f) / (hi - center)
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            bands,
            n_fft,
            weights,
            edges_hz,
        }
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|row| row.iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }
}

/// Log-mel analysis with a Hann window.
pub struct LogMel {
    pub sample_rate: u32,
    pub win: usize,
    pub hop: usize,
    filterbank: MelFilterbank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl LogMel {
    /// `win_ms`/`hop_ms` analysis at `sample_rate`; the FFT size is the next
    /// power of two at or above the window (512 for 25 ms at 16 kHz).
    pub fn new(sample_rate: u32, bands: usize, win_ms: f64, hop_ms: f64) -> Result<Self> {
        if sample_rate < 8_000 {
            return Err(Error::Input(format!("sample rate {sample_rate} Hz is below 8 kHz")));
        }
        let win = (sample_rate as f64 * win_ms / 1000.0).round() as usize;
        let hop = (sample_rate as f64 * hop_ms / 1000.0).round() as usize;
        if bands == 0 || win == 0 || hop == 0 {
            return Err(Error::Input("bands, window and hop must be positive".into()));
        }
        let n_fft = win.next_power_of_two();
        let window = (0..win)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos())
            .collect();
        Ok(Self {
            sample_rate,
            win,
            hop,
            filterbank: MelFilterbank::new(bands, n_fft, sample_rate),
            window,
            fft: FftPlanner::new().plan_fft_forward(n_fft),
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn frame_count(&self, samples: usize) -> Option<usize> {
        (samples >= self.win).then(|| 1 + (samples - self.win) / self.hop)
    }

    pub fn compute(&self, samples: &[f64]) -> Result<FeatureMatrix> {
        let frames = self.frame_count(samples.len()).ok_or_else(|| {
            Error::Input(format!(
                "{} samples is shorter than one {}-sample window",
                samples.len(),
                self.win
            ))
        })?;
        let n_fft = self.filterbank.n_fft;
        let bands = self.filterbank.bands;
        let mut values = vec![0.0; bands * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        for t in 0..frames {
            let frame = &samples[t * self.hop..t * self.hop + self.win];
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for ((c, s), w) in buf.iter_mut().zip(frame).zip(&self.window) {
                c.re = s * w;
            }
            self.fft.process(&mut buf);
            let power: Vec<f64> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
            for (b, e) in self.filterbank.apply(&power).into_iter().enumerate() {
                values[b * frames + t] = e.max(LOG_FLOOR).ln();
            }
        }
        let mut f = FeatureMatrix::from_values(bands, frames, values)?;
        f.sample_rate = self.sample_rate;
        f.frame_len_ms = self.win as f64 * 1000.0 / self.sample_rate as f64;
        f.frame_shift_ms = self.hop as f64 * 1000.0 / self.sample_rate as f64;
        Ok(f)
    }
}

/// Log-mel energies with 25 ms windows every 10 ms.
pub fn log_mel(samples: &[f64], sample_rate: u32, bands: usize) -> Result<FeatureMatrix> {
    LogMel::new(sample_rate, bands, 25.0, 10.0)?.compute(samples)
}

/// Per-bin mean/variance normalization over a `window`-frame window around
/// each frame. The window is shifted inward at the utterance edges so it
/// always spans `min(window, L)` frames.
pub fn cmvn_sliding(f: &FeatureMatrix, window: usize) -> FeatureMatrix {
    let (d, l) = (f.bins(), f.frames());
    let w = window.clamp(1, l);
    let mut out = vec![0.0; d * l];
    for t in 0..l {
        let start = t.saturating_sub(w / 2).min(l - w);
        for b in 0..d {
            let seg = &f.values[b * l + start..b * l + start + w];
            let mean = seg.iter().sum::<f64>() / w as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            out[b * l + t] = (f.values[b * l + t] - mean) / var.sqrt().max(STD_FLOOR);
        }
    }
    f.with_values(l, out)
}

/// Window start used by [`cmvn_sliding`] for frame `t`.
pub fn cmvn_window_start(t: usize, window: usize, frames: usize) -> usize {
    let w = window.clamp(1, frames);
    t.saturating_sub(w / 2).min(frames - w)
}

/// Crops or pads to exactly `target` frames.
///
/// Longer inputs take a uniformly random contiguous crop when `rng` is given
/// (training) and the center crop otherwise. Shorter inputs repeat from the
/// first frame until `target` frames are filled.
pub fn fix_length<R: Rng + ?Sized>(f: &FeatureMatrix, target: usize, rng: Option<&mut R>) -> FeatureMatrix {
    let l = f.frames();
    match l.cmp(&target) {
        std::cmp::Ordering::Equal => f.clone(),
        std::cmp::Ordering::Greater => {
            let start = match rng {
                Some(rng) => rng.gen_range(0..=l - target),
                None => (l - target) / 2,
            };
            f.frame_slice(start, target)
        }
        std::cmp::Ordering::Less => {
            let mut values = Vec::with_capacity(f.bins() * target);
            for b in 0..f.bins() {
                let row = &f.values[b * l..(b + 1) * l];
                values.extend((0..target).map(|t| row[t % l]));
            }
            f.with_values(target, values)
        }
    }
}

/// Mono 16-bit PCM samples scaled to `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "expected mono 16-bit PCM, got {} channel(s) of {}-bit {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    Ok((samples, spec.sample_rate))
}

pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let fmt_err = |e: hound::Error| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(fmt_err)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(fmt_err)?;
    }
    w.finalize().map_err(fmt_err)
}
