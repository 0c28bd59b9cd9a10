use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Signal("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Signal(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Mean power over all samples.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// On-disk sample encoding for [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    /// 16-bit PCM; samples outside `[-1, 1]` are clipped.
    Pcm16,
    Float32,
}

/// Reads a mono WAV file (integer PCM up to 32 bits or 32-bit float).
pub fn read_wav(path: &Path) -> Result<(Waveform, WavFormat)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Signal(format!(
            "{}: {} channels; only mono input is supported",
            path.display(),
            spec.channels
        )));
    }
    let (samples, format) = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::Signal(format!(
                    "{}: unsupported float width {}",
                    path.display(),
                    spec.bits_per_sample
                )));
            }
            let s = reader
                .samples::<f32>()
                .map(|r| r.map(f64::from))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            (s, WavFormat::Float32)
        }
        hound::SampleFormat::Int => {
            let scale = 2f64.powi(i32::from(spec.bits_per_sample) - 1);
            let s = reader
                .samples::<i32>()
                .map(|r| r.map(|v| f64::from(v) / scale))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let fmt = if spec.bits_per_sample <= 16 {
                WavFormat::Pcm16
            } else {
                WavFormat::Float32
            };
            (s, fmt)
        }
    };
    Ok((Waveform::new(samples, spec.sample_rate)?, format))
}

pub fn write_wav(path: &Path, w: &Waveform, format: WavFormat) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => hound::SampleFormat::Int,
            WavFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &v in &w.samples {
        match format {
            WavFormat::Pcm16 => {
                let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
                writer.write_sample(q)?;
            }
            WavFormat::Float32 => writer.write_sample(v as f32)?,
        }
    }
    writer.finalize()?;
    Ok(())
}

/// Zero crossings of the interpolation kernel on each side.
const SINC_HALF_WIDTH: f64 = 32.0;

/// Band-limited sample rate conversion with a Hann-windowed sinc kernel.
///
/// The cutoff sits at the lower of the two Nyquist frequencies, so
/// downsampling is anti-aliased.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::Signal("target sample rate must be positive".into()));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let ratio = f64::from(target_rate) / f64::from(w.sample_rate);
    let cutoff = ratio.min(1.0);
    let half = SINC_HALF_WIDTH / cutoff;
    let out_len = (w.len() as f64 * ratio).round() as usize;
    let x = &w.samples;
    let out: Vec<f64> = (0..out_len)
        .map(|n| {
            let t = n as f64 / ratio;
            let lo = (t - half).ceil().max(0.0) as usize;
            let hi = ((t + half).floor() as usize).min(x.len().saturating_sub(1));
            let mut acc = 0.0;
            for (k, &xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - k as f64;
                let win = 0.5 + 0.5 * (PI * d / half).cos();
                let arg = PI * d * cutoff;
                let sinc = if arg.abs() < 1e-12 {
                    1.0
                } else {
                    arg.sin() / arg
                };
                acc += xk * cutoff * sinc * win;
            }
            acc
        })
        .collect();
    Waveform::new(out, target_rate)
}
