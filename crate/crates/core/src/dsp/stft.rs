use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WindowKind {
    Rectangular,
    /// Periodic Hann.
    Hann,
    /// Square root of the periodic Hann window.
    SqrtHann,
}

impl WindowKind {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        (0..len)
            .map(|n| {
                let hann = 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos();
                match self {
                    WindowKind::Rectangular => 1.0,
                    WindowKind::Hann => hann,
                    WindowKind::SqrtHann => hann.sqrt(),
                }
            })
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            WindowKind::Rectangular => "rectangular",
            WindowKind::Hann => "hann",
            WindowKind::SqrtHann => "sqrt-hann",
        }
    }

    pub fn id(self) -> u32 {
        match self {
            WindowKind::Rectangular => 0,
            WindowKind::Hann => 1,
            WindowKind::SqrtHann => 2,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            0 => Some(WindowKind::Rectangular),
            1 => Some(WindowKind::Hann),
            2 => Some(WindowKind::SqrtHann),
            _ => None,
        }
    }
}

impl fmt::Display for WindowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WindowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectangular" | "rect" => Ok(WindowKind::Rectangular),
            "hann" => Ok(WindowKind::Hann),
            "sqrt-hann" | "sqrt_hann" => Ok(WindowKind::SqrtHann),
            other => Err(Error::Config(format!("unknown window `{other}`"))),
        }
    }
}

/// Frame geometry of a short-time Fourier transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_len: 512,
            hop: 256,
            window: WindowKind::SqrtHann,
        }
    }
}

impl StftConfig {
    /// Checks the frame geometry and that the squared window overlap-adds to
    /// a constant, which exact resynthesis requires.
    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 2 || !self.frame_len.is_power_of_two() {
            return Err(Error::param(
                "frame_len",
                "must be a power of two of at least 2",
            ));
        }
        if self.hop == 0 || self.frame_len % self.hop != 0 {
            return Err(Error::param("hop", "must divide frame_len"));
        }
        let w = self.window.coefficients(self.frame_len);
        let sums: Vec<f64> = (0..self.hop)
            .map(|n| w.iter().skip(n).step_by(self.hop).map(|v| v * v).sum())
            .collect();
        let mean = sums.iter().sum::<f64>() / sums.len() as f64;
        if mean <= 0.0 || sums.iter().any(|s| (s - mean).abs() > 1e-9 * mean) {
            return Err(Error::param(
                "window",
                format!(
                    "{} window with frame {} and hop {} does not overlap-add to a constant",
                    self.window, self.frame_len, self.hop
                ),
            ));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Leading zeros so every signal sample is covered by the same number
    /// of frames.
    fn pad_front(&self) -> usize {
        self.frame_len - self.hop
    }

    pub fn n_frames(&self, len: usize) -> usize {
        (self.pad_front() + len - 1) / self.hop + 1
    }
}

/// One-sided complex spectra, one frame per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frames: DMatrix<Complex64>,
    config: StftConfig,
    sample_rate: u32,
    signal_len: usize,
}

impl Spectrogram {
    pub fn new(
        frames: DMatrix<Complex64>,
        config: StftConfig,
        sample_rate: u32,
        signal_len: usize,
    ) -> Result<Self> {
        config.validate()?;
        if frames.ncols() != config.n_bins() {
            return Err(Error::dims(format!(
                "{} bins for frame length {}",
                frames.ncols(),
                config.frame_len
            )));
        }
        if frames.nrows() != config.n_frames(signal_len) {
            return Err(Error::dims(format!(
                "{} frames for a {signal_len}-sample signal",
                frames.nrows()
            )));
        }
        Ok(Self {
            frames,
            config,
            sample_rate,
            signal_len,
        })
    }

    pub fn frames(&self) -> &DMatrix<Complex64> {
        &self.frames
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.frames.ncols()
    }

    /// `|X|²` per bin.
    pub fn power(&self) -> DMatrix<f64> {
        self.frames.map(|c| c.norm_sqr())
    }

    pub(crate) fn aligned_with(&self, other: &Spectrogram) -> Result<()> {
        if self.frames.shape() != other.frames.shape() {
            return Err(Error::dims(format!(
                "spectrograms of shape {:?} and {:?}",
                self.frames.shape(),
                other.frames.shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn with_frames(&self, frames: DMatrix<Complex64>) -> Self {
        Self {
            frames,
            ..self.clone()
        }
    }
}

pub fn stft(w: &Waveform, config: &StftConfig) -> Result<Spectrogram> {
    config.validate()?;
    let n = config.frame_len;
    if w.len() < n {
        return Err(Error::Signal(format!(
            "signal of {} samples is shorter than one {n}-sample frame",
            w.len()
        )));
    }
    let win = config.window.coefficients(n);
    let pad = config.pad_front();
    let n_frames = config.n_frames(w.len());
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let bins = config.n_bins();
    let x = w.samples();
    let mut frames = DMatrix::<Complex64>::zeros(n_frames, bins);
    let mut buf = vec![Complex64::default(); n];
    for f in 0..n_frames {
        let start = f * config.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            let p = start + i;
            let v = if p >= pad && p - pad < x.len() {
                x[p - pad]
            } else {
                0.0
            };
            *b = Complex64::new(v * win[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            frames[(f, k)] = buf[k];
        }
    }
    Spectrogram::new(frames, *config, w.sample_rate(), w.len())
}

/// Weighted overlap-add resynthesis, normalized by the summed squared
/// window, truncated to the analyzed signal length.
pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    let config = s.config;
    config.validate()?;
    let n = config.frame_len;
    let win = config.window.coefficients(n);
    let pad = config.pad_front();
    let total = (s.n_frames() - 1) * config.hop + n;
    let mut out = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut buf = vec![Complex64::default(); n];
    let bins = config.n_bins();
    for f in 0..s.n_frames() {
        for k in 0..bins {
            buf[k] = s.frames[(f, k)];
        }
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        for k in bins..n {
            buf[k] = buf[n - k].conj();
        }
        ifft.process(&mut buf);
        let start = f * config.hop;
        for i in 0..n {
            out[start + i] += buf[i].re / n as f64 * win[i];
            norm[start + i] += win[i] * win[i];
        }
    }
    let samples = (pad..pad + s.signal_len)
        .map(|p| {
            if norm[p] > 1e-12 {
                out[p] / norm[p]
            } else {
                0.0
            }
        })
        .collect();
    Waveform::new(samples, s.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), 16000).unwrap()
    }

    #[test]
    fn default_geometry_has_257_bins() {
        let c = StftConfig::default();
        c.validate().unwrap();
        assert_eq!(c.n_bins(), 257);
    }

    #[test]
    fn roundtrip_is_exact_for_overlap_add_windows() {
        let x = noise(16000 + 123, 1);
        for config in [
            StftConfig::default(),
            StftConfig {
                frame_len: 256,
                hop: 64,
                window: WindowKind::SqrtHann,
            },
            StftConfig {
                frame_len: 128,
                hop: 128,
                window: WindowKind::Rectangular,
            },
        ] {
            let y = istft(&stft(&x, &config).unwrap()).unwrap();
            assert_eq!(y.len(), x.len());
            let err = x
                .samples()
                .iter()
                .zip(y.samples())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-6, "{config:?}: {err}");
        }
    }

    #[test]
    fn non_overlap_add_geometry_is_rejected() {
        let c = StftConfig {
            frame_len: 512,
            hop: 256,
            window: WindowKind::Hann,
        };
        assert!(c.validate().is_err());
        let c = StftConfig {
            frame_len: 500,
            hop: 250,
            window: WindowKind::SqrtHann,
        };
        assert!(c.validate().is_err());
        let c = StftConfig {
            frame_len: 512,
            hop: 200,
            window: WindowKind::SqrtHann,
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn bin_centred_sine_concentrates_energy() {
        let n = 512;
        let config = StftConfig {
            frame_len: n,
            hop: n,
            window: WindowKind::Rectangular,
        };
        let k0 = 37.0;
        let s: Vec<f64> = (0..4 * n)
            .map(|i| (2.0 * PI * k0 * i as f64 / n as f64).sin())
            .collect();
        let spec = stft(&Waveform::new(s, 16000).unwrap(), &config).unwrap();
        let p = spec.power();
        for f in 0..spec.n_frames() {
            let total: f64 = p.row(f).iter().sum();
            assert!(p[(f, 37)] >= 0.99 * total);
        }
    }

    #[test]
    fn zeros_map_to_zeros() {
        let z = Waveform::zeros(2000, 16000).unwrap();
        let spec = stft(&z, &StftConfig::default()).unwrap();
        assert!(spec.frames().iter().all(|c| c.norm() == 0.0));
        let back = istft(&spec).unwrap();
        assert!(back.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaling_the_spectrum_scales_the_signal() {
        let x = noise(3000, 2);
        let spec = stft(&x, &StftConfig::default()).unwrap();
        let doubled = spec.with_frames(spec.frames().map(|c| c * 2.0));
        let y = istft(&doubled).unwrap();
        for (a, b) in x.samples().iter().zip(y.samples()) {
            assert!((2.0 * a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn short_signal_is_an_error() {
        let x = noise(100, 3);
        assert!(matches!(
            stft(&x, &StftConfig::default()),
            Err(Error::Signal(_))
        ));
    }
}
