use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{read_wav, resample, Waveform};
use crate::error::{Error, Result};

/// Highest harmonic frequency of synthetic voiced segments.
const VOICED_CUTOFF_HZ: f64 = 3800.0;
const NOISE_RMS: f64 = 0.1;
const SPEECH_PEAK: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    White,
    SpeechShaped,
    Babble,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::SpeechShaped => "speech-shaped",
            NoiseKind::Babble => "babble",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "speech-shaped" | "ssn" => Ok(NoiseKind::SpeechShaped),
            "babble" => Ok(NoiseKind::Babble),
            other => Err(Error::Config(format!("unknown noise kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub utterances: usize,
    pub duration_s: f64,
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
    pub noises: Vec<NoiseKind>,
    #[serde(default)]
    pub seed: u64,
    /// Length of each generated noise source.
    #[serde(default = "default_noise_duration")]
    pub noise_duration_s: f64,
}

fn default_rate() -> u32 {
    16000
}

fn default_noise_duration() -> f64 {
    10.0
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            utterances: 40,
            duration_s: 1.5,
            sample_rate: default_rate(),
            noises: vec![NoiseKind::White, NoiseKind::SpeechShaped],
            seed: 0,
            noise_duration_s: default_noise_duration(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.utterances == 0 {
            return Err(Error::param("utterances", "must be at least 1"));
        }
        if !(self.duration_s.is_finite() && self.duration_s >= 0.1) {
            return Err(Error::param("duration_s", "must be at least 0.1 s"));
        }
        if !(self.noise_duration_s.is_finite() && self.noise_duration_s >= 0.1) {
            return Err(Error::param("noise_duration_s", "must be at least 0.1 s"));
        }
        if self.sample_rate < 8000 {
            return Err(Error::param("sample_rate", "must be at least 8000 Hz"));
        }
        if self.noises.is_empty() {
            return Err(Error::param(
                "noises",
                "at least one noise kind is required",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSource {
    pub name: String,
    pub waveform: Waveform,
}

/// Clean utterances plus long noise recordings to draw mixtures from.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Waveform>,
    pub noises: Vec<NoiseSource>,
}

impl Corpus {
    pub fn noise(&self, name: &str) -> Option<&Waveform> {
        self.noises
            .iter()
            .find(|n| n.name == name)
            .map(|n| &n.waveform)
    }

    pub fn sample_rate(&self) -> Option<u32> {
        self.utterances.first().map(Waveform::sample_rate)
    }

    /// Loads every `*.wav` in `speech_dir` as an utterance and every `*.wav`
    /// in `noise_dir` as a noise source named after its file stem, both in
    /// file-name order. Files at other rates are resampled to `sample_rate`.
    pub fn from_wav_dirs(speech_dir: &Path, noise_dir: &Path, sample_rate: u32) -> Result<Self> {
        let load = |dir: &Path| -> Result<Vec<(String, Waveform)>> {
            let mut paths: Vec<_> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
                .collect();
            paths.sort();
            paths
                .into_iter()
                .map(|p| {
                    let (w, _) = read_wav(&p)?;
                    let w = if w.sample_rate() != sample_rate {
                        log::warn!(
                            "{}: resampling {} Hz to {} Hz",
                            p.display(),
                            w.sample_rate(),
                            sample_rate
                        );
                        resample(&w, sample_rate)?
                    } else {
                        w
                    };
                    let stem = p
                        .file_stem()
                        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
                    Ok((stem, w))
                })
                .collect()
        };
        let utterances: Vec<Waveform> = load(speech_dir)?.into_iter().map(|(_, w)| w).collect();
        let noises: Vec<NoiseSource> = load(noise_dir)?
            .into_iter()
            .map(|(name, waveform)| NoiseSource { name, waveform })
            .collect();
        if utterances.is_empty() {
            return Err(Error::Data(format!(
                "no WAV files in {}",
                speech_dir.display()
            )));
        }
        if noises.is_empty() {
            return Err(Error::Data(format!(
                "no WAV files in {}",
                noise_dir.display()
            )));
        }
        Ok(Self { utterances, noises })
    }
}

/// Deterministic synthetic corpus. Utterance `i` is generated from seed
/// `cfg.seed + i`; noise sources use seeds past the utterance range.
pub fn synth_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let rate = cfg.sample_rate;
    let len = (cfg.duration_s * f64::from(rate)).round() as usize;
    let utterances = (0..cfg.utterances)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
            let mut s = synth_speech(len, rate, &mut rng);
            let peak = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak > 0.0 {
                s.iter_mut().for_each(|v| *v *= SPEECH_PEAK / peak);
            }
            Waveform::new(s, rate)
        })
        .collect::<Result<Vec<_>>>()?;
    let noise_len = (cfg.noise_duration_s * f64::from(rate)).round() as usize;
    let mut noises = Vec::with_capacity(cfg.noises.len());
    for (j, kind) in cfg.noises.iter().enumerate() {
        if noises.iter().any(|n: &NoiseSource| n.name == kind.name()) {
            return Err(Error::param("noises", format!("`{kind}` listed twice")));
        }
        let seed = cfg
            .seed
            .wrapping_add(cfg.utterances as u64)
            .wrapping_add(1000 + j as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n = synth_noise(*kind, noise_len, rate, &mut rng);
        let rms = (n.iter().map(|v| v * v).sum::<f64>() / n.len() as f64).sqrt();
        if rms > 0.0 {
            n.iter_mut().for_each(|v| *v *= NOISE_RMS / rms);
        }
        noises.push(NoiseSource {
            name: kind.name().to_string(),
            waveform: Waveform::new(n, rate)?,
        });
    }
    Ok(Corpus { utterances, noises })
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Formant-weighted harmonic complexes in syllable-like bursts separated by
/// short pauses, with occasional high-band fricative onsets.
fn synth_speech(len: usize, rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = f64::from(rate);
    let mut out = vec![0.0; len];
    let base_f0 = rng.gen_range(95.0..230.0);
    let mut t = (rng.gen_range(0.02..0.08) * fs) as usize;
    while t < len {
        let syl = (rng.gen_range(0.12..0.30) * fs) as usize;
        if rng.gen_bool(0.3) {
            let fric = ((rng.gen_range(0.03..0.07) * fs) as usize).min(len - t);
            add_fricative(&mut out[t..t + fric], rng);
            t += fric;
        }
        let end = (t + syl).min(len);
        add_voiced(&mut out[t..end], fs, base_f0, rng);
        t = end + (rng.gen_range(0.03..0.12) * fs) as usize;
    }
    out
}

fn add_voiced(seg: &mut [f64], fs: f64, base_f0: f64, rng: &mut ChaCha8Rng) {
    let n = seg.len();
    if n < 2 {
        return;
    }
    let f0_start = base_f0 * rng.gen_range(0.85..1.15);
    let f0_end = base_f0 * rng.gen_range(0.85..1.15);
    let formants = [
        (rng.gen_range(300.0..900.0), 120.0, 1.0),
        (rng.gen_range(900.0..2400.0), 180.0, 0.5),
        (rng.gen_range(2400.0..3500.0), 250.0, 0.25),
    ];
    let gain = rng.gen_range(0.5..1.0);
    let max_h = (VOICED_CUTOFF_HZ / f0_start.min(f0_end)).floor() as usize;
    let weight = |f: f64| {
        let bumps: f64 = formants
            .iter()
            .map(|&(c, bw, a): &(f64, f64, f64)| a * (-0.5 * ((f - c) / bw).powi(2)).exp())
            .sum();
        (0.05 + bumps) * (300.0 / f.max(300.0))
    };
    let phases: Vec<f64> = (0..max_h).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let attack = (0.02 * fs) as usize;
    let release = (0.04 * fs) as usize;
    let mut phase = 0.0;
    for (i, s) in seg.iter_mut().enumerate() {
        let u = i as f64 / (n - 1) as f64;
        let f0 = f0_start + (f0_end - f0_start) * u;
        phase += 2.0 * PI * f0 / fs;
        let env = ramp(i, attack) * ramp(n - 1 - i, release);
        let mut v = 0.0;
        for (h, ph) in phases.iter().enumerate() {
            let fh = f0 * (h + 1) as f64;
            if fh >= VOICED_CUTOFF_HZ {
                break;
            }
            v += weight(fh) * ((h + 1) as f64 * phase + ph).sin();
        }
        *s += gain * env * v;
    }
}

fn ramp(i: usize, width: usize) -> f64 {
    if i >= width || width == 0 {
        1.0
    } else {
        let x = i as f64 / width as f64;
        (0.5 * PI * x).sin().powi(2)
    }
}

fn add_fricative(seg: &mut [f64], rng: &mut ChaCha8Rng) {
    let n = seg.len();
    let amp = rng.gen_range(0.01..0.03);
    let (mut x1, mut x2) = (0.0, 0.0);
    for (i, s) in seg.iter_mut().enumerate() {
        let x0 = gaussian(rng);
        // second difference emphasises the top of the band
        let hp = x0 - 2.0 * x1 + x2;
        x2 = x1;
        x1 = x0;
        let env = (PI * i as f64 / n.max(1) as f64).sin();
        *s += amp * env * hp;
    }
}

fn synth_noise(kind: NoiseKind, len: usize, rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match kind {
        NoiseKind::White => (0..len).map(|_| gaussian(rng)).collect(),
        NoiseKind::SpeechShaped => {
            let (mut y1, mut y2) = (0.0, 0.0);
            (0..len)
                .map(|_| {
                    y1 = 0.75 * y1 + gaussian(rng);
                    y2 = 0.75 * y2 + y1;
                    y2
                })
                .collect()
        }
        NoiseKind::Babble => {
            let mut sum = vec![0.0; len];
            for _ in 0..6 {
                let mut talker = ChaCha8Rng::seed_from_u64(rng.gen());
                let s = synth_speech(len, rate, &mut talker);
                let rms = (s.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
                if rms > 0.0 {
                    sum.iter_mut().zip(&s).for_each(|(a, b)| *a += b / rms);
                }
            }
            sum
        }
    }
}
