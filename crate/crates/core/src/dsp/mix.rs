use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Waveform;
use crate::error::{Error, Result};

/// Frame length for the active-speech power measurement.
pub const ACTIVITY_FRAME: usize = 512;
/// Frames below this fraction of the peak frame energy count as silence.
pub const ACTIVITY_THRESHOLD: f64 = 0.01;

/// Mean power over frames whose energy exceeds [`ACTIVITY_THRESHOLD`] of the
/// loudest frame.
pub fn active_power(w: &Waveform) -> f64 {
    let energies: Vec<(f64, usize)> = w
        .samples()
        .chunks(ACTIVITY_FRAME)
        .map(|c| {
            (
                c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64,
                c.len(),
            )
        })
        .collect();
    let peak = energies.iter().fold(0.0, |m: f64, e| m.max(e.0));
    if peak <= 0.0 {
        return 0.0;
    }
    let (sum, count) = energies
        .iter()
        .filter(|e| e.0 > ACTIVITY_THRESHOLD * peak)
        .fold((0.0, 0usize), |(s, n), &(e, len)| {
            (s + e * len as f64, n + len)
        });
    sum / count as f64
}

/// `10·log₁₀(active_power(speech) / power(noise))`.
pub fn measured_snr_db(speech: &Waveform, noise: &Waveform) -> f64 {
    10.0 * (active_power(speech) / noise.power()).log10()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    /// `speech + noise`, sample by sample.
    pub noisy: Waveform,
    /// The scaled noise segment actually added.
    pub noise: Waveform,
    pub gain: f64,
    /// Start of the segment within the noise source.
    pub offset: usize,
}

/// Adds a randomly placed segment of `noise` to `speech`, scaled so the
/// active-speech SNR equals `snr_db`. Noise shorter than the speech is
/// extended cyclically.
pub fn mix_at_snr(speech: &Waveform, noise: &Waveform, snr_db: f64, seed: u64) -> Result<Mixture> {
    if speech.sample_rate() != noise.sample_rate() {
        return Err(Error::Signal(format!(
            "speech at {} Hz, noise at {} Hz",
            speech.sample_rate(),
            noise.sample_rate()
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::param("snr_db", "must be finite"));
    }
    if noise.is_empty() {
        return Err(Error::Signal("empty noise signal".into()));
    }
    let p_speech = active_power(speech);
    if p_speech <= 0.0 {
        return Err(Error::Signal("speech has zero power".into()));
    }
    let offset = ChaCha8Rng::seed_from_u64(seed).gen_range(0..noise.len());
    let src = noise.samples();
    let segment: Vec<f64> = (0..speech.len())
        .map(|i| src[(offset + i) % src.len()])
        .collect();
    let p_noise = segment.iter().map(|v| v * v).sum::<f64>() / segment.len() as f64;
    if p_noise <= 0.0 {
        return Err(Error::Signal("noise segment has zero power".into()));
    }
    let gain = (p_speech / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = segment.iter().map(|v| v * gain).collect();
    let noisy: Vec<f64> = speech
        .samples()
        .iter()
        .zip(&scaled)
        .map(|(s, n)| s + n)
        .collect();
    Ok(Mixture {
        noisy: Waveform::new(noisy, speech.sample_rate())?,
        noise: Waveform::new(scaled, speech.sample_rate())?,
        gain,
        offset,
    })
}
