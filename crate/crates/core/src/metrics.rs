//! Evaluation measures: mask MSE (overall and per channel), binary mask
//! accuracy and short-time objective intelligibility.

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::dsp::{resample, Waveform};
use crate::error::{Error, Result};
use crate::matrix::MaskMatrix;
use crate::scalar::Scalar;

fn check_shapes<T: Scalar>(a: &MaskMatrix<T>, b: &MaskMatrix<T>) -> Result<()> {
    if a.values().shape() != b.values().shape() {
        return Err(Error::dims(format!(
            "masks of shape {:?} and {:?}",
            a.values().shape(),
            b.values().shape()
        )));
    }
    Ok(())
}

pub fn mse<T: Scalar>(pred: &MaskMatrix<T>, target: &MaskMatrix<T>) -> Result<f64> {
    check_shapes(pred, target)?;
    let n = pred.values().len();
    if n == 0 {
        return Err(Error::Data("empty masks".into()));
    }
    let sum: f64 = pred
        .values()
        .iter()
        .zip(target.values().iter())
        .map(|(p, t)| {
            let d = (*p - *t).as_f64();
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

/// Mean squared error of each channel (column) over frames.
pub fn mse_per_channel<T: Scalar>(
    pred: &MaskMatrix<T>,
    target: &MaskMatrix<T>,
) -> Result<Vec<f64>> {
    check_shapes(pred, target)?;
    let frames = pred.n_frames();
    if frames == 0 {
        return Err(Error::Data("empty masks".into()));
    }
    Ok(pred
        .values()
        .column_iter()
        .zip(target.values().column_iter())
        .map(|(p, t)| {
            p.iter()
                .zip(t.iter())
                .map(|(a, b)| {
                    let d = (*a - *b).as_f64();
                    d * d
                })
                .sum::<f64>()
                / frames as f64
        })
        .collect())
}

/// Fraction of matching entries between two binary masks.
pub fn accuracy<T: Scalar>(pred: &MaskMatrix<T>, target: &MaskMatrix<T>) -> Result<f64> {
    check_shapes(pred, target)?;
    if !pred.is_binary() || !target.is_binary() {
        return Err(Error::Data("accuracy requires binary masks".into()));
    }
    let n = pred.values().len();
    if n == 0 {
        return Err(Error::Data("empty masks".into()));
    }
    let hits = pred
        .values()
        .iter()
        .zip(target.values().iter())
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / n as f64)
}

/// Analysis parameters of the intelligibility measure.
pub mod stoi_params {
    pub const SAMPLE_RATE: u32 = 10_000;
    pub const FRAME_LEN: usize = 256;
    pub const FFT_LEN: usize = 512;
    pub const N_BANDS: usize = 15;
    pub const MIN_FREQ: f64 = 150.0;
    /// Frames per intermediate intelligibility segment (384 ms).
    pub const SEGMENT: usize = 30;
    /// Lower signal-to-distortion bound in dB.
    pub const BETA_DB: f64 = -15.0;
    /// Frames this far below the loudest clean frame are dropped.
    pub const DYN_RANGE_DB: f64 = 40.0;
}

use stoi_params::*;

/// `hanning(len + 2)` without its zero end points.
fn analysis_window() -> Vec<f64> {
    let n = FRAME_LEN + 2;
    (1..=FRAME_LEN)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    let hop = FRAME_LEN / 2;
    (0..len.saturating_sub(FRAME_LEN)).step_by(hop)
}

/// Drops frames of both signals where the clean frame is more than the
/// dynamic range below the loudest one, then overlap-adds the remainder.
fn remove_silent_frames(x: &[f64], y: &[f64], win: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let energy: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = (0..FRAME_LEN).map(|i| (win[i] * x[s + i]).powi(2)).sum();
            20.0 * (e.sqrt() + f64::EPSILON).log10()
        })
        .collect();
    let peak = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = starts
        .iter()
        .zip(&energy)
        .filter(|(_, &e)| peak - DYN_RANGE_DB - e < 0.0)
        .map(|(&s, _)| s)
        .collect();
    let hop = FRAME_LEN / 2;
    let out_len = if keep.is_empty() {
        0
    } else {
        (keep.len() - 1) * hop + FRAME_LEN
    };
    let mut xo = vec![0.0; out_len];
    let mut yo = vec![0.0; out_len];
    for (k, &s) in keep.iter().enumerate() {
        for i in 0..FRAME_LEN {
            xo[k * hop + i] += win[i] * x[s + i];
            yo[k * hop + i] += win[i] * y[s + i];
        }
    }
    (xo, yo)
}

/// One-third-octave band magnitudes, `bands x frames`.
fn third_octave_envelopes(x: &[f64], win: &[f64], bands: &[(usize, usize)]) -> DMatrix<f64> {
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_LEN);
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let mut out = DMatrix::zeros(bands.len(), starts.len());
    let mut buf = vec![Complex64::default(); FFT_LEN];
    for (f, &s) in starts.iter().enumerate() {
        buf.iter_mut().for_each(|c| *c = Complex64::default());
        for i in 0..FRAME_LEN {
            buf[i] = Complex64::new(win[i] * x[s + i], 0.0);
        }
        fft.process(&mut buf);
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            let p: f64 = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum();
            out[(b, f)] = p.sqrt();
        }
    }
    out
}

/// FFT bin ranges `[lo, hi)` of the one-third-octave bands.
fn band_edges() -> Vec<(usize, usize)> {
    let bins = FFT_LEN / 2 + 1;
    let freqs: Vec<f64> = (0..bins)
        .map(|k| k as f64 * f64::from(SAMPLE_RATE) / FFT_LEN as f64)
        .collect();
    let nearest = |target: f64| {
        (0..bins)
            .min_by(|&a, &b| {
                (freqs[a] - target)
                    .powi(2)
                    .partial_cmp(&(freqs[b] - target).powi(2))
                    .expect("finite")
            })
            .expect("non-empty")
    };
    (0..N_BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Short-time objective intelligibility of `processed` against `clean`,
/// clamped to `[0, 1]`.
///
/// Both signals are resampled to 10 kHz. Silent frames are removed, the
/// signals are decomposed into 15 one-third-octave band envelopes, and the
/// score is the mean correlation of clean and normalized, clipped processed
/// envelopes over 30-frame segments.
pub fn stoi(clean: &Waveform, processed: &Waveform) -> Result<f64> {
    if clean.len() != processed.len() {
        return Err(Error::dims(format!(
            "clean has {} samples, processed {}",
            clean.len(),
            processed.len()
        )));
    }
    if clean.sample_rate() != processed.sample_rate() {
        return Err(Error::Signal("signals at different sample rates".into()));
    }
    if clean.power() <= 0.0 {
        return Err(Error::Signal("clean signal has zero energy".into()));
    }
    let x = resample(clean, SAMPLE_RATE)?.into_samples();
    let y = resample(processed, SAMPLE_RATE)?.into_samples();
    let min_len = FRAME_LEN + SEGMENT * FRAME_LEN / 2;
    if x.len() < min_len {
        return Err(Error::Signal(format!(
            "{} samples at 10 kHz; at least {min_len} are required",
            x.len()
        )));
    }
    let win = analysis_window();
    let (x, y) = remove_silent_frames(&x, &y, &win);
    let bands = band_edges();
    let xe = third_octave_envelopes(&x, &win, &bands);
    let ye = third_octave_envelopes(&y, &win, &bands);
    let frames = xe.ncols();
    if frames < SEGMENT {
        return Err(Error::Signal(format!(
            "{frames} non-silent frames; at least {SEGMENT} are required"
        )));
    }
    let clip = 10f64.powf(-BETA_DB / 20.0);
    let eps = f64::EPSILON;
    let mut total = 0.0;
    let mut count = 0usize;
    for m in SEGMENT..=frames {
        for b in 0..N_BANDS {
            let xs: Vec<f64> = (m - SEGMENT..m).map(|f| xe[(b, f)]).collect();
            let ys: Vec<f64> = (m - SEGMENT..m).map(|f| ye[(b, f)]).collect();
            let xn = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let yn = ys.iter().map(|v| v * v).sum::<f64>().sqrt();
            let alpha = xn / (yn + eps);
            let yp: Vec<f64> = ys
                .iter()
                .zip(&xs)
                .map(|(yv, xv)| (yv * alpha).min(xv * (1.0 + clip)))
                .collect();
            let xm = xs.iter().sum::<f64>() / SEGMENT as f64;
            let ym = yp.iter().sum::<f64>() / SEGMENT as f64;
            let xc: Vec<f64> = xs.iter().map(|v| v - xm).collect();
            let yc: Vec<f64> = yp.iter().map(|v| v - ym).collect();
            let xcn = xc.iter().map(|v| v * v).sum::<f64>().sqrt() + eps;
            let ycn = yc.iter().map(|v| v * v).sum::<f64>().sqrt() + eps;
            let corr: f64 = xc.iter().zip(&yc).map(|(a, b)| (a / xcn) * (b / ycn)).sum();
            total += corr;
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(0.0, 1.0))
}

/// Per-utterance evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub utterance: String,
    pub noise: String,
    pub snr_db: f64,
    pub model_id: String,
    pub frames: usize,
    pub mse: f64,
    pub mse_per_channel: Vec<f64>,
    pub accuracy: Option<f64>,
    pub stoi_noisy: f64,
    pub stoi_enhanced: f64,
}

impl EvalReport {
    /// `utt=… noise=… snr=… mse=… stoi_noisy=… stoi_enh=… [acc=…]`
    pub fn line(&self) -> String {
        let mut s = format!(
            "utt={} noise={} snr={} mse={:.6e} stoi_noisy={:.6} stoi_enh={:.6}",
            self.utterance, self.noise, self.snr_db, self.mse, self.stoi_noisy, self.stoi_enhanced
        );
        if let Some(a) = self.accuracy {
            s.push_str(&format!(" acc={a:.6}"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{mix_at_snr, synth_corpus, CorpusConfig, NoiseKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> MaskMatrix<f64> {
        MaskMatrix::new(DMatrix::from_fn(rows, cols, f)).unwrap()
    }

    #[test]
    fn mse_closed_forms() {
        let t = mask(7, 5, |i, j| ((i * 5 + j) % 10) as f64 / 10.0);
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        let p = mask(7, 5, |i, j| t.get(i, j) + 0.1);
        assert!((mse(&p, &t).unwrap() - 0.01).abs() < 1e-15);
        let per = mse_per_channel(&p, &t).unwrap();
        assert!(per.iter().all(|v| (v - 0.01).abs() < 1e-15));
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        assert!((mean - mse(&p, &t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn channel_errors_stay_in_their_channel() {
        let t = MaskMatrix::<f64>::zeros(4, 3);
        let p = mask(4, 3, |_, j| if j == 0 { 0.5 } else { 0.0 });
        assert_eq!(mse_per_channel(&p, &t).unwrap(), vec![0.25, 0.0, 0.0]);
        assert!(mse(&p, &MaskMatrix::zeros(4, 2)).is_err());
    }

    #[test]
    fn accuracy_cases() {
        let t = mask(4, 4, |i, j| ((i + j) % 2) as f64);
        assert_eq!(accuracy(&t, &t).unwrap(), 1.0);
        let c = mask(4, 4, |i, j| 1.0 - t.get(i, j));
        assert_eq!(accuracy(&c, &t).unwrap(), 0.0);
        assert_eq!(accuracy(&MaskMatrix::zeros(4, 4), &t).unwrap(), 0.5);
        let soft = mask(4, 4, |_, _| 0.5);
        assert!(accuracy(&soft, &t).is_err());
    }

    fn speech_and_noise() -> (Waveform, Waveform) {
        let corpus = synth_corpus(&CorpusConfig {
            utterances: 1,
            duration_s: 2.0,
            noises: vec![NoiseKind::White],
            noise_duration_s: 3.0,
            ..CorpusConfig::default()
        })
        .unwrap();
        (
            corpus.utterances[0].clone(),
            corpus.noises[0].waveform.clone(),
        )
    }

    #[test]
    fn identical_signals_score_one() {
        let (s, _) = speech_and_noise();
        assert!((stoi(&s, &s).unwrap() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn processed_gain_does_not_matter() {
        let (s, n) = speech_and_noise();
        let m = mix_at_snr(&s, &n, 0.0, 1).unwrap();
        let a = stoi(&s, &m.noisy).unwrap();
        let b = stoi(&s, &m.noisy.scaled(3.7)).unwrap();
        assert!((a - b).abs() < 1e-3, "{a} {b}");
    }

    #[test]
    fn score_rises_with_snr_and_collapses_in_heavy_noise() {
        let (s, n) = speech_and_noise();
        let scores: Vec<f64> = [-20.0, -5.0, 0.0, 5.0]
            .iter()
            .map(|&snr| stoi(&s, &mix_at_snr(&s, &n, snr, 2).unwrap().noisy).unwrap())
            .collect();
        assert!(scores[0] <= 0.4, "{scores:?}");
        assert!(
            scores[1] <= scores[2] && scores[2] <= scores[3],
            "{scores:?}"
        );
    }

    #[test]
    fn independent_noise_scores_low() {
        let (s, _) = speech_and_noise();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Waveform::new(
            (0..s.len()).map(|_| rng.gen_range(-0.3..0.3)).collect(),
            s.sample_rate(),
        )
        .unwrap();
        assert!(stoi(&s, &z).unwrap() <= 0.4);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let (s, _) = speech_and_noise();
        let short = Waveform::new(s.samples()[..4000].to_vec(), s.sample_rate()).unwrap();
        assert!(stoi(&short, &short).is_err());
        let z = Waveform::zeros(s.len(), s.sample_rate()).unwrap();
        assert!(stoi(&z, &s).is_err());
        let other = Waveform::new(s.samples()[..s.len() - 1].to_vec(), s.sample_rate()).unwrap();
        assert!(stoi(&s, &other).is_err());
    }

    fn lcg_fixture(noise_gain: f64) -> (Waveform, Waveform, Waveform) {
        let fs = 10_000.0;
        let n = 20_000;
        let tau = 2.0 * std::f64::consts::PI;
        let mut clean: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64;
                (tau * 220.0 * t / fs).sin() * (0.6 + 0.4 * (tau * 3.0 * t / fs).sin())
                    + 0.5 * (tau * 1300.0 * t / fs).sin() * (tau * 5.0 * t / fs).sin().powi(2)
            })
            .collect();
        clean[8000..11000].iter_mut().for_each(|v| *v = 0.0);
        let mut state: u64 = 12345;
        let noise: Vec<f64> = (0..n)
            .map(|_| {
                state = (state * 1_664_525 + 1_013_904_223) % (1 << 32);
                state as f64 / 4_294_967_296.0 - 0.5
            })
            .collect();
        let noisy = clean
            .iter()
            .zip(&noise)
            .map(|(c, z)| c + noise_gain * z)
            .collect();
        (
            Waveform::new(clean, 10_000).unwrap(),
            Waveform::new(noisy, 10_000).unwrap(),
            Waveform::new(noise, 10_000).unwrap(),
        )
    }

    // Reference scores from an independent implementation on the same signals.
    #[test]
    fn matches_reference_scores() {
        let (c, y, _) = lcg_fixture(0.8);
        assert!((stoi(&c, &y).unwrap() - 0.4711234062975006).abs() < 1e-9);
        let (c, y, z) = lcg_fixture(0.2);
        assert!((stoi(&c, &y).unwrap() - 0.5439246324840333).abs() < 1e-9);
        assert!((stoi(&c, &z.scaled(3.0)).unwrap() - 0.10767580275080994).abs() < 1e-9);
    }

    #[test]
    fn band_edges_start_near_150_hz() {
        let b = band_edges();
        assert_eq!(b.len(), 15);
        assert!(b.windows(2).all(|w| w[0].1 == w[1].0));
        assert_eq!(b[0], (7, 9));
    }

    #[test]
    fn report_line_format() {
        let r = EvalReport {
            utterance: "u3".into(),
            noise: "white".into(),
            snr_db: -5.0,
            model_id: "m".into(),
            frames: 10,
            mse: 0.0125,
            mse_per_channel: vec![0.0125],
            accuracy: Some(0.9),
            stoi_noisy: 0.5,
            stoi_enhanced: 0.75,
        };
        assert_eq!(
            r.line(),
            "utt=u3 noise=white snr=-5 mse=1.250000e-2 stoi_noisy=0.500000 stoi_enh=0.750000 acc=0.900000"
        );
    }
}
