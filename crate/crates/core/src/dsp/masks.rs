use nalgebra::DMatrix;

use super::Spectrogram;
use crate::error::{Error, Result};
use crate::matrix::MaskMatrix;

/// Ideal ratio mask `(|S|² / (|S|² + |N|²))^β`; silent bins map to 0.
pub fn compute_irm(
    speech: &Spectrogram,
    noise: &Spectrogram,
    beta: f64,
) -> Result<MaskMatrix<f64>> {
    speech.aligned_with(noise)?;
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::param("beta", "must be positive and finite"));
    }
    let s = speech.power();
    let n = noise.power();
    let values = DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| {
        let (ps, pn) = (s[(i, j)], n[(i, j)]);
        let total = ps + pn;
        if total > 0.0 {
            let r = ps / total;
            if beta == 0.5 {
                r.sqrt()
            } else {
                r.powf(beta).min(1.0)
            }
        } else {
            0.0
        }
    });
    MaskMatrix::new(values)
}

/// Ideal binary mask: 1 where the local SNR strictly exceeds `lc_db`.
pub fn compute_ibm(
    speech: &Spectrogram,
    noise: &Spectrogram,
    lc_db: f64,
) -> Result<MaskMatrix<f64>> {
    speech.aligned_with(noise)?;
    if !lc_db.is_finite() {
        return Err(Error::param("lc_db", "must be finite"));
    }
    let s = speech.power();
    let n = noise.power();
    let values = DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| {
        let (ps, pn) = (s[(i, j)], n[(i, j)]);
        let on = if ps <= 0.0 {
            false
        } else if pn <= 0.0 {
            true
        } else {
            10.0 * (ps / pn).log10() > lc_db
        };
        if on {
            1.0
        } else {
            0.0
        }
    });
    MaskMatrix::new(values)
}

/// Scales every complex bin by its real mask value.
pub fn apply_mask(noisy: &Spectrogram, mask: &MaskMatrix<f64>) -> Result<Spectrogram> {
    if mask.values().shape() != noisy.frames().shape() {
        return Err(Error::dims(format!(
            "mask of shape {:?} for spectrogram of shape {:?}",
            mask.values().shape(),
            noisy.frames().shape()
        )));
    }
    let frames = noisy.frames().zip_map(mask.values(), |c, g| c * g);
    Ok(noisy.with_frames(frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, StftConfig, Waveform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rustfft::num_complex::Complex64;

    fn spec_from_power(p: &[f64]) -> Spectrogram {
        let config = StftConfig::default();
        let len = 512;
        let rows = config.n_frames(len);
        let frames = DMatrix::from_fn(rows, 257, |i, j| {
            Complex64::new(p[(i * 257 + j) % p.len()].sqrt(), 0.0)
        });
        Spectrogram::new(frames, config, 16000, len).unwrap()
    }

    fn random_spec(seed: u64) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w =
            Waveform::new((0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect(), 16000).unwrap();
        stft(&w, &StftConfig::default()).unwrap()
    }

    #[test]
    fn irm_closed_forms() {
        let m = compute_irm(&spec_from_power(&[2.0]), &spec_from_power(&[2.0]), 0.5).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.5f64.sqrt()));
        let m = compute_irm(&spec_from_power(&[3.0]), &spec_from_power(&[0.0]), 0.5).unwrap();
        assert!(m.values().iter().all(|&v| v == 1.0));
        let m = compute_irm(&spec_from_power(&[0.0]), &spec_from_power(&[0.0]), 0.5).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn irm_with_unit_beta_is_complementary() {
        let (s, n) = (random_spec(1), random_spec(2));
        let a = compute_irm(&s, &n, 1.0).unwrap();
        let b = compute_irm(&n, &s, 1.0).unwrap();
        assert!(a.in_unit_range() && b.in_unit_range());
        for (x, y) in a.values().iter().zip(b.values().iter()) {
            assert!((x + y - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ibm_boundaries() {
        let one = compute_ibm(&spec_from_power(&[10.0]), &spec_from_power(&[1.0]), 0.0).unwrap();
        assert!(one.values().iter().all(|&v| v == 1.0));
        let tie = compute_ibm(&spec_from_power(&[1.0]), &spec_from_power(&[1.0]), 0.0).unwrap();
        assert!(tie.values().iter().all(|&v| v == 0.0));
        let clean = compute_ibm(&spec_from_power(&[1.0]), &spec_from_power(&[0.0]), 5.0).unwrap();
        assert!(clean.values().iter().all(|&v| v == 1.0));
        let silent = compute_ibm(&spec_from_power(&[0.0]), &spec_from_power(&[0.0]), -5.0).unwrap();
        assert!(silent.values().iter().all(|&v| v == 0.0));
        assert!(compute_ibm(
            &spec_from_power(&[1.0]),
            &spec_from_power(&[1.0]),
            f64::NEG_INFINITY
        )
        .is_err());
        assert!(compute_ibm(&random_spec(1), &random_spec(2), -5.0)
            .unwrap()
            .is_binary());
    }

    #[test]
    fn apply_mask_identity_and_silence() {
        let s = random_spec(3);
        let ones = MaskMatrix::new(DMatrix::from_element(s.n_frames(), s.n_bins(), 1.0)).unwrap();
        assert_eq!(apply_mask(&s, &ones).unwrap(), s);
        let zeros = MaskMatrix::zeros(s.n_frames(), s.n_bins());
        assert!(apply_mask(&s, &zeros)
            .unwrap()
            .frames()
            .iter()
            .all(|c| c.norm() == 0.0));
        assert!(apply_mask(&s, &MaskMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn oracle_irm_never_amplifies() {
        let (s, n) = (random_spec(4), random_spec(5));
        let noisy = s.with_frames(s.frames() + n.frames());
        let m = compute_irm(&s, &n, 0.5).unwrap();
        let out = apply_mask(&noisy, &m).unwrap();
        for (a, b) in out.frames().iter().zip(noisy.frames().iter()) {
            assert!(a.norm() <= b.norm());
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = random_spec(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w =
            Waveform::new((0..9000).map(|_| rng.gen_range(-1.0..1.0)).collect(), 16000).unwrap();
        let b = stft(&w, &StftConfig::default()).unwrap();
        assert!(compute_irm(&a, &b, 0.5).is_err());
        assert!(compute_ibm(&a, &b, 0.0).is_err());
    }
}
