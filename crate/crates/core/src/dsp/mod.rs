//! Signal-domain processing: waveforms, short-time spectra, mixing, mask
//! targets, features and synthetic corpora. All signal work is in `f64`.

mod corpus;
mod features;
mod masks;
mod mix;
mod stft;
mod waveform;

pub use corpus::{synth_corpus, Corpus, CorpusConfig, NoiseKind, NoiseSource};
pub use features::{extract_features, Standardizer, LOG_EPSILON};
pub use masks::{apply_mask, compute_ibm, compute_irm};
pub use mix::{
    active_power, measured_snr_db, mix_at_snr, Mixture, ACTIVITY_FRAME, ACTIVITY_THRESHOLD,
};
pub use stft::{istft, stft, Spectrogram, StftConfig, WindowKind};
pub use waveform::{read_wav, resample, write_wav, WavFormat, Waveform};
