use std::fmt;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{CorpusSource, MaskKind, RunConfig};
use crate::dsp::{
    compute_ibm, compute_irm, extract_features, mix_at_snr, stft, synth_corpus, Corpus,
    Standardizer, Waveform,
};
use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, MaskMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One utterance mixed with one noise setting.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureItem {
    pub id: String,
    pub utterance: usize,
    pub noise: String,
    pub snr_db: f64,
    pub clean: Waveform,
    pub noisy: Waveform,
    /// Rows of this mixture in the split's matrices.
    pub frames: Range<usize>,
}

/// Frame-level features and targets of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub mask_kind: MaskKind,
    pub x: FeatureMatrix<f64>,
    pub y: MaskMatrix<f64>,
    pub items: Vec<MixtureItem>,
}

impl Dataset {
    pub fn n_frames(&self) -> usize {
        self.x.nrows()
    }

    pub fn utterances(&self) -> Vec<usize> {
        let mut u: Vec<usize> = self.items.iter().map(|i| i.utterance).collect();
        u.dedup();
        u
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Fitted on the training split only.
    pub standardizer: Standardizer,
}

/// Shuffles utterance indices with `seed` and cuts them 70/15/15, keeping
/// at least one utterance in every split.
pub fn split_utterances(n: usize, seed: u64) -> Result<[Vec<usize>; 3]> {
    if n < 3 {
        return Err(Error::Data(format!(
            "{n} utterances cannot fill train, validation and test splits"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * 0.15).round() as usize).max(1);
    let n_test = ((n as f64 * 0.15).round() as usize).max(1);
    let n_train = n - n_val - n_test;
    if n_train == 0 {
        return Err(Error::Data(format!(
            "{n} utterances leave no training data"
        )));
    }
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok([train, val, test])
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.corpus {
        CorpusSource::Synthetic(c) => synth_corpus(c),
        CorpusSource::Wav {
            speech_dir,
            noise_dir,
            sample_rate,
        } => Corpus::from_wav_dirs(speech_dir, noise_dir, *sample_rate),
    }
}

/// Seed of the mixture of utterance `utt` with noise setting `setting`.
pub fn mixture_seed(cfg: &RunConfig, utt: usize, setting: usize) -> u64 {
    cfg.seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((utt * cfg.noise.len() + setting) as u64)
}

struct Prepared {
    item: MixtureItem,
    features: FeatureMatrix<f64>,
    mask: MaskMatrix<f64>,
}

fn prepare(cfg: &RunConfig, corpus: &Corpus, utt: usize, setting: usize) -> Result<Prepared> {
    let ns = &cfg.noise[setting];
    let noise = corpus
        .noise(&ns.name)
        .ok_or_else(|| Error::Config(format!("corpus has no noise named `{}`", ns.name)))?;
    let clean = &corpus.utterances[utt];
    let mix = mix_at_snr(clean, noise, ns.snr_db, mixture_seed(cfg, utt, setting))?;
    let sc = cfg.features.stft();
    let noisy_spec = stft(&mix.noisy, &sc)?;
    let speech_spec = stft(clean, &sc)?;
    let noise_spec = stft(&mix.noise, &sc)?;
    let mask = match cfg.mask {
        MaskKind::Irm => compute_irm(&speech_spec, &noise_spec, cfg.irm_beta)?,
        MaskKind::Ibm => compute_ibm(&speech_spec, &noise_spec, ns.snr_db + cfg.ibm_lc_offset_db)?,
    };
    let features = extract_features(&noisy_spec, cfg.features.context)?;
    Ok(Prepared {
        item: MixtureItem {
            id: format!("u{utt:04}"),
            utterance: utt,
            noise: ns.name.clone(),
            snr_db: ns.snr_db,
            clean: clean.clone(),
            noisy: mix.noisy,
            frames: 0..0,
        },
        features,
        mask,
    })
}

fn assemble(
    split: Split,
    kind: MaskKind,
    parts: Vec<Prepared>,
    standardizer: Option<&Standardizer>,
) -> Result<Dataset> {
    let dim = parts.first().map_or(0, |p| p.features.ncols());
    let total: usize = parts.iter().map(|p| p.features.nrows()).sum();
    let mut x = nalgebra::DMatrix::zeros(total, dim);
    let mut masks = Vec::with_capacity(parts.len());
    let mut items = Vec::with_capacity(parts.len());
    let mut row = 0;
    for mut p in parts {
        let n = p.features.nrows();
        x.rows_mut(row, n).copy_from(p.features.as_matrix());
        p.item.frames = row..row + n;
        row += n;
        masks.push(p.mask);
        items.push(p.item);
    }
    let x = FeatureMatrix::new(x)?;
    let x = match standardizer {
        Some(s) => s.apply(&x)?,
        None => x,
    };
    Ok(Dataset {
        split,
        mask_kind: kind,
        x,
        y: MaskMatrix::vstack(&masks)?,
        items,
    })
}

/// Mixes every utterance with every noise setting, derives features and
/// mask targets, splits by utterance and standardizes all splits with
/// training statistics.
pub fn build_dataset(cfg: &RunConfig) -> Result<Datasets> {
    cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    build_from_corpus(cfg, &corpus)
}

pub fn build_from_corpus(cfg: &RunConfig, corpus: &Corpus) -> Result<Datasets> {
    build_with(cfg, corpus, None)
}

/// Like [`build_dataset`], but standardizes every split with `standardizer`
/// instead of fitting one on the training split.
pub fn build_dataset_with(cfg: &RunConfig, standardizer: &Standardizer) -> Result<Datasets> {
    cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    build_with(cfg, &corpus, Some(standardizer))
}

fn build_with(cfg: &RunConfig, corpus: &Corpus, fixed: Option<&Standardizer>) -> Result<Datasets> {
    if corpus.utterances.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let [tr, va, te] = split_utterances(corpus.utterances.len(), cfg.seed)?;
    let make = |utts: &[usize]| -> Result<Vec<Prepared>> {
        let jobs: Vec<(usize, usize)> = utts
            .iter()
            .flat_map(|&u| (0..cfg.noise.len()).map(move |s| (u, s)))
            .collect();
        jobs.par_iter()
            .map(|&(u, s)| prepare(cfg, corpus, u, s))
            .collect()
    };
    let raw_train = assemble(Split::Train, cfg.mask, make(&tr)?, None)?;
    let standardizer = match fixed {
        Some(s) => s.clone(),
        None => Standardizer::fit(&raw_train.x)?,
    };
    let train = Dataset {
        x: standardizer.apply(&raw_train.x)?,
        ..raw_train
    };
    let val = assemble(Split::Val, cfg.mask, make(&va)?, Some(&standardizer))?;
    let test = assemble(Split::Test, cfg.mask, make(&te)?, Some(&standardizer))?;
    Ok(Datasets {
        train,
        val,
        test,
        standardizer,
    })
}
