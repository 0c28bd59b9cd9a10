use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;

use super::config::{FeatureParams, MaskKind, RunConfig};
use super::dataset::{build_dataset, build_dataset_with, Dataset, Datasets, Split};
use super::model_file::{model_id, write_atomic, ModelFile};
use super::report::{join_f64, write_memo_table, write_partition, write_tune, Aggregate, KvReport};
use crate::autotune::{autotune_with, subsampled_validator, TuneResult};
use crate::dsp::{
    apply_mask, extract_features, istft, read_wav, resample, stft, write_wav, WavFormat, Waveform,
};
use crate::eigenpro::Samples;
use crate::error::{Error, Result};
use crate::kernel::validate_params;
use crate::matrix::MaskMatrix;
use crate::metrics::{accuracy, mse, mse_per_channel, stoi, EvalReport};
use crate::subband::{binarize_mask, fit_subbands, make_partition, predict_mask, SubbandModel};

pub const MODEL_FILE: &str = "model.eksm";
pub const TRAIN_REPORT: &str = "train_report.txt";
pub const AUTOTUNE_REPORT: &str = "autotune.txt";
pub const TIMINGS: &str = "timings.txt";
pub const EVAL_UTTERANCES: &str = "eval_utterances.txt";
pub const EVAL_SUMMARY: &str = "eval_summary.txt";
pub const EVAL_CHANNELS: &str = "eval_channels.tsv";

/// Epoch budget beyond which training is flagged as slow to converge.
pub const EPOCH_ECONOMY: usize = 10;

/// Threshold applied to predicted masks for the binary-mask task.
pub const IBM_THRESHOLD: f64 = 0.5;

/// Wall-clock seconds per named phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timings {
    pub phases: Vec<(String, f64)>,
}

impl Timings {
    pub fn record<R>(&mut self, name: &str, f: impl FnOnce() -> R) -> R {
        let t = Instant::now();
        let r = f();
        self.phases
            .push((name.to_string(), t.elapsed().as_secs_f64()));
        r
    }

    pub fn render(&self) -> String {
        let mut r = KvReport::new();
        for (k, v) in &self.phases {
            r.kv(format!("phase.{k}_s"), format!("{v:.3}"));
        }
        r.into_string()
    }
}

fn samples(ds: &Dataset) -> Samples<'_, f64> {
    Samples {
        x: &ds.x,
        y: ds.y.values(),
    }
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

/// Result of `cmd_autotune`.
#[derive(Debug, Clone)]
pub struct AutotuneRun {
    pub results: Vec<TuneResult<f64>>,
    /// Memo contents `(γ, σ, loss)` of every subband's validator, in insertion order.
    pub memo: Vec<Vec<(f64, f64, f64)>>,
    pub report: String,
}

/// Autotunes every subband on subsamples without a full training run.
pub fn autotune_datasets(cfg: &RunConfig, data: &Datasets) -> Result<AutotuneRun> {
    let partition = make_partition(data.train.y.n_channels(), cfg.subbands)?;
    let base = subsampled_validator(
        samples(&data.train),
        samples(&data.val),
        &cfg.search,
        &cfg.solver,
    )?;
    let mut results = Vec::with_capacity(partition.len());
    let mut memo = Vec::with_capacity(partition.len());
    for i in 0..partition.len() {
        let cv = base
            .for_columns(partition.range(i))
            .map_err(|e| e.in_subband(i))?;
        let t = autotune_with(&cv, &cfg.search).map_err(|e| e.in_subband(i))?;
        memo.push(cv.memo_entries());
        results.push(t);
    }
    let mut r = KvReport::new();
    r.kv("command", "autotune");
    r.kv("seed", cfg.seed);
    r.kv("mask", cfg.mask);
    write_partition(&mut r, &partition);
    for (i, t) in results.iter().enumerate() {
        write_tune(&mut r, &format!("subband.{i}"), t);
    }
    for (i, t) in results.iter().enumerate() {
        write_memo_table(&mut r, i, t);
    }
    Ok(AutotuneRun {
        results,
        memo,
        report: r.into_string(),
    })
}

pub fn cmd_autotune(cfg: &RunConfig) -> Result<AutotuneRun> {
    let data = build_dataset(cfg)?;
    let run = autotune_datasets(cfg, &data)?;
    write_text(&cfg.output_dir, AUTOTUNE_REPORT, &run.report)?;
    Ok(run)
}

/// A trained model with its diagnostics.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: ModelFile,
    pub val_mse: f64,
    pub val_mse_per_channel: Vec<f64>,
    pub timings: Timings,
}

impl TrainRun {
    pub fn max_epochs_used(&self) -> usize {
        self.model
            .model
            .histories
            .iter()
            .map(|h| h.epochs_run)
            .max()
            .unwrap_or(0)
    }

    /// Subbands whose training ran past [`EPOCH_ECONOMY`] epochs.
    pub fn slow_subbands(&self) -> Vec<usize> {
        self.model
            .model
            .histories
            .iter()
            .enumerate()
            .filter(|(_, h)| h.epochs_run > EPOCH_ECONOMY)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Autotunes and trains every subband on prepared datasets.
pub fn train_datasets(cfg: &RunConfig, data: &Datasets) -> Result<TrainRun> {
    let mut timings = Timings::default();
    let (tr, va) = (samples(&data.train), samples(&data.val));
    let partition = make_partition(data.train.y.n_channels(), cfg.subbands)?;
    let tune: Vec<TuneResult<f64>> = timings.record("autotune", || {
        crate::subband::tune_subbands(tr, va, &partition, &cfg.search, &cfg.solver, cfg.workers)
    })?;
    let kernels = tune
        .iter()
        .map(|t| validate_params(t.gamma_opt, t.sigma_opt))
        .collect::<Result<Vec<_>>>()?;
    let fitted = timings.record("train", || {
        fit_subbands(tr, va, &partition, &kernels, &cfg.solver, cfg.workers)
    })?;
    let (models, histories): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
    let model = SubbandModel::new(partition, models, tune, histories)?;
    let pred = timings.record("validate", || predict_mask(&model, &data.val.x))?;
    let val_mse = mse(&pred, &data.val.y)?;
    let val_mse_per_channel = mse_per_channel(&pred, &data.val.y)?;
    let run = TrainRun {
        model: ModelFile {
            config: cfg.clone(),
            standardizer: data.standardizer.clone(),
            model,
        },
        val_mse,
        val_mse_per_channel,
        timings,
    };
    for i in run.slow_subbands() {
        warn!(
            "subband {i} used {} epochs, more than {EPOCH_ECONOMY}",
            run.model.model.histories[i].epochs_run
        );
    }
    Ok(run)
}

pub fn train_report(run: &TrainRun, data: &Datasets, id: &str) -> String {
    let cfg = &run.model.config;
    let m = &run.model.model;
    let mut r = KvReport::new();
    r.kv("command", "train");
    r.kv("model_file", MODEL_FILE);
    r.kv("model_id", id);
    r.kv("seed", cfg.seed);
    r.kv("mask", cfg.mask);
    for (name, ds) in [
        ("train", &data.train),
        ("val", &data.val),
        ("test", &data.test),
    ] {
        r.kv(format!("{name}.utterances"), ds.utterances().len());
        r.kv(format!("{name}.frames"), ds.n_frames());
    }
    r.kv("feature_dim", data.train.x.ncols());
    write_partition(&mut r, &m.partition);
    for i in 0..m.partition.len() {
        let p = format!("subband.{i}");
        write_tune(&mut r, &p, &m.tune_results[i]);
        let h = &m.histories[i];
        r.kv(format!("{p}.epochs_used"), h.epochs_run);
        r.kv(format!("{p}.best_epoch"), h.best_epoch);
        r.kv(format!("{p}.halted_by_patience"), h.halted_by_patience);
        r.kv(format!("{p}.step_size"), h.step_size);
        r.kv(format!("{p}.tail_eigenvalue"), h.tail_eigenvalue);
        r.kv(format!("{p}.q"), h.q);
        r.kv(format!("{p}.m"), h.m);
        r.kv(format!("{p}.val_losses"), join_f64(&h.losses));
    }
    r.kv("epochs_used_max", run.max_epochs_used());
    r.kv("max_epochs", cfg.solver.max_epochs);
    r.kv(
        "epoch_economy",
        if run.slow_subbands().is_empty() {
            "ok"
        } else {
            "warn"
        },
    );
    r.kv("val_mse", format!("{:.9e}", run.val_mse));
    r.into_string()
}

/// Paths written by `cmd_train`.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub run: TrainRun,
    pub model_path: PathBuf,
    pub report_path: PathBuf,
    pub timings_path: PathBuf,
}

/// Builds the dataset, tunes and trains every subband, then writes the
/// model file, the run report and the phase timings to `output_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutputs> {
    let mut timings = Timings::default();
    let data = timings.record("dataset", || build_dataset(cfg))?;
    info!(
        "dataset: {} train, {} val, {} test frames",
        data.train.n_frames(),
        data.val.n_frames(),
        data.test.n_frames()
    );
    let mut run = train_datasets(cfg, &data)?;
    timings.phases.append(&mut run.timings.phases);
    let model_path = cfg.output_dir.join(MODEL_FILE);
    let bytes = timings.record("save", || run.model.to_bytes())?;
    write_atomic(&model_path, &bytes)?;
    let report = train_report(&run, &data, &model_id(&bytes));
    let report_path = write_text(&cfg.output_dir, TRAIN_REPORT, &report)?;
    run.timings = timings;
    let timings_path = write_text(&cfg.output_dir, TIMINGS, &run.timings.render())?;
    Ok(TrainOutputs {
        run,
        model_path,
        report_path,
        timings_path,
    })
}

/// Mask for `noisy` at the model's sample rate.
fn model_mask(model: &ModelFile, spec: &crate::dsp::Spectrogram) -> Result<MaskMatrix<f64>> {
    let fp = model.features();
    let x = model
        .standardizer
        .apply(&extract_features(spec, fp.context)?)?;
    let mask = predict_mask(&model.model, &x)?;
    Ok(match model.mask_kind() {
        MaskKind::Irm => mask,
        MaskKind::Ibm => binarize_mask(&mask, IBM_THRESHOLD),
    })
}

/// Enhances one waveform, resampling to the model rate and back when needed.
/// The output has the input's length and sample rate.
pub fn enhance_waveform(model: &ModelFile, input: &Waveform) -> Result<Waveform> {
    let rate = model.sample_rate();
    let work = if input.sample_rate() != rate {
        warn!(
            "input sampled at {} Hz, model at {rate} Hz; resampling",
            input.sample_rate()
        );
        resample(input, rate)?
    } else {
        input.clone()
    };
    let spec = stft(&work, &model.features().stft())?;
    let mask = model_mask(model, &spec)?;
    let out = istft(&apply_mask(&spec, &mask)?)?;
    let out = if out.sample_rate() != input.sample_rate() {
        resample(&out, input.sample_rate())?
    } else {
        out
    };
    let mut s = out.into_samples();
    s.resize(input.len(), 0.0);
    Waveform::new(s, input.sample_rate())
}

/// Enhances a mono WAV file. PCM16 input yields PCM16 output, anything else float.
pub fn cmd_enhance(model_path: &Path, wav_in: &Path, wav_out: &Path) -> Result<()> {
    let model = ModelFile::load(model_path)?;
    let (input, format) = read_wav(wav_in)?;
    let out = enhance_waveform(&model, &input)?;
    if let Some(dir) = wav_out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_wav(wav_out, &out, format)
}

/// Per-utterance records and aggregates of one evaluation.
#[derive(Debug, Clone)]
pub struct EvalRun {
    pub reports: Vec<EvalReport>,
    /// One entry per noise setting, in configuration order, then the overall one.
    pub aggregates: Vec<Aggregate>,
    pub n_bins: usize,
    pub sample_rate: u32,
}

impl EvalRun {
    pub fn setting(&self, noise: &str, snr_db: f64) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.noise == noise && a.snr_db == snr_db)
    }

    pub fn overall(&self) -> &Aggregate {
        self.aggregates.last().expect("overall aggregate")
    }

    pub fn utterance_lines(&self) -> String {
        self.reports.iter().map(|r| r.line() + "\n").collect()
    }

    pub fn summary(&self) -> String {
        let mut r = KvReport::new();
        r.kv("command", "evaluate");
        if let Some(first) = self.reports.first() {
            r.kv("model_id", &first.model_id);
        }
        r.kv("settings", self.aggregates.len() - 1);
        for (i, a) in self.aggregates.iter().enumerate() {
            let prefix = if i + 1 == self.aggregates.len() {
                "overall".to_string()
            } else {
                format!("setting.{i}")
            };
            a.write(&mut r, &prefix);
        }
        r.into_string()
    }

    /// Per-channel MSE, one row per channel, one column per aggregate.
    pub fn channel_table(&self) -> String {
        let mut s = String::from("channel\tfreq_hz");
        for (i, a) in self.aggregates.iter().enumerate() {
            if i + 1 == self.aggregates.len() {
                s.push_str("\toverall");
            } else {
                s.push_str(&format!("\t{}@{}dB", a.noise, a.snr_db));
            }
        }
        s.push('\n');
        let df = self.sample_rate as f64 / (2.0 * (self.n_bins.max(2) - 1) as f64);
        for c in 0..self.n_bins {
            s.push_str(&format!("{c}\t{:.1}", c as f64 * df));
            for a in &self.aggregates {
                s.push_str(&format!("\t{:.9e}", a.mse_per_channel[c]));
            }
            s.push('\n');
        }
        s
    }
}

/// Scores `masks` (one row per frame of `test`) against the targets and
/// measures STOI of every noisy and enhanced utterance.
pub fn evaluate_masks(
    cfg: &RunConfig,
    test: &Dataset,
    masks: &MaskMatrix<f64>,
    model_id: &str,
) -> Result<EvalRun> {
    if masks.values().shape() != test.y.values().shape() {
        return Err(Error::dims(format!(
            "{:?} predicted mask for {:?} targets",
            masks.values().shape(),
            test.y.values().shape()
        )));
    }
    let fp: FeatureParams = cfg.features;
    let reports = test
        .items
        .par_iter()
        .map(|item| {
            let rows = item.frames.clone();
            let slice = |m: &DMatrix<f64>| m.rows(rows.start, rows.len()).into_owned();
            let pred = MaskMatrix::new(slice(masks.values()))?;
            let target = MaskMatrix::new(slice(test.y.values()))?;
            let spec = stft(&item.noisy, &fp.stft())?;
            let enhanced = istft(&apply_mask(&spec, &pred)?)?;
            Ok(EvalReport {
                utterance: item.id.clone(),
                noise: item.noise.clone(),
                snr_db: item.snr_db,
                model_id: model_id.to_string(),
                frames: rows.len(),
                mse: mse(&pred, &target)?,
                mse_per_channel: mse_per_channel(&pred, &target)?,
                accuracy: match test.mask_kind {
                    MaskKind::Ibm => Some(accuracy(&pred, &target)?),
                    MaskKind::Irm => None,
                },
                stoi_noisy: stoi(&item.clean, &item.noisy)?,
                stoi_enhanced: stoi(&item.clean, &enhanced)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut aggregates = Vec::new();
    for ns in &cfg.noise {
        let group: Vec<&EvalReport> = reports
            .iter()
            .filter(|r| r.noise == ns.name && r.snr_db == ns.snr_db)
            .collect();
        if let Some(a) = Aggregate::of(&ns.name, ns.snr_db, &group) {
            aggregates.push(a);
        }
    }
    let all: Vec<&EvalReport> = reports.iter().collect();
    let overall = Aggregate::of("all", f64::NAN, &all)
        .ok_or_else(|| Error::Data("test split has no mixtures".into()))?;
    aggregates.push(overall);
    Ok(EvalRun {
        reports,
        aggregates,
        n_bins: fp.n_bins(),
        sample_rate: cfg.corpus.sample_rate(),
    })
}

/// Predicted test-split masks, binarized for the binary-mask task.
pub fn predict_split(model: &ModelFile, ds: &Dataset) -> Result<MaskMatrix<f64>> {
    if ds.x.ncols() != model.model.feature_dim() {
        return Err(Error::Config(format!(
            "model expects {} features, data has {}",
            model.model.feature_dim(),
            ds.x.ncols()
        )));
    }
    let mask = predict_mask(&model.model, &ds.x)?;
    Ok(match model.mask_kind() {
        MaskKind::Irm => mask,
        MaskKind::Ibm => binarize_mask(&mask, IBM_THRESHOLD),
    })
}

/// Evaluates a saved model on the test split of its embedded configuration,
/// or of `cfg` when given, and writes the evaluation files.
pub fn cmd_evaluate(model_path: &Path, cfg: Option<&RunConfig>) -> Result<EvalRun> {
    let bytes = fs::read(model_path)
        .map_err(|e| Error::ModelFile(format!("{}: {e}", model_path.display())))?;
    let model = ModelFile::from_bytes(&bytes)?;
    let cfg = cfg.cloned().unwrap_or_else(|| model.config.clone());
    if cfg.features != model.features() || cfg.mask != model.mask_kind() {
        return Err(Error::Config(
            "feature parameters or mask kind differ from the model's".into(),
        ));
    }
    if model.standardizer.dim() != cfg.features.feature_dim() {
        return Err(Error::Config(
            "model standardizer does not match the feature dimension".into(),
        ));
    }
    let test = build_dataset_with(&cfg, &model.standardizer)?.test;
    let masks = predict_split(&model, &test)?;
    let run = evaluate_masks(&cfg, &test, &masks, &model_id(&bytes))?;
    write_text(&cfg.output_dir, EVAL_UTTERANCES, &run.utterance_lines())?;
    write_text(&cfg.output_dir, EVAL_SUMMARY, &run.summary())?;
    write_text(&cfg.output_dir, EVAL_CHANNELS, &run.channel_table())?;
    Ok(run)
}

/// Writes the clean and noisy waveform of every mixture under `output_dir/mix/<split>`.
pub fn cmd_mix(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data = build_dataset(cfg)?;
    let mut written = Vec::new();
    for (split, ds) in [
        (Split::Train, &data.train),
        (Split::Val, &data.val),
        (Split::Test, &data.test),
    ] {
        let dir = cfg.output_dir.join("mix").join(split.to_string());
        fs::create_dir_all(&dir)?;
        for item in &ds.items {
            let stem = format!("{}_{}_{}dB", item.id, item.noise, item.snr_db);
            for (tag, w) in [("clean", &item.clean), ("noisy", &item.noisy)] {
                let path = dir.join(format!("{stem}_{tag}.wav"));
                write_wav(&path, w, WavFormat::Float32)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
