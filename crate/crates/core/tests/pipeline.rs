use std::fs;

use kernel_se::dsp::{read_wav, stft, write_wav, WavFormat, Waveform};
use kernel_se::eigenpro::KernelModel;
use kernel_se::kernel::KernelParams;
use kernel_se::matrix::MaskMatrix;
use kernel_se::metrics::stoi;
use kernel_se::pipeline::commands::{EVAL_SUMMARY, EVAL_UTTERANCES, MODEL_FILE, TRAIN_REPORT};
use kernel_se::pipeline::report::parse_kv;
use kernel_se::pipeline::{
    autotune_datasets, build_dataset, cmd_enhance, cmd_evaluate, cmd_mix, cmd_train,
    enhance_waveform, evaluate_masks, train_datasets, MaskKind, ModelFile, RunConfig,
};
use kernel_se::subband::{predict_mask, SubbandModel};
use nalgebra::DMatrix;

fn config(dir: &std::path::Path, subbands: usize) -> RunConfig {
    let text = format!(
        r#"
seed = 11
output_dir = "{}"
subbands = {subbands}

[corpus]
kind = "synthetic"
utterances = 8
duration_s = 1.2
noise_duration_s = 3.0
noises = ["white"]

[[noise]]
name = "white"
snr_db = 0.0

[features]
frame_len = 256
hop = 128
context = 1

[search]
gammas = [1.0]
sigma_lo = 2.0
sigma_hi = 20.0
subsample_train = 200
subsample_val = 100

[solver]
q = 20
m = 200
max_epochs = 5
"#,
        dir.display()
    );
    RunConfig::from_toml(&text).unwrap()
}

#[test]
fn train_writes_a_model_that_reloads_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 2);
    let out = cmd_train(&cfg).unwrap();
    assert_eq!(out.model_path, dir.path().join(MODEL_FILE));
    let loaded = ModelFile::load(&out.model_path).unwrap();
    assert_eq!(loaded.config, cfg);
    assert_eq!(loaded.standardizer, out.run.model.standardizer);
    assert_eq!(loaded.model.tune_results, out.run.model.model.tune_results);
    assert_eq!(loaded.model.histories, out.run.model.model.histories);
    let data = build_dataset(&cfg).unwrap();
    let a = predict_mask(&out.run.model.model, &data.test.x).unwrap();
    let b = predict_mask(&loaded.model, &data.test.x).unwrap();
    assert!(a
        .values()
        .iter()
        .zip(b.values().iter())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(
        loaded.to_bytes().unwrap(),
        fs::read(&out.model_path).unwrap()
    );

    let report = fs::read_to_string(dir.path().join(TRAIN_REPORT)).unwrap();
    let kv = parse_kv(&report);
    let get = |k: &str| kv.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());
    assert_eq!(get("subbands").as_deref(), Some("2"));
    let used: usize = get("epochs_used_max").unwrap().parse().unwrap();
    assert!(used >= 1 && used <= cfg.solver.max_epochs);
    assert!(get("subband.1.gamma").is_some() && get("subband.2.gamma").is_none());
    assert!(report.lines().all(|l| l.contains(": ")));
}

#[test]
fn report_holds_one_tune_result_per_subband() {
    let dir = tempfile::tempdir().unwrap();
    let data = build_dataset(&config(dir.path(), 1)).unwrap();
    for b in [1, 4] {
        let run = autotune_datasets(&config(dir.path(), b), &data).unwrap();
        assert_eq!(run.results.len(), b);
        let kv = parse_kv(&run.report);
        assert_eq!(kv.iter().filter(|(k, _)| k.ends_with(".gamma")).count(), b);
    }
}

#[test]
fn autotune_rows_are_the_memo_and_reruns_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 2);
    let data = build_dataset(&cfg).unwrap();
    let run = autotune_datasets(&cfg, &data).unwrap();
    for (t, memo) in run.results.iter().zip(&run.memo) {
        let rows: Vec<(f64, f64, f64)> = t
            .evaluations
            .iter()
            .map(|e| (e.gamma, e.sigma, e.loss))
            .collect();
        let mut a: Vec<_> = rows
            .iter()
            .map(|r| (r.0.to_bits(), r.1.to_bits(), r.2.to_bits()))
            .collect();
        let mut b: Vec<_> = memo
            .iter()
            .map(|r| (r.0.to_bits(), r.1.to_bits(), r.2.to_bits()))
            .collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }
    let table_rows = run.report.lines().filter(|l| !l.contains(": ")).count();
    assert_eq!(table_rows, run.memo.iter().map(Vec::len).sum::<usize>());
    assert_eq!(autotune_datasets(&cfg, &data).unwrap().report, run.report);
}

#[test]
fn singleton_gamma_narrow_bracket_trains_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 1);
    cfg.search.sigma_lo = 4.0;
    cfg.search.sigma_hi = 5.5;
    let data = build_dataset(&cfg).unwrap();
    let run = autotune_datasets(&cfg, &data).unwrap();
    assert_eq!(run.results[0].trainings, 0);
    assert_eq!(run.results[0].sigma_opt, 4.0);
    assert!(run.memo[0].is_empty());
}

/// One support point with a very wide kernel and coefficient 2, so every
/// prediction is close to 2 and the clipped mask is exactly 1.
fn all_pass(template: &ModelFile) -> ModelFile {
    let mut m = template.clone();
    let models = m
        .model
        .models
        .iter()
        .map(|km| {
            let d = km.feature_dim();
            let support = kernel_se::matrix::FeatureMatrix::new(DMatrix::zeros(1, d)).unwrap();
            let params = KernelParams::new(1.0, 1e12).unwrap();
            let alpha = DMatrix::from_element(1, km.n_targets(), 2.0);
            KernelModel::new(params, support, alpha).unwrap()
        })
        .collect();
    m.model = SubbandModel::new(
        m.model.partition.clone(),
        models,
        m.model.tune_results.clone(),
        m.model.histories.clone(),
    )
    .unwrap();
    m
}

#[test]
fn enhance_with_all_pass_model_returns_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 2);
    let out = cmd_train(&cfg).unwrap();
    let model = out.run.model.clone();
    let data = build_dataset(&cfg).unwrap();
    let input = data.test.items[0].noisy.clone();
    let pass = all_pass(&model);
    let x = pass.standardizer.apply(
        &kernel_se::dsp::extract_features(&stft(&input, &cfg.features.stft()).unwrap(), 1).unwrap(),
    );
    let mask = predict_mask(&pass.model, &x.unwrap()).unwrap();
    assert!(mask.values().iter().all(|&v| v == 1.0));
    let y = enhance_waveform(&pass, &input).unwrap();
    assert_eq!(y.len(), input.len());
    let err = y
        .samples()
        .iter()
        .zip(input.samples())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-4, "{err}");

    let wav_in = dir.path().join("in.wav");
    let wav_out = dir.path().join("out.wav");
    let wav_out2 = dir.path().join("out2.wav");
    let pass_path = dir.path().join("pass.eksm");
    pass.save(&pass_path).unwrap();
    write_wav(&wav_in, &input, WavFormat::Pcm16).unwrap();
    cmd_enhance(&pass_path, &wav_in, &wav_out).unwrap();
    cmd_enhance(&pass_path, &wav_in, &wav_out2).unwrap();
    assert_eq!(fs::read(&wav_out).unwrap(), fs::read(&wav_out2).unwrap());
    let (w, fmt) = read_wav(&wav_out).unwrap();
    assert_eq!(fmt, WavFormat::Pcm16);
    let (w_in, _) = read_wav(&wav_in).unwrap();
    assert_eq!(w.len(), input.len());
    let err = w
        .samples()
        .iter()
        .zip(w_in.samples())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1.0 / 32768.0, "{err}");
}

#[test]
fn enhance_resamples_other_rates_and_keeps_length() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 1);
    let out = cmd_train(&cfg).unwrap();
    let samples: Vec<f64> = (0..8000).map(|i| 0.3 * (i as f64 * 0.05).sin()).collect();
    let input = Waveform::new(samples, 8000).unwrap();
    let y = enhance_waveform(&out.run.model, &input).unwrap();
    assert_eq!((y.len(), y.sample_rate()), (8000, 8000));
}

#[test]
fn corrupt_model_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_train(&config(dir.path(), 1)).unwrap();
    let bytes = fs::read(&out.model_path).unwrap();
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    let err = ModelFile::from_bytes(&flipped).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
    assert!(ModelFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(ModelFile::from_bytes(&magic).is_err());
    let wav = dir.path().join("x.wav");
    write_wav(
        &wav,
        &Waveform::zeros(4000, 16000).unwrap(),
        WavFormat::Float32,
    )
    .unwrap();
    let bad = dir.path().join("bad.eksm");
    fs::write(&bad, &flipped).unwrap();
    let e = cmd_enhance(&bad, &wav, &dir.path().join("y.wav")).unwrap_err();
    assert_eq!(e.category().exit_code(), 5);
}

#[test]
fn evaluation_of_perfect_and_oracle_masks() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 1);
    cfg.mask = MaskKind::Ibm;
    let data = build_dataset(&cfg).unwrap();
    let perfect = evaluate_masks(&cfg, &data.test, &data.test.y, "oracle").unwrap();
    let all = perfect.overall();
    assert_eq!(all.mse, 0.0);
    assert_eq!(all.accuracy, Some(1.0));
    for r in &perfect.reports {
        assert!(r.stoi_enhanced > r.stoi_noisy, "{}", r.line());
    }

    cfg.mask = MaskKind::Irm;
    let data = build_dataset(&cfg).unwrap();
    let ones = MaskMatrix::new(DMatrix::from_element(data.test.n_frames(), 129, 1.0)).unwrap();
    let run = evaluate_masks(&cfg, &data.test, &ones, "ones").unwrap();
    let total: usize = run.reports.iter().map(|r| r.frames).sum();
    let weighted: f64 = run
        .reports
        .iter()
        .map(|r| r.mse * r.frames as f64)
        .sum::<f64>()
        / total as f64;
    assert!((run.overall().mse - weighted).abs() <= 1e-12);
    for r in &run.reports {
        let mean = r.mse_per_channel.iter().sum::<f64>() / r.mse_per_channel.len() as f64;
        assert!((mean - r.mse).abs() <= 1e-12);
        assert!(r.accuracy.is_none());
        assert!(r.line().starts_with("utt=u"));
    }
    assert!(run.summary().contains("overall.pesq: unavailable"));
    assert_eq!(run.channel_table().lines().count(), 130);
}

#[test]
fn oracle_enhancement_of_clean_speech_keeps_intelligibility() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 1);
    let data = build_dataset(&cfg).unwrap();
    let item = &data.test.items[0];
    let spec = stft(&item.clean, &cfg.features.stft()).unwrap();
    let ones = MaskMatrix::new(DMatrix::from_element(spec.n_frames(), spec.n_bins(), 1.0)).unwrap();
    let y = kernel_se::dsp::istft(&kernel_se::dsp::apply_mask(&spec, &ones).unwrap()).unwrap();
    let s = stoi(&item.clean, &y).unwrap();
    assert!(1.0 - s < 0.05, "{s}");
}

#[test]
fn evaluate_writes_reports_from_the_embedded_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 2);
    let out = cmd_train(&cfg).unwrap();
    let run = cmd_evaluate(&out.model_path, None).unwrap();
    let lines = fs::read_to_string(dir.path().join(EVAL_UTTERANCES)).unwrap();
    assert_eq!(lines.lines().count(), run.reports.len());
    let summary = fs::read_to_string(dir.path().join(EVAL_SUMMARY)).unwrap();
    assert!(summary.contains("setting.0.noise: white"));
    let data = build_dataset(&cfg).unwrap();
    let direct = train_datasets(&cfg, &data).unwrap();
    assert_eq!(
        direct.model.to_bytes().unwrap(),
        fs::read(&out.model_path).unwrap()
    );

    let mut other = cfg.clone();
    other.features.context = 2;
    assert_eq!(
        cmd_evaluate(&out.model_path, Some(&other))
            .unwrap_err()
            .category()
            .exit_code(),
        2
    );
}

#[test]
fn mix_writes_clean_and_noisy_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let files = cmd_mix(&config(dir.path(), 1)).unwrap();
    assert_eq!(files.len(), 16);
    let (w, _) = read_wav(&files[0]).unwrap();
    assert_eq!(w.sample_rate(), 16000);
}

#[test]
fn shipped_config_is_valid() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.toml");
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.subbands, 4);
    assert_eq!(cfg.noise.len(), 2);
}
