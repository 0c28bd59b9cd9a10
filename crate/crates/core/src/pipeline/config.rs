use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autotune::SearchSpace;
use crate::dsp::{CorpusConfig, StftConfig, WindowKind};
use crate::eigenpro::SolverConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// Ideal ratio mask, a regression target.
    #[default]
    Irm,
    /// Ideal binary mask, a classification target.
    Ibm,
}

impl MaskKind {
    pub fn id(self) -> u32 {
        match self {
            MaskKind::Irm => 0,
            MaskKind::Ibm => 1,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            0 => Some(MaskKind::Irm),
            1 => Some(MaskKind::Ibm),
            _ => None,
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::Irm => "irm",
            MaskKind::Ibm => "ibm",
        })
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "irm" => Ok(MaskKind::Irm),
            "ibm" => Ok(MaskKind::Ibm),
            other => Err(Error::Config(format!("unknown mask kind `{other}`"))),
        }
    }
}

/// Where clean speech and noise come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorpusSource {
    Synthetic(CorpusConfig),
    Wav {
        speech_dir: PathBuf,
        noise_dir: PathBuf,
        #[serde(default = "default_rate")]
        sample_rate: u32,
    },
}

fn default_rate() -> u32 {
    16000
}

impl CorpusSource {
    pub fn sample_rate(&self) -> u32 {
        match self {
            CorpusSource::Synthetic(c) => c.sample_rate,
            CorpusSource::Wav { sample_rate, .. } => *sample_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSetting {
    pub name: String,
    pub snr_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureParams {
    pub frame_len: usize,
    pub hop: usize,
    /// Neighbouring frames stacked on each side.
    pub context: usize,
    pub window: WindowName,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            frame_len: 512,
            hop: 256,
            context: 2,
            window: WindowName::SqrtHann,
        }
    }
}

impl FeatureParams {
    pub fn stft(&self) -> StftConfig {
        StftConfig {
            frame_len: self.frame_len,
            hop: self.hop,
            window: self.window.into(),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn feature_dim(&self) -> usize {
        self.n_bins() * (2 * self.context + 1)
    }
}

/// Serializable window name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowName {
    Rectangular,
    Hann,
    SqrtHann,
}

impl From<WindowName> for WindowKind {
    fn from(w: WindowName) -> Self {
        match w {
            WindowName::Rectangular => WindowKind::Rectangular,
            WindowName::Hann => WindowKind::Hann,
            WindowName::SqrtHann => WindowKind::SqrtHann,
        }
    }
}

impl From<WindowKind> for WindowName {
    fn from(w: WindowKind) -> Self {
        match w {
            WindowKind::Rectangular => WindowName::Rectangular,
            WindowKind::Hann => WindowName::Hann,
            WindowKind::SqrtHann => WindowName::SqrtHann,
        }
    }
}

/// Everything a run needs; stored verbatim inside model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub mask: MaskKind,
    #[serde(default = "default_beta")]
    pub irm_beta: f64,
    /// IBM local criterion relative to the mixture SNR, in dB.
    #[serde(default = "default_lc_offset")]
    pub ibm_lc_offset_db: f64,
    #[serde(default = "default_subbands")]
    pub subbands: usize,
    /// Subband jobs run concurrently.
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub corpus: CorpusSource,
    pub noise: Vec<NoiseSetting>,
    #[serde(default)]
    pub features: FeatureParams,
    #[serde(default)]
    pub search: SearchSpace<f64>,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_beta() -> f64 {
    0.5
}

fn default_lc_offset() -> f64 {
    -5.0
}

fn default_subbands() -> usize {
    4
}

fn default_workers() -> usize {
    1
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise.is_empty() {
            return Err(Error::Config(
                "at least one [[noise]] setting is required".into(),
            ));
        }
        for n in &self.noise {
            if !n.snr_db.is_finite() {
                return Err(Error::Config(format!(
                    "noise `{}`: SNR must be finite",
                    n.name
                )));
            }
        }
        match &self.corpus {
            CorpusSource::Synthetic(c) => {
                c.validate()?;
                for n in &self.noise {
                    if !c.noises.iter().any(|k| k.name() == n.name) {
                        return Err(Error::Config(format!(
                            "noise `{}` is not generated by the synthetic corpus",
                            n.name
                        )));
                    }
                }
            }
            CorpusSource::Wav {
                speech_dir,
                noise_dir,
                sample_rate,
            } => {
                for d in [speech_dir, noise_dir] {
                    if !d.is_dir() {
                        return Err(Error::Config(format!("{} is not a directory", d.display())));
                    }
                }
                if *sample_rate == 0 {
                    return Err(Error::param("sample_rate", "must be positive"));
                }
            }
        }
        if !(self.irm_beta.is_finite() && self.irm_beta > 0.0) {
            return Err(Error::param("irm_beta", "must be positive"));
        }
        if !self.ibm_lc_offset_db.is_finite() {
            return Err(Error::param("ibm_lc_offset_db", "must be finite"));
        }
        self.features.stft().validate()?;
        if self.subbands == 0 || self.subbands > self.features.n_bins() {
            return Err(Error::param(
                "subbands",
                format!("must lie in 1..={}", self.features.n_bins()),
            ));
        }
        if self.workers == 0 {
            return Err(Error::param("workers", "must be at least 1"));
        }
        self.search.validate()?;
        self.solver.validate()?;
        Ok(())
    }

    /// Sets every noise setting to `snr_db`, keeping one per noise name.
    pub fn override_snr(&mut self, snr_db: f64) {
        self.noise.iter_mut().for_each(|n| n.snr_db = snr_db);
        let mut seen = Vec::new();
        self.noise.retain(|n| {
            let fresh = !seen.contains(&n.name);
            seen.push(n.name.clone());
            fresh
        });
    }

    /// Replaces the run seed and every seed derived from it.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.search.seed = seed;
        self.solver.seed = seed;
        if let CorpusSource::Synthetic(c) = &mut self.corpus {
            c.seed = seed;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::NoiseKind;

    const SAMPLE: &str = r#"
seed = 7
output_dir = "runs/a"
mask = "ibm"
subbands = 2

[corpus]
kind = "synthetic"
utterances = 10
duration_s = 1.0
noises = ["white", "speech-shaped"]

[[noise]]
name = "white"
snr_db = -5.0

[[noise]]
name = "speech-shaped"
snr_db = 0.0

[features]
context = 1

[search]
gammas = [1.0, 2.0]
sigma_hi = 32.0

[solver]
q = 40
max_epochs = 10
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = RunConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.mask, MaskKind::Ibm);
        assert_eq!(cfg.features.frame_len, 512);
        assert_eq!(cfg.features.context, 1);
        assert_eq!(cfg.features.feature_dim(), 257 * 3);
        assert_eq!(cfg.search.gammas, vec![1.0, 2.0]);
        assert_eq!(cfg.search.sigma_lo, 1.0);
        assert_eq!(cfg.solver.q, 40);
        assert_eq!(cfg.solver.patience, 2);
        assert_eq!(cfg.irm_beta, 0.5);
        match &cfg.corpus {
            CorpusSource::Synthetic(c) => {
                assert_eq!(c.noises, vec![NoiseKind::White, NoiseKind::SpeechShaped])
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn toml_roundtrip_is_lossless() {
        let cfg = RunConfig::from_toml(SAMPLE).unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn rejects_bad_configs() {
        let no_noise = SAMPLE.replace("[[noise]]\nname = \"white\"\nsnr_db = -5.0\n", "");
        assert!(RunConfig::from_toml(&no_noise).is_ok());
        let unknown_noise = SAMPLE.replace("name = \"white\"", "name = \"pink\"");
        assert!(RunConfig::from_toml(&unknown_noise).is_err());
        let bad_field = SAMPLE.replace("subbands = 2", "subbandz = 2");
        assert!(RunConfig::from_toml(&bad_field).is_err());
        let bad_window = SAMPLE.replace("context = 1", "context = 1\nwindow = \"hann\"");
        assert!(RunConfig::from_toml(&bad_window).is_err());
        let too_many = SAMPLE.replace("subbands = 2", "subbands = 300");
        assert!(RunConfig::from_toml(&too_many).is_err());
        let missing_dir = r#"
[corpus]
kind = "wav"
speech_dir = "/definitely/not/here"
noise_dir = "/definitely/not/here"

[[noise]]
name = "x"
snr_db = 0.0
"#;
        let err = RunConfig::from_toml(missing_dir).unwrap_err();
        assert_eq!(err.category(), crate::error::ErrorCategory::Config);
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::from_toml(SAMPLE).unwrap();
        cfg.override_snr(5.0);
        assert!(cfg.noise.iter().all(|n| n.snr_db == 5.0));
        assert_eq!(cfg.noise.len(), 2);
        cfg.override_seed(11);
        assert_eq!((cfg.seed, cfg.search.seed, cfg.solver.seed), (11, 11, 11));
        assert_eq!("IBM".parse::<MaskKind>().unwrap(), MaskKind::Ibm);
    }
}
