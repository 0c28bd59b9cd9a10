//! Plain-text run reports. Every non-blank line of a report is `key: value`,
//! except tabular sections, which start with a `table:` header line.

use std::fmt::Write as _;

use crate::autotune::TuneResult;
use crate::metrics::EvalReport;
use crate::subband::ChannelPartition;

/// Accumulates `key: value` lines.
#[derive(Debug, Default, Clone)]
pub struct KvReport {
    text: String,
}

impl KvReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn kv(&mut self, key: impl AsRef<str>, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.text, "{}: {}", key.as_ref(), value);
        self
    }

    pub fn raw_line(&mut self, line: impl AsRef<str>) -> &mut Self {
        self.text.push_str(line.as_ref());
        self.text.push('\n');
        self
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn into_string(self) -> String {
        self.text
    }
}

/// Parses the `key: value` lines of a report, skipping table rows.
pub fn parse_kv(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once(": "))
        .filter(|(k, _)| !k.contains(char::is_whitespace))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

pub fn join_f64(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Selection summary of one subband's search.
pub fn write_tune(r: &mut KvReport, prefix: &str, t: &TuneResult<f64>) {
    r.kv(format!("{prefix}.gamma"), t.gamma_opt);
    r.kv(format!("{prefix}.sigma"), t.sigma_opt);
    r.kv(format!("{prefix}.tune_trainings"), t.trainings);
    r.kv(format!("{prefix}.tune_evaluations"), t.evaluations.len());
    let cands: Vec<String> = t
        .candidates
        .iter()
        .map(|c| match c.loss {
            Some(l) => format!("{}/{}/{}", c.gamma, c.sigma, l),
            None => format!("{}/{}/none", c.gamma, c.sigma),
        })
        .collect();
    r.kv(format!("{prefix}.candidates"), cands.join(","));
}

/// The memo table of one subband: one row per distinct `(γ, σ)`.
pub fn write_memo_table(r: &mut KvReport, subband: usize, t: &TuneResult<f64>) {
    r.raw_line(format!("table: subband {subband} gamma sigma loss cached"));
    for e in &t.evaluations {
        r.raw_line(format!("{} {} {} {}", e.gamma, e.sigma, e.loss, e.cached));
    }
}

pub fn write_partition(r: &mut KvReport, p: &ChannelPartition) {
    r.kv("subbands", p.len());
    r.kv("channels", p.n_channels());
    for i in 0..p.len() {
        let range = p.range(i);
        r.kv(
            format!("subband.{i}.channels"),
            format!("{}-{}", range.start, range.end - 1),
        );
    }
}

/// Aggregate over a group of per-utterance records.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub noise: String,
    pub snr_db: f64,
    pub utterances: usize,
    pub frames: usize,
    /// Frame-weighted mean of the per-utterance MSEs.
    pub mse: f64,
    pub mse_per_channel: Vec<f64>,
    pub accuracy: Option<f64>,
    pub stoi_noisy: f64,
    pub stoi_enhanced: f64,
}

impl Aggregate {
    pub fn of(noise: &str, snr_db: f64, reports: &[&EvalReport]) -> Option<Self> {
        let first = reports.first()?;
        let frames: usize = reports.iter().map(|r| r.frames).sum();
        let w = |r: &EvalReport| r.frames as f64 / frames as f64;
        let channels = first.mse_per_channel.len();
        let mut per = vec![0.0; channels];
        for r in reports {
            for (p, v) in per.iter_mut().zip(&r.mse_per_channel) {
                *p += w(r) * v;
            }
        }
        let accuracy = reports
            .iter()
            .map(|r| r.accuracy.map(|a| w(r) * a))
            .sum::<Option<f64>>();
        let n = reports.len() as f64;
        Some(Self {
            noise: noise.to_string(),
            snr_db,
            utterances: reports.len(),
            frames,
            mse: reports.iter().map(|r| w(r) * r.mse).sum(),
            mse_per_channel: per,
            accuracy,
            stoi_noisy: reports.iter().map(|r| r.stoi_noisy).sum::<f64>() / n,
            stoi_enhanced: reports.iter().map(|r| r.stoi_enhanced).sum::<f64>() / n,
        })
    }

    pub fn write(&self, r: &mut KvReport, prefix: &str) {
        r.kv(format!("{prefix}.noise"), &self.noise);
        if self.snr_db.is_finite() {
            r.kv(format!("{prefix}.snr_db"), self.snr_db);
        } else {
            r.kv(format!("{prefix}.snr_db"), "all");
        }
        r.kv(format!("{prefix}.utterances"), self.utterances);
        r.kv(format!("{prefix}.frames"), self.frames);
        r.kv(format!("{prefix}.mse"), format!("{:.9e}", self.mse));
        if let Some(a) = self.accuracy {
            r.kv(format!("{prefix}.accuracy"), format!("{a:.6}"));
        }
        r.kv(
            format!("{prefix}.stoi_noisy"),
            format!("{:.6}", self.stoi_noisy),
        );
        r.kv(
            format!("{prefix}.stoi_enh"),
            format!("{:.6}", self.stoi_enhanced),
        );
        r.kv(format!("{prefix}.pesq"), "unavailable");
    }
}
