//! Binary model container.
//!
//! Layout: magic `EKSM`, format version (u32), payload length (u64), payload,
//! CRC-32 of the payload (u32). Integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use super::config::{FeatureParams, MaskKind, RunConfig, WindowName};
use crate::autotune::{Candidate, Evaluation, TuneResult};
use crate::dsp::{Standardizer, WindowKind};
use crate::eigenpro::{KernelModel, TrainHistory};
use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::matrix::FeatureMatrix;
use crate::subband::{ChannelPartition, SubbandModel};

pub const MAGIC: &[u8; 4] = b"EKSM";
pub const FORMAT_VERSION: u32 = 1;

/// A trained enhancer together with everything needed to run it.
#[derive(Debug, Clone)]
pub struct ModelFile {
    /// Configuration the model was trained with.
    pub config: RunConfig,
    pub standardizer: Standardizer,
    pub model: SubbandModel<f64>,
}

impl ModelFile {
    pub fn features(&self) -> FeatureParams {
        self.config.features
    }

    pub fn mask_kind(&self) -> MaskKind {
        self.config.mask
    }

    pub fn sample_rate(&self) -> u32 {
        self.config.corpus.sample_rate()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = encode_payload(self)?;
        let mut out = Vec::with_capacity(payload.len() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing EKSM header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let len = usize::try_from(len).map_err(|_| corrupt("payload length overflow"))?;
        if bytes.len() != 16 + len + 4 {
            return Err(corrupt(format!(
                "payload length {len} does not match file size {}",
                bytes.len()
            )));
        }
        let payload = &bytes[16..16 + len];
        let stored = u32::from_le_bytes(bytes[16 + len..].try_into().unwrap());
        let actual = crc32fast::hash(payload);
        if stored != actual {
            return Err(corrupt(format!(
                "checksum mismatch (stored {stored:08x}, computed {actual:08x})"
            )));
        }
        decode_payload(payload)
    }

    /// Writes through a temporary file in the target directory, then renames.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Hex CRC-32 of the payload, used to tag evaluation reports.
pub fn model_id(bytes: &[u8]) -> String {
    if bytes.len() >= 20 {
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        format!("{crc:08x}")
    } else {
        format!("{:08x}", crc32fast::hash(bytes))
    }
}

/// Replaces `path` with `bytes` so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::ModelFile(msg.into())
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }

    fn bytes(&mut self, v: &[u8]) {
        self.usize(v.len());
        self.buf.extend_from_slice(v);
    }

    /// Dimensions followed by row-major data.
    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.usize(m.nrows());
        self.usize(m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                self.f64(m[(r, c)]);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("truncated payload"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflow"))
    }

    /// A length that must fit in the remaining payload at `unit` bytes each.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(unit.max(1)) > self.buf.len() - self.pos {
            return Err(corrupt("length exceeds payload"));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }

    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| corrupt("matrix size overflow"))?;
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(corrupt("matrix exceeds payload"));
        }
        let data: Vec<f64> = (0..n).map(|_| self.f64()).collect::<Result<_>>()?;
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    }
}

fn encode_payload(m: &ModelFile) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(m.config.to_toml()?.as_bytes());

    let fp = m.config.features;
    w.usize(fp.frame_len);
    w.usize(fp.hop);
    w.usize(fp.context);
    w.u32(WindowKind::from(fp.window).id());
    w.u32(m.config.mask.id());
    w.u32(m.config.corpus.sample_rate());

    w.f64s(m.standardizer.mean());
    w.f64s(m.standardizer.inv_std());

    let part = &m.model.partition;
    w.usize(part.n_channels());
    w.usize(part.len());
    for &(lo, hi) in part.bounds() {
        w.usize(lo);
        w.usize(hi);
    }

    let mut supports: Vec<&FeatureMatrix<f64>> = Vec::new();
    let mut support_index = Vec::with_capacity(m.model.models.len());
    for km in &m.model.models {
        let idx = match supports.iter().position(|s| *s == km.support()) {
            Some(i) => i,
            None => {
                supports.push(km.support());
                supports.len() - 1
            }
        };
        support_index.push(idx);
    }
    w.usize(supports.len());
    for s in &supports {
        w.matrix(s.as_matrix());
    }

    for (i, km) in m.model.models.iter().enumerate() {
        w.f64(km.params().gamma());
        w.f64(km.params().sigma());
        w.usize(support_index[i]);
        w.matrix(km.alpha());
        write_tune(&mut w, &m.model.tune_results[i]);
        write_history(&mut w, &m.model.histories[i]);
    }
    Ok(w.buf)
}

fn write_tune(w: &mut Writer, t: &TuneResult<f64>) {
    w.f64(t.gamma_opt);
    w.f64(t.sigma_opt);
    w.usize(t.trainings);
    w.usize(t.candidates.len());
    for c in &t.candidates {
        w.f64(c.gamma);
        w.f64(c.sigma);
        match c.loss {
            Some(l) => {
                w.u8(1);
                w.f64(l);
            }
            None => w.u8(0),
        }
    }
    w.usize(t.evaluations.len());
    for e in &t.evaluations {
        w.f64(e.gamma);
        w.f64(e.sigma);
        w.f64(e.loss);
        w.u8(e.cached as u8);
    }
}

fn write_history(w: &mut Writer, h: &TrainHistory) {
    w.f64s(&h.losses);
    w.usize(h.best_epoch);
    w.usize(h.epochs_run);
    w.u8(h.halted_by_patience as u8);
    w.f64(h.step_size);
    w.f64(h.tail_eigenvalue);
    w.usize(h.q);
    w.usize(h.m);
}

fn read_bool(r: &mut Reader<'_>) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        b => Err(corrupt(format!("invalid flag byte {b}"))),
    }
}

fn read_tune(r: &mut Reader<'_>) -> Result<TuneResult<f64>> {
    let gamma_opt = r.f64()?;
    let sigma_opt = r.f64()?;
    let trainings = r.usize()?;
    let n = r.len(17)?;
    let mut candidates = Vec::with_capacity(n);
    for _ in 0..n {
        let gamma = r.f64()?;
        let sigma = r.f64()?;
        let loss = if read_bool(r)? { Some(r.f64()?) } else { None };
        candidates.push(Candidate { gamma, sigma, loss });
    }
    let n = r.len(25)?;
    let mut evaluations = Vec::with_capacity(n);
    for _ in 0..n {
        evaluations.push(Evaluation {
            gamma: r.f64()?,
            sigma: r.f64()?,
            loss: r.f64()?,
            cached: read_bool(r)?,
        });
    }
    Ok(TuneResult {
        gamma_opt,
        sigma_opt,
        evaluations,
        candidates,
        trainings,
    })
}

fn read_history(r: &mut Reader<'_>) -> Result<TrainHistory> {
    let h = TrainHistory {
        losses: r.f64s()?,
        best_epoch: r.usize()?,
        epochs_run: r.usize()?,
        halted_by_patience: read_bool(r)?,
        step_size: r.f64()?,
        tail_eigenvalue: r.f64()?,
        q: r.usize()?,
        m: r.usize()?,
    };
    if h.best_epoch == 0 || h.best_epoch > h.losses.len() {
        return Err(corrupt("best epoch outside the loss history"));
    }
    Ok(h)
}

fn decode_payload(payload: &[u8]) -> Result<ModelFile> {
    let mut r = Reader {
        buf: payload,
        pos: 0,
    };
    let text =
        std::str::from_utf8(r.bytes()?).map_err(|_| corrupt("embedded config is not UTF-8"))?;
    let config: RunConfig =
        toml::from_str(text).map_err(|e| corrupt(format!("embedded config: {e}")))?;

    let frame_len = r.usize()?;
    let hop = r.usize()?;
    let context = r.usize()?;
    let window = WindowKind::from_id(r.u32()?).ok_or_else(|| corrupt("unknown window id"))?;
    let features = FeatureParams {
        frame_len,
        hop,
        context,
        window: WindowName::from(window),
    };
    let mask = MaskKind::from_id(r.u32()?).ok_or_else(|| corrupt("unknown mask id"))?;
    let rate = r.u32()?;
    if features != config.features || mask != config.mask || rate != config.corpus.sample_rate() {
        return Err(corrupt("header fields disagree with the embedded config"));
    }

    let mean = r.f64s()?;
    let inv_std = r.f64s()?;
    let standardizer =
        Standardizer::from_parts(mean, inv_std).map_err(|e| corrupt(e.to_string()))?;
    if standardizer.dim() != features.feature_dim() {
        return Err(corrupt(format!(
            "standardizer has {} dimensions, features have {}",
            standardizer.dim(),
            features.feature_dim()
        )));
    }

    let n_channels = r.usize()?;
    let b = r.len(16)?;
    let bounds = (0..b)
        .map(|_| Ok((r.usize()?, r.usize()?)))
        .collect::<Result<Vec<_>>>()?;
    let partition =
        ChannelPartition::from_bounds(n_channels, bounds).map_err(|e| corrupt(e.to_string()))?;

    let n_supports = r.len(16)?;
    let supports = (0..n_supports)
        .map(|_| FeatureMatrix::new(r.matrix()?).map_err(|e| corrupt(e.to_string())))
        .collect::<Result<Vec<_>>>()?;

    let mut models = Vec::with_capacity(b);
    let mut tune_results = Vec::with_capacity(b);
    let mut histories = Vec::with_capacity(b);
    for _ in 0..b {
        let params = KernelParams::new(r.f64()?, r.f64()?).map_err(|e| corrupt(e.to_string()))?;
        let si = r.usize()?;
        let support = supports
            .get(si)
            .ok_or_else(|| corrupt(format!("support index {si} out of range")))?
            .clone();
        let alpha = r.matrix()?;
        models.push(KernelModel::new(params, support, alpha).map_err(|e| corrupt(e.to_string()))?);
        tune_results.push(read_tune(&mut r)?);
        histories.push(read_history(&mut r)?);
    }
    if r.pos != payload.len() {
        return Err(corrupt("trailing bytes after the last subband"));
    }
    let model = SubbandModel::new(partition, models, tune_results, histories)
        .map_err(|e| corrupt(e.to_string()))?;
    if model.feature_dim() != features.feature_dim() {
        return Err(corrupt(
            "support dimension disagrees with the feature parameters",
        ));
    }
    Ok(ModelFile {
        config,
        standardizer,
        model,
    })
}
