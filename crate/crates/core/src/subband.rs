//! Subband kernel machines: the target channels are split into contiguous
//! blocks and each block gets its own tuned kernel and model.

use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::autotune::{autotune_with, subsampled_validator, SearchSpace, TuneResult};
use crate::eigenpro::{
    train, train_with_sources, KernelModel, Samples, SolverConfig, TrainHistory,
};
use crate::error::{Error, Result};
use crate::kernel::{
    apply_kernel, gram_sq_distances, squared_distances, validate_params, DenseKernel, KernelParams,
    SupportDistances,
};
use crate::matrix::{FeatureMatrix, MaskMatrix};
use crate::scalar::Scalar;

/// Contiguous half-open channel ranges covering `0..n_channels`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelPartition {
    n_channels: usize,
    bounds: Vec<(usize, usize)>,
}

impl ChannelPartition {
    /// Validates an explicit list of ranges.
    pub fn from_bounds(n_channels: usize, bounds: Vec<(usize, usize)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::param("subbands", "at least one range is required"));
        }
        let mut next = 0;
        for &(s, e) in &bounds {
            if s != next || e <= s {
                return Err(Error::param(
                    "subbands",
                    format!("ranges {bounds:?} do not tile 0..{n_channels}"),
                ));
            }
            next = e;
        }
        if next != n_channels {
            return Err(Error::param(
                "subbands",
                format!("ranges {bounds:?} do not tile 0..{n_channels}"),
            ));
        }
        Ok(Self { n_channels, bounds })
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    pub fn bounds(&self) -> &[(usize, usize)] {
        &self.bounds
    }

    pub fn range(&self, i: usize) -> Range<usize> {
        let (s, e) = self.bounds[i];
        s..e
    }

    /// Index of the subband owning `channel`.
    pub fn owner(&self, channel: usize) -> Option<usize> {
        self.bounds
            .iter()
            .position(|&(s, e)| (s..e).contains(&channel))
    }
}

/// Splits `n_channels` into `b` contiguous ranges whose widths differ by at
/// most one; the wider ranges come first.
pub fn make_partition(n_channels: usize, b: usize) -> Result<ChannelPartition> {
    if b == 0 || b > n_channels {
        return Err(Error::param(
            "subbands",
            format!("{b} subbands for {n_channels} channels"),
        ));
    }
    let (base, extra) = (n_channels / b, n_channels % b);
    let mut bounds = Vec::with_capacity(b);
    let mut start = 0;
    for i in 0..b {
        let width = base + usize::from(i < extra);
        bounds.push((start, start + width));
        start += width;
    }
    ChannelPartition::from_bounds(n_channels, bounds)
}

#[derive(Debug, Clone)]
pub struct SubbandModel<T: Scalar> {
    pub partition: ChannelPartition,
    pub models: Vec<KernelModel<T>>,
    pub tune_results: Vec<TuneResult<T>>,
    pub histories: Vec<TrainHistory>,
}

impl<T: Scalar> SubbandModel<T> {
    pub fn new(
        partition: ChannelPartition,
        models: Vec<KernelModel<T>>,
        tune_results: Vec<TuneResult<T>>,
        histories: Vec<TrainHistory>,
    ) -> Result<Self> {
        let b = partition.len();
        if models.len() != b || tune_results.len() != b || histories.len() != b {
            return Err(Error::dims(format!(
                "{b} subbands with {} models, {} tune results and {} histories",
                models.len(),
                tune_results.len(),
                histories.len()
            )));
        }
        for (i, m) in models.iter().enumerate() {
            if m.n_targets() != partition.range(i).len() {
                return Err(Error::dims(format!(
                    "subband {i} model predicts {} channels, range has {}",
                    m.n_targets(),
                    partition.range(i).len()
                )));
            }
        }
        Ok(Self {
            partition,
            models,
            tune_results,
            histories,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.models[0].feature_dim()
    }
}

/// Runs `job(i)` for every subband, on up to `workers` threads.
fn per_subband<R: Send>(
    b: usize,
    workers: usize,
    job: impl Fn(usize) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    let run = |i| job(i).map_err(|e| e.in_subband(i));
    if workers <= 1 || b == 1 {
        return (0..b).map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.min(b))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| (0..b).into_par_iter().map(run).collect())
}

fn columns<T: Scalar>(y: &DMatrix<T>, r: Range<usize>) -> DMatrix<T> {
    y.columns(r.start, r.len()).into_owned()
}

/// Autotunes every subband on the space's subsamples. Subsampling and the
/// pairwise distances are shared; each subband has its own memo.
pub fn tune_subbands<T: Scalar>(
    train_set: Samples<'_, T>,
    val: Samples<'_, T>,
    partition: &ChannelPartition,
    space: &SearchSpace<T>,
    cfg: &SolverConfig,
    workers: usize,
) -> Result<Vec<TuneResult<T>>> {
    if train_set.y.ncols() != partition.n_channels() {
        return Err(Error::dims(format!(
            "{} target channels for a partition of {}",
            train_set.y.ncols(),
            partition.n_channels()
        )));
    }
    space.validate()?;
    let base = subsampled_validator(train_set, val, space, cfg)?;
    per_subband(partition.len(), workers, |i| {
        let cv = base.for_columns(partition.range(i))?;
        autotune_with(&cv, space)
    })
}

/// Trains one model per subband on the full training set with the given
/// kernels. When the kernel cache allows, squared distances are computed
/// once and shared by every subband.
pub fn fit_subbands<T: Scalar>(
    train_set: Samples<'_, T>,
    val: Samples<'_, T>,
    partition: &ChannelPartition,
    kernels: &[KernelParams<T>],
    cfg: &SolverConfig,
    workers: usize,
) -> Result<Vec<(KernelModel<T>, TrainHistory)>> {
    if kernels.len() != partition.len() {
        return Err(Error::dims(format!(
            "{} kernels for {} subbands",
            kernels.len(),
            partition.len()
        )));
    }
    if train_set.y.ncols() != partition.n_channels() || val.y.ncols() != partition.n_channels() {
        return Err(Error::dims("target channels do not match the partition"));
    }
    let n = train_set.x.nrows();
    let nv = val.x.nrows();
    let shared =
        n.saturating_mul(n) <= cfg.kernel_cache && nv.saturating_mul(n) <= cfg.kernel_cache;
    let distances = if shared && partition.len() > 1 {
        Some((
            gram_sq_distances(train_set.x, usize::MAX)?,
            squared_distances(val.x, train_set.x, usize::MAX)?,
        ))
    } else {
        None
    };
    per_subband(partition.len(), workers, |i| {
        let r = partition.range(i);
        let y = columns(train_set.y, r.clone());
        let yv = columns(val.y, r);
        let trained = match &distances {
            Some((d2, d2v)) => {
                let ks = DenseKernel::from_sq_distances(&kernels[i], d2);
                let kv = DenseKernel::from_sq_distances(&kernels[i], d2v);
                train_with_sources(train_set.x, &ks, &y, &kernels[i], cfg, Some((&kv, &yv)))?
            }
            None => train(
                train_set.x,
                &y,
                &kernels[i],
                cfg,
                Some(Samples { x: val.x, y: &yv }),
            )?,
        };
        Ok((trained.model, trained.history))
    })
}

/// Partitions the channels into `b` subbands, selects a kernel for each by
/// autotuning on subsamples, then trains each subband model on all of
/// `train_set` with validation-based halting.
pub fn train_subband<T: Scalar>(
    train_set: Samples<'_, T>,
    val: Samples<'_, T>,
    b: usize,
    space: &SearchSpace<T>,
    cfg: &SolverConfig,
    workers: usize,
) -> Result<SubbandModel<T>> {
    let partition = make_partition(train_set.y.ncols(), b)?;
    let tune_results = tune_subbands(train_set, val, &partition, space, cfg, workers)?;
    let kernels = tune_results
        .iter()
        .map(|t| validate_params(t.gamma_opt, t.sigma_opt))
        .collect::<Result<Vec<_>>>()?;
    let fitted = fit_subbands(train_set, val, &partition, &kernels, cfg, workers)?;
    let (models, histories) = fitted.into_iter().unzip();
    SubbandModel::new(partition, models, tune_results, histories)
}

/// Rows per prediction block.
const PREDICT_ROWS: usize = 512;

/// Unclipped model outputs, one column per channel.
pub fn predict_raw<T: Scalar>(model: &SubbandModel<T>, x: &FeatureMatrix<T>) -> Result<DMatrix<T>> {
    for (i, m) in model.models.iter().enumerate() {
        if m.feature_dim() != x.ncols() {
            return Err(Error::dims(format!(
                "subband {i} expects {} features, got {}",
                m.feature_dim(),
                x.ncols()
            ))
            .in_subband(i));
        }
    }
    let mut out = DMatrix::zeros(x.nrows(), model.partition.n_channels());
    // Subbands trained on the same rows share one distance computation.
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..model.models.len() {
        match groups
            .iter_mut()
            .find(|g| model.models[g[0]].support() == model.models[i].support())
        {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    for group in groups {
        let support = SupportDistances::new(model.models[group[0]].support());
        let starts: Vec<usize> = (0..x.nrows()).step_by(PREDICT_ROWS).collect();
        let blocks: Vec<Vec<DMatrix<T>>> = starts
            .par_iter()
            .map(|&s| {
                let len = PREDICT_ROWS.min(x.nrows() - s);
                let d2 = support.sq_dists(&x.as_matrix().rows(s, len).into_owned())?;
                Ok(group
                    .iter()
                    .map(|&i| {
                        let mut k = d2.clone();
                        apply_kernel(model.models[i].params(), &mut k);
                        k * model.models[i].alpha()
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        for (&s, parts) in starts.iter().zip(blocks) {
            for (&i, part) in group.iter().zip(parts) {
                let r = model.partition.range(i);
                out.view_mut((s, r.start), (part.nrows(), r.len()))
                    .copy_from(&part);
            }
        }
    }
    Ok(out)
}

/// Full-band mask: subband predictions in partition order, clipped to `[0, 1]`.
pub fn predict_mask<T: Scalar>(
    model: &SubbandModel<T>,
    x: &FeatureMatrix<T>,
) -> Result<MaskMatrix<T>> {
    MaskMatrix::clipped(predict_raw(model, x)?)
}

/// 1 where `mask ≥ threshold`, else 0.
pub fn binarize_mask<T: Scalar>(mask: &MaskMatrix<T>, threshold: T) -> MaskMatrix<T> {
    let values = mask
        .values()
        .map(|v| if v >= threshold { T::one() } else { T::zero() });
    MaskMatrix::new(values).expect("binary values are finite")
}
