//! Kernel least squares `Kα = Y` by preconditioned stochastic iteration.
//!
//! Each mini-batch step is a Richardson step on the batch coefficients
//! followed by a rank-`q` correction on a fixed Nyström subsample that damps
//! the top of the kernel spectrum down to `λ_{q+1}`:
//!
//! ```text
//! g    = K(B, X)·α − Y_B
//! α_B ← α_B − (η/|B|)·g
//! α_S ← α_S + (η/|B|)·Σᵢ (1 − λ_{q+1}/λᵢ)·cᵢ·⟨ψᵢ(B), g⟩
//! ```
//!
//! where `ψᵢ = Σⱼ cᵢⱼ k(·, sⱼ)` are the Nyström eigenfunctions.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{
    gram_matrix, kernel_matrix_with_budget, DenseKernel, FeatureMatrix, KernelParams, KernelSource,
    LazyKernel, DEFAULT_KERNEL_BUDGET,
};
use crate::linalg::{top_eigen, Cholesky};
use crate::scalar::Scalar;

/// Largest system `direct_solve` factorizes densely.
pub const DIRECT_SOLVE_CAP: usize = 4096;

const PREDICT_CHUNK: usize = 1024;

/// `f(x) = Σⱼ αⱼ k(x, xⱼ)`, one coefficient column per target.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelModel<T: Scalar> {
    params: KernelParams<T>,
    support: FeatureMatrix<T>,
    alpha: DMatrix<T>,
}

impl<T: Scalar> KernelModel<T> {
    pub fn new(
        params: KernelParams<T>,
        support: FeatureMatrix<T>,
        alpha: DMatrix<T>,
    ) -> Result<Self> {
        if alpha.nrows() != support.nrows() {
            return Err(Error::dims(format!(
                "{} coefficient rows for {} support points",
                alpha.nrows(),
                support.nrows()
            )));
        }
        if alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite kernel coefficient".into()));
        }
        Ok(Self {
            params,
            support,
            alpha,
        })
    }

    pub fn params(&self) -> &KernelParams<T> {
        &self.params
    }

    pub fn support(&self) -> &FeatureMatrix<T> {
        &self.support
    }

    pub fn alpha(&self) -> &DMatrix<T> {
        &self.alpha
    }

    pub fn n_targets(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.support.ncols()
    }
}

/// Approximate top eigensystem of the normalized kernel operator, estimated
/// on an `m`-point subsample.
#[derive(Debug, Clone)]
pub struct EigenSystem<T: Scalar> {
    /// `λ₁ ≥ … ≥ λ_q` of `K(S, S)/m`.
    pub eigenvalues: Vec<T>,
    /// `λ_{q+1}`.
    pub tail: T,
    /// `m x q`; column `i` holds the expansion of `ψᵢ` over the subsample.
    pub eigenfunction_coeffs: DMatrix<T>,
    pub subsample: FeatureMatrix<T>,
    /// Row indices of the subsample within the training set, ascending.
    pub indices: Vec<usize>,
}

impl<T: Scalar> EigenSystem<T> {
    pub fn q(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn m(&self) -> usize {
        self.indices.len()
    }
}

pub fn estimate_eigensystem<T: Scalar>(
    x: &FeatureMatrix<T>,
    params: &KernelParams<T>,
    q: usize,
    m: usize,
    seed: u64,
) -> Result<EigenSystem<T>> {
    let source = LazyKernel::new(*params, x, x)?;
    estimate_eigensystem_from(x, &source, q, m, seed)
}

/// Same as [`estimate_eigensystem`] with kernel rows taken from `source`
/// (which must be `K(x, x)`).
pub fn estimate_eigensystem_from<T: Scalar>(
    x: &FeatureMatrix<T>,
    source: &dyn KernelSource<T>,
    q: usize,
    m: usize,
    seed: u64,
) -> Result<EigenSystem<T>> {
    let n = x.nrows();
    if m == 0 || m > n {
        return Err(Error::param(
            "m",
            format!("subsample size {m} not in [1, {n}]"),
        ));
    }
    if q >= m {
        return Err(Error::param(
            "q",
            format!("preconditioner rank {q} must be below m = {m}"),
        ));
    }
    let mut last_err = None;
    for attempt in 0..2u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        let mut indices = rand::seq::index::sample(&mut rng, n, m).into_vec();
        indices.sort_unstable();
        let mut ks = source.block(&indices, &indices);
        let inv_m = T::one() / T::from_usize_lossy(m);
        ks *= inv_m;
        let top = top_eigen(&ks, q + 1, seed.wrapping_add(attempt));
        let lead = top.values[0];
        let floor = lead.abs() * T::from_usize_lossy(m) * T::machine_epsilon();
        let tail = top.values[q];
        if !(lead > T::zero()) || !(tail > floor) {
            last_err = Some(Error::Eigen(format!(
                "λ_{} = {:e} is not positive (λ₁ = {:e}); subsample is rank deficient",
                q + 1,
                tail.as_f64(),
                lead.as_f64()
            )));
            continue;
        }
        let mut coeffs = top.vectors.columns(0, q).into_owned();
        for (i, mut col) in coeffs.column_iter_mut().enumerate() {
            let s = (T::from_usize_lossy(m) * top.values[i]).sqrt();
            col /= s;
        }
        return Ok(EigenSystem {
            eigenvalues: top.values[..q].to_vec(),
            tail,
            eigenfunction_coeffs: coeffs,
            subsample: x.select_rows(&indices),
            indices,
        });
    }
    Err(last_err.expect("two failed attempts"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Preconditioner rank.
    pub q: usize,
    /// Nyström subsample size; capped at the training set size.
    pub m: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before halting.
    pub patience: usize,
    pub step_scale: f64,
    pub seed: u64,
    /// Kernel matrices up to this many entries are materialized once and reused
    /// across epochs; larger ones are recomputed per batch.
    pub kernel_cache: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            q: 160,
            m: 4800,
            batch_size: 256,
            max_epochs: 30,
            patience: 2,
            step_scale: 0.5,
            seed: 0,
            kernel_cache: DEFAULT_KERNEL_BUDGET,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::param("max_epochs", "must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::param("patience", "must be at least 1"));
        }
        if self.m == 0 {
            return Err(Error::param("m", "must be at least 1"));
        }
        if !(self.step_scale.is_finite() && self.step_scale > 0.0) {
            return Err(Error::param(
                "step_scale",
                "must be a positive finite number",
            ));
        }
        Ok(())
    }
}

/// Per-run training diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    /// Validation MSE per epoch (training MSE when no validation set was given).
    pub losses: Vec<f64>,
    /// 1-based epoch whose coefficients were kept.
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// True when the patience rule fired before `max_epochs`.
    pub halted_by_patience: bool,
    pub step_size: f64,
    pub tail_eigenvalue: f64,
    /// Effective preconditioner rank and subsample size.
    pub q: usize,
    pub m: usize,
}

impl TrainHistory {
    pub fn best_loss(&self) -> f64 {
        self.losses[self.best_epoch - 1]
    }
}

#[derive(Debug, Clone)]
pub struct Trained<T: Scalar> {
    pub model: KernelModel<T>,
    pub history: TrainHistory,
}

/// Borrowed feature rows with their targets.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a, T: Scalar> {
    pub x: &'a FeatureMatrix<T>,
    pub y: &'a DMatrix<T>,
}

fn check_targets<T: Scalar>(rows: usize, y: &DMatrix<T>, what: &str) -> Result<()> {
    if y.nrows() != rows {
        return Err(Error::dims(format!(
            "{what}: {} target rows for {rows} feature rows",
            y.nrows()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{what}: non-finite target")));
    }
    Ok(())
}

/// Trains on `(x, y)`, halting on validation loss when `val` is given.
///
/// `cfg.m` is capped at `n` and `cfg.q` at `m - 1`.
pub fn train<T: Scalar>(
    x: &FeatureMatrix<T>,
    y: &DMatrix<T>,
    params: &KernelParams<T>,
    cfg: &SolverConfig,
    val: Option<Samples<'_, T>>,
) -> Result<Trained<T>> {
    cfg.validate()?;
    check_targets(x.nrows(), y, "training set")?;
    let n = x.nrows();
    let lazy;
    let dense;
    let source: &dyn KernelSource<T> = if n.saturating_mul(n) <= cfg.kernel_cache {
        dense = DenseKernel::new(gram_matrix(params, x)?);
        &dense
    } else {
        lazy = LazyKernel::new(*params, x, x)?;
        &lazy
    };
    match val {
        None => train_with_sources(x, source, y, params, cfg, None),
        Some(v) => {
            check_targets(v.x.nrows(), v.y, "validation set")?;
            let vlazy;
            let vdense;
            let vsource: &dyn KernelSource<T> = if v.x.nrows().saturating_mul(n) <= cfg.kernel_cache
            {
                vdense = DenseKernel::new(kernel_matrix_with_budget(params, v.x, x, usize::MAX)?);
                &vdense
            } else {
                vlazy = LazyKernel::new(*params, v.x, x)?;
                &vlazy
            };
            train_with_sources(x, source, y, params, cfg, Some((vsource, v.y)))
        }
    }
}

/// Training core over caller-provided kernel sources: `train_src` must be
/// `K(x, x)` and the validation source `K(x_val, x)`.
pub fn train_with_sources<T: Scalar>(
    x: &FeatureMatrix<T>,
    train_src: &dyn KernelSource<T>,
    y: &DMatrix<T>,
    params: &KernelParams<T>,
    cfg: &SolverConfig,
    val: Option<(&dyn KernelSource<T>, &DMatrix<T>)>,
) -> Result<Trained<T>> {
    cfg.validate()?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Data("empty training set".into()));
    }
    check_targets(n, y, "training set")?;
    if train_src.n_rows() != n || train_src.n_support() != n {
        return Err(Error::dims(
            "training kernel source does not match the training set",
        ));
    }
    if let Some((vs, vy)) = val {
        if vs.n_support() != n || vs.n_rows() != vy.nrows() {
            return Err(Error::dims("validation kernel source does not match"));
        }
    }
    let t = y.ncols();
    let m = cfg.m.min(n);
    let q = cfg.q.min(m - 1);
    let eig = estimate_eigensystem_from(x, train_src, q, m, cfg.seed)?;
    let batch = cfg.batch_size.min(n);
    let inv_b = T::one() / T::from_usize_lossy(batch);
    // Largest eigenvalue of the preconditioned mini-batch operator: the
    // diagonal k(x, x) = 1 contributes 1/|B|, the rest sees λ_{q+1}.
    let batch_eig = inv_b + (T::one() - inv_b) * eig.tail;
    let step = T::lit(cfg.step_scale * 2.0) / batch_eig;
    let damping: Vec<T> = eig
        .eigenvalues
        .iter()
        .map(|&l| T::one() - eig.tail / l)
        .collect();

    let mut alpha = DMatrix::<T>::zeros(n, t);
    let mut best = alpha.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut losses = Vec::new();
    let mut halted = false;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(batch) {
            let scale = step / T::from_usize_lossy(idx.len());
            let kb = train_src.rows(idx);
            let mut g = &kb * &alpha;
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..t {
                    g[(r, c)] -= y[(i, c)];
                }
            }
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..t {
                    alpha[(i, c)] -= scale * g[(r, c)];
                }
            }
            if q > 0 {
                let ks = kb.select_columns(&eig.indices);
                let h = ks.tr_mul(&g);
                let mut u = eig.eigenfunction_coeffs.tr_mul(&h);
                for (i, &d) in damping.iter().enumerate() {
                    u.row_mut(i).scale_mut(d);
                }
                let corr = &eig.eigenfunction_coeffs * u;
                for (r, &s) in eig.indices.iter().enumerate() {
                    for c in 0..t {
                        alpha[(s, c)] += scale * corr[(r, c)];
                    }
                }
            }
        }
        let loss = match val {
            Some((vs, vy)) => mse_of(&apply_source(vs, &alpha), vy),
            None => mse_of(&apply_source(train_src, &alpha), y),
        };
        losses.push(loss);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step_size: step.as_f64(),
                loss,
            });
        }
        if loss < best_loss {
            best_loss = loss;
            best_epoch = epoch;
            best.copy_from(&alpha);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience && val.is_some() {
                halted = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    let epochs_run = losses.len();
    let model = KernelModel::new(*params, x.clone(), best)?;
    Ok(Trained {
        model,
        history: TrainHistory {
            losses,
            best_epoch,
            epochs_run,
            halted_by_patience: halted,
            step_size: step.as_f64(),
            tail_eigenvalue: eig.tail.as_f64(),
            q,
            m,
        },
    })
}

fn mse_of<T: Scalar>(pred: &DMatrix<T>, target: &DMatrix<T>) -> f64 {
    let count = pred.len().max(1) as f64;
    pred.iter()
        .zip(target.iter())
        .map(|(p, t)| {
            let d = (*p - *t).as_f64();
            d * d
        })
        .sum::<f64>()
        / count
}

/// `K(rows, :)·α` in row chunks.
pub fn apply_source<T: Scalar>(src: &dyn KernelSource<T>, alpha: &DMatrix<T>) -> DMatrix<T> {
    let rows = src.n_rows();
    let mut out = DMatrix::zeros(rows, alpha.ncols());
    let all: Vec<usize> = (0..rows).collect();
    for chunk in all.chunks(PREDICT_CHUNK) {
        let part = src.rows(chunk) * alpha;
        out.rows_mut(chunk[0], chunk.len()).copy_from(&part);
    }
    out
}

/// Model outputs `K(x, support)·α`.
pub fn predict<T: Scalar>(model: &KernelModel<T>, x: &FeatureMatrix<T>) -> Result<DMatrix<T>> {
    if x.ncols() != model.feature_dim() {
        return Err(Error::dims(format!(
            "model expects {} features, got {}",
            model.feature_dim(),
            x.ncols()
        )));
    }
    let src = LazyKernel::new(model.params, x, &model.support)?;
    Ok(apply_source(&src, &model.alpha))
}

/// Solves `(K + ridge·I) α = Y` by Cholesky factorization.
pub fn direct_solve<T: Scalar>(
    x: &FeatureMatrix<T>,
    y: &DMatrix<T>,
    params: &KernelParams<T>,
    ridge: T,
) -> Result<KernelModel<T>> {
    let n = x.nrows();
    if n > DIRECT_SOLVE_CAP {
        return Err(Error::param(
            "n",
            format!("{n} rows exceed the direct solver cap of {DIRECT_SOLVE_CAP}"),
        ));
    }
    if !(ridge >= T::zero()) {
        return Err(Error::param("ridge", "must be nonnegative"));
    }
    check_targets(n, y, "training set")?;
    let mut k = gram_matrix(params, x)?;
    for i in 0..n {
        k[(i, i)] += ridge;
    }
    let alpha = Cholesky::factor(&k)?.solve(y)?;
    KernelModel::new(*params, x.clone(), alpha)
}
