//! Automatic kernel selection: a bandwidth bracket search per shape
//! parameter, scored by memoized cross-validation on fixed subsamples.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::eigenpro::{train_with_sources, Samples, SolverConfig};
use crate::error::{Error, Result};
use crate::kernel::{
    gram_sq_distances, squared_distances, validate_params, DenseKernel, FeatureMatrix,
};
use crate::scalar::Scalar;

/// Brackets at or below this width end the search.
pub const TERMINATION_WIDTH: f64 = 2.0;

/// Relative distance, as a fraction of the bracket width, within which a
/// known bandwidth counts as coinciding with a split point.
const SNAP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    default,
    deny_unknown_fields,
    bound = "T: Serialize + DeserializeOwned"
)]
pub struct SearchSpace<T: Scalar> {
    pub gammas: Vec<T>,
    pub sigma_lo: T,
    pub sigma_hi: T,
    pub subsample_train: usize,
    pub subsample_val: usize,
    pub seed: u64,
}

impl<T: Scalar> Default for SearchSpace<T> {
    fn default() -> Self {
        Self {
            gammas: vec![T::lit(0.5), T::one(), T::lit(2.0)],
            sigma_lo: T::one(),
            sigma_hi: T::lit(64.0),
            subsample_train: 2000,
            subsample_val: 1000,
            seed: 0,
        }
    }
}

impl<T: Scalar> SearchSpace<T> {
    pub fn validate(&self) -> Result<()> {
        if self.gammas.is_empty() {
            return Err(Error::param(
                "gammas",
                "at least one shape parameter is required",
            ));
        }
        for &g in &self.gammas {
            validate_params(g, T::one())?;
        }
        validate_params(T::one(), self.sigma_lo)?;
        if !(self.sigma_lo < self.sigma_hi) || !self.sigma_hi.is_finite() {
            return Err(Error::param(
                "sigma_hi",
                format!("bracket [{}, {}] is empty", self.sigma_lo, self.sigma_hi),
            ));
        }
        if self.subsample_train == 0 || self.subsample_val == 0 {
            return Err(Error::param(
                "subsample",
                "subsample sizes must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome<T: Scalar> {
    pub sigma: T,
    /// Levels that evaluated the objective.
    pub depth: usize,
    /// Points this search evaluated for the first time, in order.
    pub evaluated: Vec<(T, T)>,
}

/// Orders losses with NaN treated as +∞.
fn loss_key<T: Scalar>(v: T) -> T {
    if v.is_finite() || v > T::zero() {
        v
    } else {
        T::lit(f64::INFINITY)
    }
}

fn interior_points<T: Scalar>(lo: T, hi: T, known: &[T]) -> (T, T) {
    let w = hi - lo;
    let t1 = lo + w / T::lit(3.0);
    let t2 = lo + w * T::lit(2.0) / T::lit(3.0);
    let eps = w * T::lit(SNAP_TOLERANCE);
    let mut cands: Vec<T> = known
        .iter()
        .copied()
        .filter(|&s| s > lo && s < hi && s >= t1 - eps && s <= t2 + eps)
        .collect();
    cands.sort_by(|a, b| a.partial_cmp(b).expect("finite bracket points"));
    cands.dedup();
    let closest = |pool: &mut dyn Iterator<Item = T>, target: T| {
        pool.min_by(|a, b| {
            (*a - target)
                .abs()
                .partial_cmp(&(*b - target).abs())
                .expect("finite")
        })
    };
    let Some(a) = closest(&mut cands.iter().copied(), t1) else {
        return (t1, t2);
    };
    if let Some(b) = closest(&mut cands.iter().copied().filter(|&s| s > a + eps), t2) {
        (a, b)
    } else if a < t2 - eps {
        (a, t2)
    } else {
        (t1, a)
    }
}

/// Recursive four-point bracket search for the minimizer of `f` on
/// `[sigma_lo, sigma_hi]`.
///
/// Brackets no wider than [`TERMINATION_WIDTH`] return their lower end.
/// Otherwise two interior points are chosen, all four points are scored, and
/// the search recurses on the sub-bracket around the smallest value. Interior
/// points reuse already evaluated bandwidths strictly inside the bracket when
/// that keeps every sub-bracket within two thirds of the width; the rest
/// come from an equal three-way split.
pub fn search<T, F>(f: F, sigma_lo: T, sigma_hi: T) -> Result<SearchOutcome<T>>
where
    T: Scalar,
    F: FnMut(T) -> T,
{
    search_with_known(f, sigma_lo, sigma_hi, &[])
}

/// [`search`] seeded with bandwidths evaluated earlier (e.g. by a previous
/// run sharing the same memo), which become eligible interior points.
pub fn search_with_known<T, F>(
    mut f: F,
    sigma_lo: T,
    sigma_hi: T,
    known: &[T],
) -> Result<SearchOutcome<T>>
where
    T: Scalar,
    F: FnMut(T) -> T,
{
    if !(sigma_lo < sigma_hi) {
        return Err(Error::param(
            "sigma_hi",
            format!("bracket [{sigma_lo}, {sigma_hi}] is empty"),
        ));
    }
    let mut seen: Vec<T> = known.to_vec();
    let mut values: HashMap<u64, T> = HashMap::new();
    let mut evaluated = Vec::new();
    let mut eval = |s: T, seen: &mut Vec<T>| -> T {
        *values.entry(s.key_bits()).or_insert_with(|| {
            let v = f(s);
            evaluated.push((s, v));
            seen.push(s);
            v
        })
    };
    let (mut lo, mut hi) = (sigma_lo, sigma_hi);
    let mut depth = 0;
    while hi - lo > T::lit(TERMINATION_WIDTH) {
        depth += 1;
        let (m1, m2) = interior_points(lo, hi, &seen);
        let points = [lo, m1, m2, hi];
        let vals: Vec<T> = points.iter().map(|&s| eval(s, &mut seen)).collect();
        if vals.iter().all(|v| !v.is_finite()) {
            return Err(Error::SearchAborted(format!(
                "objective is non-finite at all of {:?}",
                points.map(|p| p.as_f64())
            )));
        }
        let mut best = 0;
        for i in 1..4 {
            if loss_key(vals[i]) < loss_key(vals[best]) {
                best = i;
            }
        }
        (lo, hi) = match best {
            0 => (lo, m1),
            1 => (lo, m2),
            2 => (m1, hi),
            _ => (m2, hi),
        };
    }
    Ok(SearchOutcome {
        sigma: lo,
        depth,
        evaluated,
    })
}

/// One memoized cross-validation result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation<T: Scalar> {
    pub gamma: T,
    pub sigma: T,
    /// Validation MSE; `+∞` when training failed.
    pub loss: T,
    /// Served from the memo without training.
    pub cached: bool,
}

#[derive(Default)]
struct Memo<T: Scalar> {
    index: HashMap<(u64, u64), usize>,
    entries: Vec<(T, T, T)>,
}

/// Trains one kernel model per `(γ, σ)` on a fixed training subsample and
/// scores it on a fixed validation subsample, caching every result.
///
/// Pairwise distances of both subsamples are computed once, so each
/// evaluation only maps distances through the kernel and runs the solver.
pub struct CrossValidator<T: Scalar> {
    x_train: FeatureMatrix<T>,
    y_train: DMatrix<T>,
    y_val: DMatrix<T>,
    d2_train: Arc<DMatrix<T>>,
    d2_val: Arc<DMatrix<T>>,
    cfg: SolverConfig,
    memo: Mutex<Memo<T>>,
    trainings: AtomicUsize,
}

impl<T: Scalar> CrossValidator<T> {
    pub fn new(train: Samples<'_, T>, val: Samples<'_, T>, cfg: &SolverConfig) -> Result<Self> {
        if train.x.nrows() == 0 || val.x.nrows() == 0 {
            return Err(Error::Data(
                "cross-validation needs non-empty datasets".into(),
            ));
        }
        if train.y.nrows() != train.x.nrows() || val.y.nrows() != val.x.nrows() {
            return Err(Error::dims("targets do not match features"));
        }
        if train.y.ncols() != val.y.ncols() {
            return Err(Error::dims("training and validation target widths differ"));
        }
        cfg.validate()?;
        let d2_train = gram_sq_distances(train.x, usize::MAX)?;
        let d2_val = squared_distances(val.x, train.x, usize::MAX)?;
        Ok(Self {
            x_train: train.x.clone(),
            y_train: train.y.clone(),
            y_val: val.y.clone(),
            d2_train: Arc::new(d2_train),
            d2_val: Arc::new(d2_val),
            cfg: cfg.clone(),
            memo: Mutex::new(Memo {
                index: HashMap::new(),
                entries: Vec::new(),
            }),
            trainings: AtomicUsize::new(0),
        })
    }

    /// A validator with an empty memo over the same subsamples and cached
    /// distances, scoring only the target columns `cols`.
    pub fn for_columns(&self, cols: Range<usize>) -> Result<Self> {
        if cols.is_empty() || cols.end > self.y_train.ncols() {
            return Err(Error::dims(format!(
                "columns {cols:?} of {} targets",
                self.y_train.ncols()
            )));
        }
        let width = cols.len();
        Ok(Self {
            x_train: self.x_train.clone(),
            y_train: self.y_train.columns(cols.start, width).into_owned(),
            y_val: self.y_val.columns(cols.start, width).into_owned(),
            d2_train: Arc::clone(&self.d2_train),
            d2_val: Arc::clone(&self.d2_val),
            cfg: self.cfg.clone(),
            memo: Mutex::new(Memo {
                index: HashMap::new(),
                entries: Vec::new(),
            }),
            trainings: AtomicUsize::new(0),
        })
    }

    /// Number of models trained so far (memo misses).
    pub fn trainings(&self) -> usize {
        self.trainings.load(Ordering::SeqCst)
    }

    pub fn lookup(&self, gamma: T, sigma: T) -> Option<T> {
        let memo = self.memo.lock().expect("memo lock");
        memo.index
            .get(&(gamma.key_bits(), sigma.key_bits()))
            .map(|&i| memo.entries[i].2)
    }

    /// Every `(γ, σ, loss)` in the memo, in insertion order.
    pub fn memo_entries(&self) -> Vec<(T, T, T)> {
        self.memo.lock().expect("memo lock").entries.clone()
    }

    pub fn known_sigmas(&self, gamma: T) -> Vec<T> {
        self.memo
            .lock()
            .expect("memo lock")
            .entries
            .iter()
            .filter(|e| e.0.key_bits() == gamma.key_bits())
            .map(|e| e.1)
            .collect()
    }

    /// Validation loss of a model trained with `k_{γ,σ}`; memoized on the
    /// exact bit patterns of `(γ, σ)`. Failures yield `+∞`.
    pub fn cross_validate(&self, gamma: T, sigma: T) -> T {
        if let Some(loss) = self.lookup(gamma, sigma) {
            return loss;
        }
        let loss = self.train_once(gamma, sigma).unwrap_or_else(|err| {
            log::warn!("cross-validation at gamma={gamma}, sigma={sigma} failed: {err}");
            T::lit(f64::INFINITY)
        });
        let mut memo = self.memo.lock().expect("memo lock");
        let key = (gamma.key_bits(), sigma.key_bits());
        if !memo.index.contains_key(&key) {
            let at = memo.entries.len();
            memo.entries.push((gamma, sigma, loss));
            memo.index.insert(key, at);
        }
        loss
    }

    fn train_once(&self, gamma: T, sigma: T) -> Result<T> {
        self.trainings.fetch_add(1, Ordering::SeqCst);
        let params = validate_params(gamma, sigma)?;
        let train_src = DenseKernel::from_sq_distances(&params, &self.d2_train);
        let val_src = DenseKernel::from_sq_distances(&params, &self.d2_val);
        let trained = train_with_sources(
            &self.x_train,
            &train_src,
            &self.y_train,
            &params,
            &self.cfg,
            Some((&val_src, &self.y_val)),
        )?;
        Ok(T::lit(trained.history.best_loss()))
    }
}

/// The search result for one shape parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate<T: Scalar> {
    pub gamma: T,
    pub sigma: T,
    /// `None` only for a single shape parameter whose search evaluated nothing.
    pub loss: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult<T: Scalar> {
    pub gamma_opt: T,
    pub sigma_opt: T,
    /// Distinct pairs consulted by this run, in first-use order.
    pub evaluations: Vec<Evaluation<T>>,
    /// `(γ, σ_γ)` per shape parameter, in the order of the search space.
    pub candidates: Vec<Candidate<T>>,
    /// Models trained by this run.
    pub trainings: usize,
}

/// Draws `k` distinct rows (all rows when `k ≥ n`), ascending.
pub fn subsample_rows(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Selects `(γ, σ)` for `train`, scoring on `val`; both are subsampled once
/// with the space's seed.
pub fn autotune<T: Scalar>(
    train: Samples<'_, T>,
    val: Samples<'_, T>,
    space: &SearchSpace<T>,
    cfg: &SolverConfig,
) -> Result<TuneResult<T>> {
    space.validate()?;
    let cv = subsampled_validator(train, val, space, cfg)?;
    autotune_with(&cv, space)
}

pub fn subsampled_validator<T: Scalar>(
    train: Samples<'_, T>,
    val: Samples<'_, T>,
    space: &SearchSpace<T>,
    cfg: &SolverConfig,
) -> Result<CrossValidator<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(space.seed);
    let ti = subsample_rows(train.x.nrows(), space.subsample_train, &mut rng);
    let vi = subsample_rows(val.x.nrows(), space.subsample_val, &mut rng);
    let xt = train.x.select_rows(&ti);
    let yt = train.y.select_rows(&ti);
    let xv = val.x.select_rows(&vi);
    let yv = val.y.select_rows(&vi);
    CrossValidator::new(Samples { x: &xt, y: &yt }, Samples { x: &xv, y: &yv }, cfg)
}

/// Runs the per-γ searches against an existing validator, so repeated runs
/// share its memo.
pub fn autotune_with<T: Scalar>(
    cv: &CrossValidator<T>,
    space: &SearchSpace<T>,
) -> Result<TuneResult<T>> {
    space.validate()?;
    let trainings_before = cv.trainings();
    let mut touched: Vec<Evaluation<T>> = Vec::new();
    let mut touched_keys: HashMap<(u64, u64), ()> = HashMap::new();
    let mut consult = |gamma: T, sigma: T, touched: &mut Vec<Evaluation<T>>| -> T {
        let cached = cv.lookup(gamma, sigma).is_some();
        let loss = cv.cross_validate(gamma, sigma);
        if touched_keys
            .insert((gamma.key_bits(), sigma.key_bits()), ())
            .is_none()
        {
            touched.push(Evaluation {
                gamma,
                sigma,
                loss,
                cached,
            });
        }
        loss
    };

    let mut candidates = Vec::with_capacity(space.gammas.len());
    for &gamma in &space.gammas {
        let known = cv.known_sigmas(gamma);
        let outcome = search_with_known(
            |s| consult(gamma, s, &mut touched),
            space.sigma_lo,
            space.sigma_hi,
            &known,
        )?;
        candidates.push(Candidate {
            gamma,
            sigma: outcome.sigma,
            loss: cv.lookup(gamma, outcome.sigma),
        });
    }
    if candidates.len() > 1 {
        for c in &mut candidates {
            c.loss = Some(consult(c.gamma, c.sigma, &mut touched));
        }
    }
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let cur = c.loss.map_or(T::lit(f64::INFINITY), loss_key);
        let top = candidates[best]
            .loss
            .map_or(T::lit(f64::INFINITY), loss_key);
        if cur < top {
            best = i;
        }
    }
    Ok(TuneResult {
        gamma_opt: candidates[best].gamma,
        sigma_opt: candidates[best].sigma,
        evaluations: touched,
        candidates,
        trainings: cv.trainings() - trainings_before,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigenpro::{direct_solve, predict};
    use crate::kernel::KernelParams;
    use rand::Rng;

    // Expected values come from an exact rational trace of the recursion
    // (σ* = 778/81 after 6 levels and 10 distinct evaluations).
    #[test]
    fn quadratic_trace() {
        let mut calls = Vec::new();
        let out = search(
            |s: f64| {
                calls.push(s);
                (s - 10.0) * (s - 10.0)
            },
            2.0,
            30.0,
        )
        .unwrap();
        assert!((out.sigma - 778.0 / 81.0).abs() < 1e-9, "{}", out.sigma);
        assert!((out.sigma - 10.0).abs() <= 2.0);
        assert_eq!(out.depth, 6);
        assert_eq!(calls.len(), 10);
        assert!(calls.len() <= 2 + 2 * out.depth);
        let expect = [
            2.0,
            34.0 / 3.0,
            62.0 / 3.0,
            30.0,
            130.0 / 9.0,
            166.0 / 27.0,
            278.0 / 27.0,
            638.0 / 81.0,
            778.0 / 81.0,
            2474.0 / 243.0,
        ];
        for (c, e) in calls.iter().zip(expect) {
            assert!((c - e).abs() < 1e-9, "{calls:?}");
        }
    }

    #[test]
    fn narrow_bracket_returns_lower_end_without_evaluating() {
        let mut count = 0;
        let out = search(
            |s: f64| {
                count += 1;
                s
            },
            5.0,
            7.0,
        )
        .unwrap();
        assert_eq!(out.sigma, 5.0);
        assert_eq!(count, 0);
        assert_eq!(out.depth, 0);
    }

    #[test]
    fn increasing_objective_walks_left() {
        let mut count = 0;
        let out = search(
            |s: f64| {
                count += 1;
                s
            },
            2.0,
            30.0,
        )
        .unwrap();
        assert_eq!(out.sigma, 2.0);
        assert_eq!(out.depth, 3);
        assert_eq!(count, 8);
    }

    #[test]
    fn at_most_two_new_points_per_level_after_the_first() {
        for target in [1.5, 4.0, 10.0, 17.3, 25.0, 29.9] {
            let out = search(|s: f64| (s - target).abs(), 2.0, 30.0).unwrap();
            assert!(out.evaluated.len() <= 2 + 2 * out.depth, "target {target}");
            let bound = ((28.0f64 / 2.0).ln() / 1.5f64.ln()).ceil() as usize + 1;
            assert!(out.depth <= bound);
        }
    }

    #[test]
    fn non_finite_everywhere_aborts() {
        let err = search(|_s: f64| f64::NAN, 1.0, 10.0).unwrap_err();
        assert!(matches!(err, Error::SearchAborted(_)));
    }

    #[test]
    fn infinite_region_is_avoided() {
        let out = search(
            |s: f64| {
                if s > 12.0 {
                    f64::INFINITY
                } else {
                    (s - 6.0).abs()
                }
            },
            2.0,
            30.0,
        )
        .unwrap();
        assert!((out.sigma - 6.0).abs() <= 2.0, "{}", out.sigma);
    }

    #[test]
    fn known_points_inside_the_middle_third_are_reused() {
        let (a, b) = interior_points(0.0, 9.0, &[4.0]);
        assert_eq!((a, b), (4.0, 6.0));
        let (a, b) = interior_points(0.0, 9.0, &[6.0]);
        assert_eq!((a, b), (3.0, 6.0));
        let (a, b) = interior_points(0.0, 9.0, &[1.0, 8.0]);
        assert_eq!((a, b), (3.0, 6.0));
        let (a, b) = interior_points(0.0, 9.0, &[3.5, 5.0, 5.5]);
        assert_eq!((a, b), (3.5, 5.5));
    }

    fn kernel_data(
        n: usize,
        params: KernelParams<f64>,
        seed: u64,
    ) -> (FeatureMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x =
            FeatureMatrix::new(DMatrix::from_fn(n, 3, |_, _| rng.gen_range(-3.0..3.0))).unwrap();
        let centers =
            FeatureMatrix::new(DMatrix::from_fn(15, 3, |_, _| rng.gen_range(-3.0..3.0))).unwrap();
        let w = DMatrix::from_fn(15, 1, |_, _| rng.gen_range(-1.0..1.0));
        let gen = crate::eigenpro::KernelModel::new(params, centers, w).unwrap();
        let y = predict(&gen, &x).unwrap();
        (x, y)
    }

    fn small_cfg() -> SolverConfig {
        SolverConfig {
            q: 20,
            m: 100,
            batch_size: 50,
            max_epochs: 8,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn cross_validate_memoizes_exact_pairs() {
        let p = validate_params(1.0, 8.0).unwrap();
        let (xt, yt) = kernel_data(150, p, 1);
        let (xv, yv) = kernel_data(60, p, 2);
        let cv = CrossValidator::new(
            Samples { x: &xt, y: &yt },
            Samples { x: &xv, y: &yv },
            &small_cfg(),
        )
        .unwrap();
        let a = cv.cross_validate(1.0, 8.0);
        assert_eq!(cv.trainings(), 1);
        let b = cv.cross_validate(1.0, 8.0);
        assert_eq!(a, b);
        assert_eq!(cv.trainings(), 1);
        cv.cross_validate(1.0, 8.000000000000002);
        assert_eq!(cv.trainings(), 2);
        assert_eq!(cv.memo_entries().len(), 2);
    }

    #[test]
    fn training_set_as_validation_of_interpolant_is_near_zero() {
        let p = validate_params(1.0, 2.0).unwrap();
        let (x, y) = kernel_data(120, p, 3);
        let cfg = SolverConfig {
            q: 40,
            m: 120,
            batch_size: 40,
            max_epochs: 60,
            patience: 5,
            ..SolverConfig::default()
        };
        let cv =
            CrossValidator::new(Samples { x: &x, y: &y }, Samples { x: &x, y: &y }, &cfg).unwrap();
        let loss = cv.cross_validate(1.0, 2.0);
        let scale = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        assert!(loss < 1e-3 * scale, "loss {loss} vs scale {scale}");
        // the direct interpolant has essentially zero training error
        let direct = direct_solve(&x, &y, &p, 1e-10).unwrap();
        let fit = predict(&direct, &x).unwrap();
        assert!((fit - &y).amax() < 1e-5);
    }

    #[test]
    fn diverging_configuration_becomes_infinite_sentinel() {
        let p = validate_params(1.0, 1.0).unwrap();
        let (xt, yt) = kernel_data(60, p, 4);
        let (xv, yv) = kernel_data(30, p, 5);
        let cfg = SolverConfig {
            q: 5,
            m: 30,
            batch_size: 60,
            max_epochs: 200,
            patience: 200,
            step_scale: 50.0,
            ..SolverConfig::default()
        };
        let cv = CrossValidator::new(Samples { x: &xt, y: &yt }, Samples { x: &xv, y: &yv }, &cfg)
            .unwrap();
        let loss = cv.cross_validate(1.0, 1.0);
        assert!(loss.is_infinite() && loss > 0.0, "{loss}");
        assert_eq!(cv.memo_entries()[0].2, loss);
    }

    #[test]
    fn singleton_grid_returns_its_search_result() {
        let p = validate_params(1.0, 8.0).unwrap();
        let (xt, yt) = kernel_data(120, p, 6);
        let (xv, yv) = kernel_data(50, p, 7);
        let space = SearchSpace {
            gammas: vec![1.0],
            sigma_lo: 1.0,
            sigma_hi: 20.0,
            subsample_train: 1000,
            subsample_val: 1000,
            seed: 3,
        };
        let cv = subsampled_validator(
            Samples { x: &xt, y: &yt },
            Samples { x: &xv, y: &yv },
            &space,
            &small_cfg(),
        )
        .unwrap();
        let res = autotune_with(&cv, &space).unwrap();
        let fresh = CrossValidator::new(
            Samples { x: &xt, y: &yt },
            Samples { x: &xv, y: &yv },
            &small_cfg(),
        )
        .unwrap();
        let direct = search(|s| fresh.cross_validate(1.0, s), 1.0, 20.0).unwrap();
        assert_eq!(res.gamma_opt, 1.0);
        assert_eq!(res.sigma_opt, direct.sigma);
        assert_eq!(res.candidates.len(), 1);
        assert!(res.trainings <= 2 + 2 * direct.depth);
    }

    #[test]
    fn selected_pair_minimizes_candidate_losses_and_is_deterministic() {
        let p = validate_params(1.0, 8.0).unwrap();
        let (xt, yt) = kernel_data(160, p, 8);
        let (xv, yv) = kernel_data(60, p, 9);
        let space = SearchSpace {
            gammas: vec![0.5, 1.0, 2.0],
            sigma_lo: 1.0,
            sigma_hi: 64.0,
            subsample_train: 120,
            subsample_val: 50,
            seed: 11,
        };
        let run = || {
            autotune(
                Samples { x: &xt, y: &yt },
                Samples { x: &xv, y: &yv },
                &space,
                &small_cfg(),
            )
            .unwrap()
        };
        let res = run();
        let best = res
            .candidates
            .iter()
            .find(|c| c.gamma == res.gamma_opt && c.sigma == res.sigma_opt)
            .unwrap()
            .loss
            .unwrap();
        for c in &res.candidates {
            assert!(best <= c.loss.unwrap());
        }
        assert!(res
            .evaluations
            .iter()
            .any(|e| e.gamma == res.gamma_opt && e.sigma == res.sigma_opt && e.loss == best));
        assert_eq!(res, run());
    }

    #[test]
    fn repeated_runs_with_overlapping_brackets_reuse_the_memo() {
        let p = validate_params(1.0, 8.0).unwrap();
        let (xt, yt) = kernel_data(120, p, 10);
        let (xv, yv) = kernel_data(50, p, 11);
        let mut space = SearchSpace {
            gammas: vec![1.0, 0.5],
            sigma_lo: 1.0,
            sigma_hi: 30.0,
            subsample_train: 1000,
            subsample_val: 1000,
            seed: 0,
        };
        let cv = subsampled_validator(
            Samples { x: &xt, y: &yt },
            Samples { x: &xv, y: &yv },
            &space,
            &small_cfg(),
        )
        .unwrap();
        let first = autotune_with(&cv, &space).unwrap();
        assert!(first.trainings > 0);
        let again = autotune_with(&cv, &space).unwrap();
        assert_eq!(again.trainings, 0);
        assert!(again.evaluations.iter().all(|e| e.cached));
        assert_eq!(
            (again.gamma_opt, again.sigma_opt),
            (first.gamma_opt, first.sigma_opt)
        );

        space.sigma_hi = 40.0;
        let before = cv.memo_entries();
        let wider = autotune_with(&cv, &space).unwrap();
        let retrained_old = wider
            .evaluations
            .iter()
            .filter(|e| !e.cached && before.iter().any(|b| b.0 == e.gamma && b.1 == e.sigma));
        assert_eq!(retrained_old.count(), 0);
        assert_eq!(
            wider.trainings,
            wider.evaluations.iter().filter(|e| !e.cached).count()
        );
    }

    #[test]
    fn space_validation() {
        let mut s = SearchSpace::<f64>::default();
        assert!(s.validate().is_ok());
        s.gammas = vec![];
        assert!(s.validate().is_err());
        s.gammas = vec![3.0];
        assert!(s.validate().is_err());
        s = SearchSpace {
            sigma_lo: 5.0,
            sigma_hi: 5.0,
            ..Default::default()
        };
        assert!(s.validate().is_err());
    }
}
