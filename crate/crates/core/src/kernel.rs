//! Exponential power kernel `k(x, z) = exp(-‖x - z‖^γ / σ)` and kernel matrices.
//!
//! Pairwise distances go through the expansion `‖x‖² + ‖z‖² - 2⟨x, z⟩` so the
//! bulk of the work is a matrix product. Entries where that expansion loses
//! precision (near-duplicate rows) are recomputed directly, which keeps
//! `k(x, x) == 1` exact even for `γ < 1`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
pub use crate::matrix::FeatureMatrix;
use crate::scalar::Scalar;

/// Largest kernel (cross-)matrix materialized in one call, in entries.
pub const DEFAULT_KERNEL_BUDGET: usize = 1 << 27;

/// Rows per block in blocked kernel evaluation. Fixed so results do not
/// depend on the thread count.
const ROW_BLOCK: usize = 256;

/// Shape `γ ∈ (0, 2]` and bandwidth `σ > 0` of the exponential power kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams<T: Scalar> {
    gamma: T,
    sigma: T,
}

impl<T: Scalar> KernelParams<T> {
    pub fn new(gamma: T, sigma: T) -> Result<Self> {
        validate_params(gamma, sigma)
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }

    /// Kernel value as a function of the squared distance.
    #[inline]
    pub fn from_sq_dist(&self, d2: T) -> T {
        let d2 = d2.max(T::zero());
        let powered = if self.gamma == T::lit(2.0) {
            d2
        } else if self.gamma == T::one() {
            d2.sqrt()
        } else {
            d2.powf(self.gamma * T::lit(0.5))
        };
        (-powered / self.sigma).exp()
    }
}

/// Checks raw user input against the positive definite regime of the family.
pub fn validate_params<T: Scalar>(gamma: T, sigma: T) -> Result<KernelParams<T>> {
    if !gamma.is_finite() || gamma <= T::zero() || gamma > T::lit(2.0) {
        return Err(Error::param(
            "gamma",
            format!("gamma out of (0,2]: {gamma}"),
        ));
    }
    if !sigma.is_finite() {
        return Err(Error::param(
            "sigma",
            format!("sigma must be finite: {sigma}"),
        ));
    }
    if sigma <= T::zero() {
        return Err(Error::param(
            "sigma",
            format!("sigma must be positive: {sigma}"),
        ));
    }
    Ok(KernelParams { gamma, sigma })
}

pub fn eval_kernel<T: Scalar>(params: &KernelParams<T>, x: &[T], z: &[T]) -> Result<T> {
    if x.len() != z.len() {
        return Err(Error::dims(format!(
            "feature vectors of length {} and {}",
            x.len(),
            z.len()
        )));
    }
    let d2 = x
        .iter()
        .zip(z)
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    Ok(params.from_sq_dist(d2))
}

fn row_sq_norms<T: Scalar>(m: &DMatrix<T>) -> Vec<T> {
    let mut out = vec![T::zero(); m.nrows()];
    for col in m.column_iter() {
        for (acc, &v) in out.iter_mut().zip(col.iter()) {
            *acc += v * v;
        }
    }
    out
}

fn exact_sq_dist<T: Scalar>(x: &DMatrix<T>, i: usize, z: &DMatrix<T>, j: usize) -> T {
    let mut acc = T::zero();
    for k in 0..x.ncols() {
        let d = x[(i, k)] - z[(j, k)];
        acc += d * d;
    }
    acc
}

/// Precomputed right-hand operand for repeated distance evaluations.
struct Operand<'a, T: Scalar> {
    z: &'a DMatrix<T>,
    zt: DMatrix<T>,
    norms: Vec<T>,
}

impl<'a, T: Scalar> Operand<'a, T> {
    fn new(z: &'a DMatrix<T>) -> Self {
        Self {
            z,
            zt: z.transpose(),
            norms: row_sq_norms(z),
        }
    }

    /// Squared distances from the rows of `xb` to the operand rows `col_start..`.
    fn sq_dists(&self, xb: &DMatrix<T>, col_start: usize) -> DMatrix<T> {
        let ncols = self.z.nrows() - col_start;
        let zt = self.zt.columns(col_start, ncols);
        let xn = row_sq_norms(xb);
        let mut g = xb * zt;
        let two = T::lit(2.0);
        let tol = T::machine_epsilon().sqrt();
        for j in 0..ncols {
            let zn = self.norms[col_start + j];
            for i in 0..xb.nrows() {
                let scale = xn[i] + zn;
                let d2 = scale - two * g[(i, j)];
                g[(i, j)] = if d2 <= tol * scale {
                    exact_sq_dist(xb, i, self.z, col_start + j)
                } else {
                    d2
                };
            }
        }
        g
    }
}

/// Support rows prepared once for repeated distance queries.
pub struct SupportDistances<'a, T: Scalar> {
    op: Operand<'a, T>,
}

impl<'a, T: Scalar> SupportDistances<'a, T> {
    pub fn new(support: &'a FeatureMatrix<T>) -> Self {
        Self {
            op: Operand::new(support.as_matrix()),
        }
    }

    pub fn n_support(&self) -> usize {
        self.op.z.nrows()
    }

    /// Squared distances from each row of `rows` to every support row.
    pub fn sq_dists(&self, rows: &DMatrix<T>) -> Result<DMatrix<T>> {
        if rows.ncols() != self.op.z.ncols() {
            return Err(Error::dims(format!(
                "feature dimension {} vs {}",
                rows.ncols(),
                self.op.z.ncols()
            )));
        }
        Ok(self.op.sq_dists(rows, 0))
    }
}

fn check_dims<T: Scalar>(x: &FeatureMatrix<T>, z: &FeatureMatrix<T>) -> Result<()> {
    if x.ncols() != z.ncols() {
        return Err(Error::dims(format!(
            "feature dimension {} vs {}",
            x.ncols(),
            z.ncols()
        )));
    }
    Ok(())
}

fn check_budget(rows: usize, cols: usize, budget: usize) -> Result<()> {
    if rows.saturating_mul(cols) > budget {
        return Err(Error::MemoryBudget { rows, cols, budget });
    }
    Ok(())
}

fn blocks(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(ROW_BLOCK)
        .map(|s| (s, ROW_BLOCK.min(n - s)))
        .collect()
}

/// Squared Euclidean distances between every row of `x` and every row of `z`.
pub fn squared_distances<T: Scalar>(
    x: &FeatureMatrix<T>,
    z: &FeatureMatrix<T>,
    budget: usize,
) -> Result<DMatrix<T>> {
    check_dims(x, z)?;
    check_budget(x.nrows(), z.nrows(), budget)?;
    if std::ptr::eq(x, z) {
        return gram_sq_distances(x, budget);
    }
    let op = Operand::new(z.as_matrix());
    let parts: Vec<DMatrix<T>> = blocks(x.nrows())
        .into_par_iter()
        .map(|(s, len)| op.sq_dists(&x.as_matrix().rows(s, len).into_owned(), 0))
        .collect();
    let mut out = DMatrix::zeros(x.nrows(), z.nrows());
    for ((s, len), part) in blocks(x.nrows()).into_iter().zip(parts) {
        out.rows_mut(s, len).copy_from(&part);
    }
    Ok(out)
}

/// Squared distances among the rows of `x`. Each unordered pair is computed
/// once, so the result is exactly symmetric with a zero diagonal.
pub fn gram_sq_distances<T: Scalar>(x: &FeatureMatrix<T>, budget: usize) -> Result<DMatrix<T>> {
    let n = x.nrows();
    check_budget(n, n, budget)?;
    let op = Operand::new(x.as_matrix());
    let parts: Vec<DMatrix<T>> = blocks(n)
        .into_par_iter()
        .map(|(s, len)| op.sq_dists(&x.as_matrix().rows(s, len).into_owned(), s))
        .collect();
    let mut out = DMatrix::zeros(n, n);
    for ((s, len), part) in blocks(n).into_iter().zip(parts) {
        for bi in 0..len {
            let i = s + bi;
            out[(i, i)] = T::zero();
            for j in (i + 1)..n {
                let v = part[(bi, j - s)];
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
    }
    Ok(out)
}

/// Maps squared distances to kernel values in place.
pub fn apply_kernel<T: Scalar>(params: &KernelParams<T>, d2: &mut DMatrix<T>) {
    let p = *params;
    d2.as_mut_slice()
        .par_chunks_mut(1 << 14)
        .for_each(|chunk| chunk.iter_mut().for_each(|v| *v = p.from_sq_dist(*v)));
}

pub fn kernel_matrix_from_sq_distances<T: Scalar>(
    params: &KernelParams<T>,
    d2: &DMatrix<T>,
) -> DMatrix<T> {
    let mut k = d2.clone();
    apply_kernel(params, &mut k);
    k
}

/// `K[i, j] = k(x_i, z_j)`, refusing matrices above [`DEFAULT_KERNEL_BUDGET`].
pub fn kernel_matrix<T: Scalar>(
    params: &KernelParams<T>,
    x: &FeatureMatrix<T>,
    z: &FeatureMatrix<T>,
) -> Result<DMatrix<T>> {
    kernel_matrix_with_budget(params, x, z, DEFAULT_KERNEL_BUDGET)
}

pub fn kernel_matrix_with_budget<T: Scalar>(
    params: &KernelParams<T>,
    x: &FeatureMatrix<T>,
    z: &FeatureMatrix<T>,
    budget: usize,
) -> Result<DMatrix<T>> {
    let mut d2 = squared_distances(x, z, budget)?;
    apply_kernel(params, &mut d2);
    Ok(d2)
}

/// Symmetric kernel matrix of `x` against itself, unit diagonal.
pub fn gram_matrix<T: Scalar>(
    params: &KernelParams<T>,
    x: &FeatureMatrix<T>,
) -> Result<DMatrix<T>> {
    let mut d2 = gram_sq_distances(x, DEFAULT_KERNEL_BUDGET)?;
    apply_kernel(params, &mut d2);
    Ok(d2)
}

/// Row access to a kernel matrix `K(rows, support)`.
///
/// Solvers only ever need row blocks of the kernel matrix, so they work
/// against this trait and stay agnostic of whether `K` is materialized.
pub trait KernelSource<T: Scalar>: Sync {
    fn n_rows(&self) -> usize;

    fn n_support(&self) -> usize;

    /// `K(rows, cols)` as a `rows.len() x cols.len()` matrix.
    fn block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<T>;

    /// `K(rows, :)` against the whole support.
    fn rows(&self, rows: &[usize]) -> DMatrix<T>;
}

/// Evaluates kernel rows on demand from features.
pub struct LazyKernel<'a, T: Scalar> {
    params: KernelParams<T>,
    x: &'a FeatureMatrix<T>,
    support: Operand<'a, T>,
}

impl<'a, T: Scalar> LazyKernel<'a, T> {
    pub fn new(
        params: KernelParams<T>,
        x: &'a FeatureMatrix<T>,
        support: &'a FeatureMatrix<T>,
    ) -> Result<Self> {
        check_dims(x, support)?;
        Ok(Self {
            params,
            x,
            support: Operand::new(support.as_matrix()),
        })
    }
}

impl<T: Scalar> KernelSource<T> for LazyKernel<'_, T> {
    fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    fn n_support(&self) -> usize {
        self.support.z.nrows()
    }

    fn block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<T> {
        let xb = self.x.as_matrix().select_rows(rows);
        let zb = self.support.z.select_rows(cols);
        let mut d2 = Operand::new(&zb).sq_dists(&xb, 0);
        apply_kernel(&self.params, &mut d2);
        d2
    }

    fn rows(&self, rows: &[usize]) -> DMatrix<T> {
        let xb = self.x.as_matrix().select_rows(rows);
        let chunks: Vec<(usize, usize)> = blocks(rows.len());
        let parts: Vec<DMatrix<T>> = chunks
            .par_iter()
            .map(|&(s, len)| {
                let mut d2 = self.support.sq_dists(&xb.rows(s, len).into_owned(), 0);
                apply_kernel(&self.params, &mut d2);
                d2
            })
            .collect();
        let mut out = DMatrix::zeros(rows.len(), self.n_support());
        for ((s, len), part) in chunks.into_iter().zip(parts) {
            out.rows_mut(s, len).copy_from(&part);
        }
        out
    }
}

/// A fully materialized kernel matrix.
#[derive(Debug, Clone)]
pub struct DenseKernel<T: Scalar> {
    k: DMatrix<T>,
}

impl<T: Scalar> DenseKernel<T> {
    pub fn new(k: DMatrix<T>) -> Self {
        Self { k }
    }

    pub fn from_sq_distances(params: &KernelParams<T>, d2: &DMatrix<T>) -> Self {
        Self::new(kernel_matrix_from_sq_distances(params, d2))
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.k
    }
}

impl<T: Scalar> KernelSource<T> for DenseKernel<T> {
    fn n_rows(&self) -> usize {
        self.k.nrows()
    }

    fn n_support(&self) -> usize {
        self.k.ncols()
    }

    fn block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<T> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.k[(rows[i], cols[j])])
    }

    fn rows(&self, rows: &[usize]) -> DMatrix<T> {
        self.k.select_rows(rows)
    }
}
