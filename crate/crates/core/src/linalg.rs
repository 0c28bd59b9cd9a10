//! Dense factorizations used by the solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<T: Scalar> {
    l: DMatrix<T>,
}

impl<T: Scalar> Cholesky<T> {
    /// Left-looking factorization. Fails on the first pivot at or below
    /// `n·ε·max|diag|`, reporting its row and value.
    pub fn factor(a: &DMatrix<T>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::dims(format!(
                "{}x{} matrix is not square",
                n,
                a.ncols()
            )));
        }
        let max_diag = (0..n).fold(T::zero(), |m, i| m.max(a[(i, i)].abs()));
        let floor = T::from_usize_lossy(n.max(1)) * T::machine_epsilon() * max_diag;
        let mut l = DMatrix::<T>::zeros(n, n);
        for j in 0..n {
            let mut col: DVector<T> = a.view((j, j), (n - j, 1)).column(0).into_owned();
            if j > 0 {
                let lrow: DVector<T> = l.view((j, 0), (1, j)).transpose().column(0).into_owned();
                col.gemv(-T::one(), &l.view((j, 0), (n - j, j)), &lrow, T::one());
            }
            let pivot = col[0];
            if !(pivot > floor) {
                return Err(Error::Factorization {
                    index: j,
                    pivot: pivot.as_f64(),
                });
            }
            let d = pivot.sqrt();
            l[(j, j)] = d;
            for i in 1..(n - j) {
                l[(j + i, j)] = col[i] / d;
            }
        }
        Ok(Self { l })
    }

    pub fn l(&self) -> &DMatrix<T> {
        &self.l
    }

    /// Solves `L Lᵀ X = B`.
    pub fn solve(&self, b: &DMatrix<T>) -> Result<DMatrix<T>> {
        if b.nrows() != self.l.nrows() {
            return Err(Error::dims(format!(
                "right-hand side has {} rows, system has {}",
                b.nrows(),
                self.l.nrows()
            )));
        }
        let y = self
            .l
            .solve_lower_triangular(b)
            .ok_or_else(|| Error::Factorization {
                index: 0,
                pivot: 0.0,
            })?;
        self.l
            .tr_solve_lower_triangular(&y)
            .ok_or_else(|| Error::Factorization {
                index: 0,
                pivot: 0.0,
            })
    }
}

/// Leading eigenpairs of a symmetric matrix, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct TopEigen<T: Scalar> {
    pub values: Vec<T>,
    /// Unit eigenvectors as columns, in the order of `values`.
    pub vectors: DMatrix<T>,
}

/// All eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
pub fn symmetric_eigen_desc<T: Scalar>(a: DMatrix<T>) -> TopEigen<T> {
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    TopEigen {
        values: order.iter().map(|&i| eig.eigenvalues[i]).collect(),
        vectors: eig.eigenvectors.select_columns(&order),
    }
}

/// Matrices at or below this order are always decomposed densely.
const DENSE_LIMIT: usize = 600;

/// Top-`k` eigenpairs of a symmetric positive semidefinite matrix.
///
/// Small problems, or requests for a large share of the spectrum, use a dense
/// decomposition. Otherwise block subspace iteration with Rayleigh-Ritz
/// extraction runs until the leading `k` Ritz values settle.
pub fn top_eigen<T: Scalar>(a: &DMatrix<T>, k: usize, seed: u64) -> TopEigen<T> {
    let m = a.nrows();
    let k = k.min(m);
    let oversample = (k / 2).max(16);
    if m <= DENSE_LIMIT || 2 * (k + oversample) >= m {
        let mut full = symmetric_eigen_desc(a.clone());
        full.values.truncate(k);
        full.vectors = full.vectors.columns(0, k).into_owned();
        return full;
    }
    let block = k + oversample;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = DMatrix::<T>::from_fn(m, block, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::lit(v)
    });
    let mut q = start.qr().q();
    let tol = T::lit(1e-7);
    let mut previous: Option<Vec<T>> = None;
    let mut ritz = None;
    for _ in 0..60 {
        let z = a * &q;
        let t = q.transpose() * &z;
        let t = (&t + t.transpose()) * T::lit(0.5);
        let eig = symmetric_eigen_desc(t);
        let settled = previous.as_ref().is_some_and(|prev| {
            (0..k).all(|i| (eig.values[i] - prev[i]).abs() <= tol * eig.values[0].abs())
        });
        previous = Some(eig.values.clone());
        if settled {
            ritz = Some((q.clone(), eig));
            break;
        }
        ritz = Some((q.clone(), eig));
        q = z.qr().q();
    }
    let (basis, eig) = ritz.expect("at least one iteration");
    let vectors = basis * eig.vectors.columns(0, k);
    TopEigen {
        values: eig.values[..k].to_vec(),
        vectors,
    }
}
