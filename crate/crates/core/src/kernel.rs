//! Kernel matrices over input points and linear objects on the space of
//! symmetric index pairs.
//!
//! A symmetric `N x N` matrix has `P = N(N+1)/2` free entries. Pair space
//! uses the canonical upper-triangular ordering `(0,0), (0,1), .., (0,N-1),
//! (1,1), ..`. A pair vector stores one value per unordered pair; an
//! off-diagonal slot stands for both `(a,b)` and `(b,a)`, so a directional
//! derivative along a pair vector perturbs both mirrored entries at once.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default PSD tolerance, relative to the trace.
pub const TOL_PSD: f64 = 1e-10;

/// Canonical bijection between unordered pairs `{a,b}` and offsets `0..P`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIndex {
    n: usize,
    pairs: Vec<(usize, usize)>,
}

impl PairIndex {
    pub fn new(n: usize) -> Self {
        let mut pairs = Vec::with_capacity(n * (n + 1) / 2);
        for a in 0..n {
            for b in a..n {
                pairs.push((a, b));
            }
        }
        Self { n, pairs }
    }

    /// Number of input points.
    pub fn points(&self) -> usize {
        self.n
    }

    /// Number of pair slots, `N(N+1)/2`.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Offset of the unordered pair `{a,b}`.
    pub fn offset(&self, a: usize, b: usize) -> usize {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        debug_assert!(b < self.n);
        a * self.n - a * (a + 1) / 2 + b
    }

    /// The pair `(a,b)` with `a <= b` stored at `offset`.
    pub fn pair(&self, offset: usize) -> (usize, usize) {
        self.pairs[offset]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, (usize, usize))> + '_ {
        self.pairs.iter().copied().enumerate()
    }
}

/// Symmetric `N x N` matrix over input points.
///
/// Construction symmetrizes the input as `(K + K^T)/2`. Positive
/// semi-definiteness is not enforced at construction since first-order
/// corrections such as `K1` live in the same type; operations that need it
/// call [`KernelMatrix::check_psd`] or validate their 2x2 marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct KernelMatrix {
    entries: DMatrix<f64>,
}

impl KernelMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::Shape(format!(
                "kernel must be square, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("kernel has non-finite entries".into()));
        }
        let sym = (&entries + entries.transpose()) * 0.5;
        Ok(Self { entries: sym })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("kernel rows must all have length N".into()));
        }
        Self::new(DMatrix::from_fn(n, n, |a, b| rows[a][b]))
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            entries: DMatrix::zeros(n, n),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            entries: DMatrix::identity(n, n),
        }
    }

    /// `(1-rho)*kappa*I + rho*kappa*ones`, the equicorrelated initial kernel.
    pub fn equicorrelated(n: usize, kappa: f64, rho: f64) -> Self {
        Self {
            entries: DMatrix::from_fn(n, n, |a, b| if a == b { kappa } else { rho * kappa }),
        }
    }

    pub fn from_pair_vector(index: &PairIndex, v: &DVector<f64>) -> Self {
        let n = index.points();
        let mut m = DMatrix::zeros(n, n);
        for (k, (a, b)) in index.iter() {
            m[(a, b)] = v[k];
            m[(b, a)] = v[k];
        }
        Self { entries: m }
    }

    pub fn to_pair_vector(&self, index: &PairIndex) -> DVector<f64> {
        DVector::from_iterator(index.len(), index.iter().map(|(_, (a, b))| self.entries[(a, b)]))
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.entries[(a, b)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.entries.amax()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.entries.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Fails when an eigenvalue is below `-tol * max(trace, 1e-300)`.
    pub fn check_psd(&self, tol: f64) -> Result<()> {
        let scale = self.trace().abs().max(1e-300);
        let min = self.min_eigenvalue();
        if min < -tol * scale {
            return Err(Error::Domain(format!(
                "kernel not PSD: min eigenvalue {min:e} (trace {scale:e})"
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            entries: self.entries.map(f),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            entries: &self.entries * s,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            entries: &self.entries + &other.entries,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            entries: &self.entries - &other.entries,
        }
    }

    /// `self + s * other`
    pub fn axpy(&self, s: f64, other: &Self) -> Self {
        Self {
            entries: &self.entries + &other.entries * s,
        }
    }
}

impl TryFrom<Vec<Vec<f64>>> for KernelMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<KernelMatrix> for Vec<Vec<f64>> {
    fn from(k: KernelMatrix) -> Self {
        k.entries.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

/// Linear object on pair space, stored densely as a `P x P` array.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMatrix {
    points: usize,
    entries: DMatrix<f64>,
    symmetric: bool,
}

impl PairMatrix {
    pub fn new(points: usize, entries: DMatrix<f64>, symmetric: bool) -> Result<Self> {
        let p = points * (points + 1) / 2;
        if entries.nrows() != p || entries.ncols() != p {
            return Err(Error::Shape(format!(
                "pair matrix for N={points} must be {p}x{p}, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        Ok(Self {
            points,
            entries,
            symmetric,
        })
    }

    pub fn zeros(points: usize, symmetric: bool) -> Self {
        let p = points * (points + 1) / 2;
        Self {
            points,
            entries: DMatrix::zeros(p, p),
            symmetric,
        }
    }

    pub fn identity(points: usize) -> Self {
        let p = points * (points + 1) / 2;
        Self {
            points,
            entries: DMatrix::identity(p, p),
            symmetric: true,
        }
    }

    /// Number of input points `N`.
    pub fn points(&self) -> usize {
        self.points
    }

    /// Pair-space dimension `P`.
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.entries[(a, b)]
    }

    /// Entry for the component `(ab, cd)` addressed by point indices.
    pub fn component(&self, index: &PairIndex, ab: (usize, usize), cd: (usize, usize)) -> f64 {
        self.entries[(index.offset(ab.0, ab.1), index.offset(cd.0, cd.1))]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    /// Apply the operator to a symmetric matrix viewed as a pair vector.
    pub fn apply(&self, index: &PairIndex, v: &KernelMatrix) -> KernelMatrix {
        let pv = v.to_pair_vector(index);
        KernelMatrix::from_pair_vector(index, &(&self.entries * pv))
    }

    pub fn transpose(&self) -> Self {
        Self {
            points: self.points,
            entries: self.entries.transpose(),
            symmetric: self.symmetric,
        }
    }

    pub fn symmetrized(&self) -> Self {
        Self {
            points: self.points,
            entries: (&self.entries + self.entries.transpose()) * 0.5,
            symmetric: true,
        }
    }

    /// Largest |M - M^T| entry.
    pub fn asymmetry(&self) -> f64 {
        (&self.entries - self.entries.transpose()).amax()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.amax()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let sym = (&self.entries + self.entries.transpose()) * 0.5;
        SymmetricEigen::new(sym)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// PSD check as a covariance operator, tolerance relative to the trace.
    pub fn check_psd(&self, tol: f64) -> Result<()> {
        let scale = self.entries.trace().abs().max(1e-300);
        let min = self.min_eigenvalue();
        if min < -tol * scale {
            return Err(Error::Domain(format!(
                "pair operator not PSD: min eigenvalue {min:e} (trace {scale:e})"
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            points: self.points,
            entries: &self.entries * s,
            symmetric: self.symmetric,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            points: self.points,
            entries: &self.entries + &other.entries,
            symmetric: self.symmetric && other.symmetric,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            points: self.points,
            entries: &self.entries - &other.entries,
            symmetric: self.symmetric && other.symmetric,
        }
    }
}

/// `X_ac Y_bd + X_ad Y_bc` on pair space; the shared assembly for both the
/// Wishart piece and the covariance source.
pub fn pair_product(index: &PairIndex, x: &KernelMatrix, y: &KernelMatrix) -> DMatrix<f64> {
    let p = index.len();
    DMatrix::from_fn(p, p, |r, c| {
        let (a, b) = index.pair(r);
        let (cc, d) = index.pair(c);
        x.get(a, cc) * y.get(b, d) + x.get(a, d) * y.get(b, cc)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_index_is_bijective() {
        for n in 1..7 {
            let idx = PairIndex::new(n);
            assert_eq!(idx.len(), n * (n + 1) / 2);
            for (k, (a, b)) in idx.iter() {
                assert!(a <= b);
                assert_eq!(idx.offset(a, b), k);
                assert_eq!(idx.offset(b, a), k);
            }
        }
    }

    #[test]
    fn construction_symmetrizes() {
        let k = KernelMatrix::from_rows(&[vec![1.0, 0.2], vec![0.4, 2.0]]).unwrap();
        assert_eq!(k.get(0, 1), k.get(1, 0));
        assert!((k.get(0, 1) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn psd_check_rejects_indefinite() {
        let k = KernelMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(k.check_psd(TOL_PSD).is_err());
        assert!(KernelMatrix::equicorrelated(4, 2.0, 0.3).check_psd(TOL_PSD).is_ok());
    }

    #[test]
    fn pair_vector_round_trip() {
        let idx = PairIndex::new(3);
        let k = KernelMatrix::from_rows(&[
            vec![1.0, 0.2, 0.3],
            vec![0.2, 2.0, 0.5],
            vec![0.3, 0.5, 3.0],
        ])
        .unwrap();
        let v = k.to_pair_vector(&idx);
        assert_eq!(KernelMatrix::from_pair_vector(&idx, &v), k);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(KernelMatrix::new(DMatrix::zeros(2, 3)).is_err());
        assert!(PairMatrix::new(3, DMatrix::zeros(5, 5), true).is_err());
    }
}
