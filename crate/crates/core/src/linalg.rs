//! Sparse Hermitian storage plus the small set of dense and banded kernels the
//! rest of the crate needs: dense eigenvalues, Sylvester-inertia counting on
//! banded real symmetric matrices, and bisection for eigenvalues in a window.

use std::collections::BTreeMap;
use std::io::{self, Write};

use nalgebra::{Complex, DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

/// Pivot replacement used when an LDL^T pivot is exactly zero. Positive, so an
/// eigenvalue sitting exactly at the shift is counted as "not below".
const TINY_PIVOT: f64 = 1e-300;

/// Compressed-row Hermitian matrix. Only Hermitian matrices are ever built, but
/// both triangles are stored so row access is cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<C64>,
}

/// Accumulating triplet builder; duplicate entries are summed.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    n: usize,
    entries: BTreeMap<(usize, usize), C64>,
}

impl TripletBuilder {
    pub fn new(n: usize) -> Self {
        TripletBuilder {
            n,
            entries: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, row: usize, col: usize, value: C64) {
        debug_assert!(row < self.n && col < self.n);
        *self.entries.entry((row, col)).or_insert(C64::new(0.0, 0.0)) += value;
    }

    pub fn build(self) -> SparseMatrix {
        let n = self.n;
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(self.entries.len());
        let mut values = Vec::with_capacity(self.entries.len());
        for (&(r, c), &v) in &self.entries {
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }
}

impl SparseMatrix {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[span.clone()].binary_search(&j) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => C64::new(0.0, 0.0),
        }
    }

    pub fn diagonal(&self) -> Vec<C64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    /// True when every stored entry has zero imaginary part.
    pub fn is_real(&self) -> bool {
        self.values.iter().all(|v| v.im == 0.0)
    }

    /// max |A_ij - conj(A_ji)| over stored entries.
    pub fn hermitian_defect(&self) -> f64 {
        self.triplets()
            .map(|(i, j, v)| (v - self.get(j, i).conj()).norm())
            .fold(0.0, f64::max)
    }

    /// Largest |i - j| over stored entries.
    pub fn bandwidth(&self) -> usize {
        self.triplets()
            .map(|(i, j, _)| i.abs_diff(j))
            .max()
            .unwrap_or(0)
    }

    /// Copy with `shift[i]` added to the diagonal.
    pub fn with_added_diagonal(&self, shift: &[f64]) -> SparseMatrix {
        assert_eq!(shift.len(), self.n);
        let mut b = TripletBuilder::new(self.n);
        for (i, j, v) in self.triplets() {
            b.add(i, j, v);
        }
        for (i, &s) in shift.iter().enumerate() {
            if s != 0.0 {
                b.add(i, i, C64::new(s, 0.0));
            }
        }
        b.build()
    }

    pub fn mul_vec(&self, x: &[C64]) -> Vec<C64> {
        (0..self.n)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.triplets() {
            m[(i, j)] = v;
        }
        m
    }

    /// Real part as a dense matrix; callers check `is_real` first.
    pub fn to_dense_real(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.triplets() {
            m[(i, j)] = v.re;
        }
        m
    }

    /// Sorted eigenvalues by dense diagonalization.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = if self.is_real() {
            self.to_dense_real().symmetric_eigenvalues().iter().copied().collect()
        } else {
            self.to_dense().symmetric_eigenvalues().iter().copied().collect()
        };
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Writes `row col re im` lines (0-based), one per stored entry.
    pub fn write_triplets<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "# n={} nnz={}", self.n, self.nnz())?;
        for (i, j, v) in self.triplets() {
            writeln!(out, "{} {} {:.17e} {:.17e}", i, j, v.re, v.im)?;
        }
        Ok(())
    }
}

/// Eigenvalue counting for a real symmetric banded matrix.
///
/// The matrix is viewed as block tridiagonal with block size equal to its
/// bandwidth; the block LDL^T recursion `D_k = A_kk - B_k D_{k-1}^{-1} B_k^T`
/// gives inertia(A - E) = sum_k inertia(D_k). Bandwidth 1 reduces to the
/// classical Sturm sequence.
#[derive(Debug, Clone)]
pub struct InertiaCounter {
    n: usize,
    block: usize,
    dense_rows: Vec<Vec<(usize, f64)>>,
    tridiag: Option<(Vec<f64>, Vec<f64>)>,
}

impl InertiaCounter {
    pub fn new(matrix: &SparseMatrix) -> Result<Self> {
        if !matrix.is_real() {
            return Err(Error::Numerical(
                "inertia counting needs a real symmetric matrix".into(),
            ));
        }
        let n = matrix.dim();
        let block = matrix.bandwidth().max(1);
        let tridiag = if block == 1 {
            let diag = (0..n).map(|i| matrix.get(i, i).re).collect();
            let off_sq = (1..n).map(|i| matrix.get(i, i - 1).re.powi(2)).collect();
            Some((diag, off_sq))
        } else {
            None
        };
        let dense_rows = (0..n)
            .map(|i| matrix.row(i).map(|(j, v)| (j, v.re)).collect())
            .collect();
        Ok(InertiaCounter {
            n,
            block,
            dense_rows,
            tridiag,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of eigenvalues strictly below `energy`.
    pub fn count_below(&self, energy: f64) -> usize {
        if self.n == 0 {
            return 0;
        }
        match &self.tridiag {
            Some((diag, off_sq)) => sturm_count(diag, off_sq, energy),
            None => self.block_count(energy),
        }
    }

    fn block_count(&self, energy: f64) -> usize {
        let b = self.block;
        let nblocks = self.n.div_ceil(b);
        let span = |k: usize| (k * b, ((k + 1) * b).min(self.n));
        let mut count = 0;
        // Inverse of the previous Schur complement.
        let mut prev_inv: Option<DMatrix<f64>> = None;
        for k in 0..nblocks {
            let (lo, hi) = span(k);
            let m = hi - lo;
            let mut d = DMatrix::<f64>::zeros(m, m);
            let mut coupling: Option<DMatrix<f64>> = None;
            let plo = if k > 0 { span(k - 1).0 } else { 0 };
            let pm = if k > 0 { lo - plo } else { 0 };
            if k > 0 {
                coupling = Some(DMatrix::zeros(m, pm));
            }
            for r in lo..hi {
                for &(c, v) in &self.dense_rows[r] {
                    if (lo..hi).contains(&c) {
                        d[(r - lo, c - lo)] += v;
                    } else if k > 0 && (plo..lo).contains(&c) {
                        if let Some(cm) = coupling.as_mut() {
                            cm[(r - lo, c - plo)] = v;
                        }
                    }
                }
                d[(r - lo, r - lo)] -= energy;
            }
            if let (Some(bmat), Some(inv)) = (coupling.as_ref(), prev_inv.as_ref()) {
                d -= bmat * inv * bmat.transpose();
            }
            let eig = SymmetricEigen::new(d);
            let mut vals = eig.eigenvalues.clone();
            for v in vals.iter_mut() {
                if *v < 0.0 {
                    count += 1;
                }
                if v.abs() < TINY_PIVOT {
                    *v = TINY_PIVOT;
                }
            }
            let q = &eig.eigenvectors;
            let inv_diag = DMatrix::from_diagonal(&vals.map(|v| 1.0 / v));
            prev_inv = Some(q * inv_diag * q.transpose());
        }
        count
    }

    /// Eigenvalues in [lo, hi) located by bisection to absolute tolerance `tol`.
    pub fn eigenvalues_in(&self, lo: f64, hi: f64, tol: f64) -> Vec<f64> {
        let c_lo = self.count_below(lo);
        let c_hi = self.count_below(hi);
        let mut out = Vec::with_capacity(c_hi.saturating_sub(c_lo));
        let mut left = lo;
        for idx in c_lo..c_hi {
            // smallest x with count_below(x) > idx
            let (mut a, mut b) = (left, hi);
            while b - a > tol {
                let mid = 0.5 * (a + b);
                if self.count_below(mid) > idx {
                    b = mid;
                } else {
                    a = mid;
                }
            }
            let ev = 0.5 * (a + b);
            out.push(ev);
            left = a;
        }
        out
    }
}

fn sturm_count(diag: &[f64], off_sq: &[f64], energy: f64) -> usize {
    let mut count = 0;
    let mut q = diag[0] - energy;
    if q < 0.0 {
        count += 1;
    }
    for i in 1..diag.len() {
        if q == 0.0 {
            q = TINY_PIVOT;
        }
        q = diag[i] - energy - off_sq[i - 1] / q;
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Seeded GUE sample of size `n`, scaled so the spectrum fills roughly `[-2, 2]`.
pub fn random_hermitian(n: usize, seed: u64) -> DMatrix<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = (1.0 / n.max(1) as f64).sqrt();
    let mut m = DMatrix::<C64>::zeros(n, n);
    for i in 0..n {
        let d: f64 = rng.sample(StandardNormal);
        m[(i, i)] = C64::new(d * s, 0.0);
        for j in i + 1..n {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            let v = C64::new(re, im) * (s / 2f64.sqrt());
            m[(i, j)] = v;
            m[(j, i)] = v.conj();
        }
    }
    m
}

/// Largest singular value of a dense complex matrix.
pub fn operator_norm(m: &DMatrix<C64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Operator norm of a Hermitian matrix via its eigenvalues.
pub fn hermitian_norm(m: &DMatrix<C64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
}
