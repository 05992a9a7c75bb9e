//! Small linear-algebra helpers shared by the least-squares solvers.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};

use crate::error::{Error, Result};

/// Symmetric positive-definite matrix in lower band storage.
///
/// `band[i][k]` holds `A[i][i - k]` for `k <= bandwidth`.
#[derive(Debug, Clone)]
pub struct BandedSpd {
    n: usize,
    bandwidth: usize,
    band: Vec<f64>,
}

impl BandedSpd {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        Self {
            n,
            bandwidth,
            band: vec![0.0; n * (bandwidth + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn idx(&self, row: usize, col: usize) -> usize {
        debug_assert!(col <= row && row - col <= self.bandwidth);
        row * (self.bandwidth + 1) + (row - col)
    }

    /// Adds `v` to `A[row][col]` (and implicitly its mirror). Entries outside
    /// the band are a programming error.
    pub fn add(&mut self, row: usize, col: usize, v: f64) {
        let (r, c) = if row >= col { (row, col) } else { (col, row) };
        assert!(
            r - c <= self.bandwidth,
            "entry ({r}, {c}) outside band {}",
            self.bandwidth
        );
        let i = self.idx(r, c);
        self.band[i] += v;
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let (r, c) = if row >= col { (row, col) } else { (col, row) };
        if r - c > self.bandwidth {
            return 0.0;
        }
        self.band[self.idx(r, c)]
    }

    pub fn diagonal(&self, i: usize) -> f64 {
        self.band[self.idx(i, i)]
    }

    pub fn add_diagonal(&mut self, i: usize, v: f64) {
        let k = self.idx(i, i);
        self.band[k] += v;
    }

    /// Solves `A x = b` by banded Cholesky.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.n;
        let bw = self.bandwidth;
        let mut l = self.clone();
        for j in 0..n {
            let lo = j.saturating_sub(bw);
            let mut d = l.get(j, j);
            for k in lo..j {
                let v = l.get(j, k);
                d -= v * v;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::LinearSolve(format!(
                    "banded matrix not positive definite at pivot {j}"
                )));
            }
            let d = d.sqrt();
            let jj = l.idx(j, j);
            l.band[jj] = d;
            for i in (j + 1)..(j + bw + 1).min(n) {
                let mut s = l.get(i, j);
                let lo_i = i.saturating_sub(bw).max(lo);
                for k in lo_i..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                let ij = l.idx(i, j);
                l.band[ij] = s / d;
            }
        }
        let mut y = b.clone();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = y[i];
            for k in lo..i {
                s -= l.get(i, k) * y[k];
            }
            y[i] = s / l.get(i, i);
        }
        for i in (0..n).rev() {
            let hi = (i + bw + 1).min(n);
            let mut s = y[i];
            for k in (i + 1)..hi {
                s -= l.get(k, i) * y[k];
            }
            y[i] = s / l.get(i, i);
        }
        Ok(y)
    }
}

/// Accumulates a sparse symmetric matrix from dense blocks and solves it with
/// a sparse Cholesky factorization.
#[derive(Debug, Clone)]
pub struct SparseSpdBuilder {
    n: usize,
    coo: CooMatrix<f64>,
}

impl SparseSpdBuilder {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            coo: CooMatrix::new(n, n),
        }
    }

    /// Adds a dense block at `(row, col)`; the caller is responsible for also
    /// adding the transposed block for off-diagonal positions.
    pub fn add_block(&mut self, row: usize, col: usize, block: &DMatrix<f64>) {
        for c in 0..block.ncols() {
            for r in 0..block.nrows() {
                let v = block[(r, c)];
                if v != 0.0 {
                    self.coo.push(row + r, col + c, v);
                }
            }
        }
    }

    pub fn add(&mut self, row: usize, col: usize, v: f64) {
        self.coo.push(row, col, v);
    }

    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let csc = CscMatrix::from(&self.coo);
        let chol = CscCholesky::factor(&csc)
            .map_err(|e| Error::LinearSolve(format!("sparse Cholesky: {e}")))?;
        let rhs = DMatrix::from_column_slice(self.n, 1, b.as_slice());
        let x = chol.solve(&rhs);
        let x = DVector::from_column_slice(x.as_slice());
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::LinearSolve("non-finite solution".into()));
        }
        Ok(x)
    }
}

/// Dense SPD solve via Cholesky.
pub fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::LinearSolve("dense matrix not positive definite".into()))?;
    Ok(chol.solve(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn banded_matches_dense() {
        let n = 30;
        let bw = 4;
        let mut band = BandedSpd::zeros(n, bw);
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            for k in 0..=bw.min(i) {
                let v = if k == 0 {
                    10.0 + i as f64
                } else {
                    1.0 / (1.0 + (i * 7 + k * 3) as f64 % 5.0)
                };
                band.add(i, i - k, v);
                dense[(i, i - k)] += v;
                if k > 0 {
                    dense[(i - k, i)] += v;
                }
            }
        }
        let b = DVector::from_fn(n, |i, _| (i as f64).sin());
        let x1 = band.solve(&b).unwrap();
        let x2 = solve_spd(dense.clone(), &b).unwrap();
        assert!((x1 - &x2).norm() < 1e-12);

        let mut sp = SparseSpdBuilder::new(n);
        for r in 0..n {
            for c in 0..n {
                if dense[(r, c)] != 0.0 {
                    sp.add(r, c, dense[(r, c)]);
                }
            }
        }
        let x3 = sp.solve(&b).unwrap();
        assert!((x3 - x2).norm() < 1e-12);
    }

    #[test]
    fn banded_rejects_indefinite() {
        let mut band = BandedSpd::zeros(2, 1);
        band.add(0, 0, 1.0);
        band.add(1, 0, 2.0);
        band.add(1, 1, 1.0);
        assert!(band.solve(&DVector::from_element(2, 1.0)).is_err());
    }
}
