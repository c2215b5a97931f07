//! Banded Cholesky for the fixed 5-point SPD operators. Each operator is
//! factored once per grid and then reused across many right-hand sides.

use crate::error::{Error, Result};

/// Symmetric positive definite matrix in lower-band storage.
#[derive(Clone, Debug)]
pub struct BandedSpd {
    n: usize,
    bw: usize,
    // row i holds columns i-bw..=i at offsets 0..=bw
    band: Vec<f64>,
}

impl BandedSpd {
    pub fn new(n: usize, bw: usize) -> Self {
        BandedSpd {
            n,
            bw,
            band: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (j + self.bw - i)
    }

    /// Adds `v` to entry `(i, j)`; only the lower triangle is stored, so the
    /// caller adds each off-diagonal coupling once.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(
            i - j <= self.bw,
            "entry ({i}, {j}) outside bandwidth {}",
            self.bw
        );
        let s = self.slot(i, j);
        self.band[s] += v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            for j in lo..=i {
                let a = self.band[self.slot(i, j)];
                if a == 0.0 {
                    continue;
                }
                y[i] += a * x[j];
                if j != i {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    pub fn factor(self) -> Result<BandedCholesky> {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        let mut l = self.band.clone();
        for j in 0..n {
            // diagonal
            let lo = j.saturating_sub(bw);
            let row_j = j * w;
            let off = |row: usize, col: usize| col + bw - row;
            let s: f64 = (lo..j).map(|k| l[row_j + off(j, k)].powi(2)).sum();
            let d = l[row_j + bw] - s;
            if !(d > 0.0) {
                return Err(Error::Solver {
                    context: "cholesky",
                    residual: d,
                    tolerance: 0.0,
                });
            }
            let d = d.sqrt();
            l[row_j + bw] = d;
            for i in (j + 1)..n.min(j + bw + 1) {
                let row_i = i * w;
                let lo_i = i.saturating_sub(bw);
                let a = row_i + off(i, lo_i);
                let b = row_j + off(j, lo_i);
                let len = j - lo_i;
                let s: f64 = l[a..a + len]
                    .iter()
                    .zip(&l[b..b + len])
                    .map(|(x, y)| x * y)
                    .sum();
                let idx = row_i + off(i, j);
                l[idx] = (l[idx] - s) / d;
            }
        }
        Ok(BandedCholesky {
            matrix: self,
            factor: l,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BandedCholesky {
    matrix: BandedSpd,
    factor: Vec<f64>,
}

impl BandedCholesky {
    pub fn dim(&self) -> usize {
        self.matrix.n
    }

    pub fn matrix(&self) -> &BandedSpd {
        &self.matrix
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw) = (self.matrix.n, self.matrix.bw);
        let w = bw + 1;
        let l = &self.factor;
        let mut y = b.to_vec();
        // L y = b
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let row = i * w;
            let s: f64 = (lo..i).map(|k| l[row + k + bw - i] * y[k]).sum();
            y[i] = (y[i] - s) / l[row + bw];
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let row = i * w;
            y[i] /= l[row + bw];
            let xi = y[i];
            let lo = i.saturating_sub(bw);
            for k in lo..i {
                y[k] -= l[row + k + bw - i] * xi;
            }
        }
        y
    }

    /// `‖A·x − b‖ / ‖b‖`, or `‖A·x‖` when `b = 0`.
    pub fn relative_residual(&self, x: &[f64], b: &[f64]) -> f64 {
        let ax = self.matrix.matvec(x);
        let r: f64 = ax
            .iter()
            .zip(b)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nb > 0.0 {
            r / nb
        } else {
            r
        }
    }

    /// Solve with one step of iterative refinement, then check the residual.
    pub fn solve_checked(
        &self,
        b: &[f64],
        tolerance: f64,
        context: &'static str,
    ) -> Result<(Vec<f64>, f64)> {
        let mut x = self.solve(b);
        let ax = self.matrix.matvec(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let dx = self.solve(&r);
        for (xi, d) in x.iter_mut().zip(dx) {
            *xi += d;
        }
        let residual = self.relative_residual(&x, b);
        if !(residual <= tolerance) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver {
                context,
                residual,
                tolerance,
            });
        }
        Ok((x, residual))
    }
}
