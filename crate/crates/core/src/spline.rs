//! Natural and periodic cubic splines through control points.

use crate::error::{Error, Result};

/// Piecewise cubic in second-derivative form.
#[derive(Clone, Debug, PartialEq)]
pub struct CubicSpline {
    knots: Vec<f64>,
    values: Vec<f64>,
    second: Vec<f64>,
    period: Option<f64>,
}

impl CubicSpline {
    /// Natural spline (zero curvature at both ends). Needs at least two
    /// strictly increasing knots; two knots give the straight line.
    pub fn natural(knots: &[f64], values: &[f64]) -> Result<Self> {
        check_knots(knots, values, 2)?;
        let n = knots.len();
        let mut second = vec![0.0; n];
        if n > 2 {
            let m = n - 2;
            let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
            let mut diag = vec![0.0; m];
            let mut upper = vec![0.0; m];
            let mut rhs = vec![0.0; m];
            for r in 0..m {
                let i = r + 1;
                diag[r] = 2.0 * (h[i - 1] + h[i]);
                upper[r] = h[i];
                rhs[r] = 6.0
                    * ((values[i + 1] - values[i]) / h[i] - (values[i] - values[i - 1]) / h[i - 1]);
            }
            // Thomas; sub-diagonal entry of row r is h[r]
            for r in 1..m {
                let f = h[r] / diag[r - 1];
                diag[r] -= f * upper[r - 1];
                rhs[r] -= f * rhs[r - 1];
            }
            let mut sol = vec![0.0; m];
            sol[m - 1] = rhs[m - 1] / diag[m - 1];
            for r in (0..m - 1).rev() {
                sol[r] = (rhs[r] - upper[r] * sol[r + 1]) / diag[r];
            }
            second[1..n - 1].copy_from_slice(&sol);
        }
        Ok(CubicSpline {
            knots: knots.to_vec(),
            values: values.to_vec(),
            second,
            period: None,
        })
    }

    /// Periodic spline with the given period. Knots must be strictly
    /// increasing and span less than one period.
    pub fn periodic(knots: &[f64], values: &[f64], period: f64) -> Result<Self> {
        check_knots(knots, values, 3)?;
        let n = knots.len();
        if !(period > 0.0) || knots[n - 1] - knots[0] >= period {
            return Err(Error::config(
                "periodic spline knots must span less than one period",
            ));
        }
        // h[i] = x_{i+1} - x_i with x_n = x_0 + period
        let h: Vec<f64> = (0..n)
            .map(|i| {
                if i + 1 < n {
                    knots[i + 1] - knots[i]
                } else {
                    knots[0] + period - knots[n - 1]
                }
            })
            .collect();
        let mut a = vec![0.0; n * n];
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            let prev = (i + n - 1) % n;
            let next = (i + 1) % n;
            a[i * n + i] += 2.0 * (h[prev] + h[i]);
            a[i * n + prev] += h[prev];
            a[i * n + next] += h[i];
            rhs[i] =
                6.0 * ((values[next] - values[i]) / h[i] - (values[i] - values[prev]) / h[prev]);
        }
        let second = solve_dense(a, rhs, n)?;
        Ok(CubicSpline {
            knots: knots.to_vec(),
            values: values.to_vec(),
            second,
            period: Some(period),
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Natural splines clamp `x` into the knot range.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.knots.len();
        match self.period {
            None => {
                let x = x.clamp(self.knots[0], self.knots[n - 1]);
                let i = self.knots.partition_point(|&k| k <= x).clamp(1, n - 1) - 1;
                self.piece(i, i + 1, self.knots[i], self.knots[i + 1], x)
            }
            Some(p) => {
                let x0 = self.knots[0];
                let x = x0 + (x - x0).rem_euclid(p);
                let i = self.knots.partition_point(|&k| k <= x).max(1) - 1;
                if i + 1 < n {
                    self.piece(i, i + 1, self.knots[i], self.knots[i + 1], x)
                } else {
                    self.piece(n - 1, 0, self.knots[n - 1], x0 + p, x)
                }
            }
        }
    }

    fn piece(&self, a: usize, b: usize, xa: f64, xb: f64, x: f64) -> f64 {
        let h = xb - xa;
        let (ma, mb) = (self.second[a], self.second[b]);
        let (ya, yb) = (self.values[a], self.values[b]);
        let (da, db) = (xb - x, x - xa);
        ma * da.powi(3) / (6.0 * h)
            + mb * db.powi(3) / (6.0 * h)
            + (ya / h - ma * h / 6.0) * da
            + (yb / h - mb * h / 6.0) * db
    }
}

fn check_knots(knots: &[f64], values: &[f64], min: usize) -> Result<()> {
    if knots.len() != values.len() {
        return Err(Error::config(format!(
            "spline has {} knots but {} values",
            knots.len(),
            values.len()
        )));
    }
    if knots.len() < min {
        return Err(Error::config(format!("spline needs at least {min} knots")));
    }
    if knots.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::config("spline knots must be strictly increasing"));
    }
    Ok(())
}

/// Gaussian elimination with partial pivoting, for the small cyclic systems.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&r, &s| a[r * n + col].abs().total_cmp(&a[s * n + col].abs()))
            .unwrap_or(col);
        if a[piv * n + col].abs() < 1e-300 {
            return Err(Error::config("singular spline system"));
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        for r in (col + 1)..n {
            let f = a[r * n + col] / a[col * n + col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = ((r + 1)..n).map(|k| a[r * n + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    /// Independent route: solve for all 4(n-1) polynomial coefficients of
    /// the piecewise cubic from interpolation, C¹, C² and natural end
    /// conditions, then evaluate the power form directly.
    fn coefficient_oracle(x: &[f64], y: &[f64], q: f64) -> f64 {
        let segs = x.len() - 1;
        let n = 4 * segs;
        let mut a = vec![0.0; n * n];
        let mut b = vec![0.0; n];
        let mut row = 0;
        // piece s: c0 + c1 t + c2 t² + c3 t³ with t = x - x_s
        for s in 0..segs {
            let h = x[s + 1] - x[s];
            let c = 4 * s;
            a[row * n + c] = 1.0;
            b[row] = y[s];
            row += 1;
            a[row * n + c] = 1.0;
            a[row * n + c + 1] = h;
            a[row * n + c + 2] = h * h;
            a[row * n + c + 3] = h * h * h;
            b[row] = y[s + 1];
            row += 1;
        }
        for s in 0..segs - 1 {
            let h = x[s + 1] - x[s];
            let c = 4 * s;
            let d = 4 * (s + 1);
            a[row * n + c + 1] = 1.0;
            a[row * n + c + 2] = 2.0 * h;
            a[row * n + c + 3] = 3.0 * h * h;
            a[row * n + d + 1] = -1.0;
            row += 1;
            a[row * n + c + 2] = 2.0;
            a[row * n + c + 3] = 6.0 * h;
            a[row * n + d + 2] = -2.0;
            row += 1;
        }
        a[row * n + 2] = 2.0;
        row += 1;
        let hl = x[segs] - x[segs - 1];
        let c = 4 * (segs - 1);
        a[row * n + c + 2] = 2.0;
        a[row * n + c + 3] = 6.0 * hl;
        let coef = solve_dense(a, b, n).unwrap();
        let s = (0..segs).find(|&s| q <= x[s + 1]).unwrap_or(segs - 1);
        let t = q - x[s];
        let c = &coef[4 * s..4 * s + 4];
        c[0] + t * (c[1] + t * (c[2] + t * c[3]))
    }

    #[test]
    fn natural_matches_coefficient_oracle() {
        let x = [0.0, 1.3, 2.0, 3.7, 5.0];
        let y = [0.4, -1.2, 2.5, 0.3, -0.7];
        let s = CubicSpline::natural(&x, &y).unwrap();
        for q in [0.65, 1.65, 2.85, 4.35, 2.5, 0.0, 5.0] {
            assert!(
                (s.eval(q) - coefficient_oracle(&x, &y, q)).abs() < 1e-10,
                "q = {q}"
            );
        }
    }

    #[test]
    fn natural_interpolates_and_reproduces_lines() {
        let x = [0.0, 1.0, 2.5, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 2.0 * v).collect();
        let s = CubicSpline::natural(&x, &y).unwrap();
        for q in [0.1, 0.7, 1.9, 3.3] {
            assert!((s.eval(q) - (3.0 - 2.0 * q)).abs() < 1e-12);
        }
        let two = CubicSpline::natural(&[0.0, 2.0], &[1.0, 5.0]).unwrap();
        assert!((two.eval(0.5) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn periodic_constant_and_wrap() {
        let knots: Vec<f64> = (0..8).map(|k| k as f64 * TAU / 8.0).collect();
        let s = CubicSpline::periodic(&knots, &[2.5; 8], TAU).unwrap();
        for q in [0.0, 0.3, 3.0, 6.2, -1.0, 10.0] {
            assert!((s.eval(q) - 2.5).abs() < 1e-12);
        }
        let vals: Vec<f64> = knots.iter().map(|t| t.sin()).collect();
        let s = CubicSpline::periodic(&knots, &vals, TAU).unwrap();
        for q in [0.2, 2.0, 5.9] {
            assert!((s.eval(q) - s.eval(q + TAU)).abs() < 1e-12);
            assert!((s.eval(q) - q.sin()).abs() < 1e-2);
        }
        for (t, v) in knots.iter().zip(&vals) {
            assert!((s.eval(*t) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_knots() {
        assert!(CubicSpline::natural(&[0.0], &[1.0]).is_err());
        assert!(CubicSpline::natural(&[0.0, 0.0], &[1.0, 2.0]).is_err());
        assert!(CubicSpline::natural(&[0.0, 1.0], &[1.0]).is_err());
        assert!(CubicSpline::periodic(&[0.0, 1.0, 7.0], &[1.0; 3], TAU).is_err());
    }
}
