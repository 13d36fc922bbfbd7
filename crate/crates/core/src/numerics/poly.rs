use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Polynomial with coefficients stored constant term first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    coefficients: Vec<f64>,
}

impl Polynomial {
    pub fn new(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.is_empty() {
            return Err(Error::Fit(
                "polynomial needs at least one coefficient".into(),
            ));
        }
        Ok(Self { coefficients })
    }

    pub fn constant(c: f64) -> Self {
        Self {
            coefficients: vec![c],
        }
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Horner evaluation.
    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients
            .iter()
            .rev()
            .fold(0.0, |acc, &c| acc * x + c)
    }

    /// Sum of squared residuals over the sample.
    pub fn residual(&self, xs: &[f64], ys: &[f64]) -> f64 {
        xs.iter()
            .zip(ys)
            .map(|(&x, &y)| (self.eval(x) - y).powi(2))
            .sum()
    }
}

pub fn poly_eval(p: &Polynomial, x: f64) -> f64 {
    p.eval(x)
}

/// Least-squares polynomial fit through the normal equations, solved by
/// Gaussian elimination with partial pivoting.
///
/// Callers are expected to map `xs` into `[0, 1]` first; the Vandermonde
/// system is not rescaled here.
pub fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Result<Polynomial> {
    if xs.len() != ys.len() {
        return Err(Error::Fit(format!(
            "{} abscissae and {} ordinates",
            xs.len(),
            ys.len()
        )));
    }
    let n = degree + 1;
    if xs.len() < n {
        return Err(Error::Fit(format!(
            "degree {degree} needs at least {n} samples, got {}",
            xs.len()
        )));
    }

    // Power sums: normal[i][j] = sum x^(i+j), rhs[i] = sum y x^i.
    let mut power_sums = vec![0.0f64; 2 * degree + 1];
    let mut rhs = vec![0.0f64; n];
    for (&x, &y) in xs.iter().zip(ys) {
        let mut p = 1.0;
        for (k, s) in power_sums.iter_mut().enumerate() {
            *s += p;
            if k < n {
                rhs[k] += y * p;
            }
            p *= x;
        }
    }
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| power_sums[i + j]).collect())
        .collect();

    let scale = a
        .iter()
        .enumerate()
        .map(|(i, r)| r[i].abs())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot_row][col].abs() <= 1e-13 * scale {
            return Err(Error::Fit(format!(
                "normal equations are singular at column {col} (rank-deficient design)"
            )));
        }
        a.swap(col, pivot_row);
        rhs.swap(col, pivot_row);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            let (upper, lower) = a.split_at_mut(row);
            for (x, &p) in lower[0][col..n].iter_mut().zip(&upper[col][col..n]) {
                *x -= factor * p;
            }
            rhs[row] -= factor * rhs[col];
        }
    }

    let mut coeffs = vec![0.0f64; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * coeffs[k]).sum();
        coeffs[row] = (rhs[row] - tail) / a[row][row];
    }
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Fit("non-finite coefficients".into()));
    }
    Polynomial::new(coeffs)
}
