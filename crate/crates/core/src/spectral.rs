//! Legendre modal basis on a 1-D interval.
//!
//! States are vectors of modal coefficients: `y(x) = sum_j c_j L^j(s(x))`
//! where `s` maps the physical interval `[x_lo, x_hi]` affinely onto the
//! reference interval `[-1, 1]` and `L^j` is the `j`-th Legendre polynomial.
//! The grid bundles the modal differentiation operator and the two boundary
//! evaluation functionals so downstream code never touches the affine map.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};

/// Evaluate the Legendre polynomial `L^j` at `s` via the three-term
/// recurrence `(j+1) L^{j+1}(s) = (2j+1) s L^j(s) - j L^{j-1}(s)`.
///
/// Total function: `s` outside `[-1, 1]` is evaluated as the polynomial.
pub fn legendre_eval(j: usize, s: f64) -> f64 {
    if j == 0 {
        return 1.0;
    }
    if j == 1 {
        return s;
    }
    let mut prev = 1.0;
    let mut cur = s;
    for k in 1..j {
        let next = ((2 * k + 1) as f64 * s * cur - k as f64 * prev) / (k + 1) as f64;
        prev = cur;
        cur = next;
    }
    cur
}

/// Modal Legendre basis of size `n` on `[x_lo, x_hi]`.
///
/// `diff` maps the coefficients of a polynomial to the coefficients of its
/// physical-space derivative (the `2/(x_hi - x_lo)` chain-rule factor is
/// baked in). `bnd_lo` and `bnd_hi` evaluate a coefficient vector at the
/// domain endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralGrid {
    pub n: usize,
    pub x_lo: f64,
    pub x_hi: f64,
    pub diff: DMatrix<f64>,
    pub bnd_lo: RowDVector<f64>,
    pub bnd_hi: RowDVector<f64>,
}

/// Assemble a [`SpectralGrid`].
///
/// The differentiation operator uses the exact modal derivative relation
/// `d/ds L^k = sum_{j < k, j+k odd} (2j+1) L^j`, so it is exact on every
/// polynomial of degree `< n`.
pub fn build_grid(n: usize, x_lo: f64, x_hi: f64) -> Result<SpectralGrid> {
    if n < 2 {
        return Err(Error::InvalidDimension(format!(
            "grid needs at least 2 modes, got {n}"
        )));
    }
    if !(x_lo < x_hi) {
        return Err(Error::InvalidDimension(format!(
            "domain endpoints must satisfy x_lo < x_hi, got [{x_lo}, {x_hi}]"
        )));
    }
    let scale = 2.0 / (x_hi - x_lo);
    let mut diff = DMatrix::zeros(n, n);
    for j in 0..n {
        for k in (j + 1)..n {
            if (k - j) % 2 == 1 {
                diff[(j, k)] = (2 * j + 1) as f64 * scale;
            }
        }
    }
    let bnd_lo = RowDVector::from_fn(n, |_, j| if j % 2 == 0 { 1.0 } else { -1.0 });
    let bnd_hi = RowDVector::from_element(n, 1.0);
    Ok(SpectralGrid {
        n,
        x_lo,
        x_hi,
        diff,
        bnd_lo,
        bnd_hi,
    })
}

impl SpectralGrid {
    /// Affine map from the physical coordinate to the reference interval.
    pub fn to_reference(&self, x: f64) -> f64 {
        2.0 * (x - self.x_lo) / (self.x_hi - self.x_lo) - 1.0
    }

    /// Evaluate a coefficient vector at the physical coordinate `x`.
    pub fn eval_coeffs(&self, coeffs: &DVector<f64>, x: f64) -> Result<f64> {
        if coeffs.len() != self.n {
            return Err(Error::LengthMismatch(format!(
                "expected {} coefficients, got {}",
                self.n,
                coeffs.len()
            )));
        }
        if x < self.x_lo || x > self.x_hi {
            return Err(Error::OutOfDomain {
                value: x,
                lo: self.x_lo,
                hi: self.x_hi,
            });
        }
        let s = self.to_reference(x);
        // One pass of the recurrence, accumulating the weighted sum.
        let mut acc = coeffs[0];
        if self.n > 1 {
            acc += coeffs[1] * s;
        }
        let mut prev = 1.0;
        let mut cur = s;
        for k in 1..(self.n - 1) {
            let next = ((2 * k + 1) as f64 * s * cur - k as f64 * prev) / (k + 1) as f64;
            prev = cur;
            cur = next;
            acc += coeffs[k + 1] * next;
        }
        Ok(acc)
    }

    /// Convert a polynomial given by physical-space monomial coefficients
    /// (`p(x) = sum_k mono[k] x^k`) to modal Legendre coefficients.
    ///
    /// Exact (up to round-off) for degrees `< n`; the conversion runs through
    /// the reference variable and a triangular change of basis.
    pub fn modal_from_monomials(&self, mono: &[f64]) -> Result<DVector<f64>> {
        if mono.len() > self.n {
            return Err(Error::InvalidDimension(format!(
                "polynomial degree {} does not fit in {} modes",
                mono.len() - 1,
                self.n
            )));
        }
        // x = alpha s + beta
        let alpha = 0.5 * (self.x_hi - self.x_lo);
        let beta = 0.5 * (self.x_hi + self.x_lo);
        // Expand p(alpha s + beta) into monomials of s.
        let mut mono_s = vec![0.0; self.n];
        for (k, &a_k) in mono.iter().enumerate() {
            if a_k == 0.0 {
                continue;
            }
            // (alpha s + beta)^k via binomial expansion
            let mut binom = 1.0;
            for j in 0..=k {
                // C(k, j) alpha^j beta^(k-j) s^j
                mono_s[j] += a_k * binom * alpha.powi(j as i32) * beta.powi((k - j) as i32);
                binom = binom * (k - j) as f64 / (j + 1) as f64;
            }
        }
        // V[i][j] = coefficient of s^i in L^j; upper triangular.
        let v = legendre_monomial_table(self.n);
        // Back-substitution: solve V c = mono_s.
        let mut coeffs = DVector::zeros(self.n);
        for j in (0..self.n).rev() {
            let mut r = mono_s[j];
            for k in (j + 1)..self.n {
                r -= v[(j, k)] * coeffs[k];
            }
            coeffs[j] = r / v[(j, j)];
        }
        Ok(coeffs)
    }
}

/// Monomial representation of the first `n` Legendre polynomials:
/// entry `(i, j)` is the coefficient of `s^i` in `L^j`.
fn legendre_monomial_table(n: usize) -> DMatrix<f64> {
    let mut v = DMatrix::zeros(n, n);
    v[(0, 0)] = 1.0;
    if n > 1 {
        v[(1, 1)] = 1.0;
    }
    for j in 1..(n - 1) {
        // (j+1) L^{j+1} = (2j+1) s L^j - j L^{j-1}
        for i in 0..=j {
            let shifted = v[(i, j)] * (2 * j + 1) as f64 / (j + 1) as f64;
            v[(i + 1, j + 1)] += shifted;
        }
        for i in 0..j {
            v[(i, j + 1)] -= v[(i, j - 1)] * j as f64 / (j + 1) as f64;
        }
    }
    v
}
