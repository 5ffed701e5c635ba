//! Dense univariate polynomials in the forward shift operator `q`.
//!
//! Coefficients are stored in descending powers of `q`, so
//! `Poly::new(vec![1.0, -1.6, 0.64])` is `q^2 - 1.6 q + 0.64`.
//! The zero polynomial is represented as a single zero coefficient.

use nalgebra::{Complex, DMatrix};

/// Polynomial in `q` with real coefficients, highest power first.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    coeffs: Vec<f64>,
}

impl Poly {
    /// Builds a polynomial from coefficients in descending powers of `q`.
    /// Exact leading zeros are trimmed; an empty or all-zero input yields
    /// the zero polynomial.
    pub fn new(coeffs: Vec<f64>) -> Self {
        let first = coeffs.iter().position(|c| *c != 0.0);
        match first {
            Some(i) => Poly {
                coeffs: coeffs[i..].to_vec(),
            },
            None => Poly { coeffs: vec![0.0] },
        }
    }

    pub fn zero() -> Self {
        Poly { coeffs: vec![0.0] }
    }

    pub fn one() -> Self {
        Poly { coeffs: vec![1.0] }
    }

    pub fn constant(c: f64) -> Self {
        Poly::new(vec![c])
    }

    /// `q^k`.
    pub fn monomial(k: usize) -> Self {
        let mut coeffs = vec![0.0; k + 1];
        coeffs[0] = 1.0;
        Poly { coeffs }
    }

    /// Coefficients in descending powers of `q`.
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Degree of the polynomial. The zero polynomial reports degree 0;
    /// check `is_zero` first where the distinction matters.
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.len() == 1 && self.coeffs[0] == 0.0
    }

    pub fn leading(&self) -> f64 {
        self.coeffs[0]
    }

    /// Coefficient of `q^k`, zero when `k` exceeds the degree.
    pub fn coeff_of(&self, k: usize) -> f64 {
        let d = self.degree();
        if k > d || self.is_zero() {
            0.0
        } else {
            self.coeffs[d - k]
        }
    }

    /// Horner evaluation at a real point.
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().fold(0.0, |acc, c| acc * x + c)
    }

    /// Horner evaluation at a complex point.
    pub fn eval_complex(&self, x: Complex<f64>) -> Complex<f64> {
        self.coeffs
            .iter()
            .fold(Complex::new(0.0, 0.0), |acc, c| acc * x + c)
    }

    pub fn neg(&self) -> Poly {
        Poly::new(self.coeffs.iter().map(|c| -c).collect())
    }

    pub fn scale(&self, s: f64) -> Poly {
        Poly::new(self.coeffs.iter().map(|c| c * s).collect())
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let n = self.coeffs.len().max(other.coeffs.len());
        let mut out = vec![0.0; n];
        for (i, c) in self.coeffs.iter().rev().enumerate() {
            out[n - 1 - i] += c;
        }
        for (i, c) in other.coeffs.iter().rev().enumerate() {
            out[n - 1 - i] += c;
        }
        Poly::new(out)
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.neg())
    }

    /// Polynomial product by direct convolution of coefficient sequences.
    pub fn mul(&self, other: &Poly) -> Poly {
        if self.is_zero() || other.is_zero() {
            return Poly::zero();
        }
        let mut out = vec![0.0; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in other.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Poly::new(out)
    }

    /// Divides every coefficient by the leading one so the result is monic.
    /// Must not be called on the zero polynomial.
    pub fn monic(&self) -> Poly {
        assert!(!self.is_zero(), "cannot normalize the zero polynomial");
        self.scale(1.0 / self.leading())
    }

    /// Reconstructs `gain * prod_i (q - r_i)` from a root multiset.
    /// Complex roots must appear in conjugate pairs for the imaginary
    /// residue to vanish; only the real part of the product is kept.
    pub fn from_roots(gain: f64, roots: &[Complex<f64>]) -> Poly {
        let mut acc = vec![Complex::new(1.0, 0.0)];
        for r in roots {
            let mut next = vec![Complex::new(0.0, 0.0); acc.len() + 1];
            for (i, a) in acc.iter().enumerate() {
                next[i] += a;
                next[i + 1] -= a * r;
            }
            acc = next;
        }
        Poly::new(acc.iter().map(|c| c.re * gain).collect())
    }

    /// All roots, computed as eigenvalues of the companion matrix of the
    /// monic-normalized polynomial. Constants (including zero) have none.
    pub fn roots(&self) -> Vec<Complex<f64>> {
        if self.is_zero() || self.degree() == 0 {
            return Vec::new();
        }
        // Exact roots at the origin are trailing zero coefficients; factor
        // them out first. The QR iteration behind complex_eigenvalues can
        // fail to deflate on the nilpotent companion matrices they produce.
        let monic = self.monic();
        let mut coeffs = monic.coeffs.clone();
        let mut out = Vec::with_capacity(monic.degree());
        while coeffs.len() > 1 && coeffs[coeffs.len() - 1] == 0.0 {
            coeffs.pop();
            out.push(Complex::new(0.0, 0.0));
        }
        let n = coeffs.len() - 1;
        match n {
            0 => {}
            1 => out.push(Complex::new(-coeffs[1], 0.0)),
            2 => {
                let b = coeffs[1];
                let c = coeffs[2];
                let disc = b * b - 4.0 * c;
                if disc >= 0.0 {
                    let sign = if b >= 0.0 { 1.0 } else { -1.0 };
                    let q = -0.5 * (b + sign * disc.sqrt());
                    out.push(Complex::new(q, 0.0));
                    out.push(Complex::new(c / q, 0.0));
                } else {
                    let im = 0.5 * (-disc).sqrt();
                    out.push(Complex::new(-0.5 * b, im));
                    out.push(Complex::new(-0.5 * b, -im));
                }
            }
            _ => {
                let mut comp = DMatrix::<f64>::zeros(n, n);
                for i in 0..n {
                    comp[(0, i)] = -coeffs[i + 1];
                }
                for i in 1..n {
                    comp[(i, i - 1)] = 1.0;
                }
                out.extend(comp.complex_eigenvalues().iter().copied());
            }
        }
        out
    }
}
