//! Rational transfer functions in the forward shift operator `q` and
//! sequence filtering in the time domain.
//!
//! Transfer functions may be improper (more zeros than poles); filtering
//! then needs future samples, and [`BoundaryPolicy`] states what happens
//! at the right edge of the data window. Denominators are kept monic, so
//! two representations of the same function share the same coefficients.

use nalgebra::Complex;

use crate::error::{Error, Result};
use crate::poly::Poly;

/// Root-distance tolerance used by [`RationalTF::simplify`] callers that
/// have no better scale information.
pub const DEFAULT_SIMPLIFY_TOL: f64 = 1e-8;

/// Poles with modulus at or above `1 - DEFAULT_STABILITY_MARGIN` count as
/// unstable, so marginal poles on the unit circle are rejected.
pub const DEFAULT_STABILITY_MARGIN: f64 = 1e-9;

/// Treatment of the samples past the end of a finite data window when a
/// filter needs them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryPolicy {
    /// Missing future samples are taken as zero; output keeps the input
    /// length.
    ZeroPad,
    /// Output samples that would depend on missing data are dropped, so
    /// a filter with `k` advance steps returns `N - k` samples.
    Truncate,
}

/// Ratio of two polynomials in `q`. The denominator is normalized monic
/// on construction and is never the zero polynomial.
#[derive(Debug, Clone, PartialEq)]
pub struct RationalTF {
    num: Poly,
    den: Poly,
}

impl RationalTF {
    pub fn new(num: Poly, den: Poly) -> Result<Self> {
        if den.is_zero() {
            return Err(Error::Degenerate(
                "transfer function with zero denominator".into(),
            ));
        }
        let lead = den.leading();
        Ok(RationalTF {
            num: num.scale(1.0 / lead),
            den: den.scale(1.0 / lead),
        })
    }

    /// Convenience constructor from coefficient slices, descending powers.
    pub fn from_coeffs(num: &[f64], den: &[f64]) -> Result<Self> {
        RationalTF::new(Poly::new(num.to_vec()), Poly::new(den.to_vec()))
    }

    pub fn one() -> Self {
        RationalTF {
            num: Poly::one(),
            den: Poly::one(),
        }
    }

    pub fn zero() -> Self {
        RationalTF {
            num: Poly::zero(),
            den: Poly::one(),
        }
    }

    pub fn constant(c: f64) -> Self {
        RationalTF {
            num: Poly::constant(c),
            den: Poly::one(),
        }
    }

    pub fn num(&self) -> &Poly {
        &self.num
    }

    pub fn den(&self) -> &Poly {
        &self.den
    }

    pub fn is_zero(&self) -> bool {
        self.num.is_zero()
    }

    /// Pole excess: degree of denominator minus degree of numerator.
    /// Negative for improper functions. The zero function reports 0.
    pub fn relative_degree(&self) -> i64 {
        if self.is_zero() {
            0
        } else {
            self.den.degree() as i64 - self.num.degree() as i64
        }
    }

    pub fn is_proper(&self) -> bool {
        self.relative_degree() >= 0
    }

    /// Number of future samples one output sample depends on.
    pub fn advance_steps(&self) -> usize {
        (-self.relative_degree()).max(0) as usize
    }

    pub fn eval_complex(&self, x: Complex<f64>) -> Complex<f64> {
        self.num.eval_complex(x) / self.den.eval_complex(x)
    }

    pub fn neg(&self) -> Self {
        RationalTF {
            num: self.num.neg(),
            den: self.den.clone(),
        }
    }

    pub fn mul(&self, other: &Self) -> Self {
        RationalTF::new(self.num.mul(&other.num), self.den.mul(&other.den))
            .expect("product denominator cannot vanish")
    }

    pub fn add(&self, other: &Self) -> Self {
        let num = self.num.mul(&other.den).add(&other.num.mul(&self.den));
        RationalTF::new(num, self.den.mul(&other.den)).expect("sum denominator cannot vanish")
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.neg())
    }

    pub fn inv(&self) -> Result<Self> {
        if self.is_zero() {
            return Err(Error::Degenerate(
                "inverse of the zero transfer function".into(),
            ));
        }
        RationalTF::new(self.den.clone(), self.num.clone())
    }

    /// Multiplies by `q^{-k}`, delaying the response by `k` samples.
    pub fn delayed(&self, k: usize) -> Self {
        RationalTF::new(self.num.clone(), self.den.mul(&Poly::monomial(k)))
            .expect("delay cannot zero the denominator")
    }

    /// Cancels nearly common numerator/denominator root pairs.
    ///
    /// Roots are matched greedily within absolute distance `tol` and the
    /// factors are rebuilt from the surviving roots; passes repeat until no
    /// pair is left, which makes the operation idempotent. If rebuilding
    /// would change the function on the unit circle beyond numerical error
    /// the input is returned unchanged.
    pub fn simplify(&self, tol: f64) -> Self {
        if self.is_zero() {
            return self.clone();
        }
        let mut num_roots = self.num.roots();
        let mut den_roots = self.den.roots();
        let num_gain = self.num.leading();
        let mut cancelled = false;
        loop {
            let mut pass = false;
            let mut keep_den = Vec::with_capacity(den_roots.len());
            for d in den_roots.iter() {
                let nearest = num_roots
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| (*a - d).norm().total_cmp(&(*b - d).norm()))
                    .map(|(i, r)| (i, (*r - d).norm()));
                match nearest {
                    Some((i, dist)) if dist <= tol => {
                        num_roots.swap_remove(i);
                        pass = true;
                    }
                    _ => keep_den.push(*d),
                }
            }
            den_roots = keep_den;
            if !pass {
                break;
            }
            cancelled = true;
        }
        if !cancelled {
            return self.clone();
        }
        let num = Poly::from_roots(num_gain, &num_roots);
        let den = Poly::from_roots(1.0, &den_roots);
        let candidate = match RationalTF::new(num, den) {
            Ok(tf) => tf,
            Err(_) => return self.clone(),
        };
        if functions_agree(self, &candidate) {
            candidate
        } else {
            self.clone()
        }
    }

    /// Poles after pole/zero cancellation at the default tolerance.
    /// A constant denominator yields an empty set.
    pub fn poles(&self) -> Vec<Complex<f64>> {
        self.simplify(DEFAULT_SIMPLIFY_TOL).den.roots()
    }

    /// True when every pole lies strictly inside the unit circle with the
    /// given margin.
    pub fn is_stable(&self, margin: f64) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0 - margin)
    }
}

/// Compares two transfer functions at a fixed set of probe points spread
/// around and inside the unit circle.
fn functions_agree(a: &RationalTF, b: &RationalTF) -> bool {
    const ANGLES: [f64; 5] = [0.0, 0.43, 1.17, 2.01, 2.86];
    for theta in ANGLES {
        for radius in [1.0, 1.31] {
            let x = Complex::from_polar(radius, theta);
            let (Some(fa), Some(fb)) = (regular_value(a, x), regular_value(b, x)) else {
                continue;
            };
            let scale = 1.0 + fa.norm() + fb.norm();
            if (fa - fb).norm() > 1e-6 * scale {
                return false;
            }
        }
    }
    true
}

/// Value of `f` at `x`, or `None` when numerator and denominator both
/// nearly vanish there: such a 0/0 sample is pure rounding noise and
/// carries no information about the function.
fn regular_value(f: &RationalTF, x: Complex<f64>) -> Option<Complex<f64>> {
    let n = f.num.eval_complex(x);
    let d = f.den.eval_complex(x);
    let r = x.norm();
    let bound = |p: &Poly| -> f64 {
        p.coeffs()
            .iter()
            .rev()
            .enumerate()
            .map(|(k, c)| c.abs() * r.powi(k as i32))
            .sum()
    };
    const NOISE: f64 = 1e-12;
    if n.norm() <= NOISE * bound(&f.num) && d.norm() <= NOISE * bound(&f.den) {
        return None;
    }
    let v = n / d;
    if v.is_finite() {
        Some(v)
    } else {
        None
    }
}

/// Closes a unit negative feedback loop around `plant * controller`.
///
/// Returns the reference-to-output map `T = GC / (1 + GC)` and the
/// sensitivity `S = 1 / (1 + GC)`, both simplified at the default
/// tolerance. An identically singular loop (`1 + GC = 0`) is an error.
pub fn feedback(plant: &RationalTF, controller: &RationalTF) -> Result<(RationalTF, RationalTF)> {
    let open = plant.mul(controller);
    let closed_den = open.den.add(&open.num);
    if closed_den.is_zero() {
        return Err(Error::Degenerate(
            "feedback loop is singular: 1 + G C = 0".into(),
        ));
    }
    let t = RationalTF::new(open.num.clone(), closed_den.clone())?.simplify(DEFAULT_SIMPLIFY_TOL);
    let s = RationalTF::new(open.den.clone(), closed_den)?.simplify(DEFAULT_SIMPLIFY_TOL);
    Ok((t, s))
}

/// Applies `f` to a finite sequence with zero initial conditions.
///
/// An improper `f` is factored as `q^k * f_p` with `f_p` proper; the
/// proper part runs as a difference equation over the window extended by
/// `k` samples, and the advance becomes a left shift of that output. With
/// [`BoundaryPolicy::ZeroPad`] the missing future samples are zero and the
/// output has the input length; with [`BoundaryPolicy::Truncate`] the last
/// `k` samples are dropped instead.
pub fn filter_seq(f: &RationalTF, x: &[f64], policy: BoundaryPolicy) -> Vec<f64> {
    let k = f.advance_steps();
    if f.is_zero() {
        let n = match policy {
            BoundaryPolicy::ZeroPad => x.len(),
            BoundaryPolicy::Truncate => x.len().saturating_sub(k),
        };
        return vec![0.0; n];
    }
    let den_ext = f.den().mul(&Poly::monomial(k));
    let mut padded;
    let x_ext: &[f64] = if k > 0 {
        padded = x.to_vec();
        padded.resize(x.len() + k, 0.0);
        &padded
    } else {
        x
    };
    let w = filter_proper(f.num(), &den_ext, x_ext);
    let out_len = match policy {
        BoundaryPolicy::ZeroPad => x.len(),
        BoundaryPolicy::Truncate => x.len().saturating_sub(k),
    };
    w[k..k + out_len].to_vec()
}

/// Difference equation for proper `num/den` with monic `den`, zero initial
/// conditions.
fn filter_proper(num: &Poly, den: &Poly, x: &[f64]) -> Vec<f64> {
    let na = den.degree();
    let nb = num.degree();
    debug_assert!(nb <= na, "filter_proper requires a proper function");
    debug_assert!((den.leading() - 1.0).abs() < 1e-12);
    let d = na - nb;
    let b = num.coeffs();
    let a = den.coeffs();
    let mut y = vec![0.0; x.len()];
    for s in 0..x.len() {
        let mut acc = 0.0;
        for (j, bj) in b.iter().enumerate() {
            let idx = s as i64 - d as i64 - j as i64;
            if idx >= 0 {
                acc += bj * x[idx as usize];
            }
        }
        for (i, ai) in a.iter().enumerate().skip(1) {
            if s >= i {
                acc -= ai * y[s - i];
            }
        }
        y[s] = acc;
    }
    y
}

/// Impulse response of `f` split into its anticausal and causal parts.
#[derive(Debug, Clone)]
pub struct ImpulseResponse {
    /// `h(-1), h(-2), ..., h(-k)` for a filter with `k` advance steps.
    pub advance: Vec<f64>,
    /// `h(0), h(1), ..., h(n-1)`.
    pub causal: Vec<f64>,
}

/// First `n` causal Markov parameters of `f` plus its advance taps.
pub fn impulse_response(f: &RationalTF, n: usize) -> ImpulseResponse {
    let k = f.advance_steps();
    if f.is_zero() {
        return ImpulseResponse {
            advance: vec![0.0; k],
            causal: vec![0.0; n],
        };
    }
    let den_ext = f.den().mul(&Poly::monomial(k));
    let mut impulse = vec![0.0; n + k];
    if n + k > 0 {
        impulse[0] = 1.0;
    }
    let w = filter_proper(f.num(), &den_ext, &impulse);
    let advance = (0..k).map(|j| w[k - 1 - j]).collect();
    let causal = w[k..].to_vec();
    ImpulseResponse { advance, causal }
}
