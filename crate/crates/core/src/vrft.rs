//! Virtual-signal construction and the regression problem behind
//! reference-model controller tuning.
//!
//! Given measured data and a reference model `M`, the output is filtered
//! by `L_F = C_F (M^{-1} - 1)` into the signal the tunable part of the
//! controller should map to the recorded input. The controller is split
//! as `C = C_I * C_F` with `C_I = B(q^{-1}) / A(q^{-1})`, `B` carrying
//! `n_b` coefficients and `A` monic with `n_a` free coefficients, so the
//! parameter vector is `rho = [b_1..b_nb, a_1..a_na]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::poly::Poly;
use crate::tf::{filter_seq, BoundaryPolicy, RationalTF, DEFAULT_SIMPLIFY_TOL};

/// Controller class: a fixed factor `C_F` and the order of the tunable
/// ARX part.
#[derive(Debug, Clone)]
pub struct ControllerStructure {
    c_f: RationalTF,
    n_b: usize,
    n_a: usize,
}

impl ControllerStructure {
    pub fn new(c_f: RationalTF, n_b: usize, n_a: usize) -> Result<Self> {
        if n_b < 1 {
            return Err(Error::InvalidArgument(
                "controller numerator needs at least one coefficient".into(),
            ));
        }
        if c_f.is_zero() {
            return Err(Error::Degenerate("fixed controller part is zero".into()));
        }
        Ok(ControllerStructure { c_f, n_b, n_a })
    }

    pub fn c_f(&self) -> &RationalTF {
        &self.c_f
    }

    pub fn n_b(&self) -> usize {
        self.n_b
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    /// Total parameter count `m = n_b + n_a`.
    pub fn m(&self) -> usize {
        self.n_b + self.n_a
    }
}

/// Regression data `u ~ Phi * rho` for one experiment.
#[derive(Debug, Clone)]
pub struct RegressorSet {
    phi: DMatrix<f64>,
    u_vec: DVector<f64>,
    ef: Vec<f64>,
    structure: ControllerStructure,
}

impl RegressorSet {
    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn u_vec(&self) -> &DVector<f64> {
        &self.u_vec
    }

    pub fn ef(&self) -> &[f64] {
        &self.ef
    }

    pub fn structure(&self) -> &ControllerStructure {
        &self.structure
    }

    pub fn rows(&self) -> usize {
        self.phi.nrows()
    }

    pub fn m(&self) -> usize {
        self.phi.ncols()
    }

    /// Drops the last `k` rows, removing samples whose filtered error was
    /// contaminated by the zero-padded advance at the window edge.
    pub fn drop_trailing(&self, k: usize) -> Result<RegressorSet> {
        let n = self.rows();
        if k >= n || n - k < self.m() {
            return Err(Error::InvalidArgument(format!(
                "cannot drop {k} of {n} regression rows"
            )));
        }
        let keep = n - k;
        Ok(RegressorSet {
            phi: self.phi.rows(0, keep).into_owned(),
            u_vec: self.u_vec.rows(0, keep).into_owned(),
            ef: self.ef[..keep].to_vec(),
            structure: self.structure.clone(),
        })
    }
}

/// Composes the output-to-filtered-error filter `L_F = C_F (M^{-1} - 1)`,
/// simplified. The result is usually improper: predicting the virtual
/// error needs future output samples.
pub fn build_lf(reference_model: &RationalTF, c_f: &RationalTF) -> Result<RationalTF> {
    if reference_model.is_zero() {
        return Err(Error::InvalidArgument(
            "reference model must not be zero".into(),
        ));
    }
    let m_inv = reference_model.inv()?;
    let lf = c_f
        .mul(&m_inv.sub(&RationalTF::one()))
        .simplify(DEFAULT_SIMPLIFY_TOL);
    if lf.is_zero() && !c_f.is_zero() {
        return Err(Error::Degenerate(
            "reference model equals identity, virtual error vanishes".into(),
        ));
    }
    Ok(lf)
}

/// Filtered virtual error `ē_F = L_F y`, computed as one composed filter
/// with zero padding past the window edge.
pub fn virtual_error_input(y: &[f64], l_f: &RationalTF) -> Result<Vec<f64>> {
    if y.is_empty() {
        return Err(Error::InvalidArgument("output sequence is empty".into()));
    }
    Ok(filter_seq(l_f, y, BoundaryPolicy::ZeroPad))
}

/// Stacks the delayed filtered-error and input samples into the regressor
/// matrix. Missing history before the window start enters as zeros, so row
/// `t` is `[ef(t) .. ef(t-n_b+1), -u(t-1) .. -u(t-n_a)]`.
pub fn build_regressors(ef: &[f64], u: &[f64], s: &ControllerStructure) -> Result<RegressorSet> {
    let n = ef.len();
    if u.len() != n {
        return Err(Error::InvalidArgument(format!(
            "filtered error has {n} samples but input has {}",
            u.len()
        )));
    }
    let m = s.m();
    if n < m {
        return Err(Error::InvalidArgument(format!(
            "underdetermined regression: {n} samples for {m} parameters"
        )));
    }
    let mut phi = DMatrix::<f64>::zeros(n, m);
    for t in 0..n {
        for j in 0..s.n_b {
            if t >= j {
                phi[(t, j)] = ef[t - j];
            }
        }
        for j in 0..s.n_a {
            if t >= j + 1 {
                phi[(t, s.n_b + j)] = -u[t - j - 1];
            }
        }
    }
    Ok(RegressorSet {
        phi,
        u_vec: DVector::from_column_slice(u),
        ef: ef.to_vec(),
        structure: s.clone(),
    })
}

/// Builds the full controller `C = (B/A) C_F` from a parameter vector,
/// converting the delay-operator form to positive powers of `q` and
/// simplifying.
pub fn assemble_controller(rho: &[f64], s: &ControllerStructure) -> Result<RationalTF> {
    if rho.len() != s.m() {
        return Err(Error::InvalidArgument(format!(
            "expected {} parameters, got {}",
            s.m(),
            rho.len()
        )));
    }
    // B/A in q^{-1}, multiplied through by q^K with K = max(n_b - 1, n_a)
    let k = (s.n_b - 1).max(s.n_a);
    let mut num = vec![0.0; k + 1];
    for (i, b) in rho[..s.n_b].iter().enumerate() {
        num[i] = *b;
    }
    let mut den = vec![0.0; k + 1];
    den[0] = 1.0;
    for (j, a) in rho[s.n_b..].iter().enumerate() {
        den[j + 1] = *a;
    }
    let c_i = RationalTF::new(Poly::new(num), Poly::new(den))?;
    Ok(c_i.mul(s.c_f()).simplify(DEFAULT_SIMPLIFY_TOL))
}

/// Parameters of the controller that would reproduce the reference model
/// exactly: `C_d = M / (G (1 - M))`, divided by the fixed part and read
/// off as ARX coefficients.
///
/// Errors when the structure cannot represent `C_d / C_F`, which means no
/// parameter vector is free of structural mismatch.
pub fn ideal_parameters(
    plant: &RationalTF,
    reference_model: &RationalTF,
    s: &ControllerStructure,
) -> Result<Vec<f64>> {
    // the composition repeats the reference-model poles on both sides of
    // the fraction, and rooting splits a repeated root by the square root
    // of the coefficient rounding; cancellation here needs a wider net
    // than the default (bad pairings are still rejected by the rebuild
    // check inside simplify)
    const CANCEL_TOL: f64 = 1e-6;
    let one = RationalTF::one();
    let g_one_minus_m = plant.mul(&one.sub(reference_model));
    if g_one_minus_m.is_zero() {
        return Err(Error::Degenerate(
            "G (1 - M) vanishes, reference model unreachable".into(),
        ));
    }
    let c_d = reference_model
        .mul(&g_one_minus_m.inv()?)
        .simplify(CANCEL_TOL);
    let c_i = c_d.mul(&s.c_f().inv()?).simplify(CANCEL_TOL);

    let k = (s.n_b - 1).max(s.n_a);
    let den = c_i.den();
    let num = c_i.num();
    if den.degree() != k || num.degree() > k {
        return Err(Error::Degenerate(format!(
            "ideal controller of order ({}, {}) does not fit structure (n_b={}, n_a={})",
            num.degree(),
            den.degree(),
            s.n_b,
            s.n_a
        )));
    }
    let mut rho = Vec::with_capacity(s.m());
    for i in 0..s.n_b {
        rho.push(num.coeff_of(k - i));
    }
    const STRUCTURE_TOL: f64 = 1e-9;
    for j in 1..=k {
        let a = den.coeff_of(k - j);
        if j <= s.n_a {
            rho.push(a);
        } else if a.abs() > STRUCTURE_TOL {
            return Err(Error::Degenerate(
                "ideal controller has denominator terms beyond n_a".into(),
            ));
        }
    }
    Ok(rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{prbs, simulate_open_loop, NoiseSpec};
    use crate::tf::{feedback, impulse_response};
    use approx::assert_relative_eq;

    fn plant() -> RationalTF {
        RationalTF::from_coeffs(&[0.5, -0.4], &[1.0, -1.6, 0.63]).unwrap()
    }

    fn reference_model() -> RationalTF {
        RationalTF::from_coeffs(&[0.16, 0.0], &[1.0, -1.2, 0.36]).unwrap()
    }

    fn fixed_part() -> RationalTF {
        RationalTF::from_coeffs(&[1.0, 0.0], &[1.0, -1.0]).unwrap()
    }

    fn structure() -> ControllerStructure {
        ControllerStructure::new(fixed_part(), 3, 2).unwrap()
    }

    fn noise_model() -> RationalTF {
        RationalTF::from_coeffs(&[1.0, 0.0], &[1.0, -0.3]).unwrap()
    }

    const RHO_D: [f64; 5] = [0.32, -0.512, 0.2016, -1.16, 0.288];

    #[test]
    fn lf_cancels_marginal_factor() {
        let lf = build_lf(&reference_model(), &fixed_part()).unwrap();
        assert_eq!(lf.den().coeffs(), &[1.0]);
        assert_eq!(lf.num().degree(), 1);
        assert_relative_eq!(lf.num().coeffs()[0], 6.25, epsilon = 1e-9);
        assert_relative_eq!(lf.num().coeffs()[1], -2.25, epsilon = 1e-9);
        assert_eq!(lf.advance_steps(), 1);
    }

    #[test]
    fn lf_simple_delay_model() {
        // M = 1/q, C_F = 1 -> L_F = q - 1
        let m = RationalTF::from_coeffs(&[1.0], &[1.0, 0.0]).unwrap();
        let lf = build_lf(&m, &RationalTF::one()).unwrap();
        assert_eq!(lf.num().coeffs(), &[1.0, -1.0]);
        assert_eq!(lf.den().coeffs(), &[1.0]);
    }

    #[test]
    fn lf_degenerate_cases() {
        assert!(build_lf(&RationalTF::one(), &fixed_part()).is_err());
        assert!(build_lf(&RationalTF::zero(), &fixed_part()).is_err());
        let zero_cf = build_lf(&reference_model(), &RationalTF::zero()).unwrap();
        assert!(zero_cf.is_zero());
    }

    #[test]
    fn virtual_error_two_tap_fir() {
        let lf = build_lf(&reference_model(), &fixed_part()).unwrap();
        let mut y = vec![0.0; 6];
        y[1] = 1.0;
        // ef(t) = 6.25 y(t+1) - 2.25 y(t)
        let ef = virtual_error_input(&y, &lf).unwrap();
        assert_relative_eq!(ef[0], 6.25, epsilon = 1e-9);
        assert_relative_eq!(ef[1], -2.25, epsilon = 1e-9);
        for v in &ef[2..] {
            assert_relative_eq!(*v, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn regressor_layout_small_example() {
        let s = ControllerStructure::new(RationalTF::one(), 1, 1).unwrap();
        let reg = build_regressors(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &s).unwrap();
        let phi = reg.phi();
        assert_eq!(phi.nrows(), 3);
        assert_eq!(phi.ncols(), 2);
        let expect = [[1.0, 0.0], [2.0, -4.0], [3.0, -5.0]];
        for (t, row) in expect.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(phi[(t, j)], *v);
            }
        }
        assert_eq!(reg.u_vec().as_slice(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn regressor_shift_structure() {
        let s = structure();
        let ef: Vec<f64> = (0..40).map(|t| (t as f64 * 0.7).sin()).collect();
        let u: Vec<f64> = (0..40).map(|t| (t as f64 * 0.3).cos()).collect();
        let reg = build_regressors(&ef, &u, &s).unwrap();
        let phi = reg.phi();
        for t in 1..40 {
            for j in 1..s.n_b() {
                assert_eq!(phi[(t, j)], phi[(t - 1, j - 1)]);
            }
            for j in 1..s.n_a() {
                assert_eq!(phi[(t, s.n_b() + j)], phi[(t - 1, s.n_b() + j - 1)]);
            }
        }
    }

    #[test]
    fn regressors_reject_underdetermined() {
        let s = structure();
        assert!(build_regressors(&[1.0; 4], &[1.0; 4], &s).is_err());
        assert!(build_regressors(&[1.0; 5], &[1.0; 6], &s).is_err());
    }

    #[test]
    fn assemble_identity_and_gain() {
        let s = structure();
        let c = assemble_controller(&[1.0, 0.0, 0.0, 0.0, 0.0], &s).unwrap();
        assert_eq!(c.num().coeffs(), fixed_part().num().coeffs());
        assert_eq!(c.den().coeffs(), fixed_part().den().coeffs());

        let s0 = ControllerStructure::new(fixed_part(), 1, 0).unwrap();
        let c = assemble_controller(&[2.5], &s0).unwrap();
        assert_relative_eq!(c.num().coeffs()[0], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn assemble_ideal_parameters_recovers_reference_model() {
        let c = assemble_controller(&RHO_D, &structure()).unwrap();
        let (t, _) = feedback(&plant(), &c).unwrap();
        let m = reference_model();
        let ht = impulse_response(&t, 50).causal;
        let hm = impulse_response(&m, 50).causal;
        for (a, b) in ht.iter().zip(&hm) {
            assert_relative_eq!(*a, *b, epsilon = 1e-9);
        }
    }

    #[test]
    fn ideal_parameters_match_known_vector() {
        let rho = ideal_parameters(&plant(), &reference_model(), &structure()).unwrap();
        assert_eq!(rho.len(), 5);
        for (a, b) in rho.iter().zip(RHO_D) {
            assert_relative_eq!(*a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn ideal_parameters_reject_too_small_structure() {
        let s = ControllerStructure::new(fixed_part(), 2, 1).unwrap();
        assert!(ideal_parameters(&plant(), &reference_model(), &s).is_err());
    }

    #[test]
    fn noise_free_data_satisfies_regression_identity() {
        let s = structure();
        let lf = build_lf(&reference_model(), &fixed_part()).unwrap();
        let u = prbs(400, 17, 1.0);
        let noise = NoiseSpec::new(noise_model(), 0.0).unwrap();
        let data = simulate_open_loop(&plant(), &noise, &u, 17).unwrap();
        let ef = virtual_error_input(&data.y, &lf).unwrap();
        let reg = build_regressors(&ef, &data.u, &s)
            .unwrap()
            .drop_trailing(lf.advance_steps())
            .unwrap();
        let rho = DVector::from_column_slice(&RHO_D);
        let residual = reg.phi() * rho - reg.u_vec();
        assert!(residual.amax() <= 1e-6, "residual {}", residual.amax());
    }
}
