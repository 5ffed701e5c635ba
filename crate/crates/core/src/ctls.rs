//! Constrained-total-least-squares estimation of the controller
//! parameters.
//!
//! The regressor matrix and the target vector are perturbed by the same
//! noise source, shaped per column by known filters; realizing each
//! filter on the data window as a Toeplitz matrix `P_i` turns the
//! constrained problem into minimizing
//!
//! ```text
//! J(rho) = z' (Gamma K^{-1} Gamma')^{-1} z,   z = Phi rho - u,
//! Gamma  = sum_i rho_i P_i - P_{m+1},         K = sum_i P_i' P_i.
//! ```
//!
//! Filters with advance taps look ahead, so the `N` retained residual
//! rows are driven by `N + k` noise samples: each `P_i` is the
//! `N x (N + k)` slab of the filter's action on that longer support.
//! Truncating to a square window instead pins the trailing `k` noise
//! samples to zero, which drives the smallest singular value of `Gamma`
//! to zero geometrically as the window grows and makes the objective
//! unevaluatable in floating point; the rectangular form stays well
//! posed.
//!
//! The production evaluator never builds those matrices. Rewriting the
//! noise variable through the product of the banks' distinct filter
//! denominators turns every operator into a short FIR band, leaving the
//! equivalent program `min x' Kt x` subject to `Gt x = z` with a banded
//! parameter-free `Kt` (cached per bank) and a banded `Gt` whose taps are
//! linear in `rho`. Its KKT system, ordered so unknowns and multipliers
//! interleave along the window, is a narrow band matrix solved by LU with
//! partial pivoting in `O(N)` per evaluation, and the cost falls out of
//! the multipliers as `J = z' lambda`. A dense evaluator mirrors the
//! formula literally for cross-checking.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimate::{EstimateResult, Method};
use crate::optim::{nelder_mead, OptimOptions};
use crate::poly::Poly;
use crate::signal::LoopMode;
use crate::tf::{impulse_response, RationalTF};
use crate::vrft::{ControllerStructure, RegressorSet};

/// Relative scale of the diagonal floor applied when the unregularized
/// solve of a near-singular noise-shaping system fails.
pub const DEFAULT_CTLS_JITTER: f64 = 1e-10;

/// Finite-window realization of a filter: the matrix whose action on an
/// input window equals zero-padded filtering, keeping the first `rows`
/// outputs. The input window may run `cols - rows` samples longer so that
/// advance taps can read past the last retained output. Stored compactly
/// as the defining taps.
#[derive(Debug, Clone)]
pub struct ToeplitzOperator {
    rows: usize,
    cols: usize,
    /// `h(-1), h(-2), ..., h(-k)` above the diagonal.
    advance: Vec<f64>,
    /// `h(0), h(1), ..., h(rows-1)`: the first column.
    column: Vec<f64>,
}

impl ToeplitzOperator {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn advance_taps(&self) -> &[f64] {
        &self.advance
    }

    pub fn first_column(&self) -> &[f64] {
        &self.column
    }

    /// Literal matrix action `y = P v` by truncated convolution.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for (t, out) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, h) in self.advance.iter().enumerate() {
                if t + j + 1 < self.cols {
                    acc += h * v[t + j + 1];
                }
            }
            for (l, h) in self.column.iter().take(t + 1).enumerate() {
                acc += h * v[t - l];
            }
            *out = acc;
        }
        y
    }

    /// Materializes the full matrix; intended for tests and small
    /// windows.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                if i >= j {
                    p[(i, j)] = self.column[i - j];
                } else if j - i <= self.advance.len() {
                    p[(i, j)] = self.advance[j - i - 1];
                }
            }
        }
        p
    }
}

/// Builds the Toeplitz realization of `f` on a `rows x cols` window, with
/// impulse-response truncation at the output length.
pub fn toeplitz_from_filter(f: &RationalTF, rows: usize, cols: usize) -> Result<ToeplitzOperator> {
    if rows == 0 {
        return Err(Error::InvalidArgument("window must be nonempty".into()));
    }
    if cols < rows {
        return Err(Error::InvalidArgument(format!(
            "input window {cols} shorter than output window {rows}"
        )));
    }
    let ir = impulse_response(f, rows);
    Ok(ToeplitzOperator {
        rows,
        cols,
        advance: ir.advance,
        column: ir.causal,
    })
}

/// Noise-shaping filters for the CTLS constraint, one per regressor
/// column plus one for the target vector.
///
/// Open loop: the error columns carry delayed copies of `-L_F` and all
/// input-related filters vanish (the input is noise-free). Closed loop:
/// the input columns carry delayed copies of `-C0` and the target carries
/// `C0` itself.
pub fn build_ctls_filters(
    mode: LoopMode,
    l_f: &RationalTF,
    c0: Option<&RationalTF>,
    s: &ControllerStructure,
) -> Result<Vec<RationalTF>> {
    let m = s.m();
    let neg_lf = l_f.neg();
    let mut filters = Vec::with_capacity(m + 1);
    for i in 0..s.n_b() {
        filters.push(neg_lf.delayed(i));
    }
    match mode {
        LoopMode::OpenLoop => {
            for _ in s.n_b()..=m {
                filters.push(RationalTF::zero());
            }
        }
        LoopMode::ClosedLoop => {
            let c0 = c0.ok_or_else(|| {
                Error::InvalidArgument(
                    "closed-loop filter bank needs the initial controller".into(),
                )
            })?;
            let neg_c0 = c0.neg();
            for j in 1..=s.n_a() {
                filters.push(neg_c0.delayed(j));
            }
            filters.push(c0.clone());
        }
    }
    debug_assert_eq!(filters.len(), m + 1);
    Ok(filters)
}

/// Coefficients in ascending powers of `q^{-1}` of a polynomial stored in
/// descending powers of `q`, with exact trailing zeros dropped so delayed
/// copies of one denominator compare equal.
fn flip_poly(p: &Poly) -> Vec<f64> {
    let mut v = p.coeffs().to_vec();
    while v.len() > 1 && *v.last().unwrap() == 0.0 {
        v.pop();
    }
    v
}

fn conv(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        if *x == 0.0 {
            continue;
        }
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Rewrites every filter over the product `A_c` of the distinct filter
/// denominators: `F_i q^{-k} A_c` is a polynomial in `q^{-1}` once `k`
/// covers the bank's advance, so each filter reduces to a short tap
/// vector. Returns the tap vectors padded to a common length and the
/// `A_c` coefficients, both ascending in `q^{-1}`.
fn common_denominator_taps(filters: &[RationalTF], k_bank: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut dens: Vec<Vec<f64>> = Vec::new();
    let mut den_of: Vec<Option<usize>> = Vec::with_capacity(filters.len());
    for f in filters {
        if f.is_zero() {
            den_of.push(None);
            continue;
        }
        let d = flip_poly(f.den());
        let idx = match dens.iter().position(|u| *u == d) {
            Some(i) => i,
            None => {
                dens.push(d);
                dens.len() - 1
            }
        };
        den_of.push(Some(idx));
    }

    let mut fir: Vec<Vec<f64>> = Vec::with_capacity(filters.len());
    for (f, idx) in filters.iter().zip(&den_of) {
        let Some(idx) = idx else {
            fir.push(vec![0.0]);
            continue;
        };
        let rel = f.num().degree() as isize - f.den().degree() as isize;
        let shift = (k_bank as isize - rel) as usize;
        let mut taps = flip_poly(f.num());
        for (j, d) in dens.iter().enumerate() {
            if j != *idx {
                taps = conv(&taps, d);
            }
        }
        let mut shifted = vec![0.0; shift];
        shifted.extend_from_slice(&taps);
        while shifted.len() > 1 && *shifted.last().unwrap() == 0.0 {
            shifted.pop();
        }
        fir.push(shifted);
    }

    let mut acoeffs = vec![1.0];
    for d in &dens {
        acoeffs = conv(&acoeffs, d);
    }
    let width = fir.iter().map(|v| v.len()).max().unwrap_or(1);
    for v in &mut fir {
        v.resize(width, 0.0);
    }
    (fir, acoeffs)
}

/// Symmetric band of `Kt = sum_i B_i' W' W B_i`, where `B_i` is the
/// banded Toeplitz of one tap vector on the noise support and `W` keeps
/// the `rows` outputs starting `k_bank` steps in. Boundary entries see
/// fewer residual rows than interior ones, so the band is stored per
/// position rather than as single Toeplitz taps.
fn gram_band(fir: &[Vec<f64>], rows: usize, cols: usize, k_bank: usize) -> Vec<Vec<f64>> {
    let width = fir.first().map_or(1, |v| v.len());
    let d_max = width - 1;
    let mut kband: Vec<Vec<f64>> = (0..=d_max).map(|d| vec![0.0; cols - d]).collect();
    for taps in fir {
        for dd in 0..=d_max {
            for beta in dd..width {
                let p = taps[beta] * taps[beta - dd];
                if p == 0.0 {
                    continue;
                }
                // the shared residual row r = s + beta - k_bank must stay
                // inside the retained window
                let Some(hi) = (rows + k_bank).checked_sub(beta + 1) else {
                    continue;
                };
                let s_lo = k_bank.saturating_sub(beta);
                let s_hi = hi.min(cols - 1 - dd);
                for s in s_lo..=s_hi {
                    kband[dd][s] += p;
                }
            }
        }
    }
    kband
}

/// The full bank: filters, their window realizations, and the banded
/// normal data that every cost evaluation reuses.
#[derive(Debug, Clone)]
pub struct FilterBank {
    mode: LoopMode,
    filters: Vec<RationalTF>,
    ops: Vec<ToeplitzOperator>,
    rows: usize,
    cols: usize,
    k_bank: usize,
    /// FIR taps of `F_i q^{-k_bank} A_c`, padded to a common length.
    fir: Vec<Vec<f64>>,
    /// coefficients of `A_c` in ascending powers of `q^{-1}`
    acoeffs: Vec<f64>,
    /// `kband[d][t] = Kt[t][t + d]`
    kband: Vec<Vec<f64>>,
}

impl FilterBank {
    pub fn new(
        mode: LoopMode,
        l_f: &RationalTF,
        c0: Option<&RationalTF>,
        s: &ControllerStructure,
        rows: usize,
    ) -> Result<Self> {
        let filters = build_ctls_filters(mode, l_f, c0, s)?;
        let k_bank = filters.iter().map(|f| f.advance_steps()).max().unwrap_or(0);
        let cols = rows + k_bank;
        let ops = filters
            .iter()
            .map(|f| toeplitz_from_filter(f, rows, cols))
            .collect::<Result<Vec<_>>>()?;
        let (fir, acoeffs) = common_denominator_taps(&filters, k_bank);
        let kband = gram_band(&fir, rows, cols, k_bank);
        Ok(FilterBank {
            mode,
            filters,
            ops,
            rows,
            cols,
            k_bank,
            fir,
            acoeffs,
            kband,
        })
    }

    pub fn mode(&self) -> LoopMode {
        self.mode
    }

    pub fn filters(&self) -> &[RationalTF] {
        &self.filters
    }

    pub fn ops(&self) -> &[ToeplitzOperator] {
        &self.ops
    }

    /// Residual rows the window retains.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Noise samples driving the window: `rows` plus the bank's advance.
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Parameter count implied by the bank size.
    pub fn m(&self) -> usize {
        self.filters.len() - 1
    }

    /// Coefficients, ascending in `q^{-1}`, of the common-denominator
    /// polynomial behind the banded rewrite.
    pub fn common_denominator(&self) -> &[f64] {
        &self.acoeffs
    }

    /// Tap count of the rewritten banded operators.
    fn width(&self) -> usize {
        self.fir[0].len()
    }

    fn diag_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for v in &self.kband[0] {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        (lo, hi)
    }
}

/// One CTLS instance: regression data plus the noise-shaping bank.
#[derive(Debug, Clone)]
pub struct CtlsProblem {
    phi: DMatrix<f64>,
    u_vec: DVector<f64>,
    bank: FilterBank,
    jitter: f64,
}

impl CtlsProblem {
    pub fn new(reg: &RegressorSet, bank: FilterBank) -> Result<Self> {
        if bank.rows() != reg.rows() {
            return Err(Error::InvalidArgument(format!(
                "filter bank window {} does not match {} regression rows",
                bank.rows(),
                reg.rows()
            )));
        }
        if bank.m() != reg.m() {
            return Err(Error::InvalidArgument(format!(
                "filter bank implies {} parameters, regressors have {}",
                bank.m(),
                reg.m()
            )));
        }
        Ok(CtlsProblem {
            phi: reg.phi().clone(),
            u_vec: reg.u_vec().clone(),
            bank,
            jitter: DEFAULT_CTLS_JITTER,
        })
    }

    pub fn with_jitter(mut self, jitter: f64) -> Result<Self> {
        if !(jitter >= 0.0) {
            return Err(Error::InvalidArgument("jitter must be >= 0".into()));
        }
        self.jitter = jitter;
        Ok(self)
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }

    /// Residual rows in the regression window.
    pub fn n(&self) -> usize {
        self.bank.rows()
    }

    pub fn m(&self) -> usize {
        self.bank.m()
    }
}

/// Banded LU with partial pivoting, stored column-major with the band
/// packed per column and `kl` fill rows on top so row swaps stay inside
/// the storage. The assembled matrix is kept alongside the factorization
/// for residual checks.
#[derive(Debug, Clone)]
struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    /// assembled matrix
    a0: Vec<f64>,
    /// factored in place
    ab: Vec<f64>,
    ipiv: Vec<usize>,
}

impl BandLu {
    fn new(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        BandLu {
            n,
            kl,
            ku,
            ldab,
            a0: vec![0.0; ldab * n],
            ab: vec![0.0; ldab * n],
            ipiv: vec![0; n],
        }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.n);
        debug_assert!(j + self.kl >= i && i + self.kl + self.ku >= j);
        j * self.ldab + (self.kl + self.ku + i - j)
    }

    fn reset(&mut self) {
        self.a0.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Accumulates `A[i, j] += v`; the entry must lie in the declared
    /// band.
    fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i + self.ku >= j, "entry above the declared band");
        let at = self.at(i, j);
        self.a0[at] += v;
    }

    /// `y = A x` over the assembled matrix.
    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..self.n {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            let i0 = j.saturating_sub(self.ku);
            let i1 = (j + self.kl).min(self.n - 1);
            for i in i0..=i1 {
                y[i] += self.a0[self.at(i, j)] * xj;
            }
        }
    }

    /// Largest absolute row sum of the assembled matrix.
    fn inf_norm(&self, rowsum: &mut [f64]) -> f64 {
        rowsum.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..self.n {
            let i0 = j.saturating_sub(self.ku);
            let i1 = (j + self.kl).min(self.n - 1);
            for i in i0..=i1 {
                rowsum[i] += self.a0[self.at(i, j)].abs();
            }
        }
        rowsum.iter().fold(0.0f64, |a, b| a.max(*b))
    }

    /// Factors a copy of the assembled matrix; `false` on a zero pivot.
    fn factor(&mut self) -> bool {
        self.ab.copy_from_slice(&self.a0);
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        for j in 0..n {
            let i_end = (j + kl).min(n - 1);
            let mut p = j;
            let mut pmax = self.ab[self.at(p, j)].abs();
            for i in j + 1..=i_end {
                let v = self.ab[self.at(i, j)].abs();
                if v > pmax {
                    pmax = v;
                    p = i;
                }
            }
            self.ipiv[j] = p;
            if pmax == 0.0 {
                return false;
            }
            // columns j..j_end can hold fill from earlier swaps
            let j_end = (j + ku + kl).min(n - 1);
            if p != j {
                for c in j..=j_end {
                    let (a, b) = (self.at(j, c), self.at(p, c));
                    self.ab.swap(a, b);
                }
            }
            let piv = self.ab[self.at(j, j)];
            for i in j + 1..=i_end {
                let at = self.at(i, j);
                self.ab[at] /= piv;
            }
            for c in j + 1..=j_end {
                let f = self.ab[self.at(j, c)];
                if f == 0.0 {
                    continue;
                }
                for i in j + 1..=i_end {
                    let l = self.ab[self.at(i, j)];
                    let at = self.at(i, c);
                    self.ab[at] -= l * f;
                }
            }
        }
        true
    }

    fn solve(&self, x: &mut [f64]) {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                x.swap(j, p);
            }
            let xj = x[j];
            if xj != 0.0 {
                for i in j + 1..=(j + kl).min(n - 1) {
                    x[i] -= self.ab[self.at(i, j)] * xj;
                }
            }
        }
        for j in (0..n).rev() {
            x[j] /= self.ab[self.at(j, j)];
            let xj = x[j];
            if xj != 0.0 {
                for i in j.saturating_sub(ku + kl)..j {
                    x[i] -= self.ab[self.at(i, j)] * xj;
                }
            }
        }
    }
}

/// Scratch buffers for repeated cost evaluations on one problem shape.
pub struct CtlsWorkspace {
    rows: usize,
    cols: usize,
    k_bank: usize,
    width: usize,
    lu: BandLu,
    z: Vec<f64>,
    bgam: Vec<f64>,
    sol: Vec<f64>,
    rhs: Vec<f64>,
    tmp: Vec<f64>,
}

impl CtlsWorkspace {
    pub fn new(prob: &CtlsProblem) -> Self {
        let bank = &prob.bank;
        let (rows, cols) = (bank.rows(), bank.cols());
        let width = bank.width();
        // widest coupling in the interleaved ordering: constraint row r
        // reaches unknown positions up to 2 (width - 1) + 1 away
        let half = 2 * width - 1;
        let n = rows + cols;
        CtlsWorkspace {
            rows,
            cols,
            k_bank: bank.k_bank,
            width,
            lu: BandLu::new(n, half, half),
            z: vec![0.0; rows],
            bgam: vec![0.0; width],
            sol: vec![0.0; n],
            rhs: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    /// One regularized KKT solve. Unknowns and multipliers interleave
    /// along the window (`x_t`, then the multiplier of residual row
    /// `t - k`), which keeps the system a narrow band; `J = z' lambda`.
    /// `None` means this regularization level did not produce a reliable
    /// solution.
    fn attempt(&mut self, bank: &FilterBank, eps: f64) -> Option<f64> {
        let (rows, k) = (self.rows, self.k_bank);
        let d_max = self.width - 1;
        let n = self.rows + self.cols;
        let pos_x = |t: usize| t + t.saturating_sub(k);
        let pos_l = |r: usize| 2 * r + k + 1;

        self.lu.reset();
        for dd in 0..=d_max {
            let band = &bank.kband[dd];
            for (t, kv) in band.iter().enumerate() {
                let v = if dd == 0 { kv + eps } else { *kv };
                if v == 0.0 {
                    continue;
                }
                let (pi, pj) = (pos_x(t), pos_x(t + dd));
                self.lu.add(pi, pj, v);
                if dd > 0 {
                    self.lu.add(pj, pi, v);
                }
            }
        }
        for r in 0..rows {
            let pr = pos_l(r);
            for (j, g) in self.bgam.iter().enumerate() {
                if *g == 0.0 {
                    continue;
                }
                let Some(c) = (r + k).checked_sub(j) else {
                    continue;
                };
                let pc = pos_x(c);
                self.lu.add(pr, pc, *g);
                self.lu.add(pc, pr, -*g);
            }
        }

        self.rhs.iter_mut().for_each(|v| *v = 0.0);
        for (r, zv) in self.z.iter().enumerate() {
            self.rhs[pos_l(r)] = *zv;
        }
        self.sol.copy_from_slice(&self.rhs);
        if !self.lu.factor() {
            return None;
        }
        self.lu.solve(&mut self.sol);

        // backward-stability check on the unfactored system
        self.lu.matvec(&self.sol, &mut self.tmp);
        let mut rnorm = 0.0f64;
        let mut bnorm = 0.0f64;
        let mut xnorm = 0.0f64;
        for i in 0..n {
            rnorm = rnorm.max((self.rhs[i] - self.tmp[i]).abs());
            bnorm = bnorm.max(self.rhs[i].abs());
            xnorm = xnorm.max(self.sol[i].abs());
        }
        let anorm = self.lu.inf_norm(&mut self.tmp);
        if !rnorm.is_finite() || rnorm > 1e-8 * (anorm * xnorm + bnorm) {
            return None;
        }

        let mut cost = 0.0;
        for (r, zv) in self.z.iter().enumerate() {
            cost += zv * self.sol[pos_l(r)];
        }
        if cost.is_finite() {
            Some(cost.max(0.0))
        } else {
            None
        }
    }
}

/// Evaluates the CTLS objective at `rho`. One-shot convenience around
/// [`ctls_cost_with`].
pub fn ctls_cost(rho: &[f64], prob: &CtlsProblem) -> Result<f64> {
    let mut ws = CtlsWorkspace::new(prob);
    ctls_cost_with(rho, prob, &mut ws)
}

/// Evaluates the CTLS objective reusing caller-provided scratch space.
///
/// The combined operator `Gamma = sum_i rho_i P_i - P_{m+1}` shares the
/// bank's structure, so after the common-denominator rewrite its taps are
/// the matching linear combination of the bank tap vectors. The first
/// solve runs unregularized; a near-singular system retries with a
/// diagonal floor escalated a hundredfold up to three times.
pub fn ctls_cost_with(rho: &[f64], prob: &CtlsProblem, ws: &mut CtlsWorkspace) -> Result<f64> {
    if rho.len() != prob.m() {
        return Err(Error::InvalidArgument(format!(
            "expected {} parameters, got {}",
            prob.m(),
            rho.len()
        )));
    }
    if rho.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "parameter vector is not finite".into(),
        ));
    }
    let bank = &prob.bank;
    if ws.rows != bank.rows() || ws.cols != bank.cols() || ws.width != bank.width() {
        return Err(Error::InvalidArgument(
            "workspace shaped for a different problem".into(),
        ));
    }
    let m = prob.m();

    // z = Phi rho - u
    for (r, zr) in ws.z.iter_mut().enumerate() {
        *zr = -prob.u_vec[r];
    }
    for (j, w) in rho.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let col = prob.phi.column(j);
        for (zr, pc) in ws.z.iter_mut().zip(col.iter()) {
            *zr += w * pc;
        }
    }

    // taps of Gamma: linear combination of the bank tap vectors
    for (t, g) in ws.bgam.iter_mut().enumerate() {
        let mut v = -bank.fir[m][t];
        for (i, w) in rho.iter().enumerate() {
            v += w * bank.fir[i][t];
        }
        *g = v;
    }
    let gmax = ws.bgam.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if gmax == 0.0 {
        return Err(Error::Degenerate(
            "noise-shaping operator vanishes at this parameter vector".into(),
        ));
    }
    if ws.z.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }

    let (kmin, kmax) = bank.diag_range();
    let mut rung = 0.0f64;
    for attempt in 0..=3 {
        if let Some(cost) = ws.attempt(bank, rung * kmax) {
            return Ok(cost);
        }
        rung = if attempt == 0 {
            prob.jitter.max(1e-14)
        } else {
            rung * 100.0
        };
    }
    Err(Error::FactorizationFailed {
        retries: 3,
        min_diag: kmin,
        max_diag: kmax,
    })
}

/// Literal dense evaluation of the objective: builds `Gamma K^{-1}
/// Gamma'` explicitly via two positive-definite factored solves. O(N^3);
/// reference path for tests and small windows. The regularization ladder
/// matches the fast path: one clean attempt, then an escalating diagonal
/// floor.
pub fn ctls_cost_dense(rho: &[f64], prob: &CtlsProblem) -> Result<f64> {
    if rho.len() != prob.m() {
        return Err(Error::InvalidArgument(format!(
            "expected {} parameters, got {}",
            prob.m(),
            rho.len()
        )));
    }
    if rho.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "parameter vector is not finite".into(),
        ));
    }
    let bank = &prob.bank;
    let (rows, cols) = (bank.rows(), bank.cols());
    let m = prob.m();

    let rho_v = DVector::from_column_slice(rho);
    let z = &prob.phi * rho_v - &prob.u_vec;

    let mut gamma = DMatrix::<f64>::zeros(rows, cols);
    let mut kmat = DMatrix::<f64>::zeros(cols, cols);
    for (i, op) in bank.ops().iter().enumerate() {
        let p = op.to_dense();
        let weight = if i < m { rho[i] } else { -1.0 };
        gamma += &p * weight;
        kmat += p.transpose() * &p;
    }
    if gamma.amax() == 0.0 {
        return Err(Error::Degenerate(
            "noise-shaping operator vanishes at this parameter vector".into(),
        ));
    }
    if z.amax() == 0.0 {
        return Ok(0.0);
    }

    let kscale = kmat.diagonal().mean().max(f64::MIN_POSITIVE);
    let mut bdiag = (0.0f64, kscale);
    let mut rung = 0.0f64;
    for attempt in 0..=3 {
        let k_reg = &kmat + DMatrix::identity(cols, cols) * (rung * kscale);
        if let Some(chol) = k_reg.cholesky() {
            let kinv_gt = chol.solve(&gamma.transpose());
            let b = &gamma * kinv_gt;
            let bscale = b.diagonal().mean().abs().max(f64::MIN_POSITIVE);
            bdiag = (b.diagonal().min(), b.diagonal().max());
            let b_reg = &b + DMatrix::identity(rows, rows) * (rung * bscale);
            if let Some(bchol) = b_reg.cholesky() {
                let cost = z.dot(&bchol.solve(&z));
                if cost.is_finite() {
                    return Ok(cost.max(0.0));
                }
            }
        }
        rung = if attempt == 0 {
            prob.jitter.max(1e-14)
        } else {
            rung * 100.0
        };
    }
    Err(Error::FactorizationFailed {
        retries: 3,
        min_diag: bdiag.0,
        max_diag: bdiag.1,
    })
}

/// Minimizes the CTLS objective from `rho0` with the simplex optimizer.
/// Evaluation failures inside the search surface as rejected points.
pub fn ctls_estimate(
    prob: &CtlsProblem,
    rho0: &[f64],
    opts: &OptimOptions,
) -> Result<EstimateResult> {
    if rho0.len() != prob.m() {
        return Err(Error::InvalidArgument(format!(
            "start point has {} entries, problem has {} parameters",
            rho0.len(),
            prob.m()
        )));
    }
    if rho0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("start point is not finite".into()));
    }
    let mut ws = CtlsWorkspace::new(prob);
    let outcome = nelder_mead(
        |rho| ctls_cost_with(rho, prob, &mut ws).unwrap_or(f64::INFINITY),
        rho0,
        opts,
    )?;
    Ok(EstimateResult {
        rho_hat: outcome.x,
        method: Method::Ctls,
        cost: outcome.f,
        iterations: outcome.iterations,
        converged: outcome.converged,
    })
}
