//! Direct parameter estimators: ordinary least squares on one batch and
//! instrumental variables built from a repeated experiment.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::vrft::RegressorSet;

/// Which estimation procedure produced a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ols,
    Iv,
    Ctls,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ols, Method::Iv, Method::Ctls];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Ols => "OLS",
            Method::Iv => "IV",
            Method::Ctls => "CTLS",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ols" => Ok(Method::Ols),
            "iv" => Ok(Method::Iv),
            "ctls" => Ok(Method::Ctls),
            other => Err(Error::InvalidArgument(format!(
                "unknown method `{other}` (expected ols, iv or ctls)"
            ))),
        }
    }
}

/// Estimated parameter vector together with how it was obtained.
#[derive(Debug, Clone)]
pub struct EstimateResult {
    pub rho_hat: Vec<f64>,
    pub method: Method,
    /// Mean squared residual for the direct estimators, final objective
    /// value for the iterative one.
    pub cost: f64,
    /// Optimizer iterations; zero for the closed-form estimators.
    pub iterations: usize,
    pub converged: bool,
}

/// Least-squares fit `rho = argmin ||Phi rho - u||` via a thin QR
/// factorization. Rank deficiency is detected from the singular values
/// and reported with the offending columns.
pub fn ols_estimate(reg: &RegressorSet) -> Result<EstimateResult> {
    let phi = reg.phi();
    let u = reg.u_vec();
    let n = phi.nrows();
    let m = phi.ncols();

    let svd = phi.clone().svd(false, true);
    let smax = svd.singular_values.max();
    let tol = f64::EPSILON * n.max(m) as f64 * smax;
    let deficient: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| **s <= tol)
        .map(|(i, _)| i)
        .collect();
    if !deficient.is_empty() {
        let v_t = svd.v_t.as_ref().expect("requested V^T");
        let mut columns: Vec<usize> = deficient
            .iter()
            .map(|i| {
                // the dominant component of a null-space direction names
                // the most redundant regressor column
                let row = v_t.row(*i);
                (0..m)
                    .max_by(|a, b| row[*a].abs().total_cmp(&row[*b].abs()))
                    .unwrap_or(0)
            })
            .collect();
        columns.sort_unstable();
        columns.dedup();
        return Err(Error::RankDeficient { columns });
    }

    let qr = phi.clone().qr();
    let qtu = qr.q().transpose() * u;
    let rho = qr
        .r()
        .solve_upper_triangular(&qtu)
        .ok_or_else(|| Error::SingularMatrix {
            context: "triangular factor of the regressor matrix".into(),
        })?;
    let residual = phi * &rho - u;
    Ok(EstimateResult {
        rho_hat: rho.iter().copied().collect(),
        method: Method::Ols,
        cost: residual.norm_squared() / n as f64,
        iterations: 0,
        converged: true,
    })
}

/// Instrumental-variable fit from two experiments driven by the same
/// excitation: `rho = (Phi1^T Phi2)^{-1} Phi1^T u2`, with the first batch
/// serving as the instrument.
pub fn iv_estimate(reg1: &RegressorSet, reg2: &RegressorSet) -> Result<EstimateResult> {
    if reg1.rows() != reg2.rows() || reg1.m() != reg2.m() {
        return Err(Error::InvalidArgument(format!(
            "instrument batch is {}x{} but data batch is {}x{}",
            reg1.rows(),
            reg1.m(),
            reg2.rows(),
            reg2.m()
        )));
    }
    let phi1 = reg1.phi();
    let phi2 = reg2.phi();
    let u2 = reg2.u_vec();
    let cross = phi1.transpose() * phi2;
    let rhs = phi1.transpose() * u2;
    let rho: DVector<f64> = cross
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularMatrix {
            context: "instrument cross-product".into(),
        })?;
    let residual = phi2 * &rho - u2;
    Ok(EstimateResult {
        rho_hat: rho.iter().copied().collect(),
        method: Method::Iv,
        cost: residual.norm_squared() / reg2.rows() as f64,
        iterations: 0,
        converged: true,
    })
}
