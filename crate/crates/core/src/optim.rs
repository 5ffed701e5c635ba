//! Derivative-free simplex minimization (Nelder and Mead) with the
//! classic coefficient set: reflection 1, expansion 2, contraction 0.5,
//! shrink 0.5.

use crate::error::{Error, Result};

/// Termination and sizing knobs for [`nelder_mead`].
#[derive(Debug, Clone)]
pub struct OptimOptions {
    /// Converged when the simplex diameter drops below this.
    pub x_tol: f64,
    /// ... and the spread of objective values does too.
    pub f_tol: f64,
    /// Iteration budget; `None` means `5000 * dimension`.
    pub max_iter: Option<usize>,
    /// Objective-evaluation budget; `None` leaves it uncapped.
    pub max_fun: Option<usize>,
    /// Relative step used to build the initial simplex around `x0`.
    pub init_step: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            x_tol: 1e-8,
            f_tol: 1e-10,
            max_iter: None,
            max_fun: None,
            init_step: 0.05,
        }
    }
}

impl OptimOptions {
    fn validate(&self) -> Result<()> {
        if !(self.x_tol > 0.0) || !(self.f_tol > 0.0) || !(self.init_step > 0.0) {
            return Err(Error::InvalidArgument(
                "optimizer tolerances and init_step must be positive".into(),
            ));
        }
        if self.max_iter == Some(0) {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Outcome of one simplex search.
#[derive(Debug, Clone)]
pub struct NmOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Minimizes `f` from `x0`.
///
/// Non-finite objective values during the search are treated as +inf so
/// the corresponding points are rejected; a non-finite value at `x0`
/// itself is an error. The search is fully deterministic.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], opts: &OptimOptions) -> Result<NmOutcome>
where
    F: FnMut(&[f64]) -> f64,
{
    opts.validate()?;
    let dim = x0.len();
    if dim == 0 {
        return Err(Error::InvalidArgument("empty start point".into()));
    }
    let max_iter = opts.max_iter.unwrap_or(5000 * dim);
    let max_fun = opts.max_fun.unwrap_or(usize::MAX);

    let mut evaluations = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let f0 = eval(x0, &mut evaluations);
    if !f0.is_finite() {
        return Err(Error::NonFiniteObjective);
    }

    // vertices: x0 plus one perturbed copy per coordinate
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((x0.to_vec(), f0));
    for j in 0..dim {
        let mut v = x0.to_vec();
        v[j] += opts.init_step * v[j].abs().max(1e-3);
        let fv = eval(&v, &mut evaluations);
        simplex.push((v, fv));
    }

    let mut iterations = 0usize;
    let mut converged = false;
    while iterations < max_iter && evaluations < max_fun {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex_diameter(&simplex) < opts.x_tol && objective_spread(&simplex) < opts.f_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..dim)
            .map(|j| simplex[..dim].iter().map(|(v, _)| v[j]).sum::<f64>() / dim as f64)
            .collect();
        let worst = simplex[dim].clone();
        let best_f = simplex[0].1;
        let second_worst_f = simplex[dim - 1].1;

        let reflect: Vec<f64> = (0..dim)
            .map(|j| centroid[j] + (centroid[j] - worst.0[j]))
            .collect();
        let f_reflect = eval(&reflect, &mut evaluations);

        if f_reflect < best_f {
            let expand: Vec<f64> = (0..dim)
                .map(|j| centroid[j] + 2.0 * (centroid[j] - worst.0[j]))
                .collect();
            let f_expand = eval(&expand, &mut evaluations);
            simplex[dim] = if f_expand < f_reflect {
                (expand, f_expand)
            } else {
                (reflect, f_reflect)
            };
            continue;
        }
        if f_reflect < second_worst_f {
            simplex[dim] = (reflect, f_reflect);
            continue;
        }

        // contraction, outside or inside of the worst vertex
        let (contract, f_contract) = if f_reflect < worst.1 {
            let c: Vec<f64> = (0..dim)
                .map(|j| centroid[j] + 0.5 * (reflect[j] - centroid[j]))
                .collect();
            let fc = eval(&c, &mut evaluations);
            (c, fc)
        } else {
            let c: Vec<f64> = (0..dim)
                .map(|j| centroid[j] + 0.5 * (worst.0[j] - centroid[j]))
                .collect();
            let fc = eval(&c, &mut evaluations);
            (c, fc)
        };
        if f_contract < worst.1.min(f_reflect) {
            simplex[dim] = (contract, f_contract);
            continue;
        }

        // shrink everything toward the best vertex, which stays put
        let best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            for j in 0..dim {
                vertex.0[j] = best[j] + 0.5 * (vertex.0[j] - best[j]);
            }
            vertex.1 = eval(&vertex.0, &mut evaluations);
        }
    }

    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    Ok(NmOutcome {
        x,
        f: fx,
        iterations,
        evaluations,
        converged,
    })
}

fn simplex_diameter(simplex: &[(Vec<f64>, f64)]) -> f64 {
    let best = &simplex[0].0;
    simplex[1..]
        .iter()
        .map(|(v, _)| {
            v.iter()
                .zip(best)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

fn objective_spread(simplex: &[(Vec<f64>, f64)]) -> f64 {
    let fs: Vec<f64> = simplex.iter().map(|(_, f)| *f).collect();
    let lo = fs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = fs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}
