//! Closed-loop evaluation of tuned controllers and campaign-level
//! statistics: parameter MSE with its bias/variance split, stability
//! rates, and tracking-cost distributions.

use std::io::Write;

use crate::error::{Error, Result};
use crate::estimate::Method;
use crate::tf::{feedback, filter_seq, BoundaryPolicy, RationalTF, DEFAULT_STABILITY_MARGIN};

/// Outcome of evaluating one estimated controller.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub run_index: usize,
    pub method: Method,
    pub rho_hat: Vec<f64>,
    pub stable: bool,
    /// Tracking cost; present exactly when the loop is stable.
    pub j_hat: Option<f64>,
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    pub cost: f64,
}

/// Aggregate statistics for one method over a campaign.
#[derive(Debug, Clone)]
pub struct CampaignStats {
    pub method: Method,
    pub bias: f64,
    pub variance: f64,
    pub mse: f64,
    pub stable_fraction: f64,
    /// Tracking costs of the stable runs, in run order.
    pub j_hats: Vec<f64>,
}

/// Mean squared tracking error of the loop `(G, C)` against the reference
/// model output: `(1/N) sum (y(t) - y_d(t))^2` with `y = T r`, `y_d = M r`.
/// The caller is responsible for only evaluating stabilized loops.
pub fn closed_loop_cost(
    controller: &RationalTF,
    plant: &RationalTF,
    reference_model: &RationalTF,
    r: &[f64],
) -> Result<f64> {
    if r.is_empty() {
        return Err(Error::InvalidArgument("reference sequence is empty".into()));
    }
    let (t, _) = feedback(plant, controller)?;
    let y = filter_seq(&t, r, BoundaryPolicy::ZeroPad);
    let y_d = filter_seq(reference_model, r, BoundaryPolicy::ZeroPad);
    let n = r.len() as f64;
    Ok(y.iter()
        .zip(&y_d)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Parameter mean-squared error about the ideal vector, split into
/// squared bias of the mean and dispersion about the mean. The split is
/// exact: `bias + variance = mse`.
pub fn mse_stats(estimates: &[Vec<f64>], rho_d: &[f64]) -> Result<(f64, f64, f64)> {
    if estimates.is_empty() {
        return Err(Error::InvalidArgument("no estimates to aggregate".into()));
    }
    let m = rho_d.len();
    if estimates.iter().any(|e| e.len() != m) {
        return Err(Error::InvalidArgument(
            "estimate dimension does not match rho_d".into(),
        ));
    }
    let k = estimates.len() as f64;
    let mut mean = vec![0.0; m];
    for est in estimates {
        for (acc, v) in mean.iter_mut().zip(est) {
            *acc += v / k;
        }
    }
    let bias = mean
        .iter()
        .zip(rho_d)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>();
    let variance = estimates
        .iter()
        .map(|est| {
            est.iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum::<f64>()
        / k;
    // the cross term of the expansion cancels by construction of the mean;
    // return the decomposition rather than recomputing mse independently
    Ok((bias, variance, bias + variance))
}

/// Fraction of controllers whose loop with `G` has all poles strictly
/// inside the unit circle. Loops that cannot even be closed count as
/// unstable.
pub fn stability_rate(controllers: &[RationalTF], plant: &RationalTF) -> Result<f64> {
    if controllers.is_empty() {
        return Err(Error::InvalidArgument("no controllers to assess".into()));
    }
    let stable = controllers
        .iter()
        .filter(|c| is_loop_stable(plant, c))
        .count();
    Ok(stable as f64 / controllers.len() as f64)
}

/// Stability of the unit-feedback loop `(G, C)`.
pub fn is_loop_stable(plant: &RationalTF, controller: &RationalTF) -> bool {
    match feedback(plant, controller) {
        Ok((t, _)) => t.is_stable(DEFAULT_STABILITY_MARGIN),
        Err(_) => false,
    }
}

/// One histogram cell over log10-transformed values.
#[derive(Debug, Clone, PartialEq)]
pub struct HistBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

/// Five-number summary in log10 space.
#[derive(Debug, Clone)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Histogram plus quartiles of `log10(values)`.
#[derive(Debug, Clone)]
pub struct DistributionSummary {
    pub bins: Vec<HistBin>,
    pub quartiles: Quartiles,
    /// Values dropped because the log transform does not apply to them.
    pub excluded: usize,
}

/// Log-space histogram over uniform bins spanning the data range, with
/// quartiles. Non-positive values cannot be log-transformed; they are
/// excluded and counted.
pub fn summarize_distribution(values: &[f64], bins: usize) -> Result<DistributionSummary> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no values to summarize".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let mut logs: Vec<f64> = values
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| v.log10())
        .collect();
    let excluded = values.len() - logs.len();
    if logs.is_empty() {
        return Err(Error::InvalidArgument(
            "all values were non-positive".into(),
        ));
    }
    logs.sort_by(f64::total_cmp);
    let lo = logs[0];
    let hi = logs[logs.len() - 1];
    let span = hi - lo;
    let mut out = Vec::with_capacity(bins);
    if span == 0.0 {
        // degenerate range: everything in one cell
        out.push(HistBin {
            left: lo,
            right: hi,
            count: logs.len(),
        });
    } else {
        let width = span / bins as f64;
        let mut counts = vec![0usize; bins];
        for v in &logs {
            let mut idx = ((v - lo) / width) as usize;
            if idx >= bins {
                idx = bins - 1; // right edge is inclusive
            }
            counts[idx] += 1;
        }
        for (i, count) in counts.into_iter().enumerate() {
            out.push(HistBin {
                left: lo + i as f64 * width,
                right: lo + (i + 1) as f64 * width,
                count,
            });
        }
    }
    let quartiles = Quartiles {
        min: lo,
        q1: percentile_sorted(&logs, 0.25),
        median: percentile_sorted(&logs, 0.5),
        q3: percentile_sorted(&logs, 0.75),
        max: hi,
    };
    Ok(DistributionSummary {
        bins: out,
        quartiles,
        excluded,
    })
}

/// Linear-interpolation percentile of an already sorted slice.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < n {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[n - 1]
    }
}

/// `stats.csv`: one row per method.
pub fn write_stats_csv<W: Write>(mut w: W, stats: &[CampaignStats]) -> Result<()> {
    writeln!(w, "method,bias,variance,mse,stable_fraction")?;
    for s in stats {
        writeln!(
            w,
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            s.method, s.bias, s.variance, s.mse, s.stable_fraction
        )?;
    }
    Ok(())
}

/// `jhat.csv`: tracking costs of the stable runs.
pub fn write_jhat_csv<W: Write>(mut w: W, records: &[RunRecord]) -> Result<()> {
    writeln!(w, "method,run_index,J_hat")?;
    for rec in records {
        if let Some(j) = rec.j_hat {
            writeln!(w, "{},{},{:.16e}", rec.method, rec.run_index, j)?;
        }
    }
    Ok(())
}

/// `hist_<method>.csv`: log10 histogram cells.
pub fn write_hist_csv<W: Write>(mut w: W, summary: &DistributionSummary) -> Result<()> {
    writeln!(w, "bin_left,bin_right,count")?;
    for bin in &summary.bins {
        writeln!(w, "{:.16e},{:.16e},{}", bin.left, bin.right, bin.count)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn plant() -> RationalTF {
        RationalTF::from_coeffs(&[0.5, -0.4], &[1.0, -1.6, 0.63]).unwrap()
    }

    fn reference_model() -> RationalTF {
        RationalTF::from_coeffs(&[0.16, 0.0], &[1.0, -1.2, 0.36]).unwrap()
    }

    fn ideal_controller() -> RationalTF {
        // C_d = M / (G (1 - M)) for the pair above
        let g = plant();
        let m = reference_model();
        let one = RationalTF::one();
        m.mul(&g.mul(&one.sub(&m)).inv().unwrap())
            .simplify(crate::tf::DEFAULT_SIMPLIFY_TOL)
    }

    #[test]
    fn ideal_controller_has_zero_cost() {
        let r = vec![1.0; 100];
        let j = closed_loop_cost(&ideal_controller(), &plant(), &reference_model(), &r).unwrap();
        let energy = 1.0; // unit step
        assert!(j / energy < 1e-12, "J = {j}");
    }

    #[test]
    fn zero_reference_model_measures_output_energy() {
        let r = vec![1.0; 50];
        let c = ideal_controller();
        let m0 = RationalTF::zero();
        let j = closed_loop_cost(&c, &plant(), &m0, &r).unwrap();
        let (t, _) = feedback(&plant(), &c).unwrap();
        let y = filter_seq(&t, &r, BoundaryPolicy::ZeroPad);
        let expect = y.iter().map(|v| v * v).sum::<f64>() / 50.0;
        assert_relative_eq!(j, expect, epsilon = 1e-14);
    }

    #[test]
    fn mse_stats_trivial_cases() {
        let rho_d = vec![1.0, -2.0];
        let (b, v, m) = mse_stats(&[rho_d.clone(), rho_d.clone()], &rho_d).unwrap();
        assert_eq!((b, v, m), (0.0, 0.0, 0.0));

        let delta = [0.1, -0.2];
        let plus: Vec<f64> = rho_d.iter().zip(delta).map(|(a, d)| a + d).collect();
        let minus: Vec<f64> = rho_d.iter().zip(delta).map(|(a, d)| a - d).collect();
        let (b, v, m) = mse_stats(&[plus, minus], &rho_d).unwrap();
        let d2 = delta.iter().map(|d| d * d).sum::<f64>();
        assert_relative_eq!(b, 0.0, epsilon = 1e-15);
        assert_relative_eq!(v, d2, epsilon = 1e-12);
        assert_relative_eq!(m, d2, epsilon = 1e-12);
    }

    #[test]
    fn stability_rate_counts_unstable_loops() {
        let good = ideal_controller();
        let bad = RationalTF::constant(-40.0);
        let rate = stability_rate(&[good.clone(), bad, good], &plant()).unwrap();
        assert_relative_eq!(rate, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn stability_rate_order_invariant() {
        let c1 = ideal_controller();
        let c2 = RationalTF::constant(-40.0);
        let c3 = RationalTF::constant(0.1);
        let a = stability_rate(&[c1.clone(), c2.clone(), c3.clone()], &plant()).unwrap();
        let b = stability_rate(&[c3, c1, c2], &plant()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn histogram_decade_example() {
        let summary = summarize_distribution(&[1.0, 10.0, 100.0], 3).unwrap();
        assert_eq!(summary.bins.len(), 3);
        for bin in &summary.bins {
            assert_eq!(bin.count, 1);
        }
        assert_relative_eq!(summary.bins[0].left, 0.0, epsilon = 1e-15);
        assert_relative_eq!(summary.bins[2].right, 2.0, epsilon = 1e-15);
        assert_relative_eq!(summary.quartiles.median, 1.0, epsilon = 1e-15);
        assert_eq!(summary.excluded, 0);
    }

    #[test]
    fn histogram_degenerate_and_excluded() {
        let summary = summarize_distribution(&[5.0, 5.0, 5.0, -1.0, 0.0], 4).unwrap();
        assert_eq!(summary.excluded, 2);
        assert_eq!(summary.bins.len(), 1);
        assert_eq!(summary.bins[0].count, 3);
        assert_relative_eq!(summary.quartiles.min, summary.quartiles.max);
        assert!(summarize_distribution(&[-1.0], 3).is_err());
    }

    #[test]
    fn csv_emitters_are_plot_ready() {
        let stats = vec![CampaignStats {
            method: Method::Ols,
            bias: 2.0,
            variance: 0.1,
            mse: 2.1,
            stable_fraction: 1.0,
            j_hats: vec![0.5],
        }];
        let mut buf = Vec::new();
        write_stats_csv(&mut buf, &stats).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("method,bias,variance,mse,stable_fraction\n"));
        assert!(text.contains("OLS,"));

        let records = vec![
            RunRecord {
                run_index: 0,
                method: Method::Iv,
                rho_hat: vec![0.0],
                stable: false,
                j_hat: None,
                seed: 1,
                converged: true,
                iterations: 0,
                cost: 0.0,
            },
            RunRecord {
                run_index: 1,
                method: Method::Iv,
                rho_hat: vec![0.0],
                stable: true,
                j_hat: Some(0.25),
                seed: 2,
                converged: true,
                iterations: 0,
                cost: 0.0,
            },
        ];
        let mut buf = Vec::new();
        write_jhat_csv(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().count(),
            2,
            "unstable run must be omitted:\n{text}"
        );
        assert!(text.lines().nth(1).unwrap().starts_with("IV,1,"));
    }

    proptest! {
        #[test]
        fn prop_mse_decomposition_identity(
            flat in proptest::collection::vec(-3.0f64..3.0, 6..60),
        ) {
            let m = 3;
            let k = flat.len() / m;
            let estimates: Vec<Vec<f64>> =
                (0..k).map(|i| flat[i * m..(i + 1) * m].to_vec()).collect();
            let rho_d = vec![0.5, -0.5, 1.0];
            let (bias, variance, mse) = mse_stats(&estimates, &rho_d).unwrap();
            // recompute mse directly from its definition
            let direct = estimates
                .iter()
                .map(|e| {
                    e.iter()
                        .zip(&rho_d)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / k as f64;
            prop_assert!((bias + variance - mse).abs() <= 1e-10);
            prop_assert!((direct - mse).abs() <= 1e-10 * (1.0 + direct.abs()));
        }
    }
}
