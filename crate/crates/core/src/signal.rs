//! Excitation signals, measurement noise and simulation of the
//! data-collection experiment, in open loop or under an existing
//! stabilizing controller.
//!
//! Everything here is a pure function of its parameters and a seed, so a
//! Monte Carlo campaign can regenerate any run bit for bit.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tf::{
    feedback, filter_seq, BoundaryPolicy, RationalTF, DEFAULT_SIMPLIFY_TOL,
    DEFAULT_STABILITY_MARGIN,
};

/// Which experiment produced a data set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopMode {
    OpenLoop,
    ClosedLoop,
}

/// Noise model: white Gaussian noise of variance `sigma2` colored by the
/// proper filter `h`.
#[derive(Debug, Clone)]
pub struct NoiseSpec {
    pub h: RationalTF,
    pub sigma2: f64,
}

impl NoiseSpec {
    pub fn new(h: RationalTF, sigma2: f64) -> Result<Self> {
        if !h.is_proper() {
            return Err(Error::InvalidArgument("noise filter must be proper".into()));
        }
        if !(sigma2 >= 0.0) {
            return Err(Error::InvalidArgument(
                "noise variance must be nonnegative".into(),
            ));
        }
        Ok(NoiseSpec { h, sigma2 })
    }
}

/// One recorded experiment: input and output sequences plus the reference
/// when the data was collected in closed loop.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub mode: LoopMode,
    /// Reference sequence; empty for open-loop experiments.
    pub r: Vec<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub n: usize,
    pub seed: u64,
    pub sigma2: f64,
}

/// LFSR register length used by [`prbs`].
pub const DEFAULT_PRBS_ORDER: u32 = 10;

/// Feedback taps of maximum-length Fibonacci LFSRs, indexed from 1 at the
/// register input side.
const PRBS_TAPS: &[(u32, &[u32])] = &[
    (2, &[2, 1]),
    (3, &[3, 2]),
    (4, &[4, 3]),
    (5, &[5, 3]),
    (6, &[6, 5]),
    (7, &[7, 6]),
    (8, &[8, 6, 5, 4]),
    (9, &[9, 5]),
    (10, &[10, 7]),
    (11, &[11, 9]),
    (12, &[12, 6, 4, 1]),
    (13, &[13, 4, 3, 1]),
    (14, &[14, 5, 3, 1]),
    (15, &[15, 14]),
    (16, &[16, 15, 13, 4]),
];

/// Pseudo-random binary excitation of length `n` over `{+amplitude,
/// -amplitude}` from a maximum-length LFSR of the default order.
pub fn prbs(n: usize, seed: u64, amplitude: f64) -> Vec<f64> {
    prbs_with_order(n, seed, amplitude, DEFAULT_PRBS_ORDER)
        .expect("default order is always supported")
}

/// Same as [`prbs`] with an explicit register order; the period of the
/// underlying sequence is `2^order - 1`.
pub fn prbs_with_order(n: usize, seed: u64, amplitude: f64, order: u32) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("prbs length must be >= 1".into()));
    }
    if !(amplitude > 0.0) {
        return Err(Error::InvalidArgument(
            "prbs amplitude must be positive".into(),
        ));
    }
    let taps = PRBS_TAPS
        .iter()
        .find(|(k, _)| *k == order)
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::InvalidArgument(format!("no LFSR taps for order {order}")))?;
    let period: u64 = (1u64 << order) - 1;
    // any nonzero register state starts a maximum-length cycle
    let mut state: u64 = (seed % period) + 1;
    // right-shift form: the emitted bit is s0 and the new top bit is the
    // parity of the tapped cells, with tap `order` living at bit 0
    let mask: u64 = taps
        .iter()
        .map(|p| if *p == order { 1 } else { 1u64 << *p })
        .sum();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(if state & 1 == 1 {
            -amplitude
        } else {
            amplitude
        });
        let fb = (state & mask).count_ones() as u64 & 1;
        state = (state >> 1) | (fb << (order - 1));
    }
    Ok(out)
}

/// Zero-mean i.i.d. Gaussian noise with variance `sigma2`.
pub fn white_noise(n: usize, sigma2: f64, seed: u64) -> Vec<f64> {
    if sigma2 == 0.0 {
        return vec![0.0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = sigma2.sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            sd * z
        })
        .collect()
}

/// Runs the open-loop experiment `y = G u + H v` with `v` white of
/// variance `noise.sigma2`, drawn from `seed`.
pub fn simulate_open_loop(
    plant: &RationalTF,
    noise: &NoiseSpec,
    u: &[f64],
    seed: u64,
) -> Result<ExperimentData> {
    if u.is_empty() {
        return Err(Error::InvalidArgument("input sequence is empty".into()));
    }
    if !plant.is_proper() {
        return Err(Error::InvalidArgument("plant must be proper".into()));
    }
    let n = u.len();
    let v = white_noise(n, noise.sigma2, seed);
    let clean = filter_seq(plant, u, BoundaryPolicy::ZeroPad);
    let colored = filter_seq(&noise.h, &v, BoundaryPolicy::ZeroPad);
    let y = clean.iter().zip(&colored).map(|(a, b)| a + b).collect();
    Ok(ExperimentData {
        mode: LoopMode::OpenLoop,
        r: Vec::new(),
        u: u.to_vec(),
        y,
        n,
        seed,
        sigma2: noise.sigma2,
    })
}

/// Runs the closed-loop experiment under an existing controller `c0`:
/// `y = T0 r + S0 H v` and `u = S0 C0 r - S0 C0 H v`, with one shared
/// noise realization in both channels.
///
/// The loop transfer functions are composed and simplified before any
/// filtering, so internal cancellations (such as an integrator in `c0`
/// against its closed-loop zero) never excite a marginal mode.
pub fn simulate_closed_loop(
    plant: &RationalTF,
    c0: &RationalTF,
    noise: &NoiseSpec,
    r: &[f64],
    seed: u64,
) -> Result<ExperimentData> {
    if r.is_empty() {
        return Err(Error::InvalidArgument("reference sequence is empty".into()));
    }
    if !plant.is_proper() {
        return Err(Error::InvalidArgument("plant must be proper".into()));
    }
    let (t0, s0) = feedback(plant, c0)?;
    if !t0.is_stable(DEFAULT_STABILITY_MARGIN) {
        return Err(Error::Degenerate(
            "initial closed loop is unstable, cannot collect data".into(),
        ));
    }
    let n = r.len();
    let v = white_noise(n, noise.sigma2, seed);
    let s0c0 = s0.mul(c0).simplify(DEFAULT_SIMPLIFY_TOL);
    let s0h = s0.mul(&noise.h).simplify(DEFAULT_SIMPLIFY_TOL);
    let s0c0h = s0c0.mul(&noise.h).simplify(DEFAULT_SIMPLIFY_TOL);

    let y_ref = filter_seq(&t0, r, BoundaryPolicy::ZeroPad);
    let y_noise = filter_seq(&s0h, &v, BoundaryPolicy::ZeroPad);
    let u_ref = filter_seq(&s0c0, r, BoundaryPolicy::ZeroPad);
    let u_noise = filter_seq(&s0c0h, &v, BoundaryPolicy::ZeroPad);

    let y = y_ref.iter().zip(&y_noise).map(|(a, b)| a + b).collect();
    let u = u_ref.iter().zip(&u_noise).map(|(a, b)| a - b).collect();
    Ok(ExperimentData {
        mode: LoopMode::ClosedLoop,
        r: r.to_vec(),
        u,
        y,
        n,
        seed,
        sigma2: noise.sigma2,
    })
}

impl ExperimentData {
    /// Writes the data set as CSV with header `t,r,u,y`; the `r` column is
    /// left empty for open-loop data. Full double precision.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,r,u,y")?;
        for t in 0..self.n {
            let r = match self.mode {
                LoopMode::OpenLoop => String::new(),
                LoopMode::ClosedLoop => format!("{:.16e}", self.r[t]),
            };
            writeln!(w, "{t},{r},{:.16e},{:.16e}", self.u[t], self.y[t])?;
        }
        Ok(())
    }

    /// Reads a data set written by [`ExperimentData::write_csv`]. Seed and
    /// variance are not stored in the file and come back as zero.
    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::InvalidArgument("empty CSV".into()))?;
        if header.trim() != "t,r,u,y" {
            return Err(Error::InvalidArgument(format!(
                "unexpected CSV header `{header}`"
            )));
        }
        let mut r = Vec::new();
        let mut u = Vec::new();
        let mut y = Vec::new();
        let mut open_loop = false;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::InvalidArgument(format!(
                    "expected 4 CSV fields, got {}",
                    fields.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("bad number `{s}`: {e}")))
            };
            if fields[1].trim().is_empty() {
                open_loop = true;
            } else {
                r.push(parse(fields[1])?);
            }
            u.push(parse(fields[2])?);
            y.push(parse(fields[3])?);
        }
        if u.is_empty() {
            return Err(Error::InvalidArgument("CSV contains no samples".into()));
        }
        let n = u.len();
        Ok(ExperimentData {
            mode: if open_loop {
                LoopMode::OpenLoop
            } else {
                LoopMode::ClosedLoop
            },
            r,
            u,
            y,
            n,
            seed: 0,
            sigma2: 0.0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn plant() -> RationalTF {
        RationalTF::from_coeffs(&[0.5, -0.4], &[1.0, -1.6, 0.63]).unwrap()
    }

    fn noise_model() -> RationalTF {
        RationalTF::from_coeffs(&[1.0, 0.0], &[1.0, -0.3]).unwrap()
    }

    fn initial_controller() -> RationalTF {
        RationalTF::from_coeffs(&[0.3, -0.48, 0.189], &[1.0, -1.8, 0.8]).unwrap()
    }

    #[test]
    fn prbs_is_binary_and_deterministic() {
        let a = prbs(500, 42, 1.0);
        let b = prbs(500, 42, 1.0);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| *v == 1.0 || *v == -1.0));
        let c = prbs(500, 43, 1.0);
        assert_ne!(a, c);
    }

    #[test]
    fn prbs_every_supported_order_has_full_period() {
        for (order, _) in PRBS_TAPS {
            let period = (1usize << order) - 1;
            let seq = prbs_with_order(2 * period, 7, 1.0, *order).unwrap();
            assert_eq!(&seq[..period], &seq[period..], "order {order} not periodic");
            // no shorter period dividing the full one
            for d in 1..period {
                if period % d == 0 && seq[..period - d] == seq[d..period] {
                    panic!("order {order} has period {d}");
                }
            }
        }
    }

    #[test]
    fn prbs_full_period_mean_is_balanced() {
        let order = 10u32;
        let n = (1usize << order) - 1;
        let a = 2.0;
        let seq = prbs_with_order(n, 123, a, order).unwrap();
        let mean = seq.iter().sum::<f64>() / n as f64;
        assert_relative_eq!(mean, -a / n as f64, epsilon = 1e-12);
    }

    #[test]
    fn white_noise_statistics() {
        let n = 100_000;
        let v = white_noise(n, 1.0, 99);
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((0.97..=1.03).contains(&var), "variance {var}");
        assert_eq!(v, white_noise(n, 1.0, 99));
        assert_eq!(white_noise(10, 0.0, 1), vec![0.0; 10]);
    }

    #[test]
    fn open_loop_noise_free_is_plain_filtering() {
        let g = plant();
        let noise = NoiseSpec::new(noise_model(), 0.0).unwrap();
        let mut u = vec![0.0; 40];
        u[0] = 1.0;
        let data = simulate_open_loop(&g, &noise, &u, 5).unwrap();
        let expect = filter_seq(&g, &u, BoundaryPolicy::ZeroPad);
        assert_eq!(data.y, expect);
        assert_eq!(data.mode, LoopMode::OpenLoop);
        assert!(data.r.is_empty());
    }

    #[test]
    fn open_loop_noise_raises_output_variance() {
        let g = plant();
        let u = prbs(1000, 11, 1.0);
        let clean =
            simulate_open_loop(&g, &NoiseSpec::new(noise_model(), 0.0).unwrap(), &u, 3).unwrap();
        let noisy =
            simulate_open_loop(&g, &NoiseSpec::new(noise_model(), 0.01).unwrap(), &u, 3).unwrap();
        let var = |y: &[f64]| {
            let m = y.iter().sum::<f64>() / y.len() as f64;
            y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len() as f64
        };
        assert!(var(&noisy.y) > var(&clean.y));
    }

    #[test]
    fn closed_loop_step_tracks_reference() {
        let noise = NoiseSpec::new(noise_model(), 0.0).unwrap();
        let r = vec![1.0; 401];
        let data = simulate_closed_loop(&plant(), &initial_controller(), &noise, &r, 1).unwrap();
        assert_relative_eq!(data.y[400], 1.0, epsilon = 1e-6);
        assert_eq!(data.mode, LoopMode::ClosedLoop);
        assert_eq!(data.r.len(), data.n);
    }

    #[test]
    fn closed_loop_noise_free_input_channel() {
        let noise = NoiseSpec::new(noise_model(), 0.0).unwrap();
        let r = prbs(300, 21, 1.0);
        let data = simulate_closed_loop(&plant(), &initial_controller(), &noise, &r, 2).unwrap();
        let (t0, s0) = feedback(&plant(), &initial_controller()).unwrap();
        let s0c0 = s0.mul(&initial_controller()).simplify(DEFAULT_SIMPLIFY_TOL);
        let expect_u = filter_seq(&s0c0, &r, BoundaryPolicy::ZeroPad);
        let expect_y = filter_seq(&t0, &r, BoundaryPolicy::ZeroPad);
        for t in 0..data.n {
            assert_relative_eq!(data.u[t], expect_u[t], epsilon = 1e-12);
            assert_relative_eq!(data.y[t], expect_y[t], epsilon = 1e-9);
        }
    }

    #[test]
    fn closed_loop_channels_share_noise_source() {
        let g = plant();
        let noise = NoiseSpec::new(noise_model(), 9e-4).unwrap();
        let r = prbs(1000, 31, 1.0);
        let data = simulate_closed_loop(&g, &initial_controller(), &noise, &r, 77).unwrap();
        // y - G u must reproduce H v for the same seed
        let v = white_noise(data.n, noise.sigma2, 77);
        let hv = filter_seq(&noise.h, &v, BoundaryPolicy::ZeroPad);
        let gu = filter_seq(&g, &data.u, BoundaryPolicy::ZeroPad);
        for t in 0..data.n {
            assert_relative_eq!(data.y[t] - gu[t], hv[t], epsilon = 1e-8);
        }
    }

    #[test]
    fn unstable_initial_loop_is_rejected() {
        // positive feedback of a gain through the plant destabilizes it
        let c_bad = RationalTF::constant(-40.0);
        let noise = NoiseSpec::new(noise_model(), 0.0).unwrap();
        let r = vec![1.0; 10];
        assert!(simulate_closed_loop(&plant(), &c_bad, &noise, &r, 1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let noise = NoiseSpec::new(noise_model(), 0.01).unwrap();
        let u = prbs(25, 4, 1.0);
        let data = simulate_open_loop(&plant(), &noise, &u, 9).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = ExperimentData::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.mode, LoopMode::OpenLoop);
        assert_eq!(back.u, data.u);
        assert_eq!(back.y, data.y);

        let r = prbs(25, 5, 1.0);
        let cl = simulate_closed_loop(&plant(), &initial_controller(), &noise, &r, 9).unwrap();
        let mut buf = Vec::new();
        cl.write_csv(&mut buf).unwrap();
        let back = ExperimentData::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.mode, LoopMode::ClosedLoop);
        assert_eq!(back.r, cl.r);
        assert_eq!(back.u, cl.u);
    }
}
