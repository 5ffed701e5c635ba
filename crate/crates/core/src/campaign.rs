//! Monte Carlo campaign orchestration: parse and validate a TOML
//! configuration, run the estimation study over independent noise
//! realizations, persist datasets and plot-ready CSVs, and render the
//! summary table.
//!
//! Campaigns are deterministic end to end: the excitation is drawn once
//! from the master seed, run `i` uses noise seed `master_seed + i`, and
//! the repeated experiment for the instrumental-variable method offsets
//! its noise seed by a fixed constant. Emitted files are byte-identical
//! across invocations with the same configuration.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use crate::ctls::{ctls_estimate, CtlsProblem, FilterBank};
use crate::error::{Error, Result};
use crate::estimate::{iv_estimate, ols_estimate, EstimateResult, Method};
use crate::eval::{
    closed_loop_cost, is_loop_stable, mse_stats, percentile_sorted, summarize_distribution,
    write_hist_csv, write_jhat_csv, write_stats_csv, CampaignStats, RunRecord,
};
use crate::optim::OptimOptions;
use crate::signal::{
    prbs_with_order, simulate_closed_loop, simulate_open_loop, ExperimentData, LoopMode, NoiseSpec,
    DEFAULT_PRBS_ORDER,
};
use crate::tf::RationalTF;
use crate::vrft::{
    assemble_controller, build_lf, build_regressors, ideal_parameters, virtual_error_input,
    ControllerStructure, RegressorSet,
};

/// Fixed offset between the noise seeds of the two experiments feeding
/// the instrumental-variable estimator.
pub const IV_SEED_OFFSET: u64 = 1_000_000;

/// How the iterative estimator is started.
#[derive(Debug, Clone, PartialEq)]
pub enum Rho0Policy {
    /// `factor * rho_d`, with the ideal parameters computed from the
    /// configured plant; simulation-only since it needs the plant.
    ScaledIdeal {
        factor: f64,
    },
    /// Start from this run's least-squares estimate.
    OlsStart,
    Explicit {
        rho: Vec<f64>,
    },
}

/// Reference signal used for the tracking-cost evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalReference {
    Step {
        length: usize,
        amplitude: f64,
    },
    Prbs {
        length: usize,
        amplitude: f64,
        seed: u64,
    },
}

impl EvalReference {
    fn realize(&self) -> Result<Vec<f64>> {
        match self {
            EvalReference::Step { length, amplitude } => Ok(vec![*amplitude; *length]),
            EvalReference::Prbs {
                length,
                amplitude,
                seed,
            } => prbs_with_order(*length, *seed, *amplitude, DEFAULT_PRBS_ORDER),
        }
    }
}

/// Excitation applied during data collection (the open-loop input or the
/// closed-loop reference).
#[derive(Debug, Clone, PartialEq)]
pub struct Excitation {
    pub amplitude: f64,
    pub lfsr_order: u32,
}

/// Fully validated campaign description.
#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub loop_mode: LoopMode,
    pub plant: RationalTF,
    pub reference_model: RationalTF,
    pub fixed_part: RationalTF,
    pub noise: NoiseSpec,
    /// Controller operating during closed-loop data collection.
    pub initial_controller: Option<RationalTF>,
    pub n_b: usize,
    pub n_a: usize,
    pub n_samples: usize,
    pub n_runs: usize,
    pub master_seed: u64,
    pub methods: Vec<Method>,
    pub rho0_policy: Rho0Policy,
    pub optimizer: OptimOptions,
    pub eval_reference: EvalReference,
    pub excitation: Excitation,
    /// Drop the trailing regression rows whose filtered error depends on
    /// zero-padded future samples.
    pub trim_boundary: bool,
    pub jitter: f64,
    pub hist_bins: usize,
}

// ---------------------------------------------------------------------
// raw TOML schema

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    loop_mode: Option<String>,
    n_samples: Option<usize>,
    n_runs: Option<usize>,
    sigma2: Option<f64>,
    master_seed: Option<u64>,
    methods: Option<Vec<String>>,
    n_b: Option<usize>,
    n_a: Option<usize>,
    trim_boundary: Option<bool>,
    jitter: Option<f64>,
    hist_bins: Option<usize>,
    plant: Option<RawTf>,
    reference_model: Option<RawTf>,
    fixed_part: Option<RawTf>,
    noise_model: Option<RawTf>,
    initial_controller: Option<RawTf>,
    rho0: Option<RawRho0>,
    optimizer: Option<RawOptimizer>,
    eval_reference: Option<RawEvalReference>,
    excitation: Option<RawExcitation>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTf {
    num: Option<Vec<f64>>,
    den: Option<Vec<f64>>,
    num_roots: Option<Vec<f64>>,
    den_roots: Option<Vec<f64>>,
    gain: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRho0 {
    policy: String,
    factor: Option<f64>,
    rho: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizer {
    x_tol: Option<f64>,
    f_tol: Option<f64>,
    max_iter: Option<usize>,
    max_fun: Option<usize>,
    init_step: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvalReference {
    kind: String,
    length: Option<usize>,
    amplitude: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExcitation {
    amplitude: Option<f64>,
    lfsr_order: Option<u32>,
}

fn resolve_tf(raw: &RawTf, field: &str, problems: &mut Vec<String>) -> Option<RationalTF> {
    let mut fail = |msg: String| {
        problems.push(format!("{field}: {msg}"));
    };
    let num = match (&raw.num, &raw.num_roots) {
        (Some(_), Some(_)) => {
            fail("give either num or num_roots, not both".into());
            return None;
        }
        (Some(c), None) => {
            if raw.gain.is_some() {
                fail("gain only applies to the root form".into());
                return None;
            }
            crate::poly::Poly::new(c.clone())
        }
        (None, Some(roots)) => {
            let gain = raw.gain.unwrap_or(1.0);
            let cplx: Vec<nalgebra::Complex<f64>> = roots
                .iter()
                .map(|r| nalgebra::Complex::new(*r, 0.0))
                .collect();
            crate::poly::Poly::from_roots(gain, &cplx)
        }
        (None, None) => {
            fail("missing num or num_roots".into());
            return None;
        }
    };
    let den = match (&raw.den, &raw.den_roots) {
        (Some(_), Some(_)) => {
            fail("give either den or den_roots, not both".into());
            return None;
        }
        (Some(c), None) => crate::poly::Poly::new(c.clone()),
        (None, Some(roots)) => {
            let cplx: Vec<nalgebra::Complex<f64>> = roots
                .iter()
                .map(|r| nalgebra::Complex::new(*r, 0.0))
                .collect();
            crate::poly::Poly::from_roots(1.0, &cplx)
        }
        (None, None) => {
            fail("missing den or den_roots".into());
            return None;
        }
    };
    match RationalTF::new(num, den) {
        Ok(tf) => Some(tf),
        Err(e) => {
            fail(e.to_string());
            None
        }
    }
}

/// Parses and validates configuration text, reporting every violation at
/// once rather than stopping at the first.
pub fn validate_config(text: &str) -> Result<CampaignConfig> {
    let raw: RawConfig = toml::from_str(text)?;
    let mut problems: Vec<String> = Vec::new();

    let loop_mode = match raw.loop_mode.as_deref() {
        Some("open_loop") => Some(LoopMode::OpenLoop),
        Some("closed_loop") => Some(LoopMode::ClosedLoop),
        Some(other) => {
            problems.push(format!(
                "loop_mode: `{other}` is not open_loop or closed_loop"
            ));
            None
        }
        None => {
            problems.push("loop_mode: missing".into());
            None
        }
    };

    let mut require_usize = |v: Option<usize>, field: &str, min: usize| -> Option<usize> {
        match v {
            Some(x) if x >= min => Some(x),
            Some(x) => {
                problems.push(format!("{field}: {x} is below the minimum {min}"));
                None
            }
            None => {
                problems.push(format!("{field}: missing"));
                None
            }
        }
    };
    let n_samples = require_usize(raw.n_samples, "n_samples", 1);
    let n_runs = require_usize(raw.n_runs, "n_runs", 1);
    let n_b = require_usize(raw.n_b, "n_b", 1);
    let n_a = match raw.n_a {
        Some(x) => Some(x),
        None => {
            problems.push("n_a: missing".into());
            None
        }
    };

    let sigma2 = match raw.sigma2 {
        Some(s) if s >= 0.0 => Some(s),
        Some(s) => {
            problems.push(format!("sigma2: {s} is negative"));
            None
        }
        None => {
            problems.push("sigma2: missing".into());
            None
        }
    };
    let master_seed = match raw.master_seed {
        Some(s) => Some(s),
        None => {
            problems.push("master_seed: missing".into());
            None
        }
    };

    let methods: Vec<Method> = match &raw.methods {
        Some(names) if !names.is_empty() => names
            .iter()
            .filter_map(|s| match s.parse::<Method>() {
                Ok(m) => Some(m),
                Err(e) => {
                    problems.push(format!("methods: {e}"));
                    None
                }
            })
            .collect(),
        Some(_) => {
            problems.push("methods: must not be empty".into());
            Vec::new()
        }
        None => {
            problems.push("methods: missing".into());
            Vec::new()
        }
    };

    let plant = raw
        .plant
        .as_ref()
        .map(|t| resolve_tf(t, "plant", &mut problems))
        .unwrap_or_else(|| {
            problems.push("plant: missing".into());
            None
        });
    if let Some(Some(g)) = Some(&plant) {
        if !g.is_proper() {
            problems.push("plant: must be proper".into());
        }
    }
    let reference_model = raw
        .reference_model
        .as_ref()
        .map(|t| resolve_tf(t, "reference_model", &mut problems))
        .unwrap_or_else(|| {
            problems.push("reference_model: missing".into());
            None
        });
    let fixed_part = raw
        .fixed_part
        .as_ref()
        .map(|t| resolve_tf(t, "fixed_part", &mut problems))
        .unwrap_or_else(|| {
            problems.push("fixed_part: missing".into());
            None
        });
    let noise_model = raw
        .noise_model
        .as_ref()
        .map(|t| resolve_tf(t, "noise_model", &mut problems))
        .unwrap_or_else(|| {
            problems.push("noise_model: missing".into());
            None
        });
    if let Some(Some(h)) = Some(&noise_model) {
        if !h.is_proper() {
            problems.push("noise_model: must be proper".into());
        }
    }
    let initial_controller = match &raw.initial_controller {
        Some(t) => resolve_tf(t, "initial_controller", &mut problems),
        None => None,
    };
    if loop_mode == Some(LoopMode::ClosedLoop) && initial_controller.is_none() {
        problems.push("initial_controller: required for closed_loop data collection (c0)".into());
    }

    let m = n_b.unwrap_or(1) + n_a.unwrap_or(0);
    let rho0_policy = match &raw.rho0 {
        None => Rho0Policy::ScaledIdeal { factor: 0.8 },
        Some(r) => match r.policy.as_str() {
            "scaled_ideal" => Rho0Policy::ScaledIdeal {
                factor: match r.factor {
                    Some(f) if f.is_finite() => f,
                    Some(f) => {
                        problems.push(format!("rho0.factor: {f} is not finite"));
                        0.8
                    }
                    None => 0.8,
                },
            },
            "ols_start" => Rho0Policy::OlsStart,
            "explicit" => match &r.rho {
                Some(v) if v.len() == m => Rho0Policy::Explicit { rho: v.clone() },
                Some(v) => {
                    problems.push(format!(
                        "rho0.rho: has {} entries, structure needs {m}",
                        v.len()
                    ));
                    Rho0Policy::OlsStart
                }
                None => {
                    problems.push("rho0.rho: required for the explicit policy".into());
                    Rho0Policy::OlsStart
                }
            },
            other => {
                problems.push(format!(
                    "rho0.policy: `{other}` is not scaled_ideal, ols_start or explicit"
                ));
                Rho0Policy::OlsStart
            }
        },
    };

    let mut optimizer = OptimOptions::default();
    if let Some(o) = &raw.optimizer {
        if let Some(x) = o.x_tol {
            optimizer.x_tol = x;
        }
        if let Some(f) = o.f_tol {
            optimizer.f_tol = f;
        }
        optimizer.max_iter = o.max_iter.or(optimizer.max_iter);
        optimizer.max_fun = o.max_fun.or(optimizer.max_fun);
        if let Some(s) = o.init_step {
            optimizer.init_step = s;
        }
        if !(optimizer.x_tol > 0.0) || !(optimizer.f_tol > 0.0) || !(optimizer.init_step > 0.0) {
            problems.push("optimizer: tolerances and init_step must be positive".into());
        }
    }

    let eval_reference = match &raw.eval_reference {
        None => EvalReference::Step {
            length: 100,
            amplitude: 1.0,
        },
        Some(e) => {
            let length = e.length.unwrap_or(100);
            let amplitude = e.amplitude.unwrap_or(1.0);
            if length == 0 {
                problems.push("eval_reference.length: must be at least 1".into());
            }
            if !(amplitude > 0.0) {
                problems.push("eval_reference.amplitude: must be positive".into());
            }
            match e.kind.as_str() {
                "step" => EvalReference::Step { length, amplitude },
                "prbs" => EvalReference::Prbs {
                    length,
                    amplitude,
                    seed: e.seed.unwrap_or(0),
                },
                other => {
                    problems.push(format!(
                        "eval_reference.kind: `{other}` is not step or prbs"
                    ));
                    EvalReference::Step { length, amplitude }
                }
            }
        }
    };

    let excitation = {
        let amplitude = raw
            .excitation
            .as_ref()
            .and_then(|e| e.amplitude)
            .unwrap_or(1.0);
        let lfsr_order = raw
            .excitation
            .as_ref()
            .and_then(|e| e.lfsr_order)
            .unwrap_or(DEFAULT_PRBS_ORDER);
        if !(amplitude > 0.0) {
            problems.push("excitation.amplitude: must be positive".into());
        }
        if prbs_with_order(1, 0, 1.0, lfsr_order).is_err() {
            problems.push(format!(
                "excitation.lfsr_order: no taps for order {lfsr_order}"
            ));
        }
        Excitation {
            amplitude,
            lfsr_order,
        }
    };

    let jitter = raw.jitter.unwrap_or(crate::ctls::DEFAULT_CTLS_JITTER);
    if !(jitter >= 0.0) {
        problems.push("jitter: must be nonnegative".into());
    }
    let hist_bins = raw.hist_bins.unwrap_or(20);
    if hist_bins == 0 {
        problems.push("hist_bins: must be at least 1".into());
    }

    if let (Some(n), Some(nb), Some(na)) = (n_samples, n_b, n_a) {
        if n < nb + na + 2 {
            problems.push(format!(
                "n_samples: {n} leaves no room for {} parameters",
                nb + na
            ));
        }
    }

    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }

    let noise = NoiseSpec::new(noise_model.unwrap(), sigma2.unwrap())
        .map_err(|e| Error::InvalidConfig(vec![format!("noise_model: {e}")]))?;
    Ok(CampaignConfig {
        loop_mode: loop_mode.unwrap(),
        plant: plant.unwrap(),
        reference_model: reference_model.unwrap(),
        fixed_part: fixed_part.unwrap(),
        noise,
        initial_controller,
        n_b: n_b.unwrap(),
        n_a: n_a.unwrap(),
        n_samples: n_samples.unwrap(),
        n_runs: n_runs.unwrap(),
        master_seed: master_seed.unwrap(),
        methods,
        rho0_policy,
        optimizer,
        eval_reference,
        excitation,
        trim_boundary: raw.trim_boundary.unwrap_or(true),
        jitter,
        hist_bins,
    })
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<CampaignConfig> {
    let text = fs::read_to_string(path)?;
    validate_config(&text)
}

/// A per-run estimator problem that was recorded instead of aborting the
/// campaign.
#[derive(Debug, Clone)]
pub struct RunFailure {
    pub run_index: usize,
    pub method: Method,
    pub message: String,
}

/// Everything a finished campaign produced, in memory.
#[derive(Debug)]
pub struct CampaignReport {
    pub stats: Vec<CampaignStats>,
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    pub rho_d: Vec<f64>,
    pub out_dir: PathBuf,
}

struct CampaignContext<'a> {
    config: &'a CampaignConfig,
    structure: ControllerStructure,
    l_f: RationalTF,
    rho_d: Vec<f64>,
    bank: Option<FilterBank>,
    excitation: Vec<f64>,
    eval_r: Vec<f64>,
    trim: usize,
}

struct RunOutput {
    records: Vec<RunRecord>,
    failures: Vec<RunFailure>,
    datasets: Vec<(String, Vec<u8>)>,
}

/// Runs the full Monte Carlo campaign and writes datasets, per-run
/// estimates, statistics, distribution files and the summary table into
/// `out_dir`.
pub fn run_campaign(config: &CampaignConfig, out_dir: &Path) -> Result<CampaignReport> {
    let structure = ControllerStructure::new(config.fixed_part.clone(), config.n_b, config.n_a)?;
    let l_f = build_lf(&config.reference_model, &config.fixed_part)?;
    let rho_d = ideal_parameters(&config.plant, &config.reference_model, &structure)?;
    let trim = if config.trim_boundary {
        l_f.advance_steps()
    } else {
        0
    };
    if config.n_samples <= trim + structure.m() {
        return Err(Error::InvalidArgument(format!(
            "n_samples = {} is too short for the boundary trim of {trim}",
            config.n_samples
        )));
    }
    let excitation = prbs_with_order(
        config.n_samples,
        config.master_seed,
        config.excitation.amplitude,
        config.excitation.lfsr_order,
    )?;
    let eval_r = config.eval_reference.realize()?;
    let bank = if config.methods.contains(&Method::Ctls) {
        Some(FilterBank::new(
            config.loop_mode,
            &l_f,
            config.initial_controller.as_ref(),
            &structure,
            config.n_samples - trim,
        )?)
    } else {
        None
    };

    let ctx = CampaignContext {
        config,
        structure,
        l_f,
        rho_d,
        bank,
        excitation,
        eval_r,
        trim,
    };

    fs::create_dir_all(out_dir)?;
    let datasets_dir = out_dir.join("datasets");
    fs::create_dir_all(&datasets_dir)?;

    let outputs: Vec<Result<RunOutput>> = (0..config.n_runs)
        .into_par_iter()
        .map(|i| run_single(&ctx, i))
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for out in outputs {
        let out = out?;
        for (name, bytes) in out.datasets {
            fs::write(datasets_dir.join(name), bytes)?;
        }
        records.extend(out.records);
        failures.extend(out.failures);
    }

    let stats = aggregate(config, &ctx.rho_d, &records);
    write_outputs(config, &ctx, &stats, &records, &failures, out_dir)?;

    Ok(CampaignReport {
        stats,
        records,
        failures,
        rho_d: ctx.rho_d,
        out_dir: out_dir.to_path_buf(),
    })
}

fn run_single(ctx: &CampaignContext<'_>, i: usize) -> Result<RunOutput> {
    let config = ctx.config;
    let seed = config.master_seed + i as u64;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut datasets = Vec::new();
    let fail = |failures: &mut Vec<RunFailure>, method: Method, e: &Error| {
        failures.push(RunFailure {
            run_index: i,
            method,
            message: e.to_string(),
        });
    };

    let data = simulate(config, &ctx.excitation, seed)?;
    let mut csv = Vec::new();
    data.write_csv(&mut csv)?;
    datasets.push((format!("run_{i:04}.csv"), csv));
    let reg = regressors_for(ctx, &data)?;

    let mut ols_result: Option<EstimateResult> = None;
    let needs_ols = config.methods.contains(&Method::Ols)
        || (config.methods.contains(&Method::Ctls) && config.rho0_policy == Rho0Policy::OlsStart);
    if needs_ols {
        match ols_estimate(&reg) {
            Ok(est) => ols_result = Some(est),
            Err(e) => {
                if config.methods.contains(&Method::Ols) {
                    fail(&mut failures, Method::Ols, &e);
                }
                if config.rho0_policy == Rho0Policy::OlsStart
                    && config.methods.contains(&Method::Ctls)
                {
                    fail(&mut failures, Method::Ctls, &e);
                }
            }
        }
    }

    for method in &config.methods {
        let est = match method {
            Method::Ols => match &ols_result {
                Some(est) => est.clone(),
                None => continue,
            },
            Method::Iv => {
                let second = simulate(config, &ctx.excitation, seed + IV_SEED_OFFSET)?;
                let mut csv = Vec::new();
                second.write_csv(&mut csv)?;
                datasets.push((format!("run_{i:04}_iv.csv"), csv));
                let reg2 = regressors_for(ctx, &second)?;
                match iv_estimate(&reg, &reg2) {
                    Ok(est) => est,
                    Err(e) => {
                        fail(&mut failures, Method::Iv, &e);
                        continue;
                    }
                }
            }
            Method::Ctls => {
                let bank = ctx.bank.as_ref().expect("bank built for CTLS");
                let rho0 = match &config.rho0_policy {
                    Rho0Policy::ScaledIdeal { factor } => {
                        ctx.rho_d.iter().map(|v| factor * v).collect::<Vec<f64>>()
                    }
                    Rho0Policy::OlsStart => match &ols_result {
                        Some(est) => est.rho_hat.clone(),
                        None => continue,
                    },
                    Rho0Policy::Explicit { rho } => rho.clone(),
                };
                let prob = CtlsProblem::new(&reg, bank.clone())?.with_jitter(config.jitter)?;
                match ctls_estimate(&prob, &rho0, &config.optimizer) {
                    Ok(est) => est,
                    Err(e) => {
                        fail(&mut failures, Method::Ctls, &e);
                        continue;
                    }
                }
            }
        };

        let controller = match assemble_controller(&est.rho_hat, &ctx.structure) {
            Ok(c) => c,
            Err(e) => {
                fail(&mut failures, *method, &e);
                continue;
            }
        };
        let stable = is_loop_stable(&config.plant, &controller);
        let j_hat = if stable {
            Some(closed_loop_cost(
                &controller,
                &config.plant,
                &config.reference_model,
                &ctx.eval_r,
            )?)
        } else {
            None
        };
        records.push(RunRecord {
            run_index: i,
            method: *method,
            rho_hat: est.rho_hat,
            stable,
            j_hat,
            seed,
            converged: est.converged,
            iterations: est.iterations,
            cost: est.cost,
        });
    }
    log::debug!("run {i} complete ({} records)", records.len());
    Ok(RunOutput {
        records,
        failures,
        datasets,
    })
}

fn simulate(config: &CampaignConfig, excitation: &[f64], seed: u64) -> Result<ExperimentData> {
    match config.loop_mode {
        LoopMode::OpenLoop => simulate_open_loop(&config.plant, &config.noise, excitation, seed),
        LoopMode::ClosedLoop => simulate_closed_loop(
            &config.plant,
            config
                .initial_controller
                .as_ref()
                .expect("validated closed-loop config"),
            &config.noise,
            excitation,
            seed,
        ),
    }
}

fn regressors_for(ctx: &CampaignContext<'_>, data: &ExperimentData) -> Result<RegressorSet> {
    let ef = virtual_error_input(&data.y, &ctx.l_f)?;
    let reg = build_regressors(&ef, &data.u, &ctx.structure)?;
    if ctx.trim > 0 {
        reg.drop_trailing(ctx.trim)
    } else {
        Ok(reg)
    }
}

fn aggregate(config: &CampaignConfig, rho_d: &[f64], records: &[RunRecord]) -> Vec<CampaignStats> {
    let mut stats = Vec::new();
    for method in &config.methods {
        let of_method: Vec<&RunRecord> = records.iter().filter(|r| r.method == *method).collect();
        if of_method.is_empty() {
            continue;
        }
        let estimates: Vec<Vec<f64>> = of_method.iter().map(|r| r.rho_hat.clone()).collect();
        let (bias, variance, mse) = mse_stats(&estimates, rho_d).expect("nonempty estimates");
        let stable = of_method.iter().filter(|r| r.stable).count();
        let j_hats: Vec<f64> = of_method.iter().filter_map(|r| r.j_hat).collect();
        stats.push(CampaignStats {
            method: *method,
            bias,
            variance,
            mse,
            stable_fraction: stable as f64 / of_method.len() as f64,
            j_hats,
        });
    }
    stats
}

fn write_outputs(
    config: &CampaignConfig,
    ctx: &CampaignContext<'_>,
    stats: &[CampaignStats],
    records: &[RunRecord],
    failures: &[RunFailure],
    out_dir: &Path,
) -> Result<()> {
    let mut stats_file = fs::File::create(out_dir.join("stats.csv"))?;
    write_stats_csv(&mut stats_file, stats)?;

    // jhat.csv and estimates.csv grouped by method in configuration order
    let ordered: Vec<&RunRecord> = config
        .methods
        .iter()
        .flat_map(|m| records.iter().filter(move |r| r.method == *m))
        .collect();
    let ordered_owned: Vec<RunRecord> = ordered.iter().map(|r| (*r).clone()).collect();
    let mut jhat_file = fs::File::create(out_dir.join("jhat.csv"))?;
    write_jhat_csv(&mut jhat_file, &ordered_owned)?;

    let m = ctx.structure.m();
    let mut est_file = fs::File::create(out_dir.join("estimates.csv"))?;
    let rho_cols: Vec<String> = (0..m).map(|j| format!("rho_{j}")).collect();
    writeln!(
        est_file,
        "method,run_index,seed,stable,converged,iterations,cost,{}",
        rho_cols.join(",")
    )?;
    for rec in &ordered_owned {
        let rho: Vec<String> = rec.rho_hat.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(
            est_file,
            "{},{},{},{},{},{},{:.16e},{}",
            rec.method,
            rec.run_index,
            rec.seed,
            rec.stable,
            rec.converged,
            rec.iterations,
            rec.cost,
            rho.join(",")
        )?;
    }

    for s in stats {
        if s.j_hats.is_empty() {
            continue;
        }
        let summary = summarize_distribution(&s.j_hats, config.hist_bins)?;
        let name = format!("hist_{}.csv", s.method.name().to_ascii_lowercase());
        let mut hist_file = fs::File::create(out_dir.join(name))?;
        write_hist_csv(&mut hist_file, &summary)?;
    }

    let mut fail_file = fs::File::create(out_dir.join("failures.csv"))?;
    writeln!(fail_file, "run_index,method,message")?;
    for f in failures {
        writeln!(
            fail_file,
            "{},{},{}",
            f.run_index,
            f.method,
            f.message.replace(',', ";").replace('\n', " ")
        )?;
    }

    fs::write(out_dir.join("summary.txt"), render_summary(stats))?;
    fs::write(
        out_dir.join("config_resolved.toml"),
        render_config(config, ctx),
    )?;
    Ok(())
}

/// Rebuilds the per-method statistics from the CSVs a campaign wrote, so
/// the summary table can be re-rendered without rerunning anything.
pub fn load_summary(dir: &Path) -> Result<Vec<CampaignStats>> {
    let parse_f64 = |field: &str, line_no: usize, file: &str| -> Result<f64> {
        field.parse::<f64>().map_err(|_| {
            Error::InvalidArgument(format!("{file}: line {line_no}: `{field}` is not a number"))
        })
    };

    let stats_text = fs::read_to_string(dir.join("stats.csv"))?;
    let mut stats = Vec::new();
    for (idx, line) in stats_text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::InvalidArgument(format!(
                "stats.csv: line {}: expected 5 fields, found {}",
                idx + 1,
                fields.len()
            )));
        }
        let method: Method = fields[0].parse()?;
        stats.push(CampaignStats {
            method,
            bias: parse_f64(fields[1], idx + 1, "stats.csv")?,
            variance: parse_f64(fields[2], idx + 1, "stats.csv")?,
            mse: parse_f64(fields[3], idx + 1, "stats.csv")?,
            stable_fraction: parse_f64(fields[4], idx + 1, "stats.csv")?,
            j_hats: Vec::new(),
        });
    }

    let jhat_text = fs::read_to_string(dir.join("jhat.csv"))?;
    for (idx, line) in jhat_text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "jhat.csv: line {}: expected 3 fields, found {}",
                idx + 1,
                fields.len()
            )));
        }
        let method: Method = fields[0].parse()?;
        let j = parse_f64(fields[2], idx + 1, "jhat.csv")?;
        match stats.iter_mut().find(|s| s.method == method) {
            Some(s) => s.j_hats.push(j),
            None => {
                return Err(Error::InvalidArgument(format!(
                    "jhat.csv: line {}: method {method} is absent from stats.csv",
                    idx + 1
                )))
            }
        }
    }
    Ok(stats)
}

/// Renders the per-method statistics table. `tune report` reproduces this
/// from the persisted CSVs alone.
pub fn render_summary(stats: &[CampaignStats]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} {:>12} {:>12} {:>12} {:>8} {:>13}",
        "method", "bias", "variance", "mse", "stable", "median_Jhat"
    );
    for s in stats {
        let median = if s.j_hats.is_empty() {
            "-".to_string()
        } else {
            let mut sorted = s.j_hats.clone();
            sorted.sort_by(f64::total_cmp);
            format!("{:.4e}", percentile_sorted(&sorted, 0.5))
        };
        let _ = writeln!(
            out,
            "{:<8} {:>12.4e} {:>12.4e} {:>12.4e} {:>8.2} {:>13}",
            s.method.name(),
            s.bias,
            s.variance,
            s.mse,
            s.stable_fraction,
            median
        );
    }
    out
}

fn poly_literal(p: &crate::poly::Poly) -> String {
    let coeffs: Vec<String> = p.coeffs().iter().map(|c| format!("{c:?}")).collect();
    format!("[{}]", coeffs.join(", "))
}

fn tf_literal(name: &str, tf: &RationalTF) -> String {
    format!(
        "[{name}]\nnum = {}\nden = {}\n",
        poly_literal(tf.num()),
        poly_literal(tf.den())
    )
}

/// Echoes the fully resolved configuration, coefficients expanded, so a
/// campaign directory is self-describing.
fn render_config(config: &CampaignConfig, ctx: &CampaignContext<'_>) -> String {
    let mut out = String::new();
    let mode = match config.loop_mode {
        LoopMode::OpenLoop => "open_loop",
        LoopMode::ClosedLoop => "closed_loop",
    };
    let _ = writeln!(out, "loop_mode = \"{mode}\"");
    let _ = writeln!(out, "n_samples = {}", config.n_samples);
    let _ = writeln!(out, "n_runs = {}", config.n_runs);
    let _ = writeln!(out, "sigma2 = {:?}", config.noise.sigma2);
    let _ = writeln!(out, "master_seed = {}", config.master_seed);
    let names: Vec<String> = config
        .methods
        .iter()
        .map(|m| format!("\"{}\"", m.name().to_ascii_lowercase()))
        .collect();
    let _ = writeln!(out, "methods = [{}]", names.join(", "));
    let _ = writeln!(out, "n_b = {}", config.n_b);
    let _ = writeln!(out, "n_a = {}", config.n_a);
    let _ = writeln!(out, "trim_boundary = {}", config.trim_boundary);
    let _ = writeln!(out, "jitter = {:?}", config.jitter);
    let _ = writeln!(out, "hist_bins = {}", config.hist_bins);
    let _ = writeln!(out, "noise_distribution = \"gaussian\"");
    let rho_d: Vec<String> = ctx.rho_d.iter().map(|v| format!("{v:?}")).collect();
    let _ = writeln!(out, "rho_d = [{}]", rho_d.join(", "));
    let _ = writeln!(out);
    let _ = writeln!(out, "{}", tf_literal("plant", &config.plant));
    let _ = writeln!(
        out,
        "{}",
        tf_literal("reference_model", &config.reference_model)
    );
    let _ = writeln!(out, "{}", tf_literal("fixed_part", &config.fixed_part));
    let _ = writeln!(out, "{}", tf_literal("noise_model", &config.noise.h));
    if let Some(c0) = &config.initial_controller {
        let _ = writeln!(out, "{}", tf_literal("initial_controller", c0));
    }
    let _ = writeln!(out, "{}", tf_literal("lf_filter", &ctx.l_f));
    match &config.rho0_policy {
        Rho0Policy::ScaledIdeal { factor } => {
            let _ = writeln!(
                out,
                "[rho0]\npolicy = \"scaled_ideal\"\nfactor = {factor:?}\n"
            );
        }
        Rho0Policy::OlsStart => {
            let _ = writeln!(out, "[rho0]\npolicy = \"ols_start\"\n");
        }
        Rho0Policy::Explicit { rho } => {
            let vals: Vec<String> = rho.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(
                out,
                "[rho0]\npolicy = \"explicit\"\nrho = [{}]\n",
                vals.join(", ")
            );
        }
    }
    let _ = writeln!(
        out,
        "[optimizer]\nx_tol = {:?}\nf_tol = {:?}\ninit_step = {:?}",
        config.optimizer.x_tol, config.optimizer.f_tol, config.optimizer.init_step
    );
    if let Some(mi) = config.optimizer.max_iter {
        let _ = writeln!(out, "max_iter = {mi}");
    }
    if let Some(mf) = config.optimizer.max_fun {
        let _ = writeln!(out, "max_fun = {mf}");
    }
    let _ = writeln!(out);
    match &config.eval_reference {
        EvalReference::Step { length, amplitude } => {
            let _ = writeln!(
                out,
                "[eval_reference]\nkind = \"step\"\nlength = {length}\namplitude = {amplitude:?}\n"
            );
        }
        EvalReference::Prbs {
            length,
            amplitude,
            seed,
        } => {
            let _ = writeln!(
                out,
                "[eval_reference]\nkind = \"prbs\"\nlength = {length}\namplitude = {amplitude:?}\nseed = {seed}\n"
            );
        }
    }
    let _ = writeln!(
        out,
        "[excitation]\namplitude = {:?}\nlfsr_order = {}",
        config.excitation.amplitude, config.excitation.lfsr_order
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn open_loop_toml(n_samples: usize, n_runs: usize, sigma2: f64) -> String {
        format!(
            r#"
loop_mode = "open_loop"
n_samples = {n_samples}
n_runs = {n_runs}
sigma2 = {sigma2}
master_seed = 7
methods = ["ols"]
n_b = 3
n_a = 2

[plant]
gain = 0.5
num_roots = [0.8]
den_roots = [0.7, 0.9]

[reference_model]
gain = 0.16
num_roots = [0.0]
den_roots = [0.6, 0.6]

[fixed_part]
num = [1.0, 0.0]
den = [1.0, -1.0]

[noise_model]
num = [1.0, 0.0]
den = [1.0, -0.3]
"#
        )
    }

    #[test]
    fn validation_collects_all_violations() {
        let bad = r#"
loop_mode = "closed_loop"
n_runs = 0
sigma2 = -1.0
methods = []
n_b = 0
n_a = 2
"#;
        match validate_config(bad) {
            Err(Error::InvalidConfig(problems)) => {
                let text = problems.join("\n");
                for needle in [
                    "n_samples",
                    "n_runs",
                    "sigma2",
                    "methods",
                    "n_b",
                    "master_seed",
                    "initial_controller",
                    "plant",
                ] {
                    assert!(text.contains(needle), "missing `{needle}` in:\n{text}");
                }
            }
            other => panic!("expected aggregated violations, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{}\nbogus_key = 1\n", open_loop_toml(100, 1, 0.0));
        assert!(validate_config(&bad).is_err());
    }

    #[test]
    fn noise_free_single_run_recovers_ideal_parameters() {
        let config = validate_config(&open_loop_toml(400, 1, 0.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = run_campaign(&config, dir.path()).unwrap();
        assert!(report.failures.is_empty());
        assert_eq!(report.records.len(), 1);
        let rec = &report.records[0];
        for (a, b) in rec.rho_hat.iter().zip(&report.rho_d) {
            assert_relative_eq!(*a, *b, epsilon = 1e-6);
        }
        assert!(rec.stable);
        assert!(rec.j_hat.unwrap() < 1e-10);
        assert!(dir.path().join("stats.csv").exists());
        assert!(dir.path().join("datasets/run_0000.csv").exists());
        assert!(dir.path().join("summary.txt").exists());
    }

    #[test]
    fn campaign_outputs_are_byte_identical() {
        let config = validate_config(&open_loop_toml(200, 3, 0.01)).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        run_campaign(&config, dir_a.path()).unwrap();
        run_campaign(&config, dir_b.path()).unwrap();
        for name in [
            "stats.csv",
            "jhat.csv",
            "estimates.csv",
            "summary.txt",
            "config_resolved.toml",
            "failures.csv",
            "hist_ols.csv",
            "datasets/run_0002.csv",
        ] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "file {name} differs");
        }
    }

    #[test]
    fn excitation_is_fixed_across_runs() {
        let config = validate_config(&open_loop_toml(150, 2, 0.01)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_campaign(&config, dir.path()).unwrap();
        let read_u = |name: &str| -> Vec<f64> {
            let text = fs::read_to_string(dir.path().join("datasets").join(name)).unwrap();
            text.lines()
                .skip(1)
                .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
                .collect()
        };
        assert_eq!(read_u("run_0000.csv"), read_u("run_0001.csv"));
    }

    #[test]
    fn shipped_presets_parse() {
        let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../presets");
        for name in ["open_loop.toml", "closed_loop.toml"] {
            let text = fs::read_to_string(format!("{root}/{name}")).unwrap();
            let config = validate_config(&text).unwrap();
            assert_eq!(config.n_samples, 1000);
            assert_eq!(config.n_runs, 100);
            assert_eq!(config.methods.len(), 3);
        }
    }
}
