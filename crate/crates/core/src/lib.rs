//! Data-driven controller tuning from a single batch of plant data.
//!
//! The library recasts reference-model controller design as a regression
//! problem on measured signals: the recorded output is filtered into the
//! virtual tracking error the controller should have seen, and the
//! controller parameters are identified by ordinary least squares,
//! instrumental variables, or a constrained-total-least-squares criterion
//! that models how measurement noise enters every regressor column.
//!
//! Modules follow the pipeline: [`poly`]/[`tf`] give the transfer-function
//! arithmetic, [`signal`] generates and simulates experiments, [`vrft`]
//! builds the regression, [`estimate`]/[`ctls`]/[`optim`] solve it,
//! [`eval`] scores the tuned loops, and [`campaign`] wires everything into
//! reproducible Monte Carlo studies.

pub mod campaign;
pub mod ctls;
pub mod error;
pub mod estimate;
pub mod eval;
pub mod optim;
pub mod poly;
pub mod signal;
pub mod tf;
pub mod vrft;

pub use campaign::{
    load_config, load_summary, render_summary, run_campaign, validate_config, CampaignConfig,
    CampaignReport, EvalReference, Excitation, Rho0Policy, RunFailure, IV_SEED_OFFSET,
};
pub use ctls::{
    build_ctls_filters, ctls_cost, ctls_cost_dense, ctls_cost_with, ctls_estimate,
    toeplitz_from_filter, CtlsProblem, CtlsWorkspace, FilterBank, ToeplitzOperator,
    DEFAULT_CTLS_JITTER,
};
pub use error::{Error, Result};
pub use estimate::{iv_estimate, ols_estimate, EstimateResult, Method};
pub use eval::{
    closed_loop_cost, is_loop_stable, mse_stats, stability_rate, summarize_distribution,
    CampaignStats, DistributionSummary, RunRecord,
};
pub use optim::{nelder_mead, NmOutcome, OptimOptions};
pub use poly::Poly;
pub use signal::{
    prbs, prbs_with_order, simulate_closed_loop, simulate_open_loop, white_noise, ExperimentData,
    LoopMode, NoiseSpec, DEFAULT_PRBS_ORDER,
};
pub use tf::{
    feedback, filter_seq, impulse_response, BoundaryPolicy, ImpulseResponse, RationalTF,
    DEFAULT_SIMPLIFY_TOL, DEFAULT_STABILITY_MARGIN,
};
pub use vrft::{
    assemble_controller, build_lf, build_regressors, ideal_parameters, virtual_error_input,
    ControllerStructure, RegressorSet,
};
