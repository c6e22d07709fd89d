//! Monte Carlo experiments: test-error estimation, event-frequency
//! estimation, grid sweeps, CSV persistence, and aggregate reporting.
//!
//! Determinism contract: every random quantity derives from the config's
//! master seed. The seed of trial `t` in cell `c` is
//! `mix_seed(master_seed, [c, t, STREAM])` with stream 0 for training data
//! and stream 1 for test data, so any runner (different worker counts,
//! other languages) reproduces the same numbers. Sweep output is sorted by
//! `(cell_id, trial)` before writing and is therefore byte-identical across
//! schedules.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{
    check_events, derive_tilde_params, homogeneous_params, measure_perturbation,
};
use crate::linalg::dot;
use crate::maxmargin::{
    hard_margin_homogeneous, hard_margin_oracle, margin_stats, MarginError, Solution,
    SolverOptions,
};
use crate::rng::{mix_seed, rng_from_seed, STREAM_DATASET, STREAM_TEST};
use crate::sampler::{
    extend_dataset, sample_dataset, ModelSpec, SigmaKind, SigmaSpec,
};
use crate::theory::{
    error_bound_rhs, noiseless_intermediate_conditions, noisy_conditions, BoundRegime,
    ConstantsConfig,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty input")]
    EmptyInput,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(String),
}

impl From<csv::Error> for ExperimentError {
    fn from(e: csv::Error) -> Self {
        ExperimentError::Csv(e.to_string())
    }
}

fn default_test_samples() -> usize {
    100_000
}
fn default_workers() -> usize {
    1
}
fn default_delta() -> f64 {
    0.1
}

/// A full sweep description. The `model` acts as a template: each grid
/// cell rebuilds it with the cell's dimension, signal norm (placed along
/// the first axis), and flip rate, keeping the g, xi, and covariance-shape
/// choices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub n_grid: Vec<usize>,
    pub p_grid: Vec<usize>,
    pub mu_norm_grid: Vec<f64>,
    pub eta_grid: Vec<f64>,
    /// Trials per cell.
    pub trials: usize,
    /// Fresh samples per test-error estimate.
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    pub master_seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub constants: ConstantsConfig,
    /// Failure-probability budget used for concentration parameters and
    /// condition reports.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Also solve the bias-free classifier on raw features in every trial.
    #[serde(default)]
    pub homogeneous_baseline: bool,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.trials < 1 {
            return Err(ExperimentError::InvalidConfig("trials must be at least 1".into()));
        }
        if self.test_samples < 1 {
            return Err(ExperimentError::InvalidConfig(
                "test_samples must be at least 1".into(),
            ));
        }
        if self.workers < 1 {
            return Err(ExperimentError::InvalidConfig("workers must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(ExperimentError::InvalidConfig(format!(
                "delta must lie in (0, 1/2), got {}",
                self.delta
            )));
        }
        for &n in &self.n_grid {
            if n < 1 {
                return Err(ExperimentError::InvalidConfig("n values must be positive".into()));
            }
        }
        for &p in &self.p_grid {
            if p < 1 {
                return Err(ExperimentError::InvalidConfig("p values must be positive".into()));
            }
        }
        for &m in &self.mu_norm_grid {
            if !(m >= 0.0 && m.is_finite()) {
                return Err(ExperimentError::InvalidConfig(format!(
                    "mu_norm values must be finite and nonnegative, got {m}"
                )));
            }
        }
        for &e in &self.eta_grid {
            if !(0.0..0.5).contains(&e) {
                return Err(ExperimentError::InvalidConfig(format!(
                    "eta values must lie in [0, 1/2), got {e}"
                )));
            }
        }
        self.constants
            .validate()
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        // Grid dimensions must be realizable from the covariance template.
        for &p in &self.p_grid {
            resize_sigma(self.model.sigma(), p)?;
        }
        Ok(())
    }
}

/// One grid point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub cell_id: usize,
    pub n: usize,
    pub p: usize,
    pub mu_norm: f64,
    pub eta: f64,
}

fn resize_sigma(template: &SigmaSpec, p: usize) -> Result<SigmaSpec, ExperimentError> {
    if template.p() == p {
        return Ok(template.clone());
    }
    match template.kind() {
        SigmaKind::Identity { .. } => {
            SigmaSpec::identity(p).map_err(|e| ExperimentError::InvalidConfig(e.to_string()))
        }
        SigmaKind::Spiked { lambda, .. } => SigmaSpec::spiked(p, *lambda, None)
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string())),
        SigmaKind::Diagonal { .. } => Err(ExperimentError::InvalidConfig(format!(
            "diagonal covariance template has dimension {} and cannot be resized to {p}",
            template.p()
        ))),
    }
}

/// Enumerates grid cells in cartesian order, n varying slowest, then p,
/// then the signal norm, then eta.
pub fn build_cells(config: &ExperimentConfig) -> Result<Vec<(Cell, ModelSpec)>, ExperimentError> {
    let mut out = Vec::new();
    let mut cell_id = 0usize;
    for &n in &config.n_grid {
        for &p in &config.p_grid {
            for &mu_norm in &config.mu_norm_grid {
                for &eta in &config.eta_grid {
                    let sigma = resize_sigma(config.model.sigma(), p)?;
                    let spec = ModelSpec::with_mu_along_e1(
                        mu_norm,
                        sigma,
                        config.model.g().clone(),
                        config.model.xi().clone(),
                        eta,
                    )
                    .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
                    out.push((
                        Cell {
                            cell_id,
                            n,
                            p,
                            mu_norm,
                            eta,
                        },
                        spec,
                    ));
                    cell_id += 1;
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Test-error estimation

/// Wilson 95% score interval for `errors` out of `total`.
pub fn wilson_interval(errors: usize, total: usize) -> (f64, f64) {
    assert!(total > 0, "interval needs at least one sample");
    let z = 1.959963984540054_f64;
    let n = total as f64;
    let ph = errors as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (ph + z2 / (2.0 * n)) / denom;
    let half = z * (ph * (1.0 - ph) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // At ph = 0 or 1 an endpoint equals ph exactly; keep rounding from
    // pushing the estimate outside its own interval.
    (
        (center - half).max(0.0).min(ph),
        (center + half).min(1.0).max(ph),
    )
}

/// Monte Carlo test-error estimate with Wilson 95% intervals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestErrorEstimate {
    pub m: usize,
    /// Fraction of fresh samples with clean-label margin <= 0 (ties count
    /// as errors).
    pub clean_err: f64,
    pub clean_lo: f64,
    pub clean_hi: f64,
    /// Observed-label error: the flip is averaged out analytically per
    /// sample, so exactly `(1-eta) clean + eta (1-clean)`.
    pub noisy_err: f64,
    pub noisy_lo: f64,
    pub noisy_hi: f64,
}

/// Estimates the solution's test error on `m` fresh draws from `spec`.
///
/// The per-sample draw order matches dataset generation (label, scale, xi
/// coordinates, flip variable), so estimates are reproducible from the
/// seed alone. A sample is a clean error when `y (<w, x> + b) <= 0`. The
/// observed-label error replaces the drawn flip by its expectation, which
/// cuts variance and makes `noisy = (1-eta) clean + eta (1-clean)` an
/// identity on the shared sample.
pub fn estimate_test_error(
    solution: &Solution,
    spec: &ModelSpec,
    m: usize,
    seed: u64,
) -> TestErrorEstimate {
    assert!(m >= 1, "need at least one test sample");
    let p = spec.p();
    assert_eq!(solution.w.len(), p, "solution dimension must match the model");
    let mut rng = rng_from_seed(seed);
    let mut xi_sampler = spec.xi().sampler();

    // <w, x> + b = y <w, mu> + g <Sigma^{1/2} w, xi> + b.
    let mut s = solution.w.clone();
    spec.sigma().sqrt_apply(&mut s);
    let w_mu = dot(&solution.w, spec.mu());
    let eta = spec.eta();

    let mut clean_errors = 0usize;
    for _ in 0..m {
        let uy: f64 = rng.random();
        let y = if uy < 0.5 { 1.0 } else { -1.0 };
        let g = spec.g().sample(&mut rng);
        let mut acc = 0.0;
        for sj in &s {
            acc += sj * xi_sampler.next(&mut rng);
        }
        // Drawn for stream compatibility with dataset generation; the flip
        // itself is integrated out below.
        let _uf: f64 = rng.random();
        let score = y * (y * w_mu + g * acc + solution.b);
        if !(score > 0.0) {
            clean_errors += 1;
        }
    }

    let clean_err = clean_errors as f64 / m as f64;
    let (clean_lo, clean_hi) = wilson_interval(clean_errors, m);
    let noisy = |e: f64| (1.0 - eta) * e + eta * (1.0 - e);
    TestErrorEstimate {
        m,
        clean_err,
        clean_lo,
        clean_hi,
        noisy_err: noisy(clean_err),
        noisy_lo: noisy(clean_lo).min(noisy(clean_hi)),
        noisy_hi: noisy(clean_lo).max(noisy(clean_hi)),
    }
}

// ---------------------------------------------------------------------------
// Event-frequency Monte Carlo

/// Empirical holding frequency of one event with a Wilson 95% interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub name: String,
    pub count: usize,
    pub frequency: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Frequencies of the five events, their extended counterparts, the
/// trace-window event, and the two perturbation-bound coverage rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventMcReport {
    pub trials: usize,
    /// Trials that failed to produce a report (excluded from frequencies).
    pub failures: usize,
    pub rows: Vec<FrequencyRow>,
}

impl EventMcReport {
    pub fn row(&self, name: &str) -> Option<&FrequencyRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Monte Carlo frequencies of all events for one cell.
///
/// The two coverage rows check the derived perturbation budgets:
/// `perturbation_spectral` for the spectral norm against `T`, and
/// `perturbation_inverse_norms` for the inverse-square-norm shift against
/// `beta' rho`.
pub fn run_event_mc(
    spec: &ModelSpec,
    n: usize,
    trials: usize,
    master_seed: u64,
    delta: f64,
    delta_e1: f64,
    delta_e4: f64,
    c1: f64,
    c2: f64,
) -> Result<EventMcReport, ExperimentError> {
    if trials == 0 {
        return Err(ExperimentError::InvalidConfig("trials must be at least 1".into()));
    }
    let params = homogeneous_params(spec, n, delta, c1, c2)
        .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
    let tilde = derive_tilde_params(&params, spec, n, delta_e1, delta_e4)
        .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;

    const NAMES: [&str; 13] = [
        "E1",
        "E2",
        "E3",
        "E4",
        "E5",
        "tE1",
        "tE2",
        "tE3",
        "tE4",
        "tE5",
        "omega1",
        "perturbation_spectral",
        "perturbation_inverse_norms",
    ];
    let mut counts = [0usize; 13];
    let mut failures = 0usize;
    for t in 0..trials {
        let seed = mix_seed(master_seed, &[t as u64, STREAM_DATASET]);
        let ext = extend_dataset(sample_dataset(spec, n, seed));
        let report = match check_events(&ext, &params, &tilde) {
            Ok(r) => r,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        let pert = match measure_perturbation(&ext) {
            Ok(p) => p,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        let held = [
            report.e1,
            report.e2,
            report.e3,
            report.e4,
            report.e5,
            report.te1,
            report.te2,
            report.te3,
            report.te4,
            report.te5,
            report.omega1,
            pert.p_spec <= tilde.t_total,
            pert.b_pert <= tilde.beta_prime * params.rho,
        ];
        for (c, h) in counts.iter_mut().zip(held.iter()) {
            if *h {
                *c += 1;
            }
        }
    }

    let effective = trials - failures;
    if effective == 0 {
        return Err(ExperimentError::InvalidConfig(
            "every trial failed to produce an event report".into(),
        ));
    }
    let rows = NAMES
        .iter()
        .zip(counts.iter())
        .map(|(name, &count)| {
            let (lo, hi) = wilson_interval(count, effective);
            FrequencyRow {
                name: name.to_string(),
                count,
                frequency: count as f64 / effective as f64,
                lo,
                hi,
            }
        })
        .collect();
    Ok(EventMcReport {
        trials,
        failures,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Sweeps

/// Outcome class of one trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    NotSeparable,
    BudgetExceeded,
    /// Concentration parameters could not be derived for this cell.
    ParamDegenerate,
    /// The event or perturbation measurement failed to certify.
    EventDegenerate,
}

/// One row of the sweep results table. Field order is the CSV column
/// order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub cell_id: usize,
    pub n: usize,
    pub p: usize,
    pub mu_norm: f64,
    pub eta: f64,
    pub trial: usize,
    pub seed: u64,
    pub status: TrialStatus,
    pub eps_meas: Option<f64>,
    pub eps_tilde_meas: Option<f64>,
    #[serde(rename = "P_spec")]
    pub p_spec: Option<f64>,
    #[serde(rename = "P_frob")]
    pub p_frob: Option<f64>,
    #[serde(rename = "B_pert")]
    pub b_pert: Option<f64>,
    #[serde(rename = "E1")]
    pub e1: Option<bool>,
    #[serde(rename = "E2")]
    pub e2: Option<bool>,
    #[serde(rename = "E3")]
    pub e3: Option<bool>,
    #[serde(rename = "E4")]
    pub e4: Option<bool>,
    #[serde(rename = "E5")]
    pub e5: Option<bool>,
    #[serde(rename = "tE1")]
    pub te1: Option<bool>,
    #[serde(rename = "tE2")]
    pub te2: Option<bool>,
    #[serde(rename = "tE3")]
    pub te3: Option<bool>,
    #[serde(rename = "tE4")]
    pub te4: Option<bool>,
    #[serde(rename = "tE5")]
    pub te5: Option<bool>,
    pub omega1: Option<bool>,
    pub min_margin: Option<f64>,
    pub interpolated: Option<bool>,
    pub clean_err: Option<f64>,
    pub clean_err_lo: Option<f64>,
    pub clean_err_hi: Option<f64>,
    pub noisy_err: Option<f64>,
    pub bound_rhs: Option<f64>,
    pub thm_conditions_pass: Option<bool>,
}

impl TrialResult {
    fn blank(cell: &Cell, trial: usize, seed: u64) -> Self {
        TrialResult {
            cell_id: cell.cell_id,
            n: cell.n,
            p: cell.p,
            mu_norm: cell.mu_norm,
            eta: cell.eta,
            trial,
            seed,
            status: TrialStatus::Ok,
            eps_meas: None,
            eps_tilde_meas: None,
            p_spec: None,
            p_frob: None,
            b_pert: None,
            e1: None,
            e2: None,
            e3: None,
            e4: None,
            e5: None,
            te1: None,
            te2: None,
            te3: None,
            te4: None,
            te5: None,
            omega1: None,
            min_margin: None,
            interpolated: None,
            clean_err: None,
            clean_err_lo: None,
            clean_err_hi: None,
            noisy_err: None,
            bound_rhs: None,
            thm_conditions_pass: None,
        }
    }
}

/// Which classifier a trial trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TrialMode {
    /// Bias via the appended constant coordinate; events and condition
    /// reports are evaluated.
    Extended,
    /// Bias-free baseline on raw features; event columns stay empty.
    Homogeneous,
}

/// Runs one (cell, trial) unit: sample, measure events, train, estimate.
fn run_trial(
    config: &ExperimentConfig,
    cell: &Cell,
    spec: &ModelSpec,
    trial: usize,
    mode: TrialMode,
) -> TrialResult {
    let seed = mix_seed(
        config.master_seed,
        &[cell.cell_id as u64, trial as u64, STREAM_DATASET],
    );
    let mut out = TrialResult::blank(cell, trial, seed);
    let ext = extend_dataset(sample_dataset(spec, cell.n, seed));

    let mut event_status = None;
    if mode == TrialMode::Extended {
        // The perturbation measurement is a property of the dataset alone.
        match measure_perturbation(&ext) {
            Ok(p) => {
                out.p_spec = Some(p.p_spec);
                out.p_frob = Some(p.p_frob);
                out.b_pert = Some(p.b_pert);
            }
            Err(_) => event_status = Some(TrialStatus::EventDegenerate),
        }
        match homogeneous_params(
            spec,
            cell.n,
            config.delta,
            config.constants.c1,
            config.constants.c2,
        ) {
            Ok(params) => {
                // The error bound needs only the homogeneous parameters,
                // so it stays available when the extended thresholds
                // degenerate (large eps at small p).
                out.bound_rhs = Some(
                    error_bound_rhs(
                        BoundRegime::MarginBased,
                        spec,
                        cell.n,
                        &params,
                        config.constants.c,
                    )
                    .rhs,
                );
                match derive_tilde_params(&params, spec, cell.n, config.delta, config.delta) {
                    Ok(tilde) => {
                        let report = if cell.eta > 0.0 {
                            noisy_conditions(
                                spec,
                                cell.n,
                                config.delta,
                                &config.constants,
                                &params,
                                &tilde,
                            )
                        } else {
                            noiseless_intermediate_conditions(
                                spec,
                                cell.n,
                                config.delta,
                                &config.constants,
                                &params,
                                &tilde,
                            )
                        };
                        out.thm_conditions_pass = report.ok().map(|r| r.all_satisfied);
                        match check_events(&ext, &params, &tilde) {
                            Ok(rep) => {
                                out.eps_meas = Some(rep.eps_meas);
                                out.eps_tilde_meas = Some(rep.eps_tilde_meas);
                                out.e1 = Some(rep.e1);
                                out.e2 = Some(rep.e2);
                                out.e3 = Some(rep.e3);
                                out.e4 = Some(rep.e4);
                                out.e5 = Some(rep.e5);
                                out.te1 = Some(rep.te1);
                                out.te2 = Some(rep.te2);
                                out.te3 = Some(rep.te3);
                                out.te4 = Some(rep.te4);
                                out.te5 = Some(rep.te5);
                                out.omega1 = Some(rep.omega1);
                            }
                            Err(_) => event_status = Some(TrialStatus::EventDegenerate),
                        }
                    }
                    Err(_) => event_status = Some(TrialStatus::ParamDegenerate),
                }
            }
            Err(_) => event_status = Some(TrialStatus::ParamDegenerate),
        }
    }

    let solved = match mode {
        TrialMode::Extended => {
            hard_margin_oracle(&ext.x_ext, &ext.base.y_noisy, &SolverOptions::default())
        }
        TrialMode::Homogeneous => {
            hard_margin_homogeneous(&ext.base.x, &ext.base.y_noisy, &SolverOptions::default())
        }
    };
    let solver_status = match solved {
        Ok(sol) => {
            let stats = margin_stats(&sol, &ext);
            out.min_margin = Some(stats.min_margin);
            out.interpolated = Some(stats.interpolated);
            let test_seed = mix_seed(
                config.master_seed,
                &[cell.cell_id as u64, trial as u64, STREAM_TEST],
            );
            let est = estimate_test_error(&sol, spec, config.test_samples, test_seed);
            out.clean_err = Some(est.clean_err);
            out.clean_err_lo = Some(est.clean_lo);
            out.clean_err_hi = Some(est.clean_hi);
            out.noisy_err = Some(est.noisy_err);
            None
        }
        Err(MarginError::NotSeparable { .. }) => Some(TrialStatus::NotSeparable),
        Err(_) => Some(TrialStatus::BudgetExceeded),
    };
    out.status = solver_status.or(event_status).unwrap_or(TrialStatus::Ok);
    out
}

/// All rows produced by a sweep; `homogeneous_rows` is empty unless the
/// config enables the baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutput {
    pub rows: Vec<TrialResult>,
    pub homogeneous_rows: Vec<TrialResult>,
}

/// Runs the full grid. Work units are independent; results are collected
/// and sorted by `(cell_id, trial)`, so output is identical for any worker
/// count.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepOutput, ExperimentError> {
    config.validate()?;
    let cells = build_cells(config)?;
    let mut units = Vec::new();
    for (cell, spec) in &cells {
        for trial in 0..config.trials {
            units.push((cell, spec, trial));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
    let run = |mode: TrialMode| -> Vec<TrialResult> {
        let mut rows: Vec<TrialResult> = pool.install(|| {
            units
                .par_iter()
                .map(|(cell, spec, trial)| run_trial(config, cell, spec, *trial, mode))
                .collect()
        });
        rows.sort_by_key(|r| (r.cell_id, r.trial));
        rows
    };
    let rows = run(TrialMode::Extended);
    let homogeneous_rows = if config.homogeneous_baseline {
        run(TrialMode::Homogeneous)
    } else {
        Vec::new()
    };
    Ok(SweepOutput {
        rows,
        homogeneous_rows,
    })
}

// ---------------------------------------------------------------------------
// Persistence

const RESULT_COLUMNS: [&str; 32] = [
    "cell_id",
    "n",
    "p",
    "mu_norm",
    "eta",
    "trial",
    "seed",
    "status",
    "eps_meas",
    "eps_tilde_meas",
    "P_spec",
    "P_frob",
    "B_pert",
    "E1",
    "E2",
    "E3",
    "E4",
    "E5",
    "tE1",
    "tE2",
    "tE3",
    "tE4",
    "tE5",
    "omega1",
    "min_margin",
    "interpolated",
    "clean_err",
    "clean_err_lo",
    "clean_err_hi",
    "noisy_err",
    "bound_rhs",
    "thm_conditions_pass",
];

/// Serializes rows to CSV with the fixed column set; floats use the
/// shortest representation that parses back to the same bits.
pub fn results_to_csv_string(rows: &[TrialResult]) -> Result<String, ExperimentError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(RESULT_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| ExperimentError::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| ExperimentError::Csv(e.to_string()))
}

pub fn results_from_csv_str(text: &str) -> Result<Vec<TrialResult>, ExperimentError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn write_results_csv(rows: &[TrialResult], path: &Path) -> Result<(), ExperimentError> {
    std::fs::write(path, results_to_csv_string(rows)?)?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<TrialResult>, ExperimentError> {
    results_from_csv_str(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Reporting

/// Aggregates for one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell_id: usize,
    pub n: usize,
    pub p: usize,
    pub mu_norm: f64,
    pub eta: f64,
    pub trials: usize,
    /// Trials with status ok.
    pub solved: usize,
    /// Fraction of all trials whose solution fit every observed label.
    pub interpolation_rate: f64,
    pub median_clean_err: Option<f64>,
    /// Median of `clean_err - eta`.
    pub median_clean_excess: Option<f64>,
    pub median_bound_rhs: Option<f64>,
    /// `median_bound_rhs / median_clean_err`.
    pub rhs_over_empirical: Option<f64>,
    /// Fraction of condition-evaluated trials whose required conditions
    /// all passed.
    pub condition_pass_rate: Option<f64>,
    /// Median clean error of the bias-free baseline, when run.
    pub homogeneous_median_clean_err: Option<f64>,
    /// Extended-minus-homogeneous median clean error.
    pub clean_err_delta: Option<f64>,
}

/// Whole-sweep aggregate: one summary per cell, cells sorted by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<CellSummary>,
}

fn median(mut vals: Vec<f64>) -> Option<f64> {
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = vals.len();
    Some(if k % 2 == 1 {
        vals[k / 2]
    } else {
        0.5 * (vals[k / 2 - 1] + vals[k / 2])
    })
}

/// Builds per-cell aggregates; `homogeneous` adds baseline comparisons
/// when given.
pub fn build_report(
    rows: &[TrialResult],
    homogeneous: Option<&[TrialResult]>,
) -> Result<SweepReport, ExperimentError> {
    if rows.is_empty() {
        return Err(ExperimentError::EmptyInput);
    }
    let mut ids: Vec<usize> = rows.iter().map(|r| r.cell_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut cells = Vec::with_capacity(ids.len());
    for id in ids {
        let cell_rows: Vec<&TrialResult> = rows.iter().filter(|r| r.cell_id == id).collect();
        let first = cell_rows[0];
        let trials = cell_rows.len();
        let solved = cell_rows
            .iter()
            .filter(|r| r.status == TrialStatus::Ok)
            .count();
        let interpolated = cell_rows
            .iter()
            .filter(|r| r.interpolated == Some(true))
            .count();
        let med_clean = median(cell_rows.iter().filter_map(|r| r.clean_err).collect());
        let med_excess = median(
            cell_rows
                .iter()
                .filter_map(|r| r.clean_err.map(|e| e - r.eta))
                .collect(),
        );
        let med_rhs = median(cell_rows.iter().filter_map(|r| r.bound_rhs).collect());
        let ratio = match (med_rhs, med_clean) {
            (Some(r), Some(e)) if e > 0.0 => Some(r / e),
            _ => None,
        };
        let cond_evald = cell_rows
            .iter()
            .filter(|r| r.thm_conditions_pass.is_some())
            .count();
        let cond_pass = cell_rows
            .iter()
            .filter(|r| r.thm_conditions_pass == Some(true))
            .count();
        let hom_med = homogeneous.and_then(|h| {
            median(
                h.iter()
                    .filter(|r| r.cell_id == id)
                    .filter_map(|r| r.clean_err)
                    .collect(),
            )
        });
        cells.push(CellSummary {
            cell_id: id,
            n: first.n,
            p: first.p,
            mu_norm: first.mu_norm,
            eta: first.eta,
            trials,
            solved,
            interpolation_rate: interpolated as f64 / trials as f64,
            median_clean_err: med_clean,
            median_clean_excess: med_excess,
            median_bound_rhs: med_rhs,
            rhs_over_empirical: ratio,
            condition_pass_rate: if cond_evald > 0 {
                Some(cond_pass as f64 / cond_evald as f64)
            } else {
                None
            },
            homogeneous_median_clean_err: hom_med,
            clean_err_delta: match (med_clean, hom_med) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            },
        });
    }
    Ok(SweepReport { cells })
}

impl SweepReport {
    pub fn to_markdown(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| format!("{x:.5}")).unwrap_or_else(|| "-".into())
        }
        let mut out = String::from(
            "| cell | n | p | mu_norm | eta | trials | solved | interp | median clean err \
             | median excess | median rhs | rhs/empirical | cond pass | hom err | delta |\n",
        );
        out.push_str("|---|---|---|---|---|---|---|---|---|---|---|---|---|---|---|\n");
        for c in &self.cells {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} | {:.3} | {} | {} | {} | {} | {} | {} | {} |\n",
                c.cell_id,
                c.n,
                c.p,
                c.mu_norm,
                c.eta,
                c.trials,
                c.solved,
                c.interpolation_rate,
                opt(c.median_clean_err),
                opt(c.median_clean_excess),
                opt(c.median_bound_rhs),
                opt(c.rhs_over_empirical),
                opt(c.condition_pass_rate),
                opt(c.homogeneous_median_clean_err),
                opt(c.clean_err_delta),
            ));
        }
        out
    }

    /// Per-cell aggregates as CSV.
    pub fn to_csv_string(&self) -> Result<String, ExperimentError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.cells {
            w.serialize(c)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| ExperimentError::Csv(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| ExperimentError::Csv(e.to_string()))
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{GFamily, GSpec, XiFamily, XiSpec};
    use approx::assert_relative_eq;

    fn base_model(p: usize, mu: f64, eta: f64) -> ModelSpec {
        ModelSpec::with_mu_along_e1(
            mu,
            SigmaSpec::identity(p).unwrap(),
            GSpec::new(GFamily::ConstantOne, 2.0, 4.0).unwrap(),
            XiSpec::new(XiFamily::Rademacher, 4.0, 1.0).unwrap(),
            eta,
        )
        .unwrap()
    }

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            model: base_model(64, 1.0, 0.0),
            n_grid: vec![8],
            p_grid: vec![400],
            mu_norm_grid: vec![3.0],
            eta_grid: vec![0.1],
            trials: 1,
            test_samples: 2_000,
            master_seed: 7,
            workers: 1,
            constants: ConstantsConfig::default(),
            delta: 0.1,
            homogeneous_baseline: false,
            out_dir: None,
        }
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = tiny_config();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v.as_object_mut()
            .unwrap()
            .insert("bogus".into(), serde_json::json!(1));
        let res: Result<ExperimentConfig, _> = serde_json::from_value(v);
        assert!(res.is_err(), "unknown keys must be rejected");
        // Optional fields fall back to defaults.
        let minimal = serde_json::json!({
            "model": serde_json::to_value(&cfg.model).unwrap(),
            "n_grid": [4],
            "p_grid": [64],
            "mu_norm_grid": [1.0],
            "eta_grid": [0.0],
            "trials": 2,
            "master_seed": 1,
        });
        let parsed: ExperimentConfig = serde_json::from_value(minimal).unwrap();
        assert_eq!(parsed.test_samples, 100_000);
        assert_eq!(parsed.workers, 1);
        assert_eq!(parsed.delta, 0.1);
        assert!(!parsed.homogeneous_baseline);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = tiny_config();
        cfg.trials = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.eta_grid = vec![0.5];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.workers = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.test_samples = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cells_enumerate_in_cartesian_order() {
        let mut cfg = tiny_config();
        cfg.n_grid = vec![4, 8];
        cfg.p_grid = vec![16, 32];
        cfg.mu_norm_grid = vec![1.0];
        cfg.eta_grid = vec![0.0, 0.1];
        let cells = build_cells(&cfg).unwrap();
        assert_eq!(cells.len(), 8);
        let ids: Vec<usize> = cells.iter().map(|(c, _)| c.cell_id).collect();
        assert_eq!(ids, (0..8).collect::<Vec<_>>());
        // eta varies fastest, then mu, then p, then n.
        assert_eq!((cells[0].0.n, cells[0].0.p, cells[0].0.eta), (4, 16, 0.0));
        assert_eq!((cells[1].0.n, cells[1].0.p, cells[1].0.eta), (4, 16, 0.1));
        assert_eq!((cells[2].0.n, cells[2].0.p, cells[2].0.eta), (4, 32, 0.0));
        assert_eq!((cells[4].0.n, cells[4].0.p, cells[4].0.eta), (8, 16, 0.0));
        // Each cell's model matches its coordinates.
        for (cell, spec) in &cells {
            assert_eq!(spec.p(), cell.p);
            assert_eq!(spec.eta(), cell.eta);
            assert_relative_eq!(spec.mu_norm(), cell.mu_norm, epsilon = 1e-12);
        }
    }

    #[test]
    fn diagonal_template_cannot_resize() {
        let mut cfg = tiny_config();
        cfg.model = ModelSpec::with_mu_along_e1(
            1.0,
            SigmaSpec::diagonal(vec![1.0, 2.0]).unwrap(),
            GSpec::new(GFamily::ConstantOne, 2.0, 4.0).unwrap(),
            XiSpec::new(XiFamily::Rademacher, 4.0, 1.0).unwrap(),
            0.0,
        )
        .unwrap();
        cfg.p_grid = vec![2];
        cfg.validate().unwrap();
        cfg.p_grid = vec![3];
        assert!(matches!(
            cfg.validate(),
            Err(ExperimentError::InvalidConfig(_))
        ));
    }

    #[test]
    fn wilson_interval_basic_properties() {
        for &(k, m) in &[(0usize, 100usize), (5, 100), (50, 100), (100, 100)] {
            let (lo, hi) = wilson_interval(k, m);
            let ph = k as f64 / m as f64;
            assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
            assert!(lo <= ph && ph <= hi, "interval must contain the estimate");
        }
        // Width shrinks like m^{-1/2}.
        let (lo1, hi1) = wilson_interval(200, 1_000);
        let (lo2, hi2) = wilson_interval(20_000, 100_000);
        let ratio = (hi1 - lo1) / (hi2 - lo2);
        assert!((8.0..12.5).contains(&ratio), "width ratio {ratio}");
    }

    #[test]
    fn orthogonal_direction_gives_half_error() {
        let spec = base_model(32, 2.0, 0.0);
        let mut w = vec![0.0; 32];
        w[1] = 1.0;
        let sol = Solution {
            w,
            b: 0.0,
            alpha: vec![],
            support: vec![],
            min_margin: 0.0,
            objective: 1.0,
            kkt_violation: 0.0,
            steps: 0,
        };
        let est = estimate_test_error(&sol, &spec, 100_000, 99);
        assert!(
            est.clean_lo <= 0.5 && 0.5 <= est.clean_hi,
            "symmetric direction must sit at even odds: [{}, {}]",
            est.clean_lo,
            est.clean_hi
        );
    }

    #[test]
    fn gaussian_noise_matches_tail_oracle() {
        // With w~ = (mu, 0), ||mu|| = 2, identity covariance, unit scale and
        // Gaussian coordinates, the clean margin is 4 + 2 N(0,1), so the
        // error is Phi(-2).
        let spec = ModelSpec::with_mu_along_e1(
            2.0,
            SigmaSpec::identity(6).unwrap(),
            GSpec::new(GFamily::ConstantOne, 2.0, 4.0).unwrap(),
            XiSpec::new(XiFamily::Gaussian, 4.0, 3.0).unwrap(),
            0.0,
        )
        .unwrap();
        let mut w = vec![0.0; 6];
        w[0] = 2.0;
        let sol = Solution {
            w,
            b: 0.0,
            alpha: vec![],
            support: vec![],
            min_margin: 0.0,
            objective: 4.0,
            kkt_violation: 0.0,
            steps: 0,
        };
        let m = 1_000_000;
        let est = estimate_test_error(&sol, &spec, m, 1234);
        let phi2 = 0.022750131948179195;
        let se = (phi2 * (1.0 - phi2) / m as f64).sqrt();
        assert!(
            (est.clean_err - phi2).abs() <= 3.0 * se,
            "estimate {} vs oracle {phi2} (3 se = {})",
            est.clean_err,
            3.0 * se
        );
    }

    #[test]
    fn flip_identity_is_exact_on_shared_samples() {
        let spec = base_model(16, 1.5, 0.2);
        let mut w = vec![0.0; 16];
        w[0] = 1.0;
        w[3] = -0.5;
        let sol = Solution {
            w,
            b: 0.25,
            alpha: vec![],
            support: vec![],
            min_margin: 0.0,
            objective: 1.0,
            kkt_violation: 0.0,
            steps: 0,
        };
        let est = estimate_test_error(&sol, &spec, 10_000, 5);
        let e = est.clean_err;
        assert_eq!(est.noisy_err, 0.8 * e + 0.2 * (1.0 - e));
        assert!(est.noisy_lo <= est.noisy_err && est.noisy_err <= est.noisy_hi);
        assert!(est.noisy_lo >= 0.0 && est.noisy_hi <= 1.0);
    }

    #[test]
    fn event_mc_rejects_zero_trials_and_handles_n1() {
        let spec = base_model(10_000, 1.0, 0.0);
        assert!(matches!(
            run_event_mc(&spec, 1, 0, 1, 0.25, 0.25, 0.25, 1.0, 1.0),
            Err(ExperimentError::InvalidConfig(_))
        ));
        let rep = run_event_mc(&spec, 1, 5, 1, 0.25, 0.25, 0.25, 1.0, 1.0).unwrap();
        assert_eq!(rep.failures, 0);
        // A single point has an empty off-diagonal, so the normalized Gram
        // deviation is 0 and the event holds always.
        let e1 = rep.row("E1").unwrap();
        assert_eq!(e1.frequency, 1.0);
        assert_eq!(e1.count, 5);
        assert!(rep.row("perturbation_spectral").is_some());
        assert!(rep.row("perturbation_inverse_norms").is_some());
        for row in &rep.rows {
            assert!(row.lo <= row.frequency && row.frequency <= row.hi);
        }
    }

    #[test]
    fn sweep_empty_grid_gives_header_only_csv() {
        let mut cfg = tiny_config();
        cfg.n_grid = vec![];
        let out = run_sweep(&cfg).unwrap();
        assert!(out.rows.is_empty());
        let csv = results_to_csv_string(&out.rows).unwrap();
        assert_eq!(
            csv,
            format!("{}\n", RESULT_COLUMNS.join(",")),
            "empty sweep must emit exactly the header"
        );
        assert!(csv.starts_with("cell_id,n,p,mu_norm,eta,trial,seed,status,eps_meas"));
    }

    #[test]
    fn sweep_single_unit_produces_one_complete_row() {
        let cfg = tiny_config();
        let out = run_sweep(&cfg).unwrap();
        assert_eq!(out.rows.len(), 1);
        let r = &out.rows[0];
        assert_eq!(r.status, TrialStatus::Ok);
        assert_eq!((r.cell_id, r.trial), (0, 0));
        assert_eq!(r.seed, mix_seed(7, &[0, 0, STREAM_DATASET]));
        assert!(r.interpolated == Some(true));
        let e = r.clean_err.unwrap();
        assert!((0.0..=1.0).contains(&e));
        assert!(r.clean_err_lo.unwrap() <= e && e <= r.clean_err_hi.unwrap());
        assert!(r.eps_meas.is_some() && r.p_spec.is_some() && r.bound_rhs.is_some());
        assert!(r.e1.is_some() && r.te5.is_some() && r.omega1.is_some());
    }

    #[test]
    fn sweep_is_worker_count_invariant() {
        let mut cfg = tiny_config();
        cfg.n_grid = vec![6];
        cfg.p_grid = vec![200, 400];
        cfg.trials = 3;
        cfg.test_samples = 500;
        let a = run_sweep(&cfg).unwrap();
        cfg.workers = 8;
        let b = run_sweep(&cfg).unwrap();
        assert_eq!(a.rows, b.rows);
        let ca = results_to_csv_string(&a.rows).unwrap();
        let cb = results_to_csv_string(&b.rows).unwrap();
        assert_eq!(ca, cb, "worker count must not change output bytes");
        assert_eq!(a.rows.len(), 6);
    }

    #[test]
    fn homogeneous_baseline_produces_parallel_rows() {
        let mut cfg = tiny_config();
        cfg.homogeneous_baseline = true;
        let out = run_sweep(&cfg).unwrap();
        assert_eq!(out.homogeneous_rows.len(), out.rows.len());
        let h = &out.homogeneous_rows[0];
        assert_eq!(h.status, TrialStatus::Ok);
        assert!(h.clean_err.is_some());
        // Event columns are reserved for the extended classifier.
        assert!(h.eps_meas.is_none() && h.bound_rhs.is_none());
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let cell = Cell {
            cell_id: 3,
            n: 10,
            p: 100,
            mu_norm: 0.1 + 0.2,
            eta: 0.15,
        };
        let mut full = TrialResult::blank(&cell, 2, 987654321);
        full.eps_meas = Some(1.0 / 3.0);
        full.eps_tilde_meas = Some(3.141592653589793e-17);
        full.p_spec = Some(2.2250738585072014e-308);
        full.e1 = Some(true);
        full.te3 = Some(false);
        full.min_margin = Some(-0.9999999999999999);
        full.interpolated = Some(false);
        full.clean_err = Some(0.1);
        full.bound_rhs = Some(123456.78901234567);
        full.thm_conditions_pass = Some(true);
        let failed = TrialResult {
            status: TrialStatus::NotSeparable,
            ..TrialResult::blank(&cell, 3, 17)
        };
        let rows = vec![full, failed];
        let text = results_to_csv_string(&rows).unwrap();
        let back = results_from_csv_str(&text).unwrap();
        assert_eq!(rows, back);
    }

    #[test]
    fn report_medians_and_empty_input() {
        assert!(matches!(
            build_report(&[], None),
            Err(ExperimentError::EmptyInput)
        ));
        let cell = Cell {
            cell_id: 0,
            n: 4,
            p: 8,
            mu_norm: 1.0,
            eta: 0.1,
        };
        let mut a = TrialResult::blank(&cell, 0, 1);
        a.clean_err = Some(0.1);
        a.interpolated = Some(true);
        a.bound_rhs = Some(0.4);
        a.thm_conditions_pass = Some(false);
        let rep = build_report(&[a.clone()], None).unwrap();
        assert_eq!(rep.cells.len(), 1);
        let c = &rep.cells[0];
        assert_eq!(c.median_clean_err, Some(0.1));
        assert_relative_eq!(c.median_clean_excess.unwrap(), 0.0, epsilon = 1e-15);
        assert_eq!(c.condition_pass_rate, Some(0.0));
        assert_eq!(c.rhs_over_empirical, Some(4.0));
        // Two rows: median is the midpoint.
        let mut b = TrialResult::blank(&cell, 1, 2);
        b.clean_err = Some(0.3);
        b.interpolated = Some(false);
        let rep = build_report(&[a, b], None).unwrap();
        let c = &rep.cells[0];
        assert_relative_eq!(c.median_clean_err.unwrap(), 0.2, epsilon = 1e-15);
        assert_eq!(c.interpolation_rate, 0.5);
        let md = rep.to_markdown();
        assert!(md.contains("median clean err") && md.contains("| 0 |"));
        assert!(rep.to_csv_string().unwrap().contains("cell_id"));
    }

    #[test]
    fn report_homogeneous_deltas() {
        let cell = Cell {
            cell_id: 0,
            n: 4,
            p: 8,
            mu_norm: 1.0,
            eta: 0.0,
        };
        let mut a = TrialResult::blank(&cell, 0, 1);
        a.clean_err = Some(0.2);
        let mut h = TrialResult::blank(&cell, 0, 1);
        h.clean_err = Some(0.05);
        let rep = build_report(&[a], Some(&[h])).unwrap();
        let c = &rep.cells[0];
        assert_eq!(c.homogeneous_median_clean_err, Some(0.05));
        assert_relative_eq!(c.clean_err_delta.unwrap(), 0.15, epsilon = 1e-15);
    }

    #[test]
    fn wilson_width_scales_with_inverse_sqrt_m() {
        // Same underlying rate at two m values a factor 100 apart.
        let spec = base_model(8, 1.0, 0.0);
        let mut w = vec![0.0; 8];
        w[1] = 1.0;
        let sol = Solution {
            w,
            b: 0.0,
            alpha: vec![],
            support: vec![],
            min_margin: 0.0,
            objective: 1.0,
            kkt_violation: 0.0,
            steps: 0,
        };
        let small = estimate_test_error(&sol, &spec, 1_000, 42);
        let large = estimate_test_error(&sol, &spec, 100_000, 42);
        let ratio = (small.clean_hi - small.clean_lo) / (large.clean_hi - large.clean_lo);
        assert!(
            (8.0..12.5).contains(&ratio),
            "widths should scale by about 10, got {ratio}"
        );
    }
}
