//! Python bindings for the core simulation library.
//!
//! The surface is deliberately thin: the handles people iterate with
//! ([`Model`], [`Dataset`], [`Solution`]) are proper classes, while report
//! and parameter records cross the boundary as JSON strings that
//! `json.loads` turns into plain dicts. Every JSON schema is identical to
//! the one the CLI and the CSV/config files use.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyAny;
use serde_json::json;

use benign_core::events;
use benign_core::experiments;
use benign_core::maxmargin;
use benign_core::rng;
use benign_core::sampler;
use benign_core::theory;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(err)
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| err(format!("invalid {what} JSON: {e}")))
}

fn constants_from(text: Option<&str>) -> PyResult<theory::ConstantsConfig> {
    match text {
        Some(t) => parse("constants", t),
        None => Ok(theory::ConstantsConfig::default()),
    }
}

/// Generative model: `x = y mu + g Sigma^{1/2} xi`, labels flipped with
/// probability `eta`.
#[pyclass(module = "benign", skip_from_py_object)]
#[derive(Clone)]
struct Model {
    inner: sampler::ModelSpec,
}

#[pymethods]
impl Model {
    /// Parses the same JSON object the experiment config embeds under
    /// `"model"`: `{"mu": [...], "sigma": {...}, "g": {...}, "xi": {...},
    /// "eta": ...}`.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Model {
            inner: parse("model", text)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.inner)
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn eta(&self) -> f64 {
        self.inner.eta()
    }

    #[getter]
    fn mu(&self) -> Vec<f64> {
        self.inner.mu().to_vec()
    }

    #[getter]
    fn mu_norm(&self) -> f64 {
        self.inner.mu_norm()
    }

    /// `E[g^{-2}] / Tr(Sigma)`, the inverse-norm scale of the noise.
    #[getter]
    fn rho(&self) -> f64 {
        self.inner.rho()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(p={}, mu_norm={:.6}, eta={})",
            self.inner.p(),
            self.inner.mu_norm(),
            self.inner.eta()
        )
    }
}

/// A sampled training set, with the internal noise factors kept for event
/// diagnostics.
#[pyclass(module = "benign", skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: sampler::Dataset,
}

impl Dataset {
    fn extended(&self) -> sampler::ExtendedDataset {
        sampler::extend_dataset(self.inner.clone())
    }
}

#[pymethods]
impl Dataset {
    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn model(&self) -> Model {
        Model {
            inner: self.inner.spec.clone(),
        }
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        self.inner.x.clone()
    }

    /// Feature rows with the constant coordinate 1 appended.
    #[getter]
    fn x_extended(&self) -> Vec<Vec<f64>> {
        self.inner
            .x
            .iter()
            .map(|row| {
                let mut ext = row.clone();
                ext.push(1.0);
                ext
            })
            .collect()
    }

    /// Noise rows `z_i = g_i Sigma^{1/2} xi_i`.
    #[getter]
    fn z(&self) -> Vec<Vec<f64>> {
        self.inner.z.clone()
    }

    #[getter]
    fn y_clean(&self) -> Vec<f64> {
        self.inner.y.clone()
    }

    #[getter]
    fn y_noisy(&self) -> Vec<f64> {
        self.inner.y_noisy.clone()
    }

    #[getter]
    fn flipped_indices(&self) -> Vec<usize> {
        self.inner.flipped_indices()
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, p={}, seed={}, flipped={})",
            self.inner.n,
            self.inner.p(),
            self.inner.seed,
            self.inner.flipped_indices().len()
        )
    }
}

/// A trained margin classifier: prediction is `sign(<w, x> + b)`.
#[pyclass(module = "benign", skip_from_py_object)]
#[derive(Clone)]
struct Solution {
    inner: maxmargin::Solution,
}

#[pymethods]
impl Solution {
    #[getter]
    fn w(&self) -> Vec<f64> {
        self.inner.w.clone()
    }

    #[getter]
    fn b(&self) -> f64 {
        self.inner.b
    }

    /// `(w, b)` as one extended vector.
    fn w_tilde(&self) -> Vec<f64> {
        self.inner.w_tilde()
    }

    #[getter]
    fn alpha(&self) -> Vec<f64> {
        self.inner.alpha.clone()
    }

    #[getter]
    fn support(&self) -> Vec<usize> {
        self.inner.support.clone()
    }

    #[getter]
    fn min_margin(&self) -> f64 {
        self.inner.min_margin
    }

    /// `||w~||^2`, the hard-margin objective.
    #[getter]
    fn objective(&self) -> f64 {
        self.inner.objective
    }

    #[getter]
    fn kkt_violation(&self) -> f64 {
        self.inner.kkt_violation
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Solution(dim={}, objective={:.6}, support={}, kkt={:.2e})",
            self.inner.w.len(),
            self.inner.objective,
            self.inner.support.len(),
            self.inner.kkt_violation
        )
    }
}

/// Draws `n` samples from `model`. Identical `(model, n, seed)` always
/// reproduce an identical dataset.
#[pyfunction]
fn sample(model: &Model, n: usize, seed: u64) -> PyResult<Dataset> {
    if n == 0 {
        return Err(err("n must be at least 1"));
    }
    Ok(Dataset {
        inner: sampler::sample_dataset(&model.inner, n, seed),
    })
}

/// Minimum-norm separator of extended rows (last coordinate is the bias
/// column): dual coordinate ascent certified by KKT conditions.
#[pyfunction]
fn hard_margin(x_ext: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<Solution> {
    let sol = maxmargin::hard_margin_oracle(&x_ext, &y, &maxmargin::SolverOptions::default())
        .map_err(err)?;
    Ok(Solution { inner: sol })
}

/// Same solver without a bias column: the separator passes through the
/// origin.
#[pyfunction]
fn hard_margin_homogeneous(x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<Solution> {
    let sol = maxmargin::hard_margin_homogeneous(&x, &y, &maxmargin::SolverOptions::default())
        .map_err(err)?;
    Ok(Solution { inner: sol })
}

fn parse_loss(name: &str) -> PyResult<maxmargin::Loss> {
    match name {
        "exponential" => Ok(maxmargin::Loss::Exponential),
        "logistic" => Ok(maxmargin::Loss::Logistic),
        other => Err(err(format!(
            "loss must be 'exponential' or 'logistic', got '{other}'"
        ))),
    }
}

fn parse_step(step: &Bound<'_, PyAny>) -> PyResult<maxmargin::StepRule> {
    if let Ok(v) = step.extract::<f64>() {
        return Ok(maxmargin::StepRule::Constant(v));
    }
    match step.extract::<&str>()? {
        "inverse_max_norm_sq" => Ok(maxmargin::StepRule::InverseMaxNormSq),
        "loss_normalized" => Ok(maxmargin::StepRule::LossNormalized),
        other => Err(err(format!(
            "step must be 'inverse_max_norm_sq', 'loss_normalized' or a float, got '{other}'"
        ))),
    }
}

/// Full-batch gradient descent on extended rows. Returns a JSON record with
/// the final iterate, loss, step count, cosine to `reference` (when given)
/// and the logged trace as CSV.
#[pyfunction]
#[pyo3(signature = (x_ext, y, loss="exponential", step=None, budget=1_000_000, early_stop_cosine=0.9999, reference=None))]
fn gd_train(
    x_ext: Vec<Vec<f64>>,
    y: Vec<f64>,
    loss: &str,
    step: Option<&Bound<'_, PyAny>>,
    budget: usize,
    early_stop_cosine: Option<f64>,
    reference: Option<Vec<f64>>,
) -> PyResult<String> {
    let opts = maxmargin::GdOptions {
        loss: parse_loss(loss)?,
        step: match step {
            Some(s) => parse_step(s)?,
            None => maxmargin::StepRule::LossNormalized,
        },
        budget,
        early_stop_cosine,
    };
    let out = maxmargin::gd_train(&x_ext, &y, &opts, reference.as_deref()).map_err(err)?;
    let value = json!({
        "w": out.w,
        "b": out.b,
        "final_loss": out.final_loss,
        "final_cosine": out.final_cosine,
        "converged_in_direction": out.converged_in_direction,
        "steps": out.steps,
        "trace_csv": out.trace.to_csv_string(),
    });
    serde_json::to_string(&value).map_err(err)
}

/// Fit summary of `solution` on `dataset` (JSON): minimum observed-label
/// margin, interpolation flag, fraction of flipped samples fit.
#[pyfunction]
fn margin_stats(solution: &Solution, dataset: &Dataset) -> PyResult<String> {
    let ext = dataset.extended();
    to_json(&maxmargin::margin_stats(&solution.inner, &ext))
}

/// Monte Carlo clean and noisy test error of `solution` under `model`, with
/// Wilson 95% intervals (JSON).
#[pyfunction]
fn estimate_test_error(solution: &Solution, model: &Model, m: usize, seed: u64) -> PyResult<String> {
    if m == 0 {
        return Err(err("m must be at least 1"));
    }
    if solution.inner.w.len() != model.inner.p() {
        return Err(err(format!(
            "solution dimension {} does not match model dimension {}",
            solution.inner.w.len(),
            model.inner.p()
        )));
    }
    to_json(&experiments::estimate_test_error(
        &solution.inner,
        &model.inner,
        m,
        seed,
    ))
}

/// Closed-form event thresholds for the original (bias-free) sample
/// geometry at failure probability `delta` (JSON).
#[pyfunction]
#[pyo3(signature = (model, n, delta, c1=1.0, c2=1.0))]
fn event_params(model: &Model, n: usize, delta: f64, c1: f64, c2: f64) -> PyResult<String> {
    to_json(&events::homogeneous_params(&model.inner, n, delta, c1, c2).map_err(err)?)
}

/// Thresholds after the constant coordinate is appended, derived from
/// `params` by the explicit perturbation budgets (JSON).
#[pyfunction]
fn tilde_params(
    params_json: &str,
    model: &Model,
    n: usize,
    delta_e1: f64,
    delta_e4: f64,
) -> PyResult<String> {
    let params: events::EventParams = parse("params", params_json)?;
    to_json(&events::derive_tilde_params(&params, &model.inner, n, delta_e1, delta_e4).map_err(err)?)
}

/// Evaluates the five concentration events and their extended counterparts
/// on one dataset (JSON).
#[pyfunction]
fn check_events(dataset: &Dataset, params_json: &str, tilde_json: &str) -> PyResult<String> {
    let params: events::EventParams = parse("params", params_json)?;
    let tilde: events::TildeParams = parse("tilde", tilde_json)?;
    let ext = dataset.extended();
    to_json(&events::check_events(&ext, &params, &tilde).map_err(err)?)
}

/// Measured spectral and inverse-norm perturbation of the normalized Gram
/// matrix caused by the appended coordinate (JSON).
#[pyfunction]
fn measure_perturbation(dataset: &Dataset) -> PyResult<String> {
    to_json(&events::measure_perturbation(&dataset.extended()).map_err(err)?)
}

/// Monte Carlo frequencies of all events over independent datasets, with
/// Wilson intervals per event (JSON).
#[pyfunction]
#[pyo3(signature = (model, n, trials, master_seed, delta, delta_e1, delta_e4, c1=1.0, c2=1.0))]
#[allow(clippy::too_many_arguments)]
fn event_mc(
    model: &Model,
    n: usize,
    trials: usize,
    master_seed: u64,
    delta: f64,
    delta_e1: f64,
    delta_e4: f64,
    c1: f64,
    c2: f64,
) -> PyResult<String> {
    to_json(
        &experiments::run_event_mc(
            &model.inner,
            n,
            trials,
            master_seed,
            delta,
            delta_e1,
            delta_e4,
            c1,
            c2,
        )
        .map_err(err)?,
    )
}

fn report_json(report: theory::TheoremReport) -> PyResult<String> {
    let value = json!({
        "report": report,
        "markdown": report.to_markdown(),
    });
    serde_json::to_string(&value).map_err(err)
}

/// Checks the clean-label intermediate-signal regime conditions (JSON:
/// `{"report": ..., "markdown": ...}`).
#[pyfunction]
#[pyo3(signature = (model, n, delta, params_json, tilde_json, constants_json=None))]
fn noiseless_intermediate_conditions(
    model: &Model,
    n: usize,
    delta: f64,
    params_json: &str,
    tilde_json: &str,
    constants_json: Option<&str>,
) -> PyResult<String> {
    let params: events::EventParams = parse("params", params_json)?;
    let tilde: events::TildeParams = parse("tilde", tilde_json)?;
    let constants = constants_from(constants_json)?;
    report_json(
        theory::noiseless_intermediate_conditions(&model.inner, n, delta, &constants, &params, &tilde)
            .map_err(err)?,
    )
}

/// Checks the clean-label large-signal regime conditions (JSON).
#[pyfunction]
#[pyo3(signature = (model, n, delta, constants_json=None))]
fn noiseless_large_signal_conditions(
    model: &Model,
    n: usize,
    delta: f64,
    constants_json: Option<&str>,
) -> PyResult<String> {
    let constants = constants_from(constants_json)?;
    report_json(
        theory::noiseless_large_signal_conditions(&model.inner, n, delta, &constants).map_err(err)?,
    )
}

/// Checks the noisy-label regime conditions (JSON).
#[pyfunction]
#[pyo3(signature = (model, n, delta, params_json, tilde_json, constants_json=None))]
fn noisy_conditions(
    model: &Model,
    n: usize,
    delta: f64,
    params_json: &str,
    tilde_json: &str,
    constants_json: Option<&str>,
) -> PyResult<String> {
    let params: events::EventParams = parse("params", params_json)?;
    let tilde: events::TildeParams = parse("tilde", tilde_json)?;
    let constants = constants_from(constants_json)?;
    report_json(
        theory::noisy_conditions(&model.inner, n, delta, &constants, &params, &tilde).map_err(err)?,
    )
}

/// Evaluates the test-error upper bound for a regime in
/// `{"margin_based", "large_signal", "isotropic_simplified"}` (JSON:
/// `{"bound": ..., "markdown": ...}`).
#[pyfunction]
#[pyo3(signature = (regime, model, n, params_json, c=1.0))]
fn error_bound_rhs(
    regime: &str,
    model: &Model,
    n: usize,
    params_json: &str,
    c: f64,
) -> PyResult<String> {
    let regime: theory::BoundRegime =
        serde_json::from_value(json!(regime)).map_err(|e| err(format!("invalid regime: {e}")))?;
    let params: events::EventParams = parse("params", params_json)?;
    let bound = theory::error_bound_rhs(regime, &model.inner, n, &params, c);
    let value = json!({
        "bound": bound,
        "markdown": bound.to_markdown(),
    });
    serde_json::to_string(&value).map_err(err)
}

/// Exponent arithmetic of the isotropic specialization; `l` may be
/// `float("inf")` (JSON).
#[pyfunction]
fn isotropic_exponents(r: f64, k: f64, l: f64) -> PyResult<String> {
    to_json(&theory::isotropic_exponents(r, k, l).map_err(err)?)
}

/// Raw dominance margin `8/r - 2/k + 1/l - 1/2` without range checks.
#[pyfunction]
fn dominance_margin(r: f64, k: f64, l: f64) -> f64 {
    theory::dominance_margin(r, k, l)
}

/// The factors whose maximum the scale bound `M` must dominate (JSON).
#[pyfunction]
fn m_factors(params_json: &str, model: &Model, n: usize, delta: f64) -> PyResult<String> {
    let params: events::EventParams = parse("params", params_json)?;
    to_json(&theory::m_ge_one_check(
        &params,
        model.inner.g(),
        model.inner.sigma().trace(),
        n,
        delta,
    ))
}

/// Runs the full experiment grid described by a config JSON document.
/// Returns `(results_csv, homogeneous_csv)`; the second element is `None`
/// unless the config sets `homogeneous_baseline`.
#[pyfunction]
fn run_sweep(config_json: &str) -> PyResult<(String, Option<String>)> {
    let config: experiments::ExperimentConfig = parse("config", config_json)?;
    let out = experiments::run_sweep(&config).map_err(err)?;
    let results = experiments::results_to_csv_string(&out.rows).map_err(err)?;
    let homogeneous = if out.homogeneous_rows.is_empty() {
        None
    } else {
        Some(experiments::results_to_csv_string(&out.homogeneous_rows).map_err(err)?)
    };
    Ok((results, homogeneous))
}

fn parse_results(
    results_csv: &str,
    homogeneous_csv: Option<&str>,
) -> PyResult<experiments::SweepReport> {
    let rows = experiments::results_from_csv_str(results_csv).map_err(err)?;
    let baseline = homogeneous_csv
        .map(experiments::results_from_csv_str)
        .transpose()
        .map_err(err)?;
    experiments::build_report(&rows, baseline.as_deref()).map_err(err)
}

/// Per-cell summary of a results CSV as a Markdown table.
#[pyfunction]
#[pyo3(signature = (results_csv, homogeneous_csv=None))]
fn report_markdown(results_csv: &str, homogeneous_csv: Option<&str>) -> PyResult<String> {
    Ok(parse_results(results_csv, homogeneous_csv)?.to_markdown())
}

/// Per-cell summary of a results CSV as CSV.
#[pyfunction]
#[pyo3(signature = (results_csv, homogeneous_csv=None))]
fn report_csv(results_csv: &str, homogeneous_csv: Option<&str>) -> PyResult<String> {
    parse_results(results_csv, homogeneous_csv)?
        .to_csv_string()
        .map_err(err)
}

/// Splitmix-based seed derivation used by the sweep: the dataset seed of
/// `(cell, trial)` is `mix_seed(master, [cell_id, trial, 0])` and the test
/// stream uses final part `1`.
#[pyfunction]
fn mix_seed(master: u64, parts: Vec<u64>) -> u64 {
    rng::mix_seed(master, &parts)
}

#[pymodule]
fn benign(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Model>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Solution>()?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(hard_margin, m)?)?;
    m.add_function(wrap_pyfunction!(hard_margin_homogeneous, m)?)?;
    m.add_function(wrap_pyfunction!(gd_train, m)?)?;
    m.add_function(wrap_pyfunction!(margin_stats, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_test_error, m)?)?;
    m.add_function(wrap_pyfunction!(event_params, m)?)?;
    m.add_function(wrap_pyfunction!(tilde_params, m)?)?;
    m.add_function(wrap_pyfunction!(check_events, m)?)?;
    m.add_function(wrap_pyfunction!(measure_perturbation, m)?)?;
    m.add_function(wrap_pyfunction!(event_mc, m)?)?;
    m.add_function(wrap_pyfunction!(noiseless_intermediate_conditions, m)?)?;
    m.add_function(wrap_pyfunction!(noiseless_large_signal_conditions, m)?)?;
    m.add_function(wrap_pyfunction!(noisy_conditions, m)?)?;
    m.add_function(wrap_pyfunction!(error_bound_rhs, m)?)?;
    m.add_function(wrap_pyfunction!(isotropic_exponents, m)?)?;
    m.add_function(wrap_pyfunction!(dominance_margin, m)?)?;
    m.add_function(wrap_pyfunction!(m_factors, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(report_markdown, m)?)?;
    m.add_function(wrap_pyfunction!(report_csv, m)?)?;
    m.add_function(wrap_pyfunction!(mix_seed, m)?)?;
    Ok(())
}
