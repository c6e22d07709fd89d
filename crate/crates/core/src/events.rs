//! Concentration events for the noise geometry, before and after appending
//! the bias coordinate.
//!
//! Five quantities of a noise sample cloud are tracked:
//!
//! 1. near-orthogonality of normalized rows, through the spectral deviation
//!    of the normalized Gram matrix from the identity;
//! 2. alignment between normalized noise and the signal direction, in the
//!    Euclidean and the max norm;
//! 3. the largest noise norm;
//! 4. concentration of the mean inverse squared norm around its proxy
//!    `rho = E[g^-2] / Tr(Sigma)`;
//! 5. the same mean weighted by clean times observed label, which
//!    concentrates around `(1 - 2 eta) rho`.
//!
//! Appending the constant coordinate perturbs all five; the `tilde_*`
//! functions compute closed-form budgets for how much, and
//! [`measure_perturbation`] measures the actual Gram perturbation matrix so
//! those budgets can be checked empirically.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, max_abs, norm, norm_sq, spectral_norm_sym, SymMat, SPECTRAL_MAX_ITER, SPECTRAL_TOL};
use crate::sampler::{ExtendedDataset, ModelSpec};

#[derive(Debug, Error)]
pub enum EventsError {
    #[error("noise row {index} has zero norm")]
    ZeroNormRow { index: usize },
    #[error("spectral estimate did not certify within budget; best value {best}")]
    NoConvergence { best: f64 },
    #[error("degenerate denominator: eps = {eps} must lie below 4")]
    DegenerateDenominator { eps: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// Event thresholds for the plain (pre-extension) noise.
///
/// `rho = E[g^-2] / Tr(Sigma)` is the concentration center for the
/// inverse-norm statistics. `c1` scales the Gram deviation `eps`, `c2` the
/// sample-size term inside `beta`; both are configurable because the source
/// bounds fix them only up to absolute constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventParams {
    pub eps: f64,
    pub alpha2: f64,
    pub alpha_inf: f64,
    #[serde(rename = "M")]
    pub m_cap: f64,
    pub rho: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
}

/// Event thresholds after the bias coordinate is appended, derived from
/// [`EventParams`] by the closed-form perturbation budgets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TildeParams {
    pub eps_tilde: f64,
    pub beta_tilde: f64,
    pub gamma_tilde: f64,
    #[serde(rename = "M_tilde")]
    pub m_tilde_cap: f64,
    pub alpha2_tilde: f64,
    pub alpha_inf_tilde: f64,
    /// Increment added to both `beta` and `gamma` by the extension.
    pub beta_prime: f64,
    /// High-probability bound on `max_i 1 / ||z_i||^2`.
    #[serde(rename = "T_bound")]
    pub t_bound: f64,
    /// Gram-perturbation budget `sqrt(n(n-1)) * (2 eps + 1) * T_bound`.
    #[serde(rename = "T")]
    pub t_total: f64,
    pub delta_e1: f64,
    pub delta_e4: f64,
}

/// Measured statistics of one dataset against given thresholds. Fields with
/// a `_tilde` or `t` prefix refer to the extended (bias-appended) noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventReport {
    /// Spectral deviation of the normalized Gram matrix from the identity.
    pub eps_meas: f64,
    pub eps_tilde_meas: f64,
    /// `||Z_check mu|| / ||mu||`, zero when `mu = 0`.
    pub alpha2_meas: f64,
    pub alpha_inf_meas: f64,
    pub alpha2_tilde_meas: f64,
    pub alpha_inf_tilde_meas: f64,
    pub max_z_norm: f64,
    pub max_z_tilde_norm: f64,
    /// Mean of `1 / ||z_i||^2`.
    pub e4_stat: f64,
    pub e4_tilde_stat: f64,
    /// Mean of `y_i * y_noisy_i / ||z_i||^2`.
    pub e5_stat: f64,
    pub e5_tilde_stat: f64,
    /// Extremes of `||v_i||^2 / Tr(Sigma)`.
    pub v_ratio_min: f64,
    pub v_ratio_max: f64,
    #[serde(rename = "E1")]
    pub e1: bool,
    #[serde(rename = "E2")]
    pub e2: bool,
    #[serde(rename = "E3")]
    pub e3: bool,
    #[serde(rename = "E4")]
    pub e4: bool,
    #[serde(rename = "E5")]
    pub e5: bool,
    #[serde(rename = "tE1")]
    pub te1: bool,
    #[serde(rename = "tE2")]
    pub te2: bool,
    #[serde(rename = "tE3")]
    pub te3: bool,
    #[serde(rename = "tE4")]
    pub te4: bool,
    #[serde(rename = "tE5")]
    pub te5: bool,
    /// Whether every `||v_i||^2` lies within `(1 +- eps/4) Tr(Sigma)`.
    pub omega1: bool,
}

/// Measured Gram perturbation caused by appending the bias coordinate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbationReport {
    /// Spectral norm of `P`, the difference of the two normalized Grams.
    #[serde(rename = "P_spec")]
    pub p_spec: f64,
    #[serde(rename = "P_frob")]
    pub p_frob: f64,
    /// Largest `| ||z_i|| ||z_j|| / (||z~_i|| ||z~_j||) - 1 |` over pairs.
    #[serde(rename = "A_max")]
    pub a_max: f64,
    /// Largest `1 / (||z~_i|| ||z~_j||)` over pairs.
    #[serde(rename = "B_max")]
    pub b_max: f64,
    /// `(1/n) sum 1 / (||z_i||^2 (||z_i||^2 + 1))`, computed as the exact
    /// difference of the two inverse-norm means.
    #[serde(rename = "B_pert")]
    pub b_pert: f64,
    /// The perturbation matrix itself; omitted from serialized records.
    #[serde(skip)]
    pub p_matrix: SymMat,
}

/// Result of the Gram deviation budget for the extended noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TildeEpsilon {
    /// High-probability bound on `max_i 1 / ||z_i||^2`.
    pub t_bound: f64,
    /// Full perturbation budget `sqrt(n(n-1)) (2 eps + 1) t_bound`.
    pub t_total: f64,
    /// `eps + t_total`.
    pub eps_tilde: f64,
}

/// Max-norm threshold after extension, with the convenience flag for the
/// factor-sqrt(2) domination `sqrt(M^2 + 1) <= sqrt(2) M` that holds for
/// `M >= 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaxNormExtended {
    pub value: f64,
    pub sqrt2_bound_applies: bool,
}

// ---------------------------------------------------------------------------

/// Gram matrix of row-normalized vectors: entry `(i, j)` is
/// `<z_i, z_j> / (||z_i|| ||z_j||)`. The diagonal is set to exactly 1.
pub fn normalized_gram(rows: &[Vec<f64>]) -> Result<SymMat, EventsError> {
    let n = rows.len();
    let mut norms = Vec::with_capacity(n);
    for (i, row) in rows.iter().enumerate() {
        debug_assert_eq!(row.len(), rows[0].len(), "ragged noise rows");
        let ni = norm(row);
        if !(ni > 0.0) {
            return Err(EventsError::ZeroNormRow { index: i });
        }
        norms.push(ni);
    }
    let mut g = SymMat::zeros(n);
    for i in 0..n {
        g.set(i, i, 1.0);
        for j in (i + 1)..n {
            g.set(i, j, dot(&rows[i], &rows[j]) / (norms[i] * norms[j]));
        }
    }
    Ok(g)
}

/// Spectral deviation `||G - I||` of a normalized Gram matrix.
pub fn spectral_deviation(gram: &SymMat) -> Result<f64, EventsError> {
    let mut d = gram.clone();
    for i in 0..d.n() {
        let gii = d.get(i, i);
        d.set(i, i, gii - 1.0);
    }
    let est = spectral_norm_sym(&d, SPECTRAL_TOL, SPECTRAL_MAX_ITER);
    if est.converged {
        Ok(est.value)
    } else {
        Err(EventsError::NoConvergence { best: est.value })
    }
}

/// Mean of `1 / ||row_i||^2`, folding left to right. Shared by
/// [`check_events`] and [`measure_perturbation`] so their statistics agree
/// bitwise.
fn inverse_sq_mean(rows: &[Vec<f64>]) -> Result<f64, EventsError> {
    let mut s = 0.0;
    for (i, row) in rows.iter().enumerate() {
        let sq = norm_sq(row);
        if !(sq > 0.0) {
            return Err(EventsError::ZeroNormRow { index: i });
        }
        s += 1.0 / sq;
    }
    Ok(s / rows.len() as f64)
}

/// Mean of `sign_i / ||row_i||^2` with `sign_i = y_i * y_noisy_i`.
fn signed_inverse_sq_mean(rows: &[Vec<f64>], signs: &[f64]) -> f64 {
    let mut s = 0.0;
    for (row, sg) in rows.iter().zip(signs.iter()) {
        s += sg / norm_sq(row);
    }
    s / rows.len() as f64
}

/// Measures all five event statistics of a dataset, plain and extended, and
/// evaluates the indicator of each event at the given thresholds.
///
/// The inverse-norm indicators compare against the proxy center
/// `params.rho` (and `(1 - 2 eta) rho` for the label-weighted one), not the
/// exact expectation of the finite-dimensional model; the raw statistics are
/// reported so any other center can be checked by the caller.
pub fn check_events(
    ext: &ExtendedDataset,
    params: &EventParams,
    tilde: &TildeParams,
) -> Result<EventReport, EventsError> {
    let ds = &ext.base;
    let mu = ds.spec.mu();
    let mu_norm = ds.spec.mu_norm();
    let eta = ds.spec.eta();
    let trace = ds.spec.sigma().trace();

    let eps_meas = spectral_deviation(&normalized_gram(&ds.z)?)?;
    let eps_tilde_meas = spectral_deviation(&normalized_gram(&ext.z_ext)?)?;

    // Alignment vector entries <z_i, mu> / ||z_i||, as ratios to ||mu||.
    let mut align = Vec::with_capacity(ds.n);
    let mut align_tilde = Vec::with_capacity(ds.n);
    for i in 0..ds.n {
        align.push(dot(&ds.z[i], mu) / norm(&ds.z[i]));
        align_tilde.push(dot(&ext.z_ext[i], &ext.mu_ext) / norm(&ext.z_ext[i]));
    }
    let ratio = |v: f64| if mu_norm > 0.0 { v / mu_norm } else { 0.0 };
    let alpha2_meas = ratio(norm(&align));
    let alpha_inf_meas = ratio(max_abs(&align));
    let alpha2_tilde_meas = ratio(norm(&align_tilde));
    let alpha_inf_tilde_meas = ratio(max_abs(&align_tilde));

    let max_z_norm = ds.z.iter().map(|z| norm(z)).fold(0.0_f64, f64::max);
    let max_z_tilde_norm = ext.z_ext.iter().map(|z| norm(z)).fold(0.0_f64, f64::max);

    let e4_stat = inverse_sq_mean(&ds.z)?;
    let e4_tilde_stat = inverse_sq_mean(&ext.z_ext)?;
    let signs: Vec<f64> = (0..ds.n).map(|i| ds.y[i] * ds.y_noisy[i]).collect();
    let e5_stat = signed_inverse_sq_mean(&ds.z, &signs);
    let e5_tilde_stat = signed_inverse_sq_mean(&ext.z_ext, &signs);

    let mut v_ratio_min = f64::INFINITY;
    let mut v_ratio_max = f64::NEG_INFINITY;
    for v in &ds.v {
        let r = norm_sq(v) / trace;
        v_ratio_min = v_ratio_min.min(r);
        v_ratio_max = v_ratio_max.max(r);
    }

    let rho = params.rho;
    let e5_center = (1.0 - 2.0 * eta) * rho;
    Ok(EventReport {
        eps_meas,
        eps_tilde_meas,
        alpha2_meas,
        alpha_inf_meas,
        alpha2_tilde_meas,
        alpha_inf_tilde_meas,
        max_z_norm,
        max_z_tilde_norm,
        e4_stat,
        e4_tilde_stat,
        e5_stat,
        e5_tilde_stat,
        v_ratio_min,
        v_ratio_max,
        e1: eps_meas <= params.eps,
        e2: alpha2_meas <= params.alpha2 && alpha_inf_meas <= params.alpha_inf,
        e3: max_z_norm <= params.m_cap,
        e4: (e4_stat - rho).abs() <= params.beta * rho,
        e5: (e5_stat - e5_center).abs() <= params.gamma * rho,
        te1: eps_tilde_meas <= tilde.eps_tilde,
        te2: alpha2_tilde_meas <= tilde.alpha2_tilde
            && alpha_inf_tilde_meas <= tilde.alpha_inf_tilde,
        te3: max_z_tilde_norm <= tilde.m_tilde_cap,
        te4: (e4_tilde_stat - rho).abs() <= tilde.beta_tilde * rho,
        te5: (e5_tilde_stat - e5_center).abs() <= tilde.gamma_tilde * rho,
        omega1: v_ratio_min >= 1.0 - params.eps / 4.0 && v_ratio_max <= 1.0 + params.eps / 4.0,
    })
}

/// Closed-form event thresholds for a model at sample size `n` and failure
/// tolerance `delta`, with configurable absolute constants `c1` (scaling the
/// Gram deviation) and `c2` (scaling the sample-size term of `beta`).
pub fn homogeneous_params(
    model: &ModelSpec,
    n: usize,
    delta: f64,
    c1: f64,
    c2: f64,
) -> Result<EventParams, EventsError> {
    if !(delta > 0.0 && delta < 0.5) {
        return Err(EventsError::InvalidParam(format!(
            "delta must lie in (0, 1/2), got {delta}"
        )));
    }
    if n == 0 {
        return Err(EventsError::InvalidParam("n must be at least 1".into()));
    }
    if !(c1 >= 0.0 && c2 >= 0.0) {
        return Err(EventsError::InvalidParam(
            "constants c1 and c2 must be nonnegative".into(),
        ));
    }
    let nf = n as f64;
    let p = model.p() as f64;
    let r = model.xi().r();
    let k = model.g().k();
    let l = model.g().l();
    let trace = model.sigma().trace();

    let eps = c1
        * (nf / delta).powf(2.0 / r)
        * p.powf(2.0 / r - 0.5).max(nf.powf(2.0 / r))
        * model.sigma().frobenius()
        / trace;
    let alpha = if model.mu_norm() > 0.0 {
        2.0 * nf.sqrt() * model.sigma_sqrt_mu_norm()
            / (delta.sqrt() * trace * model.mu_norm())
    } else {
        0.0
    };
    // (n/delta)^{1/l} is 1 by convention when l is infinite.
    let n_delta_pow = if l.is_infinite() {
        1.0
    } else {
        (nf / delta).powf(1.0 / l)
    };
    let m_cap = (1.0 + eps) * model.g().l_norm() * n_delta_pow * trace.sqrt();
    let beta = eps + c2 * delta.powf(-2.0 / k) * nf.powf(-(1.0 - 2.0 / k));
    Ok(EventParams {
        eps,
        alpha2: alpha,
        alpha_inf: alpha,
        m_cap,
        rho: model.rho(),
        beta,
        gamma: beta,
        delta,
        c1,
        c2,
    })
}

/// Gram deviation budget for the extended noise: from a plain deviation
/// `eps`, a tail bound on `max_i 1 / ||z_i||^2` yields the extended
/// deviation `eps + sqrt(n(n-1)) (2 eps + 1) T_bound`.
pub fn tilde_epsilon_bound(
    eps: f64,
    n: usize,
    delta_e1: f64,
    trace: f64,
    neg_k_moment: f64,
    k: f64,
) -> Result<TildeEpsilon, EventsError> {
    if eps >= 4.0 {
        return Err(EventsError::DegenerateDenominator { eps });
    }
    if !(eps >= 0.0) {
        return Err(EventsError::InvalidParam(format!(
            "eps must be nonnegative, got {eps}"
        )));
    }
    if !(delta_e1 > 0.0 && delta_e1 < 1.0) {
        return Err(EventsError::InvalidParam(format!(
            "delta_e1 must lie in (0, 1), got {delta_e1}"
        )));
    }
    if !(trace > 0.0) {
        return Err(EventsError::InvalidParam(format!(
            "trace must be positive, got {trace}"
        )));
    }
    let nf = n as f64;
    let t_bound = (nf * neg_k_moment / delta_e1).powf(2.0 / k) / ((1.0 - eps / 4.0) * trace);
    let t_total = (nf * (nf - 1.0)).sqrt() * (2.0 * eps + 1.0) * t_bound;
    Ok(TildeEpsilon {
        t_bound,
        t_total,
        eps_tilde: t_total + eps,
    })
}

/// Increment that appending the bias coordinate adds to the inverse-norm
/// concentration bounds `beta` and `gamma`.
pub fn beta_prime(
    eps: f64,
    n: usize,
    delta_e4: f64,
    trace: f64,
    inv_second_moment: f64,
    neg_k_moment: f64,
    k: f64,
) -> Result<f64, EventsError> {
    if eps >= 4.0 {
        return Err(EventsError::DegenerateDenominator { eps });
    }
    if !(eps >= 0.0) {
        return Err(EventsError::InvalidParam(format!(
            "eps must be nonnegative, got {eps}"
        )));
    }
    if !(delta_e4 > 0.0 && delta_e4 < 1.0) {
        return Err(EventsError::InvalidParam(format!(
            "delta_e4 must lie in (0, 1), got {delta_e4}"
        )));
    }
    if !(trace > 0.0 && inv_second_moment > 0.0) {
        return Err(EventsError::InvalidParam(
            "trace and E[g^-2] must be positive".into(),
        ));
    }
    let nf = n as f64;
    let lead = 1.0 / ((1.0 - eps / 4.0) * (1.0 - eps / 4.0) * inv_second_moment);
    Ok(lead * (nf * neg_k_moment / delta_e4).powf(4.0 / k) / trace)
}

/// `sqrt(M^2 + 1)`: the max-norm threshold after the bias coordinate is
/// appended. When `M >= 1` this is at most `sqrt(2) M`.
pub fn tilde_max_norm(m_cap: f64) -> MaxNormExtended {
    MaxNormExtended {
        value: (m_cap * m_cap + 1.0).sqrt(),
        sqrt2_bound_applies: m_cap >= 1.0,
    }
}

/// Derives the full extended-event thresholds from plain ones. The alignment
/// thresholds carry over unchanged because extension only shrinks the
/// measured alignment.
pub fn derive_tilde_params(
    params: &EventParams,
    model: &ModelSpec,
    n: usize,
    delta_e1: f64,
    delta_e4: f64,
) -> Result<TildeParams, EventsError> {
    let g = model.g();
    let trace = model.sigma().trace();
    let te = tilde_epsilon_bound(params.eps, n, delta_e1, trace, g.neg_moment(), g.k())?;
    let bp = beta_prime(
        params.eps,
        n,
        delta_e4,
        trace,
        g.inv_second_moment(),
        g.neg_moment(),
        g.k(),
    )?;
    Ok(TildeParams {
        eps_tilde: te.eps_tilde,
        beta_tilde: params.beta + bp,
        gamma_tilde: params.gamma + bp,
        m_tilde_cap: tilde_max_norm(params.m_cap).value,
        alpha2_tilde: params.alpha2,
        alpha_inf_tilde: params.alpha_inf,
        beta_prime: bp,
        t_bound: te.t_bound,
        t_total: te.t_total,
        delta_e1,
        delta_e4,
    })
}

/// Measures the Gram perturbation `P` (extended minus plain normalized Gram)
/// together with the quantities that bound it entrywise: for `i != j`,
/// `|P_ij| <= |G_ij| A_ij + B_ij`.
pub fn measure_perturbation(ext: &ExtendedDataset) -> Result<PerturbationReport, EventsError> {
    let n = ext.n();
    let gram = normalized_gram(&ext.base.z)?;
    let gram_t = normalized_gram(&ext.z_ext)?;

    let mut p = SymMat::zeros(n);
    for i in 0..n {
        // The diagonal of both Grams is exactly 1, so P_ii is exactly 0.
        for j in (i + 1)..n {
            p.set(i, j, gram_t.get(i, j) - gram.get(i, j));
        }
    }
    let est = spectral_norm_sym(&p, SPECTRAL_TOL, SPECTRAL_MAX_ITER);
    if !est.converged {
        return Err(EventsError::NoConvergence { best: est.value });
    }

    let norms: Vec<f64> = ext.base.z.iter().map(|z| norm(z)).collect();
    let norms_t: Vec<f64> = ext.z_ext.iter().map(|z| norm(z)).collect();
    let mut a_max = 0.0_f64;
    let mut b_max = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let a = (norms[i] * norms[j] / (norms_t[i] * norms_t[j]) - 1.0).abs();
            let b = 1.0 / (norms_t[i] * norms_t[j]);
            a_max = a_max.max(a);
            b_max = b_max.max(b);
        }
    }

    // Term-wise, 1/||z||^2 - 1/(||z||^2 + 1) = 1/(||z||^2 (||z||^2 + 1));
    // computing the difference of the two means keeps the identity between
    // this report and the event statistics exact.
    let b_pert = inverse_sq_mean(&ext.base.z)? - inverse_sq_mean(&ext.z_ext)?;

    Ok(PerturbationReport {
        p_spec: est.value,
        p_frob: p.frobenius(),
        a_max,
        b_max,
        b_pert,
        p_matrix: p,
    })
}

// ---------------------------------------------------------------------------
