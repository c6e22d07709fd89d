//! Maximum-margin training over extended features.
//!
//! Two routes to the same direction:
//!
//! * [`hard_margin_oracle`]: dual coordinate ascent for the minimum-norm
//!   vector with functional margin 1 on every sample. Since the bias rides
//!   along as the last feature coordinate, the dual has no equality
//!   constraint, only `alpha_i >= 0`.
//! * [`gd_train`]: full-batch gradient descent on a smooth classification
//!   loss, which on separable data converges in direction to the same
//!   classifier. Agreement is certified empirically through the cosine to
//!   the oracle direction.
//!
//! Margins are functional (scale 1); only the direction carries meaning.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cosine, dot, norm, norm_sq, SymMat};
use crate::sampler::ExtendedDataset;

#[derive(Debug, Error)]
pub enum MarginError {
    #[error("data not linearly separable; worst sample {index} at margin {margin}")]
    NotSeparable { index: usize, margin: f64 },
    #[error("iteration budget exhausted with KKT violation {kkt_violation}")]
    BudgetExceeded { kkt_violation: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Knobs of the dual coordinate-ascent solver.
#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    /// Largest per-sample KKT violation accepted at certification.
    pub kkt_tol: f64,
    /// Coordinate-update budget.
    pub budget: usize,
    /// Dual blow-up factor: the data is declared non-separable when
    /// `sum(alpha)` exceeds `blowup * max(1, ||w~||^2)`, since at the
    /// optimum of a separable instance `sum(alpha) = ||w~||^2`.
    pub blowup: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            kkt_tol: 1e-8,
            budget: 1_000_000,
            blowup: 1e6,
        }
    }
}

/// A trained margin classifier: prediction is `sign(<w, x> + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub w: Vec<f64>,
    pub b: f64,
    /// Dual coefficients, one per training sample.
    pub alpha: Vec<f64>,
    /// Indices with `alpha_i > 0`.
    pub support: Vec<usize>,
    /// Smallest functional margin over the training set.
    pub min_margin: f64,
    /// `||(w, b)||^2`.
    pub objective: f64,
    /// Certified worst per-sample KKT violation.
    pub kkt_violation: f64,
    /// Coordinate updates spent.
    pub steps: usize,
}

impl Solution {
    /// The extended weight vector `(w, b)`; dot it with extended features.
    pub fn w_tilde(&self) -> Vec<f64> {
        let mut wt = self.w.clone();
        wt.push(self.b);
        wt
    }
}

struct DualState {
    w_tilde: Vec<f64>,
    alpha: Vec<f64>,
    min_margin: f64,
    kkt_violation: f64,
    steps: usize,
}

/// Worst per-sample KKT violation and its index: an inactive sample may sit
/// above margin 1, an active one must sit on it.
fn worst_violation(alpha: &[f64], f: &[f64]) -> (usize, f64) {
    let mut bi = 0;
    let mut bv = f64::NEG_INFINITY;
    for i in 0..alpha.len() {
        let v = if alpha[i] > 0.0 {
            (1.0 - f[i]).abs()
        } else {
            (1.0 - f[i]).max(0.0)
        };
        if v > bv {
            bv = v;
            bi = i;
        }
    }
    (bi, bv)
}

fn rebuild_w(rows: &[Vec<f64>], y: &[f64], alpha: &[f64]) -> Vec<f64> {
    let p = rows[0].len();
    let mut w = vec![0.0; p];
    for i in 0..rows.len() {
        if alpha[i] != 0.0 {
            let c = alpha[i] * y[i];
            for j in 0..p {
                w[j] += c * rows[i][j];
            }
        }
    }
    w
}

/// Dual coordinate ascent on the rows as given. Margins `f_i` are tracked
/// incrementally and re-derived from a rebuilt weight vector before
/// accepting, so the returned certificate is computed from scratch.
fn solve_rows(rows: &[Vec<f64>], y: &[f64], opts: &SolverOptions) -> Result<DualState, MarginError> {
    let n = rows.len();
    if n == 0 || y.len() != n {
        return Err(MarginError::InvalidInput(format!(
            "need matching nonempty rows and labels, got {n} rows, {} labels",
            y.len()
        )));
    }
    if let Some(bad) = y.iter().position(|v| *v != 1.0 && *v != -1.0) {
        return Err(MarginError::InvalidInput(format!(
            "label {bad} is {}, labels must be +1 or -1",
            y[bad]
        )));
    }

    let mut gram = SymMat::zeros(n);
    for i in 0..n {
        for j in i..n {
            gram.set(i, j, dot(&rows[i], &rows[j]));
        }
        if !(gram.get(i, i) > 0.0) {
            // A zero row cannot reach functional margin 1.
            return Err(MarginError::NotSeparable {
                index: i,
                margin: 0.0,
            });
        }
    }

    let mut alpha = vec![0.0; n];
    let mut f = vec![0.0; n];
    let mut steps = 0usize;
    let check_every = n.max(256);
    // The incremental margins drift by accumulated roundoff, so acceptance
    // always goes through an exact rebuild; a few refresh rounds let the
    // ascent continue on exact margins if drift was the only blocker.
    for _refresh in 0..8 {
        while steps < opts.budget {
            let (i, viol) = worst_violation(&alpha, &f);
            if viol <= opts.kkt_tol {
                break;
            }
            let delta = ((1.0 - f[i]) / gram.get(i, i)).max(-alpha[i]);
            alpha[i] += delta;
            for j in 0..n {
                f[j] += delta * y[i] * y[j] * gram.get(i, j);
            }
            steps += 1;
            if steps % check_every == 0 {
                let sum_alpha: f64 = alpha.iter().sum();
                let w_sq: f64 = (0..n).map(|t| alpha[t] * f[t]).sum();
                if sum_alpha > opts.blowup * w_sq.abs().max(1.0) {
                    let (bi, _) = worst_violation(&alpha, &f);
                    return Err(MarginError::NotSeparable {
                        index: bi,
                        margin: f[bi],
                    });
                }
            }
        }

        let w_tilde = rebuild_w(rows, y, &alpha);
        let exact: Vec<f64> = (0..n).map(|i| y[i] * dot(&w_tilde, &rows[i])).collect();
        let (_, viol) = worst_violation(&alpha, &exact);
        let min_margin = exact.iter().cloned().fold(f64::INFINITY, f64::min);
        if viol <= opts.kkt_tol {
            return Ok(DualState {
                w_tilde,
                alpha,
                min_margin,
                kkt_violation: viol,
                steps,
            });
        }
        if steps >= opts.budget {
            return if min_margin <= 0.0 {
                let worst = exact
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                Err(MarginError::NotSeparable {
                    index: worst,
                    margin: exact[worst],
                })
            } else {
                Err(MarginError::BudgetExceeded {
                    kkt_violation: viol,
                })
            };
        }
        f = exact;
    }

    // Refresh rounds exhausted: the certificate never settled below
    // tolerance, which points at ill conditioning rather than slow progress.
    let w_tilde = rebuild_w(rows, y, &alpha);
    let exact: Vec<f64> = (0..n).map(|i| y[i] * dot(&w_tilde, &rows[i])).collect();
    let (_, viol) = worst_violation(&alpha, &exact);
    Err(MarginError::BudgetExceeded {
        kkt_violation: viol,
    })
}

/// Minimum-norm classifier with functional margin 1 over extended features
/// (last coordinate constant 1, so its weight is the bias).
pub fn hard_margin_oracle(
    x_ext: &[Vec<f64>],
    y: &[f64],
    opts: &SolverOptions,
) -> Result<Solution, MarginError> {
    let state = solve_rows(x_ext, y, opts)?;
    let mut w = state.w_tilde;
    let b = w.pop().expect("extended rows have at least the bias column");
    Ok(finish_solution(w, b, state.alpha, state.min_margin, state.kkt_violation, state.steps))
}

/// Same solver on raw features with the bias pinned to zero, for
/// homogeneous-vs-inhomogeneous comparisons.
pub fn hard_margin_homogeneous(
    x: &[Vec<f64>],
    y: &[f64],
    opts: &SolverOptions,
) -> Result<Solution, MarginError> {
    let state = solve_rows(x, y, opts)?;
    Ok(finish_solution(
        state.w_tilde,
        0.0,
        state.alpha,
        state.min_margin,
        state.kkt_violation,
        state.steps,
    ))
}

fn finish_solution(
    w: Vec<f64>,
    b: f64,
    alpha: Vec<f64>,
    min_margin: f64,
    kkt_violation: f64,
    steps: usize,
) -> Solution {
    let support = (0..alpha.len()).filter(|&i| alpha[i] > 0.0).collect();
    let mut objective = norm_sq(&w);
    objective += b * b;
    Solution {
        w,
        b,
        alpha,
        support,
        min_margin,
        objective,
        kkt_violation,
        steps,
    }
}

// ---------------------------------------------------------------------------
// Gradient descent

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Exponential,
    Logistic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `1 / max_i ||x~_i||^2`: the inverse smoothness proxy, keeping the
    /// loss non-increasing from `w = 0`.
    InverseMaxNormSq,
    Constant(f64),
    /// `c / (L_t * max_i ||x~_i||^2)` with `c = 1/4`: the step grows as the
    /// loss shrinks, so on separable data the margins grow linearly in `t`
    /// and the direction converges polynomially fast (fixed steps only
    /// manage a `1/log t` directional rate). The local smoothness of both
    /// losses is at most `max ||x~||^2 * L` up to a factor two, and each
    /// update moves every margin by at most `c`, so `2c e^c <= 1` keeps the
    /// loss non-increasing. The exponential-loss update reduces to a
    /// softmax-weighted mean of `y_i x~_i`, computed in shifted form so it
    /// stays finite even when the raw loss under- or overflows.
    LossNormalized,
}

/// Loss-normalized update scale; `2c e^c <= 1` preserves monotone descent.
const LOSS_NORMALIZED_C: f64 = 0.25;

#[derive(Clone, Copy, Debug)]
pub struct GdOptions {
    pub loss: Loss,
    pub step: StepRule,
    pub budget: usize,
    /// Stop once the cosine to the reference direction reaches this value;
    /// ignored without a reference.
    pub early_stop_cosine: Option<f64>,
}

impl Default for GdOptions {
    fn default() -> Self {
        GdOptions {
            loss: Loss::Exponential,
            step: StepRule::InverseMaxNormSq,
            budget: 1_000_000,
            early_stop_cosine: Some(1.0 - 1e-4),
        }
    }
}

/// One logged point of a descent run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    /// Cosine to the reference direction, when a reference was supplied.
    pub cosine: Option<f64>,
    pub step_size: f64,
    /// Normalized direction `w~ / ||w~||` at this iteration.
    pub direction: Vec<f64>,
}

/// Checkpointed history of a descent run. Checkpoints are dense for the
/// first ten iterations, then geometrically spaced.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GdTrace {
    pub rows: Vec<TraceRow>,
}

impl GdTrace {
    /// CSV with columns `iteration,loss,cosine`; cosine empty when no
    /// reference was supplied.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("iteration,loss,cosine\n");
        for r in &self.rows {
            let c = r.cosine.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", r.iteration, r.loss, c));
        }
        out
    }
}

/// Result of a gradient-descent run.
#[derive(Clone, Debug)]
pub struct GdOutcome {
    pub w: Vec<f64>,
    pub b: f64,
    pub trace: GdTrace,
    pub final_loss: f64,
    pub final_cosine: Option<f64>,
    /// Whether the final cosine reached `1 - 1e-3`; `None` without a
    /// reference.
    pub converged_in_direction: Option<bool>,
    pub steps: usize,
}

fn loss_value(loss: Loss, margin: f64) -> f64 {
    match loss {
        Loss::Exponential => (-margin).exp(),
        Loss::Logistic => {
            if margin >= 0.0 {
                (-margin).exp().ln_1p()
            } else {
                -margin + margin.exp().ln_1p()
            }
        }
    }
}

/// Derivative of the per-sample loss in the margin (always negative).
fn loss_slope(loss: Loss, margin: f64) -> f64 {
    match loss {
        Loss::Exponential => -(-margin).exp(),
        Loss::Logistic => {
            if margin >= 0.0 {
                let e = (-margin).exp();
                -e / (1.0 + e)
            } else {
                -1.0 / (1.0 + margin.exp())
            }
        }
    }
}

/// Loss-normalized exponential-loss update in shifted (softmax) form:
/// `w += base_step * sum_i s_i y_i x~_i` with `s = softmax(-margins)`.
/// Shifting by the minimum margin keeps every weight in (0, 1], so the
/// update is finite for any margin scale.
fn softmax_step(
    w: &mut [f64],
    grad: &mut [f64],
    x_ext: &[Vec<f64>],
    y: &[f64],
    margins: &[f64],
    min_margin: f64,
    base_step: f64,
) {
    for gj in grad.iter_mut() {
        *gj = 0.0;
    }
    let mut wsum = 0.0;
    for i in 0..x_ext.len() {
        let d = (min_margin - margins[i]).exp();
        wsum += d;
        let c = d * y[i];
        for (gj, xj) in grad.iter_mut().zip(&x_ext[i]) {
            *gj += c * xj;
        }
    }
    // The minimum-margin sample contributes weight 1, so wsum >= 1.
    let scale = base_step / wsum;
    for (wj, gj) in w.iter_mut().zip(grad.iter()) {
        *wj += scale * gj;
    }
}

/// Full-batch gradient descent from `w~ = 0` on extended features.
///
/// `reference` is an extended direction (for instance
/// [`Solution::w_tilde`]); when given, cosines are logged and early
/// stopping applies. Non-separable data is detected at budget end: the loss
/// stayed above `1e-3` of its initial value while the direction moved less
/// than `1e-9` per step.
pub fn gd_train(
    x_ext: &[Vec<f64>],
    y: &[f64],
    opts: &GdOptions,
    reference: Option<&[f64]>,
) -> Result<GdOutcome, MarginError> {
    let n = x_ext.len();
    if n == 0 || y.len() != n {
        return Err(MarginError::InvalidInput(format!(
            "need matching nonempty rows and labels, got {n} rows, {} labels",
            y.len()
        )));
    }
    let p = x_ext[0].len();
    let max_nsq = x_ext.iter().map(|r| norm_sq(r)).fold(0.0_f64, f64::max);
    if !(max_nsq > 0.0) {
        return Err(MarginError::NotSeparable {
            index: 0,
            margin: 0.0,
        });
    }
    let base_step = match opts.step {
        StepRule::InverseMaxNormSq => 1.0 / max_nsq,
        StepRule::Constant(s) => s,
        StepRule::LossNormalized => LOSS_NORMALIZED_C / max_nsq,
    };

    let mut w = vec![0.0; p];
    let mut grad = vec![0.0; p];
    let mut margins = vec![0.0; n];
    let mut trace = GdTrace::default();
    let mut initial_loss = 0.0;
    let mut last_loss;
    let mut next_log = 0usize;
    let mut prev_dir: Option<(usize, Vec<f64>)> = None;
    let mut movement_per_step = f64::INFINITY;
    let mut loss_drop_per_step = f64::INFINITY;
    let steps_done;

    let mut t = 0usize;
    loop {
        // Margins and loss at the current iterate.
        let mut loss_sum = 0.0;
        let mut min_margin = f64::INFINITY;
        for i in 0..n {
            let m = y[i] * dot(&w, &x_ext[i]);
            margins[i] = m;
            min_margin = min_margin.min(m);
            loss_sum += loss_value(opts.loss, m);
        }
        let loss = loss_sum / n as f64;
        last_loss = loss;
        if t == 0 {
            initial_loss = loss;
        }
        let step = match opts.step {
            StepRule::LossNormalized if loss > 0.0 => (base_step / loss).min(f64::MAX),
            StepRule::LossNormalized => f64::MAX,
            _ => base_step,
        };

        let mut cos_ref = None;
        let log_now = t >= next_log || t == opts.budget;
        if log_now {
            let nw = norm(&w);
            let dir: Vec<f64> = if nw > 0.0 {
                w.iter().map(|v| v / nw).collect()
            } else {
                vec![0.0; p]
            };
            cos_ref = reference.map(|r| cosine(&dir, r));
            if let Some((pt, pd)) = &prev_dir {
                if t > *pt {
                    let mut d = 0.0;
                    for j in 0..p {
                        let e = dir[j] - pd[j];
                        d += e * e;
                    }
                    movement_per_step = d.sqrt() / (t - pt) as f64;
                    let prev_loss = trace.rows.last().map(|r| r.loss).unwrap_or(loss);
                    loss_drop_per_step =
                        (prev_loss - loss).max(0.0) / prev_loss.max(1e-300) / (t - pt) as f64;
                }
            }
            trace.rows.push(TraceRow {
                iteration: t,
                loss,
                cosine: cos_ref,
                step_size: step,
                direction: dir.clone(),
            });
            prev_dir = Some((t, dir));
            next_log = if t < 10 {
                t + 1
            } else {
                (t + 1).max((t as f64 * 1.25) as usize)
            };
        }

        if let (Some(es), Some(c)) = (opts.early_stop_cosine, cos_ref) {
            if c >= es {
                steps_done = t;
                break;
            }
        }
        if t >= opts.budget {
            steps_done = t;
            // Separable runs keep driving the loss toward zero; a loss
            // plateau with a frozen direction means no separator exists.
            if last_loss > 1e-3 * initial_loss
                && movement_per_step < 1e-9
                && loss_drop_per_step < 1e-9
            {
                let worst = (0..n)
                    .map(|i| (i, y[i] * dot(&w, &x_ext[i])))
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .unwrap();
                return Err(MarginError::NotSeparable {
                    index: worst.0,
                    margin: worst.1,
                });
            }
            break;
        }
        // Loss indistinguishable from zero: margins are huge and the
        // direction has settled. The loss-normalized update stays finite in
        // this regime (softmax form) and keeps refining the direction.
        if loss == 0.0 && opts.step != StepRule::LossNormalized {
            steps_done = t;
            break;
        }

        match opts.step {
            StepRule::LossNormalized => match opts.loss {
                Loss::Exponential => {
                    softmax_step(&mut w, &mut grad, x_ext, y, &margins, min_margin, base_step);
                }
                Loss::Logistic => {
                    if min_margin > 30.0 {
                        // Both logistic weights and losses match the
                        // exponential ones to relative error e^-30 here.
                        softmax_step(&mut w, &mut grad, x_ext, y, &margins, min_margin, base_step);
                    } else {
                        // w += c/M^2 * (sum_i |l'(m_i)| y_i x~_i) / (sum_i l(m_i))
                        let mut vsum = 0.0;
                        for gj in grad.iter_mut() {
                            *gj = 0.0;
                        }
                        for i in 0..n {
                            vsum += loss_value(Loss::Logistic, margins[i]);
                            let c = -loss_slope(Loss::Logistic, margins[i]) * y[i];
                            for j in 0..p {
                                grad[j] += c * x_ext[i][j];
                            }
                        }
                        let scale = base_step / vsum;
                        for j in 0..p {
                            w[j] += scale * grad[j];
                        }
                    }
                }
            },
            _ => {
                for gj in grad.iter_mut() {
                    *gj = 0.0;
                }
                for i in 0..n {
                    let c = loss_slope(opts.loss, margins[i]) * y[i];
                    for j in 0..p {
                        grad[j] += c * x_ext[i][j];
                    }
                }
                let scale = step / n as f64;
                for j in 0..p {
                    w[j] -= scale * grad[j];
                }
            }
        }
        t += 1;
    }

    let final_cosine = reference.map(|r| cosine(&w, r));
    let converged_in_direction = final_cosine.map(|c| c >= 1.0 - 1e-3);
    let mut w_out = w;
    let b = w_out.pop().expect("extended rows include the bias column");
    Ok(GdOutcome {
        w: w_out,
        b,
        trace,
        final_loss: last_loss,
        final_cosine,
        converged_in_direction,
        steps: steps_done,
    })
}

// ---------------------------------------------------------------------------
// Margin diagnostics

/// Fit summary of a solution on its training set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginStats {
    /// Smallest observed-label functional margin.
    pub min_margin: f64,
    /// All observed labels fit with strictly positive margin.
    pub interpolated: bool,
    /// Among label-flipped samples, the fraction fit with positive margin;
    /// 1 when no labels were flipped.
    pub noisy_fit_fraction: f64,
    /// Number of label-flipped samples.
    pub flipped_count: usize,
}

/// Margins of `solution` against the observed labels of `ext`.
pub fn margin_stats(solution: &Solution, ext: &ExtendedDataset) -> MarginStats {
    let wt = solution.w_tilde();
    let ds = &ext.base;
    let mut min_margin = f64::INFINITY;
    let mut all_pos = true;
    let mut flipped = 0usize;
    let mut flipped_fit = 0usize;
    for i in 0..ds.n {
        let m = ds.y_noisy[i] * dot(&wt, &ext.x_ext[i]);
        min_margin = min_margin.min(m);
        if !(m > 0.0) {
            all_pos = false;
        }
        if ds.y[i] != ds.y_noisy[i] {
            flipped += 1;
            if m > 0.0 {
                flipped_fit += 1;
            }
        }
    }
    MarginStats {
        min_margin,
        interpolated: all_pos,
        noisy_fit_fraction: if flipped == 0 {
            1.0
        } else {
            flipped_fit as f64 / flipped as f64
        },
        flipped_count: flipped,
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{mix_seed, rng_from_seed};
    use crate::sampler::{
        extend_dataset, sample_dataset, GFamily, GSpec, ModelSpec, SigmaSpec, XiFamily, XiSpec,
    };
    use approx::assert_relative_eq;
    use rand::Rng;

    fn opts() -> SolverOptions {
        SolverOptions::default()
    }

    /// Random instance that is separable by construction: labels come from a
    /// random reference direction and low-margin points are rejected.
    fn gen_separable(seed: u64, n: usize, p: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = rng_from_seed(seed);
        let mut w_star: Vec<f64> = (0..=p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let nw = norm(&w_star);
        for v in w_star.iter_mut() {
            *v /= nw;
        }
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        while rows.len() < n {
            let mut x: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
            x.push(1.0);
            let s = dot(&w_star, &x);
            if s.abs() < 0.2 {
                continue;
            }
            labels.push(if s > 0.0 { 1.0 } else { -1.0 });
            rows.push(x);
        }
        (rows, labels)
    }

    fn check_kkt(rows: &[Vec<f64>], y: &[f64], sol: &Solution) {
        // Weight vector in row coordinates: the bias column is part of the
        // rows for the extended solver and absent for the homogeneous one.
        let wt = if sol.w.len() == rows[0].len() {
            sol.w.clone()
        } else {
            sol.w_tilde()
        };
        // Stationarity.
        let mut rebuilt = vec![0.0; wt.len()];
        for i in 0..rows.len() {
            for j in 0..wt.len() {
                rebuilt[j] += sol.alpha[i] * y[i] * rows[i][j];
            }
        }
        let diff: f64 = rebuilt
            .iter()
            .zip(wt.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(diff <= 1e-6 * norm(&wt).max(1e-30), "stationarity broke");
        // Feasibility and complementary slackness.
        let mut slack = 0.0;
        for i in 0..rows.len() {
            let m = y[i] * dot(&wt, &rows[i]);
            assert!(m >= 1.0 - 1e-6, "sample {i} at margin {m}");
            slack += sol.alpha[i] * (m - 1.0);
        }
        let sum_alpha: f64 = sol.alpha.iter().sum();
        assert!(slack.abs() <= 1e-6 * sum_alpha.max(1e-30), "slackness broke");
    }

    #[test]
    fn symmetric_two_point_instance() {
        let rows = vec![vec![1.0, 1.0], vec![-1.0, 1.0]];
        let y = vec![1.0, -1.0];
        let sol = hard_margin_oracle(&rows, &y, &opts()).unwrap();
        assert_relative_eq!(sol.w[0], 1.0, epsilon = 1e-7);
        assert!(sol.b.abs() <= 1e-7);
        assert_relative_eq!(sol.min_margin, 1.0, epsilon = 1e-7);
        assert_relative_eq!(sol.objective, 1.0, epsilon = 1e-6);
        check_kkt(&rows, &y, &sol);
    }

    #[test]
    fn asymmetric_two_point_instance() {
        // Points 0 (label -1) and 4 (label +1) on the line: boundary at 2,
        // weight 1/2, bias -1.
        let rows = vec![vec![0.0, 1.0], vec![4.0, 1.0]];
        let y = vec![-1.0, 1.0];
        let sol = hard_margin_oracle(&rows, &y, &opts()).unwrap();
        assert_relative_eq!(sol.w[0], 0.5, epsilon = 1e-7);
        assert_relative_eq!(sol.b, -1.0, epsilon = 1e-7);
        assert_relative_eq!(sol.objective, 1.25, epsilon = 1e-6);
        check_kkt(&rows, &y, &sol);
    }

    #[test]
    fn negating_labels_negates_solution_bitwise() {
        for seed in 0..10 {
            let (rows, y) = gen_separable(mix_seed(0x11, &[seed]), 8, 3);
            let neg: Vec<f64> = y.iter().map(|v| -v).collect();
            let a = hard_margin_oracle(&rows, &y, &opts()).unwrap();
            let b = hard_margin_oracle(&rows, &neg, &opts()).unwrap();
            assert_eq!(a.alpha, b.alpha);
            let wa = a.w_tilde();
            let wb = b.w_tilde();
            for j in 0..wa.len() {
                assert_eq!(wa[j], -wb[j], "coordinate {j}");
            }
        }
    }

    #[test]
    fn kkt_certificates_on_random_instances() {
        for seed in 0..25 {
            let (rows, y) = gen_separable(mix_seed(0x22, &[seed]), 10, 3);
            let sol = hard_margin_oracle(&rows, &y, &opts()).unwrap();
            assert!(sol.kkt_violation <= 1e-8 * 1.001);
            check_kkt(&rows, &y, &sol);
        }
    }

    #[test]
    fn adding_non_support_point_keeps_solution() {
        let (rows, y) = gen_separable(0x33, 8, 2);
        let sol = hard_margin_oracle(&rows, &y, &opts()).unwrap();
        let wt = sol.w_tilde();
        // A point deep on the positive side of the margin.
        let far: Vec<f64> = wt.iter().take(2).map(|v| 10.0 * v / norm_sq(&wt)).collect();
        let mut far_ext = far;
        far_ext.push(1.0);
        let m = dot(&wt, &far_ext);
        let (mut rows2, mut y2) = (rows.clone(), y.clone());
        let label = if m > 0.0 { 1.0 } else { -1.0 };
        assert!(label * m > 1.0 + 0.5, "constructed point must be slack");
        rows2.push(far_ext);
        y2.push(label);
        let sol2 = hard_margin_oracle(&rows2, &y2, &opts()).unwrap();
        for j in 0..sol.w.len() {
            assert!((sol.w[j] - sol2.w[j]).abs() <= 1e-6);
        }
        assert!((sol.b - sol2.b).abs() <= 1e-6);
    }

    #[test]
    fn duplicated_point_with_both_labels_is_not_separable() {
        let rows = vec![vec![0.7, 1.0], vec![0.7, 1.0]];
        let y = vec![1.0, -1.0];
        let fast = SolverOptions {
            budget: 200_000,
            ..opts()
        };
        match hard_margin_oracle(&rows, &y, &fast) {
            Err(MarginError::NotSeparable { .. }) => {}
            other => panic!("expected NotSeparable, got {other:?}"),
        }
        match gd_train(&rows, &y, &GdOptions { budget: 30_000, ..GdOptions::default() }, None) {
            Err(MarginError::NotSeparable { .. }) => {}
            other => panic!("expected NotSeparable from descent, got {other:?}"),
        }
    }

    #[test]
    fn zero_row_is_not_separable() {
        let rows = vec![vec![0.0, 0.0]];
        match hard_margin_homogeneous(&rows, &[1.0], &opts()) {
            Err(MarginError::NotSeparable { index, .. }) => assert_eq!(index, 0),
            other => panic!("expected NotSeparable, got {other:?}"),
        }
    }

    #[test]
    fn homogeneous_solver_keeps_bias_zero() {
        let (rows, y) = gen_separable(0x44, 8, 3);
        let sol = hard_margin_homogeneous(&rows, &y, &opts()).unwrap();
        assert_eq!(sol.b, 0.0);
        assert_eq!(sol.w.len(), 4);
        check_kkt(&rows, &y, &sol);
    }

    #[test]
    fn descent_reaches_oracle_direction() {
        let rows = vec![vec![1.0, 1.0], vec![-1.0, 1.0]];
        let y = vec![1.0, -1.0];
        let oracle = hard_margin_oracle(&rows, &y, &opts()).unwrap();
        let out = gd_train(&rows, &y, &GdOptions::default(), Some(&oracle.w_tilde())).unwrap();
        let c = out.final_cosine.unwrap();
        assert!(c >= 0.999, "cosine {c}");
        assert_eq!(out.converged_in_direction, Some(true));
        // The direction is (1, 0) by symmetry.
        assert!(out.b.abs() <= 1e-9 * out.w[0].abs().max(1e-300));
    }

    #[test]
    fn descent_loss_is_monotone_on_trace() {
        for &loss in &[Loss::Exponential, Loss::Logistic] {
            let (rows, y) = gen_separable(0x55, 10, 3);
            let out = gd_train(
                &rows,
                &y,
                &GdOptions {
                    loss,
                    budget: 20_000,
                    early_stop_cosine: None,
                    ..GdOptions::default()
                },
                None,
            )
            .unwrap();
            let losses: Vec<f64> = out.trace.rows.iter().map(|r| r.loss).collect();
            assert!(losses.len() > 5);
            for w in losses.windows(2) {
                assert!(
                    w[1] <= w[0] * (1.0 + 1e-12),
                    "loss rose: {} -> {} ({loss:?})",
                    w[0],
                    w[1]
                );
            }
            for r in &out.trace.rows {
                if let Some(c) = r.cosine {
                    assert!((-1.0..=1.0).contains(&c));
                }
            }
        }
    }

    #[test]
    fn loss_normalized_descent_is_monotone_and_converges_fast() {
        for &loss in &[Loss::Exponential, Loss::Logistic] {
            let (rows, y) = gen_separable(0x77, 9, 3);
            let oracle = hard_margin_oracle(&rows, &y, &opts()).unwrap();
            let out = gd_train(
                &rows,
                &y,
                &GdOptions {
                    loss,
                    step: StepRule::LossNormalized,
                    budget: 200_000,
                    ..GdOptions::default()
                },
                Some(&oracle.w_tilde()),
            )
            .unwrap();
            let losses: Vec<f64> = out.trace.rows.iter().map(|r| r.loss).collect();
            for w in losses.windows(2) {
                assert!(
                    w[1] <= w[0] * (1.0 + 1e-12),
                    "loss rose: {} -> {} ({loss:?})",
                    w[0],
                    w[1]
                );
            }
            let c = out.final_cosine.unwrap();
            assert!(c >= 0.9999, "cosine {c} ({loss:?})");
            assert!(
                out.steps < 200_000,
                "early stop expected well inside the budget, used {} ({loss:?})",
                out.steps
            );
        }
    }

    #[test]
    fn descent_is_scale_invariant_in_direction() {
        let (rows, y) = gen_separable(0x66, 8, 2);
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|v| 10.0 * v).collect())
            .collect();
        let o = GdOptions {
            budget: 5_000,
            early_stop_cosine: None,
            ..GdOptions::default()
        };
        let a = gd_train(&rows, &y, &o, None).unwrap();
        let b = gd_train(&scaled, &y, &o, None).unwrap();
        for (ra, rb) in a.trace.rows.iter().zip(b.trace.rows.iter()) {
            assert_eq!(ra.iteration, rb.iteration);
            for j in 0..ra.direction.len() {
                assert!(
                    (ra.direction[j] - rb.direction[j]).abs() <= 1e-6,
                    "direction drifted at iter {}",
                    ra.iteration
                );
            }
        }
    }

    #[test]
    fn trace_csv_has_expected_columns() {
        let rows = vec![vec![1.0, 1.0], vec![-1.0, 1.0]];
        let y = vec![1.0, -1.0];
        let out = gd_train(
            &rows,
            &y,
            &GdOptions {
                budget: 100,
                early_stop_cosine: None,
                ..GdOptions::default()
            },
            None,
        )
        .unwrap();
        let csv = out.trace.to_csv_string();
        assert!(csv.starts_with("iteration,loss,cosine\n"));
        assert!(csv.lines().count() > 5);
    }

    fn noisy_model(p: usize, eta: f64) -> ModelSpec {
        ModelSpec::with_mu_along_e1(
            3.0,
            SigmaSpec::identity(p).unwrap(),
            GSpec::new(GFamily::ConstantOne, 2.0, 4.0).unwrap(),
            XiSpec::new(XiFamily::Rademacher, 4.0, 1.0).unwrap(),
            eta,
        )
        .unwrap()
    }

    #[test]
    fn margin_stats_on_interpolating_solution() {
        let ext = extend_dataset(sample_dataset(&noisy_model(300, 0.1), 20, 77));
        let sol = hard_margin_oracle(&ext.x_ext, &ext.base.y_noisy, &opts()).unwrap();
        let stats = margin_stats(&sol, &ext);
        assert!(stats.interpolated);
        assert!(stats.min_margin >= 1.0 - 1e-6);
        assert_eq!(stats.noisy_fit_fraction, 1.0);
    }

    #[test]
    fn margin_stats_on_zero_solution() {
        let ext = extend_dataset(sample_dataset(&noisy_model(10, 0.0), 5, 1));
        let zero = Solution {
            w: vec![0.0; 10],
            b: 0.0,
            alpha: vec![0.0; 5],
            support: vec![],
            min_margin: 0.0,
            objective: 0.0,
            kkt_violation: 0.0,
            steps: 0,
        };
        let stats = margin_stats(&zero, &ext);
        assert!(!stats.interpolated);
        assert_eq!(stats.min_margin, 0.0);
    }

    #[test]
    fn solution_json_round_trip() {
        let (rows, y) = gen_separable(0x77, 6, 2);
        let sol = hard_margin_oracle(&rows, &y, &opts()).unwrap();
        let json = serde_json::to_string(&sol).unwrap();
        assert!(json.contains("\"w\":") && json.contains("\"support\":"));
        let back: Solution = serde_json::from_str(&json).unwrap();
        assert_eq!(sol, back);
    }
}
