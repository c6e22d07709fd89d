//! Shared helpers for the integration suite: an independent brute-force
//! QP oracle for tiny problems and random separable-instance corpora.

use benign_core::linalg::{dot, norm_sq};
use benign_core::rng::rng_from_seed;
use rand::Rng;

/// A tiny labeled instance on extended features (last coordinate 1).
pub struct TinyInstance {
    pub x_ext: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

/// Random separable instances with n <= 12 points in p <= 3 dimensions.
///
/// Labels come from a planted hyperplane with a margin filter, so every
/// instance is separable with functional margin at least `margin_floor`
/// under the scaled planted normal. That keeps the optimum norm below
/// `sqrt(2) / margin_floor` and inside the oracle's search box.
pub fn tiny_corpus(count: usize, seed: u64) -> Vec<TinyInstance> {
    let margin_floor = 0.15;
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = rng.random_range(3..=12usize);
        let p = rng.random_range(1..=3usize);
        // Planted unit normal over (w, b).
        let mut plant: Vec<f64> = (0..=p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = norm_sq(&plant).sqrt();
        if norm < 1e-3 {
            continue;
        }
        for c in plant.iter_mut() {
            *c /= norm;
        }
        let mut x_ext = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut tries = 0;
        while x_ext.len() < n && tries < 10_000 {
            tries += 1;
            let mut row: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
            row.push(1.0);
            let score = dot(&plant, &row);
            if score.abs() < margin_floor {
                continue;
            }
            y.push(score.signum());
            x_ext.push(row);
        }
        if x_ext.len() < n {
            continue;
        }
        out.push(TinyInstance { x_ext, y });
    }
    out
}

/// Minimum of `||v||^2` over `v` with `y_i <v, x_i> >= 1` for all `i`, by
/// box-refined grid search. Independent of the dual solver: it only
/// evaluates feasibility and norms. Returns `None` when no feasible point
/// is ever found (the search box grows up to `2^6 * initial`).
///
/// Each round scans a 9^d lattice plus 256 uniform random probes in a box
/// around the incumbent. The box only shrinks on rounds with no
/// improvement; on improvement it recenters at the same scale, so the
/// search crawls along the feasible boundary at constant resolution
/// instead of collapsing around the first boundary point it touches. The
/// random probes matter: near a vertex of the feasible polyhedron the
/// improving cone can be too narrow to contain any lattice direction, and
/// axis-aligned pattern search stalls there measurably above the optimum.
pub fn grid_qp_min_norm_sq(x_ext: &[Vec<f64>], y: &[f64], rounds: usize, seed: u64) -> Option<f64> {
    let d = x_ext[0].len();
    assert!(d <= 4, "oracle is for p <= 3 plus bias");
    let feasible = |v: &[f64]| -> bool {
        x_ext
            .iter()
            .zip(y.iter())
            .all(|(row, yi)| yi * dot(v, row) >= 1.0)
    };

    // Worst functional margin; positive means v separates, so v scaled by
    // 1 / margin is feasible with norm ||v|| / margin. Every probe is
    // normalized that way, which makes the search scale-invariant: only
    // the probe's direction matters.
    let min_margin = |v: &[f64]| -> f64 {
        x_ext
            .iter()
            .zip(y.iter())
            .map(|(row, yi)| yi * dot(v, row))
            .fold(f64::INFINITY, f64::min)
    };

    let mut rng = rng_from_seed(seed);
    let mut center = vec![0.0; d];
    let mut half = 16.0_f64;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut expansions = 0;
    let per_axis = 9usize;

    for _ in 0..rounds {
        let step = 2.0 * half / (per_axis as f64 - 1.0);
        let mut improved = false;
        let consider = |v: &[f64], best: &mut Option<(f64, Vec<f64>)>| {
            let m = min_margin(v);
            if m > 1e-12 {
                // Tiny inflation keeps the scaled point feasible under the
                // exact predicate despite rounding in the margins.
                let s = (1.0 + 1e-12) / m;
                let scaled: Vec<f64> = v.iter().map(|c| c * s).collect();
                if feasible(&scaled) {
                    let obj = norm_sq(&scaled);
                    if best.as_ref().map_or(true, |(b, _)| obj < *b) {
                        *best = Some((obj, scaled));
                        return true;
                    }
                }
            }
            false
        };
        let mut idx = vec![0usize; d];
        let mut v = vec![0.0; d];
        'grid: loop {
            for (j, &i) in idx.iter().enumerate() {
                v[j] = center[j] - half + i as f64 * step;
            }
            improved |= consider(&v, &mut best);
            // Odometer increment over the d-dimensional grid.
            for j in 0..d {
                idx[j] += 1;
                if idx[j] < per_axis {
                    continue 'grid;
                }
                idx[j] = 0;
            }
            break;
        }
        for _ in 0..512 {
            for (j, c) in v.iter_mut().enumerate() {
                *c = center[j] + rng.random_range(-half..half);
            }
            improved |= consider(&v, &mut best);
        }
        match &best {
            Some((_, v)) => {
                center.copy_from_slice(v);
                if !improved {
                    half *= 0.5;
                    if half < 1e-10 {
                        break;
                    }
                }
            }
            None => {
                // Nothing feasible yet: widen the box around the origin.
                expansions += 1;
                if expansions > 6 {
                    return None;
                }
                half *= 2.0;
            }
        }
    }
    best.map(|(obj, _)| obj)
}
