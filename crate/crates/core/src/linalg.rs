//! Small dense linear algebra helpers.
//!
//! The crate only needs dot products, norms, and the spectral norm of
//! symmetric matrices of moderate size (Gram matrices of at most a few
//! thousand rows), so everything here is written directly against `&[f64]`
//! rather than pulling in a matrix library.
//!
//! Summation order is part of the contract: `dot` and `norm_sq` fold left to
//! right, which lets callers rely on bitwise identities such as
//! `norm_sq(extended) == norm_sq(base) + 1.0` when a constant coordinate is
//! appended at the end of a vector.

use crate::rng::splitmix64;

/// Left-to-right dot product. Lengths must match.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        s += x * y;
    }
    s
}

/// Left-to-right sum of squares.
pub fn norm_sq(a: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in a {
        s += x * x;
    }
    s
}

/// Euclidean norm.
pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

/// Largest absolute entry.
pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Cosine similarity; zero if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Dense symmetric matrix, stored full row-major so matrix-vector products
/// are a straight scan.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SymMat {
    n: usize,
    data: Vec<f64>,
}

impl SymMat {
    pub fn zeros(n: usize) -> Self {
        SymMat {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Row-major backing slice of length `n * n`.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Sets both `(i, j)` and `(j, i)`.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(out.len(), self.n);
        for i in 0..self.n {
            out[i] = dot(&self.data[i * self.n..(i + 1) * self.n], x);
        }
    }

    pub fn frobenius(&self) -> f64 {
        norm(&self.data)
    }

    /// Entrywise difference `self - other`.
    pub fn sub(&self, other: &SymMat) -> SymMat {
        debug_assert_eq!(self.n, other.n);
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a - b)
            .collect();
        SymMat { n: self.n, data }
    }
}

/// Outcome of the iterative spectral-norm estimate.
#[derive(Clone, Copy, Debug)]
pub struct SpectralEstimate {
    /// Best estimate of the largest absolute eigenvalue.
    pub value: f64,
    /// Iterations actually spent.
    pub iterations: usize,
    /// Whether the residual certificate was met within the budget.
    pub converged: bool,
}

/// Default relative tolerance for [`spectral_norm_sym`].
pub const SPECTRAL_TOL: f64 = 1e-10;
/// Default iteration budget for [`spectral_norm_sym`].
pub const SPECTRAL_MAX_ITER: usize = 10_000;

/// Spectral norm of a symmetric matrix by power iteration on `A^2`.
///
/// Working on `A^2` makes the dominant eigenvalue `max_i lambda_i^2`
/// regardless of sign. Convergence is certified through the eigen-residual
/// `||A^2 v - q v|| <= tol * q_max`, which for symmetric matrices bounds the
/// distance from the Rayleigh quotient `q` to an exact eigenvalue of `A^2`.
/// If the budget runs out, the best eigenpair found is deflated once and the
/// iteration restarts in the complement as a fallback; the larger of the two
/// estimates is returned with `converged = false` if the certificate still
/// fails. Sizes 1 and 2 are solved in closed form.
pub fn spectral_norm_sym(a: &SymMat, tol: f64, max_iter: usize) -> SpectralEstimate {
    let n = a.n;
    if n == 0 {
        return SpectralEstimate {
            value: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    if n == 1 {
        return SpectralEstimate {
            value: a.get(0, 0).abs(),
            iterations: 0,
            converged: true,
        };
    }
    if n == 2 {
        // Eigenvalues of [[p, q], [q, r]]: ((p + r) +- sqrt((p - r)^2 + 4 q^2)) / 2.
        let (p, q, r) = (a.get(0, 0), a.get(0, 1), a.get(1, 1));
        let d = ((p - r) * (p - r) + 4.0 * q * q).sqrt();
        let l1 = 0.5 * ((p + r) + d);
        let l2 = 0.5 * ((p + r) - d);
        return SpectralEstimate {
            value: l1.abs().max(l2.abs()),
            iterations: 0,
            converged: true,
        };
    }

    if max_abs(&a.data) == 0.0 {
        return SpectralEstimate {
            value: 0.0,
            iterations: 0,
            converged: true,
        };
    }

    let mut v = seed_vector(n);
    let mut iterations = 0;
    let (q1, v1, ok1) = power_squared(a, &mut v, tol, max_iter, &mut iterations, None);
    if ok1 {
        return SpectralEstimate {
            value: q1.max(0.0).sqrt(),
            iterations,
            converged: true,
        };
    }

    // Fallback: deflate the best pair found and look for a competitor in the
    // orthogonal complement. This rescues starts that were nearly orthogonal
    // to the dominant eigenvector.
    let mut w = seed_vector(n + 1)[..n].to_vec();
    orthogonalize(&mut w, &v1);
    let mut iterations2 = 0;
    let (q2, _, _) = power_squared(a, &mut w, tol, max_iter, &mut iterations2, Some(&v1));
    let best = q1.max(q2).max(0.0).sqrt();
    SpectralEstimate {
        value: best,
        iterations: iterations + iterations2,
        converged: false,
    }
}

/// One power-iteration run on `A^2`, optionally deflating a known eigenpair.
/// Returns (Rayleigh quotient, final vector, certificate met).
fn power_squared(
    a: &SymMat,
    v: &mut Vec<f64>,
    tol: f64,
    max_iter: usize,
    iterations: &mut usize,
    deflate: Option<&[f64]>,
) -> (f64, Vec<f64>, bool) {
    let n = a.n;
    normalize(v);
    let mut av = vec![0.0; n];
    let mut bv = vec![0.0; n];
    let mut q = 0.0_f64;
    let mut q_max = 0.0_f64;
    for it in 0..max_iter {
        *iterations = it + 1;
        if let Some(u) = deflate {
            orthogonalize(v, u);
            if norm(v) == 0.0 {
                return (0.0, v.clone(), true);
            }
            normalize(v);
        }
        a.matvec(v, &mut av);
        a.matvec(&av, &mut bv);
        q = dot(v, &bv);
        q_max = q_max.max(q.abs());
        // Residual certificate on A^2.
        let mut res = 0.0;
        for i in 0..n {
            let r = bv[i] - q * v[i];
            res += r * r;
        }
        let res = res.sqrt();
        if res <= tol * q_max.max(f64::MIN_POSITIVE) {
            return (q, v.clone(), true);
        }
        let nb = norm(&bv);
        if nb == 0.0 {
            // v is in the kernel of A^2: restart from a shifted seed.
            *v = seed_vector(n + it + 2)[..n].to_vec();
            normalize(v);
            continue;
        }
        for i in 0..n {
            v[i] = bv[i] / nb;
        }
    }
    (q, v.clone(), false)
}

/// Deterministic pseudo-random start vector; avoids symmetry traps that a
/// constant vector can fall into.
fn seed_vector(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let h = splitmix64(0x5EED_0000_0000_0000 ^ i as u64);
            // Map to [-1, 1) with 53-bit resolution.
            (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

fn normalize(v: &mut [f64]) {
    let nv = norm(v);
    if nv > 0.0 {
        for x in v.iter_mut() {
            *x /= nv;
        }
    }
}

fn orthogonalize(v: &mut [f64], against: &[f64]) {
    let c = dot(v, against);
    for i in 0..v.len() {
        v[i] -= c * against[i];
    }
}
