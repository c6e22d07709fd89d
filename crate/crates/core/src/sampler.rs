//! Data generation for the heavy-tailed mixture model.
//!
//! A sample is `x = y * mu + z` with noise `z = g * Sigma^{1/2} * xi`:
//!
//! * `y` is +1 or -1 with probability 1/2 each; the observed label `y_noisy`
//!   equals `-y` with probability `eta`.
//! * `g` is a positive random scale normalized so `E[g^2] = 1`. Families are
//!   chosen so that the positive moment order `l` (with `E[g^l]` finite) and
//!   the negative moment order `k` (with `E[g^-k]` finite) can be stressed
//!   independently, and every declared moment has a closed form.
//! * `xi` has independent entries with mean zero, variance one and
//!   `E|xi|^r <= K`.
//!
//! `Sigma^{1/2}` is applied analytically (diagonal scaling or a rank-one
//! update), so sampling never touches a general matrix square root.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::linalg::{dot, norm};
use crate::rng::rng_from_seed;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("moment condition violated: {0}")]
    MomentViolation(String),
    #[error("covariance is not positive semidefinite: {0}")]
    NonPsd(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// Serializes a moment order that may be infinite: numbers pass through,
/// `"inf"` denotes infinity.
pub mod moment_order {
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(x),
            Raw::Word(w) if w == "inf" => Ok(f64::INFINITY),
            Raw::Word(w) => Err(D::Error::custom(format!(
                "expected a number or \"inf\", got {w:?}"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Scale distribution g

/// Family of the positive scale factor `g`.
#[derive(Clone, Debug, PartialEq)]
pub enum GFamily {
    /// `g = 1`: degenerate scale, every moment equals 1.
    ConstantOne,
    /// `g = c * U^{1/theta}` with `U` uniform on (0, 1): bounded support with
    /// a polynomial lower tail, so `E[g^-k]` is finite iff `k < theta`.
    LowerPower { theta: f64 },
    /// `g = c * W` with `W` Pareto of minimum 1 and tail index `a`: support
    /// bounded away from 0, so every negative moment is finite, while
    /// `E[g^l]` is finite iff `l < a`.
    ParetoTail { a: f64 },
}

/// Scale distribution with declared moment orders and solved normalization.
///
/// `l` in `[2, inf]` is the positive moment order, `k` in `(2, 4]` the
/// negative one. The scale `c` is solved analytically so `E[g^2] = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GSpecRaw", into = "GSpecRaw")]
pub struct GSpec {
    family: GFamily,
    l: f64,
    k: f64,
    scale: f64,
}

impl GSpec {
    pub fn new(family: GFamily, l: f64, k: f64) -> Result<Self, SamplerError> {
        if !(k > 2.0 && k <= 4.0) {
            return Err(SamplerError::MomentViolation(format!(
                "negative moment order k must lie in (2, 4], got {k}"
            )));
        }
        if !(l >= 2.0) {
            return Err(SamplerError::MomentViolation(format!(
                "positive moment order l must lie in [2, inf], got {l}"
            )));
        }
        match family {
            GFamily::ConstantOne => {}
            GFamily::LowerPower { theta } => {
                if !(theta.is_finite() && theta > 0.0) {
                    return Err(SamplerError::MomentViolation(format!(
                        "lower-power exponent theta must be a positive real, got {theta}"
                    )));
                }
                if k >= theta {
                    return Err(SamplerError::MomentViolation(format!(
                        "E g^-k infinite: k >= theta ({k} >= {theta})"
                    )));
                }
            }
            GFamily::ParetoTail { a } => {
                if !(a.is_finite() && a > 2.0) {
                    return Err(SamplerError::MomentViolation(format!(
                        "pareto tail index must exceed 2 so E g^2 is finite, got {a}"
                    )));
                }
                if l >= a {
                    return Err(SamplerError::MomentViolation(format!(
                        "E g^l infinite: l >= tail index ({l} >= {a})"
                    )));
                }
            }
        }
        let scale = match family {
            GFamily::ConstantOne => 1.0,
            // E[(U^{1/theta})^2] = theta / (theta + 2).
            GFamily::LowerPower { theta } => ((theta + 2.0) / theta).sqrt(),
            // E[W^2] = a / (a - 2).
            GFamily::ParetoTail { a } => ((a - 2.0) / a).sqrt(),
        };
        let spec = GSpec {
            family,
            l,
            k,
            scale,
        };
        debug_assert!((spec.moment(2.0) - 1.0).abs() <= 1e-12);
        Ok(spec)
    }

    pub fn family(&self) -> &GFamily {
        &self.family
    }

    pub fn l(&self) -> f64 {
        self.l
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    /// Normalization constant solved so that `E[g^2] = 1`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `E[g^order]` in closed form; `f64::INFINITY` when divergent.
    /// `order` may be negative.
    pub fn moment(&self, order: f64) -> f64 {
        let c = self.scale;
        match self.family {
            GFamily::ConstantOne => 1.0,
            GFamily::LowerPower { theta } => {
                // E[U^{m/theta}] = theta / (theta + m) for m > -theta.
                if order <= -theta {
                    f64::INFINITY
                } else {
                    c.powf(order) * theta / (theta + order)
                }
            }
            GFamily::ParetoTail { a } => {
                // E[W^m] = a / (a - m) for m < a (any negative m included).
                if order >= a {
                    f64::INFINITY
                } else {
                    c.powf(order) * a / (a - order)
                }
            }
        }
    }

    /// `(E[g^l])^{1/l}`, or the essential supremum when `l` is infinite.
    pub fn l_norm(&self) -> f64 {
        if self.l.is_infinite() {
            match self.family {
                GFamily::ConstantOne => 1.0,
                // Support is (0, c].
                GFamily::LowerPower { .. } => self.scale,
                // Unbounded support; construction rejects l = inf here.
                GFamily::ParetoTail { .. } => f64::INFINITY,
            }
        } else {
            self.moment(self.l).powf(1.0 / self.l)
        }
    }

    /// `E[g^-k]` for the declared `k`.
    pub fn neg_moment(&self) -> f64 {
        self.moment(-self.k)
    }

    /// `E[g^-2]`, the numerator of the inverse-norm scale `rho`.
    pub fn inv_second_moment(&self) -> f64 {
        self.moment(-2.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.family {
            GFamily::ConstantOne => 1.0,
            GFamily::LowerPower { theta } => {
                // 1 - U lies in (0, 1], keeping g strictly positive.
                let u: f64 = rng.random();
                self.scale * (1.0 - u).powf(1.0 / theta)
            }
            GFamily::ParetoTail { a } => {
                let u: f64 = rng.random();
                self.scale * (1.0 - u).powf(-1.0 / a)
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GSpecRaw {
    family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a: Option<f64>,
    #[serde(with = "moment_order")]
    l: f64,
    k: f64,
}

impl TryFrom<GSpecRaw> for GSpec {
    type Error = SamplerError;

    fn try_from(raw: GSpecRaw) -> Result<Self, Self::Error> {
        let family = match raw.family.as_str() {
            "constant_one" => GFamily::ConstantOne,
            "lower_power" => GFamily::LowerPower {
                theta: raw.theta.ok_or_else(|| {
                    SamplerError::InvalidParam("lower_power requires \"theta\"".into())
                })?,
            },
            "pareto_tail" => GFamily::ParetoTail {
                a: raw
                    .a
                    .ok_or_else(|| SamplerError::InvalidParam("pareto_tail requires \"a\"".into()))?,
            },
            other => {
                return Err(SamplerError::InvalidParam(format!(
                    "unknown g family {other:?}"
                )))
            }
        };
        GSpec::new(family, raw.l, raw.k)
    }
}

impl From<GSpec> for GSpecRaw {
    fn from(spec: GSpec) -> Self {
        let (family, theta, a) = match spec.family {
            GFamily::ConstantOne => ("constant_one", None, None),
            GFamily::LowerPower { theta } => ("lower_power", Some(theta), None),
            GFamily::ParetoTail { a } => ("pareto_tail", None, Some(a)),
        };
        GSpecRaw {
            family: family.to_string(),
            theta,
            a,
            l: spec.l,
            k: spec.k,
        }
    }
}

// ---------------------------------------------------------------------------
// Coordinate distribution xi

/// Family of the independent noise coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum XiFamily {
    /// +1 or -1 with probability 1/2: every absolute moment is 1.
    Rademacher,
    /// Uniform on [-sqrt(3), sqrt(3)].
    StandardizedUniform,
    /// Student-t with `df` degrees of freedom, rescaled to unit variance;
    /// `E|xi|^r` is finite iff `r < df`.
    StudentT { df: f64 },
    /// Standard normal. All moments finite in closed form; mainly a test
    /// surrogate because Gaussian tail probabilities give exact oracles.
    Gaussian,
}

/// Coordinate distribution with declared moment order `r` in (2, 4] and
/// moment cap `K` with `E|xi|^r <= K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "XiSpecRaw", into = "XiSpecRaw")]
pub struct XiSpec {
    family: XiFamily,
    r: f64,
    r_cap: f64,
}

impl XiSpec {
    pub fn new(family: XiFamily, r: f64, r_cap: f64) -> Result<Self, SamplerError> {
        if !(r > 2.0 && r <= 4.0) {
            return Err(SamplerError::MomentViolation(format!(
                "moment order r must lie in (2, 4], got {r}"
            )));
        }
        if !(r_cap > 0.0) {
            return Err(SamplerError::MomentViolation(format!(
                "moment cap K must be positive, got {r_cap}"
            )));
        }
        if let XiFamily::StudentT { df } = family {
            if !(df.is_finite() && df > r) {
                return Err(SamplerError::MomentViolation(format!(
                    "student-t requires df > r, got df = {df}, r = {r}"
                )));
            }
        }
        let spec = XiSpec { family, r, r_cap };
        let mr = spec.abs_moment(r);
        // Closed forms route through exp(ln_gamma(...)); allow one part in
        // 1e9 of roundoff so a cap set exactly at the moment value passes.
        if !(mr <= r_cap * (1.0 + 1e-9)) {
            return Err(SamplerError::MomentViolation(format!(
                "E|xi|^r = {mr} exceeds the declared cap K = {r_cap}"
            )));
        }
        Ok(spec)
    }

    pub fn family(&self) -> &XiFamily {
        &self.family
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn r_cap(&self) -> f64 {
        self.r_cap
    }

    /// `E|xi|^order` in closed form; `f64::INFINITY` when divergent.
    pub fn abs_moment(&self, order: f64) -> f64 {
        let m = order;
        match self.family {
            XiFamily::Rademacher => 1.0,
            // |xi| uniform on [0, sqrt(3)]: E|xi|^m = 3^{m/2} / (m + 1).
            XiFamily::StandardizedUniform => 3f64.powf(m / 2.0) / (m + 1.0),
            XiFamily::StudentT { df } => {
                if m >= df {
                    return f64::INFINITY;
                }
                // Standardized t: E|xi|^m =
                //   (df-2)^{m/2} G((m+1)/2) G((df-m)/2) / (sqrt(pi) G(df/2)).
                ((m / 2.0) * (df - 2.0).ln() + ln_gamma((m + 1.0) / 2.0)
                    + ln_gamma((df - m) / 2.0)
                    - 0.5 * std::f64::consts::PI.ln()
                    - ln_gamma(df / 2.0))
                .exp()
            }
            // E|N(0,1)|^m = 2^{m/2} G((m+1)/2) / sqrt(pi).
            XiFamily::Gaussian => {
                ((m / 2.0) * 2f64.ln() + ln_gamma((m + 1.0) / 2.0)
                    - 0.5 * std::f64::consts::PI.ln())
                .exp()
            }
        }
    }

    /// Streaming sampler; Rademacher draws are served from a bit buffer.
    pub fn sampler(&self) -> XiSampler {
        let mode = match self.family {
            XiFamily::Rademacher => XiMode::Rademacher { bits: 0, left: 0 },
            XiFamily::StandardizedUniform => XiMode::Uniform,
            XiFamily::StudentT { df } => XiMode::StudentT {
                dist: StudentT::new(df).expect("df validated at construction"),
                rescale: ((df - 2.0) / df).sqrt(),
            },
            XiFamily::Gaussian => XiMode::Gaussian,
        };
        XiSampler { mode }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct XiSpecRaw {
    family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    df: Option<f64>,
    r: f64,
    #[serde(rename = "K")]
    r_cap: f64,
}

impl TryFrom<XiSpecRaw> for XiSpec {
    type Error = SamplerError;

    fn try_from(raw: XiSpecRaw) -> Result<Self, Self::Error> {
        let family = match raw.family.as_str() {
            "rademacher" => XiFamily::Rademacher,
            "standardized_uniform" => XiFamily::StandardizedUniform,
            "student_t" => XiFamily::StudentT {
                df: raw.df.ok_or_else(|| {
                    SamplerError::InvalidParam("student_t requires \"df\"".into())
                })?,
            },
            "gaussian" => XiFamily::Gaussian,
            other => {
                return Err(SamplerError::InvalidParam(format!(
                    "unknown xi family {other:?}"
                )))
            }
        };
        XiSpec::new(family, raw.r, raw.r_cap)
    }
}

impl From<XiSpec> for XiSpecRaw {
    fn from(spec: XiSpec) -> Self {
        let (family, df) = match spec.family {
            XiFamily::Rademacher => ("rademacher", None),
            XiFamily::StandardizedUniform => ("standardized_uniform", None),
            XiFamily::StudentT { df } => ("student_t", Some(df)),
            XiFamily::Gaussian => ("gaussian", None),
        };
        XiSpecRaw {
            family: family.to_string(),
            df,
            r: spec.r,
            r_cap: spec.r_cap,
        }
    }
}

enum XiMode {
    Rademacher { bits: u64, left: u8 },
    Uniform,
    StudentT { dist: StudentT<f64>, rescale: f64 },
    Gaussian,
}

/// Stateful coordinate sampler produced by [`XiSpec::sampler`].
pub struct XiSampler {
    mode: XiMode,
}

impl XiSampler {
    pub fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        match &mut self.mode {
            XiMode::Rademacher { bits, left } => {
                if *left == 0 {
                    *bits = rng.next_u64();
                    *left = 64;
                }
                let v = if *bits & 1 == 1 { 1.0 } else { -1.0 };
                *bits >>= 1;
                *left -= 1;
                v
            }
            XiMode::Uniform => {
                let u: f64 = rng.random();
                3f64.sqrt() * (2.0 * u - 1.0)
            }
            XiMode::StudentT { dist, rescale } => *rescale * dist.sample(rng),
            XiMode::Gaussian => StandardNormal.sample(rng),
        }
    }
}

// ---------------------------------------------------------------------------
// Covariance

/// Structural form of the covariance; the square root is available in closed
/// form for each variant.
#[derive(Clone, Debug, PartialEq)]
pub enum SigmaKind {
    Identity {
        p: usize,
    },
    Diagonal {
        entries: Vec<f64>,
    },
    /// `I + lambda * u u^T` with unit `u`.
    Spiked {
        p: usize,
        lambda: f64,
        u: Vec<f64>,
    },
}

/// Covariance description with cached scalar summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SigmaRaw", into = "SigmaRaw")]
pub struct SigmaSpec {
    kind: SigmaKind,
    trace: f64,
    op_norm: f64,
    frobenius: f64,
    /// Precomputed per-variant helper: sqrt of diagonal entries, or the
    /// rank-one coefficient sqrt(1 + lambda) - 1.
    sqrt_aux: Vec<f64>,
}

impl SigmaSpec {
    pub fn identity(p: usize) -> Result<Self, SamplerError> {
        if p == 0 {
            return Err(SamplerError::InvalidParam("p must be at least 1".into()));
        }
        Ok(SigmaSpec {
            kind: SigmaKind::Identity { p },
            trace: p as f64,
            op_norm: 1.0,
            frobenius: (p as f64).sqrt(),
            sqrt_aux: Vec::new(),
        })
    }

    pub fn diagonal(entries: Vec<f64>) -> Result<Self, SamplerError> {
        if entries.is_empty() {
            return Err(SamplerError::InvalidParam("p must be at least 1".into()));
        }
        if let Some(bad) = entries.iter().find(|e| !(**e >= 0.0)) {
            return Err(SamplerError::NonPsd(format!(
                "diagonal entry {bad} is negative"
            )));
        }
        let trace: f64 = entries.iter().sum();
        if !(trace > 0.0) {
            return Err(SamplerError::NonPsd("trace must be positive".into()));
        }
        let op_norm = entries.iter().fold(0.0_f64, |m, e| m.max(*e));
        let frobenius = norm(&entries);
        let sqrt_aux = entries.iter().map(|e| e.sqrt()).collect();
        Ok(SigmaSpec {
            kind: SigmaKind::Diagonal { entries },
            trace,
            op_norm,
            frobenius,
            sqrt_aux,
        })
    }

    /// Spiked covariance `I + lambda u u^T`; `u` defaults to `e_1` and is
    /// normalized to unit length.
    pub fn spiked(p: usize, lambda: f64, u: Option<Vec<f64>>) -> Result<Self, SamplerError> {
        if p == 0 {
            return Err(SamplerError::InvalidParam("p must be at least 1".into()));
        }
        if !(lambda > 0.0) {
            return Err(SamplerError::NonPsd(format!(
                "spike strength must be positive, got {lambda}"
            )));
        }
        let mut u = match u {
            Some(u) => {
                if u.len() != p {
                    return Err(SamplerError::DimensionMismatch(format!(
                        "spike direction has length {}, expected {p}",
                        u.len()
                    )));
                }
                u
            }
            None => {
                let mut e1 = vec![0.0; p];
                e1[0] = 1.0;
                e1
            }
        };
        let nu = norm(&u);
        if !(nu > 0.0) {
            return Err(SamplerError::InvalidParam(
                "spike direction must be nonzero".into(),
            ));
        }
        for x in u.iter_mut() {
            *x /= nu;
        }
        let pf = p as f64;
        Ok(SigmaSpec {
            // Eigenvalues: 1 + lambda once, 1 with multiplicity p - 1.
            trace: pf + lambda,
            op_norm: 1.0 + lambda,
            frobenius: ((pf - 1.0) + (1.0 + lambda) * (1.0 + lambda)).sqrt(),
            sqrt_aux: vec![(1.0 + lambda).sqrt() - 1.0],
            kind: SigmaKind::Spiked { p, lambda, u },
        })
    }

    pub fn kind(&self) -> &SigmaKind {
        &self.kind
    }

    pub fn p(&self) -> usize {
        match &self.kind {
            SigmaKind::Identity { p } => *p,
            SigmaKind::Diagonal { entries } => entries.len(),
            SigmaKind::Spiked { p, .. } => *p,
        }
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }

    /// Spectral norm.
    pub fn op_norm(&self) -> f64 {
        self.op_norm
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius
    }

    /// Applies `Sigma^{1/2}` in place.
    pub fn sqrt_apply(&self, v: &mut [f64]) {
        match &self.kind {
            SigmaKind::Identity { .. } => {}
            SigmaKind::Diagonal { .. } => {
                for (x, s) in v.iter_mut().zip(self.sqrt_aux.iter()) {
                    *x *= s;
                }
            }
            SigmaKind::Spiked { u, .. } => {
                let shift = self.sqrt_aux[0];
                let t = shift * dot(u, v);
                for (x, ui) in v.iter_mut().zip(u.iter()) {
                    *x += t * ui;
                }
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SigmaRaw {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entries: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    u: Option<Vec<f64>>,
}

impl TryFrom<SigmaRaw> for SigmaSpec {
    type Error = SamplerError;

    fn try_from(raw: SigmaRaw) -> Result<Self, Self::Error> {
        match raw.kind.as_str() {
            "identity" => {
                let p = raw
                    .p
                    .ok_or_else(|| SamplerError::InvalidParam("identity requires \"p\"".into()))?;
                SigmaSpec::identity(p)
            }
            "diagonal" => {
                let entries = raw.entries.ok_or_else(|| {
                    SamplerError::InvalidParam("diagonal requires \"entries\"".into())
                })?;
                if let Some(p) = raw.p {
                    if p != entries.len() {
                        return Err(SamplerError::DimensionMismatch(format!(
                            "p = {p} but {} diagonal entries given",
                            entries.len()
                        )));
                    }
                }
                SigmaSpec::diagonal(entries)
            }
            "spiked" => {
                let p = raw
                    .p
                    .ok_or_else(|| SamplerError::InvalidParam("spiked requires \"p\"".into()))?;
                let lambda = raw.lambda.ok_or_else(|| {
                    SamplerError::InvalidParam("spiked requires \"lambda\"".into())
                })?;
                SigmaSpec::spiked(p, lambda, raw.u)
            }
            other => Err(SamplerError::InvalidParam(format!(
                "unknown covariance kind {other:?}"
            ))),
        }
    }
}

impl From<SigmaSpec> for SigmaRaw {
    fn from(spec: SigmaSpec) -> Self {
        match spec.kind {
            SigmaKind::Identity { p } => SigmaRaw {
                kind: "identity".into(),
                p: Some(p),
                entries: None,
                lambda: None,
                u: None,
            },
            SigmaKind::Diagonal { entries } => SigmaRaw {
                kind: "diagonal".into(),
                p: None,
                entries: Some(entries),
                lambda: None,
                u: None,
            },
            SigmaKind::Spiked { p, lambda, u } => SigmaRaw {
                kind: "spiked".into(),
                p: Some(p),
                entries: None,
                lambda: Some(lambda),
                u: Some(u),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Model

/// Full generative description: signal, covariance, distribution families
/// and label-noise rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelSpecRaw", into = "ModelSpecRaw")]
pub struct ModelSpec {
    mu: Vec<f64>,
    sigma: SigmaSpec,
    g: GSpec,
    xi: XiSpec,
    eta: f64,
    mu_norm: f64,
    sigma_sqrt_mu_norm: f64,
}

impl ModelSpec {
    pub fn new(
        mu: Vec<f64>,
        sigma: SigmaSpec,
        g: GSpec,
        xi: XiSpec,
        eta: f64,
    ) -> Result<Self, SamplerError> {
        if mu.len() != sigma.p() {
            return Err(SamplerError::DimensionMismatch(format!(
                "mu has length {}, covariance has dimension {}",
                mu.len(),
                sigma.p()
            )));
        }
        if !(0.0..0.5).contains(&eta) {
            return Err(SamplerError::InvalidParam(format!(
                "label-noise rate must lie in [0, 1/2), got {eta}"
            )));
        }
        let mu_norm = norm(&mu);
        let mut smu = mu.clone();
        sigma.sqrt_apply(&mut smu);
        let sigma_sqrt_mu_norm = norm(&smu);
        Ok(ModelSpec {
            mu,
            sigma,
            g,
            xi,
            eta,
            mu_norm,
            sigma_sqrt_mu_norm,
        })
    }

    /// Signal of norm `mu_norm` along `e_1`: the standard sweep
    /// parameterization, since everything downstream depends on the signal
    /// only through `||mu||` and `||Sigma^{1/2} mu||`.
    pub fn with_mu_along_e1(
        mu_norm: f64,
        sigma: SigmaSpec,
        g: GSpec,
        xi: XiSpec,
        eta: f64,
    ) -> Result<Self, SamplerError> {
        if !(mu_norm >= 0.0) {
            return Err(SamplerError::InvalidParam(format!(
                "signal norm must be nonnegative, got {mu_norm}"
            )));
        }
        let mut mu = vec![0.0; sigma.p()];
        mu[0] = mu_norm;
        ModelSpec::new(mu, sigma, g, xi, eta)
    }

    pub fn p(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &SigmaSpec {
        &self.sigma
    }

    pub fn g(&self) -> &GSpec {
        &self.g
    }

    pub fn xi(&self) -> &XiSpec {
        &self.xi
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn mu_norm(&self) -> f64 {
        self.mu_norm
    }

    /// `||Sigma^{1/2} mu||`.
    pub fn sigma_sqrt_mu_norm(&self) -> f64 {
        self.sigma_sqrt_mu_norm
    }

    /// Inverse-norm scale `rho = E[g^-2] / Tr(Sigma)`.
    pub fn rho(&self) -> f64 {
        self.g.inv_second_moment() / self.sigma.trace()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSpecRaw {
    mu: Vec<f64>,
    sigma: SigmaRaw,
    g: GSpecRaw,
    xi: XiSpecRaw,
    eta: f64,
}

impl TryFrom<ModelSpecRaw> for ModelSpec {
    type Error = SamplerError;

    fn try_from(raw: ModelSpecRaw) -> Result<Self, Self::Error> {
        ModelSpec::new(
            raw.mu,
            SigmaSpec::try_from(raw.sigma)?,
            GSpec::try_from(raw.g)?,
            XiSpec::try_from(raw.xi)?,
            raw.eta,
        )
    }
}

impl From<ModelSpec> for ModelSpecRaw {
    fn from(spec: ModelSpec) -> Self {
        ModelSpecRaw {
            mu: spec.mu,
            sigma: spec.sigma.into(),
            g: spec.g.into(),
            xi: spec.xi.into(),
            eta: spec.eta,
        }
    }
}

// ---------------------------------------------------------------------------
// Datasets

/// A sampled training set, keeping the internal noise factors for event
/// diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Dataset {
    pub spec: ModelSpec,
    pub n: usize,
    pub seed: u64,
    /// Clean labels, +1 or -1.
    pub y: Vec<f64>,
    /// Observed labels after independent flips with probability `eta`.
    pub y_noisy: Vec<f64>,
    /// Scale factors, one per sample.
    pub g: Vec<f64>,
    /// `v_i = Sigma^{1/2} xi_i`.
    pub v: Vec<Vec<f64>>,
    /// `z_i = g_i * v_i`.
    pub z: Vec<Vec<f64>>,
    /// `x_i = y_i * mu + z_i`.
    pub x: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn p(&self) -> usize {
        self.spec.p()
    }

    /// Indices where the observed label differs from the clean one.
    pub fn flipped_indices(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.y[i] != self.y_noisy[i]).collect()
    }
}

/// Draws `n` independent samples. The per-sample draw order (label, scale,
/// coordinates, flip) is fixed, so identical `(spec, n, seed)` always
/// reproduce an identical dataset.
pub fn sample_dataset(spec: &ModelSpec, n: usize, seed: u64) -> Dataset {
    assert!(n >= 1, "n must be at least 1");
    let p = spec.p();
    let mut rng = rng_from_seed(seed);
    let mut xi_sampler = spec.xi.sampler();

    let mut y = Vec::with_capacity(n);
    let mut y_noisy = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);

    for _ in 0..n {
        let uy: f64 = rng.random();
        let yi = if uy < 0.5 { 1.0 } else { -1.0 };
        let gi = spec.g.sample(&mut rng);
        let mut vi = Vec::with_capacity(p);
        for _ in 0..p {
            vi.push(xi_sampler.next(&mut rng));
        }
        spec.sigma.sqrt_apply(&mut vi);
        let zi: Vec<f64> = vi.iter().map(|a| gi * a).collect();
        let xi_vec: Vec<f64> = spec
            .mu
            .iter()
            .zip(zi.iter())
            .map(|(m, zz)| yi * m + zz)
            .collect();
        // The flip variable is drawn even when eta = 0 so that datasets with
        // different eta but the same seed share their x draws.
        let uf: f64 = rng.random();
        let yni = if uf < spec.eta { -yi } else { yi };

        y.push(yi);
        y_noisy.push(yni);
        g.push(gi);
        v.push(vi);
        z.push(zi);
        x.push(xi_vec);
    }

    Dataset {
        spec: spec.clone(),
        n,
        seed,
        y,
        y_noisy,
        g,
        v,
        z,
        x,
    }
}

/// Dataset with the constant coordinate appended: `x~ = (x, 1)`,
/// `z~ = (z, 1)`, `mu~ = (mu, 0)`.
#[derive(Clone, Debug)]
pub struct ExtendedDataset {
    pub base: Dataset,
    pub x_ext: Vec<Vec<f64>>,
    pub z_ext: Vec<Vec<f64>>,
    pub mu_ext: Vec<f64>,
}

/// Appends the constant coordinate. Because norms fold left to right, the
/// identities `||z~||^2 = ||z||^2 + 1`, `||mu~|| = ||mu||` and
/// `<z~, mu~> = <z, mu>` hold bitwise, not just approximately.
pub fn extend_dataset(base: Dataset) -> ExtendedDataset {
    let append = |rows: &[Vec<f64>], tail: f64| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|row| {
                let mut ext = Vec::with_capacity(row.len() + 1);
                ext.extend_from_slice(row);
                ext.push(tail);
                ext
            })
            .collect()
    };
    let x_ext = append(&base.x, 1.0);
    let z_ext = append(&base.z, 1.0);
    let mut mu_ext = base.spec.mu().to_vec();
    mu_ext.push(0.0);
    ExtendedDataset {
        base,
        x_ext,
        z_ext,
        mu_ext,
    }
}

impl ExtendedDataset {
    pub fn n(&self) -> usize {
        self.base.n
    }

    /// Ambient dimension before extension.
    pub fn p(&self) -> usize {
        self.base.p()
    }
}

// ---------------------------------------------------------------------------
