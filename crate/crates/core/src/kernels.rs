//! α-regular Volterra kernels, the covariance density φ(u, v) and the
//! increment covariance R(s₁, t₁, s₂, t₂).
//!
//! A kernel `K(t, r)` vanishes for `t < r`, tends to zero as `t → r⁺`, and its
//! derivative obeys `|∂K/∂u(u, r)| ≤ C (u − r)^(α−1)`. The Mandelbrot–van Ness
//! kernel carries the extra term `−c(−r)₊^α` that pins `b₀ = 0`; it is constant
//! in `t`, so it cancels from every increment, and for `r ≥ 0` the kernel
//! vanishes below the diagonal like the others. The density
//!
//! ```text
//! φ(u, v) = ∫_{−∞}^{u∧v} ∂K/∂u(u, r) ∂K/∂v(v, r) dr
//! ```
//!
//! has an integrable `|u − v|^(2α−1)` singularity on the diagonal, and the
//! increment covariance is its integral over `[s₁, t₁] × [s₂, t₂]`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::quadrature::{integrate, integrate_power_tail, integrate_singular_start, Estimate, Tolerance};
use crate::report::{KeyValues, ToKeyValues};
use crate::rng::{stream_rng, Domain};

type KernelFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Family a kernel belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind {
    /// Mandelbrot–van Ness representation of fractional Brownian motion with
    /// Hurst index `alpha + 1/2`, normalized so that `E b₁² = 1`.
    FbmMandelbrotVanNess { hurst: f64 },
    /// `K(t, r) = (t − r)^α / α` for `0 ≤ r < t`: the process starts at time 0.
    Liouville,
    UserDefined,
}

#[derive(Clone)]
enum Repr {
    Mvn { norm: f64 },
    Liouville,
    User {
        name: String,
        eval: KernelFn,
        deriv: KernelFn,
        support_start: Option<f64>,
        stationary: bool,
    },
}

/// Options for [`VolterraKernel::user_defined`].
#[derive(Debug, Clone, Copy, Default)]
pub struct UserKernelOptions {
    /// `∂K/∂u(u, r) = 0` for `r` below this value.
    pub support_start: Option<f64>,
    /// Whether φ(u, v) depends on `|u − v|` only.
    pub stationary: bool,
}

/// An α-regular Volterra kernel. Immutable once built.
#[derive(Clone)]
pub struct VolterraKernel {
    alpha: f64,
    kind: KernelKind,
    regularity_constant: f64,
    repr: Repr,
}

impl fmt::Debug for VolterraKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VolterraKernel")
            .field("name", &self.name())
            .field("alpha", &self.alpha)
            .field("regularity_constant", &self.regularity_constant)
            .finish()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 0.5 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "kernel regularity exponent must lie in (0, 1/2), got {alpha}"
        )))
    }
}

/// Normalization `c` of the Mandelbrot–van Ness kernel with `E b₁² = 1`.
///
/// With `∂K/∂u = c α (u − r)^(α−1)` the density is
/// `c² α² B(α, 1 − 2α) |u − v|^(2α−1)`, and unit variance requires that
/// prefactor to equal `H(2H − 1) = α(2α + 1)`.
fn mvn_normalization(alpha: f64) -> f64 {
    let beta = gamma(alpha) * gamma(1.0 - 2.0 * alpha) / gamma(1.0 - alpha);
    ((2.0 * alpha + 1.0) / (alpha * beta)).sqrt()
}

impl VolterraKernel {
    /// Standard fractional Brownian motion kernel, `hurst ∈ (1/2, 1)`.
    pub fn fbm(hurst: f64) -> Result<Self> {
        let alpha = hurst - 0.5;
        check_alpha(alpha)?;
        let norm = mvn_normalization(alpha);
        Ok(VolterraKernel {
            alpha,
            kind: KernelKind::FbmMandelbrotVanNess { hurst },
            regularity_constant: norm * alpha,
            repr: Repr::Mvn { norm },
        })
    }

    /// Liouville kernel with `∂K/∂u(u, r) = (u − r)^(α−1)` on `0 ≤ r < u`.
    pub fn liouville(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(VolterraKernel {
            alpha,
            kind: KernelKind::Liouville,
            regularity_constant: 1.0,
            repr: Repr::Liouville,
        })
    }

    /// A kernel given by closures for `K(t, r)` and `∂K/∂u(u, r)`.
    pub fn user_defined<E, D>(
        name: impl Into<String>,
        alpha: f64,
        eval: E,
        deriv: D,
        regularity_constant: f64,
        options: UserKernelOptions,
    ) -> Result<Self>
    where
        E: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        check_alpha(alpha)?;
        if !(regularity_constant > 0.0) {
            return Err(Error::InvalidArgument(
                "regularity constant must be positive".into(),
            ));
        }
        Ok(VolterraKernel {
            alpha,
            kind: KernelKind::UserDefined,
            regularity_constant,
            repr: Repr::User {
                name: name.into(),
                eval: Arc::new(eval),
                deriv: Arc::new(deriv),
                support_start: options.support_start,
                stationary: options.stationary,
            },
        })
    }

    /// Replace the regularity constant `C` used by [`verify_regularity`].
    pub fn with_regularity_constant(mut self, constant: f64) -> Result<Self> {
        if !(constant > 0.0) {
            return Err(Error::InvalidArgument(
                "regularity constant must be positive".into(),
            ));
        }
        self.regularity_constant = constant;
        Ok(self)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn regularity_constant(&self) -> f64 {
        self.regularity_constant
    }

    /// Short identifier used in provenance records.
    pub fn name(&self) -> String {
        match &self.repr {
            Repr::Mvn { .. } => format!("fbm-mvn(H={})", self.alpha + 0.5),
            Repr::Liouville => format!("liouville(alpha={})", self.alpha),
            Repr::User { name, .. } => name.clone(),
        }
    }

    /// `K(t, r)`.
    pub fn eval(&self, t: f64, r: f64) -> f64 {
        let a = self.alpha;
        match &self.repr {
            Repr::Mvn { norm } => {
                let pos = |x: f64| if x > 0.0 { x.powf(a) } else { 0.0 };
                norm * (pos(t - r) - pos(-r))
            }
            Repr::Liouville => {
                if r >= 0.0 && t > r {
                    (t - r).powf(a) / a
                } else {
                    0.0
                }
            }
            Repr::User { eval, .. } => {
                if t < r {
                    0.0
                } else {
                    eval(t, r)
                }
            }
        }
    }

    /// `∂K/∂u(u, r)`, zero for `u ≤ r`.
    pub fn deriv_u(&self, u: f64, r: f64) -> f64 {
        if u <= r {
            return 0.0;
        }
        self.deriv_at_separation(u, u - r)
    }

    /// `∂K/∂u(u, u − s)` for a separation `s > 0` supplied directly, which
    /// keeps tiny separations exact inside the quadratures.
    pub(crate) fn deriv_at_separation(&self, u: f64, s: f64) -> f64 {
        if !(s > 0.0) {
            return 0.0;
        }
        let a = self.alpha;
        match &self.repr {
            Repr::Mvn { norm } => norm * a * s.powf(a - 1.0),
            Repr::Liouville => {
                if u - s >= 0.0 {
                    s.powf(a - 1.0)
                } else {
                    0.0
                }
            }
            Repr::User {
                deriv,
                support_start,
                ..
            } => {
                let r = u - s;
                if support_start.is_some_and(|r0| r < r0) || r >= u {
                    0.0
                } else {
                    deriv(u, r)
                }
            }
        }
    }

    /// Lower end of the support of `r ↦ ∂K/∂u(u, r)`, if finite.
    pub fn support_start(&self) -> Option<f64> {
        match &self.repr {
            Repr::Mvn { .. } => None,
            Repr::Liouville => Some(0.0),
            Repr::User { support_start, .. } => *support_start,
        }
    }

    /// Whether φ(u, v) depends only on `|u − v|` (stationary increments).
    pub fn is_stationary(&self) -> bool {
        match &self.repr {
            Repr::Mvn { .. } => true,
            Repr::Liouville => false,
            Repr::User { stationary, .. } => *stationary,
        }
    }

    /// Whether `K` itself is the closed-form antiderivative of `∂K/∂u` in `u`,
    /// so that `∫_a^b ∂K/∂u(u, r) du = K(b, r) − K(a, r)` exactly.
    pub fn has_exact_antiderivative(&self) -> bool {
        !matches!(self.repr, Repr::User { .. })
    }
}

/// `φ(u, v)` by quadrature of its defining integral.
///
/// With `m = u ∧ v`, `d = |u − v|` and `s = m − r`, the integrand is
/// `∂K(m, m − s) ∂K(m + d, m − s)`. The piece `s ∈ (0, d)` carries the
/// `s^(α−1)` endpoint singularity and is mapped by `s = d w^(1/α)`; the rest,
/// out to `−∞` or to the support edge, is mapped by the power-tail substitution
/// with decay exponent `2 − 2α`, so no truncation of the lower limit is needed.
pub fn eval_phi(kernel: &VolterraKernel, u: f64, v: f64, tol: Tolerance) -> Result<f64> {
    phi_estimate(kernel, u, v, tol).map(|e| e.value)
}

fn phi_estimate(kernel: &VolterraKernel, u: f64, v: f64, tol: Tolerance) -> Result<Estimate> {
    if u == v {
        return Err(Error::DiagonalSingularity(u));
    }
    let (m, hi) = if u < v { (u, v) } else { (v, u) };
    let d = hi - m;
    let span = match kernel.support_start() {
        Some(r0) => m - r0,
        None => f64::INFINITY,
    };
    if span <= 0.0 {
        return Ok(Estimate::ZERO);
    }
    let alpha = kernel.alpha;
    let integrand = |s: f64| kernel.deriv_at_separation(m, s) * kernel.deriv_at_separation(hi, s + d);
    let near = integrate_singular_start(integrand, d.min(span), alpha, tol)?;
    if span <= d {
        return Ok(near);
    }
    let far = integrate_power_tail(integrand, d, span, d, 2.0 - 2.0 * alpha, tol)?;
    Ok(near + far)
}

/// Interval pair `[s₁, t₁] × [s₂, t₂]` for [`covariance_r`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceQuery {
    pub s1: f64,
    pub t1: f64,
    pub s2: f64,
    pub t2: f64,
}

impl CovarianceQuery {
    pub fn new(s1: f64, t1: f64, s2: f64, t2: f64) -> Result<Self> {
        let q = CovarianceQuery { s1, t1, s2, t2 };
        q.validate()?;
        Ok(q)
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.s1, self.t1, self.s2, self.t2].iter().all(|x| x.is_finite());
        if !finite || self.s1 > self.t1 || self.s2 > self.t2 {
            return Err(Error::InvalidArgument(format!(
                "covariance query needs finite s1 <= t1 and s2 <= t2, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn swapped(&self) -> Self {
        CovarianceQuery {
            s1: self.s2,
            t1: self.t2,
            s2: self.s1,
            t2: self.t1,
        }
    }
}

/// Inner tolerance for quadratures nested inside another quadrature.
pub(crate) fn inner_tolerance(tol: Tolerance) -> Tolerance {
    Tolerance::new(tol.abs * 1e-2, tol.rel * 1e-2)
}

/// `R(s₁, t₁, s₂, t₂) = ∫_{s₁}^{t₁} ∫_{s₂}^{t₂} φ(u, v) dv du`.
///
/// Stationary kernels: φ depends on the lag `d = v − u` only, so the double
/// integral collapses to `∫ φ(|d|) L(d) dd` with `L` the (piecewise linear)
/// length of the rectangle's cross-section along the lag. The `|d|^(2α−1)`
/// singularity at `d = 0` is removed by `|d| = h w^(1/(2α))`.
///
/// Other kernels: the inner integral over `v` is taken in closed form through
/// `K` (Fubini on the defining integral of φ), leaving
/// `∫_{s₁}^{t₁} ∫_{r<u} ∂K/∂u(u, r) (K(t₂, r) − K(s₂, r)) dr du`.
pub fn covariance_r(kernel: &VolterraKernel, q: &CovarianceQuery, tol: Tolerance) -> Result<f64> {
    q.validate()?;
    if q.s1 == q.t1 || q.s2 == q.t2 {
        return Ok(0.0);
    }
    if kernel.is_stationary() {
        covariance_stationary(kernel, q, tol)
    } else {
        covariance_nested(kernel, q, tol)
    }
}

fn covariance_stationary(kernel: &VolterraKernel, q: &CovarianceQuery, tol: Tolerance) -> Result<f64> {
    let CovarianceQuery { s1, t1, s2, t2 } = *q;
    let overlap = |d: f64| ((t1).min(t2 - d) - (s1).max(s2 - d)).max(0.0);
    let breaks = [s2 - t1, s2 - s1, t2 - t1, t2 - s1];
    lag_integral(kernel, overlap, &breaks, tol)
}

/// Lag-weighted integral `∫ φ(|d|) w(d) dd` for a stationary kernel over the
/// range spanned by `breaks` (the kinks of `w`; the origin is added when it
/// lies inside).
pub(crate) fn lag_integral<W: Fn(f64) -> f64>(
    kernel: &VolterraKernel,
    weight: W,
    breaks: &[f64],
    tol: Tolerance,
) -> Result<f64> {
    let cell = std::cell::RefCell::new(None::<Error>);
    let inner = inner_tolerance(tol);
    let two_alpha = 2.0 * kernel.alpha;
    let f = |d: f64| -> f64 {
        if d == 0.0 {
            return 0.0;
        }
        match phi_estimate(kernel, 0.0, d.abs(), inner) {
            Ok(e) => e.value * weight(d),
            Err(e) => {
                cell.borrow_mut().get_or_insert(e);
                0.0
            }
        }
    };
    let mut pts: Vec<f64> = breaks.to_vec();
    let lo = pts.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = pts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo < 0.0 && hi > 0.0 {
        pts.push(0.0);
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    let mut total = 0.0;
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let est = if a == 0.0 {
            integrate_singular_start(f, b, two_alpha, tol)?
        } else if b == 0.0 {
            integrate_singular_start(|s| f(-s), -a, two_alpha, tol)?
        } else {
            integrate(f, &[a, b], tol)?
        };
        total += est.value;
    }
    if let Some(e) = cell.into_inner() {
        return Err(e);
    }
    Ok(total)
}

fn covariance_nested(kernel: &VolterraKernel, q: &CovarianceQuery, tol: Tolerance) -> Result<f64> {
    let CovarianceQuery { s1, t1, s2, t2 } = *q;
    let inner_tol = inner_tolerance(tol);
    let alpha = kernel.alpha;
    let failure = std::cell::RefCell::new(None::<Error>);
    let delta_k2 = |r: f64| kernel.eval(t2, r) - kernel.eval(s2, r);

    // ∫_{r<u} ∂K/∂u(u, r) ΔK₂(r) dr, in the separation s = u − r.
    let inner = |u: f64| -> f64 {
        let span = match kernel.support_start() {
            Some(r0) => u - r0,
            None => f64::INFINITY,
        };
        if span <= 0.0 {
            return 0.0;
        }
        let mut kinks: Vec<f64> = [u - s2, u - t2]
            .into_iter()
            .filter(|&k| k > 0.0 && k < span)
            .collect();
        kinks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let first = kinks.first().copied().unwrap_or((t2 - s2).min(span));
        let g = |s: f64| kernel.deriv_at_separation(u, s) * delta_k2(u - s);
        let run = || -> Result<f64> {
            let mut total = integrate_singular_start(g, first, alpha, inner_tol)?.value;
            let mut pts = vec![first];
            pts.extend(kinks.iter().copied().filter(|&k| k > first));
            if pts.len() > 1 {
                total += integrate(g, &pts, inner_tol)?.value;
            }
            let last = *pts.last().unwrap();
            if span > last {
                total += integrate_power_tail(g, last, span, last, 2.0 - 2.0 * alpha, inner_tol)?.value;
            }
            Ok(total)
        };
        match run() {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                0.0
            }
        }
    };
    let mut pts = vec![s1];
    for b in [s2, t2] {
        if b > s1 && b < t1 {
            pts.push(b);
        }
    }
    if let Some(r0) = kernel.support_start() {
        if r0 > s1 && r0 < t1 {
            pts.push(r0);
        }
    }
    pts.push(t1);
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    let est = integrate(inner, &pts, tol)?;
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(est.value)
}

/// `R` from the kernel directly: `∫ (K(t₁, r) − K(s₁, r))(K(t₂, r) − K(s₂, r)) dr`.
///
/// An independent route to the same quantity as [`covariance_r`]; useful as a
/// cross-check for kernels without a closed-form covariance.
pub fn covariance_from_kernel(kernel: &VolterraKernel, q: &CovarianceQuery, tol: Tolerance) -> Result<f64> {
    q.validate()?;
    if q.s1 == q.t1 || q.s2 == q.t2 {
        return Ok(0.0);
    }
    let CovarianceQuery { s1, t1, s2, t2 } = *q;
    let f = |r: f64| (kernel.eval(t1, r) - kernel.eval(s1, r)) * (kernel.eval(t2, r) - kernel.eval(s2, r));
    let lo = s1.min(s2);
    let hi = t1.min(t2);
    let mut pts: Vec<f64> = vec![s1, t1, s2, t2]
        .into_iter()
        .filter(|&p| p <= hi)
        .collect();
    let floor = kernel.support_start();
    if let Some(r0) = floor {
        pts.retain(|&p| p >= r0);
        if r0 < hi {
            pts.push(r0.max(lo.min(r0)));
        }
    }
    pts.push(hi);
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    let mut total = integrate(f, &pts, tol)?.value;
    let left = pts[0];
    match floor {
        Some(r0) if r0 >= left => {}
        Some(r0) => total += integrate(f, &[r0, left], tol)?.value,
        None => {
            let scale = (t1 - s1).max(t2 - s2);
            let tail = integrate_power_tail(|s| f(left - s), 0.0, f64::INFINITY, scale, 2.0 - 2.0 * kernel.alpha, tol)?;
            total += tail.value;
        }
    }
    Ok(total)
}

/// Outcome of [`verify_regularity`].
#[derive(Debug, Clone, PartialEq)]
pub struct RegularityReport {
    pub samples: usize,
    /// `max |∂K/∂u(u, r)| (u − r)^(1−α)` over the samples.
    pub max_ratio: f64,
    /// Separation `u − r` at which the maximum was attained.
    pub argmax_separation: f64,
    pub regularity_constant: f64,
    pub pass: bool,
}

impl ToKeyValues for RegularityReport {
    fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.push("samples", self.samples)
            .num("max_ratio", self.max_ratio)
            .num("argmax_separation", self.argmax_separation)
            .num("regularity_constant", self.regularity_constant)
            .push("pass", self.pass);
        kv
    }
}

/// Sample `(u, r)` with `u − r` log-uniform in `[1e−6, 1e2]` and check the
/// derivative bound against the kernel's regularity constant.
pub fn verify_regularity(kernel: &VolterraKernel, sample_count: usize, seed: u64) -> Result<RegularityReport> {
    if sample_count == 0 {
        return Err(Error::InvalidArgument("sample_count must be positive".into()));
    }
    let mut rng = stream_rng(seed, Domain::Regularity, 0);
    let base = kernel.support_start().unwrap_or(-10.0);
    let mut max_ratio = 0.0f64;
    let mut argmax = f64::NAN;
    for _ in 0..sample_count {
        let gap = 10f64.powf(rng.random_range(-6.0..2.0));
        let r = base + rng.random_range(0.0..20.0);
        let u = r + gap;
        let sep = u - r;
        if !(sep > 0.0) {
            continue;
        }
        let ratio = kernel.deriv_u(u, r).abs() * sep.powf(1.0 - kernel.alpha);
        if ratio > max_ratio || argmax.is_nan() {
            max_ratio = max_ratio.max(ratio);
            argmax = sep;
        }
    }
    let c = kernel.regularity_constant;
    Ok(RegularityReport {
        samples: sample_count,
        max_ratio,
        argmax_separation: argmax,
        regularity_constant: c,
        pass: max_ratio.is_finite() && max_ratio <= c * (1.0 + 1e-9),
    })
}

/// Empirical constant `C'` in `|φ(u, v)| ≤ C' |u − v|^(2α−1)`, maximized over
/// `sample_count` random off-diagonal points with `|u − v| ∈ [1e−3, 10]`.
pub fn phi_bound_constant(kernel: &VolterraKernel, sample_count: usize, seed: u64, tol: Tolerance) -> Result<f64> {
    let mut rng = stream_rng(seed, Domain::Regularity, 1);
    let base = kernel.support_start().unwrap_or(-5.0);
    let mut c = 0.0f64;
    for _ in 0..sample_count {
        let u = base + rng.random_range(0.0..10.0);
        let d = 10f64.powf(rng.random_range(-3.0..1.0));
        let phi = eval_phi(kernel, u, u + d, tol)?;
        c = c.max(phi.abs() / d.powf(2.0 * kernel.alpha - 1.0));
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fbm_closed_form(h: f64, q: &CovarianceQuery) -> f64 {
        let c = |t: f64, s: f64| 0.5 * (t.abs().powf(2.0 * h) + s.abs().powf(2.0 * h) - (t - s).abs().powf(2.0 * h));
        c(q.t1, q.t2) - c(q.t1, q.s2) - c(q.s1, q.t2) + c(q.s1, q.s2)
    }

    #[test]
    fn phi_fbm_unit_lag() {
        let k = VolterraKernel::fbm(0.75).unwrap();
        let phi = eval_phi(&k, 0.0, 1.0, Tolerance::default()).unwrap();
        assert_abs_diff_eq!(phi, 0.375, epsilon = 1e-9);
    }

    #[test]
    fn phi_is_symmetric() {
        for k in [VolterraKernel::fbm(0.7).unwrap(), VolterraKernel::liouville(0.3).unwrap()] {
            let a = eval_phi(&k, 2.0, 5.0, Tolerance::default()).unwrap();
            let b = eval_phi(&k, 5.0, 2.0, Tolerance::default()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn phi_diagonal_is_an_error() {
        let k = VolterraKernel::fbm(0.75).unwrap();
        assert_eq!(
            eval_phi(&k, 0.0, 0.0, Tolerance::default()),
            Err(Error::DiagonalSingularity(0.0))
        );
    }

    #[test]
    fn liouville_phi_vanishes_before_origin() {
        let k = VolterraKernel::liouville(0.25).unwrap();
        assert_eq!(eval_phi(&k, -1.0, 3.0, Tolerance::default()).unwrap(), 0.0);
    }

    #[test]
    fn covariance_fbm_examples() {
        let k = VolterraKernel::fbm(0.75).unwrap();
        let tol = Tolerance::default();
        let r = covariance_r(&k, &CovarianceQuery::new(0.0, 1.0, 0.0, 1.0).unwrap(), tol).unwrap();
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-6);
        let r = covariance_r(&k, &CovarianceQuery::new(0.0, 1.0, 1.0, 2.0).unwrap(), tol).unwrap();
        assert_abs_diff_eq!(r, 0.5 * (2f64.powf(1.5) - 2.0), epsilon = 1e-6);
    }

    #[test]
    fn degenerate_interval_is_zero() {
        for k in [VolterraKernel::fbm(0.6).unwrap(), VolterraKernel::liouville(0.2).unwrap()] {
            let q = CovarianceQuery::new(0.5, 0.5, 0.0, 1.0).unwrap();
            assert_eq!(covariance_r(&k, &q, Tolerance::default()).unwrap(), 0.0);
        }
    }

    #[test]
    fn invalid_query_rejected() {
        assert!(CovarianceQuery::new(1.0, 0.0, 0.0, 1.0).is_err());
        assert!(CovarianceQuery::new(0.0, f64::NAN, 0.0, 1.0).is_err());
    }

    #[test]
    fn fbm_covariance_matches_closed_form_on_mixed_queries() {
        let tol = Tolerance::default();
        for h in [0.6, 0.9] {
            let k = VolterraKernel::fbm(h).unwrap();
            for q in [
                CovarianceQuery::new(-2.0, 0.5, 0.25, 3.0).unwrap(),
                CovarianceQuery::new(0.0, 0.1, 5.0, 7.0).unwrap(),
                CovarianceQuery::new(-1.0, 1.0, -0.5, 0.5).unwrap(),
            ] {
                let r = covariance_r(&k, &q, tol).unwrap();
                assert_abs_diff_eq!(r, fbm_closed_form(h, &q), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn fbm_kernel_route_agrees() {
        let k = VolterraKernel::fbm(0.75).unwrap();
        let q = CovarianceQuery::new(0.0, 1.0, 0.5, 2.0).unwrap();
        let tol = Tolerance::default();
        let a = covariance_r(&k, &q, tol).unwrap();
        let b = covariance_from_kernel(&k, &q, tol).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-7);
        assert_abs_diff_eq!(a, fbm_closed_form(0.75, &q), epsilon = 1e-7);
    }

    #[test]
    fn liouville_nested_route_matches_kernel_route() {
        let k = VolterraKernel::liouville(0.25).unwrap();
        let tol = Tolerance::default();
        for q in [
            CovarianceQuery::new(0.0, 1.0, 0.0, 1.0).unwrap(),
            CovarianceQuery::new(0.0, 1.0, 1.0, 2.0).unwrap(),
            CovarianceQuery::new(0.5, 1.5, 0.25, 3.0).unwrap(),
            CovarianceQuery::new(-1.0, 0.5, 0.0, 0.25).unwrap(),
        ] {
            let a = covariance_r(&k, &q, tol).unwrap();
            let b = covariance_from_kernel(&k, &q, tol).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn liouville_variance_closed_form() {
        // E b_t² = ∫_0^t ((t − r)^α/α)² dr = t^{2α+1} / (α²(2α+1)).
        let a = 0.25;
        let k = VolterraKernel::liouville(a).unwrap();
        let q = CovarianceQuery::new(0.0, 1.0, 0.0, 1.0).unwrap();
        let r = covariance_r(&k, &q, Tolerance::default()).unwrap();
        assert_abs_diff_eq!(r, 1.0 / (a * a * (2.0 * a + 1.0)), epsilon = 1e-7);
    }

    #[test]
    fn regularity_examples() {
        let k = VolterraKernel::liouville(0.25).unwrap();
        let rep = verify_regularity(&k, 1000, 1).unwrap();
        assert!(rep.pass);
        assert_abs_diff_eq!(rep.max_ratio, 1.0, epsilon = 1e-12);

        let k = VolterraKernel::fbm(0.75).unwrap();
        let rep = verify_regularity(&k, 10_000, 2).unwrap();
        assert!(rep.pass && rep.max_ratio.is_finite());

        let bad = VolterraKernel::user_defined(
            "inverse",
            0.25,
            |t, r| (t - r).ln(),
            |u, r| 1.0 / (u - r),
            1.0,
            UserKernelOptions::default(),
        )
        .unwrap();
        let rep = verify_regularity(&bad, 1000, 3).unwrap();
        assert!(!rep.pass);
        assert!(rep.max_ratio > 10.0);
    }

    #[test]
    fn phi_bound_constant_fbm() {
        let k = VolterraKernel::fbm(0.75).unwrap();
        let c = phi_bound_constant(&k, 20, 5, Tolerance::default()).unwrap();
        assert_abs_diff_eq!(c, 0.375, epsilon = 1e-7);
    }

    #[test]
    fn user_kernel_matches_builtin() {
        let a = 0.25;
        let user = VolterraKernel::user_defined(
            "liouville-user",
            a,
            move |t, r| if r >= 0.0 { (t - r).powf(a) / a } else { 0.0 },
            move |u, r| (u - r).powf(a - 1.0),
            1.0,
            UserKernelOptions {
                support_start: Some(0.0),
                stationary: false,
            },
        )
        .unwrap();
        let builtin = VolterraKernel::liouville(a).unwrap();
        let tol = Tolerance::default();
        let x = eval_phi(&user, 0.5, 1.25, tol).unwrap();
        let y = eval_phi(&builtin, 0.5, 1.25, tol).unwrap();
        assert_abs_diff_eq!(x, y, epsilon = 1e-7 * y.abs());
    }
}
