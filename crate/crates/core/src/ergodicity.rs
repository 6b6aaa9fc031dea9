//! Condition (H), the invariant Gaussian measure, and ergodic time averages.
//!
//! Time averages of long-memory paths are strongly autocorrelated; standard
//! errors therefore come from batch means (20 contiguous batches per path,
//! pooled over paths), and every comparison reports a z-score.

use std::io::{self, Write};

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::kernels::{eval_phi, inner_tolerance, VolterraKernel};
use crate::operators::{estimate_stability, steps_for, LiftedState, Segment, SpectralSystem};
use crate::quadrature::{integrate, integrate_singular_start, Tolerance};
use crate::report::{fmt_sig, KeyValues, ToKeyValues};
use crate::rng::{stream_rng, Domain};
use crate::sampling::{CorrelationFactor, PathGrid, PathSampler, ProcessPaths};
use crate::solver::{discretization_bias, solve_neutral_sde_with_noise, NoisePath, Trajectory};
use crate::stats;

/// Batches per path for batch-means standard errors.
pub const N_BATCHES: usize = 20;

/// `∫₀^{T₀} (Σ_{k,m} e^{−2λ_k r} B_{km}²)^{1/(1+2α)} dr`.
///
/// The integrand changes scale near `r = 1/(2λ_k)` for every mode, so the
/// range is split geometrically from `T₀` down to well below `1/(2 λ_max)`.
pub fn check_condition_h(sys: &SpectralSystem, alpha: f64, t0: f64, tol: Tolerance) -> Result<f64> {
    if !(t0 > 0.0) {
        return Err(Error::InvalidArgument(format!("T0 must be positive, got {t0}")));
    }
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1/2), got {alpha}")));
    }
    let weights: Vec<(f64, f64)> = sys
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(k, &l)| (l, sys.noise_b.row(k).iter().map(|b| b * b).sum::<f64>()))
        .filter(|&(_, w)| w > 0.0)
        .collect();
    if weights.is_empty() {
        return Ok(0.0);
    }
    let p = 1.0 / (1.0 + 2.0 * alpha);
    let f = |r: f64| weights.iter().map(|&(l, w)| w * (-2.0 * l * r).exp()).sum::<f64>().powf(p);
    let lambda_max = weights.iter().map(|w| w.0).fold(0.0, f64::max);
    let floor = 1e-3 / (2.0 * lambda_max);
    let mut pts = vec![t0];
    while *pts.last().unwrap() > floor {
        let next = pts.last().unwrap() * 0.5;
        pts.push(next);
    }
    pts.push(0.0);
    pts.reverse();
    let v = integrate(f, &pts, tol)?.value;
    if !v.is_finite() {
        return Err(Error::ConditionHViolated(format!("integral is {v}")));
    }
    Ok(v)
}

/// Single-mode value `|b|^{2/(1+2α)} (1+2α)/(2λ) (1 − e^{−2λT₀/(1+2α)})`.
pub fn condition_h_single_mode(lambda: f64, b: f64, alpha: f64, t0: f64) -> f64 {
    let q = 1.0 + 2.0 * alpha;
    b.abs().powf(2.0 / q) * q / (2.0 * lambda) * -(-2.0 * lambda * t0 / q).exp_m1()
}

/// Condition-(H) values over increasing spectral truncations.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationSequence {
    pub ns: Vec<usize>,
    pub values: Vec<f64>,
    /// `|v_{i+1} − v_i|`.
    pub gaps: Vec<f64>,
    /// `gap_i / gap_{i+1}`.
    pub gap_ratios: Vec<f64>,
    pub monotone: bool,
    /// Gaps strictly shrinking.
    pub cauchy: bool,
    /// Richardson-style limit `v_last + gap_last / (ratio_last − 1)`.
    pub extrapolated: f64,
}

impl TruncationSequence {
    /// Whether every gap shrinks by at least `factor`.
    pub fn gaps_shrink_by(&self, factor: f64) -> bool {
        self.gap_ratios.iter().all(|&r| r >= factor)
    }
}

impl ToKeyValues for TruncationSequence {
    fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        for (n, v) in self.ns.iter().zip(&self.values) {
            kv.push(format!("value[N={n}]"), format!("{v:?}"));
        }
        for (i, r) in self.gap_ratios.iter().enumerate() {
            kv.push(format!("gap_ratio[{i}]"), format!("{r:?}"));
        }
        kv.push("monotone", self.monotone)
            .push("cauchy", self.cauchy)
            .num("extrapolated", self.extrapolated)
            .push("diverging", !self.cauchy);
        kv
    }
}

/// Condition (H) for the systems `build(N)`, `N` in `ns`.
pub fn condition_h_truncations<B: Fn(usize) -> Result<SpectralSystem>>(
    build: B,
    ns: &[usize],
    alpha: f64,
    t0: f64,
    tol: Tolerance,
) -> Result<TruncationSequence> {
    let values: Vec<f64> = ns
        .iter()
        .map(|&n| check_condition_h(&build(n)?, alpha, t0, tol))
        .collect::<Result<_>>()?;
    let gaps: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let gap_ratios: Vec<f64> = gaps.windows(2).map(|w| w[0] / w[1]).collect();
    let monotone = values.windows(2).all(|w| w[1] >= w[0]) || values.windows(2).all(|w| w[1] <= w[0]);
    let cauchy = gaps.windows(2).all(|w| w[1] < w[0]);
    let last = *values.last().unwrap_or(&0.0);
    let extrapolated = match (gaps.last(), gap_ratios.last()) {
        (Some(&g), Some(&r)) if r > 1.0 => last + g.copysign(last - values[values.len() - 2]) / (r - 1.0),
        _ => last,
    };
    Ok(TruncationSequence {
        ns: ns.to_vec(),
        values,
        gaps,
        gap_ratios,
        monotone,
        cauchy,
        extrapolated,
    })
}

/// `½ Γ(2H + 1) λ^{−2H} b²`, the stationary variance of the scalar
/// fractional OU equation `dx = −λx dt + b dB^H`.
pub fn fou_stationary_variance(lambda: f64, hurst: f64, b: f64) -> f64 {
    0.5 * statrs::function::gamma::gamma(2.0 * hurst + 1.0) * lambda.powf(-2.0 * hurst) * b * b
}

/// `∫₀^∞ φ(0, d) e^{−c d} dd` for a stationary kernel.
fn laplace_of_phi(kernel: &VolterraKernel, c: f64, tol: Tolerance) -> Result<f64> {
    let inner = inner_tolerance(tol);
    let failure = std::cell::RefCell::new(None::<Error>);
    let f = |d: f64| -> f64 {
        match eval_phi(kernel, 0.0, d, inner) {
            Ok(v) => v * (-c * d).exp(),
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                0.0
            }
        }
    };
    let scale = 1.0 / c;
    let mut total = integrate_singular_start(f, scale, 2.0 * kernel.alpha(), tol)?.value;
    // e^{−60} is far below any tolerance in use
    let pts: Vec<f64> = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 60.0].iter().map(|k| k * scale).collect();
    total += integrate(f, &pts, tol)?.value;
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(total)
}

/// Covariance of the invariant measure of the delay-free equation,
/// `Q_kl = (BBᵀ)_kl ∫₀^∞∫₀^∞ e^{−λ_k u} e^{−λ_l v} φ(u, v) du dv`.
///
/// For stationary kernels the double integral reduces to
/// `(J(λ_k) + J(λ_l)) / (λ_k + λ_l)` with `J(c) = ∫₀^∞ φ(0, d) e^{−cd} dd`.
pub fn invariant_covariance(sys: &SpectralSystem, kernel: &VolterraKernel, tol: Tolerance) -> Result<DMatrix<f64>> {
    if sys.has_neutral_term() || sys.has_forcing() {
        return Err(Error::InvalidArgument("the invariant covariance is available for systems without delay terms only".into()));
    }
    if !kernel.is_stationary() {
        return Err(Error::InvalidArgument("the invariant covariance needs a kernel with stationary increments".into()));
    }
    check_condition_h(sys, kernel.alpha(), 1.0, tol)?;
    let n = sys.dim();
    let bbt = &sys.noise_b * sys.noise_b.transpose();
    if bbt.iter().all(|&x| x == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    let j: Vec<f64> = sys
        .eigenvalues
        .par_iter()
        .map(|&l| laplace_of_phi(kernel, l, tol))
        .collect::<Result<_>>()?;
    let lam = &sys.eigenvalues;
    Ok(DMatrix::from_fn(n, n, |k, l| {
        if bbt[(k, l)] == 0.0 {
            0.0
        } else {
            bbt[(k, l)] * (j[k] + j[l]) / (lam[k] + lam[l])
        }
    }))
}

/// Observable `ϱ` whose time average is tested.
#[derive(Debug, Clone, PartialEq)]
pub enum Functional {
    /// `w·x + offset`.
    Linear { weights: Vec<f64>, offset: f64 },
    /// `Σ_k w_k min(x_k², R²)`, unclipped when `clip` is `None`.
    Quadratic { weights: Vec<f64>, clip: Option<f64> },
    /// `clamp(w·x, −clip, clip)`.
    ClippedLipschitz { weights: Vec<f64>, clip: f64 },
}

impl Functional {
    pub fn weights(&self) -> &[f64] {
        match self {
            Functional::Linear { weights, .. } | Functional::Quadratic { weights, .. } | Functional::ClippedLipschitz { weights, .. } => {
                weights
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Functional::Linear { weights, offset } => weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + offset,
            Functional::Quadratic { weights, clip } => weights
                .iter()
                .zip(x)
                .map(|(w, v)| {
                    let sq = v * v;
                    w * match clip {
                        Some(c) => sq.min(c * c),
                        None => sq,
                    }
                })
                .sum(),
            Functional::ClippedLipschitz { weights, clip } => {
                weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>().clamp(-clip, *clip)
            }
        }
    }

    /// Global Lipschitz constant in the Euclidean norm, when one exists.
    pub fn lipschitz_constant(&self) -> Option<f64> {
        let norm = self.weights().iter().map(|w| w * w).sum::<f64>().sqrt();
        match self {
            Functional::Linear { .. } | Functional::ClippedLipschitz { .. } => Some(norm),
            Functional::Quadratic { clip: Some(c), .. } => Some(2.0 * c * norm),
            Functional::Quadratic { clip: None, .. } => None,
        }
    }

    /// `E ϱ(X)` for `X ~ N(0, Q)`.
    pub fn gaussian_mean(&self, q: &DMatrix<f64>) -> f64 {
        match self {
            Functional::Linear { offset, .. } => *offset,
            Functional::ClippedLipschitz { .. } => 0.0,
            Functional::Quadratic { weights, clip } => weights
                .iter()
                .enumerate()
                .map(|(k, w)| w * clipped_second_moment(q[(k, k)], *clip))
                .sum(),
        }
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if self.weights().len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.weights().len(),
            });
        }
        Ok(())
    }
}

/// `E min(X², R²)` for `X ~ N(0, σ²)`.
fn clipped_second_moment(var: f64, clip: Option<f64>) -> f64 {
    match clip {
        None => var,
        Some(_) if var <= 0.0 => 0.0,
        Some(r) => {
            let s = var.sqrt();
            let a = r / s;
            let p_in = erf(a / std::f64::consts::SQRT_2);
            let pdf = (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt();
            var * (p_in - 2.0 * a * pdf) + r * r * (1.0 - p_in)
        }
    }
}

/// Trapezoid average of `ϱ(x(t))` over `[burn_in, T]`.
pub fn time_average(traj: &Trajectory, rho: &Functional, burn_in: f64) -> Result<f64> {
    rho.check_dim(traj.dim)?;
    let n = traj.n_forward();
    let t_end = traj.time_at_step(n);
    let start = first_step_at(burn_in, traj.grid.dt);
    if start + 1 > n {
        return Err(Error::EmptyWindow { from: burn_in, to: t_end });
    }
    let ys: Vec<f64> = (start..=n).map(|k| rho.eval(traj.x_at_step(k))).collect();
    Ok(trapezoid_mean(&ys))
}

fn first_step_at(t: f64, dt: f64) -> usize {
    if t <= 0.0 {
        0
    } else {
        (t / dt - 1e-9).ceil() as usize
    }
}

/// Trapezoid mean of equally spaced samples (at least two).
fn trapezoid_mean(ys: &[f64]) -> f64 {
    let n = ys.len() - 1;
    let inner = stats::pairwise_sum(&ys[1..n]);
    (inner + 0.5 * (ys[0] + ys[n])) / n as f64
}

/// Running averages and their comparison with the reference at one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonRow {
    pub horizon: f64,
    pub running_avg: f64,
    pub reference: f64,
    pub stderr: f64,
    pub z: f64,
    /// Standard error from the spread of per-path averages, which ignores
    /// within-path correlation entirely.
    pub stderr_between_paths: f64,
    /// Median over paths of `|running average − reference|`.
    pub median_abs_dev: f64,
    /// Coupled difference and `I₁` bound of the path with the least slack
    /// (arbitrary start).
    pub coupled_diff: Option<f64>,
    pub i1_bound: Option<f64>,
}

/// Outcome of an ergodic time-average test.
#[derive(Debug, Clone, PartialEq)]
pub struct ErgodicReport {
    /// Mean over paths of the time averages at the final horizon.
    pub time_average: f64,
    /// `μ∞` space average (or the ensemble reference for delay systems).
    pub space_average: f64,
    /// Discretization bias added to the space average before comparison.
    pub bias: f64,
    pub stderr: f64,
    pub z: f64,
    pub stderr_between_paths: f64,
    pub z_between_paths: f64,
    pub rho: f64,
    pub pre_roll: f64,
    pub n_paths: usize,
    /// Whether the reference is the Gaussian `μ∞` (no delay) or an ensemble
    /// average of the same simulator.
    pub reference_kind: &'static str,
    pub horizons: Vec<HorizonRow>,
    pub i1_bound: Option<f64>,
    pub coupled_bound_holds: Option<bool>,
    /// `T` beyond which the largest `I₁` bound is below one standard error.
    pub threshold_horizon: Option<f64>,
    pub pass: bool,
}

impl ToKeyValues for ErgodicReport {
    fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.num("time_average", self.time_average)
            .num("space_average", self.space_average)
            .num("bias", self.bias)
            .num("reference", self.space_average + self.bias)
            .num("stderr", self.stderr)
            .num("z", self.z)
            .num("stderr_between_paths", self.stderr_between_paths)
            .num("z_between_paths", self.z_between_paths)
            .num("rho", self.rho)
            .num("pre_roll", self.pre_roll)
            .push("n_paths", self.n_paths)
            .push("reference_kind", self.reference_kind);
        if let Some(b) = self.i1_bound {
            kv.num("i1_bound", b);
        }
        if let Some(h) = self.coupled_bound_holds {
            kv.push("coupled_bound_holds", h);
        }
        if let Some(t) = self.threshold_horizon {
            kv.num("threshold_horizon", t);
        }
        for row in &self.horizons {
            let t = fmt_sig(row.horizon, 12);
            kv.num(format!("running_avg[T={t}]"), row.running_avg)
                .num(format!("median_abs_dev[T={t}]"), row.median_abs_dev)
                .num(format!("z[T={t}]"), row.z);
            if let (Some(d), Some(b)) = (row.coupled_diff, row.i1_bound) {
                kv.num(format!("coupled_diff[T={t}]"), d).num(format!("i1_bound[T={t}]"), b);
            }
        }
        kv.push("pass", self.pass);
        kv
    }
}

impl ErgodicReport {
    /// CSV with columns `T, running_avg, reference, z`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "T,running_avg,reference,z")?;
        for r in &self.horizons {
            writeln!(w, "{},{},{},{}", fmt_sig(r.horizon, 12), r.running_avg, r.reference, r.z)?;
        }
        Ok(())
    }
}

/// Settings shared by the ergodic tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErgodicOptions {
    /// Pre-roll length in units of `1/ρ`.
    pub pre_roll_factor: f64,
    pub stability_probes: usize,
    pub tol: Tolerance,
}

impl Default for ErgodicOptions {
    fn default() -> Self {
        ErgodicOptions {
            pre_roll_factor: 10.0,
            stability_probes: 4,
            tol: Tolerance::default(),
        }
    }
}

/// How [`stationarity_test`] starts its paths.
#[derive(Debug, Clone, PartialEq)]
pub enum StartMode {
    /// Draw from `μ∞` (when available) and pre-roll.
    Stationary,
    /// Start at the given head with a constant history and no pre-roll.
    Fixed(Vec<f64>),
}

/// Paths started near the stationary law: `t = 0` sits `n_pre` steps into a
/// noise sample on `[−T_pre, T]`.
struct Ensemble {
    noise: ProcessPaths,
    trajectories: Vec<Trajectory>,
    n_pre: usize,
    n: usize,
    rho: f64,
    pre_roll: f64,
    q: Option<DMatrix<f64>>,
}

fn decay_rate(sys: &SpectralSystem, dt: f64, seed: u64, opts: &ErgodicOptions) -> Result<f64> {
    let scale = sys.delay_r.max(1.0 / sys.coercivity_rate);
    let horizon = (10.0 * scale / dt).ceil() * dt;
    let est = estimate_stability(sys, horizon, dt, opts.stability_probes, seed)?;
    if !est.decays {
        return Err(Error::NotStable(est.rho));
    }
    Ok(est.rho.min(1e6))
}

#[allow(clippy::too_many_arguments)]
fn build_ensemble(
    sys: &SpectralSystem,
    kernel: &VolterraKernel,
    t_end: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
    start: &StartMode,
    opts: &ErgodicOptions,
) -> Result<Ensemble> {
    let n = steps_for(t_end, dt)?;
    if n < 2 {
        return Err(Error::EmptyWindow { from: 0.0, to: t_end });
    }
    check_condition_h(sys, kernel.alpha(), 1.0, opts.tol)?;
    let rho = decay_rate(sys, dt, seed, opts)?;
    let (n_pre, q) = match start {
        StartMode::Stationary => {
            let q = invariant_covariance(sys, kernel, opts.tol).ok();
            ((opts.pre_roll_factor / rho / dt).ceil() as usize, q)
        }
        StartMode::Fixed(h) => {
            if h.len() != sys.dim() {
                return Err(Error::DimensionMismatch {
                    expected: sys.dim(),
                    got: h.len(),
                });
            }
            (0, None)
        }
    };
    let grid = PathGrid::new(-(n_pre as f64) * dt, dt, n_pre + n)?;
    let noise = PathSampler::new(kernel, grid, opts.tol)?.sample(sys.noise_dim(), 0..n_paths as u64, seed)?;
    let factor = match &q {
        Some(q) => Some(CorrelationFactor::from_covariance(q)?),
        None => None,
    };
    let name = kernel.name();
    let dim = sys.dim();
    let trajectories: Vec<Trajectory> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let head = match (start, &factor) {
                (StartMode::Fixed(h), _) => h.clone(),
                (StartMode::Stationary, Some(f)) => {
                    let mut rng = stream_rng(seed, Domain::InitialState, p as u64);
                    let z: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    f.apply(&z)
                }
                (StartMode::Stationary, None) => vec![0.0; dim],
            };
            let phi = LiftedState::new(head.clone(), Segment::constant(sys.delay_r, dt, &head)?)?;
            let total = (n_pre + n) as f64 * dt;
            solve_neutral_sde_with_noise(sys, &phi, total, dt, &NoisePath::new(&noise, p, 0), &name)
        })
        .collect::<Result<_>>()?;
    Ok(Ensemble {
        noise,
        trajectories,
        n_pre,
        n,
        rho,
        pre_roll: n_pre as f64 * dt,
        q,
    })
}

/// `ϱ(x(t_k))` for `k = 0..=n` after the pre-roll.
fn observed(traj: &Trajectory, rho: &Functional, offset: usize, n: usize) -> Vec<f64> {
    (0..=n).map(|k| rho.eval(traj.x_at_step(offset + k))).collect()
}

/// Pooled batch-means standard error of the mean over paths of the time
/// averages of `series` (one per path).
fn batch_stderr(series: &[Vec<f64>]) -> f64 {
    let means: Vec<f64> = series.iter().flat_map(|s| stats::batch_means(&s[1..], N_BATCHES)).collect();
    if means.len() < 2 {
        return f64::NAN;
    }
    (stats::variance(&means) / means.len() as f64).sqrt()
}

fn horizon_steps(n: usize) -> Vec<usize> {
    let mut hs = vec![n / 4, n / 2, n];
    hs.retain(|&h| h >= N_BATCHES.max(2));
    hs.dedup();
    if hs.is_empty() {
        hs.push(n);
    }
    hs
}

struct Reference {
    value: f64,
    bias: f64,
    kind: &'static str,
    extra_var: f64,
}

fn reference_for(
    sys: &SpectralSystem,
    kernel: &VolterraKernel,
    rho: &Functional,
    q: Option<&DMatrix<f64>>,
    dt: f64,
    finals: &[f64],
    tol: Tolerance,
) -> Result<Reference> {
    match q {
        Some(q) => {
            let value = rho.gaussian_mean(q);
            // the left-point chain is exactly Gaussian with variance v_leftpoint
            let bias = match discretization_bias(sys, kernel, dt, tol) {
                Ok(b) => rho.gaussian_mean(&DMatrix::from_element(1, 1, b.v_leftpoint)) - value,
                Err(_) => 0.0,
            };
            Ok(Reference {
                value,
                bias,
                kind: "invariant-gaussian",
                extra_var: 0.0,
            })
        }
        None => {
            let (m, se) = stats::mean_and_stderr(finals);
            Ok(Reference {
                value: m,
                bias: 0.0,
                kind: "ensemble",
                extra_var: se * se,
            })
        }
    }
}

/// Time averages from a stationary start compared with the `μ∞` average.
#[allow(clippy::too_many_arguments)]
pub fn ergodic_test_stationary(
    sys: &SpectralSystem,
    kernel: &VolterraKernel,
    rho: &Functional,
    t_end: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
    opts: &ErgodicOptions,
) -> Result<ErgodicReport> {
    rho.check_dim(sys.dim())?;
    if n_paths < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n_paths });
    }
    let ens = build_ensemble(sys, kernel, t_end, dt, n_paths, seed, &StartMode::Stationary, opts)?;
    let series: Vec<Vec<f64>> = ens.trajectories.iter().map(|t| observed(t, rho, ens.n_pre, ens.n)).collect();
    let finals: Vec<f64> = series.iter().map(|s| *s.last().unwrap()).collect();
    let reference = reference_for(sys, kernel, rho, ens.q.as_ref(), dt, &finals, opts.tol)?;
    let target = reference.value + reference.bias;
    let horizons: Vec<HorizonRow> = horizon_steps(ens.n)
        .into_iter()
        .map(|h| {
            let prefix: Vec<Vec<f64>> = series.iter().map(|s| s[..=h].to_vec()).collect();
            let avgs: Vec<f64> = prefix.iter().map(|s| trapezoid_mean(s)).collect();
            let avg = stats::mean(&avgs);
            let se = (batch_stderr(&prefix).powi(2) + reference.extra_var).sqrt();
            let devs: Vec<f64> = avgs.iter().map(|a| (a - target).abs()).collect();
            HorizonRow {
                horizon: h as f64 * dt,
                running_avg: avg,
                reference: target,
                stderr: se,
                z: stats::z_score(avg, target, se),
                stderr_between_paths: (stats::mean_and_stderr(&avgs).1.powi(2) + reference.extra_var).sqrt(),
                median_abs_dev: stats::median(&devs),
                coupled_diff: None,
                i1_bound: None,
            }
        })
        .collect();
    let last = horizons.last().unwrap().clone();
    Ok(ErgodicReport {
        time_average: last.running_avg,
        space_average: reference.value,
        bias: reference.bias,
        stderr: last.stderr,
        z: last.z,
        stderr_between_paths: last.stderr_between_paths,
        z_between_paths: stats::z_score(last.running_avg, target, last.stderr_between_paths),
        rho: ens.rho,
        pre_roll: ens.pre_roll,
        n_paths,
        reference_kind: reference.kind,
        horizons,
        i1_bound: None,
        coupled_bound_holds: None,
        threshold_horizon: None,
        pass: last.z.abs() <= 3.0,
    })
}

/// `L ‖Δ‖ (1 − e^{−ρT}) / (ρT)`.
pub fn i1_bound(lipschitz: f64, delta_norm: f64, rho: f64, t: f64) -> f64 {
    lipschitz * delta_norm * -(-rho * t).exp_m1() / (rho * t)
}

/// Time averages from `x0`, coupled to a stationary-start path on the same
/// noise. Checks the `I₁` bound on the coupled difference at every horizon
/// and the final deviation from the reference at 3σ.
#[allow(clippy::too_many_arguments)]
pub fn ergodic_test_arbitrary(
    sys: &SpectralSystem,
    kernel: &VolterraKernel,
    x0: &LiftedState,
    rho: &Functional,
    t_end: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
    opts: &ErgodicOptions,
) -> Result<ErgodicReport> {
    let lip = rho.lipschitz_constant().ok_or(Error::MissingLipschitzConstant)?;
    rho.check_dim(sys.dim())?;
    if n_paths < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n_paths });
    }
    let ens = build_ensemble(sys, kernel, t_end, dt, n_paths, seed, &StartMode::Stationary, opts)?;
    let name = kernel.name();
    let arbitrary: Vec<Trajectory> = (0..n_paths)
        .into_par_iter()
        .map(|p| solve_neutral_sde_with_noise(sys, x0, t_end, dt, &NoisePath::new(&ens.noise, p, ens.n_pre), &name))
        .collect::<Result<_>>()?;
    let series: Vec<Vec<f64>> = arbitrary.iter().map(|t| observed(t, rho, 0, ens.n)).collect();
    let coupled: Vec<Vec<f64>> = ens.trajectories.iter().map(|t| observed(t, rho, ens.n_pre, ens.n)).collect();
    // ‖x(0) − x̃(0)‖ with x(0) = φ₀ + Dφ₁ for both starts
    let deltas: Vec<f64> = arbitrary
        .iter()
        .zip(&ens.trajectories)
        .map(|(a, s)| {
            a.x_at_step(0)
                .iter()
                .zip(s.x_at_step(ens.n_pre))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let finals: Vec<f64> = series.iter().map(|s| *s.last().unwrap()).collect();
    let reference = reference_for(sys, kernel, rho, ens.q.as_ref(), dt, &finals, opts.tol)?;
    let target = reference.value + reference.bias;
    let mut bound_holds = true;
    let horizons: Vec<HorizonRow> = horizon_steps(ens.n)
        .into_iter()
        .map(|h| {
            let t = h as f64 * dt;
            let prefix: Vec<Vec<f64>> = series.iter().map(|s| s[..=h].to_vec()).collect();
            let avgs: Vec<f64> = prefix.iter().map(|s| trapezoid_mean(s)).collect();
            // the path closest to its own bound
            let mut tightest = (f64::NEG_INFINITY, 0.0, 0.0);
            for (p, a) in avgs.iter().enumerate() {
                let diff = (a - trapezoid_mean(&coupled[p][..=h])).abs();
                let bound = i1_bound(lip, deltas[p], ens.rho, t);
                if diff > bound {
                    bound_holds = false;
                }
                let slack = diff - bound;
                if slack > tightest.0 {
                    tightest = (slack, diff, bound);
                }
            }
            let avg = stats::mean(&avgs);
            let se = (batch_stderr(&prefix).powi(2) + reference.extra_var).sqrt();
            let devs: Vec<f64> = avgs.iter().map(|a| (a - target).abs()).collect();
            HorizonRow {
                horizon: t,
                running_avg: avg,
                reference: target,
                stderr: se,
                z: stats::z_score(avg, target, se),
                stderr_between_paths: (stats::mean_and_stderr(&avgs).1.powi(2) + reference.extra_var).sqrt(),
                median_abs_dev: stats::median(&devs),
                coupled_diff: Some(tightest.1),
                i1_bound: Some(tightest.2),
            }
        })
        .collect();
    let last = horizons.last().unwrap().clone();
    let max_delta = deltas.iter().copied().fold(0.0, f64::max);
    let final_bound = i1_bound(lip, max_delta, ens.rho, t_end);
    let threshold = if last.stderr > 0.0 {
        Some(lip * max_delta / (ens.rho * last.stderr))
    } else {
        None
    };
    Ok(ErgodicReport {
        time_average: last.running_avg,
        space_average: reference.value,
        bias: reference.bias,
        stderr: last.stderr,
        z: last.z,
        stderr_between_paths: last.stderr_between_paths,
        z_between_paths: stats::z_score(last.running_avg, target, last.stderr_between_paths),
        rho: ens.rho,
        pre_roll: ens.pre_roll,
        n_paths,
        reference_kind: reference.kind,
        horizons,
        i1_bound: Some(final_bound),
        coupled_bound_holds: Some(bound_holds),
        threshold_horizon: threshold,
        pass: bound_holds && last.z.abs() <= 3.0,
    })
}

/// One cross-time covariance comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct LagComparison {
    pub coord: usize,
    pub lag: f64,
    pub base_time: f64,
    pub cov_at_zero: f64,
    pub cov_at_base: f64,
    pub z: f64,
}

/// Outcome of [`stationarity_test`].
#[derive(Debug, Clone, PartialEq)]
pub struct StationarityReport {
    pub comparisons: Vec<LagComparison>,
    pub max_abs_z: f64,
    pub pass: bool,
}

impl ToKeyValues for StationarityReport {
    fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        for c in &self.comparisons {
            kv.num(
                format!("z[coord={},lag={},t={}]", c.coord, fmt_sig(c.lag, 12), fmt_sig(c.base_time, 12)),
                c.z,
            );
        }
        kv.num("max_abs_z", self.max_abs_z).push("pass", self.pass);
        kv
    }
}

impl StationarityReport {
    /// CSV with columns `coord, lag, base_time, cov_at_zero, cov_at_base, z`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "coord,lag,base_time,cov_at_zero,cov_at_base,z")?;
        for c in &self.comparisons {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                c.coord,
                fmt_sig(c.lag, 12),
                fmt_sig(c.base_time, 12),
                c.cov_at_zero,
                c.cov_at_base,
                c.z
            )?;
        }
        Ok(())
    }
}

/// `E x(t) x(t + h)` at base times `t ∈ {0, T/4, T/2}` and `n_lags` lags
/// spread over `[0, T/4]`, each later base time compared with `t = 0` by a
/// paired z-test across paths; passes when every `|z| ≤ 3`.
#[allow(clippy::too_many_arguments)]
pub fn stationarity_test(
    sys: &SpectralSystem,
    kernel: &VolterraKernel,
    t_end: f64,
    dt: f64,
    n_paths: usize,
    n_lags: usize,
    seed: u64,
    start: &StartMode,
    opts: &ErgodicOptions,
) -> Result<StationarityReport> {
    const MIN_PATHS: usize = 3;
    if n_paths < MIN_PATHS {
        return Err(Error::InsufficientSamples {
            needed: MIN_PATHS,
            got: n_paths,
        });
    }
    if n_lags == 0 {
        return Err(Error::InvalidArgument("need at least one lag".into()));
    }
    let ens = build_ensemble(sys, kernel, t_end, dt, n_paths, seed, start, opts)?;
    let n = ens.n;
    let lag_step = (n / 4 / n_lags).max(1);
    let bases = [n / 4, n / 2];
    let mut comparisons = Vec::new();
    for coord in 0..sys.dim() {
        for j in 0..n_lags {
            let lag = j * lag_step;
            for &b in &bases {
                if b == 0 || b + lag > n {
                    continue;
                }
                let prod = |t: &Trajectory, s: usize| t.x_at_step(ens.n_pre + s)[coord] * t.x_at_step(ens.n_pre + s + lag)[coord];
                let a: Vec<f64> = ens.trajectories.iter().map(|t| prod(t, 0)).collect();
                let c: Vec<f64> = ens.trajectories.iter().map(|t| prod(t, b)).collect();
                let d: Vec<f64> = a.iter().zip(&c).map(|(x, y)| x - y).collect();
                let (m, se) = stats::mean_and_stderr(&d);
                comparisons.push(LagComparison {
                    coord,
                    lag: lag as f64 * dt,
                    base_time: b as f64 * dt,
                    cov_at_zero: stats::mean(&a),
                    cov_at_base: stats::mean(&c),
                    z: if m == 0.0 { 0.0 } else { m / se },
                });
            }
        }
    }
    let max_abs_z = comparisons.iter().map(|c| c.z.abs()).fold(0.0, f64::max);
    Ok(StationarityReport {
        comparisons,
        max_abs_z,
        pass: max_abs_z <= 3.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_mode_condition_h() {
        let sys = SpectralSystem::scalar(2.0, 1.0, 0.0, 0.0, 1.5).unwrap();
        let tol = Tolerance::new(1e-13, 1e-12);
        let v = check_condition_h(&sys, 0.25, 1.0, tol).unwrap();
        assert!((v - condition_h_single_mode(2.0, 1.5, 0.25, 1.0)).abs() < 1e-10);
        let zero = SpectralSystem::scalar(2.0, 1.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(check_condition_h(&zero, 0.25, 1.0, tol).unwrap(), 0.0);
    }

    #[test]
    fn heat_truncations_are_monotone_cauchy() {
        let seq = condition_h_truncations(
            |n| SpectralSystem::new(SpectralSystem::heat_spectrum(n), 1.0),
            &[4, 8, 16, 32],
            0.25,
            1.0,
            Tolerance::default(),
        )
        .unwrap();
        assert!(seq.monotone && seq.cauchy, "{seq:?}");
    }

    #[test]
    fn invariant_variance_matches_fou() {
        let sys = SpectralSystem::scalar(1.0, 1.0, 0.0, 0.0, 1.0).unwrap();
        let k = VolterraKernel::fbm(0.75).unwrap();
        let q = invariant_covariance(&sys, &k, Tolerance::default()).unwrap();
        assert_relative_eq!(q[(0, 0)], 0.6646701940895686, max_relative = 1e-6);
        let zero = SpectralSystem::scalar(1.0, 1.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(invariant_covariance(&zero, &k, Tolerance::default()).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn clipped_moment_limits() {
        assert_relative_eq!(clipped_second_moment(0.7, Some(1e3)), 0.7, max_relative = 1e-12);
        assert_relative_eq!(clipped_second_moment(1e6, Some(1.0)), 1.0, max_relative = 1e-2);
    }

    #[test]
    fn lipschitz_constants() {
        let q = Functional::Quadratic {
            weights: vec![1.0],
            clip: None,
        };
        assert_eq!(q.lipschitz_constant(), None);
        let c = Functional::ClippedLipschitz {
            weights: vec![3.0, 4.0],
            clip: 2.0,
        };
        assert_eq!(c.lipschitz_constant(), Some(5.0));
        assert_eq!(c.eval(&[1.0, 1.0]), 2.0);
    }

    #[test]
    fn i1_bound_formula() {
        let b = i1_bound(1.0, 5.0, 1.0, 500.0);
        assert_eq!(b, 1.0 * 5.0 * -(-500f64).exp_m1() / 500.0);
        assert_relative_eq!(i1_bound(1.0, 5.0, 1.0, 1000.0), b / 2.0, max_relative = 1e-12);
    }
}
