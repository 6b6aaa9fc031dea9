//! Stochastic neutral delay equation driven by Volterra noise, solved directly
//! and through its lifting, and the check that both give the same `x`.
//!
//! Noise increments come from one [`ProcessPaths`] sample, so the two solvers
//! consume bitwise identical `Δb_n`. The noise term is the left-point rule
//! `e^{A dt} B Δb_n` in both schemes; they differ only in how the delay forcing
//! enters (see [`crate::operators`]), which is an `O(dt)` discrepancy.

use std::io::{self, Write};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{lag_integral, VolterraKernel};
use crate::operators::{march, steps_for, Discretization, LiftedState, MarchOutput, Scheme, Segment, SpectralSystem};
use crate::quadrature::Tolerance;
use crate::report::{fmt_sig, KeyValues, ToKeyValues};
use crate::rng::{noise_stream, stream_rng, Domain};
use crate::sampling::{increment_autocovariance, CorrelationFactor, PathGrid, PathSampler, ProcessPaths};

/// Where the noise of a run came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub kernel: String,
    pub seed: u64,
    pub path: u64,
}

/// Solution on the grid `[−r, T]`, with the lifted head `v = x − D xₜ` on
/// `[0, T]` for lifted runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: PathGrid,
    pub dim: usize,
    /// Grid steps per delay, `r / dt`.
    pub delay_slots: usize,
    pub initial: LiftedState,
    states: Vec<f64>,
    heads: Option<Vec<f64>>,
    pub provenance: Option<Provenance>,
}

impl Trajectory {
    pub(crate) fn from_march(
        sys: &SpectralSystem,
        disc: &Discretization,
        n: usize,
        out: MarchOutput,
        keep_heads: bool,
        provenance: Option<Provenance>,
        initial: LiftedState,
    ) -> Result<Self> {
        let grid = PathGrid::new(-sys.delay_r, disc.dt, disc.m + n)?;
        Ok(Trajectory {
            grid,
            dim: disc.dim,
            delay_slots: disc.m,
            initial,
            states: out.states,
            heads: keep_heads.then_some(out.heads),
            provenance,
        })
    }

    /// Number of forward steps on `[0, T]`.
    pub fn n_forward(&self) -> usize {
        self.grid.n_steps - self.delay_slots
    }

    /// `x` at grid index `k` (index 0 is `t = −r`).
    pub fn x(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    /// `x(t_n)`, `t_n = n·dt ≥ 0`.
    pub fn x_at_step(&self, n: usize) -> &[f64] {
        self.x(n + self.delay_slots)
    }

    pub fn time_at_step(&self, n: usize) -> f64 {
        n as f64 * self.grid.dt
    }

    /// `v(t_n)`, for lifted runs.
    pub fn head(&self, n: usize) -> Option<&[f64]> {
        self.heads.as_ref().map(|h| &h[n * self.dim..(n + 1) * self.dim])
    }

    pub fn has_heads(&self) -> bool {
        self.heads.is_some()
    }

    /// `xₜ` at `t_n`: the `r/dt + 1` slots ending at `t_n`.
    pub fn segment(&self, n: usize) -> Segment {
        let m = self.delay_slots;
        Segment::from_flat(self.grid.dt, self.dim, self.states[n * self.dim..(n + m + 1) * self.dim].to_vec())
    }

    /// Lifted state `(v(t_n), x_{t_n})`; `None` for direct runs.
    pub fn lifted_state(&self, n: usize) -> Option<LiftedState> {
        self.head(n).map(|h| LiftedState {
            head: h.to_vec(),
            segment: self.segment(n),
        })
    }

    pub fn states_flat(&self) -> &[f64] {
        &self.states
    }

    /// CSV with columns `t, coord, x, head`; `head` is empty before `t = 0`
    /// and for direct runs.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,coord,x,head")?;
        for k in 0..=self.grid.n_steps {
            let t = fmt_sig(self.grid.time(k), 12);
            for c in 0..self.dim {
                let head = match k.checked_sub(self.delay_slots).and_then(|n| self.head(n)) {
                    Some(h) => h[c].to_string(),
                    None => String::new(),
                };
                writeln!(w, "{t},{c},{},{head}", self.x(k)[c])?;
            }
        }
        Ok(())
    }
}

/// Increments of one sampled path, read from cell `first_cell` on.
#[derive(Debug, Clone, Copy)]
pub struct NoisePath<'a> {
    pub paths: &'a ProcessPaths,
    pub path: usize,
    pub first_cell: usize,
}

impl<'a> NoisePath<'a> {
    pub fn new(paths: &'a ProcessPaths, path: usize, first_cell: usize) -> Self {
        NoisePath { paths, path, first_cell }
    }

    fn check(&self, sys: &SpectralSystem, dt: f64, n: usize) -> Result<()> {
        if self.paths.dim != sys.noise_dim() {
            return Err(Error::DimensionMismatch {
                expected: sys.noise_dim(),
                got: self.paths.dim,
            });
        }
        if (self.paths.grid.dt - dt).abs() > 1e-12 * dt {
            return Err(Error::InvalidArgument(format!(
                "noise step {} differs from solver step {dt}",
                self.paths.grid.dt
            )));
        }
        if self.path >= self.paths.n_paths || self.first_cell + n > self.paths.grid.n_steps {
            return Err(Error::InvalidArgument("noise sample too short for the requested horizon".into()));
        }
        Ok(())
    }

    fn fill(&self, n: usize, out: &mut [f64]) {
        self.paths.increment_vector(self.path, self.first_cell + n, out);
    }

    fn provenance(&self, kernel: &str) -> Provenance {
        Provenance {
            kernel: kernel.to_string(),
            seed: self.paths.seed,
            path: self.paths.first_path + self.path as u64,
        }
    }
}

fn run_with_noise(
    sys: &SpectralSystem,
    phi: &LiftedState,
    t_end: f64,
    dt: f64,
    noise: &NoisePath,
    scheme: Scheme,
    kernel_name: &str,
) -> Result<Trajectory> {
    let disc = Discretization::new(sys, dt)?;
    let n = steps_for(t_end, dt)?;
    check_initial(phi, sys, &disc)?;
    noise.check(sys, dt, n)?;
    let fill = |k: usize, out: &mut [f64]| noise.fill(k, out);
    let out = march(&disc, phi, n, scheme, Some(&fill));
    Trajectory::from_march(
        sys,
        &disc,
        n,
        out,
        scheme == Scheme::Lifted,
        Some(noise.provenance(kernel_name)),
        phi.clone(),
    )
}

fn check_initial(phi: &LiftedState, sys: &SpectralSystem, disc: &Discretization) -> Result<()> {
    if phi.head.len() != sys.dim() || phi.segment.dim != sys.dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.dim(),
            got: phi.head.len(),
        });
    }
    if phi.segment.n_slots() < disc.m + 1 {
        return Err(Error::SegmentUnderflow {
            expected: disc.m + 1,
            got: phi.segment.n_slots(),
        });
    }
    if phi.segment.n_slots() > disc.m + 1 || (phi.segment.dt - disc.dt).abs() > 1e-12 * disc.dt {
        return Err(Error::InvalidArgument("initial segment does not match the solver grid".into()));
    }
    Ok(())
}

/// Direct exponential-Euler solution on a given noise path.
pub fn solve_neutral_sde_with_noise(sys: &SpectralSystem, phi: &LiftedState, t_end: f64, dt: f64, noise: &NoisePath, kernel_name: &str) -> Result<Trajectory> {
    run_with_noise(sys, phi, t_end, dt, noise, Scheme::Direct, kernel_name)
}

/// Lifted solution on a given noise path.
pub fn solve_lifted_with_noise(sys: &SpectralSystem, phi: &LiftedState, t_end: f64, dt: f64, noise: &NoisePath, kernel_name: &str) -> Result<Trajectory> {
    run_with_noise(sys, phi, t_end, dt, noise, Scheme::Lifted, kernel_name)
}

/// Path 0 of the `sys.noise_dim()`-coordinate noise on `[0, T]`.
pub fn sample_noise(sys: &SpectralSystem, kernel: &VolterraKernel, t_end: f64, dt: f64, seed: u64, tol: Tolerance) -> Result<ProcessPaths> {
    let n = steps_for(t_end, dt)?.max(1);
    PathSampler::new(kernel, PathGrid::new(0.0, dt, n)?, tol)?.sample(sys.noise_dim(), 0..1, seed)
}

/// Direct solver with its own noise sample (path 0 of `seed`).
pub fn solve_neutral_sde(
    sys: &SpectralSystem,
    kernel: &VolterraKernel,
    phi: &LiftedState,
    t_end: f64,
    dt: f64,
    seed: u64,
    tol: Tolerance,
) -> Result<Trajectory> {
    let noise = sample_noise(sys, kernel, t_end, dt, seed, tol)?;
    solve_neutral_sde_with_noise(sys, phi, t_end, dt, &NoisePath::new(&noise, 0, 0), &kernel.name())
}

/// Lifted solver with its own noise sample (path 0 of `seed`).
pub fn solve_lifted(
    sys: &SpectralSystem,
    kernel: &VolterraKernel,
    phi: &LiftedState,
    t_end: f64,
    dt: f64,
    seed: u64,
    tol: Tolerance,
) -> Result<Trajectory> {
    let noise = sample_noise(sys, kernel, t_end, dt, seed, tol)?;
    solve_lifted_with_noise(sys, phi, t_end, dt, &NoisePath::new(&noise, 0, 0), &kernel.name())
}

/// `x(t) = v(t) + D xₜ` rebuilt from the heads of a lifted run and its
/// initial history.
pub fn reconstruct_x(lifted: &Trajectory, sys: &SpectralSystem) -> Result<Trajectory> {
    if !lifted.has_heads() {
        return Err(Error::InvalidArgument("reconstruction needs a lifted trajectory".into()));
    }
    let disc = Discretization::new(sys, lifted.grid.dt)?;
    if disc.m != lifted.delay_slots || disc.dim != lifted.dim {
        return Err(Error::SegmentUnderflow {
            expected: disc.m + 1,
            got: lifted.delay_slots + 1,
        });
    }
    let dim = disc.dim;
    let m = disc.m;
    let n = lifted.n_forward();
    let phi = &lifted.initial;
    let mut states = Vec::with_capacity((m + 1 + n) * dim);
    states.extend_from_slice(&phi.segment.as_flat()[..m * dim]);
    let mut x0 = phi.head.clone();
    let dphi = disc.apply_d(phi.segment.as_flat());
    x0.iter_mut().zip(&dphi).for_each(|(a, b)| *a += b);
    states.extend_from_slice(&x0);
    for k in 1..=n {
        let x = disc.recover_x(lifted.head(k).unwrap(), &states);
        states.extend_from_slice(&x);
    }
    let heads: Vec<f64> = (0..=n).flat_map(|k| lifted.head(k).unwrap().to_vec()).collect();
    Ok(Trajectory {
        grid: lifted.grid,
        dim,
        delay_slots: m,
        initial: phi.clone(),
        states,
        heads: Some(heads),
        provenance: lifted.provenance.clone(),
    })
}

fn sup_distance(a: &[f64], b: &[f64], dim: usize) -> f64 {
    a.chunks(dim)
        .zip(b.chunks(dim))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Default `C` in the pass threshold `C·dt` of [`verify_equivalence`].
pub const DEFAULT_EQUIVALENCE_CONSTANT: f64 = 5.0;

/// Direct versus lifted-then-reconstructed solution on shared noise.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    /// `sup_t ‖x_direct(t) − x_reconstructed(t)‖` over `[0, T]`.
    pub sup_err_x: f64,
    /// `sup_t sup_θ ‖x_direct(t + θ) − (π₁X(t))(θ)‖`.
    pub sup_err_segment: f64,
    /// `sup ‖π₁X(t) − (π₀X)ₜ‖` over grid slots; zero by construction.
    pub segment_identity_err: f64,
    pub dt: f64,
    pub constant: f64,
    pub pass: bool,
}

impl ToKeyValues for EquivalenceReport {
    fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.num("sup_err_x", self.sup_err_x)
            .num("sup_err_segment", self.sup_err_segment)
            .num("segment_identity_err", self.segment_identity_err)
            .num("dt", self.dt)
            .num("tol", self.constant * self.dt)
            .push("pass", self.pass);
        kv
    }
}

/// Compare a direct and a lifted run on the same noise path.
pub fn compare_solutions(direct: &Trajectory, lifted: &Trajectory, sys: &SpectralSystem, constant: f64) -> Result<EquivalenceReport> {
    let rec = reconstruct_x(lifted, sys)?;
    let dim = direct.dim;
    let m = direct.delay_slots;
    let sup_err_x = sup_distance(&direct.states[m * dim..], &rec.states[m * dim..], dim);
    let sup_err_segment = sup_distance(&direct.states, &lifted.states, dim);
    let segment_identity_err = sup_distance(&lifted.states, &rec.states, dim);
    let dt = direct.grid.dt;
    Ok(EquivalenceReport {
        sup_err_x,
        sup_err_segment,
        segment_identity_err,
        dt,
        constant,
        pass: sup_err_x <= constant * dt && sup_err_segment <= constant * dt && segment_identity_err == 0.0,
    })
}

/// Run both solvers on the noise of `seed` and compare.
#[allow(clippy::too_many_arguments)]
pub fn verify_equivalence(
    sys: &SpectralSystem,
    kernel: &VolterraKernel,
    phi: &LiftedState,
    t_end: f64,
    dt: f64,
    seed: u64,
    constant: f64,
    tol: Tolerance,
) -> Result<EquivalenceReport> {
    let noise = sample_noise(sys, kernel, t_end, dt, seed, tol)?;
    let np = NoisePath::new(&noise, 0, 0);
    let name = kernel.name();
    let direct = solve_neutral_sde_with_noise(sys, phi, t_end, dt, &np, &name)?;
    let lifted = solve_lifted_with_noise(sys, phi, t_end, dt, &np, &name)?;
    compare_solutions(&direct, &lifted, sys, constant)
}

/// Equivalence errors over a sequence of halved steps, all driven by one
/// noise path sampled at the finest step.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceStudy {
    pub dts: Vec<f64>,
    pub reports: Vec<EquivalenceReport>,
    /// `log₂(e(dt) / e(dt/2))` for consecutive steps.
    pub orders: Vec<f64>,
}

impl ConvergenceStudy {
    pub fn min_order(&self) -> f64 {
        self.orders.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn decreasing(&self) -> bool {
        self.reports.windows(2).all(|w| w[1].sup_err_x < w[0].sup_err_x)
    }
}

impl ToKeyValues for ConvergenceStudy {
    fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        for (dt, r) in self.dts.iter().zip(&self.reports) {
            kv.push(format!("sup_err_x[dt={}]", fmt_sig(*dt, 12)), format!("{:?}", r.sup_err_x));
        }
        for (i, o) in self.orders.iter().enumerate() {
            kv.push(format!("order[{i}]"), format!("{o:?}"));
        }
        kv.num("min_order", self.min_order());
        kv
    }
}

/// Equivalence at each `dt` in `dts` (coarsest first, each an integer multiple
/// of the last). The initial history is sampled from `history(θ)` per grid.
#[allow(clippy::too_many_arguments)]
pub fn convergence_study(
    sys: &SpectralSystem,
    kernel: &VolterraKernel,
    phi0: &[f64],
    history: &dyn Fn(f64) -> Vec<f64>,
    t_end: f64,
    dts: &[f64],
    seed: u64,
    constant: f64,
    tol: Tolerance,
) -> Result<ConvergenceStudy> {
    let finest = *dts.last().ok_or_else(|| Error::InvalidArgument("no steps given".into()))?;
    let fine = sample_noise(sys, kernel, t_end, finest, seed, tol)?;
    let name = kernel.name();
    let mut reports = Vec::new();
    for &dt in dts {
        let factor = (dt / finest).round() as usize;
        if factor == 0 || ((dt / finest) - factor as f64).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("step {dt} is not a multiple of {finest}")));
        }
        let noise = fine.coarsen(factor)?;
        let np = NoisePath::new(&noise, 0, 0);
        let phi = LiftedState::new(phi0.to_vec(), Segment::from_fn(sys.delay_r, dt, history)?)?;
        let direct = solve_neutral_sde_with_noise(sys, &phi, t_end, dt, &np, &name)?;
        let lifted = solve_lifted_with_noise(sys, &phi, t_end, dt, &np, &name)?;
        reports.push(compare_solutions(&direct, &lifted, sys, constant)?);
    }
    let orders = reports
        .windows(2)
        .zip(dts.windows(2))
        .map(|(r, d)| (r[0].sup_err_x / r[1].sup_err_x).ln() / (d[0] / d[1]).ln())
        .collect();
    Ok(ConvergenceStudy {
        dts: dts.to_vec(),
        reports,
        orders,
    })
}

fn require_scalar_ou(sys: &SpectralSystem, kernel: &VolterraKernel) -> Result<(f64, f64)> {
    if sys.dim() != 1 || sys.noise_dim() != 1 || sys.has_neutral_term() || sys.has_forcing() {
        return Err(Error::InvalidArgument("exact mode needs a scalar system without delay terms".into()));
    }
    if !kernel.is_stationary() {
        return Err(Error::InvalidArgument("exact mode needs a kernel with stationary increments".into()));
    }
    Ok((sys.eigenvalues[0], sys.noise_b[(0, 0)]))
}

/// Autocovariance `c(k) = Cov(ξ_n, ξ_{n+k})` of the exact one-step
/// stochastic convolutions `ξ_n = ∫_{t_n}^{t_{n+1}} e^{−λ(t_{n+1} − u)} b db(u)`
/// of the scalar equation `dx = −λx dt + b db`.
pub fn exact_convolution_autocovariance(lambda: f64, b: f64, kernel: &VolterraKernel, dt: f64, n_lags: usize, tol: Tolerance) -> Result<Vec<f64>> {
    (0..n_lags)
        .into_par_iter()
        .map(|k| {
            let kd = k as f64 * dt;
            // ∫ over u ∈ [0, dt] with v = u + d ∈ [k dt, (k+1) dt]
            let weight = |d: f64| {
                let lo = 0f64.max(kd - d);
                let hi = dt.min(kd + dt - d);
                if hi <= lo {
                    return 0.0;
                }
                let base = (-lambda * (kd + 2.0 * dt - d)).exp();
                base * ((2.0 * lambda * hi).exp() - (2.0 * lambda * lo).exp()) / (2.0 * lambda)
            };
            lag_integral(kernel, weight, &[kd - dt, kd, kd + dt], tol).map(|v| b * b * v)
        })
        .collect()
}

/// `Σ_{k∈ℤ} g(|k|) ρ^{|k|} / (1 − ρ²)`: stationary variance of `x⁺ = ρx + η`
/// for a stationary input sequence with autocovariance `g`.
fn ar1_stationary_variance(g: &[f64], rho: f64) -> f64 {
    let mut total = g[0];
    let mut p = 1.0;
    for gk in &g[1..] {
        p *= rho;
        total += 2.0 * gk * p;
    }
    total / (1.0 - rho * rho)
}

/// Stationary variances of the left-point scheme and of the exact recursion
/// for the scalar fractional OU equation at step `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizationBias {
    pub dt: f64,
    pub v_leftpoint: f64,
    pub v_exact: f64,
    /// `v_leftpoint − v_exact`.
    pub bias: f64,
    pub lags: usize,
}

impl ToKeyValues for DiscretizationBias {
    fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.num("dt", self.dt)
            .num("v_leftpoint", self.v_leftpoint)
            .num("v_exact", self.v_exact)
            .num("bias", self.bias)
            .push("lags", self.lags);
        kv
    }
}

/// Bias of the left-point scheme's stationary second moment against the exact
/// recursion `x⁺ = e^{−λdt} x + ξ`, both summed over lags until `e^{−λ k dt}`
/// drops below 1e-17.
pub fn discretization_bias(sys: &SpectralSystem, kernel: &VolterraKernel, dt: f64, tol: Tolerance) -> Result<DiscretizationBias> {
    let (lambda, b) = require_scalar_ou(sys, kernel)?;
    let rho = (-lambda * dt).exp();
    let lags = ((17.0 * std::f64::consts::LN_10) / (lambda * dt)).ceil() as usize + 1;
    let gamma = increment_autocovariance(kernel, dt, lags, tol)?;
    let lp: Vec<f64> = gamma.iter().map(|g| g * b * b * rho * rho).collect();
    let v_leftpoint = ar1_stationary_variance(&lp, rho);
    let c = exact_convolution_autocovariance(lambda, b, kernel, dt, lags, tol)?;
    let v_exact = ar1_stationary_variance(&c, rho);
    Ok(DiscretizationBias {
        dt,
        v_leftpoint,
        v_exact,
        bias: v_leftpoint - v_exact,
        lags,
    })
}

/// Exact-mode paths of the scalar fractional OU equation from `x(0) = x0`:
/// `x_{n+1} = e^{−λdt} x_n + ξ_n` with `(ξ_n)` drawn from its exact joint law.
/// Returns one series of `n + 1` values per path.
#[allow(clippy::too_many_arguments)]
pub fn sample_exact_scalar(
    sys: &SpectralSystem,
    kernel: &VolterraKernel,
    x0: f64,
    t_end: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
    tol: Tolerance,
) -> Result<Vec<Vec<f64>>> {
    let (lambda, b) = require_scalar_ou(sys, kernel)?;
    let n = steps_for(t_end, dt)?;
    if n == 0 {
        return Ok(vec![vec![x0]; n_paths]);
    }
    let c = exact_convolution_autocovariance(lambda, b, kernel, dt, n, tol)?;
    let factor = CorrelationFactor::from_autocovariance(&c)?;
    let rho = (-lambda * dt).exp();
    Ok((0..n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream_rng(seed, Domain::Auxiliary, noise_stream(p, 0));
            let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let xi = factor.apply(&z);
            let mut x = Vec::with_capacity(n + 1);
            x.push(x0);
            for k in 0..n {
                x.push(rho * x[k] + xi[k]);
            }
            x
        })
        .collect())
}
