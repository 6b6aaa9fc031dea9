//! Spectral realization of the neutral delay equation
//!
//! ```text
//! d/dt (x(t) − D xₜ) = A (x(t) − D xₜ) + F xₜ,   x(0) = φ₀ + D φ₁,  x₀ = φ₁,
//! ```
//!
//! with `A = diag(−λ_k)`, `D xₜ = D₁ x(t − r) + ∫_{−r}^0 d₂(θ) x(t + θ) dθ` and
//! `F` of the same shape, and of its lifting to `𝓗 = H × L²(−r, 0)`.
//!
//! Two first-order schemes march `v = x − D xₜ` on a grid with `r = m·dt`:
//!
//! * the direct scheme (exponential Euler on the variation-of-constants
//!   formula) `v⁺ = e^{A dt} v + (∫₀^{dt} e^{sA} ds) F xₜ`;
//! * the lifted scheme (forcing first, then the semigroup)
//!   `v⁺ = e^{A dt} (v + dt F xₜ)`.
//!
//! Both recover `x⁺ = v⁺ + D x⁺ₜ`. The distributed part of `D` weighs the new
//! point `x⁺` itself (trapezoid weight at `θ = 0`), so that single coupling is
//! solved by a precomputed LU factor; everything else is explicit.

use nalgebra::{DMatrix, DVector, LU};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::report::{KeyValues, ToKeyValues};
use crate::rng::{stream_rng, Domain};
use crate::solver::Trajectory;

/// Density `θ ↦ d(θ)` of a distributed delay operator on `[−r, 0]`.
#[derive(Debug, Clone, PartialEq)]
pub enum DelayDensity {
    Zero,
    Constant(DMatrix<f64>),
    /// Matrices at increasing nodes `θ_i` in `[−r, 0]`, linearly interpolated
    /// and held constant outside the node range.
    Tabulated { thetas: Vec<f64>, values: Vec<DMatrix<f64>> },
}

impl DelayDensity {
    pub fn is_zero(&self) -> bool {
        match self {
            DelayDensity::Zero => true,
            DelayDensity::Constant(m) => m.iter().all(|&x| x == 0.0),
            DelayDensity::Tabulated { values, .. } => values.iter().all(|m| m.iter().all(|&x| x == 0.0)),
        }
    }

    fn at(&self, theta: f64, n: usize) -> DMatrix<f64> {
        match self {
            DelayDensity::Zero => DMatrix::zeros(n, n),
            DelayDensity::Constant(m) => m.clone(),
            DelayDensity::Tabulated { thetas, values } => {
                let k = thetas.partition_point(|&t| t <= theta);
                if k == 0 {
                    values[0].clone()
                } else if k == thetas.len() {
                    values[k - 1].clone()
                } else {
                    let w = (theta - thetas[k - 1]) / (thetas[k] - thetas[k - 1]);
                    &values[k - 1] * (1.0 - w) + &values[k] * w
                }
            }
        }
    }

    fn validate(&self, n: usize, r: f64, name: &str) -> Result<()> {
        let check = |m: &DMatrix<f64>| {
            if m.shape() != (n, n) {
                Err(Error::InvalidArgument(format!("{name} must be {n}x{n}, got {:?}", m.shape())))
            } else if m.iter().any(|x| !x.is_finite()) {
                Err(Error::InvalidArgument(format!("{name} has non-finite entries")))
            } else {
                Ok(())
            }
        };
        match self {
            DelayDensity::Zero => Ok(()),
            DelayDensity::Constant(m) => check(m),
            DelayDensity::Tabulated { thetas, values } => {
                if thetas.is_empty() || thetas.len() != values.len() {
                    return Err(Error::InvalidArgument(format!("{name} needs one matrix per node")));
                }
                if thetas.windows(2).any(|w| w[1] <= w[0]) || thetas[0] < -r - 1e-12 || *thetas.last().unwrap() > 1e-12 {
                    return Err(Error::InvalidArgument(format!("{name} nodes must increase within [-r, 0]")));
                }
                values.iter().try_for_each(check)
            }
        }
    }
}

/// Diagonal generator, delay operators and noise operator of the equation.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSystem {
    pub eigenvalues: Vec<f64>,
    /// `min λ_k`, the decay rate of `e^{tA}`.
    pub coercivity_rate: f64,
    pub delay_r: f64,
    pub d1: DMatrix<f64>,
    pub f1: DMatrix<f64>,
    pub d2: DelayDensity,
    pub f2: DelayDensity,
    /// `N × M` map from noise coordinates to the state.
    pub noise_b: DMatrix<f64>,
}

fn check_matrix(m: &DMatrix<f64>, shape: (usize, usize), name: &str) -> Result<()> {
    if m.shape() != shape {
        return Err(Error::InvalidArgument(format!("{name} must be {}x{}, got {:?}", shape.0, shape.1, m.shape())));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} has non-finite entries")));
    }
    Ok(())
}

impl SpectralSystem {
    /// System with no delay terms and identity noise operator.
    pub fn new(eigenvalues: Vec<f64>, delay_r: f64) -> Result<Self> {
        if eigenvalues.is_empty() || eigenvalues.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::InvalidArgument("eigenvalues must be finite and strictly positive".into()));
        }
        if !(delay_r.is_finite() && delay_r > 0.0) {
            return Err(Error::InvalidArgument(format!("delay_r must be positive, got {delay_r}")));
        }
        let n = eigenvalues.len();
        Ok(SpectralSystem {
            coercivity_rate: eigenvalues.iter().copied().fold(f64::INFINITY, f64::min),
            eigenvalues,
            delay_r,
            d1: DMatrix::zeros(n, n),
            f1: DMatrix::zeros(n, n),
            d2: DelayDensity::Zero,
            f2: DelayDensity::Zero,
            noise_b: DMatrix::identity(n, n),
        })
    }

    /// One mode: `λ`, `D₁ = d1`, `F₁ = f1`, `B = b`.
    pub fn scalar(lambda: f64, delay_r: f64, d1: f64, f1: f64, b: f64) -> Result<Self> {
        Self::new(vec![lambda], delay_r)?
            .with_d1(DMatrix::from_element(1, 1, d1))?
            .with_f1(DMatrix::from_element(1, 1, f1))?
            .with_noise_b(DMatrix::from_element(1, 1, b))
    }

    /// `λ_k = k²π²`, `k = 1..=n`.
    pub fn heat_spectrum(n: usize) -> Vec<f64> {
        (1..=n).map(|k| (k as f64 * std::f64::consts::PI).powi(2)).collect()
    }

    pub fn with_d1(mut self, m: DMatrix<f64>) -> Result<Self> {
        check_matrix(&m, (self.dim(), self.dim()), "D1")?;
        self.d1 = m;
        Ok(self)
    }

    pub fn with_f1(mut self, m: DMatrix<f64>) -> Result<Self> {
        check_matrix(&m, (self.dim(), self.dim()), "F1")?;
        self.f1 = m;
        Ok(self)
    }

    pub fn with_d2(mut self, d: DelayDensity) -> Result<Self> {
        d.validate(self.dim(), self.delay_r, "D2")?;
        self.d2 = d;
        Ok(self)
    }

    pub fn with_f2(mut self, d: DelayDensity) -> Result<Self> {
        d.validate(self.dim(), self.delay_r, "F2")?;
        self.f2 = d;
        Ok(self)
    }

    pub fn with_noise_b(mut self, b: DMatrix<f64>) -> Result<Self> {
        if b.nrows() != self.dim() || b.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "noise_B must have {} rows and at least one column, got {:?}",
                self.dim(),
                b.shape()
            )));
        }
        check_matrix(&b, b.shape(), "noise_B")?;
        self.noise_b = b;
        Ok(self)
    }

    /// State dimension `N`.
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Number of noise coordinates `M`.
    pub fn noise_dim(&self) -> usize {
        self.noise_b.ncols()
    }

    pub fn has_neutral_term(&self) -> bool {
        self.d1.iter().any(|&x| x != 0.0) || !self.d2.is_zero()
    }

    pub fn has_forcing(&self) -> bool {
        self.f1.iter().any(|&x| x != 0.0) || !self.f2.is_zero()
    }

    pub fn has_noise(&self) -> bool {
        self.noise_b.iter().any(|&x| x != 0.0)
    }

    /// Number of steps per delay, `r / dt`, after validating `dt`.
    pub fn delay_steps(&self, dt: f64) -> Result<usize> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        if dt > self.delay_r * (1.0 + 1e-12) && self.has_neutral_term() {
            return Err(Error::StepLargerThanDelay { dt, r: self.delay_r });
        }
        let m = self.delay_r / dt;
        let mr = m.round();
        if mr < 1.0 || (m - mr).abs() > 1e-9 * m.max(1.0) {
            return Err(Error::DelayNotMultiple { r: self.delay_r, dt });
        }
        Ok(mr as usize)
    }
}

/// History `x(t + θ)` on the `r/dt + 1` grid slots `θ = −r, …, 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub dt: f64,
    pub dim: usize,
    values: Vec<f64>,
}

impl Segment {
    pub fn new(dt: f64, slots: &[Vec<f64>]) -> Result<Self> {
        let dim = slots.first().map(|s| s.len()).unwrap_or(0);
        if slots.is_empty() || dim == 0 || slots.iter().any(|s| s.len() != dim) {
            return Err(Error::InvalidArgument("segment slots must be non-empty with a common dimension".into()));
        }
        Ok(Segment {
            dt,
            dim,
            values: slots.concat(),
        })
    }

    pub(crate) fn from_flat(dt: f64, dim: usize, values: Vec<f64>) -> Self {
        Segment { dt, dim, values }
    }

    /// `θ ↦ f(θ)` sampled on the slots of `[−r, 0]`.
    pub fn from_fn<G: Fn(f64) -> Vec<f64>>(r: f64, dt: f64, g: G) -> Result<Self> {
        let m = (r / dt).round() as usize;
        let slots: Vec<Vec<f64>> = (0..=m).map(|i| g(-r + i as f64 * dt)).collect();
        Self::new(dt, &slots)
    }

    pub fn constant(r: f64, dt: f64, value: &[f64]) -> Result<Self> {
        Self::from_fn(r, dt, |_| value.to_vec())
    }

    pub fn zeros(r: f64, dt: f64, dim: usize) -> Result<Self> {
        Self::constant(r, dt, &vec![0.0; dim])
    }

    pub fn n_slots(&self) -> usize {
        self.values.len() / self.dim
    }

    /// Slot `i`, i.e. `θ = −r + i·dt`.
    pub fn slot(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    /// Trapezoid `L²(−r, 0)` norm squared.
    pub fn norm_sq(&self) -> f64 {
        segment_norm_sq(&self.values, self.dim, self.dt)
    }
}

fn segment_norm_sq(flat: &[f64], dim: usize, dt: f64) -> f64 {
    let slots = flat.len() / dim;
    let sq = |i: usize| flat[i * dim..(i + 1) * dim].iter().map(|x| x * x).sum::<f64>();
    let mut total = 0.5 * (sq(0) + sq(slots - 1));
    for i in 1..slots - 1 {
        total += sq(i);
    }
    total * dt
}

/// Point `(x(t) − D xₜ, xₜ)` of the lifted space.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedState {
    pub head: Vec<f64>,
    pub segment: Segment,
}

impl LiftedState {
    pub fn new(head: Vec<f64>, segment: Segment) -> Result<Self> {
        if head.len() != segment.dim {
            return Err(Error::DimensionMismatch {
                expected: segment.dim,
                got: head.len(),
            });
        }
        if head.iter().chain(&segment.values).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("lifted state must be finite".into()));
        }
        Ok(LiftedState { head, segment })
    }

    /// `‖head‖² + ‖segment‖²_{L²}`.
    pub fn norm_sq(&self) -> f64 {
        self.head.iter().map(|x| x * x).sum::<f64>() + self.segment.norm_sq()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    fn check(&self, sys: &SpectralSystem, dt: f64, m: usize) -> Result<()> {
        if self.head.len() != sys.dim() {
            return Err(Error::DimensionMismatch {
                expected: sys.dim(),
                got: self.head.len(),
            });
        }
        check_segment(&self.segment, sys, dt, m)
    }
}

fn check_segment(seg: &Segment, sys: &SpectralSystem, dt: f64, m: usize) -> Result<()> {
    if seg.dim != sys.dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.dim(),
            got: seg.dim,
        });
    }
    if (seg.dt - dt).abs() > 1e-12 * dt {
        return Err(Error::InvalidArgument(format!("segment step {} differs from solver step {dt}", seg.dt)));
    }
    match seg.n_slots().cmp(&(m + 1)) {
        std::cmp::Ordering::Less => Err(Error::SegmentUnderflow {
            expected: m + 1,
            got: seg.n_slots(),
        }),
        std::cmp::Ordering::Greater => Err(Error::DimensionMismatch {
            expected: m + 1,
            got: seg.n_slots(),
        }),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

/// `y += M x` for slices.
fn mat_vec_add(m: &DMatrix<f64>, x: &[f64], y: &mut [f64]) {
    for (j, &xj) in x.iter().enumerate() {
        if xj != 0.0 {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi += m[(i, j)] * xj;
            }
        }
    }
}

/// A delay operator `P₁ x(t − r) + ∫ p₂(θ) x(t + θ) dθ` on the solver grid.
#[derive(Debug, Clone)]
struct DelayStencil {
    point: Option<DMatrix<f64>>,
    /// Trapezoid-weighted density at slots `0..=m`.
    weights: Option<Vec<DMatrix<f64>>>,
}

impl DelayStencil {
    fn new(point: &DMatrix<f64>, density: &DelayDensity, r: f64, dt: f64, m: usize) -> Self {
        let n = point.nrows();
        let point = point.iter().any(|&x| x != 0.0).then(|| point.clone());
        let weights = (!density.is_zero()).then(|| {
            (0..=m)
                .map(|i| {
                    let c = if i == 0 || i == m { 0.5 } else { 1.0 };
                    density.at(-r + i as f64 * dt, n) * (c * dt)
                })
                .collect()
        });
        DelayStencil { point, weights }
    }

    fn is_zero(&self) -> bool {
        self.point.is_none() && self.weights.is_none()
    }

    /// Apply to the `m + 1` slots starting at `flat[start·dim..]`, omitting
    /// the `θ = 0` density term when `skip_last`.
    fn apply(&self, flat: &[f64], start: usize, dim: usize, m: usize, skip_last: bool, out: &mut [f64]) {
        let slot = |i: usize| &flat[(start + i) * dim..(start + i + 1) * dim];
        if let Some(p) = &self.point {
            mat_vec_add(p, slot(0), out);
        }
        if let Some(w) = &self.weights {
            let last = if skip_last { m } else { m + 1 };
            for (i, wi) in w.iter().enumerate().take(last) {
                mat_vec_add(wi, slot(i), out);
            }
        }
    }
}

/// The scheme used by [`march`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Direct,
    Lifted,
}

/// Precomputed step operators for one `(system, dt)` pair.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub dt: f64,
    /// Steps per delay.
    pub m: usize,
    pub dim: usize,
    decay: Vec<f64>,
    phi1: Vec<f64>,
    d: DelayStencil,
    f: DelayStencil,
    implicit: Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    noise_b: Option<DMatrix<f64>>,
}

impl Discretization {
    pub fn new(sys: &SpectralSystem, dt: f64) -> Result<Self> {
        let m = sys.delay_steps(dt)?;
        let r = sys.delay_r;
        let d = DelayStencil::new(&sys.d1, &sys.d2, r, dt, m);
        let f = DelayStencil::new(&sys.f1, &sys.f2, r, dt, m);
        let n = sys.dim();
        let implicit = d.weights.as_ref().map(|w| {
            let a = DMatrix::identity(n, n) - &w[m];
            a.lu()
        });
        if let Some(lu) = &implicit {
            if !lu.is_invertible() {
                return Err(Error::InvalidArgument("I − dt/2·d₂(0) is singular".into()));
            }
        }
        Ok(Discretization {
            dt,
            m,
            dim: n,
            decay: sys.eigenvalues.iter().map(|l| (-l * dt).exp()).collect(),
            phi1: sys.eigenvalues.iter().map(|l| -(-l * dt).exp_m1() / l).collect(),
            d,
            f,
            implicit,
            noise_b: sys.has_noise().then(|| sys.noise_b.clone()),
        })
    }

    /// `D` applied to a full segment (all `m + 1` slots).
    pub fn apply_d(&self, seg: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.d.apply(seg, 0, self.dim, self.m, false, &mut out);
        out
    }

    /// `F` applied to a full segment.
    pub fn apply_f(&self, seg: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.f.apply(seg, 0, self.dim, self.m, false, &mut out);
        out
    }

    /// `x` at the newest slot from `v` and the preceding `m` slots of the
    /// history `states`, whose last `m` slots end just before the new point.
    pub fn recover_x(&self, v: &[f64], states: &[f64]) -> Vec<f64> {
        let dim = self.dim;
        let mut rhs = v.to_vec();
        let n_slots = states.len() / dim;
        // segment of the new point starts m slots back from it
        let start = n_slots - self.m;
        self.d.apply_partial(states, start, dim, self.m, &mut rhs);
        match &self.implicit {
            Some(lu) => lu.solve(&DVector::from_vec(rhs)).expect("invertibility checked").as_slice().to_vec(),
            None => rhs,
        }
    }
}

impl DelayStencil {
    /// Like [`DelayStencil::apply`] for a segment whose last slot is not yet
    /// stored: slots `start..start + m` exist in `flat`.
    fn apply_partial(&self, flat: &[f64], start: usize, dim: usize, m: usize, out: &mut [f64]) {
        if self.is_zero() {
            return;
        }
        self.apply(flat, start, dim, m, true, out);
    }
}

/// Noise increments consumed by a stochastic run: `fill(n, out)` writes the
/// `M` coordinates of `Δb_n`.
pub type NoiseFn<'a> = &'a (dyn Fn(usize, &mut [f64]) + Sync);

/// Raw output of [`march`]: `x` on `[−r, T]` and `v` on `[0, T]`, flattened.
#[derive(Debug, Clone)]
pub struct MarchOutput {
    pub states: Vec<f64>,
    pub heads: Vec<f64>,
}

/// Advance `n_steps` from `phi` with the chosen scheme.
///
/// `x(0) = φ₀ + D φ₁` is evaluated on the initial segment including its
/// `θ = 0` slot; from then on the working history holds `x(0)` in that slot,
/// and `v(0) = φ₀`.
pub fn march(disc: &Discretization, phi: &LiftedState, n_steps: usize, scheme: Scheme, noise: Option<NoiseFn>) -> MarchOutput {
    let dim = disc.dim;
    let m = disc.m;
    let mut states = Vec::with_capacity((m + 1 + n_steps) * dim);
    states.extend_from_slice(phi.segment.as_flat());
    let mut x0 = phi.head.clone();
    disc.d.apply(phi.segment.as_flat(), 0, dim, m, false, &mut x0);
    states.truncate(m * dim);
    states.extend_from_slice(&x0);

    let mut heads = Vec::with_capacity((n_steps + 1) * dim);
    let mut v = phi.head.clone();
    heads.extend_from_slice(&v);

    let noise_dim = disc.noise_b.as_ref().map_or(0, |b| b.ncols());
    let mut db = vec![0.0; noise_dim];
    let mut fx = vec![0.0; dim];
    let mut bdb = vec![0.0; dim];
    for n in 0..n_steps {
        let has_f = !disc.f.is_zero();
        if has_f {
            fx.iter_mut().for_each(|x| *x = 0.0);
            disc.f.apply(&states, n, dim, m, false, &mut fx);
        }
        let noisy = match (noise, &disc.noise_b) {
            (Some(fill), Some(b)) => {
                fill(n, &mut db);
                bdb.iter_mut().for_each(|x| *x = 0.0);
                mat_vec_add(b, &db, &mut bdb);
                true
            }
            _ => false,
        };
        for k in 0..dim {
            let e = disc.decay[k];
            v[k] = match scheme {
                Scheme::Direct => {
                    let mut y = e * v[k];
                    if has_f {
                        y += disc.phi1[k] * fx[k];
                    }
                    if noisy {
                        y += e * bdb[k];
                    }
                    y
                }
                Scheme::Lifted => {
                    let mut y = v[k];
                    if has_f {
                        y += disc.dt * fx[k];
                    }
                    if noisy {
                        y += bdb[k];
                    }
                    e * y
                }
            };
        }
        let x = disc.recover_x(&v, &states);
        states.extend_from_slice(&x);
        heads.extend_from_slice(&v);
    }
    MarchOutput { states, heads }
}

/// Number of steps `t / dt`, which must be a non-negative integer.
pub fn steps_for(t: f64, dt: f64) -> Result<usize> {
    if t < 0.0 {
        return Err(Error::NegativeTime(t));
    }
    let n = t / dt;
    let nr = n.round();
    if (n - nr).abs() > 1e-9 * n.max(1.0) {
        return Err(Error::GridMismatch(t));
    }
    Ok(nr as usize)
}

/// `e^{tA} x`.
pub fn apply_semigroup(sys: &SpectralSystem, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    if t < 0.0 {
        return Err(Error::NegativeTime(t));
    }
    if x.len() != sys.dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.dim(),
            got: x.len(),
        });
    }
    if t == 0.0 {
        return Ok(x.to_vec());
    }
    Ok(sys.eigenvalues.iter().zip(x).map(|(l, xi)| (-l * t).exp() * xi).collect())
}

/// `D` on a segment sampled with its own step.
pub fn apply_d(sys: &SpectralSystem, seg: &Segment) -> Result<Vec<f64>> {
    let m = sys.delay_steps(seg.dt)?;
    check_segment(seg, sys, seg.dt, m)?;
    Ok(Discretization::new(sys, seg.dt)?.apply_d(seg.as_flat()))
}

/// `F` on a segment sampled with its own step.
pub fn apply_f(sys: &SpectralSystem, seg: &Segment) -> Result<Vec<f64>> {
    let m = sys.delay_steps(seg.dt)?;
    check_segment(seg, sys, seg.dt, m)?;
    Ok(Discretization::new(sys, seg.dt)?.apply_f(seg.as_flat()))
}

/// Deterministic neutral equation by the direct scheme, stored on `[−r, T]`.
pub fn solve_deterministic_neutral(sys: &SpectralSystem, phi0: &[f64], phi1: &Segment, t_end: f64, dt: f64) -> Result<Trajectory> {
    let disc = Discretization::new(sys, dt)?;
    let phi = LiftedState::new(phi0.to_vec(), phi1.clone())?;
    phi.check(sys, dt, disc.m)?;
    let n = steps_for(t_end, dt)?;
    let out = march(&disc, &phi, n, Scheme::Direct, None);
    Trajectory::from_march(sys, &disc, n, out, false, None, phi)
}

/// `G(t) h`: zero for `t < 0`, else the solution from `(h, 0)` at time `t`.
pub fn fundamental_solution(sys: &SpectralSystem, t: f64, h: &[f64], dt: f64) -> Result<Vec<f64>> {
    if h.len() != sys.dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.dim(),
            got: h.len(),
        });
    }
    if t < 0.0 {
        return Ok(vec![0.0; sys.dim()]);
    }
    let traj = solve_deterministic_neutral(sys, h, &Segment::zeros(sys.delay_r, dt, sys.dim())?, t, dt)?;
    Ok(traj.x_at_step(traj.n_forward()).to_vec())
}

/// `𝒮(t) φ` by the lifted scheme; `t = 0` returns `φ` itself.
pub fn lifted_semigroup(sys: &SpectralSystem, t: f64, phi: &LiftedState, dt: f64) -> Result<LiftedState> {
    let disc = Discretization::new(sys, dt)?;
    phi.check(sys, dt, disc.m)?;
    let n = steps_for(t, dt)?;
    if n == 0 {
        return Ok(phi.clone());
    }
    let out = march(&disc, phi, n, Scheme::Lifted, None);
    Ok(final_state(&disc, &out, n))
}

pub(crate) fn final_state(disc: &Discretization, out: &MarchOutput, n: usize) -> LiftedState {
    let dim = disc.dim;
    let seg = out.states[n * dim..(n + disc.m + 1) * dim].to_vec();
    LiftedState {
        head: out.heads[n * dim..(n + 1) * dim].to_vec(),
        segment: Segment::from_flat(disc.dt, dim, seg),
    }
}

/// Empirical `‖𝒮(t)‖ ≤ M e^{−ρt}`.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityEstimate {
    /// Smallest fitted decay rate over the probes.
    pub rho: f64,
    /// `max_t ‖𝒮(t)φ‖ e^{ρt}` over probes.
    pub m_const: f64,
    pub probe_rates: Vec<f64>,
    pub decays: bool,
}

impl ToKeyValues for StabilityEstimate {
    fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.num("rho", self.rho).num("M", self.m_const).push("decays", self.decays);
        kv
    }
}

/// Propagate `n_probes` random unit states of `𝓗` with the lifted scheme and
/// fit `log ‖𝒮(t)φ‖` by least squares over the second half of the horizon.
pub fn estimate_stability(sys: &SpectralSystem, horizon: f64, dt: f64, n_probes: usize, seed: u64) -> Result<StabilityEstimate> {
    if n_probes == 0 {
        return Err(Error::InvalidArgument("need at least one probe".into()));
    }
    let disc = Discretization::new(sys, dt)?;
    let n = steps_for(horizon, dt)?;
    if n < 4 {
        return Err(Error::InvalidArgument("stability horizon must span at least four steps".into()));
    }
    let dim = sys.dim();
    let m = disc.m;
    let mut norms_all = Vec::with_capacity(n_probes);
    let mut rates = Vec::with_capacity(n_probes);
    for probe in 0..n_probes {
        let mut rng = stream_rng(seed, Domain::StabilityProbe, probe as u64);
        let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let head = draw(dim);
        let seg = Segment::from_flat(dt, dim, draw((m + 1) * dim));
        let mut phi = LiftedState { head, segment: seg };
        let scale = 1.0 / phi.norm();
        phi.head.iter_mut().for_each(|x| *x *= scale);
        phi.segment.values.iter_mut().for_each(|x| *x *= scale);
        let out = march(&disc, &phi, n, Scheme::Lifted, None);
        let norms: Vec<f64> = (0..=n)
            .map(|k| {
                let h: f64 = out.heads[k * dim..(k + 1) * dim].iter().map(|x| x * x).sum();
                (h + segment_norm_sq(&out.states[k * dim..(k + m + 1) * dim], dim, dt)).sqrt()
            })
            .collect();
        let fit: Vec<(f64, f64)> = (n / 2..=n)
            .filter(|&k| norms[k] > 1e-250 && norms[k].is_finite())
            .map(|k| (k as f64 * dt, norms[k].ln()))
            .collect();
        let rate = if fit.len() < 2 {
            // decayed below representable range
            f64::INFINITY
        } else {
            let nf = fit.len() as f64;
            let mt = fit.iter().map(|p| p.0).sum::<f64>() / nf;
            let my = fit.iter().map(|p| p.1).sum::<f64>() / nf;
            let sxy: f64 = fit.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
            let sxx: f64 = fit.iter().map(|p| (p.0 - mt).powi(2)).sum();
            -sxy / sxx
        };
        rates.push(rate);
        norms_all.push(norms);
    }
    let rho = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let m_const = if rho.is_finite() {
        norms_all
            .iter()
            .flat_map(|ns| ns.iter().enumerate().map(|(k, v)| v * (rho * k as f64 * dt).exp()))
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max)
    } else {
        1.0
    };
    Ok(StabilityEstimate {
        rho,
        m_const,
        probe_rates: rates,
        decays: rho > 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar(d1: f64, f1: f64) -> SpectralSystem {
        SpectralSystem::scalar(1.0, 1.0, d1, f1, 1.0).unwrap()
    }

    #[test]
    fn semigroup_examples() {
        let sys = SpectralSystem::new(vec![1.0], 1.0).unwrap();
        assert_eq!(apply_semigroup(&sys, 0.0, &[3.0]).unwrap(), vec![3.0]);
        assert_abs_diff_eq!(apply_semigroup(&sys, 1.0, &[1.0]).unwrap()[0], 0.36787944117144233, epsilon = 1e-15);
        assert!(matches!(apply_semigroup(&sys, -1.0, &[1.0]), Err(Error::NegativeTime(_))));
    }

    #[test]
    fn delay_operator_examples() {
        let dt = 0.125;
        let c = [2.0];
        let seg = Segment::constant(1.0, dt, &c).unwrap();
        assert_eq!(apply_d(&scalar(0.0, 0.0), &seg).unwrap(), vec![0.0]);
        assert_eq!(apply_d(&scalar(1.0, 0.0), &seg).unwrap(), vec![2.0]);
        let w = 0.3;
        let sys = SpectralSystem::new(vec![1.0], 1.0)
            .unwrap()
            .with_d2(DelayDensity::Constant(DMatrix::from_element(1, 1, w)))
            .unwrap();
        assert_abs_diff_eq!(apply_d(&sys, &seg).unwrap()[0], w * 1.0 * 2.0, epsilon = 1e-14);
        let short = Segment::constant(0.5, dt, &c).unwrap();
        assert!(matches!(apply_d(&sys, &short), Err(Error::SegmentUnderflow { .. })));
    }

    #[test]
    fn step_and_delay_validation() {
        let sys = scalar(0.3, 0.0);
        assert!(matches!(sys.delay_steps(2.0), Err(Error::StepLargerThanDelay { .. })));
        assert!(matches!(sys.delay_steps(0.3), Err(Error::DelayNotMultiple { .. })));
        assert_eq!(sys.delay_steps(0.25).unwrap(), 4);
    }

    #[test]
    fn pure_semigroup_is_exact() {
        let sys = SpectralSystem::new(vec![1.5], 1.0).unwrap();
        let traj = solve_deterministic_neutral(&sys, &[1.0], &Segment::zeros(1.0, 0.01, 1).unwrap(), 2.0, 0.01).unwrap();
        for n in 0..=traj.n_forward() {
            let t = n as f64 * 0.01;
            assert_abs_diff_eq!(traj.x_at_step(n)[0], (-1.5 * t).exp(), epsilon = 1e-13);
        }
    }

    #[test]
    fn method_of_steps_first_interval() {
        let c = 0.5;
        let sys = scalar(0.0, c);
        let dt = 1.0 / 256.0;
        let traj = solve_deterministic_neutral(&sys, &[1.0], &Segment::constant(1.0, dt, &[1.0]).unwrap(), 1.0, dt).unwrap();
        let err = (0..=traj.n_forward())
            .map(|n| {
                let t = n as f64 * dt;
                (traj.x_at_step(n)[0] - (c + (1.0 - c) * (-t).exp())).abs()
            })
            .fold(0.0, f64::max);
        // F acts on a constant history here, so exponential Euler is exact
        assert!(err < 1e-12, "err {err}");
    }

    #[test]
    fn fundamental_solution_cases() {
        let sys = scalar(0.3, 0.5);
        assert_eq!(fundamental_solution(&sys, -0.5, &[2.0], 0.125).unwrap(), vec![0.0]);
        let plain = SpectralSystem::new(vec![2.0], 1.0).unwrap();
        let g = fundamental_solution(&plain, 1.0, &[2.0], 0.125).unwrap();
        assert_abs_diff_eq!(g[0], apply_semigroup(&plain, 1.0, &[2.0]).unwrap()[0], epsilon = 1e-14);
        let zero = Segment::zeros(1.0, 0.125, 1).unwrap();
        let traj = solve_deterministic_neutral(&sys, &[2.0], &zero, 1.5, 0.125).unwrap();
        assert_eq!(fundamental_solution(&sys, 1.5, &[2.0], 0.125).unwrap(), traj.x_at_step(12).to_vec());
    }

    #[test]
    fn lifted_identity_and_decoupled_head() {
        let dt = 0.125;
        let sys = SpectralSystem::new(vec![1.0, 3.0], 1.0).unwrap();
        let phi = LiftedState::new(vec![1.0, -2.0], Segment::constant(1.0, dt, &[0.5, 0.5]).unwrap()).unwrap();
        assert_eq!(lifted_semigroup(&sys, 0.0, &phi, dt).unwrap(), phi);
        let s = lifted_semigroup(&sys, 2.0, &phi, dt).unwrap();
        let e = apply_semigroup(&sys, 2.0, &phi.head).unwrap();
        for (a, b) in s.head.iter().zip(&e) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn lifted_semigroup_property() {
        let dt = 1.0 / 64.0;
        let sys = scalar(0.3, 0.5);
        let phi = LiftedState::new(vec![1.0], Segment::from_fn(1.0, dt, |t| vec![t.cos()]).unwrap()).unwrap();
        let a = lifted_semigroup(&sys, 1.5, &phi, dt).unwrap();
        let b = lifted_semigroup(&sys, 0.75, &lifted_semigroup(&sys, 0.75, &phi, dt).unwrap(), dt).unwrap();
        assert!((a.head[0] - b.head[0]).abs() < 1e-12);
    }

    #[test]
    fn stability_examples() {
        let sys = SpectralSystem::new(vec![2.0], 1.0).unwrap();
        let est = estimate_stability(&sys, 10.0, 1.0 / 32.0, 4, 1).unwrap();
        assert!((est.rho - 2.0).abs() < 0.1, "rho {}", est.rho);
        assert!(est.decays);
        assert!(estimate_stability(&scalar(0.0, 0.5), 20.0, 1.0 / 32.0, 4, 1).unwrap().decays);
        assert!(!estimate_stability(&scalar(0.0, 10.0), 20.0, 1.0 / 32.0, 4, 1).unwrap().decays);
    }

    #[test]
    fn zero_forcing_schemes_coincide() {
        let dt = 0.1;
        let sys = scalar(0.3, 0.0);
        let disc = Discretization::new(&sys, dt).unwrap();
        let phi = LiftedState::new(vec![1.0], Segment::constant(1.0, dt, &[0.2]).unwrap()).unwrap();
        let a = march(&disc, &phi, 50, Scheme::Direct, None);
        let b = march(&disc, &phi, 50, Scheme::Lifted, None);
        assert_eq!(a.states, b.states);
    }
}
