//! The `K*` transform and Wiener integrals of step functions.
//!
//! For a step function `f = Σ_j f_j 1_[t_{j−1}, t_j)` with vector values the
//! Wiener integral against a cylindrical process pairs each value with the
//! increment coordinatewise, `i(f) = Σ_j Σ_c f_j[c] (b_{t_j} − b_{t_{j−1}})[c]`,
//! and the isometry states `E i(f)² = ∫ ‖(K* f)(r)‖² dr`.

use std::cell::RefCell;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{inner_tolerance, VolterraKernel};
use crate::quadrature::{integrate, integrate_power_tail, integrate_singular_start, Tolerance};
use crate::report::{KeyValues, ToKeyValues};
use crate::sampling::{sample_paths, PathGrid, ProcessPaths};
use crate::stats;

/// Piecewise-constant, vector-valued function on `[t_0, t_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    breakpoints: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl StepFunction {
    pub fn new(breakpoints: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.is_empty() || breakpoints.len() != values.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "step function needs n >= 1 values and n + 1 breakpoints, got {} and {}",
                values.len(),
                breakpoints.len()
            )));
        }
        if !breakpoints.iter().all(|t| t.is_finite()) || breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("breakpoints must be finite and strictly increasing".into()));
        }
        let dim = values[0].len();
        if dim == 0 {
            return Err(Error::InvalidArgument("step function values must have dimension >= 1".into()));
        }
        if let Some(v) = values.iter().find(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        Ok(StepFunction { breakpoints, values })
    }

    /// Scalar step function.
    pub fn scalar(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        Self::new(breakpoints, values.into_iter().map(|v| vec![v]).collect())
    }

    /// `1_[s, t)` in one coordinate.
    pub fn indicator(s: f64, t: f64) -> Result<Self> {
        Self::scalar(vec![s, t], vec![1.0])
    }

    /// Left-point approximation of `g` on `n` equal cells of `[a, b)`.
    pub fn from_fn<G: Fn(f64) -> Vec<f64>>(g: G, a: f64, b: f64, n: usize) -> Result<Self> {
        if n == 0 || !(b > a) {
            return Err(Error::InvalidArgument("need n >= 1 cells on a non-empty interval".into()));
        }
        let h = (b - a) / n as f64;
        let breakpoints: Vec<f64> = (0..=n).map(|k| if k == n { b } else { a + k as f64 * h }).collect();
        let values = (0..n).map(|k| g(breakpoints[k])).collect();
        Self::new(breakpoints, values)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn scale(&self, c: f64) -> Self {
        StepFunction {
            breakpoints: self.breakpoints.clone(),
            values: self.values.iter().map(|v| v.iter().map(|x| c * x).collect()).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().flatten().all(|&x| x == 0.0)
    }
}

/// `∫_a^b ∂K/∂u(u, r) du` for `r ≤ a < b`.
fn piece_integral(kernel: &VolterraKernel, a: f64, b: f64, r: f64, tol: Tolerance) -> Result<f64> {
    if kernel.has_exact_antiderivative() {
        return Ok(kernel.eval(b, r) - kernel.eval(a, r));
    }
    if a == r {
        integrate_singular_start(|s| kernel.deriv_at_separation(r + s, s), b - r, kernel.alpha(), tol).map(|e| e.value)
    } else {
        integrate(|u| kernel.deriv_u(u, r), &[a, b], tol).map(|e| e.value)
    }
}

/// `(K* f)(r) = ∫_r^∞ f(u) ∂K/∂u(u, r) du`, one entry per coordinate.
pub fn kstar_transform(kernel: &VolterraKernel, f: &StepFunction, r: f64, tol: Tolerance) -> Result<Vec<f64>> {
    let mut out = vec![0.0; f.dim()];
    for (j, fj) in f.values.iter().enumerate() {
        let (lo, hi) = (f.breakpoints[j], f.breakpoints[j + 1]);
        if hi <= r || fj.iter().all(|&x| x == 0.0) {
            continue;
        }
        let w = piece_integral(kernel, lo.max(r), hi, r, tol)?;
        for (o, x) in out.iter_mut().zip(fj) {
            *o += x * w;
        }
    }
    Ok(out)
}

/// `⟨K* f, K* g⟩_{L²(ℝ)}`, summed over coordinates.
///
/// Between consecutive breakpoints the integrand behaves like a power series
/// in `(t − r)^α` at the right end, which the map `t − r = h w^(1/α)`
/// smooths out. Below the first breakpoint it decays like `|r|^(2α−2)` and is
/// integrated to the support edge (or to `−∞`) with the power-tail map.
pub fn kstar_inner(kernel: &VolterraKernel, f: &StepFunction, g: &StepFunction, tol: Tolerance) -> Result<f64> {
    if f.dim() != g.dim() {
        return Err(Error::DimensionMismatch {
            expected: f.dim(),
            got: g.dim(),
        });
    }
    if f.is_zero() || g.is_zero() {
        return Ok(0.0);
    }
    let inner = if kernel.has_exact_antiderivative() { tol } else { inner_tolerance(tol) };
    let failure = RefCell::new(None::<Error>);
    let h = |r: f64| -> f64 {
        match (kstar_transform(kernel, f, r, inner), kstar_transform(kernel, g, r, inner)) {
            (Ok(a), Ok(b)) => a.iter().zip(&b).map(|(x, y)| x * y).sum(),
            (Err(e), _) | (_, Err(e)) => {
                failure.borrow_mut().get_or_insert(e);
                0.0
            }
        }
    };
    let mut pts: Vec<f64> = f.breakpoints.iter().chain(&g.breakpoints).copied().collect();
    let floor = kernel.support_start();
    if let Some(r0) = floor {
        pts.push(r0);
        pts.retain(|&p| p >= r0);
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    let end = f.breakpoints.last().unwrap().max(*g.breakpoints.last().unwrap());
    pts.retain(|&p| p <= end);
    if pts.len() < 2 {
        return Ok(0.0);
    }
    let alpha = kernel.alpha();
    let mut total = 0.0;
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        total += integrate_singular_start(|s| h(b - s), b - a, alpha, tol)?.value;
    }
    let left = pts[0];
    if floor.is_none() {
        let scale = end - left;
        total += integrate_power_tail(|s| h(left - s), 0.0, f64::INFINITY, scale, 2.0 - 2.0 * alpha, tol)?.value;
    }
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(total)
}

/// `‖K* f‖²_{L²(ℝ)}`.
pub fn kstar_norm_sq(kernel: &VolterraKernel, f: &StepFunction, tol: Tolerance) -> Result<f64> {
    kstar_inner(kernel, f, f, tol)
}

/// `i(f)` for every stored path, from the stored increments only.
pub fn wiener_integral(f: &StepFunction, paths: &ProcessPaths) -> Result<Vec<f64>> {
    if f.dim() != paths.dim {
        return Err(Error::DimensionMismatch {
            expected: paths.dim,
            got: f.dim(),
        });
    }
    let idx: Vec<usize> = f.breakpoints.iter().map(|&t| paths.grid.index_of(t)).collect::<Result<_>>()?;
    Ok((0..paths.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut acc = 0.0;
            for (j, fj) in f.values.iter().enumerate() {
                for (c, &x) in fj.iter().enumerate() {
                    let s = paths.series(p, c);
                    acc += x * (s[idx[j + 1]] - s[idx[j]]);
                }
            }
            acc
        })
        .collect())
}

/// Coarsest uniform grid containing every breakpoint of every function, with
/// at most `max_steps` cells.
pub fn common_grid(functions: &[&StepFunction], max_steps: usize) -> Result<PathGrid> {
    let pts: Vec<f64> = functions.iter().flat_map(|f| f.breakpoints.iter().copied()).collect();
    let lo = pts.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = pts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for m in 1..=max_steps {
        let grid = PathGrid::new(lo, (hi - lo) / m as f64, m)?;
        if pts.iter().all(|&t| grid.index_of(t).is_ok()) {
            return Ok(grid);
        }
    }
    Err(Error::InvalidArgument(format!(
        "breakpoints do not fit a uniform grid with at most {max_steps} cells"
    )))
}

/// Monte Carlo versus quadrature sides of the isometry.
#[derive(Debug, Clone, PartialEq)]
pub struct IsometryReport {
    pub lhs_mc: f64,
    pub rhs_quad: f64,
    pub stderr: f64,
    pub z: f64,
    pub ratio: f64,
    pub n_paths: usize,
    pub pass: bool,
}

impl ToKeyValues for IsometryReport {
    fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.num("lhs_mc", self.lhs_mc)
            .num("rhs_quad", self.rhs_quad)
            .num("stderr", self.stderr)
            .num("z", self.z)
            .num("ratio", self.ratio)
            .push("n_paths", self.n_paths)
            .push("pass", self.pass);
        kv
    }
}

/// Compare `E i(f)²` over `n_paths` sampled paths with `‖K* f‖²`; passes
/// within 3 standard errors.
pub fn verify_isometry(kernel: &VolterraKernel, f: &StepFunction, n_paths: usize, seed: u64, tol: Tolerance) -> Result<IsometryReport> {
    verify_bilinearity(kernel, f, f, n_paths, seed, tol)
}

/// `E i(f) i(g)` against `⟨K* f, K* g⟩`, same methodology as [`verify_isometry`].
pub fn verify_bilinearity(
    kernel: &VolterraKernel,
    f: &StepFunction,
    g: &StepFunction,
    n_paths: usize,
    seed: u64,
    tol: Tolerance,
) -> Result<IsometryReport> {
    if n_paths < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n_paths });
    }
    let rhs = kstar_inner(kernel, f, g, tol)?;
    let grid = common_grid(&[f, g], 4096)?;
    let paths = sample_paths(kernel, grid, f.dim(), n_paths, seed, tol)?;
    let a = wiener_integral(f, &paths)?;
    let b = wiener_integral(g, &paths)?;
    let prod: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let (lhs, se) = stats::mean_and_stderr(&prod);
    let z = stats::z_score(lhs, rhs, se);
    Ok(IsometryReport {
        lhs_mc: lhs,
        rhs_quad: rhs,
        stderr: se,
        z,
        ratio: if rhs != 0.0 { lhs / rhs } else if lhs == 0.0 { 1.0 } else { f64::INFINITY },
        n_paths,
        pass: z.abs() <= 3.0,
    })
}
