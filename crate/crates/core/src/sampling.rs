//! Exact Gaussian sampling of scalar and cylindrical Volterra paths on
//! uniform grids, and second-moment tests of stationary / reflexive increments.
//!
//! Increments over the grid cells are drawn as a centered Gaussian vector with
//! the covariance `M[i][j] = R(cell i, cell j)` and cumulated into path values
//! anchored at `0` at the first grid point. Statements about the process are
//! therefore statements about increments.
//!
//! Grids of up to [`DENSE_LIMIT`] cells, and all grids of non-stationary
//! kernels, use a dense Cholesky factor. Longer grids of stationary kernels use
//! the Durbin–Levinson recursion, which generates the same lower-triangular
//! factor of the Toeplitz matrix without storing it.

use std::io::{self, Write};
use std::ops::Range;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{covariance_r, CovarianceQuery, VolterraKernel};
use crate::quadrature::Tolerance;
use crate::report::fmt_sig;
use crate::rng::{noise_stream, stream_rng, Domain};
use crate::stats;

/// Largest grid factorized densely.
pub const DENSE_LIMIT: usize = 1024;

/// Diagonal jitter levels (relative to the mean variance) tried in order when
/// a factorization fails.
pub const JITTER_LEVELS: [f64; 5] = [1e-12, 1e-11, 1e-10, 1e-9, 1e-8];

/// Uniform grid `t0 + k·dt`, `k = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl PathGrid {
    pub fn new(t0: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !t0.is_finite() || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!("grid needs finite t0 and dt > 0, got t0={t0}, dt={dt}")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidArgument("grid needs at least one step".into()));
        }
        Ok(PathGrid { t0, dt, n_steps })
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn end(&self) -> f64 {
        self.time(self.n_steps)
    }

    /// Index of the grid point `t`, tolerating rounding of order 1e-9·dt.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let x = (t - self.t0) / self.dt;
        let k = x.round();
        if (x - k).abs() > 1e-9 * x.abs().max(1.0) || k < 0.0 || k as usize > self.n_steps {
            return Err(Error::GridMismatch(t));
        }
        Ok(k as usize)
    }
}

/// `R` between the cells `[t0 + i dt, t0 + (i+1) dt]` and the cell `lag`
/// steps later, for `lag = 0..n_lags`, of a stationary kernel.
pub fn increment_autocovariance(kernel: &VolterraKernel, dt: f64, n_lags: usize, tol: Tolerance) -> Result<Vec<f64>> {
    (0..n_lags)
        .into_par_iter()
        .map(|m| {
            let s = m as f64 * dt;
            covariance_r(kernel, &CovarianceQuery::new(0.0, dt, s, s + dt)?, tol)
        })
        .collect()
}

/// Covariance of the grid increments, `M[i][j] = R(cell i, cell j)`.
pub fn increment_covariance_matrix(kernel: &VolterraKernel, grid: &PathGrid, tol: Tolerance) -> Result<DMatrix<f64>> {
    let n = grid.n_steps;
    if kernel.is_stationary() {
        let gamma = increment_autocovariance(kernel, grid.dt, n, tol)?;
        return Ok(DMatrix::from_fn(n, n, |i, j| gamma[i.abs_diff(j)]));
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let q = CovarianceQuery::new(grid.time(i), grid.time(i + 1), grid.time(j), grid.time(j + 1))?;
            covariance_r(kernel, &q, tol)
        })
        .collect::<Result<_>>()?;
    let mut m = DMatrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(values) {
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    Ok(m)
}

/// Lower-triangular map from iid standard normals to a centered Gaussian
/// vector with a prescribed covariance.
#[derive(Debug, Clone)]
pub enum CorrelationFactor {
    /// Dense Cholesky factor (row-major lower triangle).
    Dense { n: usize, lower: Vec<f64> },
    /// Autocovariance of a stationary sequence; applied by Durbin–Levinson.
    Toeplitz { gamma: Vec<f64> },
}

impl CorrelationFactor {
    /// Cholesky factor of `cov`, escalating diagonal jitter through
    /// [`JITTER_LEVELS`] on failure. Rows that are identically zero stay zero.
    pub fn from_covariance(cov: &DMatrix<f64>) -> Result<Self> {
        let n = cov.nrows();
        let mean_diag = (0..n).map(|i| cov[(i, i)]).sum::<f64>() / n as f64;
        let mut last_row = 0;
        for jitter in std::iter::once(0.0).chain(JITTER_LEVELS) {
            match cholesky(cov, jitter * mean_diag) {
                Ok(lower) => return Ok(CorrelationFactor::Dense { n, lower }),
                Err(row) => last_row = row,
            }
        }
        Err(Error::CovarianceNotPsd {
            jitter: JITTER_LEVELS[JITTER_LEVELS.len() - 1],
            row: last_row,
        })
    }

    /// Factor for a stationary sequence with autocovariance `gamma`; dense
    /// Cholesky up to [`DENSE_LIMIT`] terms, Durbin–Levinson beyond.
    pub fn from_autocovariance(gamma: &[f64]) -> Result<Self> {
        let n = gamma.len();
        if n <= DENSE_LIMIT {
            let cov = DMatrix::from_fn(n, n, |i, j| gamma[i.abs_diff(j)]);
            return Self::from_covariance(&cov);
        }
        let mut last_row = 0;
        for jitter in std::iter::once(0.0).chain(JITTER_LEVELS) {
            let mut g = gamma.to_vec();
            g[0] += jitter * gamma[0];
            match levinson_check(&g) {
                Ok(()) => return Ok(CorrelationFactor::Toeplitz { gamma: g }),
                Err(row) => last_row = row,
            }
        }
        Err(Error::CovarianceNotPsd {
            jitter: JITTER_LEVELS[JITTER_LEVELS.len() - 1],
            row: last_row,
        })
    }

    pub fn len(&self) -> usize {
        match self {
            CorrelationFactor::Dense { n, .. } => *n,
            CorrelationFactor::Toeplitz { gamma } => gamma.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Map iid normals `z` to correlated values `x = L z`.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        match self {
            CorrelationFactor::Dense { n, lower } => (0..*n)
                .map(|i| {
                    let row = &lower[i * n..i * n + i + 1];
                    row.iter().zip(&z[..=i]).map(|(a, b)| a * b).sum()
                })
                .collect(),
            CorrelationFactor::Toeplitz { gamma } => levinson_apply(gamma, z),
        }
    }
}

/// Row-major lower Cholesky factor of `cov + jitter·I`; on failure returns
/// the offending row.
fn cholesky(cov: &DMatrix<f64>, jitter: f64) -> std::result::Result<Vec<f64>, usize> {
    let n = cov.nrows();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        let zero_row = (0..n).all(|j| cov[(i, j)] == 0.0);
        if zero_row {
            continue;
        }
        for j in 0..=i {
            let mut s = cov[(i, j)];
            if i == j {
                s += jitter;
            }
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(i);
                }
                l[i * n + i] = s.sqrt();
            } else if l[j * n + j] != 0.0 {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Run the Durbin recursion and report the first index at which the
/// innovation variance is not positive.
fn levinson_check(gamma: &[f64]) -> std::result::Result<(), usize> {
    let mut coef: Vec<f64> = Vec::with_capacity(gamma.len());
    let mut v = gamma[0];
    if !(v > 0.0) {
        return Err(0);
    }
    for k in 1..gamma.len() {
        let kk = durbin_step(gamma, &mut coef, v, k);
        v *= 1.0 - kk * kk;
        if !(v > 0.0) {
            return Err(k);
        }
    }
    Ok(())
}

/// Advance the prediction coefficients from order `k−1` to order `k` and
/// return the reflection coefficient.
fn durbin_step(gamma: &[f64], coef: &mut Vec<f64>, v: f64, k: usize) -> f64 {
    let acc: f64 = coef.iter().enumerate().map(|(j, c)| c * gamma[k - 1 - j]).sum();
    let kk = (gamma[k] - acc) / v;
    let prev = coef.clone();
    for j in 0..coef.len() {
        coef[j] = prev[j] - kk * prev[prev.len() - 1 - j];
    }
    coef.push(kk);
    kk
}

/// Hosking's sequential generation: `x_k = Σ_j φ_{k,j} x_{k−j} + √v_k z_k`.
fn levinson_apply(gamma: &[f64], z: &[f64]) -> Vec<f64> {
    let n = gamma.len();
    let mut x = Vec::with_capacity(n);
    let mut coef: Vec<f64> = Vec::with_capacity(n);
    let mut v = gamma[0];
    x.push(v.sqrt() * z[0]);
    for k in 1..n {
        let kk = durbin_step(gamma, &mut coef, v, k);
        v *= 1.0 - kk * kk;
        // coef[j] multiplies x_{k-1-j}
        let pred: f64 = coef.iter().enumerate().map(|(j, c)| c * x[k - 1 - j]).sum();
        x.push(pred + v.sqrt() * z[k]);
    }
    x
}

/// Seeded Gaussian sample paths, indexed `(path, coordinate, grid point)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessPaths {
    pub grid: PathGrid,
    pub dim: usize,
    pub n_paths: usize,
    /// Global id of the first stored path.
    pub first_path: u64,
    pub seed: u64,
    values: Vec<f64>,
}

impl ProcessPaths {
    fn offset(&self, path: usize, coord: usize) -> usize {
        (path * self.dim + coord) * (self.grid.n_steps + 1)
    }

    /// Path values of one coordinate on all grid points.
    pub fn series(&self, path: usize, coord: usize) -> &[f64] {
        let o = self.offset(path, coord);
        &self.values[o..o + self.grid.n_steps + 1]
    }

    pub fn value(&self, path: usize, coord: usize, k: usize) -> f64 {
        self.values[self.offset(path, coord) + k]
    }

    /// `b(t_{k+1}) − b(t_k)`.
    pub fn increment(&self, path: usize, coord: usize, k: usize) -> f64 {
        let s = self.series(path, coord);
        s[k + 1] - s[k]
    }

    /// All coordinates' increments on cell `k` of `path`.
    pub fn increment_vector(&self, path: usize, k: usize, out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate().take(self.dim) {
            *o = self.increment(path, c, k);
        }
    }

    /// The same paths observed on every `factor`-th grid point.
    pub fn coarsen(&self, factor: usize) -> Result<ProcessPaths> {
        if factor == 0 || self.grid.n_steps % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot coarsen {} steps by {factor}",
                self.grid.n_steps
            )));
        }
        let grid = PathGrid::new(self.grid.t0, self.grid.dt * factor as f64, self.grid.n_steps / factor)?;
        let mut values = Vec::with_capacity(self.n_paths * self.dim * (grid.n_steps + 1));
        for p in 0..self.n_paths {
            for c in 0..self.dim {
                values.extend(self.series(p, c).iter().step_by(factor));
            }
        }
        Ok(ProcessPaths {
            grid,
            values,
            ..*self
        })
    }

    /// CSV with columns `path_id, coord, t, value`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "path_id,coord,t,value")?;
        for p in 0..self.n_paths {
            for c in 0..self.dim {
                for (k, v) in self.series(p, c).iter().enumerate() {
                    writeln!(w, "{},{},{},{}", self.first_path + p as u64, c, fmt_sig(self.grid.time(k), 12), v)?;
                }
            }
        }
        Ok(())
    }
}

/// Sampler for one kernel on one grid; the factorization is done once and
/// reused for any number of path blocks.
#[derive(Debug, Clone)]
pub struct PathSampler {
    grid: PathGrid,
    factor: CorrelationFactor,
}

impl PathSampler {
    pub fn new(kernel: &VolterraKernel, grid: PathGrid, tol: Tolerance) -> Result<Self> {
        let factor = if kernel.is_stationary() {
            CorrelationFactor::from_autocovariance(&increment_autocovariance(kernel, grid.dt, grid.n_steps, tol)?)?
        } else {
            CorrelationFactor::from_covariance(&increment_covariance_matrix(kernel, &grid, tol)?)?
        };
        Ok(PathSampler { grid, factor })
    }

    /// Sampler driven by an arbitrary increment factor (e.g. the exact
    /// stochastic-convolution increments of the no-delay equation).
    pub fn from_factor(grid: PathGrid, factor: CorrelationFactor) -> Result<Self> {
        if factor.len() != grid.n_steps {
            return Err(Error::DimensionMismatch {
                expected: grid.n_steps,
                got: factor.len(),
            });
        }
        Ok(PathSampler { grid, factor })
    }

    pub fn grid(&self) -> &PathGrid {
        &self.grid
    }

    /// Paths with global ids in `paths`; any sub-block reproduces the
    /// corresponding slice of a larger block exactly.
    pub fn sample(&self, dim: usize, paths: Range<u64>, seed: u64) -> Result<ProcessPaths> {
        if dim == 0 || paths.is_empty() {
            return Err(Error::InvalidArgument("dim and path count must be positive".into()));
        }
        let n = self.grid.n_steps;
        let series: Vec<(u64, u64)> = paths.clone().flat_map(|p| (0..dim as u64).map(move |c| (p, c))).collect();
        let chunks: Vec<Vec<f64>> = series
            .par_iter()
            .map(|&(p, c)| {
                let mut rng = stream_rng(seed, Domain::Noise, noise_stream(p, c));
                let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                let inc = self.factor.apply(&z);
                let mut out = Vec::with_capacity(n + 1);
                let mut acc = 0.0;
                out.push(acc);
                for d in inc {
                    acc += d;
                    out.push(acc);
                }
                out
            })
            .collect();
        Ok(ProcessPaths {
            grid: self.grid,
            dim,
            n_paths: (paths.end - paths.start) as usize,
            first_path: paths.start,
            seed,
            values: chunks.concat(),
        })
    }
}

/// `n_paths` paths of a `dim`-coordinate cylindrical process with kernel
/// `kernel` on `grid`; coordinates are independent.
pub fn sample_paths(
    kernel: &VolterraKernel,
    grid: PathGrid,
    dim: usize,
    n_paths: usize,
    seed: u64,
    tol: Tolerance,
) -> Result<ProcessPaths> {
    PathSampler::new(kernel, grid, tol)?.sample(dim, 0..n_paths as u64, seed)
}

/// One paired comparison of two increment covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceComparison {
    pub coord: usize,
    pub lag: usize,
    /// Cells `(i, i + lag)` and their shifted / reflected counterparts.
    pub cells: (usize, usize),
    pub other_cells: (usize, usize),
    pub cov: f64,
    pub other_cov: f64,
    pub z: f64,
}

/// Outcome of [`test_increment_laws`].
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementLawReport {
    pub stationarity: Vec<CovarianceComparison>,
    /// Empty when the grid has no pair of mirror-image cells.
    pub reflexivity: Vec<CovarianceComparison>,
    pub threshold: f64,
    pub stationary_pass: bool,
    pub reflexive_pass: Option<bool>,
}

impl IncrementLawReport {
    pub fn max_abs_z(list: &[CovarianceComparison]) -> f64 {
        list.iter().map(|c| c.z.abs()).fold(0.0, f64::max)
    }
}

fn paired_comparison(paths: &ProcessPaths, coord: usize, lag: usize, a: (usize, usize), b: (usize, usize)) -> CovarianceComparison {
    let n = paths.n_paths;
    let mut pa = Vec::with_capacity(n);
    let mut pb = Vec::with_capacity(n);
    let mut diff = Vec::with_capacity(n);
    for p in 0..n {
        let x = paths.increment(p, coord, a.0) * paths.increment(p, coord, a.1);
        let y = paths.increment(p, coord, b.0) * paths.increment(p, coord, b.1);
        pa.push(x);
        pb.push(y);
        diff.push(x - y);
    }
    let (m, se) = stats::mean_and_stderr(&diff);
    CovarianceComparison {
        coord,
        lag,
        cells: a,
        other_cells: b,
        cov: stats::mean(&pa),
        other_cov: stats::mean(&pb),
        z: if m == 0.0 { 0.0 } else { m / se },
    }
}

/// Second-moment tests of stationary and reflexive increments.
///
/// Stationarity compares `E Δ_i Δ_{i+ℓ}` of the first cells with the same
/// product shifted to the end of the grid, for lags `ℓ < n_lags`.
/// Reflexivity compares cells `[s, t]` with their mirror images `[−t, −s]`
/// when the grid contains both. Each comparison is a paired z-test over
/// paths; a test passes when every `|z| ≤ 3`.
pub fn test_increment_laws(paths: &ProcessPaths, n_lags: usize) -> Result<IncrementLawReport> {
    const MIN_PATHS: usize = 3;
    if paths.n_paths < MIN_PATHS {
        return Err(Error::InsufficientSamples {
            needed: MIN_PATHS,
            got: paths.n_paths,
        });
    }
    let n = paths.grid.n_steps;
    let threshold = 3.0;
    let mut stationarity = Vec::new();
    let mut reflexivity = Vec::new();
    let mirror = -2.0 * paths.grid.t0 / paths.grid.dt;
    let mirror_ok = (mirror - mirror.round()).abs() < 1e-9 && mirror.round() >= 1.0;
    let c = mirror.round() as i64;
    for coord in 0..paths.dim {
        for lag in 0..n_lags.min(n) {
            let shifted = n - 1 - lag;
            if shifted > 0 {
                stationarity.push(paired_comparison(paths, coord, lag, (0, lag), (shifted, shifted + lag)));
            }
            if mirror_ok {
                // cell i mirrors to c − 1 − i
                let valid = (0..n as i64).find(|&i| {
                    let j = c - 1 - i;
                    i + (lag as i64) < n as i64 && j - (lag as i64) >= 0 && j < n as i64
                });
                if let Some(i) = valid {
                    let j = c - 1 - i;
                    let a = (i as usize, i as usize + lag);
                    let b = (j as usize, j as usize - lag);
                    reflexivity.push(paired_comparison(paths, coord, lag, a, b));
                }
            }
        }
    }
    let stationary_pass = stationarity.iter().all(|c| c.z.abs() <= threshold);
    let reflexive_pass = if reflexivity.is_empty() {
        None
    } else {
        Some(reflexivity.iter().all(|c| c.z.abs() <= threshold))
    };
    Ok(IncrementLawReport {
        stationarity,
        reflexivity,
        threshold,
        stationary_pass,
        reflexive_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn fbm_two_cell_matrix() {
        let k = VolterraKernel::fbm(0.75).unwrap();
        let m = increment_covariance_matrix(&k, &PathGrid::new(0.0, 1.0, 2).unwrap(), Tolerance::default()).unwrap();
        let c = 0.5 * (2f64.powf(1.5) - 2.0);
        assert_abs_diff_eq!(m[(0, 0)], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(m[(1, 1)], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(m[(0, 1)], c, epsilon = 1e-6);
        assert_eq!(m[(0, 1)], m[(1, 0)]);
    }

    #[test]
    fn single_cell_matrix_is_variance() {
        let k = VolterraKernel::liouville(0.25).unwrap();
        let grid = PathGrid::new(0.0, 0.5, 1).unwrap();
        let m = increment_covariance_matrix(&k, &grid, Tolerance::default()).unwrap();
        let r = covariance_r(&k, &CovarianceQuery::new(0.0, 0.5, 0.0, 0.5).unwrap(), Tolerance::default()).unwrap();
        assert_eq!(m.shape(), (1, 1));
        assert_eq!(m[(0, 0)], r);
    }

    #[test]
    fn nonstationary_matrix_is_symmetric() {
        let k = VolterraKernel::liouville(0.3).unwrap();
        let m = increment_covariance_matrix(&k, &PathGrid::new(0.0, 0.25, 5).unwrap(), Tolerance::default()).unwrap();
        assert_eq!(m, m.transpose());
    }

    #[test]
    fn levinson_equals_dense_cholesky() {
        let k = VolterraKernel::fbm(0.8).unwrap();
        let gamma = increment_autocovariance(&k, 0.1, 40, Tolerance::default()).unwrap();
        let dense = CorrelationFactor::from_autocovariance(&gamma).unwrap();
        assert!(matches!(dense, CorrelationFactor::Dense { .. }));
        let toeplitz = CorrelationFactor::Toeplitz { gamma: gamma.clone() };
        let z: Vec<f64> = (0..40).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let a = dense.apply(&z);
        let b = toeplitz.apply(&z);
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
    }

    #[test]
    fn indefinite_covariance_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            CorrelationFactor::from_covariance(&m),
            Err(Error::CovarianceNotPsd { row: 1, .. })
        ));
    }

    #[test]
    fn zero_rows_stay_deterministic() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 4.0]);
        let f = CorrelationFactor::from_covariance(&m).unwrap();
        assert_eq!(f.apply(&[1.0, 1.0]), vec![0.0, 2.0]);
    }

    #[test]
    fn sampling_is_deterministic_and_block_consistent() {
        let k = VolterraKernel::fbm(0.7).unwrap();
        let grid = PathGrid::new(0.0, 0.5, 8).unwrap();
        let tol = Tolerance::default();
        let a = sample_paths(&k, grid, 2, 6, 11, tol).unwrap();
        let b = sample_paths(&k, grid, 2, 6, 11, tol).unwrap();
        assert_eq!(a, b);
        let block = PathSampler::new(&k, grid, tol).unwrap().sample(2, 3..5, 11).unwrap();
        for p in 0..2 {
            for c in 0..2 {
                assert_eq!(block.series(p, c), a.series(p + 3, c));
            }
        }
    }

    #[test]
    fn cumulative_sum_consistency() {
        let k = VolterraKernel::fbm(0.7).unwrap();
        let paths = sample_paths(&k, PathGrid::new(-1.0, 0.25, 8).unwrap(), 1, 3, 5, Tolerance::default()).unwrap();
        for p in 0..3 {
            assert_eq!(paths.value(p, 0, 0), 0.0);
            let mut acc = 0.0;
            for k in 0..8 {
                acc += paths.increment(p, 0, k);
                assert_abs_diff_eq!(paths.value(p, 0, k + 1), acc, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn coarsened_paths_sum_increments() {
        let k = VolterraKernel::fbm(0.6).unwrap();
        let paths = sample_paths(&k, PathGrid::new(0.0, 0.125, 8).unwrap(), 1, 2, 3, Tolerance::default()).unwrap();
        let coarse = paths.coarsen(4).unwrap();
        assert_eq!(coarse.grid.n_steps, 2);
        assert_eq!(coarse.value(1, 0, 2), paths.value(1, 0, 8));
        assert!(paths.coarsen(3).is_err());
    }

    #[test]
    fn unit_variance_and_independent_coordinates() {
        let k = VolterraKernel::fbm(0.75).unwrap();
        let n = 100_000;
        let paths = sample_paths(&k, PathGrid::new(0.0, 1.0, 1).unwrap(), 2, n, 42, Tolerance::default()).unwrap();
        let sq: Vec<f64> = (0..n).map(|p| paths.increment(p, 0, 0).powi(2)).collect();
        let (v, se) = stats::mean_and_stderr(&sq);
        assert!((v - 1.0).abs() < 3.0 * se, "variance {v} ± {se}");
        let cross: Vec<f64> = (0..n).map(|p| paths.increment(p, 0, 0) * paths.increment(p, 1, 0)).collect();
        let (c, se) = stats::mean_and_stderr(&cross);
        assert!(c.abs() < 3.0 * se, "cross {c} ± {se}");
    }

    #[test]
    fn increment_laws_need_samples() {
        let k = VolterraKernel::fbm(0.75).unwrap();
        let paths = sample_paths(&k, PathGrid::new(0.0, 1.0, 4).unwrap(), 1, 1, 1, Tolerance::default()).unwrap();
        assert!(matches!(test_increment_laws(&paths, 2), Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let k = VolterraKernel::fbm(0.75).unwrap();
        let paths = sample_paths(&k, PathGrid::new(0.0, 0.1, 2).unwrap(), 1, 1, 1, Tolerance::default()).unwrap();
        let mut buf = Vec::new();
        paths.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path_id,coord,t,value");
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("0,0,0.1,"));
    }
}
