//! The ten subcommands. Each validates its configuration needs first, then
//! runs and returns the files to write.

use std::fmt;

use clap::ValueEnum;
use rand::Rng;
use volterra_neutral::ergodicity::{
    check_condition_h, condition_h_single_mode, condition_h_truncations, ergodic_test_arbitrary, ergodic_test_stationary,
    fou_stationary_variance, invariant_covariance, stationarity_test, time_average,
};
use volterra_neutral::kernels::{covariance_from_kernel, covariance_r, eval_phi, verify_regularity};
use volterra_neutral::report::{fmt_sig, KeyValues, ToKeyValues};
use volterra_neutral::rng::{stream_rng, Domain};
use volterra_neutral::sampling::{sample_paths, test_increment_laws, PathGrid};
use volterra_neutral::solver::{convergence_study, solve_lifted, solve_neutral_sde, verify_equivalence};
use volterra_neutral::wiener::{verify_isometry, StepFunction};
use volterra_neutral::{CovarianceQuery, Error, KernelKind};

use crate::config::{Config, ConfigError, SchemeChoice};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subcommand {
    KernelCheck,
    Sample,
    Isometry,
    Simulate,
    Equivalence,
    ConditionH,
    Invariant,
    ErgodicStationary,
    ErgodicArbitrary,
    Stationarity,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::KernelCheck => "kernel-check",
            Subcommand::Sample => "sample",
            Subcommand::Isometry => "isometry",
            Subcommand::Simulate => "simulate",
            Subcommand::Equivalence => "equivalence",
            Subcommand::ConditionH => "condition-h",
            Subcommand::Invariant => "invariant",
            Subcommand::ErgodicStationary => "ergodic-stationary",
            Subcommand::ErgodicArbitrary => "ergodic-arbitrary",
            Subcommand::Stationarity => "stationarity",
        }
    }
}

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Numerical(Error),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => e.fmt(f),
            RunError::Numerical(e) => write!(f, "numerical error: {e}"),
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            // these stem from inconsistent inputs rather than from the numerics
            Error::InvalidArgument(_)
            | Error::DelayNotMultiple { .. }
            | Error::StepLargerThanDelay { .. }
            | Error::DimensionMismatch { .. }
            | Error::GridMismatch(_)
            | Error::NegativeTime(_)
            | Error::EmptyWindow { .. }
            | Error::SegmentUnderflow { .. }
            | Error::InsufficientSamples { .. }
            | Error::MissingLipschitzConstant => RunError::Config(ConfigError {
                field: String::new(),
                message: e.to_string(),
            }),
            other => RunError::Numerical(other),
        }
    }
}

/// Files produced by a subcommand and its verdict.
#[derive(Debug, Default)]
pub struct Outcome {
    pub pass: bool,
    pub files: Vec<(String, Vec<u8>)>,
}

impl Outcome {
    fn new(pass: bool) -> Self {
        Outcome { pass, files: Vec::new() }
    }

    fn report(&mut self, name: &str, kv: &KeyValues) {
        self.files.push((name.to_string(), kv.to_string().into_bytes()));
    }

    fn csv(&mut self, name: &str, header: &str, rows: impl IntoIterator<Item = String>) {
        let mut text = format!("{header}\n");
        for r in rows {
            text.push_str(&r);
            text.push('\n');
        }
        self.files.push((name.to_string(), text.into_bytes()));
    }

    fn raw(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }
}

type RunResult = Result<Outcome, RunError>;

pub fn run(cmd: Subcommand, cfg: &Config) -> RunResult {
    match cmd {
        Subcommand::KernelCheck => kernel_check(cfg),
        Subcommand::Sample => sample(cfg),
        Subcommand::Isometry => isometry(cfg),
        Subcommand::Simulate => simulate(cfg),
        Subcommand::Equivalence => equivalence(cfg),
        Subcommand::ConditionH => condition_h(cfg),
        Subcommand::Invariant => invariant(cfg),
        Subcommand::ErgodicStationary => ergodic_stationary(cfg),
        Subcommand::ErgodicArbitrary => ergodic_arbitrary(cfg),
        Subcommand::Stationarity => stationarity(cfg),
    }
}

fn fbm_increment_cov(h: f64, q: &CovarianceQuery) -> f64 {
    let p = |x: f64| x.abs().powf(2.0 * h);
    0.5 * (p(q.t1 - q.s2) + p(q.s1 - q.t2) - p(q.t1 - q.t2) - p(q.s1 - q.s2))
}

/// Covariance and covariance-density checks against closed forms (fBm) or
/// the independent kernel route, plus the regularity bound.
fn kernel_check(cfg: &Config) -> RunResult {
    let k = cfg.kernel()?;
    let params = cfg.kernel_check;
    let tol = cfg.tolerance;
    const COV_TOL: f64 = 1e-6;
    const PHI_TOL: f64 = 1e-6;

    let reg = verify_regularity(k, params.samples.max(1), cfg.seed)?;
    let is_fbm = matches!(k.kind(), KernelKind::FbmMandelbrotVanNess { .. });
    let hurst = k.alpha() + 0.5;

    let mut rng = stream_rng(cfg.seed, Domain::Auxiliary, 0);
    let mut rows = Vec::new();
    let mut max_cov_err: f64 = 0.0;
    for _ in 0..params.queries {
        let s1 = rng.random_range(0.0..3.0);
        let t1 = s1 + rng.random_range(0.05..2.0);
        let s2 = rng.random_range(0.0..3.0);
        let t2 = s2 + rng.random_range(0.05..2.0);
        let q = CovarianceQuery::new(s1, t1, s2, t2)?;
        let got = covariance_r(k, &q, tol)?;
        let reference = if is_fbm {
            fbm_increment_cov(hurst, &q)
        } else {
            covariance_from_kernel(k, &q, tol)?
        };
        let err = (got - reference).abs();
        max_cov_err = max_cov_err.max(err);
        rows.push(format!("{s1:?},{t1:?},{s2:?},{t2:?},{got:?},{reference:?},{err:?}"));
    }

    let mut kv = KeyValues::new();
    kv.push("kernel", k.name())
        .push("covariance_reference", if is_fbm { "closed-form" } else { "kernel-route" })
        .push("queries", params.queries)
        .num("max_covariance_abs_err", max_cov_err)
        .num("covariance_tol", COV_TOL);
    let mut pass = reg.pass && max_cov_err <= COV_TOL;
    if is_fbm {
        let mut max_rel: f64 = 0.0;
        for i in 0..50 {
            let lag = 1e-3 * 10f64.powf(4.0 * i as f64 / 49.0);
            let got = eval_phi(k, 0.5, 0.5 + lag, tol)?;
            let want = hurst * (2.0 * hurst - 1.0) * lag.powf(2.0 * hurst - 2.0);
            max_rel = max_rel.max((got / want - 1.0).abs());
        }
        kv.num("max_phi_rel_err", max_rel).num("phi_tol", PHI_TOL);
        pass &= max_rel <= PHI_TOL;
    }
    kv.nest("regularity", &reg.to_key_values()).push("pass", pass);

    let mut out = Outcome::new(pass);
    out.report("kernel_report.txt", &kv);
    out.csv("kernel_queries.csv", "s1,t1,s2,t2,r_quadrature,r_reference,abs_err", rows);
    Ok(out)
}

fn sample(cfg: &Config) -> RunResult {
    let k = cfg.kernel()?;
    let params = cfg.sample()?;
    let n_paths = cfg.n_paths()?;
    let grid = PathGrid::new(params.t0, params.dt, params.n_steps)?;
    let paths = sample_paths(k, grid, params.dim, n_paths, cfg.seed, cfg.tolerance)?;

    let mut kv = KeyValues::new();
    kv.push("kernel", k.name())
        .push("n_paths", n_paths)
        .push("dim", params.dim)
        .push("n_steps", params.n_steps)
        .num("t0", params.t0)
        .num("dt", params.dt);
    let mut pass = true;
    if n_paths >= 3 && params.n_lags > 0 {
        let laws = test_increment_laws(&paths, params.n_lags)?;
        kv.num("stationarity_max_abs_z", volterra_neutral::sampling::IncrementLawReport::max_abs_z(&laws.stationarity))
            .push("stationary_pass", laws.stationary_pass);
        if let Some(r) = laws.reflexive_pass {
            kv.num("reflexivity_max_abs_z", volterra_neutral::sampling::IncrementLawReport::max_abs_z(&laws.reflexivity))
                .push("reflexive_pass", r);
        }
        // only stationary kernels are expected to pass
        if k.is_stationary() {
            pass = laws.stationary_pass && laws.reflexive_pass.unwrap_or(true);
        }
        kv.push("laws_expected", k.is_stationary());
    }
    kv.push("pass", pass);

    let mut csv = Vec::new();
    paths.write_csv(&mut csv).expect("writing to memory");
    let mut out = Outcome::new(pass);
    out.report("sample_report.txt", &kv);
    out.raw("paths.csv", csv);
    Ok(out)
}

fn isometry(cfg: &Config) -> RunResult {
    let k = cfg.kernel()?;
    let params = cfg.isometry()?;
    let n_paths = cfg.n_paths()?;
    let f = StepFunction::scalar(params.breakpoints.clone(), params.values.clone())?;
    let rep = verify_isometry(k, &f, n_paths, cfg.seed, cfg.tolerance)?;
    let mut kv = KeyValues::new();
    kv.push("kernel", k.name()).extend(&rep.to_key_values());
    let mut out = Outcome::new(rep.pass);
    out.report("isometry_report.txt", &kv);
    Ok(out)
}

fn simulate(cfg: &Config) -> RunResult {
    let sys = cfg.system()?;
    let k = cfg.kernel()?;
    let (t_end, dt) = (cfg.t_end()?, cfg.dt()?);
    let phi = cfg.initial_state(dt)?;
    let traj = match cfg.scheme {
        SchemeChoice::Direct => solve_neutral_sde(sys, k, &phi, t_end, dt, cfg.seed, cfg.tolerance)?,
        SchemeChoice::Lifted => solve_lifted(sys, k, &phi, t_end, dt, cfg.seed, cfg.tolerance)?,
    };
    let n = traj.n_forward();
    let last = traj.x_at_step(n);
    let mut kv = KeyValues::new();
    kv.push("kernel", k.name())
        .push("scheme", if cfg.scheme == SchemeChoice::Direct { "direct" } else { "lifted" })
        .push("steps", n)
        .num("T", traj.time_at_step(n));
    for (i, x) in last.iter().enumerate() {
        kv.num(format!("x_final[{i}]"), *x);
    }
    let finite = traj.states_flat().iter().all(|x| x.is_finite());
    if let Some(rho) = cfg.optional_functional() {
        kv.num("time_average", time_average(&traj, rho, cfg.burn_in)?).num("burn_in", cfg.burn_in);
    }
    kv.push("pass", finite);
    let mut csv = Vec::new();
    traj.write_csv(&mut csv).expect("writing to memory");
    let mut out = Outcome::new(finite);
    out.report("simulate_report.txt", &kv);
    out.raw("trajectory.csv", csv);
    Ok(out)
}

fn equivalence(cfg: &Config) -> RunResult {
    let sys = cfg.system()?;
    let k = cfg.kernel()?;
    let (t_end, dt) = (cfg.t_end()?, cfg.dt()?);
    let phi = cfg.initial_state(dt)?;
    let rep = verify_equivalence(sys, k, &phi, t_end, dt, cfg.seed, cfg.equivalence_constant, cfg.tolerance)?;
    let mut kv = KeyValues::new();
    kv.push("kernel", k.name()).extend(&rep.to_key_values());
    let mut pass = rep.pass;
    let mut rows = vec![format!("{},{:?},{:?},{:?}", fmt_sig(dt, 12), rep.sup_err_x, rep.sup_err_segment, rep.segment_identity_err)];
    if let Some(dts) = &cfg.equivalence_dts {
        const MIN_ORDER: f64 = 0.8;
        let head = phi.head.clone();
        let hist = phi.segment.slot(0).to_vec();
        let study = convergence_study(sys, k, &head, &|_| hist.clone(), t_end, dts, cfg.seed, cfg.equivalence_constant, cfg.tolerance)?;
        let ok = study.decreasing() && study.min_order() >= MIN_ORDER && study.reports.iter().all(|r| r.segment_identity_err == 0.0);
        kv.nest("convergence", &study.to_key_values())
            .push("convergence.decreasing", study.decreasing())
            .num("convergence.min_order_required", MIN_ORDER)
            .push("convergence.pass", ok);
        rows = study
            .dts
            .iter()
            .zip(&study.reports)
            .map(|(d, r)| format!("{},{:?},{:?},{:?}", fmt_sig(*d, 12), r.sup_err_x, r.sup_err_segment, r.segment_identity_err))
            .collect();
        pass &= ok;
    }
    // the report's own pass line refers to the single-dt check
    kv.push("overall_pass", pass);
    let mut out = Outcome::new(pass);
    out.report("equivalence_report.txt", &kv);
    out.csv("equivalence.csv", "dt,sup_err_x,sup_err_segment,segment_identity_err", rows);
    Ok(out)
}

fn condition_h(cfg: &Config) -> RunResult {
    let sys = cfg.system()?;
    let alpha = cfg.kernel()?.alpha();
    let params = &cfg.condition_h;
    let systems = params
        .truncations
        .iter()
        .map(|&n| cfg.system_with_modes(n))
        .collect::<Result<Vec<_>, _>>()?;
    let value = check_condition_h(sys, alpha, params.t0, cfg.tolerance)?;
    let mut kv = KeyValues::new();
    kv.num("alpha", alpha).num("T0", params.t0).push("modes", sys.dim()).num("value", value);
    let mut pass = value.is_finite();
    if sys.dim() == 1 && sys.noise_b.ncols() == 1 {
        let closed = condition_h_single_mode(sys.eigenvalues[0], sys.noise_b[(0, 0)], alpha, params.t0);
        kv.num("closed_form", closed).num("abs_err", (value - closed).abs());
        pass &= (value - closed).abs() <= 1e-10;
    }
    let mut rows = Vec::new();
    if !systems.is_empty() {
        let seq = condition_h_truncations(|i| Ok(systems[i].clone()), &(0..systems.len()).collect::<Vec<_>>(), alpha, params.t0, cfg.tolerance)?;
        let mut seq = seq;
        seq.ns = params.truncations.clone();
        kv.nest("truncation", &seq.to_key_values());
        pass &= seq.monotone && seq.cauchy;
        for (i, (n, v)) in seq.ns.iter().zip(&seq.values).enumerate() {
            let gap = if i > 0 { format!("{:?}", seq.gaps[i - 1]) } else { String::new() };
            let ratio = if i > 1 { format!("{:?}", seq.gap_ratios[i - 2]) } else { String::new() };
            rows.push(format!("{n},{v:?},{gap},{ratio}"));
        }
    }
    kv.push("pass", pass);
    let mut out = Outcome::new(pass);
    out.report("condition_h_report.txt", &kv);
    if !rows.is_empty() {
        out.csv("condition_h.csv", "N,value,gap,gap_ratio", rows);
    }
    Ok(out)
}

fn invariant(cfg: &Config) -> RunResult {
    let sys = cfg.system()?;
    let k = cfg.kernel()?;
    let q = invariant_covariance(sys, k, cfg.tolerance)?;
    let psd = q.clone().cholesky().is_some() || q.symmetric_eigenvalues().iter().all(|&e| e >= -1e-12 * q.amax().max(1.0));
    let symmetric = q == q.transpose();
    let mut kv = KeyValues::new();
    kv.push("kernel", k.name()).push("dim", sys.dim()).push("symmetric", symmetric).push("psd", psd);
    let mut pass = psd && symmetric;
    if sys.dim() == 1 && sys.noise_b.ncols() == 1 && matches!(k.kind(), KernelKind::FbmMandelbrotVanNess { .. }) {
        let closed = fou_stationary_variance(sys.eigenvalues[0], k.alpha() + 0.5, sys.noise_b[(0, 0)]);
        let rel = if closed == 0.0 { q[(0, 0)].abs() } else { (q[(0, 0)] / closed - 1.0).abs() };
        kv.num("closed_form", closed).num("rel_err", rel).num("rel_tol", 1e-4);
        pass &= rel <= 1e-4;
    }
    kv.push("pass", pass);
    let n = q.nrows();
    let rows = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| format!("{i},{j},{:?}", q[(i, j)]));
    let mut out = Outcome::new(pass);
    out.report("invariant_report.txt", &kv);
    out.csv("invariant.csv", "k,l,q", rows.collect::<Vec<_>>());
    Ok(out)
}

fn ergodic_stationary(cfg: &Config) -> RunResult {
    let (sys, k, rho) = (cfg.system()?, cfg.kernel()?, cfg.functional()?);
    let (t_end, dt, n_paths) = (cfg.t_end()?, cfg.dt()?, cfg.n_paths()?);
    let rep = ergodic_test_stationary(sys, k, rho, t_end, dt, n_paths, cfg.seed, &cfg.ergodic)?;
    ergodic_outcome(&rep, k.name())
}

fn ergodic_arbitrary(cfg: &Config) -> RunResult {
    let (sys, k, rho) = (cfg.system()?, cfg.kernel()?, cfg.functional()?);
    let (t_end, dt, n_paths) = (cfg.t_end()?, cfg.dt()?, cfg.n_paths()?);
    cfg.initial_head()?;
    let x0 = cfg.initial_state(dt)?;
    let rep = ergodic_test_arbitrary(sys, k, &x0, rho, t_end, dt, n_paths, cfg.seed, &cfg.ergodic)?;
    ergodic_outcome(&rep, k.name())
}

fn ergodic_outcome(rep: &volterra_neutral::ergodicity::ErgodicReport, kernel: String) -> RunResult {
    let mut kv = KeyValues::new();
    kv.push("kernel", kernel).extend(&rep.to_key_values());
    let mut csv = Vec::new();
    rep.write_csv(&mut csv).expect("writing to memory");
    let mut out = Outcome::new(rep.pass);
    out.report("ergodic_report.txt", &kv);
    out.raw("ergodic.csv", csv);
    Ok(out)
}

fn stationarity(cfg: &Config) -> RunResult {
    let (sys, k) = (cfg.system()?, cfg.kernel()?);
    let (t_end, dt, n_paths) = (cfg.t_end()?, cfg.dt()?, cfg.n_paths()?);
    let start = cfg.start_mode()?;
    let rep = stationarity_test(sys, k, t_end, dt, n_paths, cfg.stationarity_lags, cfg.seed, &start, &cfg.ergodic)?;
    let mut kv = KeyValues::new();
    kv.push("kernel", k.name()).extend(&rep.to_key_values());
    let mut csv = Vec::new();
    rep.write_csv(&mut csv).expect("writing to memory");
    let mut out = Outcome::new(rep.pass);
    out.report("stationarity_report.txt", &kv);
    out.raw("stationarity.csv", csv);
    Ok(out)
}
