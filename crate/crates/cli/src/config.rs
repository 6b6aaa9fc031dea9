//! Experiment configuration: a TOML file of nested tables, validated up front.
//!
//! Every error names the offending field by its dotted path.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use nalgebra::DMatrix;
use toml::{Table, Value};
use volterra_neutral::ergodicity::{ErgodicOptions, Functional, StartMode};
use volterra_neutral::operators::{DelayDensity, LiftedState, Segment, SpectralSystem};
use volterra_neutral::{Tolerance, VolterraKernel};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "configuration error: {}", self.message)
        } else {
            write!(f, "configuration error in `{}`: {}", self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

pub type ConfigResult<T> = std::result::Result<T, ConfigError>;

const SECTIONS: &[(&str, &[&str])] = &[
    ("kernel", &["type", "hurst", "alpha"]),
    ("system", &["eigenvalues", "delay_r", "d1", "f1", "d2", "f2", "noise_b", "noise_B"]),
    (
        "solver",
        &["T", "dt", "n_paths", "seed", "burn_in", "initial_head", "initial_history", "scheme"],
    ),
    ("functional", &["type", "weights", "offset", "clip"]),
    ("tolerances", &["abs", "rel"]),
    ("output", &["dir"]),
    ("kernel_check", &["samples", "queries"]),
    ("sample", &["t0", "dt", "n_steps", "dim", "n_lags"]),
    ("isometry", &["breakpoints", "values"]),
    ("equivalence", &["constant", "dts"]),
    ("condition_h", &["t0", "truncations"]),
    ("stationarity", &["n_lags", "start"]),
    ("ergodic", &["pre_roll_factor", "stability_probes"]),
];

/// One table of the configuration with its dotted path.
#[derive(Clone, Copy)]
struct Section<'a> {
    name: &'a str,
    table: Option<&'a Table>,
}

impl<'a> Section<'a> {
    fn path(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn value(&self, key: &str) -> Option<&'a Value> {
        self.table.and_then(|t| t.get(key))
    }

    fn real(&self, key: &str) -> ConfigResult<Option<f64>> {
        match self.value(key) {
            None => Ok(None),
            Some(v) => as_real(v).map(Some).ok_or_else(|| ConfigError::new(self.path(key), "expected a number")),
        }
    }

    fn real_or(&self, key: &str, default: f64) -> ConfigResult<f64> {
        Ok(self.real(key)?.unwrap_or(default))
    }

    fn positive(&self, key: &str) -> ConfigResult<Option<f64>> {
        match self.real(key)? {
            Some(x) if !(x.is_finite() && x > 0.0) => Err(ConfigError::new(self.path(key), format!("must be positive, got {x}"))),
            other => Ok(other),
        }
    }

    fn count(&self, key: &str) -> ConfigResult<Option<usize>> {
        match self.value(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as usize)),
            Some(_) => Err(ConfigError::new(self.path(key), "expected a non-negative integer")),
        }
    }

    fn reals(&self, key: &str) -> ConfigResult<Option<Vec<f64>>> {
        match self.value(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items
                .iter()
                .map(as_real)
                .collect::<Option<Vec<f64>>>()
                .map(Some)
                .ok_or_else(|| ConfigError::new(self.path(key), "expected a list of numbers")),
            Some(_) => Err(ConfigError::new(self.path(key), "expected a list of numbers")),
        }
    }

    fn string(&self, key: &str) -> ConfigResult<Option<&'a str>> {
        match self.value(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.as_str())),
            Some(_) => Err(ConfigError::new(self.path(key), "expected a string")),
        }
    }
}

fn as_real(v: &Value) -> Option<f64> {
    match v {
        Value::Float(x) => Some(*x),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn missing(field: &str) -> ConfigError {
    ConfigError::new(field, "missing required field")
}

/// Matrix given as a scalar (times identity), a diagonal list, or a list of rows.
fn matrix(sec: Section, key: &str, rows: usize, cols: Option<usize>) -> ConfigResult<Option<DMatrix<f64>>> {
    let path = sec.path(key);
    let Some(v) = sec.value(key) else { return Ok(None) };
    let square = cols.unwrap_or(rows);
    if let Some(x) = as_real(v) {
        return Ok(Some(DMatrix::from_fn(rows, square, |i, j| if i == j { x } else { 0.0 })));
    }
    let Value::Array(items) = v else {
        return Err(ConfigError::new(path, "expected a number, a diagonal list or a list of rows"));
    };
    if items.iter().all(|i| as_real(i).is_some()) {
        if items.len() != rows || square != rows {
            return Err(ConfigError::new(path, format!("diagonal list must have {rows} entries for a square matrix")));
        }
        let d: Vec<f64> = items.iter().filter_map(as_real).collect();
        return Ok(Some(DMatrix::from_fn(rows, rows, |i, j| if i == j { d[i] } else { 0.0 })));
    }
    let mut data = Vec::new();
    for row in items {
        let Value::Array(r) = row else {
            return Err(ConfigError::new(path, "rows must be lists of numbers"));
        };
        let r: Vec<f64> = r
            .iter()
            .map(as_real)
            .collect::<Option<_>>()
            .ok_or_else(|| ConfigError::new(path.clone(), "rows must be lists of numbers"))?;
        data.push(r);
    }
    let ncols = data.first().map_or(0, |r| r.len());
    if data.len() != rows || data.iter().any(|r| r.len() != ncols) || ncols == 0 || cols.is_some_and(|c| c != ncols) {
        let want = match cols {
            Some(c) => format!("{rows}x{c}"),
            None if key.starts_with("noise") => format!("{rows} rows"),
            None => format!("{rows}x{rows}"),
        };
        return Err(ConfigError::new(path, format!("expected a {want} matrix")));
    }
    Ok(Some(DMatrix::from_fn(rows, ncols, |i, j| data[i][j])))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SchemeChoice {
    Direct,
    Lifted,
}

/// `[kernel_check]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelCheckSpec {
    pub samples: usize,
    pub queries: usize,
}

/// `[sample]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub dim: usize,
    pub n_lags: usize,
}

/// `[isometry]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsometrySpec {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

/// `[condition_h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionHSpec {
    pub t0: f64,
    pub truncations: Vec<usize>,
}

/// Eigenvalues as given: explicit list or a generator.
#[derive(Debug, Clone, PartialEq)]
pub enum EigenSpec {
    List(Vec<f64>),
    Heat(usize),
}

/// Validated experiment description. Sections needed only by some
/// subcommands are kept optional and required through the accessors.
#[derive(Debug, Clone)]
pub struct Config {
    pub text: String,
    pub seed: u64,
    pub tolerance: Tolerance,
    pub output_dir: Option<PathBuf>,
    kernel: Option<VolterraKernel>,
    system: Option<SpectralSystem>,
    system_raw: Option<Table>,
    t_end: Option<f64>,
    dt: Option<f64>,
    n_paths: Option<usize>,
    pub burn_in: f64,
    initial_head: Option<Vec<f64>>,
    initial_history: Option<Vec<f64>>,
    pub scheme: SchemeChoice,
    functional: Option<Functional>,
    pub kernel_check: KernelCheckSpec,
    sample: Option<SampleSpec>,
    isometry: Option<IsometrySpec>,
    pub equivalence_constant: f64,
    pub equivalence_dts: Option<Vec<f64>>,
    pub condition_h: ConditionHSpec,
    pub stationarity_lags: usize,
    stationarity_fixed: bool,
    pub ergodic: ErgodicOptions,
}

impl Config {
    /// Parse and validate everything present in `text`.
    pub fn parse(text: &str) -> ConfigResult<Config> {
        let root: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::new("", e.message().to_string()))?;
        let allowed: BTreeMap<&str, &[&str]> = SECTIONS.iter().copied().collect();
        for (name, v) in &root {
            let Some(keys) = allowed.get(name.as_str()) else {
                return Err(ConfigError::new(name.clone(), "unknown section"));
            };
            let Value::Table(t) = v else {
                return Err(ConfigError::new(name.clone(), "expected a table"));
            };
            if let Some(k) = t.keys().find(|k| !keys.contains(&k.as_str())) {
                return Err(ConfigError::new(format!("{name}.{k}"), "unknown field"));
            }
        }
        let sec = |name: &'static str| Section {
            name,
            table: root.get(name).and_then(Value::as_table),
        };

        let solver = sec("solver");
        let seed = match solver.value("seed") {
            None => return Err(missing("solver.seed")),
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(_) => return Err(ConfigError::new("solver.seed", "expected a non-negative integer")),
        };

        let tol_sec = sec("tolerances");
        let defaults = Tolerance::default();
        let tolerance = Tolerance::new(
            tol_sec.positive("abs")?.unwrap_or(defaults.abs),
            tol_sec.positive("rel")?.unwrap_or(defaults.rel),
        );

        let output_dir = sec("output").string("dir")?.map(PathBuf::from);
        let kernel = parse_kernel(sec("kernel"))?;
        let (eigen, system) = parse_system(sec("system"))?;

        let t_end = solver.positive("T")?;
        let dt = solver.positive("dt")?;
        let n_paths = solver.count("n_paths")?;
        let burn_in = solver.real_or("burn_in", 0.0)?;
        if burn_in < 0.0 {
            return Err(ConfigError::new("solver.burn_in", "must be non-negative"));
        }
        let scheme = match solver.string("scheme")? {
            None | Some("direct") => SchemeChoice::Direct,
            Some("lifted") => SchemeChoice::Lifted,
            Some(s) => return Err(ConfigError::new("solver.scheme", format!("expected \"direct\" or \"lifted\", got \"{s}\""))),
        };
        let initial_head = solver.reals("initial_head")?;
        let initial_history = solver.reals("initial_history")?;
        if let Some(sys) = &system {
            for (key, v) in [("initial_head", &initial_head), ("initial_history", &initial_history)] {
                if let Some(v) = v {
                    if v.len() != sys.dim() {
                        return Err(ConfigError::new(format!("solver.{key}"), format!("expected {} entries", sys.dim())));
                    }
                }
            }
        }

        let functional = parse_functional(sec("functional"), system.as_ref().map(|s| s.dim()))?;

        let kc = sec("kernel_check");
        let kernel_check = KernelCheckSpec {
            samples: kc.count("samples")?.unwrap_or(500),
            queries: kc.count("queries")?.unwrap_or(20),
        };

        let sample = parse_sample(sec("sample"))?;
        let isometry = parse_isometry(sec("isometry"))?;

        let eq = sec("equivalence");
        let equivalence_constant = eq
            .positive("constant")?
            .unwrap_or(volterra_neutral::solver::DEFAULT_EQUIVALENCE_CONSTANT);
        let equivalence_dts = eq.reals("dts")?;
        if let Some(d) = &equivalence_dts {
            if d.len() < 2 || d.iter().any(|x| !(*x > 0.0)) || d.windows(2).any(|w| w[1] >= w[0]) {
                return Err(ConfigError::new("equivalence.dts", "expected at least two positive, decreasing steps"));
            }
        }

        let ch = sec("condition_h");
        let truncations = match ch.value("truncations") {
            None => Vec::new(),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| v.as_integer().filter(|i| *i > 0).map(|i| i as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| ConfigError::new("condition_h.truncations", "expected a list of positive integers"))?,
            Some(_) => return Err(ConfigError::new("condition_h.truncations", "expected a list of positive integers")),
        };
        if !truncations.is_empty() && !matches!(eigen, Some(EigenSpec::Heat(_))) {
            return Err(ConfigError::new("condition_h.truncations", "needs system.eigenvalues given as \"heat:N\""));
        }
        let condition_h = ConditionHSpec {
            t0: ch.positive("t0")?.unwrap_or(1.0),
            truncations,
        };

        let st = sec("stationarity");
        let stationarity_lags = st.count("n_lags")?.unwrap_or(4);
        let stationarity_fixed = match st.string("start")? {
            None | Some("stationary") => false,
            Some("fixed") => true,
            Some(s) => return Err(ConfigError::new("stationarity.start", format!("expected \"stationary\" or \"fixed\", got \"{s}\""))),
        };

        let erg = sec("ergodic");
        let ergodic = ErgodicOptions {
            pre_roll_factor: erg.positive("pre_roll_factor")?.unwrap_or(10.0),
            stability_probes: erg.count("stability_probes")?.unwrap_or(4).max(1),
            tol: tolerance,
        };

        Ok(Config {
            text: text.to_string(),
            seed,
            tolerance,
            output_dir,
            kernel,
            system,
            system_raw: root.get("system").and_then(Value::as_table).cloned(),
            t_end,
            dt,
            n_paths,
            burn_in,
            initial_head,
            initial_history,
            scheme,
            functional,
            kernel_check,
            sample,
            isometry,
            equivalence_constant,
            equivalence_dts,
            condition_h,
            stationarity_lags,
            stationarity_fixed,
            ergodic,
        })
    }

    /// Multiply both quadrature tolerances by `factor`.
    pub fn scale_tolerance(&mut self, factor: f64) {
        self.tolerance = self.tolerance.scaled(factor);
        self.ergodic.tol = self.tolerance;
    }

    pub fn kernel(&self) -> ConfigResult<&VolterraKernel> {
        self.kernel.as_ref().ok_or_else(|| missing("kernel"))
    }

    pub fn system(&self) -> ConfigResult<&SpectralSystem> {
        self.system.as_ref().ok_or_else(|| missing("system"))
    }

    /// The system with `N` heat modes and otherwise the configured operators.
    pub fn system_with_modes(&self, n: usize) -> ConfigResult<SpectralSystem> {
        let mut raw = self.system_raw.clone().ok_or_else(|| missing("system"))?;
        raw.insert("eigenvalues".into(), Value::String(format!("heat:{n}")));
        let (_, sys) = parse_system(Section {
            name: "system",
            table: Some(&raw),
        })?;
        sys.ok_or_else(|| missing("system"))
    }

    pub fn t_end(&self) -> ConfigResult<f64> {
        self.t_end.ok_or_else(|| missing("solver.T"))
    }

    pub fn dt(&self) -> ConfigResult<f64> {
        self.dt.ok_or_else(|| missing("solver.dt"))
    }

    pub fn n_paths(&self) -> ConfigResult<usize> {
        match self.n_paths {
            None => Err(missing("solver.n_paths")),
            Some(0) => Err(ConfigError::new("solver.n_paths", "must be positive")),
            Some(n) => Ok(n),
        }
    }

    pub fn functional(&self) -> ConfigResult<&Functional> {
        self.functional.as_ref().ok_or_else(|| missing("functional"))
    }

    pub fn optional_functional(&self) -> Option<&Functional> {
        self.functional.as_ref()
    }

    pub fn sample(&self) -> ConfigResult<SampleSpec> {
        self.sample.ok_or_else(|| missing("sample"))
    }

    pub fn isometry(&self) -> ConfigResult<&IsometrySpec> {
        self.isometry.as_ref().ok_or_else(|| missing("isometry"))
    }

    pub fn initial_head(&self) -> ConfigResult<&[f64]> {
        self.initial_head.as_deref().ok_or_else(|| missing("solver.initial_head"))
    }

    /// Initial lifted state on the grid of `dt`: head `solver.initial_head`
    /// (zero when absent) and a constant history `solver.initial_history`
    /// (defaulting to the head).
    pub fn initial_state(&self, dt: f64) -> ConfigResult<LiftedState> {
        let sys = self.system()?;
        let head = self.initial_head.clone().unwrap_or_else(|| vec![0.0; sys.dim()]);
        let history = self.initial_history.clone().unwrap_or_else(|| head.clone());
        let seg = Segment::constant(sys.delay_r, dt, &history).map_err(|e| ConfigError::new("solver.dt", e.to_string()))?;
        LiftedState::new(head, seg).map_err(|e| ConfigError::new("solver.initial_head", e.to_string()))
    }

    pub fn start_mode(&self) -> ConfigResult<StartMode> {
        if self.stationarity_fixed {
            Ok(StartMode::Fixed(self.initial_head()?.to_vec()))
        } else {
            Ok(StartMode::Stationary)
        }
    }
}

fn parse_kernel(sec: Section) -> ConfigResult<Option<VolterraKernel>> {
    if sec.table.is_none() {
        return Ok(None);
    }
    let kind = sec.string("type")?.ok_or_else(|| missing("kernel.type"))?;
    let built = match kind {
        "fbm" => match (sec.real("hurst")?, sec.real("alpha")?) {
            (Some(h), None) => VolterraKernel::fbm(h).map_err(|e| ConfigError::new("kernel.hurst", e.to_string())),
            (None, Some(a)) => VolterraKernel::fbm(a + 0.5).map_err(|e| ConfigError::new("kernel.alpha", e.to_string())),
            (Some(_), Some(_)) => Err(ConfigError::new("kernel.alpha", "give either hurst or alpha, not both")),
            (None, None) => Err(missing("kernel.hurst")),
        },
        "liouville" => {
            let a = sec.real("alpha")?.ok_or_else(|| missing("kernel.alpha"))?;
            if sec.value("hurst").is_some() {
                return Err(ConfigError::new("kernel.hurst", "not used by the Liouville kernel; give alpha"));
            }
            VolterraKernel::liouville(a).map_err(|e| ConfigError::new("kernel.alpha", e.to_string()))
        }
        other => Err(ConfigError::new("kernel.type", format!("expected \"fbm\" or \"liouville\", got \"{other}\""))),
    }?;
    Ok(Some(built))
}

fn parse_eigen(sec: Section) -> ConfigResult<EigenSpec> {
    let path = sec.path("eigenvalues");
    match sec.value("eigenvalues") {
        None => Err(missing(&path)),
        Some(Value::String(s)) => {
            let n = s
                .strip_prefix("heat:")
                .and_then(|n| n.trim().parse::<usize>().ok())
                .filter(|&n| n > 0)
                .ok_or_else(|| ConfigError::new(path.clone(), format!("expected \"heat:N\" with N > 0, got \"{s}\"")))?;
            Ok(EigenSpec::Heat(n))
        }
        Some(_) => {
            let v = sec.reals("eigenvalues")?.unwrap_or_default();
            if v.is_empty() || v.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
                return Err(ConfigError::new(path, "eigenvalues must be a non-empty list of positive numbers"));
            }
            Ok(EigenSpec::List(v))
        }
    }
}

fn parse_system(sec: Section) -> ConfigResult<(Option<EigenSpec>, Option<SpectralSystem>)> {
    if sec.table.is_none() {
        return Ok((None, None));
    }
    let eigen = parse_eigen(sec)?;
    let eigs = match &eigen {
        EigenSpec::List(v) => v.clone(),
        EigenSpec::Heat(n) => SpectralSystem::heat_spectrum(*n),
    };
    let n = eigs.len();
    let r = sec.positive("delay_r")?.ok_or_else(|| missing("system.delay_r"))?;
    let err = |field: &str| {
        let field = format!("system.{field}");
        move |e: volterra_neutral::Error| ConfigError::new(field.clone(), e.to_string())
    };
    let mut sys = SpectralSystem::new(eigs, r).map_err(err("eigenvalues"))?;
    if let Some(m) = matrix(sec, "d1", n, None)? {
        sys = sys.with_d1(m).map_err(err("d1"))?;
    }
    if let Some(m) = matrix(sec, "f1", n, None)? {
        sys = sys.with_f1(m).map_err(err("f1"))?;
    }
    if let Some(m) = matrix(sec, "d2", n, None)? {
        sys = sys.with_d2(DelayDensity::Constant(m)).map_err(err("d2"))?;
    }
    if let Some(m) = matrix(sec, "f2", n, None)? {
        sys = sys.with_f2(DelayDensity::Constant(m)).map_err(err("f2"))?;
    }
    let b_key = match (sec.value("noise_b"), sec.value("noise_B")) {
        (Some(_), Some(_)) => return Err(ConfigError::new("system.noise_B", "give noise_b or noise_B, not both")),
        (_, Some(_)) => "noise_B",
        _ => "noise_b",
    };
    if let Some(v) = sec.value(b_key) {
        // a bare number means b times the identity
        let b = if as_real(v).is_some() {
            matrix(sec, b_key, n, None)?
        } else {
            noise_matrix(sec, b_key, n)?
        };
        if let Some(b) = b {
            sys = sys.with_noise_b(b).map_err(err(b_key))?;
        }
    }
    Ok((Some(eigen), Some(sys)))
}

/// `N × M` noise operator: diagonal list or rows of equal length.
fn noise_matrix(sec: Section, key: &str, n: usize) -> ConfigResult<Option<DMatrix<f64>>> {
    let Some(Value::Array(items)) = sec.value(key) else {
        return Err(ConfigError::new(sec.path(key), "expected a number, a diagonal list or a list of rows"));
    };
    let cols = match items.first() {
        Some(Value::Array(r)) => Some(r.len()),
        _ => None,
    };
    matrix(sec, key, n, cols)
}

fn parse_functional(sec: Section, dim: Option<usize>) -> ConfigResult<Option<Functional>> {
    if sec.table.is_none() {
        return Ok(None);
    }
    let weights = sec.reals("weights")?.ok_or_else(|| missing("functional.weights"))?;
    if let Some(n) = dim {
        if weights.len() != n {
            return Err(ConfigError::new("functional.weights", format!("expected {n} entries")));
        }
    }
    let kind = sec.string("type")?.ok_or_else(|| missing("functional.type"))?;
    let f = match kind {
        "linear" => Functional::Linear {
            weights,
            offset: sec.real_or("offset", 0.0)?,
        },
        "quadratic" => Functional::Quadratic {
            weights,
            clip: sec.positive("clip")?,
        },
        "clipped" => Functional::ClippedLipschitz {
            weights,
            clip: sec.positive("clip")?.ok_or_else(|| missing("functional.clip"))?,
        },
        other => {
            return Err(ConfigError::new(
                "functional.type",
                format!("expected \"linear\", \"quadratic\" or \"clipped\", got \"{other}\""),
            ))
        }
    };
    Ok(Some(f))
}

fn parse_sample(sec: Section) -> ConfigResult<Option<SampleSpec>> {
    if sec.table.is_none() {
        return Ok(None);
    }
    let n_steps = sec.count("n_steps")?.ok_or_else(|| missing("sample.n_steps"))?;
    if n_steps == 0 {
        return Err(ConfigError::new("sample.n_steps", "must be positive"));
    }
    let dim = sec.count("dim")?.unwrap_or(1);
    if dim == 0 {
        return Err(ConfigError::new("sample.dim", "must be positive"));
    }
    Ok(Some(SampleSpec {
        t0: sec.real_or("t0", 0.0)?,
        dt: sec.positive("dt")?.ok_or_else(|| missing("sample.dt"))?,
        n_steps,
        dim,
        n_lags: sec.count("n_lags")?.unwrap_or(4),
    }))
}

fn parse_isometry(sec: Section) -> ConfigResult<Option<IsometrySpec>> {
    if sec.table.is_none() {
        return Ok(None);
    }
    let breakpoints = sec.reals("breakpoints")?.ok_or_else(|| missing("isometry.breakpoints"))?;
    let values = sec.reals("values")?.ok_or_else(|| missing("isometry.values"))?;
    if breakpoints.len() != values.len() + 1 {
        return Err(ConfigError::new("isometry.values", "need exactly one value per interval between breakpoints"));
    }
    if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ConfigError::new("isometry.breakpoints", "must be strictly increasing"));
    }
    Ok(Some(IsometrySpec { breakpoints, values }))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "[solver]\nseed = 1\n";

    #[test]
    fn missing_seed_names_the_field() {
        let e = Config::parse("[solver]\nT = 1.0\n").unwrap_err();
        assert_eq!(e.field, "solver.seed");
        assert!(e.to_string().contains("solver.seed"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let e = Config::parse(&format!("{BASE}[kernel]\ntype = \"fbm\"\nhurts = 0.7\n")).unwrap_err();
        assert_eq!(e.field, "kernel.hurts");
        let e = Config::parse(&format!("{BASE}[kernels]\n")).unwrap_err();
        assert_eq!(e.field, "kernels");
    }

    #[test]
    fn matrix_shorthands() {
        let text = format!(
            "{BASE}[system]\neigenvalues = [1.0, 2.0]\ndelay_r = 1.0\nd1 = 0.3\nf1 = [0.1, 0.2]\nnoise_b = [[1.0, 0.0, 0.5], [0.0, 1.0, 0.5]]\n"
        );
        let c = Config::parse(&text).unwrap();
        let s = c.system().unwrap();
        assert_eq!(s.d1, DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.3]));
        assert_eq!(s.f1, DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.2]));
        assert_eq!(s.noise_b.shape(), (2, 3));
    }

    #[test]
    fn heat_generator_and_bad_shapes() {
        let c = Config::parse(&format!("{BASE}[system]\neigenvalues = \"heat:8\"\ndelay_r = 1.0\n")).unwrap();
        assert_eq!(c.system().unwrap().dim(), 8);
        assert_eq!(c.system_with_modes(4).unwrap().dim(), 4);
        let e = Config::parse(&format!("{BASE}[system]\neigenvalues = [1.0]\ndelay_r = 1.0\nd1 = [[1.0, 2.0]]\n")).unwrap_err();
        assert_eq!(e.field, "system.d1");
        let e = Config::parse(&format!("{BASE}[system]\neigenvalues = \"heat:x\"\ndelay_r = 1.0\n")).unwrap_err();
        assert_eq!(e.field, "system.eigenvalues");
    }

    #[test]
    fn kernel_parameters() {
        let c = Config::parse(&format!("{BASE}[kernel]\ntype = \"fbm\"\nalpha = 0.25\n")).unwrap();
        assert_eq!(c.kernel().unwrap().alpha(), 0.25);
        let e = Config::parse(&format!("{BASE}[kernel]\ntype = \"fbm\"\nhurst = 0.3\n")).unwrap_err();
        assert_eq!(e.field, "kernel.hurst");
        let e = Config::parse(&format!("{BASE}[kernel]\ntype = \"liouville\"\n")).unwrap_err();
        assert_eq!(e.field, "kernel.alpha");
    }

    #[test]
    fn required_on_demand() {
        let c = Config::parse(BASE).unwrap();
        assert_eq!(c.t_end().unwrap_err().field, "solver.T");
        assert_eq!(c.functional().unwrap_err().field, "functional");
        assert_eq!(c.kernel().unwrap_err().field, "kernel");
    }

    #[test]
    fn functional_weights_match_dimension() {
        let text = format!("{BASE}[system]\neigenvalues = [1.0]\ndelay_r = 1.0\n[functional]\ntype = \"linear\"\nweights = [1.0, 2.0]\n");
        assert_eq!(Config::parse(&text).unwrap_err().field, "functional.weights");
    }
}
