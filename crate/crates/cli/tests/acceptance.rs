//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use volterra_neutral::ergodicity::{
    check_condition_h, condition_h_single_mode, condition_h_truncations, ergodic_test_arbitrary, ergodic_test_stationary,
    fou_stationary_variance, invariant_covariance, ErgodicOptions, Functional,
};
use volterra_neutral::kernels::{covariance_r, eval_phi};
use volterra_neutral::operators::{apply_semigroup, lifted_semigroup, LiftedState, Segment, SpectralSystem};
use volterra_neutral::rng::{stream_rng, Domain};
use volterra_neutral::solver::{convergence_study, DEFAULT_EQUIVALENCE_CONSTANT};
use volterra_neutral::wiener::{kstar_norm_sq, verify_isometry, StepFunction};
use volterra_neutral::{CovarianceQuery, Tolerance, VolterraKernel};

type Check = Result<(bool, String), String>;

fn rng(stream: u64) -> ChaCha20Rng {
    stream_rng(20_261_019, Domain::Auxiliary, stream)
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn fbm_increment_cov(h: f64, s1: f64, t1: f64, s2: f64, t2: f64) -> f64 {
    let p = |x: f64| x.abs().powf(2.0 * h);
    0.5 * (p(t1 - s2) + p(s1 - t2) - p(t1 - t2) - p(s1 - s2))
}

fn fbm_covariance() -> Check {
    let started = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for hurst in [0.6, 0.75, 0.9] {
        let k = VolterraKernel::fbm(hurst).map_err(fail)?;
        for _ in 0..20 {
            let (s1, s2) = (r.random_range(-2.0..3.0), r.random_range(-2.0..3.0));
            let (t1, t2) = (s1 + r.random_range(0.01..2.0), s2 + r.random_range(0.01..2.0));
            let q = CovarianceQuery::new(s1, t1, s2, t2).map_err(fail)?;
            let got = covariance_r(&k, &q, Tolerance::default()).map_err(fail)?;
            worst = worst.max((got - fbm_increment_cov(hurst, s1, t1, s2, t2)).abs());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Ok((worst <= 1e-6 && secs <= 30.0, format!("max_abs_err={worst:.2e} time={secs:.2}s")))
}

fn phi_density() -> Check {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let hurst = [0.6, 0.75, 0.9][i % 3];
        let k = VolterraKernel::fbm(hurst).map_err(fail)?;
        let u = r.random_range(-3.0..3.0);
        let lag = 10f64.powf(r.random_range(-3.0..1.0));
        let got = eval_phi(&k, u, u + lag, Tolerance::default()).map_err(fail)?;
        let want = hurst * (2.0 * hurst - 1.0) * lag.powf(2.0 * hurst - 2.0);
        worst = worst.max((got / want - 1.0).abs());
    }
    Ok((worst <= 1e-6, format!("max_rel_err={worst:.2e}")))
}

fn isometry() -> Check {
    let mut r = rng(3);
    let mut worst_z = 0.0f64;
    let mut ok = true;
    let kernels = [VolterraKernel::fbm(0.75).map_err(fail)?, VolterraKernel::liouville(0.25).map_err(fail)?];
    for (ki, k) in kernels.iter().enumerate() {
        for j in 0..5 {
            let vals: Vec<f64> = (0..4).map(|_| r.random_range(-2.0..2.0)).collect();
            let f = StepFunction::scalar(vec![0.0, 0.5, 1.0, 1.5, 2.0], vals).map_err(fail)?;
            let rep = verify_isometry(k, &f, 10_000, 100 + 10 * ki as u64 + j, Tolerance::default()).map_err(fail)?;
            ok &= rep.pass;
            worst_z = worst_z.max(rep.z.abs());
        }
    }
    let unit = StepFunction::indicator(0.0, 1.0).map_err(fail)?;
    let norm = kstar_norm_sq(&kernels[1], &unit, Tolerance::new(1e-12, 1e-12)).map_err(fail)?;
    let err = (norm - 32.0 / 3.0).abs();
    Ok((ok && err <= 1e-8, format!("max_abs_z={worst_z:.2} liouville_unit_err={err:.2e}")))
}

fn semigroup() -> Check {
    const DT: f64 = 1.0 / 64.0;
    let sys = SpectralSystem::scalar(1.0, 1.0, 0.3, 0.5, 1.0).map_err(fail)?;
    let mut r = rng(4);
    let random_state = |r: &mut ChaCha20Rng| -> Result<LiftedState, String> {
        let levels: Vec<f64> = (0..4).map(|_| r.random_range(-2.0..2.0)).collect();
        let seg = Segment::from_fn(1.0, DT, |th| vec![levels[(((th + 1.0) * 4.0) as usize).min(3)]]).map_err(fail)?;
        LiftedState::new(vec![r.random_range(-2.0..2.0)], seg).map_err(fail)
    };
    let phi = random_state(&mut r)?;
    let identity = lifted_semigroup(&sys, 0.0, &phi, DT).map_err(fail)? == phi;

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let phi = random_state(&mut r)?;
        let t = (r.random_range(0.0..2.0f64) / DT).round() * DT;
        let u = (r.random_range(0.0..2.0f64) / DT).round() * DT;
        let whole = lifted_semigroup(&sys, t + u, &phi, DT).map_err(fail)?;
        let inner = lifted_semigroup(&sys, u, &phi, DT).map_err(fail)?;
        let split = lifted_semigroup(&sys, t, &inner, DT).map_err(fail)?;
        let d_head = (whole.head[0] - split.head[0]).powi(2);
        let d_seg: f64 = whole.segment.as_flat().iter().zip(split.segment.as_flat()).map(|(a, b)| (a - b).powi(2)).sum();
        let d = (d_head + DT * d_seg).sqrt();
        worst = worst.max(d / (10.0 * DT * phi.norm()));
    }

    let heat = SpectralSystem::new(SpectralSystem::heat_spectrum(6), 1.0).map_err(fail)?;
    let mut contracts = true;
    for _ in 0..20 {
        let x: Vec<f64> = (0..6).map(|_| r.random_range(-5.0..5.0)).collect();
        let t = r.random_range(0.0..4.0);
        let y = apply_semigroup(&heat, t, &x).map_err(fail)?;
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        contracts &= ny <= (-heat.eigenvalues[0] * t).exp() * nx * (1.0 + 1e-14);
    }
    Ok((
        identity && worst <= 1.0 && contracts,
        format!("identity={identity} worst_split_over_bound={worst:.2e} contraction={contracts}"),
    ))
}

fn equivalence() -> Check {
    let sys = SpectralSystem::scalar(1.0, 1.0, 0.3, 0.5, 1.0).map_err(fail)?;
    let k = VolterraKernel::fbm(0.75).map_err(fail)?;
    let study = convergence_study(
        &sys,
        &k,
        &[1.0],
        &|_| vec![1.0],
        10.0,
        &[1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0],
        3,
        DEFAULT_EQUIVALENCE_CONSTANT,
        Tolerance::default(),
    )
    .map_err(fail)?;
    let identity = study.reports.iter().all(|r| r.segment_identity_err == 0.0);
    let order = study.min_order();
    Ok((
        order >= 0.8 && study.decreasing() && identity,
        format!("min_order={order:.3} decreasing={} segment_identity_exact={identity}", study.decreasing()),
    ))
}

fn condition_h() -> Check {
    let sys = SpectralSystem::scalar(2.0, 1.0, 0.0, 0.0, 1.5).map_err(fail)?;
    let v = check_condition_h(&sys, 0.25, 1.0, Tolerance::new(1e-13, 1e-12)).map_err(fail)?;
    let err = (v - condition_h_single_mode(2.0, 1.5, 0.25, 1.0)).abs();
    let seq = condition_h_truncations(
        |n| SpectralSystem::new(SpectralSystem::heat_spectrum(n), 1.0),
        &[4, 8, 16, 32],
        0.25,
        1.0,
        Tolerance::default(),
    )
    .map_err(fail)?;
    let shrinks = seq.gaps_shrink_by(4.0);
    let ratios: Vec<String> = seq.gap_ratios.iter().map(|r| format!("{r:.3}")).collect();
    Ok((
        err <= 1e-10 && shrinks,
        format!("single_mode_err={err:.2e} gap_ratios=[{}] required>=4", ratios.join(",")),
    ))
}

fn invariant() -> Check {
    let mut worst = 0.0f64;
    for lambda in [1.0, 2.0] {
        for hurst in [0.6, 0.75] {
            let sys = SpectralSystem::scalar(lambda, 1.0, 0.0, 0.0, 1.0).map_err(fail)?;
            let k = VolterraKernel::fbm(hurst).map_err(fail)?;
            let q = invariant_covariance(&sys, &k, Tolerance::default()).map_err(fail)?;
            worst = worst.max((q[(0, 0)] / fou_stationary_variance(lambda, hurst, 1.0) - 1.0).abs());
        }
    }
    Ok((worst <= 1e-4, format!("max_rel_err={worst:.2e}")))
}

fn ergodic_stationary() -> Check {
    let started = Instant::now();
    let sys = SpectralSystem::scalar(1.0, 1.0, 0.0, 0.0, 1.0).map_err(fail)?;
    let k = VolterraKernel::fbm(0.75).map_err(fail)?;
    let sq = Functional::Quadratic { weights: vec![1.0], clip: None };
    let rep = ergodic_test_stationary(&sys, &k, &sq, 500.0, 0.05, 16, 100, &ErgodicOptions::default()).map_err(fail)?;
    let secs = started.elapsed().as_secs_f64();
    Ok((
        rep.pass && secs <= 300.0,
        format!(
            "time_avg={:.4} reference={:.4} z={:.2} time={secs:.1}s",
            rep.time_average,
            rep.space_average + rep.bias,
            rep.z
        ),
    ))
}

fn ergodic_arbitrary() -> Check {
    let dt = 0.05;
    let sys = SpectralSystem::scalar(1.0, 1.0, 0.0, 0.0, 1.0).map_err(fail)?;
    let k = VolterraKernel::fbm(0.75).map_err(fail)?;
    let x0 = LiftedState::new(vec![5.0], Segment::constant(1.0, dt, &[5.0]).map_err(fail)?).map_err(fail)?;
    let f = Functional::ClippedLipschitz { weights: vec![1.0], clip: 2.0 };
    let rep = ergodic_test_arbitrary(&sys, &k, &x0, &f, 500.0, dt, 16, 1, &ErgodicOptions::default()).map_err(fail)?;
    let every = rep.horizons.iter().all(|h| matches!((h.coupled_diff, h.i1_bound), (Some(d), Some(b)) if d <= b));
    Ok((
        rep.pass && every && rep.z.abs() <= 3.0,
        format!("bound_at_every_horizon={every} z={:.2} L={:?}", rep.z, f.lipschitz_constant()),
    ))
}

const SMALL_CONFIGS: [(&str, &str); 10] = [
    ("kernel-check", "[kernel]\ntype = \"fbm\"\nhurst = 0.75\n[solver]\nseed = 1\n[kernel_check]\nsamples = 50\nqueries = 5\n"),
    (
        "sample",
        "[kernel]\ntype = \"fbm\"\nhurst = 0.7\n[solver]\nseed = 2\nn_paths = 50\n[sample]\nt0 = -1.0\ndt = 0.125\nn_steps = 8\ndim = 2\nn_lags = 2\n",
    ),
    (
        "isometry",
        "[kernel]\ntype = \"liouville\"\nalpha = 0.25\n[solver]\nseed = 3\nn_paths = 200\n[isometry]\nbreakpoints = [0.0, 1.0]\nvalues = [1.0]\n",
    ),
    (
        "simulate",
        "[kernel]\ntype = \"fbm\"\nhurst = 0.75\n[system]\neigenvalues = [1.0, 4.0]\ndelay_r = 1.0\nd1 = 0.3\nf1 = 0.5\nnoise_b = 1.0\n\
         [solver]\nseed = 4\nT = 2.0\ndt = 0.0625\nscheme = \"lifted\"\ninitial_head = [1.0, 0.5]\n\
         [functional]\ntype = \"quadratic\"\nweights = [1.0, 1.0]\n",
    ),
    (
        "equivalence",
        "[kernel]\ntype = \"fbm\"\nhurst = 0.75\n[system]\neigenvalues = [1.0]\ndelay_r = 1.0\nd1 = 0.3\nf1 = 0.5\nnoise_b = 1.0\n\
         [solver]\nseed = 7\nT = 2.0\ndt = 0.03125\n[equivalence]\ndts = [0.125, 0.0625, 0.03125]\n",
    ),
    (
        "condition-h",
        "[kernel]\ntype = \"fbm\"\nhurst = 0.75\n[system]\neigenvalues = \"heat:8\"\ndelay_r = 1.0\nnoise_b = 1.0\n[solver]\nseed = 5\n\
         [condition_h]\nt0 = 1.0\ntruncations = [2, 4, 8]\n",
    ),
    (
        "invariant",
        "[kernel]\ntype = \"fbm\"\nhurst = 0.6\n[system]\neigenvalues = [1.0, 2.0]\ndelay_r = 1.0\nnoise_b = 1.0\n[solver]\nseed = 6\n",
    ),
    (
        "ergodic-stationary",
        "[kernel]\ntype = \"fbm\"\nhurst = 0.75\n[system]\neigenvalues = [1.0]\ndelay_r = 1.0\nnoise_b = 1.0\n\
         [solver]\nseed = 9\nT = 20.0\ndt = 0.1\nn_paths = 4\n[functional]\ntype = \"quadratic\"\nweights = [1.0]\n",
    ),
    (
        "ergodic-arbitrary",
        "[kernel]\ntype = \"fbm\"\nhurst = 0.75\n[system]\neigenvalues = [1.0]\ndelay_r = 1.0\nnoise_b = 1.0\n\
         [solver]\nseed = 10\nT = 20.0\ndt = 0.1\nn_paths = 4\ninitial_head = [5.0]\n\
         [functional]\ntype = \"clipped\"\nweights = [1.0]\nclip = 2.0\n",
    ),
    (
        "stationarity",
        "[kernel]\ntype = \"fbm\"\nhurst = 0.75\n[system]\neigenvalues = [1.0]\ndelay_r = 1.0\nnoise_b = 1.0\n\
         [solver]\nseed = 8\nT = 10.0\ndt = 0.1\nn_paths = 20\n[stationarity]\nn_lags = 2\nstart = \"stationary\"\n",
    ),
];

fn run_cli(name: &str, config: &Path, out: &Path, threads: &str) -> Result<Option<i32>, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_vnsim"))
        .args([name, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--threads", threads])
        .output()
        .map_err(fail)?
        .status;
    Ok(status.code())
}

/// Files under `dir`; manifest lines starting with any of `skip` are dropped.
fn directory_contents(dir: &Path, skip: &[&str]) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(fail)? {
        let entry = entry.map_err(fail)?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let mut bytes = fs::read(entry.path()).map_err(fail)?;
        if name == "manifest.txt" {
            let text = String::from_utf8(bytes).map_err(fail)?;
            bytes = text.lines().filter(|l| !skip.iter().any(|k| l.starts_with(k))).collect::<Vec<_>>().join("\n").into_bytes();
        }
        files.push((name, bytes));
    }
    files.sort();
    Ok(files)
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(fail)?;
    let mut mismatched = Vec::new();
    for (name, text) in SMALL_CONFIGS {
        let config = tmp.path().join(format!("{name}.toml"));
        fs::write(&config, text).map_err(fail)?;
        let dirs: Vec<_> = ["a", "b", "c"].iter().map(|s| tmp.path().join(format!("{name}-{s}"))).collect();
        // two identical invocations, then one on a different thread count
        let codes = [
            run_cli(name, &config, &dirs[0], "4")?,
            run_cli(name, &config, &dirs[1], "4")?,
            run_cli(name, &config, &dirs[2], "1")?,
        ];
        if !matches!(codes[0], Some(0 | 1)) || codes.iter().any(|c| *c != codes[0]) {
            mismatched.push(format!("{name}(exit {codes:?})"));
            continue;
        }
        let same_run = directory_contents(&dirs[0], &["wall_time_s="])? == directory_contents(&dirs[1], &["wall_time_s="])?;
        let skip = ["wall_time_s=", "threads="];
        let fa = directory_contents(&dirs[0], &skip)?;
        if fa.len() < 2 || !same_run || fa != directory_contents(&dirs[2], &skip)? {
            mismatched.push(name.to_string());
        }
    }
    let detail = if mismatched.is_empty() {
        format!("{} subcommands bitwise identical across repeated runs and thread counts", SMALL_CONFIGS.len())
    } else {
        format!("mismatched: {}", mismatched.join(", "))
    };
    Ok((mismatched.is_empty(), detail))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("fbm increment covariance closed form", fbm_covariance),
        ("covariance density phi", phi_density),
        ("Wiener isometry", isometry),
        ("lifted semigroup", semigroup),
        ("direct/lifted equivalence", equivalence),
        ("condition (H) single mode and truncations", condition_h),
        ("invariant covariance", invariant),
        ("ergodic averages, stationary start", ergodic_stationary),
        ("ergodic averages, arbitrary start", ergodic_arbitrary),
        ("CLI determinism", determinism),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (pass, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!("{} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
