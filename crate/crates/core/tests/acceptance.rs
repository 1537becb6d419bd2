//! Acceptance suite: one PASS/FAIL line per criterion with its runtime.
//!
//! Run with `cargo test --offline -p hawkes-lob --test acceptance -- --nocapture`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use hawkes_lob::cli_io::{parse_config, run, Command, RunConfig, RunRequest, RunOutcome};
use hawkes_lob::harness::{limit_ensemble, martingale_residual, ConvergenceReport, GeneratorTestSpec, TestFunctional};
use hawkes_lob::hawkes::{make_multivariate, simulate_thinning_rng};
use hawkes_lob::kernels::{Side, TimeKernel};
use hawkes_lob::rng::{stream, StreamRole};
use hawkes_lob::stats::{ks_one_sample, Summary};
use hawkes_lob::volterra::{
    neumann_resolvent, solve_forward, BlockKernel, BlockTerm, ConvolutionRoute, IntensityField, ResolventReport, SourceSlot, SpatialGrid,
    TargetSlot,
};

const SEED: u64 = 20261016;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

struct Suite {
    results: Vec<Outcome>,
    scratch: tempfile::TempDir,
    /// Directories of config-driven runs, rerun from their manifests at the end.
    runs: Vec<(String, PathBuf, RunOutcome)>,
}

impl Suite {
    fn criterion(&mut self, id: usize, name: &'static str, budget: Option<Duration>, f: impl FnOnce(&mut Suite) -> (bool, String)) {
        let start = Instant::now();
        let (ok, mut detail) = f(self);
        let elapsed = start.elapsed();
        let within = budget.is_none_or(|b| elapsed <= b);
        if let Some(b) = budget {
            detail.push_str(&format!("; budget {:.0} s", b.as_secs_f64()));
        }
        let pass = ok && within;
        println!("{} {id:>2}. {name} [{:.2} s] {detail}", if pass { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
        self.results.push(Outcome { id, name, pass, detail, elapsed });
    }

    fn config_run(&mut self, file: &str, command: Command) -> RunOutcome {
        let config = load(file);
        let dir = self.scratch.path().join(file.trim_end_matches(".toml"));
        let req = RunRequest { command, seed: config.seed, config, level: 0 };
        let outcome = run(&req, &dir).unwrap_or_else(|e| panic!("{file}: {e}"));
        self.runs.push((file.to_string(), dir, outcome.clone()));
        outcome
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(file: &str) -> RunConfig {
    let text = fs::read_to_string(configs().join(file)).unwrap_or_else(|e| panic!("{file}: {e}"));
    parse_config(&text).unwrap_or_else(|e| panic!("{file}: {e}"))
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn poisson_reduction() -> (bool, String) {
    let (mu, horizon, n) = (1.0, 10.0, 10_000);
    let spec = make_multivariate(vec![TimeKernel::constant(mu)], vec![vec![TimeKernel::zero()]]).unwrap();
    let mut counts = Vec::with_capacity(n);
    let mut first_gaps = Vec::with_capacity(n);
    for r in 0..n {
        let s = simulate_thinning_rng(&spec, horizon, &mut stream(SEED, r as u64, StreamRole::Hawkes)).unwrap();
        counts.push(s.len() as f64);
        if let Some(e) = s.events.first() {
            first_gaps.push(e.t);
        }
    }
    let mean = Summary::of(&counts).mean;
    let target = mu * horizon;
    let band = 3.0 * (target / n as f64).sqrt();
    // One gap per replicate keeps the sample independent; condition on an arrival before T.
    let norm = 1.0 - (-mu * horizon).exp();
    let ks = ks_one_sample(&first_gaps, |x| (1.0 - (-mu * x).exp()) / norm);
    let pass = (mean - target).abs() <= band && ks.passes(0.01);
    (pass, format!("mean count {mean:.4} in {target} ± {band:.4}; KS D = {:.4}, p = {:.3}", ks.statistic, ks.p_value))
}

fn subcritical_mean() -> (bool, String) {
    let (mu, w, beta, horizon, n) = (1.0, 0.5, 1.0, 500.0, 200);
    let spec = make_multivariate(vec![TimeKernel::constant(mu)], vec![vec![TimeKernel::exponential(w * beta, beta)]]).unwrap();
    let rates: Vec<f64> = (0..n)
        .map(|r| simulate_thinning_rng(&spec, horizon, &mut stream(SEED, r as u64, StreamRole::Hawkes)).unwrap().len() as f64 / horizon)
        .collect();
    let s = Summary::of(&rates);
    let target = mu / (1.0 - w);
    (s.within(target, 3.0), format!("rate {:.4} ± {:.4} vs {target}", s.mean, s.se))
}

fn scalar_volterra() -> (bool, String) {
    let grid = SpatialGrid::new(1.0, 3).unwrap();
    let (dt, steps) = (1e-3, 1000);
    let kernel = BlockKernel::new(vec![BlockTerm::new(
        TargetSlot::Mu(Side::Ask),
        None,
        SourceSlot::Mu(Side::Ask),
        None,
        TimeKernel::constant(1.0),
    )]);
    let mut d = IntensityField::zeros(grid.len());
    d.mu[0] = 1.0;
    let dhat = vec![d; steps + 1];
    let rho = vec![[1.0, 0.0]; steps + 1];
    let (fwd, _) = solve_forward(&kernel, grid, dt, &dhat, &rho, ConvolutionRoute::Auto).unwrap();
    let rel = fwd
        .iter()
        .enumerate()
        .map(|(m, x)| {
            let e = (m as f64 * dt).exp();
            ((x.mu[0] - e) / e).abs()
        })
        .fold(0.0, f64::max);
    let neu = neumann_resolvent(&kernel, grid, dt, &dhat, &rho, 20);
    let gap = fwd.iter().zip(&neu.field).map(|(a, b)| (a.mu[0] - b.mu[0]).abs()).fold(0.0, f64::max);
    (rel <= 1e-4 && gap <= 1e-6, format!("max relative error {rel:.3e}; Neumann depth 20 vs stepping {gap:.3e}"))
}

fn resolvent_residuals(suite: &mut Suite) -> (bool, String) {
    let out = suite.config_run("resolvent.toml", Command::Resolvent);
    let dir = &suite.runs.last().unwrap().1;
    let reports: Vec<ResolventReport> = serde_json::from_value(json(&dir.join("resolvent_report.json"))).unwrap();
    let detail = reports
        .iter()
        .map(|r| {
            format!(
                "{}: residual {:.2e}, stated form differs by {:.3e}, doubled kernel matches stated to {:.3e}",
                r.family,
                r.residual,
                r.diff_vs_stated.unwrap_or(f64::NAN),
                r.stated_vs_doubled_kernel.unwrap_or(f64::NAN)
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    (out.pass == Some(true) && reports.len() == 3 && reports.iter().all(|r| r.residual <= 1e-6), detail)
}

fn oracle(suite: &mut Suite, file: &str, summary: impl Fn(&serde_json::Value) -> String) -> (bool, String) {
    let out = suite.config_run(file, Command::OracleCheck);
    let report = json(&suite.runs.last().unwrap().1.join("oracle_report.json"));
    (out.pass == Some(true) && report["pass"] == true, summary(&report["report"]))
}

fn convergence(suite: &mut Suite) -> (bool, String) {
    let out = suite.config_run("converge.toml", Command::Converge);
    let report: ConvergenceReport = serde_json::from_value(json(&suite.runs.last().unwrap().1.join("convergence_report.json"))).unwrap();
    let levels = report.plan.max_level;
    let enough = report.plan.replicates >= 400 && levels >= 3;
    let failing: Vec<&str> = report.series.iter().filter(|s| !s.pass).map(|s| s.name.as_str()).collect();
    let w1: Vec<String> = report
        .series
        .iter()
        .find(|s| s.name == "p_a_w1")
        .map(|s| s.levels.iter().map(|l| format!("{:.4}", l.error)).collect())
        .unwrap_or_default();
    let detail = format!(
        "{} series over levels 0..={levels}, {} replicates/level; W1(p_a) by level [{}]; failing {:?}",
        report.series.len(),
        report.plan.replicates,
        w1.join(", "),
        failing
    );
    (enough && report.pass && out.pass.is_some(), detail)
}

fn moments(suite: &Suite) -> (bool, String) {
    let (_, dir, _) = suite.runs.iter().find(|(f, _, _)| f == "converge.toml").expect("convergence ran");
    let report: ConvergenceReport = serde_json::from_value(json(&dir.join("convergence_report.json"))).unwrap();
    let m = &report.moments;
    let growth = |p: i32| {
        let xs: Vec<f64> = m.j_moments.iter().filter(|e| e.power == p).map(|e| e.mean).collect();
        xs.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max)
    };
    let detail = format!(
        "max level-over-level ratio of E[J^p]: p=1 {:.3}, p=2 {:.3}, p=4 {:.3}",
        growth(1),
        growth(2),
        growth(4)
    );
    (!m.blow_up && [1, 2, 4].iter().all(|p| growth(*p) <= 2.0), detail)
}

fn martingale() -> (bool, String) {
    let config = load("converge.toml");
    let model = config.model.as_ref().unwrap();
    let params = model.limit_params(config.grid.spatial().unwrap()).unwrap();
    let horizon = config.grid.horizon;
    let f_a = config.experiment.as_ref().unwrap().test_functions[0];
    let mut pass = true;
    let mut detail = Vec::new();
    for spec in [
        GeneratorTestSpec { functional: TestFunctional::AskPriceSquared, test_functions: vec![] },
        GeneratorTestSpec { functional: TestFunctional::AskPriceTimesVolume { index: 0 }, test_functions: vec![(f_a.side, f_a.profile)] },
    ] {
        let ens = limit_ensemble(&params, &spec, horizon, config.grid.dt, 1000, SEED).unwrap();
        let rep = martingale_residual(&ens, &spec, &[0.5 * horizon, horizon]);
        pass &= rep.pass;
        let points: Vec<String> = rep.checkpoints.iter().map(|c| format!("t={} {:.3e} ± {:.3e}", c.t, c.mean, c.se)).collect();
        detail.push(format!("{:?}: {}", spec.functional, points.join(", ")));
    }
    (pass, detail.join("; "))
}

fn determinism(suite: &mut Suite) -> (bool, String) {
    for (file, command) in [("simulate_micro.toml", Command::SimulateMicro), ("solve_limit.toml", Command::SolveLimit)] {
        suite.config_run(file, command);
    }
    let mut mismatches = Vec::new();
    let mut files = 0;
    for (name, dir, outcome) in &suite.runs {
        let rerun_dir = dir.with_extension("rerun");
        let rerun = run(&outcome.manifest.request(), &rerun_dir).unwrap();
        if rerun.pass != outcome.pass {
            mismatches.push(format!("{name}: verdict"));
        }
        for a in &outcome.artifacts {
            let b = rerun_dir.join(a.file_name().unwrap());
            files += 1;
            if fs::read(a).ok() != fs::read(&b).ok() {
                mismatches.push(format!("{name}: {}", a.file_name().unwrap().to_string_lossy()));
            }
        }
    }
    let commands = suite.runs.len();
    (mismatches.is_empty() && files > 0, format!("{files} artifacts from {commands} runs compared; mismatches {mismatches:?}"))
}

#[test]
fn acceptance() {
    let mut suite = Suite { results: Vec::new(), scratch: tempfile::tempdir().unwrap(), runs: Vec::new() };
    suite.criterion(1, "Poisson reduction", secs(10), |_| poisson_reduction());
    suite.criterion(2, "Subcritical Hawkes mean", secs(30), |_| subcritical_mean());
    suite.criterion(3, "Scalar Volterra solver", None, |_| scalar_volterra());
    suite.criterion(4, "Resolvent residual", None, resolvent_residuals);
    suite.criterion(5, "Closed-form book", secs(30), |s| {
        oracle(s, "closed_form_book.toml", |r| format!("max abs error {:.3e}", r["max_abs_error"].as_f64().unwrap_or(f64::NAN)))
    });
    suite.criterion(6, "Closed-form intensity", None, |s| {
        oracle(s, "closed_form_mu.toml", |r| format!("max relative error {:.3e}", r["max_rel_error"].as_f64().unwrap_or(f64::NAN)))
    });
    suite.criterion(7, "CIR positivity", secs(20), |s| {
        oracle(s, "cir.toml", |r| format!("{} of {} paths hit 0, min value {:.3e}", r["zero_hits"], r["paths"], r["min_value"].as_f64().unwrap_or(f64::NAN)))
    });
    suite.criterion(8, "Spread positivity", None, |s| {
        oracle(s, "spread_positivity.toml", |r| {
            format!(
                "limit: {} violations, worst margin {:.3e}, min spread {:.3e}; micro: {} crossings, min spread {}",
                r["limit"]["violations"], r["limit"]["worst_margin"].as_f64().unwrap_or(f64::NAN),
                r["limit"]["min_spread"].as_f64().unwrap_or(f64::NAN), r["micro"]["crossings"], r["micro"]["min_spread"]
            )
        })
    });
    suite.criterion(9, "Volatility clustering", secs(300), |s| {
        oracle(s, "clustering.toml", |r| {
            format!(
                "signal {:.3e} ± {:.3e}; control {:.3e} ± {:.3e}",
                r["signal"]["covariance"].as_f64().unwrap_or(f64::NAN), r["signal"]["se"].as_f64().unwrap_or(f64::NAN),
                r["control"]["covariance"].as_f64().unwrap_or(f64::NAN), r["control"]["se"].as_f64().unwrap_or(f64::NAN)
            )
        })
    });
    suite.criterion(10, "Scaling-limit convergence", secs(900), convergence);
    suite.criterion(11, "Moment diagnostics", None, |s| moments(s));
    suite.criterion(12, "Martingale residual", None, |_| martingale());
    suite.criterion(13, "Determinism", None, determinism);

    let failed: Vec<String> = suite.results.iter().filter(|r| !r.pass).map(|r| format!("{}. {}: {}", r.id, r.name, r.detail)).collect();
    let total: f64 = suite.results.iter().map(|r| r.elapsed.as_secs_f64()).sum();
    println!("{} of {} criteria passed in {total:.1} s", suite.results.len() - failed.len(), suite.results.len());
    assert!(failed.is_empty(), "failing criteria:\n{}", failed.join("\n"));
}
