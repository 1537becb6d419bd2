//! Run configuration, seed manifests and the command runner.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::harness::{run_convergence, ExperimentPlan, HarnessError};
use crate::hawkes::HawkesError;
use crate::kernels::{KernelError, Profile, Side, TimeKernelDecl};
use crate::limit::{check_uniqueness_condition, default_probes, solve_path, LimitError, LimitOptions, LimitParams, NoisePath};
use crate::lob::{simulate_book, write_path_csv, write_profile_csv, LobError, SimOptions};
use crate::model::{EventType, ModelError, ModelSpec, Scales, VolumeInit};
use crate::oracles::{
    cir_check, closed_form_book_check, closed_form_mu_check, clustering_check, limit_spread_check, micro_spread_check, CirCoef,
    CirParams, ClusteringPlan, OneSidedParams, OracleError,
};
use crate::rng::{StreamKey, StreamRole};
use crate::volterra::{resolvent_report, SpatialGrid, VolterraError};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment override for the master seed.
pub const SEED_ENV: &str = "HAWKES_LOB_SEED";
/// Environment override for the worker count.
pub const THREADS_ENV: &str = "HAWKES_LOB_THREADS";

/// Discretization block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Base tick size `δx` (level 0).
    pub delta_x: f64,
    /// Base order size scale `δv` (level 0).
    pub delta_v: f64,
    /// Half-width `L` of the passive placement window.
    pub half_width: f64,
    /// Nodes `N_x` of the limit spatial grid on `[-L, L]`.
    pub nodes: usize,
    pub dt: f64,
    pub horizon: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { delta_x: 0.1, delta_v: 0.05, half_width: 2.0, nodes: 81, dt: 1e-3, horizon: 1.0 }
    }
}

impl GridConfig {
    pub fn scales(&self) -> Scales {
        Scales { delta_x: self.delta_x, delta_v: self.delta_v, half_width: self.half_width }
    }

    pub fn spatial(&self) -> Result<SpatialGrid, VolterraError> {
        SpatialGrid::new(self.half_width, self.nodes)
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunctionConfig {
    pub side: Side,
    pub profile: Profile,
}

/// Convergence experiment block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Highest refinement level `K`; levels `0..=K` are run.
    pub levels: u32,
    pub replicates: usize,
    #[serde(default)]
    pub limit_replicates: usize,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default)]
    pub test_functions: Vec<TestFunctionConfig>,
}

fn default_bootstrap() -> usize {
    200
}

/// One oracle check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OracleConfig {
    /// `dx = (a - bx) dt + sqrt(2cx) dB` with the exact sampler.
    Cir { x0: f64, a: f64, b: f64, c: f64, dt: f64, steps: usize, paths: usize },
    /// Limit and micro spread positivity for the `[model]` block.
    SpreadPositivity {
        paths: usize,
        #[serde(default)]
        micro_replicates: usize,
    },
    /// Lagged squared log-increment covariance of the one-sided book.
    Clustering {
        sigma2: f64,
        c: f64,
        kappa: f64,
        p0: f64,
        #[serde(default)]
        barrier: Option<f64>,
        t: f64,
        epsilon: f64,
        lag: f64,
        replicates: usize,
    },
    /// Zero-noise closed-form book with kernel `phi`.
    ClosedFormBook { phi: TimeKernelDecl, p0: f64, v0: VolumeInit },
    /// Exponential-kernel intensity along a realized price path.
    ClosedFormMu { sigma2: f64, kappa: f64, p0: f64 },
}

impl OracleConfig {
    pub fn name(&self) -> &'static str {
        match self {
            OracleConfig::Cir { .. } => "cir",
            OracleConfig::SpreadPositivity { .. } => "spread-positivity",
            OracleConfig::Clustering { .. } => "clustering",
            OracleConfig::ClosedFormBook { .. } => "closed-form-book",
            OracleConfig::ClosedFormMu { .. } => "closed-form-mu",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolventConfig {
    pub kernels: Vec<TimeKernelDecl>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_tolerance() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Replicates simulated and written by `simulate-micro` / `solve-limit`.
    #[serde(default = "one")]
    pub paths: usize,
    /// Keep every `cadence`-th limit grid time.
    #[serde(default = "one")]
    pub cadence: usize,
    /// Micro profile snapshot times.
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
}

fn one() -> usize {
    1
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { paths: 1, cadence: 1, snapshot_times: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolvent: Option<ResolventConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
}

/// A schema problem, located at the line of its key when it can be found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaIssue {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for SchemaIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Schema(Vec<SchemaIssue>),
    #[error(transparent)]
    Serialize(#[from] toml::ser::Error),
}

impl ConfigError {
    pub fn issues(&self) -> &[SchemaIssue] {
        match self {
            ConfigError::Schema(v) => v,
            ConfigError::Serialize(_) => &[],
        }
    }
}

fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

/// Parses and validates a TOML run configuration.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let config: RunConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start.min(text.len())].lines().count().max(1));
        ConfigError::Schema(vec![SchemaIssue { line, message: e.message().to_string() }])
    })?;
    let issues = config.issues(Some(text));
    if issues.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError::Schema(issues))
    }
}

/// Serializes to the TOML accepted by [`parse_config`].
pub fn to_toml(config: &RunConfig) -> Result<String, ConfigError> {
    Ok(toml::to_string(config)?)
}

impl RunConfig {
    /// A configuration with defaults and no optional blocks.
    pub fn minimal() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            grid: GridConfig::default(),
            output: OutputConfig::default(),
            experiment: None,
            resolvent: None,
            oracle: None,
            model: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let issues = self.issues(None);
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Schema(issues))
        }
    }

    fn issues(&self, text: Option<&str>) -> Vec<SchemaIssue> {
        let at = |key: &str| text.and_then(|t| line_of(t, key));
        let mut out = Vec::new();
        let mut push = |key: &str, message: String| out.push(SchemaIssue { line: at(key), message });
        if self.schema_version != SCHEMA_VERSION {
            push("schema_version", format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        let g = &self.grid;
        for (key, v) in [("delta_x", g.delta_x), ("delta_v", g.delta_v), ("half_width", g.half_width), ("dt", g.dt), ("horizon", g.horizon)] {
            if !(v > 0.0 && v.is_finite()) {
                push(key, format!("grid.{key} = {v} must be positive and finite"));
            }
        }
        if g.delta_v > g.delta_x {
            push(
                "delta_v",
                format!(
                    "grid.delta_v = {} exceeds grid.delta_x = {}; volume positivity needs δv ≤ δx so a single cancellation cannot drive a tick negative",
                    g.delta_v, g.delta_x
                ),
            );
        }
        if g.nodes < 3 || g.nodes.is_multiple_of(2) {
            push("nodes", format!("grid.nodes = {} must be odd and at least 3", g.nodes));
        }
        if g.dt > g.horizon {
            push("dt", "grid.dt exceeds grid.horizon".into());
        }
        if self.output.paths == 0 {
            push("paths", "output.paths must be at least 1".into());
        }
        if let Some(m) = &self.model {
            if let Err(e) = m.validate() {
                let key = match &e {
                    ModelError::Kernel(KernelError::MissingEnvelope) => "envelope",
                    _ => "model",
                };
                push(key, format!("model: {e}"));
            }
            if let Some(b) = m.price_barrier {
                if !(b > 0.0) {
                    push("price_barrier", format!("model.price_barrier = {b} must be positive"));
                }
            }
        }
        if let Some(e) = &self.experiment {
            if e.replicates < 100 {
                push("replicates", format!("experiment.replicates = {} is below 100", e.replicates));
            }
            if e.levels < 2 {
                push("levels", format!("experiment.levels = {} is below 2", e.levels));
            }
        }
        if let Some(r) = &self.resolvent {
            for k in &r.kernels {
                if let Err(e) = k.build() {
                    push("kernels", format!("resolvent kernel: {e}"));
                }
            }
        }
        if let Some(OracleConfig::ClosedFormBook { phi, .. }) = &self.oracle {
            if let Err(e) = phi.build() {
                push("phi", format!("oracle.phi: {e}"));
            }
        }
        out
    }
}

/// The commands of the binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    SimulateMicro,
    SolveLimit,
    Converge,
    OracleCheck,
    Resolvent,
}

impl Command {
    pub const ALL: [Command; 5] = [Command::SimulateMicro, Command::SolveLimit, Command::Converge, Command::OracleCheck, Command::Resolvent];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::SimulateMicro => "simulate-micro",
            Command::SolveLimit => "solve-limit",
            Command::Converge => "converge",
            Command::OracleCheck => "oracle-check",
            Command::Resolvent => "resolvent",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Command::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| format!("unknown command {s:?}"))
    }
}

/// A contiguous block of replicate streams of one role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamRange {
    pub role: StreamRole,
    pub first_replicate: u64,
    pub count: u64,
    /// Seed of the first stream; the rest follow from `(seed, replicate, role)`.
    pub first_seed: u64,
}

/// Everything needed to rerun a command bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedManifest {
    pub version: String,
    pub command: Command,
    pub master_seed: u64,
    pub level: u32,
    pub streams: Vec<StreamRange>,
    pub config: RunConfig,
}

impl SeedManifest {
    pub fn new(command: Command, master_seed: u64, level: u32, config: RunConfig) -> Self {
        SeedManifest { version: artifact_version(), command, master_seed, level, streams: Vec::new(), config }
    }

    pub fn record(&mut self, role: StreamRole, first_replicate: u64, count: u64) {
        let first_seed = StreamKey::new(self.master_seed, first_replicate, role).derived_seed();
        self.streams.push(StreamRange { role, first_replicate, count, first_seed });
    }

    /// Seed of any stream covered by the manifest.
    pub fn derived(&self, role: StreamRole, replicate: u64) -> Option<u64> {
        self.streams
            .iter()
            .any(|r| r.role == role && (r.first_replicate..r.first_replicate + r.count).contains(&replicate))
            .then(|| StreamKey::new(self.master_seed, replicate, role).derived_seed())
    }

    pub fn request(&self) -> RunRequest {
        RunRequest { command: self.command, config: self.config.clone(), seed: self.master_seed, level: self.level }
    }
}

pub fn artifact_version() -> String {
    format!("hawkes-lob/{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("command {command} needs a [{block}] block")]
    Missing { command: Command, block: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lob(#[from] LobError),
    #[error(transparent)]
    Limit(#[from] LimitError),
    #[error(transparent)]
    Volterra(#[from] VolterraError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Hawkes(#[from] HawkesError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RunError {
    /// Stable machine-readable kind.
    pub fn kind(&self) -> &'static str {
        match self {
            RunError::Config(_) => "config",
            RunError::Missing { .. } => "missing-block",
            RunError::Model(_) => "model",
            RunError::Lob(_) => "micro",
            RunError::Limit(_) => "limit",
            RunError::Volterra(_) => "volterra",
            RunError::Kernel(_) => "kernel",
            RunError::Harness(_) => "harness",
            RunError::Oracle(_) => "oracle",
            RunError::Hawkes(_) => "hawkes",
            RunError::Io { .. } => "io",
            RunError::Csv(_) => "csv",
            RunError::Json(_) => "json",
        }
    }

    pub fn report(&self) -> ErrorReport {
        let issues = match self {
            RunError::Config(c) => c.issues().to_vec(),
            _ => Vec::new(),
        };
        ErrorReport { kind: self.kind().to_string(), message: self.to_string(), issues }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub kind: String,
    pub message: String,
    pub issues: Vec<SchemaIssue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRequest {
    pub command: Command,
    pub config: RunConfig,
    pub seed: u64,
    /// Refinement level for `simulate-micro`.
    pub level: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub artifacts: Vec<PathBuf>,
    /// Verdict of report-producing commands.
    pub pass: Option<bool>,
    pub manifest: SeedManifest,
}

/// Writes artifacts into one directory; every write goes through here.
struct Sink {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Sink {
    fn new(dir: &Path) -> Result<Self, RunError> {
        fs::create_dir_all(dir).map_err(|source| RunError::Io { path: dir.to_path_buf(), source })?;
        Ok(Sink { dir: dir.to_path_buf(), written: Vec::new() })
    }

    fn bytes(&mut self, name: &str, data: &[u8]) -> Result<(), RunError> {
        let path = self.dir.join(name);
        let mut f = fs::File::create(&path).map_err(|source| RunError::Io { path: path.clone(), source })?;
        f.write_all(data).map_err(|source| RunError::Io { path: path.clone(), source })?;
        self.written.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), RunError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), RunError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        let data = w.into_inner().map_err(|e| RunError::Csv(e.into_error().into()))?;
        self.bytes(name, &data)
    }
}

fn model(req: &RunRequest) -> Result<&ModelSpec, RunError> {
    req.config.model.as_ref().ok_or(RunError::Missing { command: req.command, block: "model" })
}

fn limit_params(req: &RunRequest) -> Result<LimitParams, RunError> {
    Ok(model(req)?.limit_params(req.config.grid.spatial()?)?)
}

/// Shortest round-trip text, with an exponent for very small or large values.
fn f(x: f64) -> String {
    format!("{x:?}")
}

/// Runs one command and writes its artifacts and `manifest.json` to `out_dir`.
pub fn run(req: &RunRequest, out_dir: &Path) -> Result<RunOutcome, RunError> {
    req.config.validate()?;
    let mut sink = Sink::new(out_dir)?;
    let mut manifest = SeedManifest::new(req.command, req.seed, req.level, req.config.clone());
    let pass = match req.command {
        Command::SimulateMicro => simulate_micro(req, &mut sink, &mut manifest)?,
        Command::SolveLimit => solve_limit(req, &mut sink, &mut manifest)?,
        Command::Converge => converge(req, &mut sink, &mut manifest)?,
        Command::OracleCheck => oracle_check(req, &mut sink, &mut manifest)?,
        Command::Resolvent => resolvent(req, &mut sink)?,
    };
    sink.json("manifest.json", &manifest)?;
    Ok(RunOutcome { artifacts: sink.written, pass, manifest })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MicroSummaryRow {
    replicate: usize,
    final_p_a: f64,
    final_p_b: f64,
    min_spread: f64,
    active_events: usize,
    passive_events: usize,
    final_j: f64,
    sup_d11: f64,
}

fn simulate_micro(req: &RunRequest, sink: &mut Sink, manifest: &mut SeedManifest) -> Result<Option<bool>, RunError> {
    use rayon::prelude::*;
    let params = model(req)?.micro_params(req.config.grid.scales(), req.level)?;
    let g = &req.config.grid;
    let opts = SimOptions { record_path: true, snapshot_times: req.config.output.snapshot_times.clone(), record_diagnostics: false };
    let n = req.config.output.paths;
    let runs = (0..n)
        .into_par_iter()
        .map(|r| {
            let key = StreamKey::new(req.seed, ((req.level as u64) << 32) | r as u64, StreamRole::MicroBook);
            simulate_book(&params, g.horizon, &mut key.rng(), &opts)
        })
        .collect::<Result<Vec<_>, LobError>>()?;
    manifest.record(StreamRole::MicroBook, (req.level as u64) << 32, n as u64);
    let labels = EventType::labels();
    for (r, run) in runs.iter().enumerate() {
        let mut buf = Vec::new();
        run.event_stream().write_csv(&mut buf, &labels)?;
        sink.bytes(&format!("micro_events_{r}.csv"), &buf)?;
        let mut buf = Vec::new();
        write_path_csv(&run.path, &mut buf)?;
        sink.bytes(&format!("micro_path_{r}.csv"), &buf)?;
        if !run.snapshots.is_empty() {
            let mut buf = Vec::new();
            write_profile_csv(&run.snapshots, &mut buf)?;
            sink.bytes(&format!("micro_profile_{r}.csv"), &buf)?;
        }
    }
    let rows: Vec<MicroSummaryRow> = runs
        .iter()
        .enumerate()
        .map(|(r, run)| MicroSummaryRow {
            replicate: r,
            final_p_a: run.final_state.p_a(),
            final_p_b: run.final_state.p_b(),
            min_spread: run.diagnostics.min_spread,
            active_events: run.diagnostics.active_count,
            passive_events: run.diagnostics.passive_count,
            final_j: run.diagnostics.final_j,
            sup_d11: run.diagnostics.sup_d11,
        })
        .collect();
    sink.csv(
        "micro_summary.csv",
        &["replicate", "final_p_a", "final_p_b", "min_spread", "active_events", "passive_events", "final_j", "sup_d11"],
        rows.iter().map(|x| {
            vec![
                x.replicate.to_string(),
                f(x.final_p_a),
                f(x.final_p_b),
                f(x.min_spread),
                x.active_events.to_string(),
                x.passive_events.to_string(),
                f(x.final_j),
                f(x.sup_d11),
            ]
        }),
    )?;
    sink.json("micro_report.json", &serde_json::json!({
        "level": req.level,
        "delta_x": params.delta_x,
        "delta_v": params.delta_v,
        "horizon": g.horizon,
        "replicates": rows,
    }))?;
    Ok(None)
}

const LIMIT_PATH_HEADER: [&str; 11] = ["t", "p_a", "p_b", "mu_a", "mu_b", "beta_a", "beta_b", "h_a", "h_b", "sigma_a", "sigma_b"];

fn solve_limit(req: &RunRequest, sink: &mut Sink, manifest: &mut SeedManifest) -> Result<Option<bool>, RunError> {
    use rayon::prelude::*;
    let params = limit_params(req)?;
    let g = &req.config.grid;
    let steps = g.steps();
    let opts = LimitOptions { cadence: req.config.output.cadence, ..Default::default() };
    let n = req.config.output.paths;
    let paths = (0..n)
        .into_par_iter()
        .map(|r| {
            let noise = NoisePath::generate(steps, g.dt, &mut StreamKey::new(req.seed, r as u64, StreamRole::LimitNoise).rng());
            solve_path(&params, &noise, &opts)
        })
        .collect::<Result<Vec<_>, LimitError>>()?;
    manifest.record(StreamRole::LimitNoise, 0, n as u64);
    let nodes = params.volume_grid.nodes();
    for (r, p) in paths.iter().enumerate() {
        sink.csv(
            &format!("limit_path_{r}.csv"),
            &LIMIT_PATH_HEADER,
            p.records.iter().map(|x| {
                [x.t, x.p_a, x.p_b, x.mu[0], x.mu[1], x.beta[0], x.beta[1], x.h[0], x.h[1], x.sigma[0], x.sigma[1]].map(f).to_vec()
            }),
        )?;
        let s = &p.final_state;
        sink.csv(
            &format!("limit_volume_{r}.csv"),
            &["x", "v_a", "v_b"],
            nodes.iter().enumerate().map(|(j, x)| vec![f(*x), f(s.v_a[j]), f(s.v_b[j])]),
        )?;
    }
    let mid = 0.5 * (params.initial.p_a + params.initial.p_b);
    let uniqueness = check_uniqueness_condition(&params, 0.1, &default_probes(0.1, mid));
    let summaries: Vec<_> = paths
        .iter()
        .enumerate()
        .map(|(r, p)| {
            serde_json::json!({
                "replicate": r,
                "final_p_a": p.final_state.p_a,
                "final_p_b": p.final_state.p_b,
                "radicand_clamps": p.radicand_clamps,
                "intensity_clamps": p.intensity_clamps,
                "barrier_hits": p.barrier_hits,
            })
        })
        .collect();
    sink.json("limit_report.json", &serde_json::json!({
        "dt": g.dt,
        "steps": steps,
        "nodes": g.nodes,
        "uniqueness_condition": uniqueness,
        "paths": summaries,
    }))?;
    Ok(None)
}

fn converge(req: &RunRequest, sink: &mut Sink, manifest: &mut SeedManifest) -> Result<Option<bool>, RunError> {
    let e = req.config.experiment.as_ref().ok_or(RunError::Missing { command: req.command, block: "experiment" })?;
    let g = &req.config.grid;
    let plan = ExperimentPlan {
        max_level: e.levels,
        replicates: e.replicates,
        limit_replicates: e.limit_replicates,
        horizon: g.horizon,
        base: g.scales(),
        grid_nodes: g.nodes,
        dt: g.dt,
        test_functions: e.test_functions.iter().map(|t| (t.side, t.profile)).collect(),
        bootstrap: e.bootstrap,
    };
    let params = limit_params(req)?;
    let report = run_convergence(model(req)?, &params, &plan, req.seed)?;
    let limit_n = if e.limit_replicates == 0 { e.replicates } else { e.limit_replicates };
    manifest.record(StreamRole::LimitNoise, 0, limit_n as u64);
    for k in 0..=e.levels {
        manifest.record(StreamRole::MicroBook, (k as u64) << 32, e.replicates as u64);
    }
    manifest.record(StreamRole::Bootstrap, 0, 1);
    sink.csv(
        "convergence.csv",
        &["statistic", "level", "delta_x", "delta_v", "error", "se"],
        report.series.iter().flat_map(|s| {
            s.levels.iter().map(|l| vec![s.name.clone(), l.level.to_string(), f(l.delta_x), f(l.delta_v), f(l.error), f(l.se)])
        }),
    )?;
    let m = &report.moments;
    sink.csv(
        "moments.csv",
        &["quantity", "level", "power", "mean", "se"],
        m.j_moments
            .iter()
            .map(|e| ("j", e))
            .chain(m.sup_d.iter().map(|e| ("sup_d11", e)))
            .map(|(q, e)| vec![q.to_string(), e.level.to_string(), e.power.to_string(), f(e.mean), f(e.se)]),
    )?;
    sink.json("convergence_report.json", &report)?;
    Ok(Some(report.pass && !report.moments.blow_up))
}

fn oracle_check(req: &RunRequest, sink: &mut Sink, manifest: &mut SeedManifest) -> Result<Option<bool>, RunError> {
    let oracle = req.config.oracle.as_ref().ok_or(RunError::Missing { command: req.command, block: "oracle" })?;
    let g = &req.config.grid;
    let (pass, report) = match oracle {
        OracleConfig::Cir { x0, a, b, c, dt, steps, paths } => {
            let params = CirParams { x0: *x0, a: CirCoef::Constant(*a), b: CirCoef::Constant(*b), c: CirCoef::Constant(*c) };
            let r = cir_check(&params, *dt, *steps, *paths, req.seed)?;
            manifest.record(StreamRole::Cir, 0, *paths as u64);
            (r.pass, serde_json::to_value(&r)?)
        }
        OracleConfig::SpreadPositivity { paths, micro_replicates } => {
            let limit = limit_spread_check(&limit_params(req)?, *paths, g.horizon, g.dt, req.seed)?;
            manifest.record(StreamRole::LimitNoise, 0, *paths as u64);
            let micro = if *micro_replicates > 0 {
                let params = model(req)?.micro_params(g.scales(), req.level)?;
                manifest.record(StreamRole::MicroBook, 0, *micro_replicates as u64);
                Some(micro_spread_check(&params, *micro_replicates, g.horizon, req.seed)?)
            } else {
                None
            };
            let pass = limit.pass && micro.as_ref().is_none_or(|m| m.pass);
            (pass, serde_json::json!({ "limit": limit, "micro": micro }))
        }
        OracleConfig::Clustering { sigma2, c, kappa, p0, barrier, t, epsilon, lag, replicates } => {
            let params = OneSidedParams { sigma2: *sigma2, c: *c, kappa: *kappa, p0: *p0, barrier: *barrier };
            let plan = ClusteringPlan { t: *t, epsilon: *epsilon, lag: *lag, dt: g.dt, replicates: *replicates, seed: req.seed };
            let r = clustering_check(&params, &plan);
            manifest.record(StreamRole::Clustering, 0, *replicates as u64);
            (r.pass, serde_json::to_value(r)?)
        }
        OracleConfig::ClosedFormBook { phi, p0, v0 } => {
            let r = closed_form_book_check(&phi.build()?, *p0, *v0, g.spatial()?, g.horizon, g.dt)?;
            (r.max_abs_error <= 1e-3, serde_json::to_value(&r)?)
        }
        OracleConfig::ClosedFormMu { sigma2, kappa, p0 } => {
            let r = closed_form_mu_check(*sigma2, *kappa, *p0, g.horizon, g.dt, req.seed)?;
            manifest.record(StreamRole::LimitNoise, 0, 1);
            (r.max_rel_error <= 1e-3, serde_json::to_value(&r)?)
        }
    };
    sink.json("oracle_report.json", &serde_json::json!({ "check": oracle.name(), "pass": pass, "report": report }))?;
    Ok(Some(pass))
}

fn resolvent(req: &RunRequest, sink: &mut Sink) -> Result<Option<bool>, RunError> {
    let r = req.config.resolvent.as_ref().ok_or(RunError::Missing { command: req.command, block: "resolvent" })?;
    let g = &req.config.grid;
    let reports = r.kernels.iter().map(|k| resolvent_report(k, g.horizon, g.dt, r.tolerance)).collect::<Result<Vec<_>, _>>()?;
    let opt = |x: Option<f64>| x.map(f).unwrap_or_default();
    sink.csv(
        "resolvent.csv",
        &["family", "horizon", "dt", "residual", "simpson_residual", "err_vs_exact", "diff_vs_stated", "stated_vs_doubled_kernel", "residual_ok"],
        reports.iter().map(|x| {
            vec![
                x.family.clone(),
                f(x.horizon),
                f(x.dt),
                f(x.residual),
                f(x.simpson_residual),
                opt(x.err_vs_exact),
                opt(x.diff_vs_stated),
                opt(x.stated_vs_doubled_kernel),
                x.residual_ok.to_string(),
            ]
        }),
    )?;
    sink.json("resolvent_report.json", &reports)?;
    Ok(Some(reports.iter().all(|x| x.residual_ok)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL_MICRO: &str = r#"
schema_version = 1
seed = 3

[grid]
delta_x = 0.1
delta_v = 0.05
half_width = 1.0
nodes = 21
dt = 0.01
horizon = 0.5

[model.initial]
p_a = 1.0
p_b = 0.8
ask = { level = 1.0 }
bid = { level = 1.0 }

[model.ask]
rate = { family = "constant", rho = 1.0, varrho = 0.0 }
mu_hat = { family = "constant", value = 0.05 }

[model.bid]
rate = { family = "constant", rho = 1.0, varrho = 0.0 }
mu_hat = { family = "constant", value = 0.05 }

[model.ask_place]
exo = { profile = { family = "gaussian", amplitude = 0.5, center = 0.2, width = 0.3 } }
size = { family = "dirac", z = 0.5 }

[model.ask_cancel]
exo = { profile = { family = "zero" } }
size = { family = "dirac", z = 0.5 }

[model.bid_place]
exo = { profile = { family = "zero" } }
size = { family = "dirac", z = 0.5 }

[model.bid_cancel]
exo = { profile = { family = "zero" } }
size = { family = "dirac", z = 0.5 }
"#;

    #[test]
    fn minimal_micro_parses() {
        let c = parse_config(MINIMAL_MICRO).unwrap();
        assert_eq!(c.seed, 3);
        assert!(c.model.is_some());
    }

    #[test]
    fn volume_scale_rejected_with_line() {
        let text = MINIMAL_MICRO.replace("delta_v = 0.05", "delta_v = 0.2");
        let err = parse_config(&text).unwrap_err();
        let issue = &err.issues()[0];
        assert!(issue.message.contains("volume positivity"));
        assert_eq!(issue.line, line_of(&text, "delta_v"));
        assert!(issue.line.is_some());
    }

    #[test]
    fn custom_kernel_without_envelope_rejected() {
        let text = format!(
            "{MINIMAL_MICRO}\n[[model.phi]]\ntarget = \"ask\"\nsource = \"b_m\"\nkernel = {{ family = \"custom\", times = [0.0, 1.0], values = [1.0, 0.5] }}\n"
        );
        let err = parse_config(&text).unwrap_err();
        assert!(err.to_string().contains("envelope"), "{err}");
    }

    #[test]
    fn unknown_family_rejected() {
        let text = MINIMAL_MICRO.replace("family = \"dirac\", z = 0.5 }\n\n[model.ask_cancel]", "family = \"pareto\", z = 0.5 }\n\n[model.ask_cancel]");
        let err = parse_config(&text).unwrap_err();
        assert!(err.issues()[0].line.is_some());
        assert!(err.to_string().contains("pareto"), "{err}");
    }

    #[test]
    fn round_trip_minimal() {
        let c = parse_config(MINIMAL_MICRO).unwrap();
        assert_eq!(parse_config(&to_toml(&c).unwrap()).unwrap(), c);
    }

    fn arb_decl() -> impl Strategy<Value = TimeKernelDecl> {
        prop_oneof![
            Just(TimeKernelDecl::Zero),
            (0.0f64..2.0).prop_map(|c| TimeKernelDecl::Constant { c }),
            (0.0f64..2.0, 0.1f64..5.0).prop_map(|(c, kappa)| TimeKernelDecl::Exponential { c, kappa }),
            (0.0f64..2.0, 0.1f64..5.0).prop_map(|(c, kappa)| TimeKernelDecl::Gamma { c, kappa }),
        ]
    }

    proptest! {
        #[test]
        fn round_trip(seed in any::<u64>(), dx in 0.01f64..1.0, frac in 0.01f64..1.0, nodes in 1usize..50,
                      kernels in prop::collection::vec(arb_decl(), 1..4), paths in 1usize..5) {
            let mut c = RunConfig::minimal();
            c.seed = seed;
            c.grid.delta_x = dx;
            c.grid.delta_v = dx * frac;
            c.grid.nodes = 2 * nodes + 1;
            c.output.paths = paths;
            c.resolvent = Some(ResolventConfig { kernels, tolerance: 1e-6 });
            c.oracle = Some(OracleConfig::Cir { x0: 0.5, a: 1.0, b: 0.0, c: 1.0, dt: 1e-3, steps: 10, paths: 4 });
            let back = parse_config(&to_toml(&c).unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }
    }

    #[test]
    fn manifest_derivation_is_pure() {
        let mut m = SeedManifest::new(Command::OracleCheck, 9, 0, RunConfig::minimal());
        m.record(StreamRole::Cir, 0, 10);
        assert_eq!(m.derived(StreamRole::Cir, 3), Some(StreamKey::new(9, 3, StreamRole::Cir).derived_seed()));
        assert_eq!(m.derived(StreamRole::Cir, 10), None);
        assert_eq!(m.derived(StreamRole::MicroBook, 0), None);
        assert_eq!(m.streams[0].first_seed, StreamKey::new(9, 0, StreamRole::Cir).derived_seed());
    }

    #[test]
    fn commands_parse() {
        for c in Command::ALL {
            assert_eq!(c.as_str().parse::<Command>().unwrap(), c);
        }
        assert!("simulate".parse::<Command>().is_err());
    }

    #[test]
    fn missing_block_is_reported() {
        let req = RunRequest { command: Command::Converge, config: RunConfig::minimal(), seed: 1, level: 0 };
        let dir = tempfile::tempdir().unwrap();
        let err = run(&req, dir.path()).unwrap_err();
        assert_eq!(err.kind(), "missing-block");
    }
}
