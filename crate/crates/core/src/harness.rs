//! Micro-to-limit convergence experiments, moment diagnostics and the
//! generator residual test.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernels::{Profile, Side};
use crate::limit::{solve_path, LimitError, LimitOptions, LimitParams, LimitRecord, NoisePath};
use crate::lob::{simulate_book, LobError, MicroDiagnostics, SimOptions};
use crate::model::{ModelError, ModelSpec, Scales};
use crate::rng::{stream, StreamRole};
use crate::stats::{variance_with_se, Summary};
use crate::volterra::ConvolutionRoute;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("empty sample")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("micro simulation failed at level {level}, replicate {replicate}: {source}")]
    Micro { level: u32, replicate: usize, source: LobError },
    #[error("limit solve failed at replicate {replicate}: {source}")]
    Limit { replicate: usize, source: LimitError },
}

/// Exact 1-d `W₁` between empirical distributions: the `L¹` distance of the
/// quantile functions.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64, HarnessError> {
    if a.is_empty() || b.is_empty() {
        return Err(HarnessError::Empty);
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0, 0);
    let (mut u, mut total) = (0.0f64, 0.0);
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        total += (next - u) * (xs[i] - ys[j]).abs();
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(total)
}

/// `W₁` with a bootstrap standard error from `resamples` joint resamples.
pub fn wasserstein1_with_se<R: Rng + ?Sized>(a: &[f64], b: &[f64], resamples: usize, rng: &mut R) -> Result<(f64, f64), HarnessError> {
    let w = wasserstein1(a, b)?;
    let mut boot = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let ra: Vec<f64> = (0..a.len()).map(|_| a[rng.random_range(0..a.len())]).collect();
        let rb: Vec<f64> = (0..b.len()).map(|_| b[rng.random_range(0..b.len())]).collect();
        boot.push(wasserstein1(&ra, &rb)?);
    }
    Ok((w, Summary::of(&boot).sd))
}

/// Levels `0..=max_level` of the scale sequence and the statistics to track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub max_level: u32,
    pub replicates: usize,
    /// Limit paths for the reference marginals; 0 means `replicates`.
    #[serde(default)]
    pub limit_replicates: usize,
    pub horizon: f64,
    pub base: Scales,
    /// Spatial nodes of the limit intensity grid on `[-L, L]`.
    pub grid_nodes: usize,
    pub dt: f64,
    /// Spatial test functions `f` for `⟨V_I(T), f⟩`.
    #[serde(default)]
    pub test_functions: Vec<(Side, Profile)>,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
}

fn default_bootstrap() -> usize {
    200
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.replicates < 100 {
            return Err(HarnessError::Plan(format!("{} replicates per level; at least 100 are needed for a usable SE", self.replicates)));
        }
        if self.max_level < 2 {
            return Err(HarnessError::Plan(format!("max level {} < 2 leaves no trend to test", self.max_level)));
        }
        if !(self.horizon > 0.0 && self.dt > 0.0 && self.dt <= self.horizon) {
            return Err(HarnessError::Plan("need 0 < dt ≤ horizon".into()));
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

/// One statistic's error against the limit at one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelError {
    pub level: u32,
    pub delta_x: f64,
    pub delta_v: f64,
    pub error: f64,
    pub se: f64,
}

/// Errors this small are floating-point noise, not a trend.
pub const ROUNDOFF: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticSeries {
    pub name: String,
    pub levels: Vec<LevelError>,
    /// Least-squares slope of `log₂ error` against `k` (reported, not tested).
    pub decay_slope: Option<f64>,
    pub pass: bool,
}

impl StatisticSeries {
    fn new(name: String, levels: Vec<LevelError>) -> Self {
        let pass = levels.windows(2).all(|w| w[1].error <= w[0].error + 2.0 * w[0].se.hypot(w[1].se) + ROUNDOFF);
        let pts: Vec<(f64, f64)> = levels.iter().filter(|l| l.error > 0.0).map(|l| (l.level as f64, l.error.log2())).collect();
        let decay_slope = (pts.len() >= 2).then(|| {
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            sxy / sxx
        });
        StatisticSeries { name, levels, decay_slope, pass }
    }
}

/// Terminal and mid-horizon samples of one ensemble.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Marginals {
    pub p_a: Vec<f64>,
    pub p_b: Vec<f64>,
    pub p_a_mid: Vec<f64>,
    /// `⟨V(T), f⟩` per test function, per replicate.
    pub v_func: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub plan: ExperimentPlan,
    pub seed: u64,
    pub limit: Marginals,
    pub series: Vec<StatisticSeries>,
    pub moments: MomentTable,
    pub pass: bool,
}

/// Limit ensemble marginals, replicates in parallel.
pub fn limit_marginals(params: &LimitParams, plan: &ExperimentPlan, seed: u64) -> Result<Marginals, HarnessError> {
    let steps = plan.steps();
    let mid = steps / 2;
    let n = if plan.limit_replicates == 0 { plan.replicates } else { plan.limit_replicates };
    let opts = LimitOptions { cadence: mid.max(1), record_fields: false, test_functions: plan.test_functions.clone(), route: ConvolutionRoute::Auto };
    let rows: Vec<(f64, f64, f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|r| {
            let noise = NoisePath::generate(steps, plan.dt, &mut stream(seed, r as u64, StreamRole::LimitNoise));
            let path = solve_path(params, &noise, &opts).map_err(|source| HarnessError::Limit { replicate: r, source })?;
            let last = path.records.last().expect("at least one record");
            let mid_rec = path.records.iter().min_by(|a, b| (a.t - 0.5 * plan.horizon).abs().total_cmp(&(b.t - 0.5 * plan.horizon).abs())).expect("records");
            Ok((last.p_a, last.p_b, mid_rec.p_a, last.v_func.clone()))
        })
        .collect::<Result<_, HarnessError>>()?;
    Ok(collect_marginals(rows, plan.test_functions.len()))
}

fn collect_marginals(rows: Vec<(f64, f64, f64, Vec<f64>)>, nf: usize) -> Marginals {
    let mut m = Marginals { v_func: vec![Vec::with_capacity(rows.len()); nf], ..Default::default() };
    for (pa, pb, mid, vf) in rows {
        m.p_a.push(pa);
        m.p_b.push(pb);
        m.p_a_mid.push(mid);
        for (i, v) in vf.into_iter().enumerate() {
            m.v_func[i].push(v);
        }
    }
    m
}

/// Micro ensemble at level `k`: marginals and per-run diagnostics.
/// Terminal `(p_a, p_b, mid p_a, ⟨V, f⟩)` with the run diagnostics.
type MicroRow = ((f64, f64, f64, Vec<f64>), MicroDiagnostics);

pub fn micro_marginals(
    model: &ModelSpec,
    limit: &LimitParams,
    plan: &ExperimentPlan,
    level: u32,
    seed: u64,
) -> Result<(Marginals, Vec<MicroDiagnostics>), HarnessError> {
    let params = model.micro_params(plan.base, level)?;
    let vg = limit.volume_grid;
    let (lo, hi) = (vg.x0, vg.node(vg.n - 1));
    let opts = SimOptions { record_path: false, snapshot_times: vec![0.5 * plan.horizon], record_diagnostics: false };
    let rows: Vec<MicroRow> = (0..plan.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, ((level as u64) << 32) | r as u64, StreamRole::MicroBook);
            let run = simulate_book(&params, plan.horizon, &mut rng, &opts).map_err(|source| HarnessError::Micro { level, replicate: r, source })?;
            let s = &run.final_state;
            let mid = run.snapshots.first().map_or(s.p_a(), |snap| snap.state.p_a());
            let vf = plan.test_functions.iter().map(|(side, f)| s.profile(*side).pair(f, lo, hi)).collect();
            Ok(((s.p_a(), s.p_b(), mid, vf), run.diagnostics))
        })
        .collect::<Result<_, HarnessError>>()?;
    let (rows, diags): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok((collect_marginals(rows, plan.test_functions.len()), diags))
}

fn mean_error(micro: &[f64], limit: &[f64]) -> (f64, f64) {
    let (a, b) = (Summary::of(micro), Summary::of(limit));
    ((a.mean - b.mean).abs(), a.se.hypot(b.se))
}

fn variance_error(micro: &[f64], limit: &[f64]) -> (f64, f64) {
    let ((va, sa), (vb, sb)) = (variance_with_se(micro), variance_with_se(limit));
    ((va - vb).abs(), sa.hypot(sb))
}

/// Runs every level against one limit ensemble and flags each error
/// sequence that fails to be nonincreasing up to twice its Monte Carlo SE.
pub fn run_convergence(model: &ModelSpec, limit: &LimitParams, plan: &ExperimentPlan, seed: u64) -> Result<ConvergenceReport, HarnessError> {
    plan.validate()?;
    let reference = limit_marginals(limit, plan, seed)?;
    let mut levels = Vec::new();
    let mut diags = Vec::new();
    for k in 0..=plan.max_level {
        let (m, d) = micro_marginals(model, limit, plan, k, seed)?;
        log::info!("level {k}: {} replicates", m.p_a.len());
        levels.push(m);
        diags.push(d);
    }
    let mut boot_rng = stream(seed, 0, StreamRole::Bootstrap);
    type Stat<'a> = (String, Box<dyn Fn(&Marginals) -> &Vec<f64> + 'a>, fn(&[f64], &[f64]) -> (f64, f64));
    let mut stats: Vec<Stat> = vec![
        ("p_a_mean".into(), Box::new(|m: &Marginals| &m.p_a), mean_error),
        ("p_a_variance".into(), Box::new(|m: &Marginals| &m.p_a), variance_error),
        ("p_b_mean".into(), Box::new(|m: &Marginals| &m.p_b), mean_error),
        ("p_b_variance".into(), Box::new(|m: &Marginals| &m.p_b), variance_error),
        ("p_a_mean_mid".into(), Box::new(|m: &Marginals| &m.p_a_mid), mean_error),
    ];
    for i in 0..plan.test_functions.len() {
        stats.push((format!("v_func_{i}_mean"), Box::new(move |m: &Marginals| &m.v_func[i]), mean_error));
    }
    let scales = |k: u32| plan.base.level(k);
    let mut series: Vec<StatisticSeries> = stats
        .iter()
        .map(|(name, get, err)| {
            let lv = levels
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    let (error, se) = err(get(m), get(&reference));
                    let s = scales(k as u32);
                    LevelError { level: k as u32, delta_x: s.delta_x, delta_v: s.delta_v, error, se }
                })
                .collect();
            StatisticSeries::new(name.clone(), lv)
        })
        .collect();
    for (name, get) in [("p_a_w1", (|m: &Marginals| &m.p_a) as fn(&Marginals) -> &Vec<f64>), ("p_a_w1_mid", |m: &Marginals| &m.p_a_mid)] {
        let mut lv = Vec::new();
        for (k, m) in levels.iter().enumerate() {
            let (error, se) = wasserstein1_with_se(get(m), get(&reference), plan.bootstrap, &mut boot_rng)?;
            let s = scales(k as u32);
            lv.push(LevelError { level: k as u32, delta_x: s.delta_x, delta_v: s.delta_v, error, se });
        }
        series.push(StatisticSeries::new(name.into(), lv));
    }
    let moments = moment_diagnostics(&diags);
    let pass = series.iter().all(|s| s.pass);
    Ok(ConvergenceReport { plan: plan.clone(), seed, limit: reference, series, moments, pass })
}

/// Mean and SE of one quantity at one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub level: u32,
    pub power: i32,
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    /// `E[J(T)^p]` for `p ∈ {1, 2, 4}`.
    pub j_moments: Vec<MomentEstimate>,
    /// `E[sup_t ‖D(t)‖_{D_1^1}]`.
    pub sup_d: Vec<MomentEstimate>,
    /// Level-over-level growth above 2×.
    pub blow_up: bool,
}

pub const MOMENT_POWERS: [i32; 3] = [1, 2, 4];

/// Moment estimates per level, `runs[k]` holding the level-`k` replicates.
pub fn moment_diagnostics(runs: &[Vec<MicroDiagnostics>]) -> MomentTable {
    let mut j_moments = Vec::new();
    let mut sup_d = Vec::new();
    for (k, level) in runs.iter().enumerate() {
        for p in MOMENT_POWERS {
            let s = Summary::of(&level.iter().map(|d| d.final_j.powi(p)).collect::<Vec<_>>());
            j_moments.push(MomentEstimate { level: k as u32, power: p, mean: s.mean, se: s.se });
        }
        let s = Summary::of(&level.iter().map(|d| d.sup_d11).collect::<Vec<_>>());
        sup_d.push(MomentEstimate { level: k as u32, power: 1, mean: s.mean, se: s.se });
    }
    let grows = |xs: &[MomentEstimate]| {
        xs.iter().any(|a| xs.iter().any(|b| b.power == a.power && b.level == a.level + 1 && b.mean > 2.0 * a.mean))
    };
    let blow_up = grows(&j_moments) || grows(&sup_d);
    MomentTable { j_moments, sup_d, blow_up }
}

/// Test functionals `G(p_a, p_b, ⟨v_a, f_a⟩, ⟨v_b, f_b⟩)` with known
/// derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunctional {
    Constant { value: f64 },
    AskPrice,
    AskPriceSquared,
    /// `p_a · ⟨v, f⟩` for the test function at `index` of the limit options.
    AskPriceTimesVolume { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTestSpec {
    pub functional: TestFunctional,
    /// Spatial test functions, in the order recorded by the limit solver.
    pub test_functions: Vec<(Side, Profile)>,
}

impl TestFunctional {
    pub fn value(&self, r: &LimitRecord) -> f64 {
        match *self {
            TestFunctional::Constant { value } => value,
            TestFunctional::AskPrice => r.p_a,
            TestFunctional::AskPriceSquared => r.p_a * r.p_a,
            TestFunctional::AskPriceTimesVolume { index } => r.p_a * r.v_func[index],
        }
    }

    /// `A G`: drift of `G` from the price drift `h`, the diffusion `σ` and
    /// the volume rate `η`.
    pub fn generator(&self, r: &LimitRecord) -> f64 {
        match *self {
            TestFunctional::Constant { .. } => 0.0,
            TestFunctional::AskPrice => r.h[0],
            TestFunctional::AskPriceSquared => 2.0 * r.p_a * r.h[0] + r.sigma[0] * r.sigma[0],
            TestFunctional::AskPriceTimesVolume { index } => r.h[0] * r.v_func[index] + r.p_a * r.eta[index],
        }
    }
}

/// `M(t) = G(S(t)) - G(S(0)) - ∫_0^t A G ds` by trapezoid along the records.
pub fn residual_path(g: &TestFunctional, records: &[LimitRecord]) -> Vec<(f64, f64)> {
    let g0 = g.value(&records[0]);
    let mut integral = 0.0;
    let mut out = vec![(records[0].t, 0.0)];
    for w in records.windows(2) {
        integral += 0.5 * (w[1].t - w[0].t) * (g.generator(&w[0]) + g.generator(&w[1]));
        out.push((w[1].t, g.value(&w[1]) - g0 - integral));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualCheckpoint {
    pub t: f64,
    pub mean: f64,
    pub se: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub functional: TestFunctional,
    pub paths: usize,
    pub checkpoints: Vec<ResidualCheckpoint>,
    pub pass: bool,
}

/// Mean of `M(t)` across paths at each checkpoint; PASS when `|mean| ≤ 3 SE`
/// (or the residual vanishes identically).
pub fn martingale_residual(ensemble: &[Vec<LimitRecord>], spec: &GeneratorTestSpec, checkpoints: &[f64]) -> ResidualReport {
    let paths: Vec<Vec<(f64, f64)>> = ensemble.par_iter().map(|r| residual_path(&spec.functional, r)).collect();
    let checkpoints: Vec<ResidualCheckpoint> = checkpoints
        .iter()
        .map(|&t| {
            let values: Vec<f64> = paths
                .iter()
                .map(|p| p.iter().min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs())).map_or(0.0, |x| x.1))
                .collect();
            let s = Summary::of(&values);
            let pass = s.mean.abs() <= 3.0 * s.se || s.mean == 0.0;
            ResidualCheckpoint { t, mean: s.mean, se: s.se, pass }
        })
        .collect();
    let pass = checkpoints.iter().all(|c| c.pass);
    ResidualReport { functional: spec.functional, paths: ensemble.len(), checkpoints, pass }
}

/// Solves `paths` limit paths at every grid time for the residual test.
pub fn limit_ensemble(
    params: &LimitParams,
    spec: &GeneratorTestSpec,
    horizon: f64,
    dt: f64,
    paths: usize,
    seed: u64,
) -> Result<Vec<Vec<LimitRecord>>, HarnessError> {
    let steps = (horizon / dt).round() as usize;
    let opts = LimitOptions { cadence: 1, record_fields: false, test_functions: spec.test_functions.clone(), route: ConvolutionRoute::Auto };
    (0..paths)
        .into_par_iter()
        .map(|r| {
            let noise = NoisePath::generate(steps, dt, &mut stream(seed, r as u64, StreamRole::LimitNoise));
            Ok(solve_path(params, &noise, &opts).map_err(|source| HarnessError::Limit { replicate: r, source })?.records)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InitialBook, VolumeInit};
    use crate::volterra::SpatialGrid;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn w1_trivial_cases() {
        let a = [0.3, -1.0, 2.0, 0.0];
        assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|x| x + 0.7).collect();
        assert_relative_eq!(wasserstein1(&a, &b).unwrap(), 0.7, epsilon = 1e-12);
        assert_relative_eq!(wasserstein1(&[0.0, 1.0], &[0.5]).unwrap(), 0.5, epsilon = 1e-12);
        assert!(matches!(wasserstein1(&[], &a), Err(HarnessError::Empty)));
    }

    #[test]
    fn w1_shifted_gaussians() {
        let mut rng = stream(3, 0, StreamRole::Custom(0));
        let a: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..100_000).map(|_| 1.0 + Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        assert!((wasserstein1(&a, &b).unwrap() - 1.0).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn w1_metric(a in prop::collection::vec(-5.0f64..5.0, 1..20),
                     b in prop::collection::vec(-5.0f64..5.0, 1..20),
                     c in prop::collection::vec(-5.0f64..5.0, 1..20)) {
            let ab = wasserstein1(&a, &b).unwrap();
            prop_assert!((ab - wasserstein1(&b, &a).unwrap()).abs() < 1e-9);
            prop_assert!(ab <= wasserstein1(&a, &c).unwrap() + wasserstein1(&c, &b).unwrap() + 1e-9);
        }
    }

    fn trivial_model() -> ModelSpec {
        ModelSpec::quiet(InitialBook { p_a: 1.0, p_b: 0.9, ask: VolumeInit::flat(1.0), bid: VolumeInit::flat(1.0) })
    }

    fn plan() -> ExperimentPlan {
        ExperimentPlan {
            max_level: 2,
            replicates: 100,
            limit_replicates: 0,
            horizon: 0.5,
            base: Scales { delta_x: 0.1, delta_v: 0.05, half_width: 1.0 },
            grid_nodes: 21,
            dt: 0.01,
            test_functions: vec![(Side::Ask, Profile::gaussian(1.0, 1.2, 0.3))],
            bootstrap: 20,
        }
    }

    #[test]
    fn trivial_config_has_zero_errors() {
        let m = trivial_model();
        let p = plan();
        let limit = m.limit_params(SpatialGrid::new(1.0, p.grid_nodes).unwrap()).unwrap();
        let r = run_convergence(&m, &limit, &p, 5).unwrap();
        for s in &r.series {
            for l in &s.levels {
                assert!(l.error < 1e-9, "{} level {}: {}", s.name, l.level, l.error);
            }
        }
        for s in &r.series {
            assert!(s.pass, "{} {:?}", s.name, s.levels);
        }
        assert!(r.moments.j_moments.iter().all(|e| e.mean == 1.0));
        assert!(!r.moments.blow_up);
    }

    #[test]
    fn plan_rejects_small_ensembles() {
        let mut p = plan();
        p.replicates = 50;
        assert!(matches!(p.validate(), Err(HarnessError::Plan(_))));
        p.replicates = 100;
        p.max_level = 1;
        assert!(p.validate().is_err());
    }

    #[test]
    fn constant_functional_residual_is_zero() {
        let m = trivial_model();
        let mut limit = m.limit_params(SpatialGrid::new(1.0, 11).unwrap()).unwrap();
        limit.mu_hat = [crate::kernels::StateScalar::constant(0.3); 2];
        limit.rates = [crate::kernels::RateMultiplier::Constant { rho: 1.0, varrho: 0.2 }; 2];
        let spec = GeneratorTestSpec { functional: TestFunctional::Constant { value: 2.0 }, test_functions: vec![] };
        let ens = limit_ensemble(&limit, &spec, 0.2, 0.01, 20, 1).unwrap();
        let rep = martingale_residual(&ens, &spec, &[0.1, 0.2]);
        assert!(rep.checkpoints.iter().all(|c| c.mean == 0.0 && c.se == 0.0));
        assert!(rep.pass);
    }

    #[test]
    fn driftless_price_residual() {
        let m = trivial_model();
        let mut limit = m.limit_params(SpatialGrid::new(1.0, 11).unwrap()).unwrap();
        limit.mu_hat = [crate::kernels::StateScalar::constant(0.3); 2];
        limit.rates = [crate::kernels::RateMultiplier::Constant { rho: 1.0, varrho: 0.0 }; 2];
        let spec = GeneratorTestSpec { functional: TestFunctional::AskPrice, test_functions: vec![] };
        let ens = limit_ensemble(&limit, &spec, 0.5, 0.01, 400, 2).unwrap();
        for r in &ens {
            let path = residual_path(&spec.functional, r);
            let last = path.last().unwrap().1;
            assert_relative_eq!(last, r.last().unwrap().p_a - r[0].p_a, epsilon = 1e-12);
        }
        assert!(martingale_residual(&ens, &spec, &[0.25, 0.5]).pass);
    }

    #[test]
    fn moments_of_zero_rate_runs() {
        let d = MicroDiagnostics { final_j: 1.0, ..Default::default() };
        let t = moment_diagnostics(&[vec![d.clone(); 3], vec![d; 3]]);
        assert!(t.j_moments.iter().all(|e| e.mean == 1.0 && e.se == 0.0));
        assert_eq!(t.j_moments.len(), 6);
    }
}
