//! Closed-form and reduced-model references for the simulators and solvers.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernels::{Profile, RateMultiplier, Side, SizeMeasure, StateScalar, TimeKernel, TimeKernelDecl};
use crate::limit::{solve_path, LimitError, LimitOptions, LimitParams, LimitRecord, NoisePath, VolumeGrid};
use crate::lob::{simulate_book, LobError, MicroParams, SimOptions};
use crate::model::{ActiveType, ExoPassive, InitialBook, ModelSpec, PassiveSpec, PassiveType, PhiTerm, VolumeInit};
use crate::rng::{stream, StreamRole};
use crate::stats::covariance_with_se;
use crate::volterra::{scalar_resolvent_k, BlockKernel, BlockTerm, ScalarResolvent, SourceSlot, SpatialGrid, TargetSlot};

/// A CIR coefficient: constant or sampled on the time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CirCoef {
    Constant(f64),
    Path(Vec<f64>),
}

impl CirCoef {
    pub fn at(&self, m: usize) -> f64 {
        match self {
            CirCoef::Constant(v) => *v,
            CirCoef::Path(p) => p[m.min(p.len() - 1)],
        }
    }

    fn constant(&self) -> Option<f64> {
        match self {
            CirCoef::Constant(v) => Some(*v),
            CirCoef::Path(_) => None,
        }
    }
}

/// `dx = (a - b x) dt + sqrt(2 c x) dB`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CirParams {
    pub x0: f64,
    pub a: CirCoef,
    pub b: CirCoef,
    pub c: CirCoef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CirScheme {
    /// Noncentral chi-square transitions; constant coefficients only.
    Exact,
    /// Full-truncation Euler.
    Euler,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("exact CIR sampling needs constant coefficients")]
    NonConstantCoefficients,
    #[error("{0}")]
    Invalid(String),
}

/// One path on `t_m = m·dt`, `m = 0..=steps`.
pub fn simulate_cir<R: Rng + ?Sized>(
    params: &CirParams,
    dt: f64,
    steps: usize,
    scheme: CirScheme,
    rng: &mut R,
) -> Result<Vec<f64>, OracleError> {
    if !(params.x0 > 0.0) {
        return Err(OracleError::Invalid(format!("x0 = {} must be > 0", params.x0)));
    }
    let mut path = Vec::with_capacity(steps + 1);
    path.push(params.x0);
    match scheme {
        CirScheme::Exact => {
            let (a, b, c) = match (params.a.constant(), params.b.constant(), params.c.constant()) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => return Err(OracleError::NonConstantCoefficients),
            };
            let decay = (-b * dt).exp();
            let mut x = params.x0;
            if c == 0.0 {
                for _ in 0..steps {
                    x = if b == 0.0 { x + a * dt } else { a / b + (x - a / b) * decay };
                    path.push(x);
                }
                return Ok(path);
            }
            // x_{t+dt} = scale · χ'²(d, λ) with σ² = 2c.
            let scale = if b == 0.0 { 0.5 * c * dt } else { 0.5 * c * (1.0 - decay) / b };
            let shape = a / c;
            for _ in 0..steps {
                let half_lambda = 0.5 * x * decay / scale;
                let n = if half_lambda > 0.0 {
                    Poisson::new(half_lambda).expect("positive mean").sample(rng)
                } else {
                    0.0
                };
                let k = shape + n;
                x = if k > 0.0 { 2.0 * scale * Gamma::new(k, 1.0).expect("positive shape").sample(rng) } else { 0.0 };
                path.push(x);
            }
        }
        CirScheme::Euler => {
            let mut x = params.x0;
            for m in 0..steps {
                let xp = x.max(0.0);
                let z: f64 = StandardNormal.sample(rng);
                x += (params.a.at(m) - params.b.at(m) * xp) * dt + (2.0 * params.c.at(m) * xp).sqrt() * dt.sqrt() * z;
                path.push(x);
            }
        }
    }
    Ok(path)
}

/// Number of `paths` CIR paths that reach `≤ 0`, replicates in parallel.
pub fn cir_zero_hits(params: &CirParams, dt: f64, steps: usize, paths: usize, seed: u64) -> Result<usize, OracleError> {
    (0..paths)
        .into_par_iter()
        .map(|r| {
            let p = simulate_cir(params, dt, steps, CirScheme::Exact, &mut stream(seed, r as u64, StreamRole::Cir))?;
            Ok(usize::from(p.iter().any(|x| *x <= 0.0)))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))
}

/// Spread dynamics rewritten as `dP̄ = (a - b P̄) dt + sqrt(2 c P̄) dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CirPoint {
    pub t: f64,
    pub spread: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadReduction {
    pub points: Vec<CirPoint>,
    /// Times with spread `≤ 0`, where the rewriting is undefined.
    pub undefined: Vec<f64>,
    /// Fraction of defined points with `a ≥ c` (relative slack `1e-12`).
    pub a_ge_c_fraction: f64,
}

/// `ρ̂_I = ρ_I / (p_a - p_b)`, `a = Σ ϱ_I μ_I`, `b = -Σ ρ̂_I β_I`,
/// `c = Σ ρ̂_I μ_I` along recorded limit states.
pub fn spread_reduction(params: &LimitParams, records: &[LimitRecord]) -> SpreadReduction {
    let mut points = Vec::new();
    let mut undefined = Vec::new();
    for r in records {
        let s = r.p_a - r.p_b;
        if !(s > 0.0) {
            undefined.push(r.t);
            continue;
        }
        let rho = params.rho(r.p_a, r.p_b);
        let varrho = params.varrho(r.p_a, r.p_b);
        let hat = rho.map(|x| x / s);
        points.push(CirPoint {
            t: r.t,
            spread: s,
            a: varrho[0] * r.mu[0] + varrho[1] * r.mu[1],
            b: -(hat[0] * r.beta[0] + hat[1] * r.beta[1]),
            c: hat[0] * r.mu[0] + hat[1] * r.mu[1],
        });
    }
    let ok = points.iter().filter(|p| p.a >= p.c - 1e-12 * p.c.abs()).count();
    let a_ge_c_fraction = if points.is_empty() { 1.0 } else { ok as f64 / points.len() as f64 };
    SpreadReduction { points, undefined, a_ge_c_fraction }
}

/// One-sided book `dP = |P| sqrt(μ) dB`, `μ = σ² + ∫ c e^{-κ(t-s)} |P|² μ ds`,
/// simulated as `log P`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneSidedParams {
    pub sigma2: f64,
    pub c: f64,
    pub kappa: f64,
    pub p0: f64,
    /// Caps `|P|` inside the excitation, keeping `μ` bounded.
    #[serde(default)]
    pub barrier: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringPlan {
    pub t: f64,
    pub epsilon: f64,
    pub lag: f64,
    pub dt: f64,
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub covariance: f64,
    pub se: f64,
    /// Mean squared log increment over the first window.
    pub mean_square: f64,
}

impl ClusteringReport {
    pub fn positive_at(&self, k: f64) -> bool {
        self.covariance > k * self.se
    }

    pub fn null_at(&self, k: f64) -> bool {
        self.covariance.abs() <= k * self.se
    }
}

/// Squared log increments over `[t, t+ε]` and `[t+r, t+r+ε]` of one path.
fn clustering_pair<R: Rng + ?Sized>(p: &OneSidedParams, plan: &ClusteringPlan, rng: &mut R) -> (f64, f64) {
    let dt = plan.dt;
    let idx = |t: f64| (t / dt).round() as usize;
    let (i0, i1, j0, j1) = (idx(plan.t), idx(plan.t + plan.epsilon), idx(plan.t + plan.lag), idx(plan.t + plan.lag + plan.epsilon));
    let steps = i1.max(j1);
    let decay = (-p.kappa * dt).exp();
    let mut log_p = p.p0.ln();
    let mut acc = 0.0;
    let mut marks = [0.0; 4];
    for m in 0..=steps {
        for (k, i) in [i0, i1, j0, j1].into_iter().enumerate() {
            if m == i {
                marks[k] = log_p;
            }
        }
        if m == steps {
            break;
        }
        let mu = p.sigma2 + p.c * acc;
        let p2 = match p.barrier {
            Some(b) => (2.0 * log_p).exp().min(b * b),
            None => (2.0 * log_p).exp(),
        };
        let z: f64 = StandardNormal.sample(rng);
        acc = decay * (acc + dt * p2 * mu);
        log_p += -0.5 * mu * dt + (mu * dt).sqrt() * z;
    }
    ((marks[1] - marks[0]).powi(2), (marks[3] - marks[2]).powi(2))
}

/// Monte Carlo estimate of `Cov((Δ_ε log P(t))², (Δ_ε log P(t+r))²)`.
pub fn one_sided_volatility_clustering(p: &OneSidedParams, plan: &ClusteringPlan) -> ClusteringReport {
    let pairs: Vec<(f64, f64)> = (0..plan.replicates)
        .into_par_iter()
        .map(|r| clustering_pair(p, plan, &mut stream(plan.seed, r as u64, StreamRole::Clustering)))
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let (covariance, se) = covariance_with_se(&xs, &ys);
    ClusteringReport { covariance, se, mean_square: crate::stats::mean(&xs) }
}

/// `μ(t) = σ² e^{G(t)} + κσ² ∫_0^t e^{G(t) - G(s)} ds`,
/// `G(t) = ∫_0^t (|P|² - κ)`, by cumulative trapezoid on the grid of `p`.
pub fn closed_form_mu_exponential(p: &[f64], dt: f64, sigma2: f64, kappa: f64) -> Vec<f64> {
    let mut g = 0.0;
    let mut inner = 0.0;
    let mut out = Vec::with_capacity(p.len());
    let f = |x: f64| x * x - kappa;
    for m in 0..p.len() {
        if m > 0 {
            let g_prev = g;
            g += 0.5 * dt * (f(p[m - 1]) + f(p[m]));
            inner += 0.5 * dt * ((-g_prev).exp() + (-g).exp());
        }
        out.push(sigma2 * g.exp() + kappa * sigma2 * g.exp() * inner);
    }
    out
}

/// Spatial anchor of the closed-form book.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BookAnchor {
    /// `e^{-x²}` at the absolute price `x`.
    Literal,
    /// `e^{-(x - P(t))²}`: the passive intensity follows the price.
    FollowPrice,
}

/// `V(t_m, x) = 1 + (V(0, x) - 1) exp{-w(x) ∫_0^{t_m} [|P|² + K*|P|²]}`
/// where `K` is the resolvent of the effective kernel on the same grid.
pub fn closed_form_book(
    p: &[f64],
    k: &ScalarResolvent,
    v0: impl Fn(f64) -> f64,
    nodes: &[f64],
    anchor: BookAnchor,
) -> Vec<Vec<f64>> {
    let dt = k.dt;
    let p2: Vec<f64> = p.iter().map(|x| x * x).collect();
    let conv = k.convolve(&p2);
    let mu: Vec<f64> = p2.iter().zip(&conv).map(|(a, b)| a + b).collect();
    let mut integral = 0.0;
    (0..p.len())
        .map(|m| {
            if m > 0 {
                integral += 0.5 * dt * (mu[m - 1] + mu[m]);
            }
            nodes
                .iter()
                .map(|&x| {
                    let w = match anchor {
                        BookAnchor::Literal => (-x * x).exp(),
                        BookAnchor::FollowPrice => (-(x - p[m]).powi(2)).exp(),
                    };
                    1.0 + (v0(x) - 1.0) * (-w * integral).exp()
                })
                .collect()
        })
        .collect()
}

/// The exponential-kernel one-sided model: `ρ = |P|²/2`, `μ̂ = σ²`,
/// effective kernel `2e^{-κt}` so that `μ = σ² + ∫ e^{-κ(t-s)} |P|² μ ds`.
pub fn example_exponential_model(sigma2: f64, kappa: f64, p0: f64) -> ModelSpec {
    let mut m = ModelSpec::quiet(InitialBook { p_a: p0, p_b: p0 - 1.0, ask: VolumeInit::flat(1.0), bid: VolumeInit::flat(1.0) });
    m.ask.rate = RateMultiplier::PriceSquared { scale: 0.5 };
    m.ask.mu_hat = StateScalar::constant(sigma2);
    m.phi.push(PhiTerm {
        target: Side::Ask,
        source: ActiveType::AskMarket,
        kernel: TimeKernelDecl::Exponential { c: 2.0, kappa },
        theta: TimeKernelDecl::Zero,
    });
    m
}

/// The closed-form one-sided book: `ρ = 1/2`, `μ̂ = |P|²`,
/// `λ̂ = |P|² e^{-x²}` for placements and cancellations, `α_L = 1`,
/// `α_C = -1`, and kernels `φ̃ = 2φ`, `Φ = √(2/π) φ e^{-y²}`,
/// `ψ̃ = 2φ e^{-x²}`, `Ψ = √(2/π) φ e^{-x²-y²}`, so that
/// `μ = |P|² + 2φ*μ` and `λ = e^{-x²} μ`.
pub fn example_book_params(phi: &TimeKernel, p0: f64, v0: VolumeInit, grid: SpatialGrid) -> LimitParams {
    let gauss = Profile::gaussian(1.0, 0.0, 1.0);
    let source = Profile::gaussian((2.0 / PI).sqrt(), 0.0, 1.0);
    let twice = phi.combine(2.0, &TimeKernel::zero(), 0.0);
    let place = PassiveType::AskPlace;
    let mut terms = vec![
        BlockTerm::new(TargetSlot::Mu(Side::Ask), None, SourceSlot::Mu(Side::Ask), None, twice.clone()),
        BlockTerm::new(TargetSlot::Mu(Side::Ask), None, SourceSlot::Lam(place), Some(source), phi.clone()),
    ];
    for target in [PassiveType::AskPlace, PassiveType::AskCancel] {
        terms.push(BlockTerm::new(TargetSlot::Lam(target), Some(gauss), SourceSlot::Mu(Side::Ask), None, twice.clone()));
        terms.push(BlockTerm::new(TargetSlot::Lam(target), Some(gauss), SourceSlot::Lam(place), Some(source), phi.clone()));
    }
    terms.retain(|t| !t.kernel.is_zero());
    let exo = ExoPassive { scale: StateScalar::PriceSquared { scale: 1.0 }, profile: gauss };
    let initial = InitialBook { p_a: p0, p_b: p0 - 1.0, ask: v0, bid: VolumeInit::flat(1.0) };
    LimitParams {
        rates: [RateMultiplier::Constant { rho: 0.5, varrho: 0.0 }, RateMultiplier::Constant { rho: 0.0, varrho: 0.0 }],
        mu_hat: [StateScalar::PriceSquared { scale: 1.0 }, StateScalar::constant(0.0)],
        beta_hat: [StateScalar::constant(0.0); 2],
        lambda_hat: [exo, exo, ExoPassive::zero(), ExoPassive::zero()],
        alpha: [1.0, -1.0, 0.0, 0.0],
        kernel: BlockKernel::new(terms),
        grid,
        volume_grid: VolumeGrid::covering(&initial, &grid),
        initial,
        price_barrier: None,
    }
}

/// Symmetric two-sided model with `ρ_I = (p_a - p_b)⁺`, `ϱ_I = varrho`,
/// constant `μ̂` and mild cross-excitation: the spread-positivity setting.
pub fn spread_positive_model(mu_hat: f64, varrho: f64, spread: f64) -> ModelSpec {
    let mut m = ModelSpec::quiet(InitialBook { p_a: 1.0 + spread, p_b: 1.0, ask: VolumeInit::flat(1.0), bid: VolumeInit::flat(1.0) });
    for side in [&mut m.ask, &mut m.bid] {
        side.rate = RateMultiplier::SpreadRamp { slope: 1.0, cap: 1e6, varrho };
        side.mu_hat = StateScalar::constant(mu_hat);
    }
    for (target, source) in [(Side::Ask, ActiveType::BidMarket), (Side::Bid, ActiveType::AskMarket)] {
        m.phi.push(PhiTerm { target, source, kernel: TimeKernelDecl::Exponential { c: 0.5, kappa: 2.0 }, theta: TimeKernelDecl::Zero });
    }
    let g = Profile::gaussian(1.0, 0.2, 0.5);
    for p in PassiveType::ALL {
        let size = if p.is_placement() { SizeMeasure::Exponential { rate: 5.0 } } else { SizeMeasure::Dirac { z: 0.5 } };
        *match p {
            PassiveType::AskPlace => &mut m.ask_place,
            PassiveType::AskCancel => &mut m.ask_cancel,
            PassiveType::BidPlace => &mut m.bid_place,
            PassiveType::BidCancel => &mut m.bid_cancel,
        } = PassiveSpec { exo: ExoPassive { scale: StateScalar::constant(0.5), profile: g }, size };
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CirReport {
    pub params: CirParams,
    pub dt: f64,
    pub steps: usize,
    pub paths: usize,
    /// `a ≥ c ≥ 0`.
    pub feller: bool,
    pub zero_hits: usize,
    pub min_value: f64,
    pub pass: bool,
}

/// Exact-sampler positivity check; replicates in parallel.
pub fn cir_check(params: &CirParams, dt: f64, steps: usize, paths: usize, seed: u64) -> Result<CirReport, OracleError> {
    let mins: Vec<f64> = (0..paths)
        .into_par_iter()
        .map(|r| {
            let p = simulate_cir(params, dt, steps, CirScheme::Exact, &mut stream(seed, r as u64, StreamRole::Cir))?;
            Ok(p.into_iter().fold(f64::INFINITY, f64::min))
        })
        .collect::<Result<_, OracleError>>()?;
    let zero_hits = mins.iter().filter(|m| **m <= 0.0).count();
    let (a, c) = (params.a.at(0), params.c.at(0));
    let feller = a >= c && c >= 0.0;
    Ok(CirReport {
        params: params.clone(),
        dt,
        steps,
        paths,
        feller,
        zero_hits,
        min_value: mins.iter().copied().fold(f64::INFINITY, f64::min),
        pass: zero_hits == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitSpreadReport {
    pub paths: usize,
    pub dt: f64,
    pub min_spread: f64,
    /// Smallest `spread + 4 σ √Δt` over negative excursions, `σ` taken at the
    /// last point with positive spread.
    pub worst_margin: f64,
    pub violations: usize,
    pub undefined_points: usize,
    pub min_a_ge_c_fraction: f64,
    pub pass: bool,
}

/// Limit spread positivity up to `4 σ √Δt` of discretization overshoot,
/// where `σ = sqrt(σ_a² + σ_b²)` is the spread diffusion on entry.
pub fn limit_spread_check(params: &LimitParams, paths: usize, horizon: f64, dt: f64, seed: u64) -> Result<LimitSpreadReport, LimitError> {
    let steps = (horizon / dt).round() as usize;
    let opts = LimitOptions { cadence: 1, ..Default::default() };
    let rows: Vec<(f64, f64, usize, usize, f64)> = (0..paths)
        .into_par_iter()
        .map(|r| {
            let noise = NoisePath::generate(steps, dt, &mut stream(seed, r as u64, StreamRole::LimitNoise));
            let path = solve_path(params, &noise, &opts)?;
            let mut min_spread = f64::INFINITY;
            let mut margin = f64::INFINITY;
            let mut violations = 0;
            let mut entry_sigma = 0.0;
            for rec in &path.records {
                let s = rec.p_a - rec.p_b;
                min_spread = min_spread.min(s);
                if s > 0.0 {
                    entry_sigma = rec.sigma[0].hypot(rec.sigma[1]);
                } else {
                    let m = s + 4.0 * entry_sigma * dt.sqrt();
                    margin = margin.min(m);
                    if m < 0.0 {
                        violations += 1;
                    }
                }
            }
            let red = spread_reduction(params, &path.records);
            Ok((min_spread, margin, violations, red.undefined.len(), red.a_ge_c_fraction))
        })
        .collect::<Result<_, LimitError>>()?;
    let violations = rows.iter().map(|r| r.2).sum();
    Ok(LimitSpreadReport {
        paths,
        dt,
        min_spread: rows.iter().map(|r| r.0).fold(f64::INFINITY, f64::min),
        worst_margin: rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min),
        violations,
        undefined_points: rows.iter().map(|r| r.3).sum(),
        min_a_ge_c_fraction: rows.iter().map(|r| r.4).fold(1.0, f64::min),
        pass: violations == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroSpreadReport {
    pub replicates: usize,
    pub delta_x: f64,
    pub min_spread: f64,
    pub events: usize,
    pub crossings: usize,
    pub pass: bool,
}

/// Micro spread `≥ 0` after every event of every replicate.
pub fn micro_spread_check(params: &MicroParams, replicates: usize, horizon: f64, seed: u64) -> Result<MicroSpreadReport, LobError> {
    let rows: Vec<(f64, usize, bool)> = (0..replicates)
        .into_par_iter()
        .map(|r| match simulate_book(params, horizon, &mut stream(seed, r as u64, StreamRole::MicroBook), &SimOptions::default()) {
            Ok(run) => Ok((run.diagnostics.min_spread, run.events.len(), false)),
            Err(LobError::Crossing { p_a, p_b, .. }) => Ok((p_a - p_b, 0, true)),
            Err(e) => Err(e),
        })
        .collect::<Result<_, LobError>>()?;
    let crossings = rows.iter().filter(|r| r.2).count();
    let min_spread = rows.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    Ok(MicroSpreadReport {
        replicates,
        delta_x: params.delta_x,
        min_spread,
        events: rows.iter().map(|r| r.1).sum(),
        crossings,
        pass: crossings == 0 && min_spread >= 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringCheck {
    pub params: OneSidedParams,
    pub plan: ClusteringPlan,
    pub signal: ClusteringReport,
    /// Same plan with the kernel switched off.
    pub control: ClusteringReport,
    pub pass: bool,
}

pub fn clustering_check(params: &OneSidedParams, plan: &ClusteringPlan) -> ClusteringCheck {
    let signal = one_sided_volatility_clustering(params, plan);
    let control = one_sided_volatility_clustering(&OneSidedParams { c: 0.0, ..*params }, plan);
    ClusteringCheck { params: *params, plan: *plan, signal, control, pass: signal.positive_at(3.0) && control.null_at(3.0) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BookCheckReport {
    pub horizon: f64,
    pub dt: f64,
    pub nodes: usize,
    pub anchor: BookAnchor,
    pub resolvent_residual: f64,
    pub max_abs_error: f64,
    pub intensity_clamps: usize,
}

/// Zero-noise limit solve of the closed-form book against the formula at `T`.
pub fn closed_form_book_check(
    phi: &TimeKernel,
    p0: f64,
    v0: VolumeInit,
    grid: SpatialGrid,
    horizon: f64,
    dt: f64,
) -> Result<BookCheckReport, LimitError> {
    let params = example_book_params(phi, p0, v0, grid);
    let steps = (horizon / dt).round() as usize;
    let path = solve_path(&params, &NoisePath::zeros(steps, dt), &LimitOptions { cadence: steps.max(1), ..Default::default() })?;
    let p: Vec<f64> = vec![p0; steps + 1];
    let twice = phi.combine(2.0, &TimeKernel::zero(), 0.0);
    let k = scalar_resolvent_k(&twice, horizon, dt);
    let nodes = params.volume_grid.nodes();
    let exact = closed_form_book(&p, &k, |x| v0.eval(x), &nodes, BookAnchor::FollowPrice);
    let last = exact.last().expect("nonempty grid");
    let max_abs_error = last.iter().zip(&path.final_state.v_a).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(BookCheckReport {
        horizon,
        dt,
        nodes: grid.len(),
        anchor: BookAnchor::FollowPrice,
        resolvent_residual: k.residual,
        max_abs_error,
        intensity_clamps: path.intensity_clamps.count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuCheckReport {
    pub horizon: f64,
    pub dt: f64,
    pub max_rel_error: f64,
    pub final_p: f64,
    pub final_mu: f64,
}

/// Realized `μ` of the exponential-kernel model against the closed form on
/// the realized price path.
pub fn closed_form_mu_check(sigma2: f64, kappa: f64, p0: f64, horizon: f64, dt: f64, seed: u64) -> Result<MuCheckReport, OracleError> {
    let model = example_exponential_model(sigma2, kappa, p0);
    let grid = SpatialGrid::new(1.0, 3).map_err(|e| OracleError::Invalid(e.to_string()))?;
    let params = model.limit_params(grid).map_err(|e| OracleError::Invalid(e.to_string()))?;
    let steps = (horizon / dt).round() as usize;
    let noise = NoisePath::generate(steps, dt, &mut stream(seed, 0, StreamRole::LimitNoise));
    let path = solve_path(&params, &noise, &LimitOptions { cadence: 1, ..Default::default() }).map_err(|e| OracleError::Invalid(e.to_string()))?;
    let p: Vec<f64> = path.records.iter().map(|r| r.p_a).collect();
    let exact = closed_form_mu_exponential(&p, dt, sigma2, kappa);
    let max_rel_error = path.records.iter().zip(&exact).map(|(r, e)| ((r.mu[0] - e) / e).abs()).fold(0.0, f64::max);
    let last = path.records.last().expect("records");
    Ok(MuCheckReport { horizon, dt, max_rel_error, final_p: last.p_a, final_mu: last.mu[0] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cir_deterministic_modes() {
        let p = CirParams { x0: 2.0, a: CirCoef::Constant(1.0), b: CirCoef::Constant(0.5), c: CirCoef::Constant(0.0) };
        let path = simulate_cir(&p, 0.01, 100, CirScheme::Exact, &mut stream(1, 0, StreamRole::Cir)).unwrap();
        let exact = 2.0 + (2.0 - 2.0) * (-0.5f64).exp();
        assert_relative_eq!(path[100], exact, epsilon = 1e-6);
        let p = CirParams { x0: 0.5, a: CirCoef::Constant(1.0), b: CirCoef::Constant(0.0), c: CirCoef::Constant(0.0) };
        let path = simulate_cir(&p, 0.01, 100, CirScheme::Euler, &mut stream(1, 0, StreamRole::Cir)).unwrap();
        assert_relative_eq!(path[100], 1.5, epsilon = 1e-9);
        let bad = CirParams { c: CirCoef::Path(vec![1.0; 3]), ..p };
        assert_eq!(simulate_cir(&bad, 0.1, 2, CirScheme::Exact, &mut stream(1, 0, StreamRole::Cir)), Err(OracleError::NonConstantCoefficients));
    }

    #[test]
    fn closed_form_mu_cases() {
        let zero = closed_form_mu_exponential(&[0.0; 101], 0.01, 0.7, 2.0);
        assert!(zero.iter().all(|m| (m - 0.7).abs() < 1e-4));
        let p = vec![0.8; 1001];
        let mu = closed_form_mu_exponential(&p, 1e-3, 0.5, 0.0);
        assert_relative_eq!(mu[1000], 0.5 * (0.64f64).exp(), max_relative = 1e-12);
        assert_eq!(mu[0], 0.5);
    }

    #[test]
    fn closed_form_book_cases() {
        let k = scalar_resolvent_k(&TimeKernel::zero(), 1.0, 0.01);
        let nodes = [-3.0, 0.0, 1.0];
        let flat = closed_form_book(&[0.8; 101], &k, |_| 1.0, &nodes, BookAnchor::Literal);
        assert!(flat.iter().flatten().all(|v| *v == 1.0));
        let v = closed_form_book(&[0.8; 101], &k, |x| 1.0 + 0.5 * (-x * x).exp(), &[0.0, 30.0], BookAnchor::Literal);
        assert_relative_eq!(v[100][0], 1.0 + 0.5 * (-0.64f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(v[100][1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn reduction_boundary_case() {
        let m = spread_positive_model(0.5, 1.0, 0.1);
        let p = m.limit_params(SpatialGrid::new(2.0, 21).unwrap()).unwrap();
        let r = LimitRecord {
            t: 0.0,
            p_a: 1.05,
            p_b: 0.95,
            mu: [0.5, 0.7],
            beta: [0.0; 2],
            rho: [0.1; 2],
            h: [0.0; 2],
            sigma: [0.0; 2],
            v_func: vec![],
            eta: vec![],
        };
        let red = spread_reduction(&p, std::slice::from_ref(&r));
        assert_relative_eq!(red.points[0].a, red.points[0].c, max_relative = 1e-12);
        assert_eq!(red.a_ge_c_fraction, 1.0);
        let doubled = spread_reduction(&spread_positive_model(0.5, 2.0, 0.1).limit_params(p.grid).unwrap(), std::slice::from_ref(&r));
        assert!(doubled.points[0].a > doubled.points[0].c);
        let frozen = spread_reduction(&p, &[LimitRecord { mu: [0.0; 2], ..r }]);
        assert_eq!((frozen.points[0].a, frozen.points[0].c), (0.0, 0.0));
    }
}
