//! Time stepping of the limit system: price SDEs, volume ODEs and the
//! Volterra-Fredholm intensities.
//!
//! Each step first solves the intensities at the current time from the
//! state at step start, then advances prices by Euler-Maruyama and volumes
//! by explicit Euler. Volumes live on an absolute price grid; passive
//! intensities live on the relative grid `[-L, L]` and are read at
//! `x - P_a` (ask) or `P_b - x` (bid) by linear interpolation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{Profile, RateMultiplier, Side, StateScalar};
use crate::model::{ExoPassive, InitialBook, PassiveType};
use crate::volterra::{solve_forward, BlockKernel, ClampStats, ConvolutionRoute, IntensityField, SpatialGrid, VolterraError, VolterraStepper};

#[derive(Debug, Error, PartialEq)]
pub enum LimitError {
    #[error("non-finite state at step {step} (t = {t})")]
    NonFinite { step: usize, t: f64 },
    #[error(transparent)]
    Volterra(#[from] VolterraError),
    #[error("diffusion radicand clamped at {count} of {steps} steps (limit 0.1%)")]
    Radicand { count: usize, steps: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Uniform absolute price grid `x_j = x0 + j·h` for the volume densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeGrid {
    pub x0: f64,
    pub h: f64,
    pub n: usize,
}

impl VolumeGrid {
    /// Spacing of `grid`, covering `[p_b - 2L, p_a + 2L]`.
    pub fn covering(initial: &InitialBook, grid: &SpatialGrid) -> Self {
        let h = grid.spacing();
        let l = grid.half_width();
        let lo = ((initial.p_b - 2.0 * l) / h).floor() * h;
        let hi = initial.p_a + 2.0 * l;
        let n = ((hi - lo) / h).ceil() as usize + 1;
        VolumeGrid { x0: lo, h, n }
    }

    pub fn node(&self, j: usize) -> f64 {
        self.x0 + j as f64 * self.h
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.node(j)).collect()
    }

    /// Trapezoid `∫ v f`.
    pub fn pair(&self, v: &[f64], f: &Profile) -> f64 {
        let s: f64 = v.iter().enumerate().map(|(j, x)| x * f.eval(self.node(j))).sum();
        let ends = 0.5 * (v[0] * f.eval(self.node(0)) + v[self.n - 1] * f.eval(self.node(self.n - 1)));
        self.h * (s - ends)
    }
}

/// Coefficients of the limit system.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitParams {
    pub rates: [RateMultiplier; 2],
    pub mu_hat: [StateScalar; 2],
    pub beta_hat: [StateScalar; 2],
    pub lambda_hat: [ExoPassive; 4],
    /// `α_IL` for placements, `α_IC` for cancellations, by [`PassiveType::index`].
    pub alpha: [f64; 4],
    pub kernel: BlockKernel,
    pub grid: SpatialGrid,
    pub volume_grid: VolumeGrid,
    pub initial: InitialBook,
    /// Prices are clamped to `[-barrier, barrier]` when set.
    pub price_barrier: Option<f64>,
}

/// `(P_a, P_b, V_a, V_b)` at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitState {
    pub t: f64,
    pub p_a: f64,
    pub p_b: f64,
    pub v_a: Vec<f64>,
    pub v_b: Vec<f64>,
}

impl LimitState {
    pub fn spread(&self) -> f64 {
        self.p_a - self.p_b
    }

    pub fn volume(&self, side: Side) -> &[f64] {
        match side {
            Side::Ask => &self.v_a,
            Side::Bid => &self.v_b,
        }
    }

    fn is_finite(&self) -> bool {
        self.p_a.is_finite() && self.p_b.is_finite() && self.v_a.iter().chain(&self.v_b).all(|v| v.is_finite())
    }
}

impl LimitParams {
    pub fn initial_state(&self) -> LimitState {
        let nodes = self.volume_grid.nodes();
        LimitState {
            t: 0.0,
            p_a: self.initial.p_a,
            p_b: self.initial.p_b,
            v_a: nodes.iter().map(|x| self.initial.ask.eval(*x)).collect(),
            v_b: nodes.iter().map(|x| self.initial.bid.eval(*x)).collect(),
        }
    }

    /// `D̂(t, S)` on the spatial grid, with `β̂` in the drift slots.
    pub fn exogenous(&self, p_a: f64, p_b: f64) -> IntensityField {
        IntensityField {
            mu: Side::BOTH.map(|s| self.mu_hat[s.index()].eval(s, p_a, p_b)),
            lam: PassiveType::ALL.map(|p| self.grid.sample(|x| self.lambda_hat[p.index()].eval(p.side(), p_a, p_b, x))),
            beta: Side::BOTH.map(|s| self.beta_hat[s.index()].eval(s, p_a, p_b)),
        }
    }

    pub fn rho(&self, p_a: f64, p_b: f64) -> [f64; 2] {
        Side::BOTH.map(|s| self.rates[s.index()].limit_rho(s, p_a, p_b))
    }

    pub fn varrho(&self, p_a: f64, p_b: f64) -> [f64; 2] {
        Side::BOTH.map(|s| self.rates[s.index()].limit_varrho(s, p_a, p_b))
    }

    /// `V_I'(x)` on the volume grid given the intensities.
    pub fn volume_rate(&self, state: &LimitState, d: &IntensityField, side: Side) -> Vec<f64> {
        let (place, cancel) = match side {
            Side::Ask => (PassiveType::AskPlace, PassiveType::AskCancel),
            Side::Bid => (PassiveType::BidPlace, PassiveType::BidCancel),
        };
        let (al, ac) = (self.alpha[place.index()], self.alpha[cancel.index()]);
        let (ll, lc) = (&d.lam[place.index()], &d.lam[cancel.index()]);
        let v = state.volume(side);
        (0..self.volume_grid.n)
            .map(|j| {
                let x = self.volume_grid.node(j);
                let rel = match side {
                    Side::Ask => x - state.p_a,
                    Side::Bid => state.p_b - x,
                };
                al * self.grid.interpolate(ll, rel) + ac * self.grid.interpolate(lc, rel) * v[j]
            })
            .collect()
    }
}

/// `h_I = ρ_I β_I + ϱ_I μ_I` and `σ_I = sqrt(2 ρ_I μ_I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftDiffusion {
    pub h: [f64; 2],
    pub sigma: [f64; 2],
    pub clamped: usize,
}

impl DriftDiffusion {
    /// Drift of `P_a` and `P_b` (the bid enters with a minus sign).
    pub fn price_drift(&self) -> [f64; 2] {
        [self.h[0], -self.h[1]]
    }
}

pub fn drift_diffusion(params: &LimitParams, p_a: f64, p_b: f64, d: &IntensityField) -> DriftDiffusion {
    let rho = params.rho(p_a, p_b);
    let varrho = params.varrho(p_a, p_b);
    let mut clamped = 0;
    let sigma = [0, 1].map(|i| {
        let r = 2.0 * rho[i] * d.mu[i];
        if r < 0.0 {
            clamped += 1;
        }
        r.max(0.0).sqrt()
    });
    DriftDiffusion { h: [0, 1].map(|i| rho[i] * d.beta[i] + varrho[i] * d.mu[i]), sigma, clamped }
}

/// Brownian increments `(ΔB_a, ΔB_b)` on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePath {
    pub dt: f64,
    pub increments: Vec<[f64; 2]>,
}

impl NoisePath {
    pub fn generate<R: Rng + ?Sized>(steps: usize, dt: f64, rng: &mut R) -> Self {
        let s = dt.sqrt();
        let increments = (0..steps)
            .map(|_| {
                let a: f64 = StandardNormal.sample(rng);
                let b: f64 = StandardNormal.sample(rng);
                [s * a, s * b]
            })
            .collect();
        NoisePath { dt, increments }
    }

    pub fn zeros(steps: usize, dt: f64) -> Self {
        NoisePath { dt, increments: vec![[0.0; 2]; steps] }
    }

    /// Sums blocks of `factor` increments: the same Brownian path on a
    /// coarser grid.
    pub fn coarsen(&self, factor: usize) -> Self {
        let increments = self
            .increments
            .chunks(factor)
            .map(|c| c.iter().fold([0.0; 2], |acc, x| [acc[0] + x[0], acc[1] + x[1]]))
            .collect();
        NoisePath { dt: self.dt * factor as f64, increments }
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }
}

/// A recorded grid time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitRecord {
    pub t: f64,
    pub p_a: f64,
    pub p_b: f64,
    pub mu: [f64; 2],
    pub beta: [f64; 2],
    pub rho: [f64; 2],
    pub h: [f64; 2],
    pub sigma: [f64; 2],
    /// `⟨V_I, f⟩` per declared test function.
    pub v_func: Vec<f64>,
    /// `⟨α_IL λ_IL + α_IC λ_IC V_I, f⟩` per declared test function.
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LimitOptions {
    /// Keep every `cadence`-th grid time (and the last); 0 means 1.
    pub cadence: usize,
    /// Keep the full intensity field at recorded times.
    pub record_fields: bool,
    /// Spatial test functions `(side, f)`.
    pub test_functions: Vec<(Side, Profile)>,
    pub route: ConvolutionRoute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitPath {
    pub records: Vec<LimitRecord>,
    pub fields: Vec<IntensityField>,
    pub final_state: LimitState,
    pub radicand_clamps: usize,
    pub intensity_clamps: ClampStats,
    pub barrier_hits: usize,
    pub steps: usize,
    pub dt: f64,
}

/// Stepper bundling the state and the intensity solver.
#[derive(Debug, Clone)]
pub struct LimitStepper<'a> {
    params: &'a LimitParams,
    volterra: VolterraStepper,
    pub state: LimitState,
    pub dt: f64,
    step: usize,
    pub barrier_hits: usize,
    pub radicand_clamps: usize,
}

/// Outcome of one step: the intensities and coefficients at step start.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub field: IntensityField,
    pub coefficients: DriftDiffusion,
    pub rho: [f64; 2],
}

impl<'a> LimitStepper<'a> {
    pub fn new(params: &'a LimitParams, dt: f64, route: ConvolutionRoute) -> Self {
        LimitStepper {
            params,
            volterra: VolterraStepper::new(&params.kernel, params.grid, dt, route),
            state: params.initial_state(),
            dt,
            step: 0,
            barrier_hits: 0,
            radicand_clamps: 0,
        }
    }

    pub fn with_state(mut self, state: LimitState) -> Self {
        self.state = state;
        self
    }

    /// Intensities at the current time (once per grid time).
    pub fn intensities(&mut self) -> Result<StepInfo, LimitError> {
        let (pa, pb) = (self.state.p_a, self.state.p_b);
        let rho = self.params.rho(pa, pb);
        let field = self.volterra.step(&self.params.exogenous(pa, pb), rho)?;
        let coefficients = drift_diffusion(self.params, pa, pb, &field);
        self.radicand_clamps += coefficients.clamped;
        Ok(StepInfo { field, coefficients, rho })
    }

    /// Advances prices and volumes over one step with increment `db`.
    pub fn advance(&mut self, info: &StepInfo, db: [f64; 2]) -> Result<(), LimitError> {
        let dt = self.dt;
        let rate_a = self.params.volume_rate(&self.state, &info.field, Side::Ask);
        let rate_b = self.params.volume_rate(&self.state, &info.field, Side::Bid);
        let drift = info.coefficients.price_drift();
        let s = &mut self.state;
        s.p_a += drift[0] * dt + info.coefficients.sigma[0] * db[0];
        s.p_b += drift[1] * dt + info.coefficients.sigma[1] * db[1];
        if let Some(b) = self.params.price_barrier {
            for p in [&mut s.p_a, &mut s.p_b] {
                if p.abs() > b {
                    *p = p.clamp(-b, b);
                    self.barrier_hits += 1;
                }
            }
        }
        s.v_a.iter_mut().zip(&rate_a).for_each(|(v, r)| *v += dt * r);
        s.v_b.iter_mut().zip(&rate_b).for_each(|(v, r)| *v += dt * r);
        self.step += 1;
        s.t = self.step as f64 * dt;
        if !s.is_finite() {
            return Err(LimitError::NonFinite { step: self.step, t: s.t });
        }
        Ok(())
    }

    pub fn intensity_clamps(&self) -> ClampStats {
        self.volterra.clamps
    }

    fn record(&self, info: &StepInfo, tests: &[(Side, Profile)]) -> LimitRecord {
        let s = &self.state;
        let vg = &self.params.volume_grid;
        let mut rates: [Option<Vec<f64>>; 2] = [None, None];
        let mut eta = Vec::with_capacity(tests.len());
        let mut v_func = Vec::with_capacity(tests.len());
        for (side, f) in tests {
            let r = rates[side.index()].get_or_insert_with(|| self.params.volume_rate(s, &info.field, *side));
            eta.push(vg.pair(r, f));
            v_func.push(vg.pair(s.volume(*side), f));
        }
        LimitRecord {
            t: s.t,
            p_a: s.p_a,
            p_b: s.p_b,
            mu: info.field.mu,
            beta: info.field.beta,
            rho: info.rho,
            h: info.coefficients.h,
            sigma: info.coefficients.sigma,
            v_func,
            eta,
        }
    }
}

/// Solves on `[0, noise.steps()·dt]`.
pub fn solve_path(params: &LimitParams, noise: &NoisePath, opts: &LimitOptions) -> Result<LimitPath, LimitError> {
    let steps = noise.steps();
    let cadence = opts.cadence.max(1);
    let mut stepper = LimitStepper::new(params, noise.dt, opts.route);
    let mut records = Vec::new();
    let mut fields = Vec::new();
    for m in 0..=steps {
        let info = stepper.intensities()?;
        if m % cadence == 0 || m == steps {
            records.push(stepper.record(&info, &opts.test_functions));
            if opts.record_fields {
                fields.push(info.field.clone());
            }
        }
        if m < steps {
            stepper.advance(&info, noise.increments[m])?;
        }
    }
    if stepper.radicand_clamps * 1000 > steps.max(1) {
        return Err(LimitError::Radicand { count: stepper.radicand_clamps, steps });
    }
    Ok(LimitPath {
        records,
        fields,
        final_state: stepper.state.clone(),
        radicand_clamps: stepper.radicand_clamps,
        intensity_clamps: stepper.intensity_clamps(),
        barrier_hits: stepper.barrier_hits,
        steps,
        dt: noise.dt,
    })
}

/// Re-solves the intensities from a recorded price path (every grid time).
pub fn resolve_intensities(params: &LimitParams, records: &[LimitRecord], dt: f64) -> Result<Vec<IntensityField>, LimitError> {
    let dhat: Vec<IntensityField> = records.iter().map(|r| params.exogenous(r.p_a, r.p_b)).collect();
    let rho: Vec<[f64; 2]> = records.iter().map(|r| params.rho(r.p_a, r.p_b)).collect();
    Ok(solve_forward(&params.kernel, params.grid, dt, &dhat, &rho, ConvolutionRoute::Auto)?.0)
}

/// Outcome of the well-posedness check `0 < ρ_I(S) ≤ ϱ_I(S)(p_a - p_b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub epsilon: f64,
    pub probes: usize,
    /// `(side, p_a, p_b, ρ, ϱ)` of failing probes.
    pub violations: Vec<(Side, f64, f64, f64, f64)>,
    pub pass: bool,
}

/// Probes with spreads `ε·k/10`, `k = 1..10`, around `mid`.
pub fn default_probes(epsilon: f64, mid: f64) -> Vec<(f64, f64)> {
    (1..=10)
        .map(|k| {
            let s = epsilon * k as f64 / 10.0;
            (mid + 0.5 * s, mid - 0.5 * s)
        })
        .filter(|(a, b)| a - b < epsilon)
        .collect()
}

pub fn check_uniqueness_condition(params: &LimitParams, epsilon: f64, probes: &[(f64, f64)]) -> UniquenessReport {
    let mut violations = Vec::new();
    for &(pa, pb) in probes {
        let spread = pa - pb;
        if !(spread > 0.0 && spread < epsilon) {
            continue;
        }
        for s in Side::BOTH {
            let rate = &params.rates[s.index()];
            let rho = rate.limit_rho(s, pa, pb);
            let varrho = rate.limit_varrho(s, pa, pb);
            if !(rho > 0.0 && rho <= varrho * spread * (1.0 + 1e-12)) {
                violations.push((s, pa, pb, rho, varrho));
            }
        }
    }
    UniquenessReport { epsilon, probes: probes.len(), pass: violations.is_empty() && !probes.is_empty(), violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{SizeMeasure, TimeKernelDecl};
    use crate::model::{ActiveType, ModelSpec, PassiveSpec, PhiTerm, VolumeInit};
    use crate::rng::{stream, StreamRole};
    use approx::assert_relative_eq;

    fn quiet_model() -> ModelSpec {
        ModelSpec::quiet(InitialBook { p_a: 1.0, p_b: 0.9, ask: VolumeInit::flat(1.0), bid: VolumeInit::flat(1.0) })
    }

    fn params(m: &ModelSpec) -> LimitParams {
        m.limit_params(SpatialGrid::new(2.0, 41).unwrap()).unwrap()
    }

    #[test]
    fn drift_diffusion_examples() {
        let mut m = quiet_model();
        m.ask.rate = RateMultiplier::Constant { rho: 1.0, varrho: 0.0 };
        let p = params(&m);
        let mut d = IntensityField::zeros(41);
        d.mu = [2.0, 0.0];
        let dd = drift_diffusion(&p, 1.0, 0.9, &d);
        assert_eq!(dd.sigma[0], 2.0);
        m.ask.rate = RateMultiplier::Constant { rho: 0.0, varrho: 0.5 };
        let dd = drift_diffusion(&params(&m), 1.0, 0.9, &d);
        assert_eq!(dd.sigma[0], 0.0);
        assert_eq!(dd.h[0], 1.0);
    }

    #[test]
    fn quiet_prices_constant() {
        let mut m = quiet_model();
        m.ask.mu_hat = StateScalar::constant(1.0);
        let p = params(&m);
        let path = solve_path(&p, &NoisePath::zeros(100, 0.01), &LimitOptions::default()).unwrap();
        assert_eq!(path.final_state.p_a, 1.0);
        assert_eq!(path.final_state.p_b, 0.9);
    }

    #[test]
    fn volume_relaxes_to_fixed_point() {
        let mut m = quiet_model();
        let g = Profile::gaussian(1.0, 0.0, 1.0);
        m.initial.ask = VolumeInit { level: 1.0, bump: Profile::gaussian(0.8, 1.0, 0.5) };
        m.ask_place = PassiveSpec { exo: ExoPassive { scale: StateScalar::constant(1.0), profile: g }, size: SizeMeasure::Dirac { z: 2f64.ln() } };
        m.ask_cancel = PassiveSpec { exo: ExoPassive { scale: StateScalar::constant(1.0), profile: g }, size: SizeMeasure::Dirac { z: 2f64.ln() } };
        let p = params(&m);
        assert_relative_eq!(p.alpha[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.alpha[1], -0.5, epsilon = 1e-12);
        // Fixed point -α_L/α_C = 2.
        let mut stepper = LimitStepper::new(&p, 0.01, ConvolutionRoute::Auto);
        let j = (0..p.volume_grid.n).min_by(|a, b| {
            (p.volume_grid.node(*a) - 1.0).abs().total_cmp(&(p.volume_grid.node(*b) - 1.0).abs())
        });
        let j = j.unwrap();
        let mut prev = stepper.state.v_a[j];
        for _ in 0..500 {
            let info = stepper.intensities().unwrap();
            stepper.advance(&info, [0.0; 2]).unwrap();
            let v = stepper.state.v_a[j];
            assert!(v >= prev && v <= 2.0);
            prev = v;
        }
        assert!(prev > 1.9);
    }

    #[test]
    fn deterministic_and_self_consistent() {
        let mut m = quiet_model();
        m.ask.rate = RateMultiplier::Constant { rho: 1.0, varrho: 0.2 };
        m.ask.mu_hat = StateScalar::constant(0.5);
        m.phi.push(PhiTerm {
            target: Side::Ask,
            source: ActiveType::AskMarket,
            kernel: TimeKernelDecl::Exponential { c: 0.5, kappa: 1.0 },
            theta: TimeKernelDecl::Exponential { c: 0.3, kappa: 1.0 },
        });
        let p = params(&m);
        let noise = NoisePath::generate(200, 0.005, &mut stream(3, 0, StreamRole::LimitNoise));
        let opts = LimitOptions { record_fields: true, ..Default::default() };
        let a = solve_path(&p, &noise, &opts).unwrap();
        let b = solve_path(&p, &noise, &opts).unwrap();
        assert_eq!(a, b);
        let again = resolve_intensities(&p, &a.records, 0.005).unwrap();
        for (x, y) in again.iter().zip(&a.fields) {
            assert!(x.max_abs_diff(y) < 1e-12);
        }
        assert!(a.records.iter().any(|r| r.beta[0] > 0.0));
    }

    #[test]
    fn uniqueness_condition() {
        let mut m = quiet_model();
        m.ask.rate = RateMultiplier::SpreadRamp { slope: 1.0, cap: 10.0, varrho: 1.0 };
        m.bid.rate = m.ask.rate;
        let probes = default_probes(0.1, 1.0);
        assert!(check_uniqueness_condition(&params(&m), 0.1, &probes).pass);
        m.ask.rate = RateMultiplier::Constant { rho: 1.0, varrho: 1.0 };
        assert!(!check_uniqueness_condition(&params(&m), 0.1, &probes).pass);
        m.ask.rate = RateMultiplier::SpreadRamp { slope: 1.0, cap: 10.0, varrho: 0.0 };
        assert!(!check_uniqueness_condition(&params(&m), 0.1, &probes).pass);
    }

    #[test]
    fn noise_coarsening_preserves_sums() {
        let n = NoisePath::generate(100, 0.01, &mut stream(1, 0, StreamRole::LimitNoise));
        let c = n.coarsen(4);
        assert_eq!(c.steps(), 25);
        let total: f64 = n.increments.iter().map(|x| x[0]).sum();
        let total_c: f64 = c.increments.iter().map(|x| x[0]).sum();
        assert_relative_eq!(total, total_c, epsilon = 1e-12);
    }
}
