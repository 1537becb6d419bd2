//! Linear Volterra-Fredholm solver for the limit intensities.
//!
//! The unknown `D(t) = (μ_a, μ_b, λ_aL, λ_aC, λ_bL, λ_bC)` solves
//! `D(t) = D̂(t) + ∫_0^t ∫ T(x, y, S(s), t, s) D(s, y) l(dy) ds` where `l` is
//! Lebesgue measure on the spatial grid plus one unit atom per scalar slot.
//! The block operator is a finite sum of separable terms
//! `target_profile(x) · k(t - s) · source_functional(D(s))`, where the
//! source functional is `ρ_i(S(s)) μ_i(s)` for scalar sources and
//! `∫ g(y) λ_ik(s, y) dy` for spatial ones. The drift functionals `β_I`
//! are extra output slots driven by the same sources.
//!
//! Time integrals use the trapezoid rule. Exponential-polynomial kernels are
//! convolved recursively in O(1) per step; other kernels by direct sums.
//! The diagonal trapezoid weight makes each step implicit in `D(t_m)`; the
//! implicit part is linear in the term functionals and is solved by
//! iterating on those scalars.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{ExpPolyTerm, Profile, Side, TimeKernel, TimeKernelDecl};
use crate::model::PassiveType;

#[derive(Debug, Error, PartialEq)]
pub enum VolterraError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("non-finite intensity at step {step} (t = {t})")]
    NonFinite { step: usize, t: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("market and spread intensities of side {side:?} differ: {m} vs {l}")]
    Identification { side: Side, m: f64, l: f64 },
}

/// Uniform grid on `[-L, L]` with an odd number of nodes (one at 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    half_width: f64,
    n: usize,
}

impl SpatialGrid {
    pub fn new(half_width: f64, n: usize) -> Result<Self, VolterraError> {
        if n < 3 || n.is_multiple_of(2) {
            return Err(VolterraError::Grid(format!("node count {n} must be odd and ≥ 3")));
        }
        if !(half_width > 0.0) || !half_width.is_finite() {
            return Err(VolterraError::Grid(format!("half-width {half_width} must be finite and > 0")));
        }
        Ok(SpatialGrid { half_width, n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.n - 1) as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        -self.half_width + j as f64 * self.spacing()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.node(j)).collect()
    }

    /// Trapezoid weights.
    pub fn weights(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.n).map(|j| if j == 0 || j == self.n - 1 { 0.5 * h } else { h }).collect()
    }

    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..self.n).map(|j| f(self.node(j))).collect()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        let h = self.spacing();
        let inner: f64 = values.iter().sum();
        h * (inner - 0.5 * (values[0] + values[self.n - 1]))
    }

    /// Linear interpolation, zero outside `[-L, L]`.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let u = (x + self.half_width) / self.spacing();
        if !(u >= 0.0) || u > (self.n - 1) as f64 {
            return 0.0;
        }
        let j = (u.floor() as usize).min(self.n - 2);
        let w = u - j as f64;
        values[j] * (1.0 - w) + values[j + 1] * w
    }
}

/// Limit intensity vector at one time, plus the drift functionals `β_I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityField {
    pub mu: [f64; 2],
    pub lam: [Vec<f64>; 4],
    pub beta: [f64; 2],
}

impl IntensityField {
    pub fn zeros(n: usize) -> Self {
        IntensityField { mu: [0.0; 2], lam: std::array::from_fn(|_| vec![0.0; n]), beta: [0.0; 2] }
    }

    /// `Σ|μ_I|^p + Σ ‖λ_IK‖_{L^q}^p`.
    pub fn norm_pow(&self, grid: &SpatialGrid, p: i32, q: i32) -> f64 {
        let scalars: f64 = self.mu.iter().map(|m| m.abs().powi(p)).sum();
        let spatial: f64 = self
            .lam
            .iter()
            .map(|l| {
                let lq: Vec<f64> = l.iter().map(|v| v.abs().powi(q)).collect();
                grid.integrate(&lq).powf(p as f64 / q as f64)
            })
            .sum();
        scalars + spatial
    }

    /// `‖D‖_{D_1^1}`.
    pub fn norm_d11(&self, grid: &SpatialGrid) -> f64 {
        self.norm_pow(grid, 1, 1)
    }

    /// `‖D‖²_{D_2^2}`.
    pub fn norm_d22(&self, grid: &SpatialGrid) -> f64 {
        self.norm_pow(grid, 2, 2)
    }

    pub fn axpy(&mut self, a: f64, other: &IntensityField) {
        for s in 0..2 {
            self.mu[s] += a * other.mu[s];
            self.beta[s] += a * other.beta[s];
        }
        for (l, o) in self.lam.iter_mut().zip(&other.lam) {
            l.iter_mut().zip(o).for_each(|(x, y)| *x += a * y);
        }
    }

    pub fn max_abs_diff(&self, other: &IntensityField) -> f64 {
        let mut d = 0.0f64;
        for s in 0..2 {
            d = d.max((self.mu[s] - other.mu[s]).abs()).max((self.beta[s] - other.beta[s]).abs());
        }
        for (l, o) in self.lam.iter().zip(&other.lam) {
            for (x, y) in l.iter().zip(o) {
                d = d.max((x - y).abs());
            }
        }
        d
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs_diff(&IntensityField::zeros(self.lam[0].len()))
    }

    fn is_finite(&self) -> bool {
        self.mu.iter().chain(&self.beta).chain(self.lam.iter().flatten()).all(|v| v.is_finite())
    }
}

/// Pre-limit layout: one scalar per active type, four spatial components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrelimitField {
    pub mu: [f64; 4],
    pub lam: [Vec<f64>; 4],
}

impl PrelimitField {
    /// Collapses `μ_IM`, `μ_IL` to `μ_I`, requiring agreement within
    /// `tol · (1 + |μ_I|)`.
    pub fn into_limit(self, tol: f64) -> Result<IntensityField, VolterraError> {
        let mut mu = [0.0; 2];
        for (s, side) in Side::BOTH.into_iter().enumerate() {
            let (m, l) = (self.mu[2 * s], self.mu[2 * s + 1]);
            let avg = 0.5 * (m + l);
            if (m - l).abs() > tol * (1.0 + avg.abs()) {
                return Err(VolterraError::Identification { side, m, l });
            }
            mu[s] = avg;
        }
        Ok(IntensityField { mu, lam: self.lam, beta: [0.0; 2] })
    }
}

/// Where a term reads its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceSlot {
    Mu(Side),
    Lam(PassiveType),
}

/// Where a term writes its output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetSlot {
    Mu(Side),
    Lam(PassiveType),
    Beta(Side),
}

/// One separable block `f(x) · k(t - s) · g(y)`; the profiles are present
/// exactly for spatial targets and sources.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTerm {
    pub target: TargetSlot,
    pub target_profile: Option<Profile>,
    pub source: SourceSlot,
    pub source_profile: Option<Profile>,
    pub kernel: TimeKernel,
}

impl BlockTerm {
    /// Missing profiles of spatial slots default to the zero profile.
    pub fn new(
        target: TargetSlot,
        target_profile: Option<Profile>,
        source: SourceSlot,
        source_profile: Option<Profile>,
        kernel: TimeKernel,
    ) -> Self {
        let target_profile = match target {
            TargetSlot::Lam(_) => Some(target_profile.unwrap_or(Profile::Zero)),
            _ => None,
        };
        let source_profile = match source {
            SourceSlot::Lam(_) => Some(source_profile.unwrap_or(Profile::Zero)),
            SourceSlot::Mu(_) => None,
        };
        BlockTerm { target, target_profile, source, source_profile, kernel }
    }
}

/// The block operator `T` as a list of separable terms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlockKernel {
    terms: Vec<BlockTerm>,
}

impl BlockKernel {
    pub fn new(terms: Vec<BlockTerm>) -> Self {
        BlockKernel { terms }
    }

    pub fn zero() -> Self {
        BlockKernel { terms: Vec::new() }
    }

    pub fn terms(&self) -> &[BlockTerm] {
        &self.terms
    }

    pub fn push(&mut self, term: BlockTerm) {
        self.terms.push(term);
    }

    /// Operator entry `T(x, y, S, t, s)` from `source` at `y` to `target` at
    /// `x`, with `ρ_i(S)` already applied to scalar sources.
    pub fn entry(&self, target: TargetSlot, x: f64, source: SourceSlot, y: f64, rho: [f64; 2], lag: f64) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.target == target && t.source == source)
            .map(|t| {
                let f = t.target_profile.map_or(1.0, |p| p.eval(x));
                let g = match t.source {
                    SourceSlot::Mu(side) => rho[side.index()],
                    SourceSlot::Lam(_) => t.source_profile.map_or(0.0, |p| p.eval(y)),
                };
                f * g * t.kernel.eval(lag)
            })
            .sum()
    }

    /// `sup_lag` of the summed absolute row masses over the grid, with
    /// scalar sources weighted by `rho_bound`.
    pub fn row_mass_bound(&self, grid: &SpatialGrid, rho_bound: f64) -> f64 {
        let l = grid.half_width();
        self.terms
            .iter()
            .map(|t| {
                let f = t.target_profile.map_or(1.0, |p| p.sup());
                let g = match t.source {
                    SourceSlot::Mu(_) => rho_bound,
                    SourceSlot::Lam(_) => t.source_profile.map_or(0.0, |p| p.integral(-l, l)),
                };
                f * g * t.kernel.envelope(0.0)
            })
            .sum()
    }
}

/// Time-convolution route.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ConvolutionRoute {
    /// Recursive for exponential-polynomial kernels, direct otherwise.
    #[default]
    Auto,
    Direct,
}

/// Running trapezoid convolution `Σ_l w_l k(t_m - t_l) X_l`.
#[derive(Debug, Clone)]
enum Conv {
    Recursive { parts: Vec<(ExpPolyTerm, f64, f64)>, decay: Vec<f64>, x0: f64 },
    Direct { lag_values: Vec<f64>, xs: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Convolution {
    kernel: TimeKernel,
    dt: f64,
    m: usize,
    conv: Conv,
}

impl Convolution {
    fn new(kernel: TimeKernel, dt: f64, route: ConvolutionRoute) -> Self {
        let conv = match (route, kernel.exp_poly_terms()) {
            (ConvolutionRoute::Auto, Some(terms)) => Conv::Recursive {
                parts: terms.iter().map(|t| (*t, 0.0, 0.0)).collect(),
                decay: terms.iter().map(|t| (-t.rate * dt).exp()).collect(),
                x0: 0.0,
            },
            _ => Conv::Direct { lag_values: Vec::new(), xs: Vec::new() },
        };
        Convolution { kernel, dt, m: 0, conv }
    }

    /// Weight of the not-yet-known `X_m` in the full trapezoid sum.
    fn diagonal(&self) -> f64 {
        if self.m == 0 {
            0.0
        } else {
            0.5 * self.dt * self.kernel.eval(0.0)
        }
    }

    /// Trapezoid sum over `l < m` (with the `l = 0` half weight).
    fn explicit(&mut self) -> f64 {
        let (m, dt) = (self.m, self.dt);
        if m == 0 {
            return 0.0;
        }
        match &mut self.conv {
            Conv::Recursive { parts, decay, x0 } => {
                let mut s = 0.0;
                for ((term, a, b), d) in parts.iter().zip(decay.iter()) {
                    let v = if term.power == 0 { d * *a } else { d * (*b + dt * *a) };
                    s += term.coef * v;
                }
                dt * s - 0.5 * dt * self.kernel.eval(m as f64 * dt) * *x0
            }
            Conv::Direct { lag_values, xs } => {
                while lag_values.len() <= m {
                    lag_values.push(self.kernel.eval(lag_values.len() as f64 * dt));
                }
                let mut s = 0.5 * lag_values[m] * xs[0];
                for l in 1..m {
                    s += lag_values[m - l] * xs[l];
                }
                dt * s
            }
        }
    }

    fn commit(&mut self, x: f64) {
        let dt = self.dt;
        match &mut self.conv {
            Conv::Recursive { parts, decay, x0 } => {
                if self.m == 0 {
                    *x0 = x;
                }
                for ((_, a, b), d) in parts.iter_mut().zip(decay.iter()) {
                    if self.m > 0 {
                        *b = d * (*b + dt * *a);
                        *a *= d;
                    }
                    *a += x;
                }
            }
            Conv::Direct { xs, .. } => xs.push(x),
        }
        self.m += 1;
    }
}

#[derive(Debug, Clone)]
struct TermState {
    target: TargetSlot,
    source: SourceSlot,
    /// Target profile at the nodes.
    target_vec: Option<Vec<f64>>,
    /// Trapezoid weight times source profile at the nodes.
    source_weights: Option<Vec<f64>>,
    conv: Convolution,
    last_x: f64,
}

impl TermState {
    fn functional(&self, d: &IntensityField, rho: [f64; 2]) -> f64 {
        match self.source {
            SourceSlot::Mu(side) => rho[side.index()] * d.mu[side.index()],
            SourceSlot::Lam(p) => {
                let w = self.source_weights.as_ref().expect("spatial source");
                w.iter().zip(&d.lam[p.index()]).map(|(a, b)| a * b).sum()
            }
        }
    }

    fn deposit(&self, d: &mut IntensityField, value: f64) {
        match self.target {
            TargetSlot::Mu(side) => d.mu[side.index()] += value,
            TargetSlot::Beta(side) => d.beta[side.index()] += value,
            TargetSlot::Lam(p) => {
                let f = self.target_vec.as_ref().expect("spatial target");
                d.lam[p.index()].iter_mut().zip(f).for_each(|(v, fx)| *v += value * fx);
            }
        }
    }
}

/// Counts of negative quadrature artifacts set to zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClampStats {
    pub count: usize,
    pub max_magnitude: f64,
}

/// Incremental forward solver: one call to [`VolterraStepper::step`] per
/// grid time.
#[derive(Debug, Clone)]
pub struct VolterraStepper {
    grid: SpatialGrid,
    dt: f64,
    terms: Vec<TermState>,
    /// `couplings[b][a]`: functional of term `b`'s source applied to term
    /// `a`'s target profile (spatial-to-spatial pairs only).
    couplings: Vec<Vec<f64>>,
    step: usize,
    pub clamps: ClampStats,
}

impl VolterraStepper {
    pub fn new(kernel: &BlockKernel, grid: SpatialGrid, dt: f64, route: ConvolutionRoute) -> Self {
        let weights = grid.weights();
        let terms: Vec<TermState> = kernel
            .terms()
            .iter()
            .map(|t| TermState {
                target: t.target,
                source: t.source,
                target_vec: t.target_profile.map(|p| grid.sample(|x| p.eval(x))),
                source_weights: t
                    .source_profile
                    .map(|p| weights.iter().zip(grid.nodes()).map(|(w, y)| w * p.eval(y)).collect()),
                conv: Convolution::new(t.kernel.clone(), dt, route),
                last_x: 0.0,
            })
            .collect();
        let couplings = terms
            .iter()
            .map(|b| {
                terms
                    .iter()
                    .map(|a| match (b.source, a.target) {
                        (SourceSlot::Lam(p), TargetSlot::Lam(q)) if p == q => {
                            let w = b.source_weights.as_ref().expect("spatial source");
                            let f = a.target_vec.as_ref().expect("spatial target");
                            w.iter().zip(f).map(|(x, y)| x * y).sum()
                        }
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect();
        VolterraStepper { grid, dt, terms, couplings, step: 0, clamps: ClampStats::default() }
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// `G[b][a]`: sensitivity of term `b`'s source functional to term `a`'s
    /// output.
    fn coupling(&self, b: usize, a: usize, rho: [f64; 2]) -> f64 {
        match (self.terms[b].source, self.terms[a].target) {
            (SourceSlot::Mu(s), TargetSlot::Mu(t)) if s == t => rho[s.index()],
            _ => self.couplings[b][a],
        }
    }

    /// Solves for `D(t_m)` given `D̂(t_m, S(t_m))` and `ρ(S(t_m))`.
    pub fn step(&mut self, dhat: &IntensityField, rho: [f64; 2]) -> Result<IntensityField, VolterraError> {
        let n = self.terms.len();
        let explicit: Vec<f64> = self.terms.iter_mut().map(|t| t.conv.explicit()).collect();
        let diag: Vec<f64> = self.terms.iter().map(|t| t.conv.diagonal()).collect();
        let base: Vec<f64> = self.terms.iter().map(|t| t.functional(dhat, rho)).collect();
        let mut xs: Vec<f64> = if self.step == 0 { vec![0.0; n] } else { self.terms.iter().map(|t| t.last_x).collect() };
        let implicit = diag.iter().any(|d| *d != 0.0);
        if n > 0 {
            let g: Vec<Vec<f64>> = (0..n).map(|b| (0..n).map(|a| self.coupling(b, a, rho)).collect()).collect();
            for _ in 0..500 {
                let mut change = 0.0f64;
                let mut scale = 1.0f64;
                let next: Vec<f64> = (0..n)
                    .map(|b| base[b] + (0..n).map(|a| g[b][a] * (explicit[a] + diag[a] * xs[a])).sum::<f64>())
                    .collect();
                for (x, y) in xs.iter().zip(&next) {
                    change = change.max((x - y).abs());
                    scale = scale.max(y.abs());
                }
                xs = next;
                if !implicit || change <= 1e-15 * scale {
                    break;
                }
            }
        }
        let mut d = dhat.clone();
        for (a, t) in self.terms.iter().enumerate() {
            t.deposit(&mut d, explicit[a] + diag[a] * xs[a]);
        }
        if !d.is_finite() {
            return Err(VolterraError::NonFinite { step: self.step, t: self.step as f64 * self.dt });
        }
        if self.clamp(&mut d) {
            xs = self.terms.iter().map(|t| t.functional(&d, rho)).collect();
        }
        for (t, x) in self.terms.iter_mut().zip(&xs) {
            t.conv.commit(*x);
            t.last_x = *x;
        }
        self.step += 1;
        Ok(d)
    }

    fn clamp(&mut self, d: &mut IntensityField) -> bool {
        let mut any = false;
        for v in d.mu.iter_mut().chain(d.lam.iter_mut().flatten()) {
            if *v < 0.0 {
                self.clamps.count += 1;
                self.clamps.max_magnitude = self.clamps.max_magnitude.max(-*v);
                log::debug!("clamped negative intensity {v} to 0");
                *v = 0.0;
                any = true;
            }
        }
        any
    }
}

/// Forward solve over the grid times `t_m = m·dt`, `m < dhat.len()`.
pub fn solve_forward(
    kernel: &BlockKernel,
    grid: SpatialGrid,
    dt: f64,
    dhat: &[IntensityField],
    rho: &[[f64; 2]],
    route: ConvolutionRoute,
) -> Result<(Vec<IntensityField>, ClampStats), VolterraError> {
    if dhat.len() != rho.len() {
        return Err(VolterraError::Dimension(format!("{} exogenous fields but {} rate samples", dhat.len(), rho.len())));
    }
    let mut stepper = VolterraStepper::new(kernel, grid, dt, route);
    let path = dhat.iter().zip(rho).map(|(d, r)| stepper.step(d, *r)).collect::<Result<Vec<_>, _>>()?;
    Ok((path, stepper.clamps))
}

/// `(𝒦D)(t_m) = ∫_0^{t_m} ∫ T D l(dy) ds` by the same quadrature.
pub fn apply_operator(kernel: &BlockKernel, grid: SpatialGrid, dt: f64, path: &[IntensityField], rho: &[[f64; 2]]) -> Vec<IntensityField> {
    let mut stepper = VolterraStepper::new(kernel, grid, dt, ConvolutionRoute::Auto);
    path.iter()
        .zip(rho)
        .map(|(d, r)| {
            let mut out = IntensityField::zeros(grid.len());
            for t in stepper.terms.iter_mut() {
                let e = t.conv.explicit();
                let x = t.functional(d, *r);
                let value = e + t.conv.diagonal() * x;
                t.conv.commit(x);
                t.deposit(&mut out, value);
            }
            out
        })
        .collect()
}

/// Partial Neumann sum `D̂ + Σ_{n=1}^{depth} 𝒦ⁿ D̂`: the resolvent
/// `Σ T_n` applied to `D̂` on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeumannResult {
    pub field: Vec<IntensityField>,
    /// `sup_m ‖𝒦ⁿ D̂(t_m)‖_{D_1^1}` for `n = 1..=depth`.
    pub term_norms: Vec<f64>,
    /// Successive ratios of the term norms.
    pub ratios: Vec<f64>,
    pub converged: bool,
}

pub fn neumann_resolvent(
    kernel: &BlockKernel,
    grid: SpatialGrid,
    dt: f64,
    dhat: &[IntensityField],
    rho: &[[f64; 2]],
    depth: usize,
) -> NeumannResult {
    let depth = depth.max(1);
    let mut field = dhat.to_vec();
    let mut term = dhat.to_vec();
    let mut term_norms = Vec::with_capacity(depth);
    let sup_norm = |p: &[IntensityField]| {
        p.iter().map(|d| d.norm_d11(&grid) + d.beta[0].abs() + d.beta[1].abs()).fold(0.0, f64::max)
    };
    for _ in 0..depth {
        term = apply_operator(kernel, grid, dt, &term, rho);
        for (f, t) in field.iter_mut().zip(&term) {
            f.axpy(1.0, t);
        }
        term_norms.push(sup_norm(&term));
    }
    let ratios: Vec<f64> = term_norms.windows(2).map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 }).collect();
    let last = *term_norms.last().expect("depth ≥ 1");
    let converged = last == 0.0 || last <= 1e-9 * sup_norm(&field).max(f64::MIN_POSITIVE);
    NeumannResult { field, term_norms, ratios, converged }
}

/// Grid solution of the renewal equation `K = φ + K * φ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarResolvent {
    pub dt: f64,
    pub values: Vec<f64>,
    /// Max residual of the discrete (trapezoid) equation.
    pub residual: f64,
    /// Max residual with the convolution re-evaluated by Simpson's rule.
    pub simpson_residual: f64,
}

impl ScalarResolvent {
    pub fn at(&self, m: usize) -> f64 {
        self.values[m]
    }

    /// `(K * f)(t_m)` by the trapezoid rule, for samples `f` on the grid.
    pub fn convolve(&self, f: &[f64]) -> Vec<f64> {
        trapezoid_convolution(&self.values, f, self.dt)
    }
}

fn trapezoid_convolution(a: &[f64], b: &[f64], dt: f64) -> Vec<f64> {
    (0..a.len().min(b.len()))
        .map(|m| {
            if m == 0 {
                return 0.0;
            }
            let mut s = 0.5 * (a[0] * b[m] + a[m] * b[0]);
            for l in 1..m {
                s += a[l] * b[m - l];
            }
            dt * s
        })
        .collect()
}

fn simpson_convolution(a: &[f64], b: &[f64], dt: f64, m: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let f = |l: usize| a[l] * b[m - l];
    if m.is_multiple_of(2) {
        let mut s = f(0) + f(m);
        for l in 1..m {
            s += if l % 2 == 1 { 4.0 } else { 2.0 } * f(l);
        }
        s * dt / 3.0
    } else if m == 1 {
        0.5 * dt * (f(0) + f(1))
    } else {
        // Simpson on [0, m-3], three-eighths on the last three panels.
        let k = m - 3;
        let mut s = f(0) + f(k);
        for l in 1..k {
            s += if l % 2 == 1 { 4.0 } else { 2.0 } * f(l);
        }
        s * dt / 3.0 + 3.0 * dt / 8.0 * (f(k) + 3.0 * f(k + 1) + 3.0 * f(k + 2) + f(k + 3))
    }
}

/// Solves `K = φ + K * φ` on `[0, horizon]` with step `dt`.
pub fn scalar_resolvent_k(phi: &TimeKernel, horizon: f64, dt: f64) -> ScalarResolvent {
    let steps = (horizon / dt).round() as usize;
    let p: Vec<f64> = (0..=steps).map(|m| phi.eval(m as f64 * dt)).collect();
    let mut k = vec![0.0; steps + 1];
    k[0] = p[0];
    for m in 1..=steps {
        let mut s = 0.5 * k[0] * p[m];
        for l in 1..m {
            s += k[l] * p[m - l];
        }
        k[m] = (p[m] + dt * s) / (1.0 - 0.5 * dt * p[0]);
    }
    let conv = trapezoid_convolution(&k, &p, dt);
    let residual = (0..=steps).map(|m| (k[m] - p[m] - conv[m]).abs()).fold(0.0, f64::max);
    let simpson_residual =
        (0..=steps).map(|m| (k[m] - p[m] - simpson_convolution(&k, &p, dt, m)).abs()).fold(0.0, f64::max);
    ScalarResolvent { dt, values: k, residual, simpson_residual }
}

/// Report comparing the grid resolvent of a constant, exponential or Gamma
/// kernel with closed forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolventReport {
    pub family: String,
    pub horizon: f64,
    pub dt: f64,
    pub residual: f64,
    pub simpson_residual: f64,
    /// Max error against the exact resolvent of `φ`.
    pub err_vs_exact: Option<f64>,
    /// Max difference between the grid resolvent and the stated form
    /// (`2c·e^{2ct}`, `2c·e^{-(κ-2c)t}`, `√(2c)·e^{-κt}·sin(√(2c)t)`).
    pub diff_vs_stated: Option<f64>,
    /// Max difference between the stated form and the grid resolvent of `2φ`.
    pub stated_vs_doubled_kernel: Option<f64>,
    pub residual_ok: bool,
}

type ClosedForm = Box<dyn Fn(f64) -> f64>;

/// Exact resolvent of `φ` and the stated form, for the three families.
fn closed_forms(decl: &TimeKernelDecl) -> Option<(String, ClosedForm, ClosedForm)> {
    match *decl {
        TimeKernelDecl::Constant { c } => Some((
            format!("constant(c={c})"),
            Box::new(move |t: f64| c * (c * t).exp()),
            Box::new(move |t: f64| 2.0 * c * (2.0 * c * t).exp()),
        )),
        TimeKernelDecl::Exponential { c, kappa } => Some((
            format!("exponential(c={c}, kappa={kappa})"),
            Box::new(move |t: f64| c * (-(kappa - c) * t).exp()),
            Box::new(move |t: f64| 2.0 * c * (-(kappa - 2.0 * c) * t).exp()),
        )),
        TimeKernelDecl::Gamma { c, kappa } => Some((
            format!("gamma(c={c}, kappa={kappa})"),
            Box::new(move |t: f64| c.sqrt() * (-kappa * t).exp() * (c.sqrt() * t).sinh()),
            Box::new(move |t: f64| (2.0 * c).sqrt() * (-kappa * t).exp() * ((2.0 * c).sqrt() * t).sin()),
        )),
        _ => None,
    }
}

pub fn resolvent_report(decl: &TimeKernelDecl, horizon: f64, dt: f64, tolerance: f64) -> Result<ResolventReport, crate::kernels::KernelError> {
    let phi = decl.build()?;
    let k = scalar_resolvent_k(&phi, horizon, dt);
    let times: Vec<f64> = (0..k.values.len()).map(|m| m as f64 * dt).collect();
    let max_diff = |f: &dyn Fn(f64) -> f64, v: &[f64]| times.iter().zip(v).map(|(t, x)| (f(*t) - x).abs()).fold(0.0, f64::max);
    let forms = closed_forms(decl);
    let (family, err_vs_exact, diff_vs_stated, stated_vs_doubled_kernel) = match &forms {
        Some((name, exact, stated)) => {
            let doubled = scalar_resolvent_k(&phi.combine(2.0, &TimeKernel::zero(), 0.0), horizon, dt);
            (
                name.clone(),
                Some(max_diff(exact.as_ref(), &k.values)),
                Some(max_diff(stated.as_ref(), &k.values)),
                Some(max_diff(stated.as_ref(), &doubled.values)),
            )
        }
        None => (format!("{decl:?}"), None, None, None),
    };
    Ok(ResolventReport {
        family,
        horizon,
        dt,
        residual: k.residual,
        simpson_residual: k.simpson_residual,
        err_vs_exact,
        diff_vs_stated,
        stated_vs_doubled_kernel,
        residual_ok: k.residual <= tolerance,
    })
}
