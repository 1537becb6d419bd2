//! Kernel and coefficient families shared by the simulators and solvers.
//!
//! Time kernels are finite sums of `c · t^p · e^{-κt}` terms (constant,
//! exponential and Gamma shapes and their combinations) or tabulated
//! functions with a declared exponential envelope. Spatial factors are
//! [`Profile`]s. State-dependent coefficients (`ρ`, `ϱ`, `μ̂`, `β̂`, ...)
//! are small closed families so that configurations stay serializable.

use std::f64::consts::{E, PI};

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erf;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("custom kernel declared without an envelope bound")]
    MissingEnvelope,
    #[error("tabulated kernel needs matching, non-empty, increasing `times` and `values`")]
    BadTable,
    #[error("kernel term t·e^(-κt) with κ = {0} has no finite non-increasing envelope")]
    UnboundedEnvelope(f64),
    #[error("invalid size measure: {0}")]
    SizeMeasure(String),
    #[error("invalid profile: {0}")]
    Profile(String),
}

/// One term `coef · t^power · e^{-rate·t}` with `power ∈ {0, 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpPolyTerm {
    pub coef: f64,
    pub rate: f64,
    pub power: u8,
}

impl ExpPolyTerm {
    pub fn eval(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let decay = (-self.rate * t).exp();
        match self.power {
            0 => self.coef * decay,
            _ => self.coef * t * decay,
        }
    }

    /// `∫_0^T` of the term.
    pub fn integral(&self, horizon: f64) -> f64 {
        let (k, t) = (self.rate, horizon.max(0.0));
        let unit = match (self.power, k == 0.0) {
            (0, true) => t,
            (0, false) => (1.0 - (-k * t).exp()) / k,
            (_, true) => 0.5 * t * t,
            (_, false) => (1.0 - (-k * t).exp() * (1.0 + k * t)) / (k * k),
        };
        self.coef * unit
    }

    /// Non-increasing function dominating `|term|` on `[t, ∞)`.
    fn envelope(&self, t: f64) -> f64 {
        let t = t.max(0.0);
        let c = self.coef.abs();
        match self.power {
            0 => c * (-self.rate * t).exp(),
            _ if self.rate <= 0.0 => f64::INFINITY,
            _ => {
                let peak = 1.0 / self.rate;
                if t <= peak {
                    c * peak * (-1.0f64).exp()
                } else {
                    c * t * (-self.rate * t).exp()
                }
            }
        }
    }
}

/// Bound `|k(t)| ≤ c · e^{-κt}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpBound {
    pub c: f64,
    pub kappa: f64,
}

/// A nonnegative-lag kernel `t ↦ k(t)`; `k(t) = 0` for `t < 0`.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeKernel {
    ExpPoly(Vec<ExpPolyTerm>),
    Tabulated {
        times: Vec<f64>,
        values: Vec<f64>,
        envelope: ExpBound,
    },
}

impl Default for TimeKernel {
    fn default() -> Self {
        TimeKernel::zero()
    }
}

impl TimeKernel {
    pub fn zero() -> Self {
        TimeKernel::ExpPoly(Vec::new())
    }

    pub fn constant(c: f64) -> Self {
        Self::term(c, 0.0, 0)
    }

    /// `c · e^{-κt}`
    pub fn exponential(c: f64, kappa: f64) -> Self {
        Self::term(c, kappa, 0)
    }

    /// `c · t · e^{-κt}`
    pub fn gamma(c: f64, kappa: f64) -> Self {
        Self::term(c, kappa, 1)
    }

    fn term(coef: f64, rate: f64, power: u8) -> Self {
        if coef == 0.0 {
            return Self::zero();
        }
        TimeKernel::ExpPoly(vec![ExpPolyTerm { coef, rate, power }])
    }

    pub fn tabulated(times: Vec<f64>, values: Vec<f64>, envelope: ExpBound) -> Result<Self, KernelError> {
        let increasing = times.windows(2).all(|w| w[1] > w[0]);
        if times.is_empty() || times.len() != values.len() || !increasing || times[0] < 0.0 {
            return Err(KernelError::BadTable);
        }
        Ok(TimeKernel::Tabulated { times, values, envelope })
    }

    pub fn exp_poly_terms(&self) -> Option<&[ExpPolyTerm]> {
        match self {
            TimeKernel::ExpPoly(terms) => Some(terms),
            TimeKernel::Tabulated { .. } => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            TimeKernel::ExpPoly(terms) => terms.iter().all(|t| t.coef == 0.0),
            TimeKernel::Tabulated { values, .. } => values.iter().all(|v| *v == 0.0),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        match self {
            TimeKernel::ExpPoly(terms) => terms.iter().map(|term| term.eval(t)).sum(),
            TimeKernel::Tabulated { times, values, .. } => interpolate(times, values, t),
        }
    }

    /// Non-increasing dominating function of `|k|` on `[t, ∞)`.
    pub fn envelope(&self, t: f64) -> f64 {
        match self {
            TimeKernel::ExpPoly(terms) => terms.iter().map(|term| term.envelope(t)).sum(),
            TimeKernel::Tabulated { envelope, .. } => envelope.c * (-envelope.kappa * t.max(0.0)).exp(),
        }
    }

    /// `∫_0^T k(t) dt`.
    pub fn integral(&self, horizon: f64) -> f64 {
        match self {
            TimeKernel::ExpPoly(terms) => terms.iter().map(|term| term.integral(horizon)).sum(),
            TimeKernel::Tabulated { times, values, .. } => {
                let n = 2048;
                let h = horizon / n as f64;
                (0..=n)
                    .map(|i| {
                        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                        w * interpolate(times, values, i as f64 * h)
                    })
                    .sum::<f64>()
                    * h
            }
        }
    }

    /// Errors when no finite envelope exists (`t·e^{0}` terms).
    pub fn check_envelope(&self) -> Result<(), KernelError> {
        if let TimeKernel::ExpPoly(terms) = self {
            if let Some(t) = terms.iter().find(|t| t.power > 0 && t.rate <= 0.0 && t.coef != 0.0) {
                return Err(KernelError::UnboundedEnvelope(t.rate));
            }
        }
        Ok(())
    }

    /// Pointwise `a·self + b·other`; tabulated kernels are resampled onto the
    /// union of both tables.
    pub fn combine(&self, a: f64, other: &TimeKernel, b: f64) -> TimeKernel {
        match (self, other) {
            (TimeKernel::ExpPoly(x), TimeKernel::ExpPoly(y)) => {
                let mut terms: Vec<ExpPolyTerm> = Vec::with_capacity(x.len() + y.len());
                let scaled = x
                    .iter()
                    .map(|t| (*t, a))
                    .chain(y.iter().map(|t| (*t, b)))
                    .map(|(t, s)| ExpPolyTerm { coef: t.coef * s, ..t });
                for t in scaled {
                    match terms.iter_mut().find(|u| u.rate == t.rate && u.power == t.power) {
                        Some(u) => u.coef += t.coef,
                        None => terms.push(t),
                    }
                }
                terms.retain(|t| t.coef != 0.0);
                TimeKernel::ExpPoly(terms)
            }
            _ => {
                let mut grid: Vec<f64> = self.table_times().into_iter().chain(other.table_times()).collect();
                grid.sort_by(f64::total_cmp);
                grid.dedup();
                let values = grid.iter().map(|&t| a * self.eval(t) + b * other.eval(t)).collect();
                let envelope = ExpBound {
                    c: a.abs() * self.envelope(0.0) + b.abs() * other.envelope(0.0),
                    kappa: self.envelope_rate().min(other.envelope_rate()),
                };
                TimeKernel::Tabulated { times: grid, values, envelope }
            }
        }
    }

    fn table_times(&self) -> Vec<f64> {
        match self {
            TimeKernel::Tabulated { times, .. } => times.clone(),
            TimeKernel::ExpPoly(_) => Vec::new(),
        }
    }

    fn envelope_rate(&self) -> f64 {
        match self {
            TimeKernel::Tabulated { envelope, .. } => envelope.kappa,
            TimeKernel::ExpPoly(terms) => terms.iter().map(|t| t.rate).fold(f64::INFINITY, f64::min).max(0.0),
        }
    }
}

fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
    let last = times.len() - 1;
    if t <= times[0] {
        return values[0];
    }
    if t >= times[last] {
        return values[last];
    }
    let hi = times.partition_point(|&s| s <= t);
    let lo = hi - 1;
    let w = (t - times[lo]) / (times[hi] - times[lo]);
    values[lo] * (1.0 - w) + values[hi] * w
}

/// Serializable declaration of a [`TimeKernel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeKernelDecl {
    Zero,
    Constant { c: f64 },
    Exponential { c: f64, kappa: f64 },
    Gamma { c: f64, kappa: f64 },
    Sum { terms: Vec<TimeKernelDecl> },
    Custom {
        times: Vec<f64>,
        values: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        envelope: Option<ExpBound>,
    },
}

impl TimeKernelDecl {
    pub fn build(&self) -> Result<TimeKernel, KernelError> {
        let kernel = match self {
            TimeKernelDecl::Zero => TimeKernel::zero(),
            TimeKernelDecl::Constant { c } => TimeKernel::constant(*c),
            TimeKernelDecl::Exponential { c, kappa } => TimeKernel::exponential(*c, *kappa),
            TimeKernelDecl::Gamma { c, kappa } => TimeKernel::gamma(*c, *kappa),
            TimeKernelDecl::Sum { terms } => {
                let mut acc = TimeKernel::zero();
                for t in terms {
                    acc = acc.combine(1.0, &t.build()?, 1.0);
                }
                acc
            }
            TimeKernelDecl::Custom { times, values, envelope } => {
                let envelope = envelope.ok_or(KernelError::MissingEnvelope)?;
                TimeKernel::tabulated(times.clone(), values.clone(), envelope)?
            }
        };
        kernel.check_envelope()?;
        Ok(kernel)
    }
}

/// Spatial factor of a separable kernel or exogenous density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    Zero,
    /// `amplitude · exp(-((x - center)/width)²)`
    Gaussian { amplitude: f64, center: f64, width: f64 },
    /// `level` on `[center - half_width, center + half_width]`, else 0.
    Flat { level: f64, center: f64, half_width: f64 },
}

impl Profile {
    pub fn gaussian(amplitude: f64, center: f64, width: f64) -> Self {
        Profile::Gaussian { amplitude, center, width }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        match *self {
            Profile::Gaussian { width, amplitude, .. } if width <= 0.0 || amplitude < 0.0 => {
                Err(KernelError::Profile("gaussian needs width > 0 and amplitude ≥ 0".into()))
            }
            Profile::Flat { half_width, level, .. } if half_width <= 0.0 || level < 0.0 => {
                Err(KernelError::Profile("flat needs half_width > 0 and level ≥ 0".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            Profile::Zero => true,
            Profile::Gaussian { amplitude, .. } => amplitude == 0.0,
            Profile::Flat { level, .. } => level == 0.0,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Profile::Zero => 0.0,
            Profile::Gaussian { amplitude, center, width } => {
                let u = (x - center) / width;
                amplitude * (-u * u).exp()
            }
            Profile::Flat { level, center, half_width } => {
                if (x - center).abs() <= half_width {
                    level
                } else {
                    0.0
                }
            }
        }
    }

    pub fn sup(&self) -> f64 {
        match *self {
            Profile::Zero => 0.0,
            Profile::Gaussian { amplitude, .. } => amplitude,
            Profile::Flat { level, .. } => level,
        }
    }

    /// Exact `∫_a^b` of the profile.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        match *self {
            Profile::Zero => 0.0,
            Profile::Gaussian { amplitude, center, width } => {
                0.5 * amplitude * width * PI.sqrt() * (erf((b - center) / width) - erf((a - center) / width))
            }
            Profile::Flat { level, center, half_width } => {
                let lo = a.max(center - half_width);
                let hi = b.min(center + half_width);
                level * (hi - lo).max(0.0)
            }
        }
    }

    /// Draws from the normalized profile restricted to `[a, b]`. Falls back
    /// to uniform when the restricted mass is numerically negligible.
    pub fn sample_in<R: Rng + ?Sized>(&self, a: f64, b: f64, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        match *self {
            Profile::Gaussian { center, width, .. } => {
                let normal = Normal::new(center, width / 2f64.sqrt()).expect("positive width");
                let (fa, fb) = (normal.cdf(a), normal.cdf(b));
                if fb - fa > 1e-12 {
                    normal.inverse_cdf(fa + u * (fb - fa)).clamp(a, b)
                } else {
                    a + u * (b - a)
                }
            }
            Profile::Flat { center, half_width, .. } => {
                let lo = a.max(center - half_width);
                let hi = b.min(center + half_width);
                if hi > lo {
                    lo + u * (hi - lo)
                } else {
                    a + u * (b - a)
                }
            }
            Profile::Zero => a + u * (b - a),
        }
    }
}

/// Side of the book.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Ask,
    Bid,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Ask, Side::Bid];

    pub fn index(self) -> usize {
        match self {
            Side::Ask => 0,
            Side::Bid => 1,
        }
    }
}

/// State-dependent scalar coefficient `(t, S) ↦ value` (exogenous densities,
/// amplitudes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateScalar {
    Constant { value: f64 },
    /// `scale · p_I²`, the price of the side the coefficient belongs to.
    PriceSquared { scale: f64 },
}

impl Default for StateScalar {
    fn default() -> Self {
        StateScalar::Constant { value: 0.0 }
    }
}

impl StateScalar {
    pub fn constant(value: f64) -> Self {
        StateScalar::Constant { value }
    }

    pub fn eval(&self, side: Side, p_a: f64, p_b: f64) -> f64 {
        match *self {
            StateScalar::Constant { value } => value,
            StateScalar::PriceSquared { scale } => {
                let p = if side == Side::Ask { p_a } else { p_b };
                scale * p * p
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(*self, StateScalar::Constant { value } if value == 0.0)
            || matches!(*self, StateScalar::PriceSquared { scale } if scale == 0.0)
    }

    /// Uniform bound over all states, when one exists.
    pub fn sup(&self) -> Option<f64> {
        match *self {
            StateScalar::Constant { value } => Some(value.abs()),
            StateScalar::PriceSquared { scale: 0.0 } => Some(0.0),
            StateScalar::PriceSquared { .. } => None,
        }
    }
}

/// State-rate multipliers: the limit pair `(ρ_I, ϱ_I)` and the pre-limit
/// pair `(ρ_IM, ρ_IL)` at tick size `δ_x`.
///
/// The pre-limit rates satisfy `ρ_IM - ρ_IL = δ_x · ϱ_I` and vanish for
/// spread placements whenever the spread is below one tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum RateMultiplier {
    /// `ρ = rho`, `ϱ = varrho`.
    Constant { rho: f64, varrho: f64 },
    /// `ρ = min(slope · (p_a - p_b)⁺, cap)`, `ϱ = varrho`.
    SpreadRamp { slope: f64, cap: f64, varrho: f64 },
    /// `ρ = scale · p_I²`, `ϱ = 0`. Unbounded; limit dynamics only.
    PriceSquared { scale: f64 },
}

impl Default for RateMultiplier {
    fn default() -> Self {
        RateMultiplier::Constant { rho: 0.0, varrho: 0.0 }
    }
}

impl RateMultiplier {
    pub fn limit_rho(&self, side: Side, p_a: f64, p_b: f64) -> f64 {
        match *self {
            RateMultiplier::Constant { rho, .. } => rho,
            RateMultiplier::SpreadRamp { slope, cap, .. } => (slope * (p_a - p_b).max(0.0)).min(cap),
            RateMultiplier::PriceSquared { scale } => {
                let p = if side == Side::Ask { p_a } else { p_b };
                scale * p * p
            }
        }
    }

    pub fn limit_varrho(&self, _side: Side, _p_a: f64, _p_b: f64) -> f64 {
        match *self {
            RateMultiplier::Constant { varrho, .. } | RateMultiplier::SpreadRamp { varrho, .. } => varrho,
            RateMultiplier::PriceSquared { .. } => 0.0,
        }
    }

    /// `(ρ_IM, ρ_IL)` of the pre-limit model; `None` for limit-only families.
    pub fn micro_rates(&self, spread: f64, delta_x: f64) -> Option<(f64, f64)> {
        // Spread is an integer number of ticks; guard against rounding.
        let below_one_tick = spread < delta_x * (1.0 - 1e-9);
        match *self {
            RateMultiplier::Constant { rho, varrho } => {
                let spread_rate = if below_one_tick { 0.0 } else { rho };
                Some((rho + delta_x * varrho, spread_rate))
            }
            RateMultiplier::SpreadRamp { slope, cap, varrho } => {
                let spread_rate = (slope * (spread - delta_x).max(0.0)).min(cap);
                let spread_rate = if below_one_tick { 0.0 } else { spread_rate };
                Some((spread_rate + delta_x * varrho, spread_rate))
            }
            RateMultiplier::PriceSquared { .. } => None,
        }
    }

    /// Upper bound on the limit `ρ` and `ϱ`, when finite.
    pub fn bound(&self) -> Option<f64> {
        match *self {
            RateMultiplier::Constant { rho, varrho } => Some(rho.abs() + varrho.abs()),
            RateMultiplier::SpreadRamp { cap, varrho, .. } => Some(cap.abs() + varrho.abs()),
            RateMultiplier::PriceSquared { .. } => None,
        }
    }
}

/// Law `ν_IK(dz)` of the size mark `z ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SizeMeasure {
    Dirac { z: f64 },
    /// `z ~ Exp(rate)`; `rate > 4` keeps the fourth moment of `e^z - 1` finite.
    Exponential { rate: f64 },
    /// The relative size `e^z - 1` is log-normal with log-mean `mu` and
    /// log-sd `sigma`, i.e. `z = ln(1 + e^{mu + sigma·N})`.
    Lognormal { mu: f64, sigma: f64 },
}

impl SizeMeasure {
    pub fn validate(&self) -> Result<(), KernelError> {
        match *self {
            SizeMeasure::Dirac { z } if z < 0.0 || !z.is_finite() => {
                Err(KernelError::SizeMeasure(format!("dirac atom z = {z} must be finite and ≥ 0")))
            }
            SizeMeasure::Exponential { rate } if rate <= 4.0 => Err(KernelError::SizeMeasure(format!(
                "exponential rate {rate} ≤ 4 makes ν(|e^z-1|^4) infinite"
            ))),
            SizeMeasure::Lognormal { sigma, .. } if sigma < 0.0 => {
                Err(KernelError::SizeMeasure("lognormal sigma must be ≥ 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// `α_L = ν(e^z - 1)`.
    pub fn alpha_l(&self) -> f64 {
        match *self {
            SizeMeasure::Dirac { z } => z.exp() - 1.0,
            SizeMeasure::Exponential { rate } => 1.0 / (rate - 1.0),
            SizeMeasure::Lognormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
        }
    }

    /// `α_C = ν(e^{-z} - 1)`.
    pub fn alpha_c(&self) -> f64 {
        match *self {
            SizeMeasure::Dirac { z } => (-z).exp() - 1.0,
            SizeMeasure::Exponential { rate } => -1.0 / (rate + 1.0),
            SizeMeasure::Lognormal { mu, sigma } => {
                normal_expectation(|n| 1.0 / (1.0 + (mu + sigma * n).exp())) - 1.0
            }
        }
    }

    /// `ν(|e^z - 1|⁴)`.
    pub fn fourth_moment(&self) -> f64 {
        match *self {
            SizeMeasure::Dirac { z } => (z.exp() - 1.0).powi(4),
            SizeMeasure::Exponential { rate } => {
                if rate <= 4.0 {
                    return f64::INFINITY;
                }
                // E[e^{kz}] = rate / (rate - k)
                let m = |k: f64| rate / (rate - k);
                m(4.0) - 4.0 * m(3.0) + 6.0 * m(2.0) - 4.0 * m(1.0) + 1.0
            }
            SizeMeasure::Lognormal { mu, sigma } => (4.0 * mu + 8.0 * sigma * sigma).exp(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            SizeMeasure::Dirac { z } => z,
            SizeMeasure::Exponential { rate } => Exp::new(rate).expect("validated rate").sample(rng),
            SizeMeasure::Lognormal { mu, sigma } => {
                let n: f64 = StandardNormal.sample(rng);
                (mu + sigma * n).exp().ln_1p()
            }
        }
    }
}

/// `E[g(N)]` for standard normal `N`, composite Simpson on `[-10, 10]`.
fn normal_expectation(g: impl Fn(f64) -> f64) -> f64 {
    let n = 4000;
    let h = 20.0 / n as f64;
    let density = |x: f64| (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    let mut acc = 0.0;
    for i in 0..=n {
        let x = -10.0 + i as f64 * h;
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * g(x) * density(x);
    }
    acc * h / 3.0
}

/// `1/e`, the peak of `t·e^{-t}`.
pub const INV_E: f64 = 1.0 / E;
