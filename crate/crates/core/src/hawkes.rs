//! Hawkes random measures on `[0, T] × U`.
//!
//! A Hawkes random measure has intensity
//! `λ(t, u) = μ(t, u) + Σ_{(s, v) ∈ N, s < t} φ(u, v, t - s)` with respect to
//! `dt m(du)`. Simulation is by thinning a dominating Poisson sheet: the
//! majorant at the current time is the exogenous sup plus the summed
//! kernel envelopes of the retained history, which stays valid until the
//! next accepted event because every envelope is non-increasing.

use std::collections::VecDeque;
use std::fmt;
use std::io;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{Profile, TimeKernel};
use crate::rng::{stream, StreamRole};

#[derive(Debug, Error)]
pub enum HawkesError {
    #[error("history contains an event at t = {event} which is not strictly before the evaluation time {t}")]
    HistoryNotBefore { event: f64, t: f64 },
    #[error("intensity {lambda} exceeds the majorant {majorant} at t = {t}; the declared envelope is invalid")]
    MajorantViolated { t: f64, lambda: f64, majorant: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unsupported kernel: {0}")]
    UnsupportedKernel(String),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("event stream: {0}")]
    Stream(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A point of the mark space: a label index and an optional spatial
/// coordinate (zero when the space has no spatial part).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mark {
    pub label: usize,
    pub x: f64,
}

impl Mark {
    pub fn label(label: usize) -> Self {
        Mark { label, x: 0.0 }
    }
}

/// Finite label set, optionally times `[-L, L]`, with base measure
/// `m = Σ_l weight_l δ_l ⊗ (Lebesgue on [-L, L] | δ_0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkSpace {
    labels: Vec<String>,
    weights: Vec<f64>,
    half_width: Option<f64>,
}

impl MarkSpace {
    pub fn new(labels: Vec<String>, weights: Vec<f64>, half_width: Option<f64>) -> Result<Self, HawkesError> {
        if labels.is_empty() {
            return Err(HawkesError::InvalidSpec("mark space needs at least one label".into()));
        }
        if labels.len() != weights.len() {
            return Err(HawkesError::DimensionMismatch(format!(
                "{} labels but {} base-measure weights",
                labels.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(HawkesError::InvalidSpec("base-measure weights must be finite and ≥ 0".into()));
        }
        if let Some(l) = half_width {
            if !(l > 0.0) {
                return Err(HawkesError::InvalidSpec(format!("spatial half-width L = {l} must be > 0")));
            }
        }
        Ok(MarkSpace { labels, weights, half_width })
    }

    /// Labels `"1".."d"` with unit weights.
    pub fn labels(d: usize) -> Self {
        let labels = (1..=d).map(|i| i.to_string()).collect();
        MarkSpace::new(labels, vec![1.0; d], None).expect("d ≥ 1")
    }

    pub fn singleton() -> Self {
        MarkSpace::labels(1)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_names(&self) -> &[String] {
        &self.labels
    }

    pub fn weight(&self, label: usize) -> f64 {
        self.weights[label]
    }

    pub fn half_width(&self) -> Option<f64> {
        self.half_width
    }

    /// Lebesgue length of the spatial factor (1 without one).
    pub fn spatial_length(&self) -> f64 {
        self.half_width.map_or(1.0, |l| 2.0 * l)
    }

    /// Total mass `m(U)`.
    pub fn total_measure(&self) -> f64 {
        self.weights.iter().sum::<f64>() * self.spatial_length()
    }

    /// Draws from the normalized base measure.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Mark {
        let total: f64 = self.weights.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut label = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            if target < *w {
                label = i;
                break;
            }
            target -= w;
        }
        let x = match self.half_width {
            Some(l) => rng.random_range(-l..l),
            None => 0.0,
        };
        Mark { label, x }
    }
}

/// Kernel `φ(u, v, r)`: influence of a point with mark `v` on the intensity
/// at mark `u`, lag `r`.
pub trait KernelFn: Send + Sync + fmt::Debug {
    fn eval(&self, lag: f64, target: &Mark, source: &Mark) -> f64;
    /// Non-increasing in `lag` and `≥ eval(lag, u, v)` for all marks.
    fn envelope(&self, lag: f64) -> f64;
    /// `sup_{v, r} ∫_U φ(u, v, r) m(du)`.
    fn mass_bound(&self, marks: &MarkSpace) -> f64;
    /// `Some` when `φ(u, v, r) = w(u, v) · β e^{-βr}`.
    fn exponential_form(&self) -> Option<ExponentialForm> {
        None
    }
}

/// Exogenous density `μ(t, u)`.
pub trait Exogenous: Send + Sync + fmt::Debug {
    fn eval(&self, t: f64, u: &Mark) -> f64;
    fn sup(&self) -> f64;
    /// Time-constant rate of a label, when it is one.
    fn label_constant(&self, _label: usize) -> Option<f64> {
        None
    }
}

/// `φ(u, v, r) = w(u, v) β e^{-βr}` over a label-only mark space.
#[derive(Debug, Clone, PartialEq)]
pub struct ExponentialForm {
    pub beta: f64,
    /// Row-major `w(target, source)`.
    pub weights: Vec<f64>,
}

/// `μ(t, l) = rate_l(t)` per label, uniform over the spatial factor.
#[derive(Debug, Clone)]
pub struct LabelRates {
    pub rates: Vec<TimeKernel>,
}

impl LabelRates {
    pub fn constant(rates: &[f64]) -> Self {
        LabelRates { rates: rates.iter().map(|r| TimeKernel::constant(*r)).collect() }
    }
}

impl Exogenous for LabelRates {
    fn eval(&self, t: f64, u: &Mark) -> f64 {
        self.rates[u.label].eval(t)
    }

    fn sup(&self) -> f64 {
        self.rates.iter().map(|r| r.envelope(0.0)).fold(0.0, f64::max)
    }

    fn label_constant(&self, label: usize) -> Option<f64> {
        let terms = self.rates[label].exp_poly_terms()?;
        match terms {
            [] => Some(0.0),
            [t] if t.rate == 0.0 && t.power == 0 => Some(t.coef),
            _ => None,
        }
    }
}

/// Marked exogenous density `μ(t, (l, x)) = rate · f(x)`, the same for all labels.
#[derive(Debug, Clone)]
pub struct MarkedRate {
    pub rate: f64,
    pub profile: Profile,
}

impl Exogenous for MarkedRate {
    fn eval(&self, _t: f64, u: &Mark) -> f64 {
        self.rate * self.profile.eval(u.x)
    }

    fn sup(&self) -> f64 {
        self.rate * self.profile.sup()
    }
}

/// Label-matrix kernel `φ(u, v, r) = k_{uv}(r)`.
#[derive(Debug, Clone)]
pub struct LabelKernel {
    d: usize,
    entries: Vec<TimeKernel>,
}

impl LabelKernel {
    pub fn new(matrix: Vec<Vec<TimeKernel>>) -> Result<Self, HawkesError> {
        let d = matrix.len();
        if matrix.iter().any(|row| row.len() != d) {
            return Err(HawkesError::DimensionMismatch(format!("kernel matrix must be {d}×{d}")));
        }
        let entries: Vec<TimeKernel> = matrix.into_iter().flatten().collect();
        for k in &entries {
            k.check_envelope().map_err(|e| HawkesError::InvalidSpec(e.to_string()))?;
        }
        Ok(LabelKernel { d, entries })
    }

    pub fn zero(d: usize) -> Self {
        LabelKernel { d, entries: vec![TimeKernel::zero(); d * d] }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn entry(&self, target: usize, source: usize) -> &TimeKernel {
        &self.entries[target * self.d + source]
    }
}

impl KernelFn for LabelKernel {
    fn eval(&self, lag: f64, target: &Mark, source: &Mark) -> f64 {
        self.entry(target.label, source.label).eval(lag)
    }

    fn envelope(&self, lag: f64) -> f64 {
        self.entries.iter().map(|k| k.envelope(lag)).fold(0.0, f64::max)
    }

    fn mass_bound(&self, marks: &MarkSpace) -> f64 {
        (0..self.d)
            .map(|v| (0..self.d).map(|u| marks.weight(u) * self.entry(u, v).envelope(0.0)).sum::<f64>())
            .fold(0.0, f64::max)
            * marks.spatial_length()
    }

    fn exponential_form(&self) -> Option<ExponentialForm> {
        let mut beta = None;
        let mut weights = Vec::with_capacity(self.entries.len());
        for k in &self.entries {
            match k.exp_poly_terms()? {
                [] => weights.push(0.0),
                [t] if t.power == 0 && t.rate > 0.0 => {
                    if beta.is_some_and(|b| b != t.rate) {
                        return None;
                    }
                    beta = Some(t.rate);
                    weights.push(t.coef / t.rate);
                }
                _ => return None,
            }
        }
        // An all-zero matrix is exponential with any rate.
        Some(ExponentialForm { beta: beta.unwrap_or(1.0), weights })
    }
}

/// Marked kernel `φ((l, x), v, r) = k(r) · f(x)`: every point excites all
/// labels with spatial density `f` (the separable marked case).
#[derive(Debug, Clone)]
pub struct MarkedKernel {
    pub time: TimeKernel,
    pub profile: Profile,
}

impl KernelFn for MarkedKernel {
    fn eval(&self, lag: f64, target: &Mark, _source: &Mark) -> f64 {
        self.time.eval(lag) * self.profile.eval(target.x)
    }

    fn envelope(&self, lag: f64) -> f64 {
        self.time.envelope(lag) * self.profile.sup()
    }

    fn mass_bound(&self, marks: &MarkSpace) -> f64 {
        let l = marks.half_width().unwrap_or(0.0);
        let spatial = if marks.half_width().is_some() { self.profile.integral(-l, l) } else { self.profile.sup() };
        let labels: f64 = (0..marks.len()).map(|u| marks.weight(u)).sum();
        self.time.envelope(0.0) * spatial * labels
    }
}

/// Pair `(μ, φ)` over a mark space with the declared constant of the
/// standing bound `∫μ dm + sup_v ∫φ dm ≤ C0`.
#[derive(Debug, Clone)]
pub struct HawkesSpec {
    pub marks: MarkSpace,
    pub exogenous: Arc<dyn Exogenous>,
    pub kernel: Arc<dyn KernelFn>,
    pub c0: f64,
    /// History older than the lag where `envelope < trunc_eps · C0` is dropped.
    pub trunc_eps: f64,
}

impl HawkesSpec {
    pub fn new(
        marks: MarkSpace,
        exogenous: Arc<dyn Exogenous>,
        kernel: Arc<dyn KernelFn>,
        c0: f64,
    ) -> Result<Self, HawkesError> {
        let spec = HawkesSpec { marks, exogenous, kernel, c0, trunc_eps: 1e-12 };
        let bound = spec.standing_bound();
        if !(bound <= c0 * (1.0 + 1e-12)) {
            return Err(HawkesError::InvalidSpec(format!(
                "exogenous mass plus kernel mass is {bound}, above the declared C0 = {c0}"
            )));
        }
        Ok(spec)
    }

    /// `sup μ · m(U) + sup_v ∫φ dm`.
    pub fn standing_bound(&self) -> f64 {
        self.exogenous.sup() * self.marks.total_measure() + self.kernel.mass_bound(&self.marks)
    }

    pub fn with_truncation(mut self, eps: f64) -> Self {
        self.trunc_eps = eps;
        self
    }
}

/// One point of a realized measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub mark: Mark,
    pub z: Option<f64>,
}

/// Time-ordered realization on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub horizon: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct EventRow {
    t: f64,
    label: String,
    x: f64,
    z: Option<f64>,
}

impl EventStream {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.t).collect()
    }

    pub fn count_label(&self, label: usize) -> usize {
        self.events.iter().filter(|e| e.mark.label == label).count()
    }

    /// Strictly increasing times inside `[0, horizon]`.
    pub fn validate(&self) -> Result<(), HawkesError> {
        let mut prev = f64::NEG_INFINITY;
        for e in &self.events {
            if !(e.t > prev) || e.t < 0.0 || e.t > self.horizon {
                return Err(HawkesError::Stream(format!("event time {} out of order or outside [0, {}]", e.t, self.horizon)));
            }
            prev = e.t;
        }
        Ok(())
    }

    /// CSV with header `t,label,x,z`; `z` is empty when absent.
    pub fn write_csv<W: io::Write>(&self, writer: W, labels: &[String]) -> Result<(), HawkesError> {
        let mut w = csv::Writer::from_writer(writer);
        for e in &self.events {
            w.serialize(EventRow { t: e.t, label: labels[e.mark.label].clone(), x: e.mark.x, z: e.z })?;
        }
        if self.events.is_empty() {
            w.write_record(["t", "label", "x", "z"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: io::Read>(reader: R, labels: &[String], horizon: f64) -> Result<Self, HawkesError> {
        let mut r = csv::Reader::from_reader(reader);
        let mut events = Vec::new();
        for row in r.deserialize() {
            let row: EventRow = row?;
            let label = labels
                .iter()
                .position(|l| *l == row.label)
                .ok_or_else(|| HawkesError::Stream(format!("unknown label {:?}", row.label)))?;
            events.push(Event { t: row.t, mark: Mark { label, x: row.x }, z: row.z });
        }
        let stream = EventStream { events, horizon };
        stream.validate()?;
        Ok(stream)
    }
}

/// `μ(t, u) + Σ_{s < t} φ(u, v, t - s)` over the whole history.
pub fn intensity_at(spec: &HawkesSpec, history: &EventStream, t: f64, u: &Mark) -> Result<f64, HawkesError> {
    if let Some(e) = history.events.iter().find(|e| e.t >= t) {
        return Err(HawkesError::HistoryNotBefore { event: e.t, t });
    }
    let excitation: f64 = history.events.iter().map(|e| spec.kernel.eval(t - e.t, u, &e.mark)).sum();
    Ok((spec.exogenous.eval(t, u) + excitation).max(0.0))
}

/// Thinning simulation on `[0, horizon]` from the seed's Hawkes stream.
pub fn simulate_thinning(spec: &HawkesSpec, horizon: f64, seed: u64) -> Result<EventStream, HawkesError> {
    simulate_thinning_rng(spec, horizon, &mut stream(seed, 0, StreamRole::Hawkes))
}

pub fn simulate_thinning_rng<R: Rng + ?Sized>(
    spec: &HawkesSpec,
    horizon: f64,
    rng: &mut R,
) -> Result<EventStream, HawkesError> {
    let measure = spec.marks.total_measure();
    let cutoff = spec.trunc_eps * spec.c0;
    let mu_sup = spec.exogenous.sup();
    let mut history: VecDeque<Event> = VecDeque::new();
    let mut events = Vec::new();
    let mut t = 0.0;
    loop {
        while history.front().is_some_and(|e| spec.kernel.envelope(t - e.t) < cutoff) {
            history.pop_front();
        }
        let density = mu_sup + history.iter().map(|e| spec.kernel.envelope(t - e.t)).sum::<f64>();
        let majorant = density * measure;
        if !(majorant > 0.0) {
            break;
        }
        let wait: f64 = Exp1.sample(rng);
        t += wait / majorant;
        if t > horizon {
            break;
        }
        let mark = spec.marks.sample(rng);
        let lambda = spec.exogenous.eval(t, &mark)
            + history.iter().map(|e| spec.kernel.eval(t - e.t, &mark, &e.mark)).sum::<f64>();
        if lambda > density * (1.0 + 1e-12) {
            return Err(HawkesError::MajorantViolated { t, lambda, majorant: density });
        }
        if rng.random::<f64>() * density <= lambda {
            let e = Event { t, mark, z: None };
            history.push_back(e);
            events.push(e);
        }
    }
    Ok(EventStream { events, horizon })
}

const GL5_NODES: [f64; 5] = [-0.906_179_845_938_664, -0.538_469_310_105_683, 0.0, 0.538_469_310_105_683, 0.906_179_845_938_664];
const GL5_WEIGHTS: [f64; 5] = [0.236_926_885_056_189, 0.478_628_670_499_366, 0.568_888_888_888_889, 0.478_628_670_499_366, 0.236_926_885_056_189];

/// Gauss-Legendre on `[a, b]` with `panels` equal panels.
fn gauss_legendre(a: f64, b: f64, panels: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = (b - a) / panels as f64;
    let mut acc = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        for (n, w) in GL5_NODES.iter().zip(GL5_WEIGHTS) {
            acc += w * f(mid + 0.5 * h * n);
        }
    }
    acc * 0.5 * h
}

/// `∫ f dN - ∫∫ f λ dt m(du)` on `[0, horizon]`; the compensator is
/// integrated by Gauss-Legendre between consecutive events.
pub fn compensated_integral(spec: &HawkesSpec, stream: &EventStream, f: &dyn Fn(f64, &Mark) -> f64) -> f64 {
    let jumps: f64 = stream.events.iter().map(|e| f(e.t, &e.mark)).sum();
    let cutoff = spec.trunc_eps * spec.c0;
    let marks = &spec.marks;
    let mark_integral = |t: f64, history: &[Event]| -> f64 {
        let lam_f = |m: &Mark| {
            let lam = spec.exogenous.eval(t, m) + history.iter().map(|e| spec.kernel.eval(t - e.t, m, &e.mark)).sum::<f64>();
            f(t, m) * lam.max(0.0)
        };
        (0..marks.len())
            .map(|label| {
                let w = marks.weight(label);
                match marks.half_width() {
                    Some(l) => w * gauss_legendre(-l, l, 16, |x| lam_f(&Mark { label, x })),
                    None => w * lam_f(&Mark::label(label)),
                }
            })
            .sum()
    };
    let mut compensator = 0.0;
    let mut start = 0usize;
    let mut left = 0.0;
    let mut k = 0usize;
    loop {
        let right = stream.events.get(k).map_or(stream.horizon, |e| e.t);
        while start < k && spec.kernel.envelope(left - stream.events[start].t) < cutoff {
            start += 1;
        }
        if right > left {
            let history = &stream.events[start..k];
            let panels = ((right - left).ceil() as usize).max(1);
            compensator += gauss_legendre(left, right, panels, |t| mark_integral(t, history));
        }
        if k == stream.events.len() {
            break;
        }
        left = right;
        k += 1;
    }
    jumps - compensator
}

/// Multivariate Hawkes process: labels `1..d`, unit weights,
/// `λ_i(t) = μ_i(t) + Σ_j ∫ φ_ij(t - s) N_j(ds)`.
pub fn make_multivariate(mu: Vec<TimeKernel>, phi: Vec<Vec<TimeKernel>>) -> Result<HawkesSpec, HawkesError> {
    let d = mu.len();
    if d == 0 {
        return Err(HawkesError::DimensionMismatch("d must be ≥ 1".into()));
    }
    if phi.len() != d {
        return Err(HawkesError::DimensionMismatch(format!("{d} rates but {} kernel rows", phi.len())));
    }
    let kernel = LabelKernel::new(phi)?;
    let marks = MarkSpace::labels(d);
    let exogenous = LabelRates { rates: mu };
    let c0 = exogenous.sup() * d as f64 + kernel.mass_bound(&marks);
    HawkesSpec::new(marks, Arc::new(exogenous), Arc::new(kernel), c0)
}

/// Markov simulator for `φ(u, v, r) = w(u, v) β e^{-βr}` with constant
/// exogenous rates: the excitation vector jumps by `β w(·, v)` at each
/// event of label `v` and decays by `e^{-βΔ}` in between.
#[derive(Debug, Clone)]
pub struct ExponentialMarkov {
    pub mu: Vec<f64>,
    pub beta: f64,
    pub weights: Vec<f64>,
}

pub fn make_exponential_markov(spec: &HawkesSpec) -> Result<ExponentialMarkov, HawkesError> {
    if spec.marks.half_width().is_some() {
        return Err(HawkesError::UnsupportedKernel("spatial marks have no finite Markov state".into()));
    }
    let form = spec
        .kernel
        .exponential_form()
        .ok_or_else(|| HawkesError::UnsupportedKernel("kernel is not of the form w(u,v)·β·e^(-βr)".into()))?;
    let d = spec.marks.len();
    if form.weights.len() != d * d {
        return Err(HawkesError::DimensionMismatch(format!("kernel is not {d}×{d}")));
    }
    let mu = (0..d)
        .map(|l| {
            spec.exogenous
                .label_constant(l)
                .map(|m| m * spec.marks.weight(l))
                .ok_or_else(|| HawkesError::UnsupportedKernel("exogenous rates must be time-constant".into()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    // Kernel weights act on m(du) = weight_u δ_u.
    let weights = (0..d * d).map(|i| form.weights[i] * spec.marks.weight(i / d)).collect();
    Ok(ExponentialMarkov { mu, beta: form.beta, weights })
}

impl ExponentialMarkov {
    pub fn simulate<R: Rng + ?Sized>(&self, horizon: f64, rng: &mut R) -> EventStream {
        let d = self.mu.len();
        let mut excitation = vec![0.0; d];
        let mut events = Vec::new();
        let mut t = 0.0;
        loop {
            let bound: f64 = self.mu.iter().sum::<f64>() + excitation.iter().sum::<f64>();
            if !(bound > 0.0) {
                break;
            }
            let draw: f64 = Exp1.sample(rng);
            let wait = draw / bound;
            t += wait;
            if t > horizon {
                break;
            }
            let decay = (-self.beta * wait).exp();
            excitation.iter_mut().for_each(|e| *e *= decay);
            let total: f64 = self.mu.iter().sum::<f64>() + excitation.iter().sum::<f64>();
            let mut u = rng.random::<f64>() * bound;
            if u > total {
                continue;
            }
            let mut label = d - 1;
            for (i, e) in excitation.iter().enumerate() {
                let lam = self.mu[i] + e;
                if u < lam {
                    label = i;
                    break;
                }
                u -= lam;
            }
            for (target, e) in excitation.iter_mut().enumerate() {
                *e += self.beta * self.weights[target * d + label];
            }
            events.push(Event { t, mark: Mark::label(label), z: None });
        }
        EventStream { events, horizon }
    }

    /// Current intensities after `history` (all events before `t`).
    pub fn intensities(&self, history: &EventStream, t: f64) -> Vec<f64> {
        let d = self.mu.len();
        let mut lam = self.mu.clone();
        for e in history.events.iter().filter(|e| e.t < t) {
            let k = self.beta * (-self.beta * (t - e.t)).exp();
            for (target, l) in lam.iter_mut().enumerate() {
                *l += self.weights[target * d + e.mark.label] * k;
            }
        }
        lam
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn scalar(mu: f64, phi: TimeKernel) -> HawkesSpec {
        make_multivariate(vec![TimeKernel::constant(mu)], vec![vec![phi]]).unwrap()
    }

    fn one_event(t: f64) -> EventStream {
        EventStream { events: vec![Event { t, mark: Mark::label(0), z: None }], horizon: 10.0 }
    }

    #[test]
    fn intensity_examples() {
        let u = Mark::label(0);
        let empty = EventStream::default();
        assert_eq!(intensity_at(&scalar(2.0, TimeKernel::zero()), &empty, 1.0, &u).unwrap(), 2.0);
        let h = one_event(1.0);
        assert_eq!(intensity_at(&scalar(3.0, TimeKernel::zero()), &h, 2.0, &u).unwrap(), 3.0);
        let spec = scalar(1.0, TimeKernel::exponential(0.5, 1.0));
        assert_relative_eq!(intensity_at(&spec, &h, 2.0, &u).unwrap(), 1.0 + 0.5 * (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn history_must_precede_evaluation_time() {
        let spec = scalar(1.0, TimeKernel::exponential(0.5, 1.0));
        let err = intensity_at(&spec, &one_event(2.0), 2.0, &Mark::label(0)).unwrap_err();
        assert!(matches!(err, HawkesError::HistoryNotBefore { .. }));
    }

    #[test]
    fn same_seed_same_stream() {
        let spec = scalar(1.0, TimeKernel::exponential(0.5, 1.0));
        let a = simulate_thinning(&spec, 50.0, 9).unwrap();
        let b = simulate_thinning(&spec, 50.0, 9).unwrap();
        assert!(!a.is_empty());
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ca, spec.marks.label_names()).unwrap();
        b.write_csv(&mut cb, spec.marks.label_names()).unwrap();
        assert_eq!(ca, cb);
    }

    #[derive(Debug)]
    struct LyingEnvelope;

    impl KernelFn for LyingEnvelope {
        fn eval(&self, _lag: f64, _t: &Mark, _s: &Mark) -> f64 {
            1.0
        }
        fn envelope(&self, _lag: f64) -> f64 {
            0.1
        }
        fn mass_bound(&self, _m: &MarkSpace) -> f64 {
            0.1
        }
    }

    #[test]
    fn invalid_envelope_aborts() {
        let spec = HawkesSpec::new(
            MarkSpace::singleton(),
            Arc::new(LabelRates::constant(&[5.0])),
            Arc::new(LyingEnvelope),
            10.0,
        )
        .unwrap();
        let err = simulate_thinning(&spec, 10.0, 1).unwrap_err();
        assert!(matches!(err, HawkesError::MajorantViolated { .. }));
    }

    #[test]
    fn standing_bound_checked() {
        let res = HawkesSpec::new(
            MarkSpace::singleton(),
            Arc::new(LabelRates::constant(&[1.0])),
            Arc::new(LabelKernel::new(vec![vec![TimeKernel::exponential(0.5, 1.0)]]).unwrap()),
            1.2,
        );
        assert!(matches!(res, Err(HawkesError::InvalidSpec(_))));
    }

    #[test]
    fn multivariate_dimension_mismatch() {
        let res = make_multivariate(vec![TimeKernel::constant(1.0); 2], vec![vec![TimeKernel::zero(); 2]]);
        assert!(matches!(res, Err(HawkesError::DimensionMismatch(_))));
        let res = make_multivariate(vec![TimeKernel::constant(1.0); 2], vec![vec![TimeKernel::zero()]; 2]);
        assert!(matches!(res, Err(HawkesError::DimensionMismatch(_))));
    }

    #[test]
    fn markov_requires_exponential_kernel() {
        let gamma = scalar(1.0, TimeKernel::gamma(0.5, 1.0));
        assert!(matches!(make_exponential_markov(&gamma), Err(HawkesError::UnsupportedKernel(_))));
        let mixed = make_multivariate(
            vec![TimeKernel::constant(1.0); 2],
            vec![
                vec![TimeKernel::exponential(0.2, 1.0), TimeKernel::exponential(0.2, 2.0)],
                vec![TimeKernel::zero(), TimeKernel::zero()],
            ],
        )
        .unwrap();
        assert!(make_exponential_markov(&mixed).is_err());
        let ok = scalar(1.0, TimeKernel::exponential(0.5, 2.0));
        let m = make_exponential_markov(&ok).unwrap();
        assert_eq!(m.beta, 2.0);
        assert_relative_eq!(m.weights[0], 0.25);
    }

    #[test]
    fn markov_intensity_matches_generic() {
        let spec = make_multivariate(
            vec![TimeKernel::constant(1.0), TimeKernel::constant(0.5)],
            vec![
                vec![TimeKernel::exponential(0.6, 1.5), TimeKernel::exponential(0.3, 1.5)],
                vec![TimeKernel::exponential(0.2, 1.5), TimeKernel::zero()],
            ],
        )
        .unwrap();
        let m = make_exponential_markov(&spec).unwrap();
        let history = m.simulate(20.0, &mut stream(4, 0, StreamRole::Hawkes));
        let t = 20.0;
        let lam = m.intensities(&history, t);
        for (i, l) in lam.iter().enumerate() {
            assert_relative_eq!(*l, intensity_at(&spec, &history, t, &Mark::label(i)).unwrap(), max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_kernel_markov_is_poisson_rate() {
        let spec = scalar(3.0, TimeKernel::zero());
        let m = make_exponential_markov(&spec).unwrap();
        let n = m.simulate(1000.0, &mut stream(5, 0, StreamRole::Hawkes)).len() as f64;
        assert!((n - 3000.0).abs() < 4.0 * 3000f64.sqrt());
    }

    #[test]
    fn csv_round_trip() {
        let spec = scalar(1.0, TimeKernel::exponential(0.5, 1.0));
        let s = simulate_thinning(&spec, 20.0, 2).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf, spec.marks.label_names()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,label,x,z\n"));
        let back = EventStream::read_csv(buf.as_slice(), spec.marks.label_names(), 20.0).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn compensated_integral_of_zero_is_zero() {
        let spec = scalar(1.0, TimeKernel::exponential(0.5, 1.0));
        let s = simulate_thinning(&spec, 20.0, 3).unwrap();
        assert_eq!(compensated_integral(&spec, &s, &|_, _| 0.0), 0.0);
    }

    #[test]
    fn compensator_matches_closed_form() {
        // For f ≡ 1 and φ = c e^{-κr}: ∫λ = μT + Σ c(1 - e^{-κ(T-s)})/κ.
        let (c, k) = (0.5, 1.3);
        let spec = scalar(1.0, TimeKernel::exponential(c, k));
        let s = simulate_thinning(&spec, 30.0, 8).unwrap();
        let exact = 30.0 + s.events.iter().map(|e| c * (1.0 - (-k * (30.0 - e.t)).exp()) / k).sum::<f64>();
        let got = s.len() as f64 - compensated_integral(&spec, &s, &|_, _| 1.0);
        assert_relative_eq!(got, exact, max_relative = 1e-9);
    }

    #[test]
    fn marked_space_sampling_stays_in_bounds() {
        let marks = MarkSpace::new(vec!["a".into(), "b".into()], vec![1.0, 3.0], Some(2.0)).unwrap();
        let mut rng = stream(6, 0, StreamRole::Hawkes);
        let draws: Vec<Mark> = (0..4000).map(|_| marks.sample(&mut rng)).collect();
        assert!(draws.iter().all(|m| m.x.abs() <= 2.0));
        let frac_b = draws.iter().filter(|m| m.label == 1).count() as f64 / 4000.0;
        assert!((frac_b - 0.75).abs() < 0.03);
        assert_eq!(marks.total_measure(), 16.0);
    }

    proptest! {
        #[test]
        fn thinning_output_is_a_valid_stream(seed in 0u64..1000, c in 0.0f64..0.9, k in 0.5f64..4.0) {
            let spec = scalar(1.0, TimeKernel::exponential(c * k, k));
            let s = simulate_thinning(&spec, 10.0, seed).unwrap();
            prop_assert!(s.validate().is_ok());
        }

        #[test]
        fn envelope_dominates_label_kernel(lag in 0.0f64..20.0, c in 0.0f64..2.0, k in 0.1f64..3.0) {
            let kern = LabelKernel::new(vec![
                vec![TimeKernel::gamma(c, k), TimeKernel::exponential(c, k)],
                vec![TimeKernel::constant(0.1), TimeKernel::zero()],
            ]).unwrap();
            for u in 0..2 {
                for v in 0..2 {
                    prop_assert!(kern.eval(lag, &Mark::label(u), &Mark::label(v)) <= kern.envelope(lag) + 1e-15);
                }
            }
            prop_assert!(kern.envelope(lag + 0.1) <= kern.envelope(lag) + 1e-15);
        }

        #[test]
        fn intensity_is_nonnegative(times in proptest::collection::vec(0.0f64..5.0, 0..20), t in 5.0f64..6.0) {
            let mut times = times;
            times.sort_by(f64::total_cmp);
            times.dedup();
            let history = EventStream {
                events: times.iter().map(|&t| Event { t, mark: Mark::label(0), z: None }).collect(),
                horizon: 6.0,
            };
            let spec = scalar(0.3, TimeKernel::exponential(0.5, 1.0));
            prop_assert!(intensity_at(&spec, &history, t, &Mark::label(0)).unwrap() >= 0.3);
        }
    }
}
