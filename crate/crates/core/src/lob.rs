//! The microscopic limit order book.
//!
//! Prices live on the tick grid `x_j = j·δx` and are stored as integer
//! ticks. Volume densities are step functions on the same grid, stored in
//! absolute price coordinates. Active events move one best price by one
//! tick; passive events change one tick of one side's density. Event
//! intensities are Hawkes-type sums of exponential-polynomial kernels over
//! the event history, kept in O(1)-per-event accumulators, and the book is
//! simulated by thinning with a majorant that is exact until the next
//! event.

use std::f64::consts::E;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hawkes::{Event, EventStream, Mark};
use crate::kernels::{ExpPolyTerm, Profile, RateMultiplier, Side, SizeMeasure, StateScalar, TimeKernel};
use crate::model::{ActiveType, EventType, ExoPassive, InitialBook, PassiveType, VolumeInit};
use crate::volterra::PrelimitField;

#[derive(Debug, Error, PartialEq)]
pub enum LobError {
    #[error("invalid micro parameters: {0}")]
    Invalid(String),
    #[error("price {price} is not a multiple of the tick {delta_x}")]
    OffGrid { price: f64, delta_x: f64 },
    #[error("book crossed at t = {t}: ask {p_a} < bid {p_b}")]
    Crossing { t: f64, p_a: f64, p_b: f64 },
    #[error("negative volume {value} at tick {tick} (t = {t})")]
    NegativeVolume { t: f64, tick: i64, value: f64 },
    #[error("rate {rate} exceeds the majorant {bound} at t = {t}")]
    MajorantViolated { t: f64, rate: f64, bound: f64 },
}

/// Price grid `x_j = j·δx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickGrid {
    pub delta_x: f64,
}

impl TickGrid {
    /// Index `j` with `x ∈ [x_j, x_{j+1})`.
    pub fn tick_of(&self, x: f64) -> i64 {
        (x / self.delta_x).floor() as i64
    }

    pub fn price(&self, j: i64) -> f64 {
        j as f64 * self.delta_x
    }

    /// Exact tick index of an on-grid price.
    pub fn exact_tick(&self, price: f64) -> Result<i64, LobError> {
        let u = price / self.delta_x;
        let j = u.round();
        if (u - j).abs() > 1e-6 {
            return Err(LobError::OffGrid { price, delta_x: self.delta_x });
        }
        Ok(j as i64)
    }
}

/// Step-function density on absolute ticks; ticks never touched keep the
/// initial density sampled at their midpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeProfile {
    delta_x: f64,
    init: VolumeInit,
    first: i64,
    values: Vec<f64>,
}

impl VolumeProfile {
    pub fn new(delta_x: f64, init: VolumeInit, lo: i64, hi: i64) -> Self {
        let mut p = VolumeProfile { delta_x, init, first: lo, values: Vec::new() };
        p.values = (lo..=hi).map(|j| p.initial(j)).collect();
        p
    }

    fn initial(&self, j: i64) -> f64 {
        self.init.eval((j as f64 + 0.5) * self.delta_x)
    }

    pub fn first_tick(&self) -> i64 {
        self.first
    }

    pub fn last_tick(&self) -> i64 {
        self.first + self.values.len() as i64 - 1
    }

    pub fn get(&self, j: i64) -> f64 {
        if j < self.first || j > self.last_tick() {
            self.initial(j)
        } else {
            self.values[(j - self.first) as usize]
        }
    }

    /// Extends the stored range to include `[lo, hi]`.
    pub fn ensure(&mut self, lo: i64, hi: i64) {
        if lo < self.first {
            let mut head: Vec<f64> = (lo..self.first).map(|j| self.initial(j)).collect();
            head.append(&mut self.values);
            self.values = head;
            self.first = lo;
        }
        let last = self.last_tick();
        if hi > last {
            let tail: Vec<f64> = (last + 1..=hi).map(|j| self.initial(j)).collect();
            self.values.extend(tail);
        }
    }

    pub fn get_mut(&mut self, j: i64) -> &mut f64 {
        self.ensure(j, j);
        &mut self.values[(j - self.first) as usize]
    }

    /// `(tick, density)` over the stored range.
    pub fn ticks(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.values.iter().enumerate().map(|(i, v)| (self.first + i as i64, *v))
    }

    /// `⟨V, f⟩ = ∫ V f` over the ticks covering `[lo, hi]`, exact on each
    /// tick.
    pub fn pair(&self, f: &Profile, lo: f64, hi: f64) -> f64 {
        let (a, b) = ((lo / self.delta_x).floor() as i64, (hi / self.delta_x).ceil() as i64);
        (a..b)
            .map(|j| {
                let x = j as f64 * self.delta_x;
                self.get(j) * f.integral(x, x + self.delta_x)
            })
            .sum()
    }

    /// `‖V‖_{L^p}^p` over the stored range.
    pub fn norm_pow(&self, p: i32) -> f64 {
        self.values.iter().map(|v| v.abs().powi(p)).sum::<f64>() * self.delta_x
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `S^(n) = (P_a, P_b, V_a, V_b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BookState {
    pub grid: TickGrid,
    pub ask_tick: i64,
    pub bid_tick: i64,
    pub ask: VolumeProfile,
    pub bid: VolumeProfile,
}

impl BookState {
    /// Prices snapped to the grid; profiles stored over the truncation
    /// window around each best price.
    pub fn new(initial: &InitialBook, delta_x: f64, half_width: f64) -> Result<Self, LobError> {
        let grid = TickGrid { delta_x };
        let (ask_tick, bid_tick) = (grid.exact_tick(initial.p_a)?, grid.exact_tick(initial.p_b)?);
        if ask_tick < bid_tick {
            return Err(LobError::Crossing { t: 0.0, p_a: initial.p_a, p_b: initial.p_b });
        }
        let w = (half_width / delta_x).ceil() as i64 + 1;
        Ok(BookState {
            grid,
            ask_tick,
            bid_tick,
            ask: VolumeProfile::new(delta_x, initial.ask, ask_tick - w, ask_tick + w),
            bid: VolumeProfile::new(delta_x, initial.bid, bid_tick - w - 1, bid_tick + w),
        })
    }

    pub fn p_a(&self) -> f64 {
        self.grid.price(self.ask_tick)
    }

    pub fn p_b(&self) -> f64 {
        self.grid.price(self.bid_tick)
    }

    pub fn spread(&self) -> f64 {
        self.grid.price(self.ask_tick - self.bid_tick)
    }

    pub fn spread_ticks(&self) -> i64 {
        self.ask_tick - self.bid_tick
    }

    pub fn profile(&self, side: Side) -> &VolumeProfile {
        match side {
            Side::Ask => &self.ask,
            Side::Bid => &self.bid,
        }
    }

    /// One-tick price move.
    pub fn apply_active_mut(&mut self, a: ActiveType, t: f64) -> Result<(), LobError> {
        match a.side() {
            Side::Ask => self.ask_tick += a.tick_step(),
            Side::Bid => self.bid_tick += a.tick_step(),
        }
        if self.ask_tick < self.bid_tick {
            return Err(LobError::Crossing { t, p_a: self.p_a(), p_b: self.p_b() });
        }
        Ok(())
    }

    /// Tick hit by a passive event at distance `y` from the best price.
    pub fn passive_tick(&self, side: Side, y: f64) -> i64 {
        let k = (y / self.grid.delta_x).floor() as i64;
        match side {
            Side::Ask => self.ask_tick + k,
            Side::Bid => self.bid_tick - k - 1,
        }
    }

    /// Placement adds `(δv/δx)(e^z - 1)`; cancellation multiplies by
    /// `1 + (δv/δx)(e^{-z} - 1)`.
    pub fn apply_passive_mut(&mut self, p: PassiveType, y: f64, z: f64, delta_v: f64, t: f64) -> Result<(), LobError> {
        let tick = self.passive_tick(p.side(), y);
        let ratio = delta_v / self.grid.delta_x;
        let profile = match p.side() {
            Side::Ask => &mut self.ask,
            Side::Bid => &mut self.bid,
        };
        let v = profile.get_mut(tick);
        if p.is_placement() {
            *v += ratio * z.exp_m1();
        } else {
            *v *= 1.0 + ratio * (-z).exp_m1();
        }
        if *v < 0.0 {
            return Err(LobError::NegativeVolume { t, tick, value: *v });
        }
        Ok(())
    }

    pub fn apply_mut(&mut self, e: &BookEvent, delta_v: f64) -> Result<(), LobError> {
        match e.kind {
            EventType::Active(a) => self.apply_active_mut(a, e.t),
            EventType::Passive(p) => self.apply_passive_mut(p, e.y, e.z, delta_v, e.t),
        }
    }
}

pub fn apply_active(state: &BookState, a: ActiveType) -> Result<BookState, LobError> {
    let mut s = state.clone();
    s.apply_active_mut(a, f64::NAN)?;
    Ok(s)
}

pub fn apply_passive(state: &BookState, p: PassiveType, y: f64, z: f64, delta_v: f64) -> Result<BookState, LobError> {
    let mut s = state.clone();
    s.apply_passive_mut(p, y, z, delta_v, f64::NAN)?;
    Ok(s)
}

/// One accepted event. `y` (distance) and `z` (size) are zero for active
/// events.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BookEvent {
    pub t: f64,
    pub kind: EventType,
    pub y: f64,
    pub z: f64,
}

/// Converts to the generic stream with labels [`EventType::labels`].
pub fn to_event_stream(events: &[BookEvent], horizon: f64) -> EventStream {
    EventStream {
        events: events
            .iter()
            .map(|e| Event {
                t: e.t,
                mark: Mark { label: e.kind.index(), x: e.y },
                z: matches!(e.kind, EventType::Passive(_)).then_some(e.z),
            })
            .collect(),
        horizon,
    }
}

pub fn from_event_stream(stream: &EventStream) -> Vec<BookEvent> {
    stream
        .events
        .iter()
        .map(|e| BookEvent { t: e.t, kind: EventType::from_index(e.mark.label), y: e.mark.x, z: e.z.unwrap_or(0.0) })
        .collect()
}

/// `base + offset·diff`: the level-`n` exogenous density of a market
/// (`offset = δx/2`) or spread (`offset = -δx/2`) type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitScalar {
    pub base: StateScalar,
    pub diff: StateScalar,
    pub offset: f64,
}

impl SplitScalar {
    pub fn eval(&self, side: Side, p_a: f64, p_b: f64) -> f64 {
        self.base.eval(side, p_a, p_b) + self.offset * self.diff.eval(side, p_a, p_b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MicroSource {
    Active(ActiveType),
    /// Passive events weighted by `g(y)` at their distance `y`.
    Passive(PassiveType, Profile),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MicroTarget {
    Active(ActiveType),
    /// Passive intensity with spatial factor `f(x)`.
    Passive(PassiveType, Profile),
}

/// `weight · f(x) · k(t - s) · g(y)` summed over source events.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroTerm {
    pub target: MicroTarget,
    pub source: MicroSource,
    pub weight: f64,
    pub kernel: TimeKernel,
}

impl MicroTerm {
    fn source_weight(&self, e: &BookEvent) -> Option<f64> {
        match (self.source, e.kind) {
            (MicroSource::Active(a), EventType::Active(b)) if a == b => Some(1.0),
            (MicroSource::Passive(p, g), EventType::Passive(q)) if p == q => Some(g.eval(e.y)),
            _ => None,
        }
    }
}

/// Parameters of the `n`-th microscopic model.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroParams {
    pub delta_x: f64,
    pub delta_v: f64,
    pub half_width: f64,
    /// Rate multipliers per side; `(ρ_IM, ρ_IL)` from [`RateMultiplier::micro_rates`].
    pub rates: [RateMultiplier; 2],
    /// `μ̂_IJ`, indexed by [`ActiveType::index`].
    pub mu_hat: [SplitScalar; 4],
    /// `λ̂_IK`, indexed by [`PassiveType::index`].
    pub lambda_hat: [ExoPassive; 4],
    pub sizes: [SizeMeasure; 4],
    pub terms: Vec<MicroTerm>,
    pub initial: InitialBook,
}

impl MicroParams {
    pub fn validate(&self) -> Result<(), LobError> {
        let bad = |m: String| Err(LobError::Invalid(m));
        if !(self.delta_x > 0.0) || !(self.delta_v > 0.0) || !(self.half_width > 0.0) {
            return bad("delta_x, delta_v and half_width must be > 0".into());
        }
        if self.delta_v > self.delta_x {
            return bad(format!(
                "delta_v = {} exceeds delta_x = {}, breaking volume positivity",
                self.delta_v, self.delta_x
            ));
        }
        for r in &self.rates {
            if r.micro_rates(self.delta_x, self.delta_x).is_none() {
                return bad(format!("rate family {r:?} is limit-only"));
            }
        }
        for s in &self.sizes {
            s.validate().map_err(|e| LobError::Invalid(e.to_string()))?;
        }
        for t in &self.terms {
            if t.kernel.exp_poly_terms().is_none() {
                return bad("tabulated kernels are not supported by the micro simulator".into());
            }
            t.kernel.check_envelope().map_err(|e| LobError::Invalid(e.to_string()))?;
            if t.weight < 0.0 {
                return bad("negative term weight".into());
            }
            for i in 0..=400 {
                let lag = i as f64 * 0.05;
                if t.kernel.eval(lag) < -1e-12 {
                    return bad(format!("kernel {:?} is negative at lag {lag}", t.kernel));
                }
            }
        }
        let (pa, pb) = (self.initial.p_a, self.initial.p_b);
        for a in ActiveType::ALL {
            if self.mu_hat[a.index()].eval(a.side(), pa, pb) < 0.0 {
                return bad(format!("exogenous density of {} is negative", a.label()));
            }
        }
        BookState::new(&self.initial, self.delta_x, self.half_width)?;
        Ok(())
    }

    pub fn initial_state(&self) -> Result<BookState, LobError> {
        BookState::new(&self.initial, self.delta_x, self.half_width)
    }

    /// `(ρ_IM, ρ_IL)` in state `s`.
    fn rho(&self, side: Side, spread: f64) -> (f64, f64) {
        self.rates[side.index()].micro_rates(spread, self.delta_x).unwrap_or((0.0, 0.0))
    }

    /// `ρ_IJ(S)`.
    pub fn active_rho(&self, a: ActiveType, state: &BookState) -> f64 {
        let (m, l) = self.rho(a.side(), state.spread());
        if a.is_market() {
            m
        } else {
            l
        }
    }

    fn exo_active(&self, a: ActiveType, state: &BookState) -> f64 {
        self.mu_hat[a.index()].eval(a.side(), state.p_a(), state.p_b()).max(0.0) / (self.delta_x * self.delta_x)
    }

    fn exo_passive_mass(&self, p: PassiveType, state: &BookState) -> f64 {
        let exo = &self.lambda_hat[p.index()];
        let l = self.half_width;
        exo.scale.eval(p.side(), state.p_a(), state.p_b()).max(0.0) * exo.profile.integral(-l, l) / self.delta_v
    }
}

/// `μ_IJ^(n)(t)` by direct summation over `history` (events before `t`).
pub fn active_intensity(params: &MicroParams, history: &[BookEvent], state: &BookState, t: f64, a: ActiveType) -> f64 {
    let excitation: f64 = params
        .terms
        .iter()
        .filter(|term| term.target == MicroTarget::Active(a))
        .map(|term| {
            term.weight
                * history
                    .iter()
                    .filter(|e| e.t < t)
                    .filter_map(|e| term.source_weight(e).map(|w| w * term.kernel.eval(t - e.t)))
                    .sum::<f64>()
        })
        .sum();
    params.exo_active(a, state) + excitation
}

/// `ρ_IJ(S(t-)) · μ_IJ^(n)(t)`.
pub fn active_rate(params: &MicroParams, history: &[BookEvent], state: &BookState, t: f64, a: ActiveType) -> f64 {
    params.active_rho(a, state) * active_intensity(params, history, state, t, a)
}

/// `λ_IK^(n)(t, x)` by direct summation.
pub fn passive_intensity(params: &MicroParams, history: &[BookEvent], state: &BookState, t: f64, p: PassiveType, x: f64) -> f64 {
    let exo = params.lambda_hat[p.index()].eval(p.side(), state.p_a(), state.p_b(), x) / params.delta_v;
    let excitation: f64 = params
        .terms
        .iter()
        .filter_map(|term| match term.target {
            MicroTarget::Passive(q, f) if q == p => Some((term, f)),
            _ => None,
        })
        .map(|(term, f)| {
            term.weight
                * f.eval(x)
                * history
                    .iter()
                    .filter(|e| e.t < t)
                    .filter_map(|e| term.source_weight(e).map(|w| w * term.kernel.eval(t - e.t)))
                    .sum::<f64>()
        })
        .sum();
    exo + excitation
}

/// Running sums `A = Σ w e^{-κ(t-s)}`, `B = Σ w (t-s) e^{-κ(t-s)}` for one
/// exponential-polynomial part.
#[derive(Debug, Clone, Copy)]
struct Part {
    term: ExpPolyTerm,
    a: f64,
    b: f64,
}

impl Part {
    fn advance(&mut self, u: f64) {
        let d = (-self.term.rate * u).exp();
        self.b = d * (self.b + u * self.a);
        self.a *= d;
    }

    fn value(&self) -> f64 {
        self.term.coef * if self.term.power == 0 { self.a } else { self.b }
    }

    /// Dominates `value` at all later times (no new events).
    fn bound(&self) -> f64 {
        if self.term.coef <= 0.0 {
            return 0.0;
        }
        let future = if self.term.power == 0 { self.a } else { self.b + self.a / (self.term.rate * E) };
        self.term.coef * future
    }
}

#[derive(Debug, Clone)]
struct TermAccum {
    parts: Vec<Part>,
    /// `∫_{-L}^{L} f` for passive targets, 1 otherwise.
    mass: f64,
}

impl TermAccum {
    fn value(&self) -> f64 {
        self.parts.iter().map(Part::value).sum::<f64>().max(0.0)
    }

    fn bound(&self) -> f64 {
        self.parts.iter().map(Part::bound).sum()
    }
}

#[derive(Debug, Clone, Copy)]
enum Component {
    ExoActive(ActiveType),
    ExoPassive(PassiveType),
    Term(usize),
}

/// Incremental intensity state of one simulation.
#[derive(Debug, Clone)]
struct Engine<'a> {
    params: &'a MicroParams,
    accums: Vec<TermAccum>,
    t: f64,
}

impl<'a> Engine<'a> {
    fn new(params: &'a MicroParams) -> Self {
        let l = params.half_width;
        let accums = params
            .terms
            .iter()
            .map(|term| TermAccum {
                parts: term.kernel.exp_poly_terms().unwrap_or(&[]).iter().map(|p| Part { term: *p, a: 0.0, b: 0.0 }).collect(),
                mass: match term.target {
                    MicroTarget::Active(_) => 1.0,
                    MicroTarget::Passive(_, f) => f.integral(-l, l),
                },
            })
            .collect();
        Engine { params, accums, t: 0.0 }
    }

    fn advance(&mut self, t: f64) {
        let u = t - self.t;
        if u > 0.0 {
            self.accums.iter_mut().flat_map(|a| a.parts.iter_mut()).for_each(|p| p.advance(u));
        }
        self.t = t;
    }

    fn record(&mut self, e: &BookEvent) {
        for (term, acc) in self.params.terms.iter().zip(self.accums.iter_mut()) {
            if let Some(w) = term.source_weight(e) {
                acc.parts.iter_mut().for_each(|p| p.a += w);
            }
        }
    }

    /// `μ_IJ^(n)` at the current time (without `ρ`).
    fn mu(&self, a: ActiveType, state: &BookState) -> f64 {
        let excitation: f64 = self
            .params
            .terms
            .iter()
            .zip(&self.accums)
            .filter(|(term, _)| term.target == MicroTarget::Active(a))
            .map(|(term, acc)| term.weight * acc.value())
            .sum();
        self.params.exo_active(a, state) + excitation
    }

    /// `∫_{-L}^{L} λ_IK^(n)(t, x) dx`.
    fn lambda_mass(&self, p: PassiveType, state: &BookState) -> f64 {
        let excitation: f64 = self
            .params
            .terms
            .iter()
            .zip(&self.accums)
            .filter(|(term, _)| matches!(term.target, MicroTarget::Passive(q, _) if q == p))
            .map(|(term, acc)| term.weight * acc.mass * acc.value())
            .sum();
        self.params.exo_passive_mass(p, state) + excitation
    }

    /// `λ_IK^(n)(t, ·)` on `nodes`.
    fn lambda_at(&self, p: PassiveType, state: &BookState, nodes: &[f64]) -> Vec<f64> {
        let exo = &self.params.lambda_hat[p.index()];
        nodes
            .iter()
            .map(|&x| {
                let ex: f64 = self
                    .params
                    .terms
                    .iter()
                    .zip(&self.accums)
                    .filter_map(|(term, acc)| match term.target {
                        MicroTarget::Passive(q, f) if q == p => Some(term.weight * f.eval(x) * acc.value()),
                        _ => None,
                    })
                    .sum();
                exo.eval(p.side(), state.p_a(), state.p_b(), x) / self.params.delta_v + ex
            })
            .collect()
    }

    /// `(rate bound, component)` for every possible event source.
    fn components(&self, state: &BookState, out: &mut Vec<(f64, Component)>) {
        out.clear();
        let mut rho = [0.0; 4];
        for a in ActiveType::ALL {
            rho[a.index()] = self.params.active_rho(a, state);
            out.push((rho[a.index()] * self.params.exo_active(a, state), Component::ExoActive(a)));
        }
        for p in PassiveType::ALL {
            out.push((self.params.exo_passive_mass(p, state), Component::ExoPassive(p)));
        }
        for (i, (term, acc)) in self.params.terms.iter().zip(&self.accums).enumerate() {
            let scale = match term.target {
                MicroTarget::Active(a) => rho[a.index()],
                MicroTarget::Passive(..) => acc.mass,
            };
            out.push((term.weight * scale * acc.bound(), Component::Term(i)));
        }
    }
}

/// What to keep from a simulation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimOptions {
    /// Keep `(t, p_a, p_b)` after every event.
    pub record_path: bool,
    /// Times at which to keep the full state and `‖D‖_{D_2^2}`.
    pub snapshot_times: Vec<f64>,
    /// Keep `J`, `β`, `‖D‖_{D_1^1}` after every event.
    pub record_diagnostics: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub t: f64,
    pub p_a: f64,
    pub p_b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagSample {
    pub t: f64,
    pub j: f64,
    /// `β_I = δx(μ_IM - μ_IL)`.
    pub beta: [f64; 2],
    pub d11: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub state: BookState,
    pub d11: f64,
    pub d22: f64,
    /// Rescaled `D^(n) = (δx² μ_ij, δv λ_ik)` on the passive grid nodes.
    pub field: PrelimitField,
}

/// `J`, `β` and `D` of one run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MicroDiagnostics {
    pub samples: Vec<DiagSample>,
    pub final_j: f64,
    pub sup_d11: f64,
    pub active_count: usize,
    pub passive_count: usize,
    pub min_spread: f64,
    pub candidates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroRun {
    pub horizon: f64,
    pub events: Vec<BookEvent>,
    pub path: Vec<PathPoint>,
    pub snapshots: Vec<Snapshot>,
    pub diagnostics: MicroDiagnostics,
    pub final_state: BookState,
}

impl MicroRun {
    pub fn event_stream(&self) -> EventStream {
        to_event_stream(&self.events, self.horizon)
    }
}

/// Spatial nodes for snapshot fields and `L²` norms.
pub const SNAPSHOT_NODES: usize = 201;

fn snapshot_nodes(l: f64) -> Vec<f64> {
    (0..SNAPSHOT_NODES).map(|j| -l + 2.0 * l * j as f64 / (SNAPSHOT_NODES - 1) as f64).collect()
}

fn trapezoid(values: &[f64], h: f64) -> f64 {
    h * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[values.len() - 1]))
}

impl Engine<'_> {
    fn d11(&self, state: &BookState) -> f64 {
        let dx2 = self.params.delta_x * self.params.delta_x;
        let mu: f64 = ActiveType::ALL.iter().map(|a| dx2 * self.mu(*a, state)).sum();
        let lam: f64 = PassiveType::ALL.iter().map(|p| self.params.delta_v * self.lambda_mass(*p, state)).sum();
        mu + lam
    }

    fn beta(&self, state: &BookState) -> [f64; 2] {
        Side::BOTH.map(|s| {
            self.params.delta_x * (self.mu(ActiveType::of(s, true), state) - self.mu(ActiveType::of(s, false), state))
        })
    }

    fn snapshot(&self, t: f64, state: &BookState) -> Snapshot {
        let l = self.params.half_width;
        let nodes = snapshot_nodes(l);
        let h = nodes[1] - nodes[0];
        let dv = self.params.delta_v;
        let dx2 = self.params.delta_x * self.params.delta_x;
        let lam: [Vec<f64>; 4] =
            PassiveType::ALL.map(|p| self.lambda_at(p, state, &nodes).into_iter().map(|v| dv * v).collect());
        let mu = ActiveType::ALL.map(|a| dx2 * self.mu(a, state));
        let d22 = mu.iter().map(|m| m * m).sum::<f64>()
            + lam.iter().map(|v| trapezoid(&v.iter().map(|x| x * x).collect::<Vec<_>>(), h)).sum::<f64>();
        Snapshot { t, state: state.clone(), d11: self.d11(state), d22, field: PrelimitField { mu, lam } }
    }
}

/// Simulates the book on `[0, horizon]`.
pub fn simulate_book<R: Rng + ?Sized>(
    params: &MicroParams,
    horizon: f64,
    rng: &mut R,
    opts: &SimOptions,
) -> Result<MicroRun, LobError> {
    params.validate()?;
    let (dx, dv, l) = (params.delta_x, params.delta_v, params.half_width);
    let mut state = params.initial_state()?;
    let mut engine = Engine::new(params);
    let mut events = Vec::new();
    let mut path = Vec::new();
    let mut snapshots = Vec::new();
    let mut snaps: Vec<f64> = opts.snapshot_times.iter().copied().filter(|s| *s <= horizon).collect();
    snaps.sort_by(f64::total_cmp);
    let mut next_snap = 0;
    let mut diag = MicroDiagnostics { final_j: 1.0, min_spread: state.spread(), ..Default::default() };
    diag.sup_d11 = engine.d11(&state);
    if opts.record_path {
        path.push(PathPoint { t: 0.0, p_a: state.p_a(), p_b: state.p_b() });
    }
    if opts.record_diagnostics {
        diag.samples.push(DiagSample { t: 0.0, j: 1.0, beta: engine.beta(&state), d11: diag.sup_d11 });
    }
    let mut comps = Vec::with_capacity(8 + params.terms.len());
    let mut t = 0.0;
    loop {
        engine.components(&state, &mut comps);
        let total: f64 = comps.iter().map(|c| c.0).sum();
        let wait = if total > 0.0 {
            let draw: f64 = Exp1.sample(rng);
            draw / total
        } else {
            f64::INFINITY
        };
        let t_next = t + wait;
        while next_snap < snaps.len() && snaps[next_snap] < t_next.min(f64::MAX) {
            let s = snaps[next_snap];
            engine.advance(s);
            snapshots.push(engine.snapshot(s, &state));
            next_snap += 1;
        }
        if t_next > horizon {
            break;
        }
        t = t_next;
        engine.advance(t);
        diag.candidates += 1;
        let mut u = rng.random::<f64>() * total;
        let mut chosen = comps.len() - 1;
        for (i, c) in comps.iter().enumerate() {
            if u < c.0 {
                chosen = i;
                break;
            }
            u -= c.0;
        }
        let (bound, comp) = comps[chosen];
        if bound <= 0.0 {
            continue;
        }
        let (kind, actual, spatial) = match comp {
            Component::ExoActive(a) => (EventType::Active(a), bound, None),
            Component::ExoPassive(p) => (EventType::Passive(p), bound, Some(params.lambda_hat[p.index()].profile)),
            Component::Term(i) => {
                let term = &params.terms[i];
                let acc = &engine.accums[i];
                match term.target {
                    MicroTarget::Active(a) => {
                        (EventType::Active(a), term.weight * params.active_rho(a, &state) * acc.value(), None)
                    }
                    MicroTarget::Passive(p, f) => (EventType::Passive(p), term.weight * acc.mass * acc.value(), Some(f)),
                }
            }
        };
        if actual > bound * (1.0 + 1e-9) {
            return Err(LobError::MajorantViolated { t, rate: actual, bound });
        }
        if rng.random::<f64>() * bound > actual {
            continue;
        }
        let (y, z) = match (kind, spatial) {
            (EventType::Passive(p), Some(f)) => (f.sample_in(-l, l, rng), params.sizes[p.index()].sample(rng)),
            _ => (0.0, 0.0),
        };
        let e = BookEvent { t, kind, y, z };
        state.apply_mut(&e, dv)?;
        engine.record(&e);
        match kind {
            EventType::Active(_) => {
                diag.active_count += 1;
                diag.final_j += dx * dx;
            }
            EventType::Passive(_) => {
                diag.passive_count += 1;
                diag.final_j += dv;
            }
        }
        if state.spread_ticks() < 0 {
            return Err(LobError::Crossing { t, p_a: state.p_a(), p_b: state.p_b() });
        }
        diag.min_spread = diag.min_spread.min(state.spread());
        let d11 = engine.d11(&state);
        diag.sup_d11 = diag.sup_d11.max(d11);
        if opts.record_diagnostics {
            diag.samples.push(DiagSample { t, j: diag.final_j, beta: engine.beta(&state), d11 });
        }
        if opts.record_path {
            path.push(PathPoint { t, p_a: state.p_a(), p_b: state.p_b() });
        }
        events.push(e);
    }
    Ok(MicroRun { horizon, events, path, snapshots, diagnostics: diag, final_state: state })
}

/// Replays `events` from the initial state through the pure updates.
pub fn replay(params: &MicroParams, events: &[BookEvent]) -> Result<(BookState, Vec<PathPoint>), LobError> {
    let mut state = params.initial_state()?;
    let mut path = vec![PathPoint { t: 0.0, p_a: state.p_a(), p_b: state.p_b() }];
    for e in events {
        state.apply_mut(e, params.delta_v)?;
        path.push(PathPoint { t: e.t, p_a: state.p_a(), p_b: state.p_b() });
    }
    Ok((state, path))
}

/// CSV `t,p_a,p_b`.
pub fn write_path_csv<W: std::io::Write>(path: &[PathPoint], w: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["t", "p_a", "p_b"])?;
    for p in path {
        w.write_record([format!("{:?}", p.t), format!("{:?}", p.p_a), format!("{:?}", p.p_b)])?;
    }
    w.flush()?;
    Ok(())
}

/// CSV `t,tick,price,ask_density,bid_density` over the union of stored ticks.
pub fn write_profile_csv<W: std::io::Write>(snapshots: &[Snapshot], w: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["t", "tick", "price", "ask_density", "bid_density"])?;
    for s in snapshots {
        let st = &s.state;
        let lo = st.ask.first_tick().min(st.bid.first_tick());
        let hi = st.ask.last_tick().max(st.bid.last_tick());
        for j in lo..=hi {
            w.write_record([
                format!("{:?}", s.t),
                j.to_string(),
                format!("{:?}", st.grid.price(j)),
                format!("{:?}", st.ask.get(j)),
                format!("{:?}", st.bid.get(j)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
