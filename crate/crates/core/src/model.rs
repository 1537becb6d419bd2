//! Model declaration shared by the microscopic simulator and the limit
//! solver.
//!
//! A [`ModelSpec`] declares the limit objects (rate multipliers, exogenous
//! densities, limit kernels and their rescaled differences, size laws).
//! [`ModelSpec::micro_params`] builds the `n`-th microscopic model whose
//! scaling limit they are, and [`ModelSpec::limit_params`] the limit system.
//! Market-order and spread-placement kernels of level `n` are split
//! symmetrically around the limit kernel:
//! `φ_IM = φ + (δx/2)·θ`, `φ_IL = φ - (δx/2)·θ`, and likewise for `Φ` and
//! `μ̂`, so every difference quotient equals its declared limit exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{KernelError, Profile, RateMultiplier, Side, SizeMeasure, StateScalar, TimeKernel, TimeKernelDecl};
use crate::limit::{LimitParams, VolumeGrid};
use crate::lob::{MicroParams, MicroSource, MicroTarget, MicroTerm, SplitScalar};
use crate::volterra::{BlockKernel, BlockTerm, SourceSlot, SpatialGrid, TargetSlot};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(
        "delta_v = {delta_v} exceeds delta_x = {delta_x}: the cancellation multiplier \
         1 + (δv/δx)(e^-z - 1) could turn negative, breaking volume positivity"
    )]
    VolumeScale { delta_v: f64, delta_x: f64 },
    #[error("{0}")]
    Kernel(#[from] KernelError),
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// Price-moving events. Market orders widen the spread by one tick, spread
/// placements narrow it by one tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActiveType {
    #[serde(rename = "a_m")]
    AskMarket,
    #[serde(rename = "a_l")]
    AskSpread,
    #[serde(rename = "b_m")]
    BidMarket,
    #[serde(rename = "b_l")]
    BidSpread,
}

impl ActiveType {
    pub const ALL: [ActiveType; 4] = [ActiveType::AskMarket, ActiveType::AskSpread, ActiveType::BidMarket, ActiveType::BidSpread];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn side(self) -> Side {
        match self {
            ActiveType::AskMarket | ActiveType::AskSpread => Side::Ask,
            ActiveType::BidMarket | ActiveType::BidSpread => Side::Bid,
        }
    }

    pub fn is_market(self) -> bool {
        matches!(self, ActiveType::AskMarket | ActiveType::BidMarket)
    }

    pub fn of(side: Side, market: bool) -> Self {
        match (side, market) {
            (Side::Ask, true) => ActiveType::AskMarket,
            (Side::Ask, false) => ActiveType::AskSpread,
            (Side::Bid, true) => ActiveType::BidMarket,
            (Side::Bid, false) => ActiveType::BidSpread,
        }
    }

    /// Price change in ticks of the moved side.
    pub fn tick_step(self) -> i64 {
        match self {
            ActiveType::AskMarket | ActiveType::BidSpread => 1,
            ActiveType::AskSpread | ActiveType::BidMarket => -1,
        }
    }

    pub fn label(self) -> &'static str {
        ["mkt_a", "spr_a", "mkt_b", "spr_b"][self.index()]
    }
}

/// Volume-changing events outside the spread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PassiveType {
    #[serde(rename = "a_l")]
    AskPlace,
    #[serde(rename = "a_c")]
    AskCancel,
    #[serde(rename = "b_l")]
    BidPlace,
    #[serde(rename = "b_c")]
    BidCancel,
}

impl PassiveType {
    pub const ALL: [PassiveType; 4] = [PassiveType::AskPlace, PassiveType::AskCancel, PassiveType::BidPlace, PassiveType::BidCancel];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn side(self) -> Side {
        match self {
            PassiveType::AskPlace | PassiveType::AskCancel => Side::Ask,
            PassiveType::BidPlace | PassiveType::BidCancel => Side::Bid,
        }
    }

    pub fn is_placement(self) -> bool {
        matches!(self, PassiveType::AskPlace | PassiveType::BidPlace)
    }

    pub fn label(self) -> &'static str {
        ["lim_a", "can_a", "lim_b", "can_b"][self.index()]
    }
}

/// The eight event types in stream order: four active, then four passive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventType {
    Active(ActiveType),
    Passive(PassiveType),
}

impl EventType {
    pub fn index(self) -> usize {
        match self {
            EventType::Active(a) => a.index(),
            EventType::Passive(p) => 4 + p.index(),
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i < 4 {
            EventType::Active(ActiveType::ALL[i])
        } else {
            EventType::Passive(PassiveType::ALL[i - 4])
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EventType::Active(a) => a.label(),
            EventType::Passive(p) => p.label(),
        }
    }

    pub fn labels() -> Vec<String> {
        (0..8).map(|i| EventType::from_index(i).label().to_string()).collect()
    }
}

/// Exogenous passive density `scale(S) · profile(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExoPassive {
    #[serde(default = "unit_scale")]
    pub scale: StateScalar,
    pub profile: Profile,
}

fn unit_scale() -> StateScalar {
    StateScalar::constant(1.0)
}

impl ExoPassive {
    pub fn zero() -> Self {
        ExoPassive { scale: StateScalar::constant(0.0), profile: Profile::Zero }
    }

    pub fn eval(&self, side: Side, p_a: f64, p_b: f64, x: f64) -> f64 {
        self.scale.eval(side, p_a, p_b) * self.profile.eval(x)
    }
}

/// Initial volume density `level + bump(x)` in absolute price coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeInit {
    pub level: f64,
    #[serde(default = "zero_profile")]
    pub bump: Profile,
}

fn zero_profile() -> Profile {
    Profile::Zero
}

impl VolumeInit {
    pub fn flat(level: f64) -> Self {
        VolumeInit { level, bump: Profile::Zero }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.level + self.bump.eval(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialBook {
    pub p_a: f64,
    pub p_b: f64,
    pub ask: VolumeInit,
    pub bid: VolumeInit,
}

/// Limit coefficients of one side's active orders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActiveSideSpec {
    pub rate: RateMultiplier,
    pub mu_hat: StateScalar,
    #[serde(default)]
    pub beta_hat: StateScalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PassiveSpec {
    pub exo: ExoPassive,
    pub size: SizeMeasure,
}

/// Active → active: `φ_{I,ij}(t)` with difference `θ_{I,ij}(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiTerm {
    pub target: Side,
    pub source: ActiveType,
    pub kernel: TimeKernelDecl,
    #[serde(default = "zero_decl")]
    pub theta: TimeKernelDecl,
}

/// Passive → active: `Φ_{I,ik}(y, t) = g(y)·k(t)` with difference `g(y)·k_θ(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BigPhiTerm {
    pub target: Side,
    pub source: PassiveType,
    pub profile: Profile,
    pub kernel: TimeKernelDecl,
    #[serde(default = "zero_decl")]
    pub theta: TimeKernelDecl,
}

/// Active → passive: `ψ_{IK,ij}(x, t) = f(x)·k(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsiTerm {
    pub target: PassiveType,
    pub source: ActiveType,
    pub profile: Profile,
    pub kernel: TimeKernelDecl,
}

/// Passive → passive: `Ψ_{IK,ik}(x, y, t) = f(x)·g(y)·k(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BigPsiTerm {
    pub target: PassiveType,
    pub source: PassiveType,
    pub target_profile: Profile,
    pub source_profile: Profile,
    pub kernel: TimeKernelDecl,
}

fn zero_decl() -> TimeKernelDecl {
    TimeKernelDecl::Zero
}

/// Tick size, order-size scale and spatial truncation of the level-0 model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    pub delta_x: f64,
    pub delta_v: f64,
    pub half_width: f64,
}

impl Scales {
    /// `δx·2^{-k}`, `δv·4^{-k}`.
    pub fn level(&self, k: u32) -> Scales {
        Scales {
            delta_x: self.delta_x * 0.5f64.powi(k as i32),
            delta_v: self.delta_v * 0.25f64.powi(k as i32),
            half_width: self.half_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub ask: ActiveSideSpec,
    pub bid: ActiveSideSpec,
    pub ask_place: PassiveSpec,
    pub ask_cancel: PassiveSpec,
    pub bid_place: PassiveSpec,
    pub bid_cancel: PassiveSpec,
    #[serde(default)]
    pub phi: Vec<PhiTerm>,
    #[serde(default)]
    pub big_phi: Vec<BigPhiTerm>,
    #[serde(default)]
    pub psi: Vec<PsiTerm>,
    #[serde(default)]
    pub big_psi: Vec<BigPsiTerm>,
    pub initial: InitialBook,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price_barrier: Option<f64>,
}

impl ModelSpec {
    pub fn side(&self, side: Side) -> &ActiveSideSpec {
        match side {
            Side::Ask => &self.ask,
            Side::Bid => &self.bid,
        }
    }

    pub fn passive(&self, p: PassiveType) -> &PassiveSpec {
        match p {
            PassiveType::AskPlace => &self.ask_place,
            PassiveType::AskCancel => &self.ask_cancel,
            PassiveType::BidPlace => &self.bid_place,
            PassiveType::BidCancel => &self.bid_cancel,
        }
    }

    /// A model with every rate, density and kernel zero.
    pub fn quiet(initial: InitialBook) -> Self {
        let side = ActiveSideSpec {
            rate: RateMultiplier::Constant { rho: 0.0, varrho: 0.0 },
            mu_hat: StateScalar::constant(0.0),
            beta_hat: StateScalar::constant(0.0),
        };
        let passive = PassiveSpec { exo: ExoPassive::zero(), size: SizeMeasure::Dirac { z: 0.0 } };
        ModelSpec {
            ask: side,
            bid: side,
            ask_place: passive,
            ask_cancel: passive,
            bid_place: passive,
            bid_cancel: passive,
            phi: Vec::new(),
            big_phi: Vec::new(),
            psi: Vec::new(),
            big_psi: Vec::new(),
            initial,
            price_barrier: None,
        }
    }

    /// Static checks shared by both derived models.
    pub fn validate(&self) -> Result<(), ModelError> {
        for p in PassiveType::ALL {
            let spec = self.passive(p);
            spec.size.validate()?;
            spec.exo.profile.validate()?;
        }
        for t in &self.phi {
            t.kernel.build()?;
            t.theta.build()?;
        }
        for t in &self.big_phi {
            t.kernel.build()?;
            t.theta.build()?;
            t.profile.validate()?;
        }
        for t in &self.psi {
            t.kernel.build()?;
            t.profile.validate()?;
        }
        for t in &self.big_psi {
            t.kernel.build()?;
            t.target_profile.validate()?;
            t.source_profile.validate()?;
        }
        if self.initial.p_a < self.initial.p_b {
            return Err(ModelError::Invalid(format!(
                "initial ask {} is below initial bid {}",
                self.initial.p_a, self.initial.p_b
            )));
        }
        Ok(())
    }

    /// The microscopic model at refinement level `k` of the base scales.
    pub fn micro_params(&self, base: Scales, k: u32) -> Result<MicroParams, ModelError> {
        self.validate()?;
        let scales = base.level(k);
        let (dx, dv) = (scales.delta_x, scales.delta_v);
        if dv > dx {
            return Err(ModelError::VolumeScale { delta_v: dv, delta_x: dx });
        }
        let half = 0.5 * dx;
        let mu_hat = ActiveType::ALL.map(|a| {
            let s = self.side(a.side());
            SplitScalar { base: s.mu_hat, diff: s.beta_hat, offset: if a.is_market() { half } else { -half } }
        });
        let mut terms = Vec::new();
        let split = |k: &TimeKernel, theta: &TimeKernel, market: bool| -> TimeKernel {
            k.combine(1.0, theta, if market { half } else { -half })
        };
        for t in &self.phi {
            let (k, theta) = (t.kernel.build()?, t.theta.build()?);
            for market in [true, false] {
                let kernel = split(&k, &theta, market);
                if kernel.is_zero() {
                    continue;
                }
                terms.push(MicroTerm {
                    target: MicroTarget::Active(ActiveType::of(t.target, market)),
                    source: MicroSource::Active(t.source),
                    weight: 1.0,
                    kernel,
                });
            }
        }
        for t in &self.big_phi {
            let (k, theta) = (t.kernel.build()?, t.theta.build()?);
            for market in [true, false] {
                let kernel = split(&k, &theta, market);
                if kernel.is_zero() {
                    continue;
                }
                terms.push(MicroTerm {
                    target: MicroTarget::Active(ActiveType::of(t.target, market)),
                    source: MicroSource::Passive(t.source, t.profile),
                    weight: dv / (dx * dx),
                    kernel,
                });
            }
        }
        for t in &self.psi {
            terms.push(MicroTerm {
                target: MicroTarget::Passive(t.target, t.profile),
                source: MicroSource::Active(t.source),
                weight: dx * dx / dv,
                kernel: t.kernel.build()?,
            });
        }
        for t in &self.big_psi {
            terms.push(MicroTerm {
                target: MicroTarget::Passive(t.target, t.target_profile),
                source: MicroSource::Passive(t.source, t.source_profile),
                weight: 1.0,
                kernel: t.kernel.build()?,
            });
        }
        let params = MicroParams {
            delta_x: dx,
            delta_v: dv,
            half_width: scales.half_width,
            rates: [self.ask.rate, self.bid.rate],
            mu_hat,
            lambda_hat: PassiveType::ALL.map(|p| self.passive(p).exo),
            sizes: PassiveType::ALL.map(|p| self.passive(p).size),
            terms,
            initial: self.initial,
        };
        params.validate().map_err(|e| ModelError::Invalid(e.to_string()))?;
        Ok(params)
    }

    /// The limit system on `grid`, with `φ̃_{Ii} = φ_{I,iM} + φ_{I,iL}` and
    /// the analogous sums for `ψ̃` and `θ̃` realized as one term per source.
    pub fn limit_params(&self, grid: SpatialGrid) -> Result<LimitParams, ModelError> {
        self.validate()?;
        let mut terms = Vec::new();
        for t in &self.phi {
            let src = SourceSlot::Mu(t.source.side());
            terms.push(BlockTerm::new(TargetSlot::Mu(t.target), None, src, None, t.kernel.build()?));
            terms.push(BlockTerm::new(TargetSlot::Beta(t.target), None, src, None, t.theta.build()?));
        }
        for t in &self.big_phi {
            let src = SourceSlot::Lam(t.source);
            terms.push(BlockTerm::new(TargetSlot::Mu(t.target), None, src, Some(t.profile), t.kernel.build()?));
            terms.push(BlockTerm::new(TargetSlot::Beta(t.target), None, src, Some(t.profile), t.theta.build()?));
        }
        for t in &self.psi {
            let src = SourceSlot::Mu(t.source.side());
            terms.push(BlockTerm::new(TargetSlot::Lam(t.target), Some(t.profile), src, None, t.kernel.build()?));
        }
        for t in &self.big_psi {
            terms.push(BlockTerm::new(
                TargetSlot::Lam(t.target),
                Some(t.target_profile),
                SourceSlot::Lam(t.source),
                Some(t.source_profile),
                t.kernel.build()?,
            ));
        }
        terms.retain(|t| !t.kernel.is_zero());
        let alpha = PassiveType::ALL.map(|p| {
            let size = self.passive(p).size;
            if p.is_placement() {
                size.alpha_l()
            } else {
                size.alpha_c()
            }
        });
        let volume_grid = VolumeGrid::covering(&self.initial, &grid);
        Ok(LimitParams {
            rates: [self.ask.rate, self.bid.rate],
            mu_hat: [self.ask.mu_hat, self.bid.mu_hat],
            beta_hat: [self.ask.beta_hat, self.bid.beta_hat],
            lambda_hat: PassiveType::ALL.map(|p| self.passive(p).exo),
            alpha,
            kernel: BlockKernel::new(terms),
            grid,
            volume_grid,
            initial: self.initial,
            price_barrier: self.price_barrier,
        })
    }
}
