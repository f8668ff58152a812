//! Control networks and the gates they drive.
//!
//! A control network maps a token vector to one logit per gated output:
//! `G(x) = relu(x·W1 + b)·W2`. During training the gate is the noisy sigmoid
//! `σ(G(x) + α·ε)` with fresh `ε ~ N(0, 1)` per token and output; at inference it is the
//! hard decision `σ(G(x)) ≥ 0.5`.

use std::fmt;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CctError, Result};
use crate::tensor::{kernels, randn, Graph, ParamId, ParamStore, Tensor, Var};
use crate::trace::GateSite;

/// Random stream used for gate noise, dropout and initialization.
pub type CctRng = ChaCha8Rng;

/// Training logits are clamped to this magnitude before the sigmoid so that train-mode
/// gate values stay strictly inside (0, 1) in double precision.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// Continuous noisy gates; every branch is computed and scaled by its gate.
    Train,
    /// Binary gates without noise.
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    LinearRamp,
    Constant,
}

/// Schedule for the noise scale α.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub alpha_max: f64,
    pub ramp_steps: usize,
    pub mode: NoiseMode,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            alpha_max: 5.0,
            ramp_steps: 300_000,
            mode: NoiseMode::LinearRamp,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha_max.is_finite() || self.alpha_max < 0.0 {
            return Err(CctError::config("noise.alpha_max", "must be a finite value >= 0"));
        }
        if self.mode == NoiseMode::LinearRamp && self.ramp_steps == 0 {
            return Err(CctError::config("noise.ramp_steps", "must be >= 1 for a linear ramp"));
        }
        Ok(())
    }
}

/// Noise scale at a training step: a linear ramp from 0 capped at `alpha_max`, or constant.
pub fn alpha_at(schedule: &NoiseSchedule, step: usize) -> f64 {
    match schedule.mode {
        NoiseMode::Constant => schedule.alpha_max,
        NoiseMode::LinearRamp => {
            let frac = (step as f64 / schedule.ramp_steps.max(1) as f64).min(1.0);
            schedule.alpha_max * frac
        }
    }
}

/// Threshold rule shared by every inference path; a tie at exactly 0.5 is active.
pub fn is_active(logit: f64) -> bool {
    kernels::sigmoid(logit) >= 0.5
}

/// Single-hidden-layer control network.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlNetwork {
    pub w1: ParamId,
    pub b: ParamId,
    pub w2: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
    pub arity: usize,
}

impl ControlNetwork {
    /// `W1` is small random; `b` and `W2` start at zero so every initial logit is exactly 0.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        arity: usize,
        rng: &mut CctRng,
    ) -> Result<Self> {
        if hidden == 0 || arity == 0 || input_dim == 0 {
            return Err(CctError::contract(format!(
                "control network {prefix}: input {input_dim}, hidden {hidden}, arity {arity} must all be > 0"
            )));
        }
        let w1 = store.add(
            format!("{prefix}.w1"),
            randn(rng, &[input_dim, hidden], 1.0 / (input_dim as f64).sqrt()),
        );
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[hidden]));
        let w2 = store.add(format!("{prefix}.w2"), Tensor::zeros(&[hidden, arity]));
        Ok(ControlNetwork {
            w1,
            b,
            w2,
            input_dim,
            hidden,
            arity,
        })
    }

    /// Logits `[rows × arity]` on the tape.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w1 = g.param(store, self.w1);
        let b = g.param(store, self.b);
        let w2 = g.param(store, self.w2);
        let h = g.matmul(x, w1)?;
        let h = g.add_bias(h, b)?;
        let h = g.relu(h);
        g.matmul(h, w2)
    }

    /// Logits without a tape; bit-identical to [`ControlNetwork::logits`].
    pub fn logits_values(&self, store: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        let (w1, b, w2) = (store.get(self.w1), store.get(self.b), store.get(self.w2));
        let mut h = kernels::matmul(x, w1.data(), rows, self.input_dim, self.hidden);
        for row in h.chunks_mut(self.hidden) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v = kernels::relu(*v + bb);
            }
        }
        kernels::matmul(&h, w2.data(), rows, self.hidden, self.arity)
    }
}

/// Row identity within a packed stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TokenRef {
    pub seq: usize,
    pub pos: usize,
}

pub type ForceFn = dyn Fn(&GateSite, TokenRef) -> Option<bool> + Send + Sync;

/// Overrides for gate values, used by equivalence checks and ablations.
#[derive(Clone, Default)]
pub enum GateForcing {
    #[default]
    None,
    /// Every gate on (`true`) or off (`false`).
    All(bool),
    /// Per-site, per-token decisions; `None` leaves the learned gate in place.
    Custom(Arc<ForceFn>),
}

impl fmt::Debug for GateForcing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateForcing::None => write!(f, "None"),
            GateForcing::All(b) => write!(f, "All({b})"),
            GateForcing::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl GateForcing {
    pub fn custom(f: impl Fn(&GateSite, TokenRef) -> Option<bool> + Send + Sync + 'static) -> Self {
        GateForcing::Custom(Arc::new(f))
    }

    pub fn decide(&self, site: &GateSite, tok: TokenRef) -> Option<bool> {
        match self {
            GateForcing::None => None,
            GateForcing::All(b) => Some(*b),
            GateForcing::Custom(f) => f(site, tok),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, GateForcing::None)
    }
}

/// Everything a forward pass needs to evaluate gates and dropout.
pub struct GateCtx<'a> {
    pub mode: GateMode,
    pub alpha: f64,
    pub forcing: GateForcing,
    pub noise_rng: Option<&'a mut CctRng>,
    pub dropout_rate: f64,
    pub dropout_rng: Option<&'a mut CctRng>,
}

impl<'a> GateCtx<'a> {
    /// Deterministic inference: binary gates, no noise, no dropout.
    pub fn infer() -> Self {
        GateCtx {
            mode: GateMode::Infer,
            alpha: 0.0,
            forcing: GateForcing::None,
            noise_rng: None,
            dropout_rate: 0.0,
            dropout_rng: None,
        }
    }

    /// Continuous gates with noise scale `alpha` and no dropout.
    pub fn train(alpha: f64, noise_rng: Option<&'a mut CctRng>) -> Self {
        GateCtx {
            mode: GateMode::Train,
            alpha,
            forcing: GateForcing::None,
            noise_rng,
            dropout_rate: 0.0,
            dropout_rng: None,
        }
    }

    pub fn with_forcing(mut self, forcing: GateForcing) -> Self {
        self.forcing = forcing;
        self
    }

    pub fn with_dropout(mut self, rate: f64, rng: &'a mut CctRng) -> Self {
        self.dropout_rate = rate;
        self.dropout_rng = Some(rng);
        self
    }

    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.mode == GateMode::Infer {
            return Ok(x);
        }
        g.dropout(x, self.dropout_rate, self.dropout_rng.as_deref_mut())
    }
}

/// Gate values `[rows × arity]` for the token vectors `x`.
///
/// Train mode returns `σ(clamp(G(x) + α·ε))` on the tape; infer mode returns the
/// constant indicator of `σ(G(x)) ≥ 0.5`.
pub fn gate_forward(
    g: &mut Graph,
    store: &ParamStore,
    net: &ControlNetwork,
    x: Var,
    alpha: f64,
    mode: GateMode,
    rng: Option<&mut CctRng>,
) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(CctError::contract(format!("noise scale alpha must be >= 0, got {alpha}")));
    }
    let logits = net.logits(g, store, x)?;
    match mode {
        GateMode::Infer => {
            let t = g.value(logits);
            let data = t.data().iter().map(|&l| if is_active(l) { 1.0 } else { 0.0 }).collect();
            let t = Tensor::new(t.shape().to_vec(), data)?;
            Ok(g.constant(t))
        }
        GateMode::Train => {
            let noisy = if alpha > 0.0 {
                let rng = rng.ok_or_else(|| CctError::contract("train-mode gates with alpha > 0 need a noise stream"))?;
                let shape = g.value(logits).shape().to_vec();
                let n: usize = shape.iter().product();
                let noise = (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        alpha * z
                    })
                    .collect();
                let noise = g.constant(Tensor::new(shape, noise)?);
                g.add(logits, noise)?
            } else {
                logits
            };
            let clamped = g.clamp(noisy, -LOGIT_CLAMP, LOGIT_CLAMP);
            Ok(g.sigmoid(clamped))
        }
    }
}

/// Replaces forced entries of a `[rows × 1]` gate column. Unforced entries keep their
/// value and gradient.
pub fn apply_forcing(
    g: &mut Graph,
    gate: Var,
    site: &GateSite,
    rows: &[TokenRef],
    forcing: &GateForcing,
) -> Result<Var> {
    if forcing.is_none() {
        return Ok(gate);
    }
    let decisions: Vec<Option<bool>> = rows.iter().map(|r| forcing.decide(site, *r)).collect();
    if decisions.iter().all(Option::is_none) {
        return Ok(gate);
    }
    let keep = decisions.iter().map(|d| if d.is_some() { 0.0 } else { 1.0 }).collect();
    let forced = decisions
        .iter()
        .map(|d| match d {
            Some(true) => 1.0,
            _ => 0.0,
        })
        .collect();
    let kept = g.mul_const(gate, keep)?;
    let forced = g.constant(Tensor::new(vec![rows.len(), 1], forced)?);
    g.add(kept, forced)
}

/// `residual + gate ⊙ branch` with one gate value per row.
pub fn apply_gate(g: &mut Graph, gate: Var, branch: Var, residual: Var) -> Result<Var> {
    if g.value(branch).shape() != g.value(residual).shape() {
        return Err(CctError::dim(format!(
            "apply_gate: branch {:?} and residual {:?} differ",
            g.value(branch).shape(),
            g.value(residual).shape()
        )));
    }
    let gated = g.mul_col(branch, gate)?;
    g.add(residual, gated)
}

/// A single gate evaluation with the cost of the sub-network it controls.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub value: f64,
    pub active: bool,
    pub cost: f64,
}

impl GateDecision {
    pub fn from_logit(logit: f64, cost: f64) -> Self {
        GateDecision {
            value: kernels::sigmoid(logit),
            active: is_active(logit),
            cost,
        }
    }
}
