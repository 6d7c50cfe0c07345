//! Gating units: `Z = (R·X1 + bias) ⊙ X2` over channel halves.
//!
//! Positional units build `R` from a relative-position dictionary and add one
//! stabilizer scalar per channel group. Dense baselines learn `R` directly
//! (shared by all channels) and add one bias per token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rpe::{relation_matrix, RelPosKind, RelationIndexCache, Window};
use crate::tensor::init::{trunc_normal, SeededRng};
use crate::tensor::{Tape, Tensor, Var};

pub const DICT_INIT_STD: f64 = 0.02;
pub const DENSE_INIT_STD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnitKind {
    /// Positional, mixes frames at each spatial site.
    PoTGU,
    /// Positional, mixes spatial sites within each frame.
    PoSGU,
    /// Positional, mixes all positions of the window jointly.
    PoSTGU,
    /// Dense, mixes all positions of the window jointly.
    SGU,
    /// Dense, mixes frames at each spatial site.
    TGU,
}

impl UnitKind {
    pub fn is_positional(self) -> bool {
        matches!(self, UnitKind::PoTGU | UnitKind::PoSGU | UnitKind::PoSTGU)
    }

    pub fn is_temporal(self) -> bool {
        matches!(self, UnitKind::PoTGU | UnitKind::TGU)
    }

    /// Dictionary geometry, for positional kinds.
    pub fn rel_kind(self) -> Option<RelPosKind> {
        match self {
            UnitKind::PoTGU => Some(RelPosKind::Temporal),
            UnitKind::PoSGU => Some(RelPosKind::Spatial),
            UnitKind::PoSTGU => Some(RelPosKind::SpatioTemporal),
            UnitKind::SGU | UnitKind::TGU => None,
        }
    }

    /// `(outer, tokens, inner)` view of `[batch, t, h, w, C]` for mixing.
    pub fn mix_view(self, batch: usize, window: Window) -> (usize, usize, usize) {
        let (t, hw) = (window.t, window.h * window.w);
        match self {
            UnitKind::PoTGU | UnitKind::TGU => (batch, t, hw),
            UnitKind::PoSGU => (batch * t, hw, 1),
            UnitKind::PoSTGU | UnitKind::SGU => (batch, t * hw, 1),
        }
    }

    /// Number of positions one relation matrix spans.
    pub fn tokens(self, window: Window) -> usize {
        self.mix_view(1, window).1
    }
}

/// Static description of one gating unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatingUnitSpec {
    pub kind: UnitKind,
    pub window: Window,
    pub groups: usize,
    pub in_channels: usize,
}

impl GatingUnitSpec {
    pub fn new(kind: UnitKind, window: Window, groups: usize, in_channels: usize) -> Result<Self> {
        let spec = Self { kind, window, groups, in_channels };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window.tokens() == 0 {
            return Err(Error::Invalid(format!("empty window {}", self.window)));
        }
        if self.groups == 0 || self.in_channels == 0 || !self.in_channels.is_multiple_of(2 * self.groups) {
            return Err(Error::Invalid(format!(
                "{:?}: {} channels cannot be halved into {} groups",
                self.kind, self.in_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels / 2
    }

    pub fn tokens(&self) -> usize {
        self.kind.tokens(self.window)
    }

    /// Shapes of `(weight, bias)`: dictionary and stabilizers, or dense
    /// matrix and token biases.
    pub fn param_shapes(&self) -> (Vec<usize>, Vec<usize>) {
        match self.kind.rel_kind() {
            Some(rel) => (rel.table_shape(self.window, self.groups), vec![self.groups]),
            None => {
                let n = self.tokens();
                (vec![n, n], vec![n])
            }
        }
    }

    /// Local names of `(weight, bias)` under a unit's parameter prefix.
    pub fn param_names(&self) -> (&'static str, &'static str) {
        if self.kind.is_positional() {
            ("dict", "beta")
        } else {
            ("weight", "bias")
        }
    }

    /// Stored parameter count, stabilizers and token biases included.
    pub fn param_count(&self) -> usize {
        let (w, b) = self.param_shapes();
        w.iter().product::<usize>() + b.iter().product::<usize>()
    }
}

/// Learnable tensors of one gating unit.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl GatingParams {
    /// Small random relations with unit bias, so `Z ≈ X2` at the start.
    pub fn init(spec: &GatingUnitSpec, rng: &mut SeededRng) -> Self {
        let (ws, bs) = spec.param_shapes();
        let std = if spec.kind.is_positional() { DICT_INIT_STD } else { DENSE_INIT_STD };
        Self {
            weight: trunc_normal(ws, std, rng),
            bias: Tensor::ones(bs),
        }
    }
}

/// Splits the channel axis into equal halves `(X1, X2)`.
pub fn split_halves(v: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = v.channels();
    if !c.is_multiple_of(2) {
        return Err(Error::Invalid(format!("cannot halve {c} channels")));
    }
    Ok((v.slice_channels(0, c / 2)?, v.slice_channels(c / 2, c / 2)?))
}

/// Splits the channel axis into `g` contiguous, order-preserving chunks.
pub fn group_split(x: &Tensor, g: usize) -> Result<Vec<Tensor>> {
    let c = x.channels();
    if g == 0 || !c.is_multiple_of(g) {
        return Err(Error::Invalid(format!("cannot split {c} channels into {g} groups")));
    }
    let cg = c / g;
    (0..g).map(|i| x.slice_channels(i * cg, cg)).collect()
}

/// Runtime window of a `[batch, t, h, w, C]` tensor.
pub fn window_of(shape: &[usize]) -> Result<Window> {
    match shape {
        [_, t, h, w, _] => Ok(Window::new(*t, *h, *w)),
        other => Err(Error::shape("gating", format!("expected [batch, t, h, w, C], got {other:?}"))),
    }
}

/// Differentiable gating unit on `v[batch, t, h, w, C]`.
///
/// Positional units accept any runtime window inside `spec.window` and read
/// the centered part of their dictionary; dense units need an exact match.
pub fn gate(
    tape: &mut Tape,
    spec: &GatingUnitSpec,
    weight: Var,
    bias: Var,
    v: Var,
    cache: &mut RelationIndexCache,
) -> Result<Var> {
    spec.validate()?;
    let runtime = window_of(tape.shape(v))?;
    let batch = tape.shape(v)[0];
    if tape.value(v).channels() != spec.in_channels {
        return Err(Error::shape(
            "gating",
            format!("{} channels for a {}-channel unit", tape.value(v).channels(), spec.in_channels),
        ));
    }
    let (ws, bs) = spec.param_shapes();
    if tape.shape(weight) != ws || tape.shape(bias) != bs {
        return Err(Error::shape(
            "gating",
            format!("params {:?}/{:?}, expected {ws:?}/{bs:?}", tape.shape(weight), tape.shape(bias)),
        ));
    }
    let half = spec.out_channels();
    let x1 = tape.slice_channels(v, 0, half)?;
    let x2 = tape.slice_channels(v, half, half)?;
    let (outer, tokens, inner) = spec.kind.mix_view(batch, runtime);
    let mixed = match spec.kind.rel_kind() {
        Some(rel) => {
            let r = relation_matrix(tape, weight, rel, spec.window, runtime, cache)?;
            let m = tape.grouped_mix(x1, r, outer, tokens, inner)?;
            tape.add_group_bias(m, bias)?
        }
        None => {
            if spec.kind.tokens(runtime) != spec.tokens() {
                return Err(Error::shape(
                    "gating",
                    format!("dense {:?} sized for window {} got {runtime}", spec.kind, spec.window),
                ));
            }
            let r = tape.reshape(weight, [1, tokens, tokens])?;
            let m = tape.grouped_mix(x1, r, outer, tokens, inner)?;
            tape.add_token_bias(m, bias, outer, tokens, inner)?
        }
    };
    tape.hadamard(mixed, x2)
}

/// Inference-only gating on `[t, h, w, C]` or `[batch, t, h, w, C]`.
pub fn gate_forward(spec: &GatingUnitSpec, params: &GatingParams, v: &Tensor) -> Result<Tensor> {
    let batched = match v.shape() {
        [t, h, w, c] => v.reshape([1, *t, *h, *w, *c])?,
        _ => v.clone(),
    };
    let mut tape = Tape::new();
    let mut cache = RelationIndexCache::default();
    let w = tape.constant(params.weight.clone());
    let b = tape.constant(params.bias.clone());
    let x = tape.constant(batched);
    let z = gate(&mut tape, spec, w, b, x, &mut cache)?;
    let mut out_shape = v.shape().to_vec();
    *out_shape.last_mut().expect("non-empty shape") = spec.out_channels();
    tape.value(z).reshape(out_shape)
}
