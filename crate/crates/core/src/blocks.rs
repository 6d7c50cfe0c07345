//! Gated MLP modules and their spatio-temporal block compositions.
//!
//! A module is `y = x + DropPath(FC₂(Unit(GELU(FC₁(LN(x))))))`. Blocks
//! combine a temporal and a spatial module in cascade or in parallel, or use a
//! single joint module. Block inputs are windows `[rows, t, h, w, C]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{gate, GatingUnitSpec, UnitKind};
use crate::params::{mark_temporal, Binder, ParamSpec, Role};
use crate::rpe::{RelationIndexCache, Window};
use crate::tensor::init::{seeded, SeededRng};
use crate::tensor::{Mode, Tape, Tensor, Var, LAYER_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    /// Temporal module, then spatial module.
    CascadeTS,
    /// Spatial module, then temporal module.
    CascadeST,
    /// Two full modules on the same input, summed.
    ParallelV1,
    /// Shared wide expansion, split between the units, concatenated.
    ParallelV2,
    /// Shared expansion fed to both units, concatenated.
    ParallelV3,
    /// Shared expansion fed to both units, added.
    ParallelV4,
    /// One module with a joint spatio-temporal unit.
    Joint,
    TemporalOnly,
    SpatialOnly,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 9] = [
        BlockVariant::CascadeTS,
        BlockVariant::CascadeST,
        BlockVariant::ParallelV1,
        BlockVariant::ParallelV2,
        BlockVariant::ParallelV3,
        BlockVariant::ParallelV4,
        BlockVariant::Joint,
        BlockVariant::TemporalOnly,
        BlockVariant::SpatialOnly,
    ];

    fn is_shared_expansion(self) -> bool {
        matches!(self, BlockVariant::ParallelV2 | BlockVariant::ParallelV3 | BlockVariant::ParallelV4)
    }
}

/// Positional units, or the dense gMLP baselines in their place.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitFamily {
    #[default]
    Positional,
    Dense,
}

impl UnitFamily {
    pub fn temporal(self) -> UnitKind {
        match self {
            UnitFamily::Positional => UnitKind::PoTGU,
            UnitFamily::Dense => UnitKind::TGU,
        }
    }

    /// The dense family has no per-frame unit; its spatial slot mixes the
    /// whole window.
    pub fn spatial(self) -> UnitKind {
        match self {
            UnitFamily::Positional => UnitKind::PoSGU,
            UnitFamily::Dense => UnitKind::SGU,
        }
    }

    pub fn joint(self) -> UnitKind {
        match self {
            UnitFamily::Positional => UnitKind::PoSTGU,
            UnitFamily::Dense => UnitKind::SGU,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosModuleSpec {
    pub unit: GatingUnitSpec,
    pub channels: usize,
    pub expansion: usize,
}

impl PosModuleSpec {
    pub fn new(kind: UnitKind, channels: usize, expansion: usize, window: Window, groups: usize) -> Result<Self> {
        let unit = GatingUnitSpec::new(kind, window, groups, channels * expansion)?;
        Ok(Self { unit, channels, expansion })
    }

    pub fn hidden(&self) -> usize {
        self.channels * self.expansion
    }

    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let (c, e) = (self.channels, self.hidden());
        let mut specs = norm_specs(&format!("{prefix}.norm"), c);
        specs.extend(fc_specs(&format!("{prefix}.fc1"), c, e));
        specs.extend(unit_specs(&format!("{prefix}.unit"), &self.unit));
        specs.extend(fc_specs(&format!("{prefix}.fc2"), e / 2, c));
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs("m").iter().map(ParamSpec::numel).sum()
    }
}

pub fn norm_specs(prefix: &str, c: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.weight"), [c], Role::NormGain),
        ParamSpec::new(format!("{prefix}.bias"), [c], Role::NormBias),
    ]
}

pub fn fc_specs(prefix: &str, cin: usize, cout: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.weight"), [cin, cout], Role::Weight),
        ParamSpec::new(format!("{prefix}.bias"), [cout], Role::Bias),
    ]
}

pub fn unit_specs(prefix: &str, unit: &GatingUnitSpec) -> Vec<ParamSpec> {
    let (ws, bs) = unit.param_shapes();
    let (wn, bn) = unit.param_names();
    let (wr, br) = if unit.kind.is_positional() {
        (Role::Dictionary, Role::Stabilizer)
    } else {
        (Role::DenseRelation, Role::TokenBias)
    };
    vec![
        ParamSpec::new(format!("{prefix}.{wn}"), ws, wr),
        ParamSpec::new(format!("{prefix}.{bn}"), bs, br),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub variant: BlockVariant,
    pub family: UnitFamily,
    pub channels: usize,
    pub expansion: usize,
    /// Dictionary window; runtime windows may be smaller.
    pub window: Window,
    pub groups: usize,
    pub drop_path_rate: f64,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_path_rate) {
            return Err(Error::Invalid(format!("drop path rate {} outside [0, 1]", self.drop_path_rate)));
        }
        self.modules().map(|_| ())
    }

    fn module(&self, kind: UnitKind) -> Result<PosModuleSpec> {
        PosModuleSpec::new(kind, self.channels, self.expansion, self.window, self.groups)
    }

    /// Expansion width of the shared FC in the V2–V4 variants.
    pub fn shared_hidden(&self) -> usize {
        match self.variant {
            BlockVariant::ParallelV2 => 2 * self.expansion * self.channels,
            _ => self.expansion * self.channels,
        }
    }

    /// `(temporal, spatial)` units of the shared-expansion variants.
    pub fn shared_units(&self) -> Result<(GatingUnitSpec, GatingUnitSpec)> {
        let width = self.expansion * self.channels;
        Ok((
            GatingUnitSpec::new(self.family.temporal(), self.window, self.groups, width)?,
            GatingUnitSpec::new(self.family.spatial(), self.window, self.groups, width)?,
        ))
    }

    /// Named full modules, in evaluation order; empty for V2–V4.
    pub fn modules(&self) -> Result<Vec<(&'static str, PosModuleSpec)>> {
        let t = || self.module(self.family.temporal());
        let s = || self.module(self.family.spatial());
        Ok(match self.variant {
            BlockVariant::CascadeTS | BlockVariant::ParallelV1 => vec![("temporal", t()?), ("spatial", s()?)],
            BlockVariant::CascadeST => vec![("spatial", s()?), ("temporal", t()?)],
            BlockVariant::Joint => vec![("joint", self.module(self.family.joint())?)],
            BlockVariant::TemporalOnly => vec![("temporal", t()?)],
            BlockVariant::SpatialOnly => vec![("spatial", s()?)],
            _ => {
                self.shared_units()?;
                vec![]
            }
        })
    }

    pub fn param_specs(&self, prefix: &str) -> Result<Vec<ParamSpec>> {
        if !self.variant.is_shared_expansion() {
            let mut specs = Vec::new();
            for (name, m) in self.modules()? {
                let s = m.param_specs(&format!("{prefix}.{name}"));
                // The joint unit also spans time, so image mode drops it too.
                specs.extend(if name == "spatial" { s } else { mark_temporal(s) });
            }
            return Ok(specs);
        }
        let (c, e) = (self.channels, self.shared_hidden());
        let (tu, su) = self.shared_units()?;
        let fc2_in = match self.variant {
            BlockVariant::ParallelV4 => su.out_channels(),
            _ => tu.out_channels() + su.out_channels(),
        };
        let mut specs = norm_specs(&format!("{prefix}.norm"), c);
        specs.extend(fc_specs(&format!("{prefix}.fc1"), c, e));
        specs.extend(mark_temporal(unit_specs(&format!("{prefix}.temporal_unit"), &tu)));
        specs.extend(unit_specs(&format!("{prefix}.spatial_unit"), &su));
        specs.extend(fc_specs(&format!("{prefix}.fc2"), fc2_in, c));
        Ok(specs)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.param_specs("b")?.iter().map(ParamSpec::numel).sum())
    }
}

/// Mutable state threaded through a forward pass.
#[derive(Debug)]
pub struct ForwardCtx {
    pub mode: Mode,
    /// Temporal branches replaced by identity.
    pub image_mode: bool,
    /// Window rows per sample, for per-sample drop path.
    pub windows_per_sample: usize,
    pub drop_rng: SeededRng,
    pub cache: RelationIndexCache,
}

impl ForwardCtx {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            image_mode: false,
            windows_per_sample: 1,
            drop_rng: seeded(seed),
            cache: RelationIndexCache::default(),
        }
    }
}

/// Whole-branch stochastic depth: each sample's branch is zeroed with
/// probability `rate`, survivors scaled by `1/(1-rate)`.
pub fn drop_path(tape: &mut Tape, branch: Var, rate: f64, ctx: &mut ForwardCtx) -> Result<Var> {
    if ctx.mode == Mode::Eval || rate == 0.0 {
        return Ok(branch);
    }
    let rows = tape.shape(branch)[0];
    let per = ctx.windows_per_sample;
    if per == 0 || !rows.is_multiple_of(per) {
        return Err(Error::shape("drop_path", format!("{rows} rows for {per} windows per sample")));
    }
    let keep = 1.0 - rate;
    let mut factors = Vec::with_capacity(rows);
    for _ in 0..rows / per {
        let f = if keep > 0.0 && ctx.drop_rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
        factors.extend(std::iter::repeat_n(f, per));
    }
    tape.scale_rows(branch, factors)
}

fn layer_norm(tape: &mut Tape, b: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let g = b.var(tape, &format!("{prefix}.weight"))?;
    let beta = b.var(tape, &format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, beta, LAYER_NORM_EPS)
}

fn fc(tape: &mut Tape, b: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let w = b.var(tape, &format!("{prefix}.weight"))?;
    let bias = b.var(tape, &format!("{prefix}.bias"))?;
    tape.linear(x, w, Some(bias))
}

fn unit(
    tape: &mut Tape,
    b: &mut Binder,
    prefix: &str,
    spec: &GatingUnitSpec,
    x: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let (wn, bn) = spec.param_names();
    let w = b.var(tape, &format!("{prefix}.{wn}"))?;
    let bias = b.var(tape, &format!("{prefix}.{bn}"))?;
    gate(tape, spec, w, bias, x, &mut ctx.cache)
}

/// Residual branch of a module, before drop path.
pub fn module_branch(
    tape: &mut Tape,
    b: &mut Binder,
    prefix: &str,
    spec: &PosModuleSpec,
    x: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let h = layer_norm(tape, b, &format!("{prefix}.norm"), x)?;
    let h = fc(tape, b, &format!("{prefix}.fc1"), h)?;
    let h = tape.gelu(h)?;
    let z = unit(tape, b, &format!("{prefix}.unit"), &spec.unit, h, ctx)?;
    fc(tape, b, &format!("{prefix}.fc2"), z)
}

pub fn pos_module_forward(
    tape: &mut Tape,
    b: &mut Binder,
    prefix: &str,
    spec: &PosModuleSpec,
    drop_path_rate: f64,
    x: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let branch = module_branch(tape, b, prefix, spec, x, ctx)?;
    let branch = drop_path(tape, branch, drop_path_rate, ctx)?;
    tape.add(x, branch)
}

pub fn block_forward(
    tape: &mut Tape,
    b: &mut Binder,
    prefix: &str,
    spec: &BlockSpec,
    x: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let rate = spec.drop_path_rate;
    match spec.variant {
        BlockVariant::ParallelV1 => {
            let mut y = x;
            for (name, m) in spec.modules()? {
                if ctx.image_mode && name == "temporal" {
                    continue;
                }
                let branch = module_branch(tape, b, &format!("{prefix}.{name}"), &m, x, ctx)?;
                let branch = drop_path(tape, branch, rate, ctx)?;
                y = tape.add(y, branch)?;
            }
            Ok(y)
        }
        BlockVariant::ParallelV2 | BlockVariant::ParallelV3 | BlockVariant::ParallelV4 => {
            shared_forward(tape, b, prefix, spec, x, ctx)
        }
        _ => {
            let mut y = x;
            for (name, m) in spec.modules()? {
                if ctx.image_mode && name != "spatial" {
                    continue;
                }
                y = pos_module_forward(tape, b, &format!("{prefix}.{name}"), &m, rate, y, ctx)?;
            }
            Ok(y)
        }
    }
}

fn shared_forward(
    tape: &mut Tape,
    b: &mut Binder,
    prefix: &str,
    spec: &BlockSpec,
    x: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let (tu, su) = spec.shared_units()?;
    let h = layer_norm(tape, b, &format!("{prefix}.norm"), x)?;
    let h = fc(tape, b, &format!("{prefix}.fc1"), h)?;
    let h = tape.gelu(h)?;
    let (ht, hs) = if spec.variant == BlockVariant::ParallelV2 {
        let half = tu.in_channels;
        (tape.slice_channels(h, 0, half)?, tape.slice_channels(h, half, half)?)
    } else {
        (h, h)
    };
    let zs = unit(tape, b, &format!("{prefix}.spatial_unit"), &su, hs, ctx)?;
    let zt = if ctx.image_mode {
        None
    } else {
        Some(unit(tape, b, &format!("{prefix}.temporal_unit"), &tu, ht, ctx)?)
    };
    let z = match (spec.variant, zt) {
        (BlockVariant::ParallelV4, Some(zt)) => tape.add(zt, zs)?,
        (BlockVariant::ParallelV4, None) => zs,
        (_, Some(zt)) => tape.concat_channels(&[zt, zs])?,
        (_, None) => {
            let zeros = tape.constant(Tensor::zeros(tape.shape(zs).to_vec()));
            tape.concat_channels(&[zeros, zs])?
        }
    };
    let branch = fc(tape, b, &format!("{prefix}.fc2"), z)?;
    let branch = drop_path(tape, branch, spec.drop_path_rate, ctx)?;
    tape.add(x, branch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::init::trunc_normal;

    fn spec(variant: BlockVariant) -> BlockSpec {
        BlockSpec {
            variant,
            family: UnitFamily::Positional,
            channels: 8,
            expansion: 2,
            window: Window::new(2, 2, 2),
            groups: 2,
            drop_path_rate: 0.0,
        }
    }

    fn run(spec: &BlockSpec, store: &ParamStore, x: &Tensor, ctx: &mut ForwardCtx) -> Tensor {
        let mut tape = Tape::new();
        let mut b = Binder::new(store, false);
        let xv = tape.constant(x.clone());
        let y = block_forward(&mut tape, &mut b, "blk", spec, xv, ctx).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn shapes_preserved_for_every_variant() {
        let x = trunc_normal([3, 2, 2, 2, 8], 1.0, &mut seeded(1));
        for v in BlockVariant::ALL {
            let s = spec(v);
            let store = ParamStore::init(s.param_specs("blk").unwrap(), &mut seeded(2)).unwrap();
            let y = run(&s, &store, &x, &mut ForwardCtx::new(Mode::Train, 0));
            assert_eq!(y.shape(), x.shape(), "{v:?}");
        }
    }

    #[test]
    fn zero_contract_is_identity() {
        let x = trunc_normal([2, 2, 2, 2, 8], 1.0, &mut seeded(1));
        for v in BlockVariant::ALL {
            let s = spec(v);
            let mut store = ParamStore::init(s.param_specs("blk").unwrap(), &mut seeded(2)).unwrap();
            let names: Vec<String> =
                store.specs().iter().filter(|p| p.name.contains(".fc2.")).map(|p| p.name.clone()).collect();
            for n in names {
                let shape = store.get(&n).unwrap().shape().to_vec();
                store.set(&n, Tensor::zeros(shape)).unwrap();
            }
            assert_eq!(run(&s, &store, &x, &mut ForwardCtx::new(Mode::Train, 0)), x, "{v:?}");
        }
    }

    #[test]
    fn full_drop_path_is_identity() {
        let x = trunc_normal([2, 2, 2, 2, 8], 1.0, &mut seeded(1));
        for v in BlockVariant::ALL {
            let s = BlockSpec { drop_path_rate: 1.0, ..spec(v) };
            let store = ParamStore::init(s.param_specs("blk").unwrap(), &mut seeded(2)).unwrap();
            assert_eq!(run(&s, &store, &x, &mut ForwardCtx::new(Mode::Train, 0)), x, "{v:?}");
        }
    }

    #[test]
    fn drop_path_is_per_sample_and_rescaled() {
        let mut ctx = ForwardCtx::new(Mode::Train, 5);
        ctx.windows_per_sample = 2;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([40, 3]));
        let y = drop_path(&mut tape, x, 0.5, &mut ctx).unwrap();
        let v = tape.value(y).data();
        for s in 0..20 {
            let row = v[s * 6];
            assert!(row == 0.0 || row == 2.0);
            assert!(v[s * 6..s * 6 + 6].iter().all(|&e| e == row));
        }
        assert!(v.contains(&0.0) && v.contains(&2.0));
        ctx.mode = Mode::Eval;
        let z = drop_path(&mut tape, x, 0.5, &mut ctx).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn cascade_and_parallel_counts_match() {
        let counts: Vec<usize> = [BlockVariant::CascadeTS, BlockVariant::CascadeST, BlockVariant::ParallelV1]
            .iter()
            .map(|&v| spec(v).param_count().unwrap())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn variant_ordering_at_stage_one_width() {
        let count = |v| {
            BlockSpec {
                channels: 72,
                groups: 8,
                window: Window::new(16, 14, 14),
                ..spec(v)
            }
            .param_count()
            .unwrap()
        };
        let (v1, v2, v3, v4) = (
            count(BlockVariant::ParallelV1),
            count(BlockVariant::ParallelV2),
            count(BlockVariant::ParallelV3),
            count(BlockVariant::ParallelV4),
        );
        assert!(v4 < v3 && v3 < v2 && v2 <= v1, "{v1} {v2} {v3} {v4}");
        assert!((v1 - v2) as f64 / (v1 as f64) < 0.01);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(BlockSpec { groups: 3, ..spec(BlockVariant::Joint) }.validate().is_err());
        assert!(BlockSpec { drop_path_rate: 1.5, ..spec(BlockVariant::Joint) }.validate().is_err());
    }
}
