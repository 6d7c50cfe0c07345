//! Closed-form parameter and FLOP counts, computed from a config alone.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockSpec, BlockVariant};
use crate::error::Result;
use crate::gating::{GatingUnitSpec, UnitKind};
use crate::network::{patch_channels, InputShape, ModelConfig, StageLayout};
use crate::rpe::{RelPosKind, Window};

/// Which parameters are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Dictionaries and dense relations only: no stabilizers, no token biases.
    RelationOnly,
    /// Everything stored.
    Stored,
    /// Dense units with their token biases, positional units without
    /// stabilizers: how the unit-level comparison quotes both families.
    Comparison,
}

/// Whether one multiply-accumulate counts as one or two FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacConvention {
    Mac,
    #[serde(rename = "2mac")]
    TwoMac,
}

impl MacConvention {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mac" => Some(MacConvention::Mac),
            "2mac" => Some(MacConvention::TwoMac),
            _ => None,
        }
    }

    fn factor(self) -> f64 {
        match self {
            MacConvention::Mac => 1.0,
            MacConvention::TwoMac => 2.0,
        }
    }
}

pub fn count_unit_params(spec: &GatingUnitSpec, convention: Convention) -> usize {
    let extra = |n| match convention {
        Convention::Stored => n,
        Convention::Comparison if !spec.kind.is_positional() => n,
        _ => 0,
    };
    let (t, h, w) = (spec.window.t, spec.window.h, spec.window.w);
    let g = spec.groups;
    match spec.kind {
        UnitKind::PoTGU => g * (2 * t - 1) + extra(g),
        UnitKind::PoSGU => g * (2 * h - 1) * (2 * w - 1) + extra(g),
        UnitKind::PoSTGU => g * (2 * t - 1) * (2 * h - 1) * (2 * w - 1) + extra(g),
        UnitKind::SGU => {
            let n = t * h * w;
            n * n + extra(n)
        }
        UnitKind::TGU => t * t + extra(t),
    }
}

/// Parameters of one block, split by kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCount {
    pub fc: usize,
    pub relation: usize,
    pub norm: usize,
}

impl BlockCount {
    pub fn total(&self) -> usize {
        self.fc + self.relation + self.norm
    }

    fn add(&mut self, o: BlockCount) {
        self.fc += o.fc;
        self.relation += o.relation;
        self.norm += o.norm;
    }
}

fn fc(cin: usize, cout: usize) -> usize {
    cin * cout + cout
}

pub fn count_block_params(spec: &BlockSpec, convention: Convention) -> Result<BlockCount> {
    spec.validate()?;
    let c = spec.channels;
    let e = spec.expansion * c;
    let unit = |kind, width| GatingUnitSpec::new(kind, spec.window, spec.groups, width);
    let module = |kind| -> Result<BlockCount> {
        Ok(BlockCount {
            fc: fc(c, e) + fc(e / 2, c),
            relation: count_unit_params(&unit(kind, e)?, convention),
            norm: 2 * c,
        })
    };
    let (t, s, j) = (spec.family.temporal(), spec.family.spatial(), spec.family.joint());
    let mut total = BlockCount::default();
    match spec.variant {
        BlockVariant::CascadeTS | BlockVariant::CascadeST | BlockVariant::ParallelV1 => {
            total.add(module(t)?);
            total.add(module(s)?);
        }
        BlockVariant::Joint => total.add(module(j)?),
        BlockVariant::TemporalOnly => total.add(module(t)?),
        BlockVariant::SpatialOnly => total.add(module(s)?),
        BlockVariant::ParallelV2 | BlockVariant::ParallelV3 | BlockVariant::ParallelV4 => {
            let hidden = if spec.variant == BlockVariant::ParallelV2 { 2 * e } else { e };
            let fc2_in = if spec.variant == BlockVariant::ParallelV4 { e / 2 } else { e };
            total.fc = fc(c, hidden) + fc(fc2_in, c);
            total.relation =
                count_unit_params(&unit(t, e)?, convention) + count_unit_params(&unit(s, e)?, convention);
            total.norm = 2 * c;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCount {
    pub downsample: usize,
    pub blocks: BlockCount,
}

impl StageCount {
    pub fn total(&self) -> usize {
        self.downsample + self.blocks.total()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountReport {
    pub convention: Convention,
    pub embedding: usize,
    pub stages: Vec<StageCount>,
    pub head: usize,
    pub total: usize,
}

pub fn count_model_params(config: &ModelConfig, convention: Convention) -> Result<CountReport> {
    config.validate()?;
    let embedding = patch_channels(config.patch_version, config.channels[0])
        .iter()
        .zip(config.patch_version.convs())
        .map(|(&(cin, cout), &(k, _))| k * k * cin * cout + cout + 2 * cout)
        .sum();
    let mut stages = Vec::with_capacity(config.stages());
    for s in 0..config.stages() {
        let downsample = if s > 0 {
            let (cin, cout) = (config.channels[s - 1], config.channels[s]);
            9 * cin * cout + cout + 2 * cout
        } else {
            0
        };
        let per_block = count_block_params(&config.block_spec(s, 0.0), convention)?;
        let blocks = BlockCount {
            fc: per_block.fc * config.depths[s],
            relation: per_block.relation * config.depths[s],
            norm: per_block.norm * config.depths[s],
        };
        stages.push(StageCount { downsample, blocks });
    }
    let c = *config.channels.last().expect("validated");
    let head = 2 * c + fc(c, config.num_classes);
    let total = embedding + stages.iter().map(StageCount::total).sum::<usize>() + head;
    Ok(CountReport { convention, embedding, stages, head, total })
}

/// Multiply-accumulates and element-wise operations of one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopCount {
    /// Convolutions and FC layers.
    pub dense_macs: f64,
    pub temporal_mix_macs: f64,
    pub spatial_mix_macs: f64,
    pub joint_mix_macs: f64,
    /// Norms, activations, gating products, bias and residual adds.
    pub elementwise: f64,
}

impl FlopCount {
    pub fn macs(&self) -> f64 {
        self.dense_macs + self.temporal_mix_macs + self.spatial_mix_macs + self.joint_mix_macs
    }

    pub fn flops(&self, convention: MacConvention) -> f64 {
        convention.factor() * self.macs() + self.elementwise
    }

    fn add(&mut self, o: FlopCount) {
        self.dense_macs += o.dense_macs;
        self.temporal_mix_macs += o.temporal_mix_macs;
        self.spatial_mix_macs += o.spatial_mix_macs;
        self.joint_mix_macs += o.joint_mix_macs;
        self.elementwise += o.elementwise;
    }

    fn scaled(mut self, k: f64) -> FlopCount {
        self.dense_macs *= k;
        self.temporal_mix_macs *= k;
        self.spatial_mix_macs *= k;
        self.joint_mix_macs *= k;
        self.elementwise *= k;
        self
    }
}

/// Per-token cost of a LayerNorm over `c` channels (mean, variance,
/// normalize, affine).
fn norm_ops(c: usize) -> f64 {
    5.0 * c as f64
}

fn fc_cost(tokens: f64, cin: usize, cout: usize) -> FlopCount {
    FlopCount {
        dense_macs: tokens * (cin * cout) as f64,
        elementwise: tokens * cout as f64,
        ..Default::default()
    }
}

/// Cost of a gating unit over `tokens` positions tiled by `window`.
fn unit_cost(spec: &GatingUnitSpec, tokens: f64, window: Window) -> FlopCount {
    let half = spec.out_channels() as f64;
    let n = spec.kind.tokens(window) as f64;
    let mix = tokens * n * half;
    let mut f = FlopCount { elementwise: 2.0 * tokens * half, ..Default::default() };
    if spec.kind.rel_kind() == Some(RelPosKind::SpatioTemporal) || spec.kind == UnitKind::SGU {
        f.joint_mix_macs = mix;
    } else if spec.kind.is_temporal() {
        f.temporal_mix_macs = mix;
    } else {
        f.spatial_mix_macs = mix;
    }
    f
}

pub fn block_flops(spec: &BlockSpec, layout: &StageLayout) -> Result<FlopCount> {
    spec.validate()?;
    let tokens = layout.extent.tokens() as f64;
    let c = spec.channels;
    let e = spec.expansion * c;
    let unit = |kind| GatingUnitSpec::new(kind, spec.window, spec.groups, e);
    let module = |kind| -> Result<FlopCount> {
        let mut f = FlopCount { elementwise: tokens * (norm_ops(c) + e as f64 + c as f64), ..Default::default() };
        f.add(fc_cost(tokens, c, e));
        f.add(unit_cost(&unit(kind)?, tokens, layout.window));
        f.add(fc_cost(tokens, e / 2, c));
        Ok(f)
    };
    let (t, s, j) = (spec.family.temporal(), spec.family.spatial(), spec.family.joint());
    let mut total = FlopCount::default();
    match spec.variant {
        BlockVariant::CascadeTS | BlockVariant::CascadeST | BlockVariant::ParallelV1 => {
            total.add(module(t)?);
            total.add(module(s)?);
        }
        BlockVariant::Joint => total.add(module(j)?),
        BlockVariant::TemporalOnly => total.add(module(t)?),
        BlockVariant::SpatialOnly => total.add(module(s)?),
        BlockVariant::ParallelV2 | BlockVariant::ParallelV3 | BlockVariant::ParallelV4 => {
            let hidden = if spec.variant == BlockVariant::ParallelV2 { 2 * e } else { e };
            let fc2_in = if spec.variant == BlockVariant::ParallelV4 { e / 2 } else { e };
            let combine = if spec.variant == BlockVariant::ParallelV4 { (e / 2) as f64 } else { 0.0 };
            total.elementwise = tokens * (norm_ops(c) + hidden as f64 + combine + c as f64);
            total.add(fc_cost(tokens, c, hidden));
            total.add(unit_cost(&unit(t)?, tokens, layout.window));
            total.add(unit_cost(&unit(s)?, tokens, layout.window));
            total.add(fc_cost(tokens, fc2_in, c));
        }
    }
    Ok(total)
}

fn conv_cost(outputs: f64, k: usize, cin: usize, cout: usize) -> FlopCount {
    FlopCount {
        dense_macs: outputs * (k * k * cin * cout) as f64,
        elementwise: outputs * cout as f64,
        ..Default::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFlops {
    pub extent: Window,
    pub channels: usize,
    pub downsample: FlopCount,
    pub blocks: FlopCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub input: InputShape,
    pub embedding: FlopCount,
    pub stages: Vec<StageFlops>,
    pub head: FlopCount,
    pub total: FlopCount,
}

impl FlopReport {
    pub fn gflops(&self, convention: MacConvention) -> f64 {
        self.total.flops(convention) / 1e9
    }
}

/// Per-clip cost of a forward pass at `input`.
pub fn count_model_flops(config: &ModelConfig, input: InputShape) -> Result<FlopReport> {
    config.validate()?;
    let layouts = config.layouts_for(input)?;
    let frames = input.frames as f64;
    let mut embedding = FlopCount::default();
    let (mut h, mut w) = (input.height, input.width);
    let convs = config.patch_version.convs();
    for (i, (&(k, stride), &(cin, cout))) in
        convs.iter().zip(&patch_channels(config.patch_version, config.channels[0])).enumerate()
    {
        h = crate::tensor::conv_output_extent(h, k, stride);
        w = crate::tensor::conv_output_extent(w, k, stride);
        let outputs = frames * (h * w) as f64;
        embedding.add(conv_cost(outputs, k, cin, cout));
        embedding.elementwise += outputs * cout as f64 * if i > 0 { 3.0 } else { 2.0 };
    }
    let mut stages = Vec::with_capacity(layouts.len());
    let mut total = embedding;
    for (s, layout) in layouts.iter().enumerate() {
        let tokens = layout.extent.tokens() as f64;
        let downsample = if s > 0 {
            let mut d = conv_cost(tokens, 3, config.channels[s - 1], config.channels[s]);
            d.elementwise += tokens * norm_ops(config.channels[s]);
            d
        } else {
            FlopCount::default()
        };
        let blocks = block_flops(&config.block_spec(s, 0.0), layout)?.scaled(config.depths[s] as f64);
        total.add(downsample);
        total.add(blocks);
        stages.push(StageFlops { extent: layout.extent, channels: layout.channels, downsample, blocks });
    }
    let last = layouts.last().expect("validated");
    let c = last.channels;
    let mut head = FlopCount { elementwise: last.extent.tokens() as f64 * (norm_ops(c) + 1.0), ..Default::default() };
    head.add(fc_cost(1.0, c, config.num_classes));
    total.add(head);
    Ok(FlopReport { input, embedding, stages, head, total })
}

/// Both reports plus the rendered per-stage table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ModelConfig,
    pub params: CountReport,
    pub params_relation_only: CountReport,
    pub flops: FlopReport,
    pub gflops_mac: f64,
    pub gflops_2mac: f64,
}

pub fn summarize(config: &ModelConfig) -> Result<Summary> {
    let flops = count_model_flops(config, config.input)?;
    Ok(Summary {
        config: config.clone(),
        params: count_model_params(config, Convention::Stored)?,
        params_relation_only: count_model_params(config, Convention::RelationOnly)?,
        gflops_mac: flops.gflops(MacConvention::Mac),
        gflops_2mac: flops.gflops(MacConvention::TwoMac),
        flops,
    })
}

impl Summary {
    pub fn render(&self, convention: MacConvention) -> String {
        Table { summary: self, convention }.to_string()
    }
}

struct Table<'a> {
    summary: &'a Summary,
    convention: MacConvention,
}

impl fmt::Display for Table<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.summary;
        let g = |c: &FlopCount| c.flops(self.convention) / 1e9;
        writeln!(f, "{:<10} {:>16} {:>12} {:>10}", "component", "feature", "params", "GFLOPs")?;
        let i = s.flops.input;
        writeln!(
            f,
            "{:<10} {:>16} {:>12} {:>10.3}",
            "embed",
            format!("{}x{}x{}x{}", s.config.frames(), i.height / 4, i.width / 4, s.config.channels[0]),
            s.params.embedding,
            g(&s.flops.embedding)
        )?;
        for (k, (pc, fc)) in s.params.stages.iter().zip(&s.flops.stages).enumerate() {
            let e = fc.extent;
            let mut cost = fc.downsample;
            cost.add(fc.blocks);
            writeln!(
                f,
                "{:<10} {:>16} {:>12} {:>10.3}",
                format!("stage{}", k + 1),
                format!("{}x{}x{}x{}", e.t, e.h, e.w, fc.channels),
                pc.total(),
                g(&cost)
            )?;
        }
        writeln!(
            f,
            "{:<10} {:>16} {:>12} {:>10.3}",
            "head",
            s.config.num_classes,
            s.params.head,
            g(&s.flops.head)
        )?;
        writeln!(
            f,
            "{:<10} {:>16} {:>12} {:>10.3}",
            "total",
            "",
            s.params.total,
            s.flops.gflops(self.convention)
        )?;
        writeln!(
            f,
            "params {:.2}M stored, {:.2}M without stabilizers/token biases",
            s.params.total as f64 / 1e6,
            s.params_relation_only.total as f64 / 1e6
        )
    }
}
