use std::collections::BTreeMap;

use crate::blocks::{block_forward, fc_specs, norm_specs, ForwardCtx};
use crate::error::{Error, Result};
use crate::gating::DICT_INIT_STD;
use crate::params::{Binder, ParamSpec, ParamStore, Role};
use crate::rpe::Window;
use crate::tensor::init::seeded;
use crate::tensor::{BatchNormStats, Mode, RunningStats, Tape, Tensor, Var, LAYER_NORM_EPS};

use super::config::{InputShape, ModelConfig, PatchVersion};

/// Batch norm running statistics keyed by layer name.
pub type Buffers = BTreeMap<String, RunningStats>;

fn conv_specs(prefix: &str, k: usize, cin: usize, cout: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.weight"), [k, k, cin, cout], Role::Weight),
        ParamSpec::new(format!("{prefix}.bias"), [cout], Role::Bias),
    ]
}

/// `(in, out)` channels of each patch-embedding conv.
pub fn patch_channels(version: PatchVersion, c1: usize) -> Vec<(usize, usize)> {
    match version {
        PatchVersion::PeV1 => vec![(3, c1)],
        PatchVersion::PeV2 | PatchVersion::PeV3 => vec![(3, c1 / 2), (c1 / 2, c1)],
    }
}

pub fn stage_prefix(stage: usize) -> String {
    format!("stage{}", stage + 1)
}

pub fn block_prefix(stage: usize, block: usize) -> String {
    format!("stage{}.block{}", stage + 1, block + 1)
}

/// Every learnable tensor of a model, in initialization order.
pub fn model_param_specs(config: &ModelConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    let mut specs = Vec::new();
    let chans = patch_channels(config.patch_version, config.channels[0]);
    for (i, (&(k, _), &(cin, cout))) in config.patch_version.convs().iter().zip(&chans).enumerate() {
        specs.extend(conv_specs(&format!("patch_embed.conv{}", i + 1), k, cin, cout));
        specs.extend(norm_specs(&format!("patch_embed.bn{}", i + 1), cout));
    }
    let rates = config.drop_path_rates();
    let mut block_index = 0;
    for s in 0..config.stages() {
        if s > 0 {
            let p = stage_prefix(s);
            specs.extend(conv_specs(&format!("{p}.downsample.conv"), 3, config.channels[s - 1], config.channels[s]));
            specs.extend(norm_specs(&format!("{p}.downsample.norm"), config.channels[s]));
        }
        for b in 0..config.depths[s] {
            let spec = config.block_spec(s, rates[block_index]);
            specs.extend(spec.param_specs(&block_prefix(s, b))?);
            block_index += 1;
        }
    }
    let c = *config.channels.last().expect("validated");
    specs.extend(norm_specs("head.norm", c));
    specs.extend(fc_specs("head.fc", c, config.num_classes));
    Ok(specs)
}

/// Names of the batch norm layers in the patch embedding.
pub fn buffer_names(config: &ModelConfig) -> Vec<(String, usize)> {
    patch_channels(config.patch_version, config.channels[0])
        .iter()
        .enumerate()
        .map(|(i, &(_, cout))| (format!("patch_embed.bn{}", i + 1), cout))
        .collect()
}

/// Spatial patchification: clip `[B, T, H, W, 3]` to `[B, T, H/4, W/4, C1]`.
pub fn patch_embed(
    tape: &mut Tape,
    b: &mut Binder,
    buffers: &mut Buffers,
    config: &ModelConfig,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let mut h = x;
    let convs = config.patch_version.convs();
    for (i, &(_, stride)) in convs.iter().enumerate() {
        if i > 0 {
            h = tape.gelu(h)?;
        }
        let p = format!("patch_embed.conv{}", i + 1);
        let w = b.var(tape, &format!("{p}.weight"))?;
        let bias = b.var(tape, &format!("{p}.bias"))?;
        h = tape.conv2d(h, w, bias, stride)?;
        let bn = format!("patch_embed.bn{}", i + 1);
        let g = b.var(tape, &format!("{bn}.weight"))?;
        let beta = b.var(tape, &format!("{bn}.bias"))?;
        let stats = buffers.get_mut(&bn).ok_or_else(|| Error::MissingParam(bn.clone()))?;
        let stats = match mode {
            Mode::Train => BatchNormStats::Batch(stats),
            Mode::Eval => BatchNormStats::Running(stats),
        };
        h = tape.batch_norm(h, g, beta, stats)?;
    }
    Ok(h)
}

/// Halves the spatial extents and maps to the next stage's width.
pub fn downsample(tape: &mut Tape, b: &mut Binder, stage: usize, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let rank = shape.len();
    if rank < 3 || !shape[rank - 3].is_multiple_of(2) || !shape[rank - 2].is_multiple_of(2) {
        return Err(Error::shape("downsample", format!("odd spatial extents in {shape:?}")));
    }
    let p = format!("{}.downsample", stage_prefix(stage));
    let w = b.var(tape, &format!("{p}.conv.weight"))?;
    let bias = b.var(tape, &format!("{p}.conv.bias"))?;
    let h = tape.conv2d(x, w, bias, 2)?;
    let g = b.var(tape, &format!("{p}.norm.weight"))?;
    let beta = b.var(tape, &format!("{p}.norm.bias"))?;
    tape.layer_norm(h, g, beta, LAYER_NORM_EPS)
}

/// `(split shape, axes)` turning `[B, T, H, W, C]` into window-major order.
fn partition_plan(shape: &[usize], win: Window) -> Result<(Vec<usize>, usize)> {
    let [b, t, h, w, c] = match shape {
        [b, t, h, w, c] => [*b, *t, *h, *w, *c],
        other => return Err(Error::shape("window_partition", format!("expected rank 5, got {other:?}"))),
    };
    if win.t == 0 || win.h == 0 || win.w == 0 || t % win.t != 0 || h % win.h != 0 || w % win.w != 0 {
        return Err(Error::shape("window_partition", format!("window {win} does not tile {t}x{h}x{w}")));
    }
    let (nt, nh, nw) = (t / win.t, h / win.h, w / win.w);
    Ok((vec![b, nt, win.t, nh, win.h, nw, win.w, c], b * nt * nh * nw))
}

const PARTITION_AXES: [usize; 8] = [0, 1, 3, 5, 2, 4, 6, 7];
const UNPARTITION_AXES: [usize; 8] = [0, 1, 4, 2, 5, 3, 6, 7];

/// Splits `[B, T, H, W, C]` into `[B·n, t, h, w, C]` windows, grid row-major.
pub fn window_partition(x: &Tensor, win: Window) -> Result<Tensor> {
    let (split, rows) = partition_plan(x.shape(), win)?;
    let c = x.channels();
    x.reshape(split)?.permute(&PARTITION_AXES)?.reshape([rows, win.t, win.h, win.w, c])
}

/// Inverse of [`window_partition`] for a clip of extents `shape`.
pub fn window_unpartition(windows: &Tensor, shape: &[usize], win: Window) -> Result<Tensor> {
    let (split, _) = partition_plan(shape, win)?;
    let grid = [split[0], split[1], split[3], split[5], split[2], split[4], split[6], split[7]];
    windows.reshape(grid)?.permute(&UNPARTITION_AXES)?.reshape(shape.to_vec())
}

fn tape_partition(tape: &mut Tape, x: Var, win: Window) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (split, rows) = partition_plan(&shape, win)?;
    if rows == shape[0] {
        return Ok(x);
    }
    let v = tape.reshape(x, split)?;
    let v = tape.permute(v, &PARTITION_AXES)?;
    tape.reshape(v, [rows, win.t, win.h, win.w, shape[4]])
}

fn tape_unpartition(tape: &mut Tape, windows: Var, shape: &[usize], win: Window) -> Result<Var> {
    let (split, rows) = partition_plan(shape, win)?;
    if rows == shape[0] {
        return Ok(windows);
    }
    let grid = [split[0], split[1], split[3], split[5], split[2], split[4], split[6], split[7]];
    let v = tape.reshape(windows, grid)?;
    let v = tape.permute(v, &UNPARTITION_AXES)?;
    tape.reshape(v, shape.to_vec())
}

/// Keeps every `stride`-th frame of `[B, T, H, W, C]`.
fn subsample_frames(tape: &mut Tape, x: Var, stride: usize) -> Result<Var> {
    if stride == 1 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let (b, t, frame) = (shape[0], shape[1], shape[2] * shape[3] * shape[4]);
    let kept = t.div_ceil(stride);
    let mut index = Vec::with_capacity(b * kept * frame);
    for bi in 0..b {
        for k in 0..kept {
            let base = (bi * t + k * stride) * frame;
            index.extend(base..base + frame);
        }
    }
    tape.gather(x, std::sync::Arc::new(index), [b, kept, shape[2], shape[3], shape[4]])
}

/// LayerNorm, mean over all positions, linear: `[B, T, H, W, C]` to `[B, K]`.
pub fn classify_head(tape: &mut Tape, b: &mut Binder, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let g = b.var(tape, "head.norm.weight")?;
    let beta = b.var(tape, "head.norm.bias")?;
    let h = tape.layer_norm(x, g, beta, LAYER_NORM_EPS)?;
    let c = shape[shape.len() - 1];
    let tokens = shape[1..shape.len() - 1].iter().product::<usize>();
    let h = tape.reshape(h, [shape[0], tokens, c])?;
    let pooled = tape.mean_tokens(h)?;
    let w = b.var(tape, "head.fc.weight")?;
    let bias = b.var(tape, "head.fc.bias")?;
    tape.linear(pooled, w, Some(bias))
}

/// Feature shapes recorded after each stage of a forward pass.
pub type StageTrace = Vec<Vec<usize>>;

/// Full network on clips `x[B, T, H, W, 3]`, producing logits `[B, K]`.
pub fn forward(
    tape: &mut Tape,
    b: &mut Binder,
    buffers: &mut Buffers,
    config: &ModelConfig,
    x: Var,
    ctx: &mut ForwardCtx,
    mut trace: Option<&mut StageTrace>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let input = match shape.as_slice() {
        [_, t, h, w, 3] => InputShape::new(*t, *h, *w),
        other => return Err(Error::shape("model_forward", format!("expected [B, T, H, W, 3], got {other:?}"))),
    };
    let layouts = config.layouts_for(input)?;
    let mut h = patch_embed(tape, b, buffers, config, x, ctx.mode)?;
    h = subsample_frames(tape, h, config.temporal_stride)?;
    let rates = config.drop_path_rates();
    let mut block_index = 0;
    for (s, layout) in layouts.iter().enumerate() {
        if s > 0 {
            h = downsample(tape, b, s, h)?;
        }
        let full = tape.shape(h).to_vec();
        let mut wv = tape_partition(tape, h, layout.window)?;
        ctx.windows_per_sample = layout.windows();
        for blk in 0..config.depths[s] {
            let spec = config.block_spec(s, rates[block_index]);
            wv = block_forward(tape, b, &block_prefix(s, blk), &spec, wv, ctx)?;
            block_index += 1;
        }
        h = tape_unpartition(tape, wv, &full, layout.window)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(tape.shape(h).to_vec());
        }
    }
    classify_head(tape, b, h)
}

/// Parameters, batch norm buffers and the config they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub buffers: Buffers,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let specs = model_param_specs(&config)?;
        let mut params = ParamStore::init(specs, &mut seeded(seed))?;
        // Truncated normals scale linearly, so rescaling keeps the draw stream.
        let scale = config.dict_init_std / DICT_INIT_STD;
        for i in 0..params.len() {
            if params.specs()[i].role == Role::Dictionary {
                params.values_mut()[i].data_mut().iter_mut().for_each(|v| *v *= scale);
            }
        }
        let buffers = buffer_names(&config)
            .into_iter()
            .map(|(n, c)| (n, RunningStats::new(c)))
            .collect();
        Ok(Self { config, params, buffers })
    }

    /// Logits for `x[B, T, H, W, 3]` without recording gradients.
    pub fn predict(&mut self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, false);
        let xv = tape.constant(x.clone());
        let y = forward(&mut tape, &mut b, &mut self.buffers, &self.config, xv, ctx, None)?;
        Ok(tape.value(y).clone())
    }

    /// Mean cross-entropy and per-parameter gradients aligned with the store.
    pub fn loss_and_grads(&mut self, x: &Tensor, labels: &[usize], ctx: &mut ForwardCtx) -> Result<(f64, Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, true);
        let xv = tape.constant(x.clone());
        let logits = forward(&mut tape, &mut b, &mut self.buffers, &self.config, xv, ctx, None)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let value = tape.value(loss).item();
        let logits = tape.value(logits).clone();
        tape.backward(loss)?;
        Ok((value, logits, b.gradients(&tape)))
    }

    /// Single-frame forward with every temporal branch replaced by identity.
    pub fn image_mode_forward(&mut self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        check_single_frame(x.shape())?;
        ctx.image_mode = true;
        let out = self.predict(x, ctx);
        ctx.image_mode = false;
        out
    }

    /// Image-mode loss and gradients; temporal parameters never reach the tape.
    pub fn image_mode_grads(&mut self, x: &Tensor, labels: &[usize], ctx: &mut ForwardCtx) -> Result<(f64, Vec<Tensor>)> {
        check_single_frame(x.shape())?;
        ctx.image_mode = true;
        let out = self.loss_and_grads(x, labels, ctx);
        ctx.image_mode = false;
        out.map(|(l, _, g)| (l, g))
    }

    /// Feature shapes after each stage.
    pub fn stage_shapes(&mut self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<StageTrace> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, false);
        let xv = tape.constant(x.clone());
        let mut trace = Vec::new();
        forward(&mut tape, &mut b, &mut self.buffers, &self.config, xv, ctx, Some(&mut trace))?;
        Ok(trace)
    }
}

fn check_single_frame(shape: &[usize]) -> Result<()> {
    match shape {
        [_, 1, _, _, _] => Ok(()),
        other => Err(Error::Invalid(format!("image mode needs T = 1, got input {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::init::trunc_normal;

    #[test]
    fn partition_round_trip() {
        let x = trunc_normal([2, 4, 6, 4, 3], 1.0, &mut seeded(1));
        for win in [Window::new(4, 6, 4), Window::new(2, 3, 2), Window::new(1, 2, 4)] {
            let p = window_partition(&x, win).unwrap();
            let rows = 2 * (4 / win.t) * (6 / win.h) * (4 / win.w);
            assert_eq!(p.shape(), &[rows, win.t, win.h, win.w, 3]);
            assert_eq!(window_unpartition(&p, x.shape(), win).unwrap(), x);
        }
    }

    #[test]
    fn full_window_is_single_window() {
        let x = trunc_normal([1, 2, 4, 4, 2], 1.0, &mut seeded(2));
        assert_eq!(window_partition(&x, Window::new(2, 4, 4)).unwrap(), x);
    }

    #[test]
    fn window_grid_is_row_major() {
        let x = Tensor::from_fn([1, 1, 4, 4, 1], |i| i as f64);
        let p = window_partition(&x, Window::new(1, 2, 2)).unwrap();
        assert_eq!(p.shape(), &[4, 1, 2, 2, 1]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert!(window_partition(&x, Window::new(1, 3, 2)).is_err());
    }

    #[test]
    fn param_names_follow_paths() {
        let specs = model_param_specs(&ModelConfig::small()).unwrap();
        let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        for want in [
            "patch_embed.conv1.weight",
            "patch_embed.bn2.bias",
            "stage2.downsample.conv.weight",
            "stage2.block3.spatial.fc1.weight",
            "stage1.block1.temporal.unit.dict",
            "stage4.block3.spatial.unit.beta",
            "head.fc.bias",
        ] {
            assert!(names.contains(&want), "{want}");
        }
        assert!(!names.contains(&"stage1.downsample.conv.weight"));
    }
}
