//! Finite-difference fixtures shared by the gradient and acceptance suites.
#![allow(dead_code)]

use posmlp_core::blocks::{block_forward, pos_module_forward, BlockSpec, BlockVariant, ForwardCtx, PosModuleSpec, UnitFamily};
use posmlp_core::gating::{gate, GatingParams, GatingUnitSpec, UnitKind, DICT_INIT_STD};
use posmlp_core::network::{forward, InputShape, Model, ModelConfig, PatchVersion, Preset};
use posmlp_core::params::{finite_diff_params, Binder, ParamStore};
use posmlp_core::rpe::{RelationIndexCache, Window};
use posmlp_core::tensor::init::{seeded, trunc_normal};
use posmlp_core::tensor::{finite_diff_check, Mode, Tape, Tensor, Var};
use posmlp_core::Result;

pub const H: f64 = 1e-6;

pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let p = trunc_normal(tape.shape(y).to_vec(), 1.0, &mut seeded(seed));
    let c = tape.constant(p);
    let z = tape.hadamard(y, c)?;
    tape.sum(z)
}

pub fn unit_errors(kind: UnitKind) -> (f64, f64, f64) {
    let w = Window::new(2, 3, 3);
    let spec = GatingUnitSpec::new(kind, w, if kind.is_positional() { 2 } else { 1 }, 8).unwrap();
    let mut p = GatingParams::init(&spec, &mut seeded(1));
    p.weight = trunc_normal(p.weight.shape().to_vec(), 0.5, &mut seeded(2));
    p.bias = trunc_normal(p.bias.shape().to_vec(), 0.5, &mut seeded(3));
    let x = trunc_normal([2, 2, 3, 3, 8], 1.0, &mut seeded(4));
    let run = |tape: &mut Tape, x: Var, wt: Var, b: Var| -> Result<Var> {
        let mut cache = RelationIndexCache::default();
        let z = gate(tape, &spec, wt, b, x, &mut cache)?;
        project(tape, z, 9)
    };
    let dx = finite_diff_check(
        |t, xv| {
            let wt = t.constant(p.weight.clone());
            let b = t.constant(p.bias.clone());
            run(t, xv, wt, b)
        },
        &x,
        H,
    )
    .unwrap();
    let dw = finite_diff_check(
        |t, wv| {
            let xv = t.constant(x.clone());
            let b = t.constant(p.bias.clone());
            run(t, xv, wv, b)
        },
        &p.weight,
        H,
    )
    .unwrap();
    let db = finite_diff_check(
        |t, bv| {
            let xv = t.constant(x.clone());
            let wt = t.constant(p.weight.clone());
            run(t, xv, wt, bv)
        },
        &p.bias,
        H,
    )
    .unwrap();
    (dx, dw, db)
}

/// Randomizes every parameter so no gradient path is structurally flat.
pub fn randomized(store: &ParamStore, seed: u64) -> ParamStore {
    let mut s = store.clone();
    let mut rng = seeded(seed);
    for v in s.values_mut() {
        let noise = trunc_normal(v.shape().to_vec(), 0.3, &mut rng);
        for (a, b) in v.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    }
    s
}

pub fn block_spec(variant: BlockVariant, family: UnitFamily) -> BlockSpec {
    BlockSpec {
        variant,
        family,
        channels: 8,
        expansion: 2,
        window: Window::new(2, 2, 2),
        groups: 2,
        drop_path_rate: 0.0,
    }
}

pub fn block_errors(spec: &BlockSpec) -> (f64, f64) {
    let store = randomized(&ParamStore::init(spec.param_specs("b").unwrap(), &mut seeded(5)).unwrap(), 6);
    let x = trunc_normal([2, 2, 2, 2, 8], 1.0, &mut seeded(7));
    let run = |tape: &mut Tape, b: &mut Binder, xv: Var| -> Result<Var> {
        let mut ctx = ForwardCtx::new(Mode::Train, 0);
        let y = block_forward(tape, b, "b", spec, xv, &mut ctx)?;
        project(tape, y, 8)
    };
    let dp = finite_diff_params(
        &store,
        |t, b| {
            let xv = t.constant(x.clone());
            run(t, b, xv)
        },
        H,
        usize::MAX,
    )
    .unwrap();
    let dx = finite_diff_check(
        |t, xv| {
            let mut b = Binder::new(&store, false);
            run(t, &mut b, xv)
        },
        &x,
        H,
    )
    .unwrap();
    (dp, dx)
}

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        variant: Preset::Custom,
        depths: vec![1, 1, 1, 1],
        channels: vec![8, 16, 32, 64],
        expansion: 2,
        groups: vec![1, 1, 2, 2],
        windows: vec![Window::new(2, 4, 4), Window::new(2, 2, 2), Window::new(2, 2, 2), Window::new(2, 1, 1)],
        input: InputShape::new(2, 32, 32),
        patch_version: PatchVersion::PeV3,
        block_variant: BlockVariant::ParallelV1,
        unit_family: UnitFamily::Positional,
        num_classes: 3,
        drop_path_rate: 0.0,
        temporal_stride: 1,
        dict_init_std: DICT_INIT_STD,
    }
}

pub fn module_error() -> f64 {
    let spec = PosModuleSpec::new(UnitKind::PoSGU, 4, 2, Window::new(2, 2, 2), 1).unwrap();
    let store = randomized(&ParamStore::init(spec.param_specs("m"), &mut seeded(1)).unwrap(), 2);
    let x = trunc_normal([1, 2, 2, 2, 4], 1.0, &mut seeded(3));
    finite_diff_params(
        &store,
        |t, b| {
            let mut ctx = ForwardCtx::new(Mode::Train, 0);
            let xv = t.constant(x.clone());
            let y = pos_module_forward(t, b, "m", &spec, 0.0, xv, &mut ctx)?;
            project(t, y, 4)
        },
        H,
        usize::MAX,
    )
    .unwrap()
}

/// Largest relative error over four coordinates of every parameter tensor.
pub fn micro_param_error() -> f64 {
    let model = Model::new(micro_config(), 11).unwrap();
    let store = randomized(&model.params, 12);
    let x = trunc_normal([2, 2, 32, 32, 3], 1.0, &mut seeded(13));
    finite_diff_params(
        &store,
        |t, b| {
            let mut buf = model.buffers.clone();
            let mut ctx = ForwardCtx::new(Mode::Train, 0);
            let xv = t.constant(x.clone());
            let logits = forward(t, b, &mut buf, &model.config, xv, &mut ctx, None)?;
            t.softmax_cross_entropy(logits, &[0, 2])
        },
        H,
        4,
    )
    .unwrap()
}

pub fn micro_input_error() -> f64 {
    let model = Model::new(micro_config(), 21).unwrap();
    let store = randomized(&model.params, 22);
    let x: Tensor = trunc_normal([1, 2, 32, 32, 3], 1.0, &mut seeded(23));
    finite_diff_check(
        |t, xv| {
            let mut buf = model.buffers.clone();
            let mut ctx = ForwardCtx::new(Mode::Train, 0);
            let mut b = Binder::new(&store, false);
            let logits = forward(t, &mut b, &mut buf, &model.config, xv, &mut ctx, None)?;
            project(t, logits, 24)
        },
        &x,
        H,
    )
    .unwrap()
}
