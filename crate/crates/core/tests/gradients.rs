mod common;

use common::{block_errors, block_spec, micro_input_error, micro_param_error, module_error, unit_errors};
use posmlp_core::blocks::{BlockVariant, UnitFamily};
use posmlp_core::gating::UnitKind;

#[test]
fn every_unit_passes_finite_differences() {
    for kind in [UnitKind::PoTGU, UnitKind::PoSGU, UnitKind::PoSTGU, UnitKind::SGU, UnitKind::TGU] {
        let (dx, dw, db) = unit_errors(kind);
        assert!(dx < 1e-4 && dw < 1e-4 && db < 1e-4, "{kind:?}: {dx:e} {dw:e} {db:e}");
    }
}

#[test]
fn every_block_variant_passes_finite_differences() {
    for v in BlockVariant::ALL {
        let (dp, dx) = block_errors(&block_spec(v, UnitFamily::Positional));
        assert!(dp < 1e-4 && dx < 1e-4, "{v:?}: params {dp:e}, input {dx:e}");
    }
}

#[test]
fn dense_family_blocks_pass_finite_differences() {
    for v in [BlockVariant::CascadeTS, BlockVariant::ParallelV3] {
        let (dp, dx) = block_errors(&block_spec(v, UnitFamily::Dense));
        assert!(dp < 1e-4 && dx < 1e-4, "{v:?}: params {dp:e}, input {dx:e}");
    }
}

#[test]
fn single_module_passes_finite_differences() {
    let err = module_error();
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn micro_model_passes_finite_differences() {
    let err = micro_param_error();
    assert!(err < 1e-3, "{err:e}");
}

#[test]
fn micro_model_input_gradient() {
    let err = micro_input_error();
    assert!(err < 1e-3, "{err:e}");
}
