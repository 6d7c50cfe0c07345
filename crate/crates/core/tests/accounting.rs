use posmlp_core::accounting::{count_model_flops, count_model_params, Convention, FlopCount, MacConvention};
use posmlp_core::blocks::{BlockVariant, UnitFamily};
use posmlp_core::network::{InputShape, Model, ModelConfig, PatchVersion, Preset};
use posmlp_core::rpe::Window;
use proptest::prelude::*;

fn config(depths: [usize; 4], width: usize, groups: [usize; 4], variant: BlockVariant, family: UnitFamily) -> ModelConfig {
    ModelConfig {
        variant: Preset::Custom,
        depths: depths.to_vec(),
        channels: vec![width, 2 * width, 4 * width, 8 * width],
        expansion: 2,
        groups: groups.to_vec(),
        windows: vec![Window::new(4, 4, 4), Window::new(4, 2, 2), Window::new(4, 2, 2), Window::new(4, 1, 1)],
        input: InputShape::new(4, 32, 32),
        patch_version: PatchVersion::PeV3,
        block_variant: variant,
        unit_family: family,
        num_classes: 7,
        drop_path_rate: 0.0,
        temporal_stride: 1,
        dict_init_std: 0.02,
    }
}

fn variant() -> impl Strategy<Value = BlockVariant> {
    prop::sample::select(BlockVariant::ALL.to_vec())
}

fn family() -> impl Strategy<Value = UnitFamily> {
    prop::sample::select(vec![UnitFamily::Positional, UnitFamily::Dense])
}

fn total(c: &ModelConfig) -> usize {
    count_model_params(c, Convention::Stored).unwrap().total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn symbolic_count_equals_storage(
        depths in prop::array::uniform4(0usize..=2),
        width in prop::sample::select(vec![8usize, 16]),
        v in variant(),
        f in family(),
        pv in prop::sample::select(vec![PatchVersion::PeV1, PatchVersion::PeV2, PatchVersion::PeV3]),
    ) {
        let c = ModelConfig { patch_version: pv, ..config(depths, width, [1, 2, 2, 4], v, f) };
        let report = count_model_params(&c, Convention::Stored).unwrap();
        let model = Model::new(c, 0).unwrap();
        prop_assert_eq!(report.total, model.params.numel());
        let parts = report.embedding + report.head + report.stages.iter().map(|s| s.total()).sum::<usize>();
        prop_assert_eq!(report.total, parts);
    }

    #[test]
    fn count_is_monotone(
        depths in prop::array::uniform4(0usize..=3),
        stage in 0usize..4,
        v in variant(),
    ) {
        let base = config(depths, 8, [1, 1, 2, 2], v, UnitFamily::Positional);
        let mut deeper = base.clone();
        deeper.depths[stage] += 1;
        prop_assert!(total(&deeper) > total(&base));
        let wider = config(depths, 16, [1, 1, 2, 2], v, UnitFamily::Positional);
        prop_assert!(total(&wider) >= total(&base));
        if depths.iter().sum::<usize>() > 0 && !matches!(v, BlockVariant::SpatialOnly | BlockVariant::TemporalOnly | BlockVariant::Joint) {
            let grouped = config(depths, 8, [2, 2, 4, 4], v, UnitFamily::Positional);
            prop_assert!(total(&grouped) > total(&base));
        }
        let grouped = config(depths, 8, [2, 2, 4, 4], v, UnitFamily::Positional);
        prop_assert!(total(&grouped) >= total(&base));
    }
}

#[test]
fn presets_match_reported_totals() {
    for (c, want) in [(ModelConfig::small(), 13.51e6), (ModelConfig::base(), 18.98e6), (ModelConfig::large(), 35.4e6)] {
        let got = total(&c) as f64;
        assert!(((got - want) / want).abs() <= 0.02, "{:?}: {got}", c.variant);
    }
}

#[test]
fn relation_only_convention_drops_stabilizers() {
    let c = ModelConfig::small();
    let text = count_model_params(&c, Convention::Stored).unwrap().total;
    let relation_only = count_model_params(&c, Convention::RelationOnly).unwrap().total;
    let stabilizers: usize = (0..4).map(|s| c.depths[s] * 2 * c.groups[s]).sum();
    assert_eq!(text - relation_only, stabilizers);
}

#[test]
fn zero_depth_costs_only_plumbing() {
    let c = config([0, 0, 0, 0], 8, [1, 1, 2, 2], BlockVariant::ParallelV1, UnitFamily::Positional);
    let r = count_model_flops(&c, c.input).unwrap();
    assert!(r.stages.iter().all(|s| s.blocks == FlopCount::default()));
    let parts = r.embedding.flops(MacConvention::Mac)
        + r.head.flops(MacConvention::Mac)
        + r.stages.iter().map(|s| s.downsample.flops(MacConvention::Mac)).sum::<f64>();
    assert!((r.total.flops(MacConvention::Mac) - parts).abs() <= 1e-6 * parts);
}

#[test]
fn flops_grow_with_clip_length() {
    let c = ModelConfig::small();
    let at = |t| count_model_flops(&c, InputShape::new(t, 224, 224)).unwrap();
    let (eight, sixteen) = (at(8), at(16));
    // Dense terms scale with T except the pooled head; temporal mixing scales with T².
    let per_frame = |r: &posmlp_core::accounting::FlopReport| r.total.dense_macs - r.head.dense_macs;
    assert_eq!(sixteen.head.dense_macs, eight.head.dense_macs);
    assert!((per_frame(&sixteen) / per_frame(&eight) - 2.0).abs() < 1e-9);
    assert!((sixteen.total.temporal_mix_macs / eight.total.temporal_mix_macs - 4.0).abs() < 1e-9);
    let ratio = sixteen.gflops(MacConvention::Mac) / eight.gflops(MacConvention::Mac);
    assert!(ratio > 2.0 && ratio < 2.2, "{ratio}");
}

#[test]
fn two_mac_convention_doubles_multiply_accumulates() {
    let c = ModelConfig::small();
    let r = count_model_flops(&c, c.input).unwrap();
    let diff = r.gflops(MacConvention::TwoMac) - r.gflops(MacConvention::Mac);
    assert!((diff - r.total.macs() / 1e9).abs() < 1e-9);
    assert_eq!(MacConvention::parse("2mac"), Some(MacConvention::TwoMac));
    assert_eq!(MacConvention::parse("mac"), Some(MacConvention::Mac));
    assert_eq!(MacConvention::parse("flop"), None);
}
