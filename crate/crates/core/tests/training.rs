use posmlp_core::blocks::{BlockVariant, ForwardCtx};
use posmlp_core::harness::{
    dot_column, evaluate, history_csv, top1, toy_model_config, train, AdamW, Split, SyntheticTask, TaskKind, TrainConfig,
};
use posmlp_core::network::Model;
use posmlp_core::tensor::Mode;

fn quick(variant: BlockVariant, seed: u64) -> TrainConfig {
    TrainConfig { epochs: 1, train_per_class: 8, val_per_class: 4, batch_size: 8, ..TrainConfig::toy(toy_model_config(variant), seed) }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = TrainConfig { lr: 0.0, weight_decay: 0.0, ..quick(BlockVariant::ParallelV1, 3) };
    let before = Model::new(cfg.model.clone(), cfg.seed).unwrap();
    let after = train(&cfg, &SyntheticTask::toy(TaskKind::Direction, 8, 3)).unwrap().model;
    assert_eq!(before.params.values(), after.params.values());
}

#[test]
fn same_seed_trains_identically() {
    let cfg = quick(BlockVariant::CascadeTS, 5);
    let task = SyntheticTask::toy(TaskKind::Position, 8, 5);
    let (a, b) = (train(&cfg, &task).unwrap(), train(&cfg, &task).unwrap());
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params.values(), b.model.params.values());
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    let other = train(&quick(BlockVariant::CascadeTS, 6), &task).unwrap();
    assert_ne!(a.model.params.values(), other.model.params.values());
}

#[test]
fn every_variant_fits_four_samples_within_200_steps() {
    // Position, since reversed direction pairs are indistinguishable without temporal mixing.
    let task = SyntheticTask::toy(TaskKind::Position, 2, 0);
    let (x, labels) = task.batch(&[0, 1, 2, 3]).unwrap();
    for variant in BlockVariant::ALL {
        let cfg = toy_model_config(variant);
        let tcfg = TrainConfig::toy(cfg.clone(), 0);
        let mut model = Model::new(cfg, 0).unwrap();
        let mut opt = AdamW::new(&model.params);
        let mut ctx = ForwardCtx::new(Mode::Train, 1);
        let fitted = (0..200).any(|_| {
            let (_, logits, grads) = model.loss_and_grads(&x, &labels, &mut ctx).unwrap();
            opt.update(&mut model.params, &grads, tcfg.lr, &tcfg);
            top1(&logits, &labels) == 1.0
        });
        assert!(fitted, "{variant:?}");
    }
}

#[test]
fn history_covers_every_epoch_and_split() {
    let cfg = TrainConfig { epochs: 2, ..quick(BlockVariant::SpatialOnly, 1) };
    let out = train(&cfg, &SyntheticTask::toy(TaskKind::Position, 8, 1)).unwrap();
    assert_eq!(out.history.len(), 4);
    assert_eq!(out.history.iter().filter(|m| m.split == Split::Val).count(), 2);
    assert!(out.history.iter().all(|m| m.loss.is_finite() && (0.0..=1.0).contains(&m.top1)));
    let csv = history_csv(&out.history);
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("epoch,split,loss,top1\n0,train,"));
}

#[test]
fn evaluation_is_repeatable() {
    let cfg = quick(BlockVariant::ParallelV1, 2);
    let task = SyntheticTask::toy(TaskKind::Direction, 8, 2);
    let mut model = train(&cfg, &task).unwrap().model;
    let val = task.split(Split::Val, 4);
    assert_eq!(evaluate(&mut model, &val, 3).unwrap(), evaluate(&mut model, &val, 8).unwrap());
}

#[test]
fn tasks_are_deterministic_and_well_formed() {
    for kind in [TaskKind::Direction, TaskKind::Position, TaskKind::ShuffleControl] {
        let task = SyntheticTask::toy(kind, 6, 9);
        for i in 0..task.len() {
            let (a, la) = task.generate(i).unwrap();
            let (b, lb) = task.generate(i).unwrap();
            assert_eq!((a.data(), la), (b.data(), lb));
            assert_eq!(la, i % 2);
            assert_eq!(a.shape(), [8, 32, 32, 3]);
        }
        assert!(task.generate(task.len()).is_err());
    }
    let dir = SyntheticTask::toy(TaskKind::Direction, 6, 9);
    for k in 0..6 {
        let (clip, _) = dir.generate(2 * k).unwrap();
        let cols: Vec<usize> = (0..8).map(|f| dot_column(&clip, f)).collect();
        assert!(cols.windows(2).all(|p| p[0] < p[1]), "{cols:?}");
        let (rev, _) = dir.generate(2 * k + 1).unwrap();
        let back: Vec<usize> = (0..8).map(|f| dot_column(&rev, f)).collect();
        assert!(back.windows(2).all(|p| p[0] > p[1]), "{back:?}");
    }
    let train_set = dir.split(Split::Train, 6);
    let val_set = dir.split(Split::Val, 6);
    assert_ne!(train_set.generate(0).unwrap().0, val_set.generate(0).unwrap().0);
}
