use stitchlab_core::data::generate_synthetic;
use stitchlab_core::nn::{ArchitectureSpec, ModelGraph};
use stitchlab_core::optim::{evaluate, train, train_observed, AugmentFlags, TrainConfig, TrainSet};

fn config(steps: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::base(steps, 32, seed);
    c.augment = AugmentFlags::NONE;
    c
}

#[test]
fn small_separable_set_is_fit_exactly() {
    let ds = generate_synthetic(5, 64, 4).unwrap();
    let mut model: ModelGraph =
        ModelGraph::build(&ArchitectureSpec::small_resnet(0.25, 4), 1).unwrap();
    let set = TrainSet::new(&ds.images, &ds.labels).unwrap();
    let before = evaluate(&|x| model.infer(x), set, 64).unwrap();
    train(&mut model, set, &config(300, 3), None).unwrap();
    let after = evaluate(&|x| model.infer(x), set, 64).unwrap();
    assert_eq!(after.error, 0.0, "train error stayed at {}", after.error);
    assert!(after.cross_entropy < before.cross_entropy);
}

#[test]
fn training_is_deterministic_in_its_seeds() {
    let ds = generate_synthetic(5, 64, 4).unwrap();
    let set = TrainSet::new(&ds.images, &ds.labels).unwrap();
    let run = |init: u64, order: u64| {
        let mut m: ModelGraph =
            ModelGraph::build(&ArchitectureSpec::small_resnet(0.25, 4), init).unwrap();
        let mut cfg = config(20, order);
        cfg.augment = AugmentFlags::STANDARD;
        let h = train(&mut m, set, &cfg, Some(set)).unwrap();
        (m.param_digest(), h.digest())
    };
    assert_eq!(run(1, 2), run(1, 2));
    assert_ne!(run(1, 2).0, run(1, 3).0);
    assert_ne!(run(1, 2).0, run(4, 2).0);
}

#[test]
fn snapshots_match_shorter_runs() {
    let ds = generate_synthetic(6, 64, 4).unwrap();
    let set = TrainSet::new(&ds.images, &ds.labels).unwrap();
    let spec = ArchitectureSpec::small_resnet(0.25, 4);
    let mut model: ModelGraph = ModelGraph::build(&spec, 1).unwrap();
    let mut snaps = Vec::new();
    train_observed(
        &mut model,
        set,
        &config(12, 2),
        None,
        &[0, 6, 12],
        &mut |step, m: &ModelGraph| {
            snaps.push((step, m.param_digest()));
            Ok(())
        },
    )
    .unwrap();
    let fresh: ModelGraph = ModelGraph::build(&spec, 1).unwrap();
    assert_eq!(snaps[0], (0, fresh.param_digest()));
    assert_eq!(snaps[2], (12, model.param_digest()));
    assert_ne!(snaps[1].1, snaps[2].1);
    let err = train_observed(&mut model, set, &config(12, 2), None, &[13], &mut |_, _| {
        Ok(())
    });
    assert!(err.is_err());
}

#[test]
fn zero_steps_leave_the_model_untouched() {
    let ds = generate_synthetic(5, 16, 4).unwrap();
    let set = TrainSet::new(&ds.images, &ds.labels).unwrap();
    let mut model: ModelGraph =
        ModelGraph::build(&ArchitectureSpec::plain_cnn(0.25, 4), 1).unwrap();
    let before = model.param_digest();
    let h = train(&mut model, set, &config(0, 0), None).unwrap();
    assert!(h.rows.is_empty());
    assert_eq!(model.param_digest(), before);
}
