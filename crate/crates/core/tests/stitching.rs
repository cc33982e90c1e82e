use stitchlab_core::data::{generate_synthetic, LabeledDataset};
use stitchlab_core::nn::{ArchitectureSpec, ModelGraph};
use stitchlab_core::optim::{train, AugmentFlags, TrainConfig, TrainSet};
use stitchlab_core::stitching::{penalty, penalty_curve, StitchFamily, StitchOptions};

fn trained(seed: u64, ds: &LabeledDataset) -> ModelGraph {
    let mut m = ModelGraph::build(&ArchitectureSpec::small_resnet(0.25, 10), seed).unwrap();
    let mut cfg = TrainConfig::base(200, 32, seed);
    cfg.augment = AugmentFlags::NONE;
    train(
        &mut m,
        TrainSet::new(&ds.images, &ds.labels).unwrap(),
        &cfg,
        None,
    )
    .unwrap();
    m
}

fn opts(family: StitchFamily, steps: usize) -> StitchOptions {
    StitchOptions::new(family, TrainConfig::stitcher(steps, 64, 0))
}

#[test]
fn scrambled_channels_need_a_learned_map() {
    let train_ds = generate_synthetic(1, 600, 10).unwrap();
    let test = generate_synthetic(2, 300, 10).unwrap();
    let top = trained(3, &train_ds);
    let cut = 2;
    let c = top.channels_at(cut).unwrap();
    let perm: Vec<usize> = (0..c).rev().collect();
    let mut bottom = top.clone();
    bottom.permute_channels_at(cut, &perm).unwrap();
    assert!(
        bottom
            .infer(&test.images)
            .unwrap()
            .max_abs_diff(&top.infer(&test.images).unwrap())
            < 1e-4
    );

    let identity = penalty(
        &top,
        &bottom,
        cut,
        &train_ds,
        &test,
        &opts(StitchFamily::Identity, 0),
    )
    .unwrap();
    let permutation = penalty(
        &top,
        &bottom,
        cut,
        &train_ds,
        &test,
        &opts(StitchFamily::ChannelPermutation, 1),
    )
    .unwrap();
    let conv = penalty(
        &top,
        &bottom,
        cut,
        &train_ds,
        &test,
        &opts(StitchFamily::conv(1), 50),
    )
    .unwrap();
    assert!(
        identity.penalty > 0.1,
        "identity penalty {}",
        identity.penalty
    );
    assert!(
        permutation.penalty.abs() < 0.005,
        "permutation penalty {}",
        permutation.penalty
    );
    assert!(conv.penalty < 0.03, "conv penalty {}", conv.penalty);
}

#[test]
fn richer_families_never_stitch_worse_on_the_same_pair() {
    let train_ds = generate_synthetic(1, 600, 10).unwrap();
    let test = generate_synthetic(2, 300, 10).unwrap();
    let (top, bottom) = (trained(3, &train_ds), trained(4, &train_ds));
    let cut = 3;
    let perm = penalty(
        &top,
        &bottom,
        cut,
        &train_ds,
        &test,
        &opts(StitchFamily::ChannelPermutation, 1),
    )
    .unwrap();
    let conv = penalty(
        &top,
        &bottom,
        cut,
        &train_ds,
        &test,
        &opts(StitchFamily::conv(1), 150),
    )
    .unwrap();
    assert!(
        conv.stitched_error <= perm.stitched_error + 0.01,
        "conv {} vs permutation {}",
        conv.stitched_error,
        perm.stitched_error
    );
}

#[test]
fn curve_reports_every_requested_cut() {
    let train_ds = generate_synthetic(1, 200, 10).unwrap();
    let test = generate_synthetic(2, 100, 10).unwrap();
    let (top, bottom) = (trained(3, &train_ds), trained(4, &train_ds));
    let curve = penalty_curve(
        &top,
        &bottom,
        &[1, 2, 4],
        &train_ds,
        &test,
        &opts(StitchFamily::conv(1), 5),
    )
    .unwrap();
    assert_eq!(
        curve.iter().map(|r| r.cut).collect::<Vec<_>>(),
        vec![1, 2, 4]
    );
    for r in &curve {
        assert_eq!(r.penalty, r.stitched_error - r.top_error);
        assert_eq!(r.top_error, curve[0].top_error);
        assert_eq!(r.bottom_error, curve[0].bottom_error);
        assert!(r.bottom_error.is_some());
    }
}
