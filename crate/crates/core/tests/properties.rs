use proptest::prelude::*;
use stitchlab_core::data::{
    coarsen_labels, corrupt_labels, disjoint_split, generate_synthetic, subset,
};
use stitchlab_core::metrics::{linear_cka, ReprMatrix};
use stitchlab_core::nn::{ArchitectureSpec, ModelGraph};
use stitchlab_core::tensor::{batchnorm, BnParams};
use stitchlab_core::{Mode, Tensor};

fn matrix(n: usize, d: usize) -> impl Strategy<Value = ReprMatrix> {
    prop::collection::vec(-5.0f64..5.0, n * d).prop_map(move |v| ReprMatrix::new(n, d, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cka_is_bounded_symmetric_and_scale_free(
        (x, y) in (3usize..20, 1usize..8, 1usize..8).prop_flat_map(|(n, dx, dy)| (matrix(n, dx), matrix(n, dy))),
        s in 0.01f64..100.0,
    ) {
        let (Ok(xy), Ok(yx)) = (linear_cka(&x, &y), linear_cka(&y, &x)) else {
            return Ok(());
        };
        prop_assert!((0.0..=1.0).contains(&xy));
        prop_assert!((xy - yx).abs() < 1e-12);
        prop_assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-10);
        let scaled = ReprMatrix::new(x.n, x.d, x.data.iter().map(|v| v * s).collect()).unwrap();
        prop_assert!((linear_cka(&scaled, &y).unwrap() - xy).abs() < 1e-8);
    }

    #[test]
    fn train_batchnorm_matches_two_pass_statistics(
        (n, c, hw) in (1usize..5, 1usize..4, 1usize..4),
        seed in any::<u64>(),
    ) {
        prop_assume!(n * hw * hw > 1);
        let len = n * c * hw * hw;
        let data: Vec<f64> = (0..len).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 100.0 - 5.0).collect();
        let x = Tensor::from_vec(&[n, c, hw, hw], data).unwrap();
        let gamma = Tensor::from_vec(&[c], (0..c).map(|i| 0.5 + i as f64).collect()).unwrap();
        let beta = Tensor::from_vec(&[c], (0..c).map(|i| i as f64 - 1.0).collect()).unwrap();
        let (mut rm, mut rv) = (Tensor::zeros(&[c]), Tensor::full(&[c], 1.0));
        let p = BnParams::default();
        let (y, _) = batchnorm(&x, &gamma, &beta, &mut rm, &mut rv, Mode::Train, p).unwrap();
        let s = hw * hw;
        let m = (n * s) as f64;
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|i| x.data()[(i * c + ch) * s..][..s].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / m;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            for i in 0..n {
                for q in 0..s {
                    let k = (i * c + ch) * s + q;
                    let want = gamma.data()[ch] * (x.data()[k] - mean) / (var + p.eps).sqrt() + beta.data()[ch];
                    prop_assert!((y.data()[k] - want).abs() < 1e-9);
                }
            }
            let unbiased = var * m / (m - 1.0);
            prop_assert!((rm.data()[ch] - p.momentum * mean).abs() < 1e-12);
            prop_assert!((rv.data()[ch] - ((1.0 - p.momentum) + p.momentum * unbiased)).abs() < 1e-9);
        }
    }

    #[test]
    fn data_transforms_keep_their_contracts(n in 10usize..80, k in 1usize..5, p in 0.0f64..=1.0, seed in any::<u64>()) {
        let ds = generate_synthetic(seed, n, 10).unwrap();
        let m = 1 + (seed as usize) % n;
        let sub = subset(&ds, m, seed).unwrap();
        prop_assert_eq!(sub.len(), m);
        prop_assert_eq!(sub.provenance.replay().unwrap(), sub.clone());

        let parts = disjoint_split(&ds, k, seed).unwrap();
        prop_assert_eq!(parts.len(), k);
        prop_assert!(parts.iter().all(|q| q.len() == n / k));
        let total: usize = parts.iter().map(|q| q.len()).sum();
        prop_assert!(total <= n && n - total < k);

        let noisy = corrupt_labels(&ds, p, seed).unwrap();
        let changed = noisy.labels.iter().zip(&ds.labels).filter(|(a, b)| a != b).count();
        prop_assert!(changed <= (p * n as f64).round() as usize);
        prop_assert!(noisy.labels.iter().all(|&l| l < 10));
        prop_assert_eq!(&noisy.images, &ds.images);

        let map: Vec<usize> = (0..10).map(|c| c % 3).collect();
        let coarse = coarsen_labels(&ds, &map).unwrap();
        prop_assert_eq!(coarse.classes, 3);
        prop_assert!(coarse.labels.iter().zip(&ds.labels).all(|(&c, &f)| c == map[f]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn splitting_at_any_cut_composes_to_the_whole(
        resnet in any::<bool>(),
        width in prop::sample::select(vec![0.25, 0.5]),
        cut_seed in any::<usize>(),
        seed in any::<u64>(),
    ) {
        let spec = if resnet { ArchitectureSpec::small_resnet(width, 10) } else { ArchitectureSpec::plain_cnn(width, 10) };
        let model: ModelGraph = ModelGraph::build(&spec, seed).unwrap();
        let cut = cut_seed % (model.num_cuts() + 1);
        let x = generate_synthetic(seed, 10, 10).unwrap().images;
        let whole = model.infer(&x).unwrap();
        let split = model.infer_from(cut, &model.activations_at(cut, &x).unwrap()).unwrap();
        prop_assert_eq!(whole, split);
    }
}
