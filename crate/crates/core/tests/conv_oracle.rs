//! Convolution kernels against a direct nested-loop evaluation.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stitchlab_core::tensor::{conv2d, conv2d_backward, conv_out_dim};
use stitchlab_core::Tensor;

#[derive(Clone, Copy, Debug)]
struct Case {
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Input pixel read by output `(oy, ox)` at tap `(ky, kx)`, if inside the image.
fn source(c: &Case, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
    let iy = (oy * c.stride + ky) as isize - c.padding as isize;
    let ix = (ox * c.stride + kx) as isize - c.padding as isize;
    (iy >= 0 && ix >= 0 && (iy as usize) < c.h && (ix as usize) < c.w)
        .then_some((iy as usize, ix as usize))
}

/// Output, input gradient, weight gradient and bias gradient by direct summation.
fn direct(c: &Case, x: &[f64], wt: &[f64], b: &[f64], g: &[f64]) -> [Vec<f64>; 4] {
    let ho = conv_out_dim(c.h, c.kh, c.stride, c.padding).unwrap();
    let wo = conv_out_dim(c.w, c.kw, c.stride, c.padding).unwrap();
    let xi = |i: usize, ch: usize, y: usize, xx: usize| ((i * c.ci + ch) * c.h + y) * c.w + xx;
    let wi = |o: usize, ch: usize, ky: usize, kx: usize| ((o * c.ci + ch) * c.kh + ky) * c.kw + kx;
    let oi = |i: usize, o: usize, y: usize, xx: usize| ((i * c.co + o) * ho + y) * wo + xx;
    let mut y = vec![0.0; c.n * c.co * ho * wo];
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; b.len()];
    for i in 0..c.n {
        for o in 0..c.co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = g[oi(i, o, oy, ox)];
                    let mut acc = b[o];
                    gb[o] += go;
                    for ch in 0..c.ci {
                        for ky in 0..c.kh {
                            for kx in 0..c.kw {
                                if let Some((iy, ix)) = source(c, oy, ox, ky, kx) {
                                    acc += wt[wi(o, ch, ky, kx)] * x[xi(i, ch, iy, ix)];
                                    gx[xi(i, ch, iy, ix)] += wt[wi(o, ch, ky, kx)] * go;
                                    gw[wi(o, ch, ky, kx)] += x[xi(i, ch, iy, ix)] * go;
                                }
                            }
                        }
                    }
                    y[oi(i, o, oy, ox)] = acc;
                }
            }
        }
    }
    [y, gx, gw, gb]
}

fn check(c: Case, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[c.n, c.ci, c.h, c.w], &mut rng);
    let wt = random(&[c.co, c.ci, c.kh, c.kw], &mut rng);
    let b = random(&[c.co], &mut rng);
    let y = conv2d(&x, &wt, &b, c.stride, c.padding).unwrap();
    let g = random(y.shape(), &mut rng);
    let grads = conv2d_backward(&g, &x, &wt, c.stride, c.padding).unwrap();
    let [ey, egx, egw, egb] = direct(&c, x.data(), wt.data(), b.data(), g.data());
    for (name, got, want) in [
        ("output", y.data(), &ey),
        ("input grad", grads.input.data(), &egx),
        ("weight grad", grads.weight.data(), &egw),
        ("bias grad", grads.bias.data(), &egb),
    ] {
        assert_eq!(got.len(), want.len(), "{name} size for {c:?}");
        for (k, (a, e)) in got.iter().zip(want.iter()).enumerate() {
            assert!(
                (a - e).abs() <= 1e-10 * (1.0 + e.abs()),
                "{name}[{k}] {a} vs {e} for {c:?}"
            );
        }
    }
}

#[test]
fn odd_kernels_with_same_padding() {
    for (k, seed) in (1..=9).step_by(2).zip(0..) {
        for stride in [1, 2] {
            check(
                Case {
                    n: 2,
                    ci: 3,
                    co: 4,
                    h: 11,
                    w: 9,
                    kh: k,
                    kw: k,
                    stride,
                    padding: k / 2,
                },
                seed,
            );
        }
    }
}

#[test]
fn patchify_and_strided_shortcut() {
    check(
        Case {
            n: 3,
            ci: 3,
            co: 5,
            h: 32,
            w: 32,
            kh: 4,
            kw: 4,
            stride: 4,
            padding: 0,
        },
        1,
    );
    check(
        Case {
            n: 2,
            ci: 4,
            co: 6,
            h: 8,
            w: 8,
            kh: 1,
            kw: 1,
            stride: 2,
            padding: 0,
        },
        2,
    );
    check(
        Case {
            n: 2,
            ci: 4,
            co: 6,
            h: 7,
            w: 7,
            kh: 1,
            kw: 1,
            stride: 2,
            padding: 0,
        },
        3,
    );
}

#[test]
fn padding_wider_than_kernel() {
    check(
        Case {
            n: 1,
            ci: 2,
            co: 2,
            h: 3,
            w: 4,
            kh: 2,
            kw: 3,
            stride: 3,
            padding: 4,
        },
        4,
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_direct_evaluation(
        n in 1usize..4, ci in 1usize..4, co in 1usize..4,
        h in 1usize..10, w in 1usize..10, kh in 1usize..6, kw in 1usize..6,
        stride in 1usize..4, padding in 0usize..4, seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * padding >= kh && w + 2 * padding >= kw);
        check(Case { n, ci, co, h, w, kh, kw, stride, padding }, seed);
    }
}

#[test]
fn batches_larger_than_one_chunk() {
    // 8·5·5 · 32·32 column entries per image: several chunks per batch.
    check(
        Case {
            n: 40,
            ci: 8,
            co: 2,
            h: 32,
            w: 32,
            kh: 5,
            kw: 5,
            stride: 1,
            padding: 2,
        },
        5,
    );
}
