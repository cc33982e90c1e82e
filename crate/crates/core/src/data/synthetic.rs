//! Procedurally rendered shape images.
//!
//! Class `c` is shape `c / 2` drawn in colour regime `c % 2`. Every image
//! depends only on `(seed, index)`, so the first `m` images of an `n`-image
//! set equal the `m`-image set with the same seed.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub const SIZE: usize = 32;
pub const MAX_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Ring,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 5] = [
        Shape::Disk,
        Shape::Ring,
        Shape::Square,
        Shape::Triangle,
        Shape::Cross,
    ];

    /// Membership test in the shape's own frame, radius 1.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Disk => u * u + v * v <= 1.0,
            Shape::Ring => (0.3..=1.0).contains(&(u * u + v * v)),
            Shape::Square => u.abs().max(v.abs()) <= 0.8,
            Shape::Triangle => v >= -0.5 && u.abs() <= (1.0 - v) / 3f64.sqrt(),
            Shape::Cross => {
                (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95)
            }
        }
    }

    pub fn is_round(self) -> bool {
        matches!(self, Shape::Disk | Shape::Ring)
    }
}

/// Shape of a class id.
pub fn class_shape(class: usize) -> Shape {
    Shape::ALL[class / 2]
}

/// Two-way grouping of the synthetic classes: round shapes → 0, polygons → 1.
pub fn coarse_map(classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|c| (!class_shape(c).is_round()) as usize)
        .collect()
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Warm hues for regime 0, cool hues for regime 1.
fn regime_colour<R: Rng>(regime: usize, rng: &mut R) -> [f64; 3] {
    let hue = if regime == 0 {
        rng.random_range(-30.0..60.0)
    } else {
        rng.random_range(150.0..260.0)
    };
    hsv(hue, rng.random_range(0.55..1.0), rng.random_range(0.6..1.0))
}

/// Renders image `index` of the set seeded by `seed` into `out` (`3·32·32`, CHW).
pub fn render(seed: u64, index: u64, class: usize, out: &mut [f32]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let shape = class_shape(class);
    let regime = class % 2;

    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let grey = (base[0] + base[1] + base[2]) / 3.0;
    let bg: [f64; 3] = base.map(|c| 0.5 * c + 0.5 * grey);
    let grad_angle = rng.random_range(0.0..2.0 * PI);
    let grad_amp = rng.random_range(0.0..0.2);

    let fg = regime_colour(regime, &mut rng);
    let cx = rng.random_range(10.0..22.0);
    let cy = rng.random_range(10.0..22.0);
    let radius = rng.random_range(6.0..10.5);
    let theta = rng.random_range(0.0..2.0 * PI);
    let (sin, cos) = theta.sin_cos();

    // A small distractor blob in a random colour of either regime.
    let distractor = rng.random_bool(0.5).then(|| {
        let colour = regime_colour(rng.random_range(0..2), &mut rng);
        (
            rng.random_range(3.0..29.0),
            rng.random_range(3.0..29.0),
            rng.random_range(1.5..3.0),
            colour,
        )
    });

    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let plane = SIZE * SIZE;
    for y in 0..SIZE {
        for x in 0..SIZE {
            let mut cover = 0.0;
            let mut blob = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let (px, py) = (x as f64 + ox, y as f64 + oy);
                let (dx, dy) = ((px - cx) / radius, (py - cy) / radius);
                let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                cover += shape.contains(u, v) as u8 as f64 * 0.25;
                if let Some((bx, by, br, _)) = distractor {
                    blob +=
                        (((px - bx).powi(2) + (py - by).powi(2)) <= br * br) as u8 as f64 * 0.25;
                }
            }
            let ramp = grad_amp
                * ((x as f64 / SIZE as f64 - 0.5) * grad_angle.cos()
                    + (y as f64 / SIZE as f64 - 0.5) * grad_angle.sin());
            for ch in 0..3 {
                let mut v = bg[ch] + ramp;
                if let Some((.., colour)) = distractor {
                    v = v * (1.0 - blob) + colour[ch] * blob;
                }
                v = v * (1.0 - cover) + fg[ch] * cover;
                v += noise.sample(&mut rng);
                out[ch * plane + y * SIZE + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
}

/// `n` images with labels `i % classes`.
pub fn generate(seed: u64, n: usize, classes: usize) -> (Tensor, Vec<usize>) {
    let per = 3 * SIZE * SIZE;
    let mut data = vec![0.0f32; n * per];
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for (i, chunk) in data.chunks_exact_mut(per).enumerate() {
        render(seed, i as u64, labels[i], chunk);
    }
    (
        Tensor::from_vec(&[n, 3, SIZE, SIZE], data).expect("sizes agree"),
        labels,
    )
}
