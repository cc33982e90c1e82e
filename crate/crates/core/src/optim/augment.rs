use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Tensor;

/// Random crop after zero padding, and random horizontal flips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentFlags {
    /// Zero padding added on every side before cropping back to the original
    /// size; `0` disables cropping.
    pub crop_padding: usize,
    pub horizontal_flip: bool,
}

impl AugmentFlags {
    pub const NONE: AugmentFlags = AugmentFlags {
        crop_padding: 0,
        horizontal_flip: false,
    };

    pub const STANDARD: AugmentFlags = AugmentFlags {
        crop_padding: 4,
        horizontal_flip: true,
    };

    pub fn is_off(&self) -> bool {
        self.crop_padding == 0 && !self.horizontal_flip
    }
}

/// Per-image crop offset `(dy, dx)` into the padded image and flip decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageTransform {
    pub offset: (usize, usize),
    pub flip: bool,
}

/// Draws one transform per image and applies it.
pub fn augment<R: Rng>(batch: &Tensor, flags: AugmentFlags, rng: &mut R) -> Result<Tensor> {
    let (n, ..) = batch.dims4()?;
    if flags.is_off() {
        return Ok(batch.clone());
    }
    let p = flags.crop_padding;
    let transforms: Vec<ImageTransform> = (0..n)
        .map(|_| {
            let offset = if p > 0 {
                (rng.random_range(0..=2 * p), rng.random_range(0..=2 * p))
            } else {
                (0, 0)
            };
            let flip = flags.horizontal_flip && rng.random_bool(0.5);
            ImageTransform { offset, flip }
        })
        .collect();
    apply_transforms(batch, p, &transforms)
}

/// Zero-pads every image by `padding`, crops the original size at each
/// image's offset, then mirrors it horizontally if requested.
pub fn apply_transforms(
    batch: &Tensor,
    padding: usize,
    transforms: &[ImageTransform],
) -> Result<Tensor> {
    let (n, c, h, w) = batch.dims4()?;
    assert_eq!(transforms.len(), n, "one transform per image");
    let mut out = Tensor::zeros(batch.shape());
    let src = batch.data();
    let dst = out.data_mut();
    for (i, t) in transforms.iter().enumerate() {
        let (dy, dx) = t.offset;
        for ch in 0..c {
            let plane = (i * c + ch) * h * w;
            for y in 0..h {
                // Row y of the crop is row y + dy − padding of the original.
                let sy = (y + dy) as isize - padding as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = (x + dx) as isize - padding as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let ox = if t.flip { w - 1 - x } else { x };
                    dst[plane + y * w + ox] = src[plane + sy as usize * w + sx as usize];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn images() -> Tensor {
        Tensor::from_vec(&[2, 3, 5, 4], (0..120).map(|v| v as f32 + 1.0).collect()).unwrap()
    }

    #[test]
    fn flags_off_is_identity() {
        let x = images();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&x, AugmentFlags::NONE, &mut rng).unwrap(), x);
    }

    #[test]
    fn centred_crop_is_identity() {
        let x = images();
        let t = [ImageTransform {
            offset: (4, 4),
            flip: false,
        }; 2];
        assert_eq!(apply_transforms(&x, 4, &t).unwrap(), x);
    }

    #[test]
    fn double_flip_is_identity() {
        let x = images();
        let t = [ImageTransform {
            offset: (0, 0),
            flip: true,
        }; 2];
        let once = apply_transforms(&x, 0, &t).unwrap();
        assert_ne!(once, x);
        assert_eq!(apply_transforms(&once, 0, &t).unwrap(), x);
    }

    #[test]
    fn shifted_crop_moves_content_and_zero_fills() {
        let x = images();
        let t = [ImageTransform {
            offset: (5, 4),
            flip: false,
        }; 2];
        let y = apply_transforms(&x, 4, &t).unwrap();
        // Shifted up by one row: row 0 of the output is row 1 of the input.
        assert_eq!(y.data()[0..4], x.data()[4..8]);
        assert!(y.data()[16..20].iter().all(|&v| v == 0.0));
    }
}
