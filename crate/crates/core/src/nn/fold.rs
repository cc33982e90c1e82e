//! Absorbing a per-position channel-affine map into the layers after a cut.

use super::model::ModelGraph;
use crate::error::{Error, Result};
use crate::stitching::Stitcher;
use crate::tensor::{Mode, Tensor};

/// Returns a copy of `top` whose layers after `cut` first apply
/// `y = W·x + b` to every spatial position of their input.
///
/// `weight` is `[C, C]` row-major (output channel major) and `bias` has
/// length `C`, where `C` is the channel count at `cut`. Every convolution that
/// reads the cut activation absorbs the map; the head absorbs it through the
/// global average pool. A convolution that zero-pads its input can only
/// absorb a map with zero offset, because the padded border would otherwise
/// see `b` instead of `0`.
pub fn fold_affine(
    top: &ModelGraph,
    cut: usize,
    weight: &[f64],
    bias: &[f64],
) -> Result<ModelGraph> {
    let c = top.channels_at(cut)?;
    if weight.len() != c * c || bias.len() != c {
        return Err(Error::Fold(format!(
            "map must be {c}→{c} channels to keep the architecture, got weight of {} entries and bias of {}",
            weight.len(),
            bias.len()
        )));
    }
    let mut out = top.clone();
    out.clear_cache();
    if cut == top.num_cuts() {
        let fc = &mut out.head.fc;
        let (w, b) = compose(&fc.weight.value, &fc.bias.value, weight, bias, c)?;
        fc.weight.value = w;
        fc.bias.value = b;
        return Ok(out);
    }
    let has_offset = bias.iter().any(|&v| v != 0.0);
    for conv in out.blocks[cut].entry_convs_mut() {
        if conv.padding > 0 && has_offset {
            return Err(Error::Fold(format!(
                "the convolution after cut {cut} zero-pads its input, so a nonzero offset cannot be absorbed"
            )));
        }
        let (w, b) = compose(&conv.weight.value, &conv.bias.value, weight, bias, c)?;
        conv.weight.value = w;
        conv.bias.value = b;
    }
    Ok(out)
}

/// `V' [O, C, …] = Σ_c V[O, c, …]·W[c, C]` and `b' = b + Σ V[O, c, …]·β[c]`.
fn compose(v: &Tensor, vb: &Tensor, w: &[f64], beta: &[f64], c: usize) -> Result<(Tensor, Tensor)> {
    let shape = v.shape().to_vec();
    if shape.len() < 2 || shape[1] != c {
        return Err(Error::Fold(format!(
            "layer after cut expects {:?} inputs, map produces {c}",
            shape.get(1)
        )));
    }
    let (o, spatial) = (shape[0], shape[2..].iter().product::<usize>());
    let vd = v.data();
    let mut nw = vec![0.0f64; o * c * spatial];
    let mut nb: Vec<f64> = vb.data().iter().map(|&x| x as f64).collect();
    for oo in 0..o {
        for cc in 0..c {
            for s in 0..spatial {
                let vv = vd[(oo * c + cc) * spatial + s] as f64;
                nb[oo] += vv * beta[cc];
                for ii in 0..c {
                    nw[(oo * c + ii) * spatial + s] += vv * w[cc * c + ii];
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(&shape, nw.into_iter().map(|x| x as f32).collect())?,
        Tensor::from_vec(&[o], nb.into_iter().map(|x| x as f32).collect())?,
    ))
}

/// Folds an eval-mode stitcher into `top` at `cut`.
///
/// The result has `top`'s architecture; its layers after `cut` compute
/// `top_{>cut} ∘ stitcher`. Layers up to `cut` are `top`'s own.
pub fn fold_stitcher(top: &ModelGraph, stitcher: &Stitcher, cut: usize) -> Result<ModelGraph> {
    if stitcher.mode != Mode::Eval {
        return Err(Error::Fold("stitcher must be in eval mode".into()));
    }
    let (w, b) = stitcher.as_affine()?;
    fold_affine(top, cut, &w, &b)
}
