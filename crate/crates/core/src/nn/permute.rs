//! Function-preserving relabelling of the channels at a cut.

use super::blocks::BlockKind;
use super::layers::{BatchNorm2d, Conv2d};
use super::model::ModelGraph;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Reorders the outer rows of `t`: row `j` becomes old row `perm[j]`.
fn permute_rows<T: Scalar>(t: &mut Tensor<T>, perm: &[usize]) {
    let row = t.len() / perm.len();
    let old = t.data().to_vec();
    for (j, &src) in perm.iter().enumerate() {
        t.data_mut()[j * row..(j + 1) * row].copy_from_slice(&old[src * row..(src + 1) * row]);
    }
}

/// Reorders axis 1 of a `[rows, cols, ...]` tensor the same way.
fn permute_cols<T: Scalar>(t: &mut Tensor<T>, perm: &[usize]) {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let inner = t.len() / (rows * cols);
    let old = t.data().to_vec();
    for r in 0..rows {
        for (j, &src) in perm.iter().enumerate() {
            let dst = (r * cols + j) * inner;
            let from = (r * cols + src) * inner;
            t.data_mut()[dst..dst + inner].copy_from_slice(&old[from..from + inner]);
        }
    }
}

fn permute_out<T: Scalar>(conv: &mut Conv2d<T>, bn: &mut BatchNorm2d<T>, perm: &[usize]) {
    permute_rows(&mut conv.weight.value, perm);
    permute_rows(&mut conv.bias.value, perm);
    for t in [
        &mut bn.gamma.value,
        &mut bn.beta.value,
        &mut bn.running_mean,
        &mut bn.running_var,
    ] {
        permute_rows(t, perm);
    }
}

impl<T: Scalar> ModelGraph<T> {
    /// Relabels the channels of the activation at `cut` so that new channel
    /// `j` carries old channel `perm[j]`, adjusting the consumers so that
    /// the logits are unchanged.
    pub fn permute_channels_at(&mut self, cut: usize, perm: &[usize]) -> Result<()> {
        let c = self.channels_at(cut)?;
        if cut == 0 {
            return Err(Error::invalid(
                "permute_channels_at",
                "the input channels are fixed",
            ));
        }
        let mut seen = vec![false; c];
        if perm.len() != c
            || perm
                .iter()
                .any(|&p| p >= c || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::invalid(
                "permute_channels_at",
                format!("not a permutation of {c} channels"),
            ));
        }
        match &mut self.blocks[cut - 1].kind {
            BlockKind::Stem(b) => permute_out(&mut b.conv, &mut b.bn, perm),
            BlockKind::Residual(b) => {
                permute_out(&mut b.conv2, &mut b.bn2, perm);
                permute_out(&mut b.shortcut_conv, &mut b.shortcut_bn, perm);
            }
            BlockKind::Plain(b) => permute_out(&mut b.conv, &mut b.bn, perm),
        }
        if cut == self.num_cuts() {
            permute_cols(&mut self.head.fc.weight.value, perm);
        } else {
            for conv in self.blocks[cut].entry_convs_mut() {
                permute_cols(&mut conv.weight.value, perm);
            }
        }
        self.clear_cache();
        Ok(())
    }
}
