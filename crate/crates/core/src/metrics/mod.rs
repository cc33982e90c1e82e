//! Linear centered kernel alignment between representations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{subset, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::ModelGraph;
use crate::tensor::{gemm, Tensor, Transpose};

/// Default number of examples a CKA estimate uses.
pub const CKA_EXAMPLES: usize = 2048;

/// How a `C×H×W` activation becomes a feature vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Spatial mean per channel: `d = C`.
    #[default]
    Pool,
    /// The whole activation: `d = C·H·W`.
    Flatten,
}

/// `n` examples by `d` features, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ReprMatrix {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl ReprMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(
                "repr",
                format!("need at least 2 examples, got {n}"),
            ));
        }
        if data.len() != n * d {
            return Err(Error::shape(
                "repr",
                format!("{} values for {n}×{d}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "repr" });
        }
        Ok(ReprMatrix { n, d, data })
    }

    /// Rows of an `[N, ...]` tensor.
    pub fn from_activations(act: &Tensor, pooling: Pooling) -> Result<Self> {
        let n = act.shape().first().copied().unwrap_or(0);
        let per = act.len() / n.max(1);
        let data: Vec<f64> = match (pooling, act.ndim()) {
            (Pooling::Pool, 4) => {
                let (_, c, h, w) = act.dims4()?;
                let s = h * w;
                act.data()
                    .chunks_exact(s)
                    .map(|plane| plane.iter().map(|&v| v as f64).sum::<f64>() / s as f64)
                    .collect::<Vec<_>>()
                    .chunks_exact(c)
                    .flat_map(|r| r.to_vec())
                    .collect()
            }
            _ => act.data().iter().map(|&v| v as f64).collect(),
        };
        let d = if n == 0 { 0 } else { data.len() / n };
        debug_assert!(pooling == Pooling::Pool || d == per);
        ReprMatrix::new(n, d, data)
    }

    /// Columns minus their means.
    fn centered(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.d];
        for row in self.data.chunks_exact(self.d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= self.n as f64);
        let mut out = self.data.clone();
        for row in out.chunks_exact_mut(self.d) {
            row.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
        }
        out
    }
}

/// Representation of the first `max_n` examples of `ds` at `cut`.
pub fn extract_repr(
    model: &ModelGraph,
    cut: usize,
    ds: &LabeledDataset,
    pooling: Pooling,
    max_n: usize,
) -> Result<ReprMatrix> {
    if max_n > ds.len() {
        return Err(Error::invalid(
            "extract_repr",
            format!("{max_n} examples requested from a set of {}", ds.len()),
        ));
    }
    let images = ds.images.slice_outer(0, max_n)?;
    let act = model.activations_in_batches(cut, &images, 500)?;
    ReprMatrix::from_activations(&act, pooling)
}

fn frob_sq(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// `AᵀB` for centered `A [n×p]`, `B [n×q]`.
fn cross(a: &[f64], b: &[f64], n: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    gemm(
        Transpose::Yes,
        Transpose::No,
        p,
        q,
        n,
        1.0,
        a,
        b,
        0.0,
        &mut out,
    );
    out
}

/// `A Aᵀ` for `A [n×p]`.
fn gram(a: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    gemm(
        Transpose::No,
        Transpose::Yes,
        n,
        n,
        p,
        1.0,
        a,
        a,
        0.0,
        &mut out,
    );
    out
}

/// `‖XᵀY‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F)` on centered features, clamped to `[0, 1]`.
///
/// Evaluated through feature covariances or example Gram matrices,
/// whichever is cheaper; the two agree algebraically.
pub fn linear_cka(x: &ReprMatrix, y: &ReprMatrix) -> Result<f64> {
    if x.n != y.n {
        return Err(Error::shape(
            "linear_cka",
            format!("{} vs {} examples", x.n, y.n),
        ));
    }
    let n = x.n;
    let (xc, yc) = (x.centered(), y.centered());
    let (dx, dy) = (x.d, y.d);
    let cov_cost = dx * dy + dx * dx + dy * dy;
    let gram_cost = n * (dx + dy) + n * n;
    let (num, sx, sy) = if cov_cost <= gram_cost {
        let sx = frob_sq(&cross(&xc, &xc, n, dx, dx)).sqrt();
        let sy = frob_sq(&cross(&yc, &yc, n, dy, dy)).sqrt();
        (frob_sq(&cross(&xc, &yc, n, dx, dy)), sx, sy)
    } else {
        let (kx, ky) = (gram(&xc, n, dx), gram(&yc, n, dy));
        // ‖XᵀY‖²_F = tr(K_X K_Y) = Σ K_X ∘ K_Y for symmetric Gram matrices.
        let num: f64 = kx.iter().zip(&ky).map(|(a, b)| a * b).sum();
        (num, frob_sq(&kx).sqrt(), frob_sq(&ky).sqrt())
    };
    if sx == 0.0 || sy == 0.0 {
        return Err(Error::Degenerate("a representation has no variance".into()));
    }
    Ok((num / (sx * sy)).clamp(0.0, 1.0))
}

/// `x` with `k` standard-normal columns appended.
pub fn augment_spurious(x: &ReprMatrix, k: usize, seed: u64) -> ReprMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = x.d + k;
    let mut data = Vec::with_capacity(x.n * d);
    for row in x.data.chunks_exact(x.d.max(1)).take(x.n) {
        data.extend_from_slice(&row[..x.d]);
        data.extend((0..k).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
    }
    ReprMatrix { n: x.n, d, data }
}

/// CKA between `a` and `b` at every cut, on at most `max_n` examples drawn
/// from `ds` with `seed`.
pub fn cka_curve(
    a: &ModelGraph,
    b: &ModelGraph,
    ds: &LabeledDataset,
    pooling: Pooling,
    max_n: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if a.num_cuts() != b.num_cuts() {
        return Err(Error::invalid(
            "cka_curve",
            "models have different cut counts",
        ));
    }
    let picked;
    let ds = if ds.len() > max_n {
        picked = subset(ds, max_n, seed)?;
        &picked
    } else {
        ds
    };
    (0..=a.num_cuts())
        .map(|cut| {
            let x = extract_repr(a, cut, ds, pooling, ds.len())?;
            let y = extract_repr(b, cut, ds, pooling, ds.len())?;
            Ok((cut, linear_cka(&x, &y)?))
        })
        .collect()
}
