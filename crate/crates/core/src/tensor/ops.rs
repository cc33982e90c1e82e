use super::gemm::{gemm, Transpose};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = match a.shape() {
        [m, k] => (*m, *k),
        s => {
            return Err(Error::shape(
                "matmul",
                format!("left operand must be rank 2, got {s:?}"),
            ))
        }
    };
    let n = match b.shape() {
        [bk, n] if *bk == k => *n,
        s => {
            return Err(Error::shape(
                "matmul",
                format!("inner dimension {k} does not match right operand {s:?}"),
            ))
        }
    };
    let mut c = Tensor::zeros(&[m, n]);
    gemm(
        Transpose::No,
        Transpose::No,
        m,
        n,
        k,
        T::one(),
        a.data(),
        b.data(),
        T::zero(),
        c.data_mut(),
    );
    Ok(c)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    add_assign(&mut out, b)?;
    Ok(out)
}

pub fn add_assign<T: Scalar>(a: &mut Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    a.data_mut()
        .iter_mut()
        .zip(b.data())
        .for_each(|(x, y)| *x += *y);
    Ok(())
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`] given the forward input (or output: both share the sign pattern).
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, forward: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != forward.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?} vs {:?}", grad_out.shape(), forward.shape()),
        ));
    }
    let mut g = grad_out.clone();
    g.data_mut()
        .iter_mut()
        .zip(forward.data())
        .for_each(|(g, &x)| {
            if x <= T::zero() {
                *g = T::zero()
            }
        });
    Ok(g)
}

#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// Non-overlapping `size×size` max pooling (stride = size). Ties go to the
/// first element in row-major order.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, size: usize) -> Result<(Tensor<T>, MaxPoolCache)> {
    let (n, c, h, w) = x.dims4()?;
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(Error::shape(
            "maxpool2d",
            format!("spatial extent {h}×{w} is not divisible by pool size {size}"),
        ));
    }
    let (ho, wo) = (h / size, w / size);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = vec![0; n * c * ho * wo];
    let src = x.data();
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = plane * h * w + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = plane * h * w + (oy * size + dy) * w + ox * size + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                out.data_mut()[o] = src[best];
                argmax[o] = best;
            }
        }
    }
    Ok((
        out,
        MaxPoolCache {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &MaxPoolCache,
) -> Result<Tensor<T>> {
    if grad_out.len() != cache.argmax.len() {
        return Err(Error::shape(
            "maxpool2d_backward",
            "grad_out does not match pooled output",
        ));
    }
    let mut g = Tensor::zeros(&cache.input_shape);
    for (&src, &v) in cache.argmax.iter().zip(grad_out.data()) {
        g.data_mut()[src] += v;
    }
    Ok(g)
}

/// `[N, C, H, W] → [N, C]` spatial mean.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let s = h * w;
    let data = x
        .data()
        .chunks_exact(s)
        .map(|plane| T::of(plane.iter().map(|v| v.as_f64()).sum::<f64>() / s as f64))
        .collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape else {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("input shape {input_shape:?}"),
        ));
    };
    if grad_out.shape() != [*n, *c] {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("grad_out {:?}", grad_out.shape()),
        ));
    }
    let s = h * w;
    let inv = T::of(1.0 / s as f64);
    let mut g = Tensor::zeros(input_shape);
    for (plane, &v) in g.data_mut().chunks_exact_mut(s).zip(grad_out.data()) {
        plane.fill(v * inv);
    }
    Ok(g)
}

/// `x [N, in] · Wᵀ + b` with `W [out, in]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, fin) = match x.shape() {
        [n, f] => (*n, *f),
        s => {
            return Err(Error::shape(
                "linear",
                format!("input must be [N, in], got {s:?}"),
            ))
        }
    };
    let fout = match weight.shape() {
        [o, i] if *i == fin => *o,
        s => {
            return Err(Error::shape(
                "linear",
                format!("input features {fin} do not match weight {s:?}"),
            ))
        }
    };
    if bias.len() != fout {
        return Err(Error::shape(
            "linear",
            format!("bias length {} vs {fout} outputs", bias.len()),
        ));
    }
    let mut out = Tensor::zeros(&[n, fout]);
    for row in out.data_mut().chunks_exact_mut(fout) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        Transpose::No,
        Transpose::Yes,
        n,
        fout,
        fin,
        T::one(),
        x.data(),
        weight.data(),
        T::one(),
        out.data_mut(),
    );
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (n, fin) = match x.shape() {
        [n, f] => (*n, *f),
        s => return Err(Error::shape("linear_backward", format!("input {s:?}"))),
    };
    let fout = weight.shape()[0];
    if grad_out.shape() != [n, fout] {
        return Err(Error::shape(
            "linear_backward",
            format!("grad_out {:?}", grad_out.shape()),
        ));
    }
    let mut gi = Tensor::zeros(&[n, fin]);
    gemm(
        Transpose::No,
        Transpose::No,
        n,
        fin,
        fout,
        T::one(),
        grad_out.data(),
        weight.data(),
        T::zero(),
        gi.data_mut(),
    );
    let mut gw = Tensor::zeros(&[fout, fin]);
    gemm(
        Transpose::Yes,
        Transpose::No,
        fout,
        fin,
        n,
        T::one(),
        grad_out.data(),
        x.data(),
        T::zero(),
        gw.data_mut(),
    );
    let mut gb = vec![0.0f64; fout];
    for row in grad_out.data().chunks_exact(fout) {
        for (acc, v) in gb.iter_mut().zip(row) {
            *acc += v.as_f64();
        }
    }
    Ok(LinearGrads {
        input: gi,
        weight: gw,
        bias: Tensor::from_vec(&[fout], gb.into_iter().map(T::of).collect())?,
    })
}

/// Mean cross-entropy of `logits [N, K]` against integer labels, and its
/// gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        s => {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits must be [N, K], got {s:?}"),
            ))
        }
    };
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for a batch of {n}", labels.len()),
        ));
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut grad = Tensor::zeros(&[n, k]);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, (row, &y)) in logits.data().chunks_exact(k).zip(labels).enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: k,
            });
        }
        let max = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - row[y].as_f64();
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (j, e) in exps.iter().enumerate() {
            let p = e / z - if j == y { 1.0 } else { 0.0 };
            g[j] = T::of(p * inv_n);
        }
    }
    Ok((loss * inv_n, grad))
}
