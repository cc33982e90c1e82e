use super::gemm::{gemm, Transpose};
use super::{scratch, Scalar, Tensor};
use crate::error::{Error, Result};

/// Output extent of a convolution along one spatial axis (trailing rows that
/// do not fill a whole stride are dropped).
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid(
            "conv2d",
            "kernel and stride must be at least 1",
        ));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::shape(
            "conv2d",
            format!("kernel extent {kernel} exceeds padded input extent {padded}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

struct Geometry {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn new<T: Scalar>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (n, ci, h, w) = input.dims4()?;
        let (co, wci, kh, kw) = weight.dims4().map_err(|_| {
            Error::shape(
                "conv2d",
                format!("weight must be [Co, Ci, kh, kw], got {:?}", weight.shape()),
            )
        })?;
        if wci != ci {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {ci} do not match weight input channels {wci}"),
            ));
        }
        let ho = conv_out_dim(h, kh, stride, padding)
            .map_err(|e| Error::shape("conv2d", format!("height: {e}")))?;
        let wo = conv_out_dim(w, kw, stride, padding)
            .map_err(|e| Error::shape("conv2d", format!("width: {e}")))?;
        Ok(Geometry {
            n,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            ho,
            wo,
            stride,
            padding,
        })
    }

    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Images per matrix product, keeping the column buffer near 16 MiB of f32.
    fn chunk(&self) -> usize {
        const COL_BUDGET: usize = 1 << 22;
        (COL_BUDGET / (self.k() * self.p()).max(1)).clamp(1, self.n.max(1))
    }

    /// Length of one zero-padded image plane stack.
    fn padded_len(&self) -> usize {
        self.ci * (self.h + 2 * self.padding) * (self.w + 2 * self.padding)
    }

    /// For every column-matrix entry of one image (row-major `[k, p]`), its
    /// offset in the zero-padded image.
    fn gather_index(&self) -> Vec<usize> {
        let (hp, wp) = (self.h + 2 * self.padding, self.w + 2 * self.padding);
        let mut idx = Vec::with_capacity(self.k() * self.p());
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    for oy in 0..self.ho {
                        let base = (c * hp + oy * self.stride + ky) * wp + kx;
                        idx.extend((0..self.wo).map(|ox| base + ox * self.stride));
                    }
                }
            }
        }
        idx
    }

    /// The zero-padded copy of `img`, or `img` itself without padding.
    /// `buf` must hold zeros outside the interior.
    fn padded<'a, T: Scalar>(&self, img: &'a [T], buf: &'a mut [T]) -> &'a [T] {
        if self.padding == 0 {
            return img;
        }
        let (hp, wp) = (self.h + 2 * self.padding, self.w + 2 * self.padding);
        for c in 0..self.ci {
            for y in 0..self.h {
                let dst = (c * hp + y + self.padding) * wp + self.padding;
                buf[dst..dst + self.w].copy_from_slice(&img[(c * self.h + y) * self.w..][..self.w]);
            }
        }
        buf
    }

    /// Writes the column matrix of the padded image `src` into `col`, whose
    /// rows have stride `ld`, starting at column `off`.
    fn im2col<T: Scalar>(&self, idx: &[usize], src: &[T], col: &mut [T], ld: usize, off: usize) {
        let p = self.p();
        for (r, ids) in idx.chunks_exact(p).enumerate() {
            for (d, &i) in col[r * ld + off..][..p].iter_mut().zip(ids) {
                *d = src[i];
            }
        }
    }

    /// Adds the column matrix (laid out as in [`Geometry::im2col`]) back onto
    /// `img`, using `pad` (of [`Geometry::padded_len`]) as workspace.
    fn col2im_add<T: Scalar>(
        &self,
        idx: &[usize],
        col: &[T],
        ld: usize,
        off: usize,
        pad: &mut [T],
        img: &mut [T],
    ) {
        let p = self.p();
        let target: &mut [T] = if self.padding == 0 {
            img
        } else {
            pad.fill(T::zero());
            pad
        };
        for (r, ids) in idx.chunks_exact(p).enumerate() {
            for (&v, &i) in col[r * ld + off..][..p].iter().zip(ids) {
                target[i] += v;
            }
        }
        if self.padding == 0 {
            return;
        }
        let (hp, wp) = (self.h + 2 * self.padding, self.w + 2 * self.padding);
        for c in 0..self.ci {
            for y in 0..self.h {
                let from = (c * hp + y + self.padding) * wp + self.padding;
                let row = &mut img[(c * self.h + y) * self.w..][..self.w];
                for (d, &v) in row.iter_mut().zip(&pad[from..from + self.w]) {
                    *d += v;
                }
            }
        }
    }
}

/// Cross-correlation of an NCHW batch with `[Co, Ci, kh, kw]` filters via
/// im2col and a matrix product.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input, weight, stride, padding)?;
    if bias.len() != g.co {
        return Err(Error::shape(
            "conv2d",
            format!(
                "bias length {} does not match output channels {}",
                bias.len(),
                g.co
            ),
        ));
    }
    let (k, p) = (g.k(), g.p());
    let in_stride = g.ci * g.h * g.w;
    let nb = g.chunk();
    let mut out = Tensor::zeros(&[g.n, g.co, g.ho, g.wo]);
    let mut col = scratch::take::<T>(k * nb * p);
    let mut tmp = scratch::take::<T>(g.co * nb * p);
    let mut pad = scratch::take::<T>(g.padded_len());
    pad.fill(T::zero());
    let idx = g.gather_index();
    for start in (0..g.n).step_by(nb) {
        let m = nb.min(g.n - start);
        let cols = m * p;
        for j in 0..m {
            let img = &input.data()[(start + j) * in_stride..][..in_stride];
            g.im2col(&idx, g.padded(img, &mut pad), &mut col, cols, j * p);
        }
        gemm(
            Transpose::No,
            Transpose::No,
            g.co,
            cols,
            k,
            T::one(),
            weight.data(),
            &col[..k * cols],
            T::zero(),
            &mut tmp[..g.co * cols],
        );
        let dst = &mut out.data_mut()[start * g.co * p..(start + m) * g.co * p];
        for j in 0..m {
            for c in 0..g.co {
                let b = bias.data()[c];
                let src = &tmp[c * cols + j * p..][..p];
                for (d, &v) in dst[(j * g.co + c) * p..][..p].iter_mut().zip(src) {
                    *d = v + b;
                }
            }
        }
    }
    scratch::give(col);
    scratch::give(tmp);
    scratch::give(pad);
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its three inputs.
#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads<T>> {
    let mut grads = ConvGrads {
        input: Tensor::zeros(input.shape()),
        weight: Tensor::zeros(weight.shape()),
        bias: Tensor::zeros(&[weight.shape()[0]]),
    };
    conv2d_backward_into(
        grad_out,
        input,
        weight,
        stride,
        padding,
        Some(&mut grads.input),
        Some((&mut grads.weight, &mut grads.bias)),
    )?;
    Ok(grads)
}

/// Accumulates (adds) the requested gradients into the given buffers.
/// Skipping the parameter gradients saves one matrix product per image,
/// which matters when back-propagating through frozen layers.
pub(crate) fn conv2d_backward_into<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    mut grad_input: Option<&mut Tensor<T>>,
    mut grad_params: Option<(&mut Tensor<T>, &mut Tensor<T>)>,
) -> Result<()> {
    let g = Geometry::new(input, weight, stride, padding)?;
    let expected = [g.n, g.co, g.ho, g.wo];
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out shape {:?} differs from forward output {expected:?}",
                grad_out.shape()
            ),
        ));
    }
    let (k, p) = (g.k(), g.p());
    let in_stride = g.ci * g.h * g.w;
    let nb = g.chunk();
    let mut col = scratch::take::<T>(if grad_params.is_some() { k * nb * p } else { 0 });
    let mut gcol = scratch::take::<T>(if grad_input.is_some() { k * nb * p } else { 0 });
    let mut gbuf = scratch::take::<T>(g.co * nb * p);
    let mut pad = scratch::take::<T>(g.padded_len());
    pad.fill(T::zero());
    let mut gpad = scratch::take::<T>(g.padded_len());
    let idx = g.gather_index();
    for start in (0..g.n).step_by(nb) {
        let m = nb.min(g.n - start);
        let cols = m * p;
        // grad_out of the chunk as a [Co, m·p] matrix.
        for j in 0..m {
            for c in 0..g.co {
                gbuf[c * cols + j * p..][..p]
                    .copy_from_slice(&grad_out.data()[((start + j) * g.co + c) * p..][..p]);
            }
        }
        let gmat = &gbuf[..g.co * cols];
        if let Some((gw, gb)) = grad_params.as_mut() {
            for j in 0..m {
                let img = &input.data()[(start + j) * in_stride..][..in_stride];
                g.im2col(&idx, g.padded(img, &mut pad), &mut col, cols, j * p);
            }
            gemm(
                Transpose::No,
                Transpose::Yes,
                g.co,
                k,
                cols,
                T::one(),
                gmat,
                &col[..k * cols],
                T::one(),
                gw.data_mut(),
            );
            for (c, row) in gmat.chunks_exact(cols).enumerate() {
                let s: f64 = row.iter().map(|v| v.as_f64()).sum();
                gb.data_mut()[c] += T::of(s);
            }
        }
        if let Some(gi) = grad_input.as_mut() {
            gemm(
                Transpose::Yes,
                Transpose::No,
                k,
                cols,
                g.co,
                T::one(),
                weight.data(),
                gmat,
                T::zero(),
                &mut gcol[..k * cols],
            );
            for j in 0..m {
                let dst = &mut gi.data_mut()[(start + j) * in_stride..][..in_stride];
                g.col2im_add(&idx, &gcol, cols, j * p, &mut gpad, dst);
            }
        }
    }
    scratch::give(col);
    scratch::give(gcol);
    scratch::give(gbuf);
    scratch::give(pad);
    scratch::give(gpad);
    Ok(())
}
