use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{BatchNorm2d, Conv2d, GradNeeds};
use crate::tensor::{Mode, Param, Tensor};

pub const STITCH_KERNELS: [usize; 5] = [1, 3, 5, 7, 9];

/// The set of maps a stitcher may range over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StitchFamily {
    Identity,
    ChannelPermutation,
    /// Optional batch norm, a `kernel×kernel` convolution padded to keep the
    /// spatial size, optional batch norm.
    ConvSandwich {
        kernel: usize,
        bn_before: bool,
        bn_after: bool,
    },
}

impl Default for StitchFamily {
    fn default() -> Self {
        StitchFamily::conv(1)
    }
}

impl StitchFamily {
    pub fn conv(kernel: usize) -> Self {
        StitchFamily::ConvSandwich {
            kernel,
            bn_before: true,
            bn_after: true,
        }
    }

    pub fn validate(&self, c_in: usize, c_out: usize) -> Result<()> {
        match *self {
            StitchFamily::Identity | StitchFamily::ChannelPermutation if c_in != c_out => {
                Err(Error::Stitch(format!(
                    "{self:?} needs equal channel counts, got {c_in} → {c_out}"
                )))
            }
            StitchFamily::ConvSandwich { kernel, .. } if !STITCH_KERNELS.contains(&kernel) => {
                Err(Error::Stitch(format!(
                    "stitching kernel {kernel} not in {STITCH_KERNELS:?}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            StitchFamily::Identity => "identity".into(),
            StitchFamily::ChannelPermutation => "permutation".into(),
            StitchFamily::ConvSandwich { kernel, .. } => format!("conv{kernel}"),
        }
    }
}

/// How the convolution of a sandwich stitcher starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StitchInit {
    /// Ridge regression of the top's activations on the bottom's.
    #[default]
    LeastSquares,
    Kaiming,
}

/// A map from the bottom's activation at a cut to the top's.
#[derive(Clone, Debug)]
pub struct Stitcher {
    pub family: StitchFamily,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Output channel `j` reads input channel `perm[j]`.
    pub perm: Vec<usize>,
    pub bn_before: Option<BatchNorm2d>,
    pub conv: Option<Conv2d>,
    pub bn_after: Option<BatchNorm2d>,
    /// `Train` while fitting; `Eval` uses the batch-norm running statistics.
    pub mode: Mode,
}

impl Stitcher {
    pub fn new(
        family: StitchFamily,
        in_channels: usize,
        out_channels: usize,
        seed: u64,
    ) -> Result<Self> {
        family.validate(in_channels, out_channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bn_before, conv, bn_after) = match family {
            StitchFamily::ConvSandwich {
                kernel,
                bn_before,
                bn_after,
            } => (
                bn_before.then(|| BatchNorm2d::new(in_channels)),
                Some(Conv2d::new(
                    in_channels,
                    out_channels,
                    kernel,
                    1,
                    kernel / 2,
                    &mut rng,
                )),
                bn_after.then(|| BatchNorm2d::new(out_channels)),
            ),
            _ => (None, None, None),
        };
        Ok(Stitcher {
            family,
            in_channels,
            out_channels,
            perm: (0..in_channels).collect(),
            bn_before,
            conv,
            bn_after,
            mode: Mode::Eval,
        })
    }

    pub fn is_trainable(&self) -> bool {
        self.conv.is_some()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(
                "stitcher",
                format!("expected {} input channels, got {c}", self.in_channels),
            ));
        }
        Ok(())
    }

    fn permute(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let s = h * w;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..n {
            for (j, &src) in self.perm.iter().enumerate() {
                out.data_mut()[(i * c + j) * s..][..s]
                    .copy_from_slice(&x.data()[(i * c + src) * s..][..s]);
            }
        }
        Ok(out)
    }

    /// Eval-mode application; leaves every statistic untouched.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        match self.family {
            StitchFamily::Identity => Ok(x.clone()),
            StitchFamily::ChannelPermutation => self.permute(x),
            StitchFamily::ConvSandwich { .. } => {
                let mut h = match &self.bn_before {
                    Some(bn) => bn.infer(x)?,
                    None => x.clone(),
                };
                h = self.conv.as_ref().expect("sandwich has a conv").infer(&h)?;
                match &self.bn_after {
                    Some(bn) => bn.infer(&h),
                    None => Ok(h),
                }
            }
        }
    }

    /// Application in `self.mode`, caching for [`Stitcher::backward`].
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mode = self.mode;
        match self.family {
            StitchFamily::Identity | StitchFamily::ChannelPermutation => self.infer(x),
            StitchFamily::ConvSandwich { .. } => {
                let mut h = match &mut self.bn_before {
                    Some(bn) => bn.forward_cached(x, mode)?,
                    None => x.clone(),
                };
                h = self
                    .conv
                    .as_mut()
                    .expect("sandwich has a conv")
                    .forward_cached(&h)?;
                match &mut self.bn_after {
                    Some(bn) => bn.forward_cached(&h, mode),
                    None => Ok(h),
                }
            }
        }
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, g: &Tensor, needs: GradNeeds) -> Result<Option<Tensor>> {
        match self.family {
            StitchFamily::Identity => Ok(needs.input.then(|| g.clone())),
            StitchFamily::ChannelPermutation => {
                if !needs.input {
                    return Ok(None);
                }
                let (n, c, h, w) = g.dims4()?;
                let s = h * w;
                let mut out = Tensor::zeros(g.shape());
                for i in 0..n {
                    for (j, &src) in self.perm.iter().enumerate() {
                        out.data_mut()[(i * c + src) * s..][..s]
                            .copy_from_slice(&g.data()[(i * c + j) * s..][..s]);
                    }
                }
                Ok(Some(out))
            }
            StitchFamily::ConvSandwich { .. } => {
                let inner = GradNeeds {
                    input: true,
                    ..needs
                };
                let g = match &mut self.bn_after {
                    Some(bn) => bn.backward_with(g, inner)?,
                    None => g.clone(),
                };
                let conv_needs = GradNeeds {
                    input: needs.input || self.bn_before.is_some() && needs.params,
                    ..needs
                };
                let g = self
                    .conv
                    .as_mut()
                    .expect("sandwich has a conv")
                    .backward_with(&g, conv_needs)?;
                match (&mut self.bn_before, g) {
                    (Some(bn), Some(g)) => {
                        let gi = bn.backward_with(&g, needs)?;
                        Ok(needs.input.then_some(gi))
                    }
                    (Some(bn), None) => {
                        bn.clear_cache();
                        Ok(None)
                    }
                    (None, g) => Ok(g),
                }
            }
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(bn) = &mut self.bn_before {
            f("stitch.bn_before.gamma", &mut bn.gamma);
            f("stitch.bn_before.beta", &mut bn.beta);
        }
        if let Some(conv) = &mut self.conv {
            f("stitch.conv.weight", &mut conv.weight);
            f("stitch.conv.bias", &mut conv.bias);
        }
        if let Some(bn) = &mut self.bn_after {
            f("stitch.bn_after.gamma", &mut bn.gamma);
            f("stitch.bn_after.beta", &mut bn.beta);
        }
    }

    /// Parameters and running statistics.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut bn_state = |name: &str, bn: &BatchNorm2d| {
            out.push((format!("stitch.{name}.gamma"), bn.gamma.value.clone()));
            out.push((format!("stitch.{name}.beta"), bn.beta.value.clone()));
            out.push((
                format!("stitch.{name}.running_mean"),
                bn.running_mean.clone(),
            ));
            out.push((format!("stitch.{name}.running_var"), bn.running_var.clone()));
        };
        if let Some(bn) = &self.bn_before {
            bn_state("bn_before", bn);
        }
        if let Some(bn) = &self.bn_after {
            bn_state("bn_after", bn);
        }
        if let Some(conv) = &self.conv {
            out.push(("stitch.conv.weight".into(), conv.weight.value.clone()));
            out.push(("stitch.conv.bias".into(), conv.bias.value.clone()));
        }
        out
    }

    /// The eval-mode map as `y = W·x + b` per spatial position, `W [out, in]`
    /// row-major. Only defined for pointwise stitchers.
    pub fn as_affine(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let (ci, co) = (self.in_channels, self.out_channels);
        match self.family {
            StitchFamily::Identity | StitchFamily::ChannelPermutation => {
                let mut w = vec![0.0; co * ci];
                for (j, &src) in self.perm.iter().enumerate() {
                    w[j * ci + src] = 1.0;
                }
                Ok((w, vec![0.0; co]))
            }
            StitchFamily::ConvSandwich { kernel, .. } => {
                if kernel != 1 {
                    return Err(Error::Fold(format!(
                        "a {kernel}×{kernel} stitcher is not a pointwise map"
                    )));
                }
                let conv = self.conv.as_ref().expect("sandwich has a conv");
                let unit = |n: usize| (vec![1.0; n], vec![0.0; n]);
                let (s0, t0) = self
                    .bn_before
                    .as_ref()
                    .map_or_else(|| unit(ci), |bn| bn.eval_affine());
                let (s1, t1) = self
                    .bn_after
                    .as_ref()
                    .map_or_else(|| unit(co), |bn| bn.eval_affine());
                let cw = conv.weight.value.data();
                let cb = conv.bias.value.data();
                let mut w = vec![0.0; co * ci];
                let mut b = vec![0.0; co];
                for o in 0..co {
                    let mut acc = cb[o] as f64;
                    for i in 0..ci {
                        let v = cw[o * ci + i] as f64;
                        w[o * ci + i] = s1[o] * v * s0[i];
                        acc += v * t0[i];
                    }
                    b[o] = s1[o] * acc + t1[o];
                }
                Ok((w, b))
            }
        }
    }

    /// Initializes from paired activations of the bottom (`x`) and top (`y`)
    /// at the cut.
    ///
    /// Sandwich: the input batch norm takes `x`'s statistics, the conv
    /// centre tap is the ridge solution of `y` on normalized `x` (other taps
    /// zero), and the output batch norm is set to reproduce the fitted values
    /// exactly in eval mode. Permutation: the assignment maximizing total
    /// channel correlation. Identity: nothing to fit.
    pub fn init_from_activations(&mut self, x: &Tensor, y: &Tensor, ridge: f64) -> Result<()> {
        self.check_input(x)?;
        let (n, ci, h, w) = x.dims4()?;
        let (ny, co, hy, wy) = y.dims4()?;
        if (n, h, w) != (ny, hy, wy) || co != self.out_channels {
            return Err(Error::shape(
                "stitcher init",
                format!(
                    "bottom {:?} and top {:?} activations do not pair up",
                    x.shape(),
                    y.shape()
                ),
            ));
        }
        let xs = Stats::of(x);
        let ys = Stats::of(y);
        match self.family {
            StitchFamily::Identity => Ok(()),
            StitchFamily::ChannelPermutation => {
                let cross = cross_cov(x, &xs, y, &ys);
                let score: Vec<f64> = (0..ci * co)
                    .map(|k| {
                        let (i, j) = (k / co, k % co);
                        cross[k] / (xs.var[i] * ys.var[j]).sqrt().max(1e-12)
                    })
                    .collect();
                self.perm = linalg::max_assignment(&score, ci);
                Ok(())
            }
            StitchFamily::ConvSandwich { kernel, .. } => {
                let eps = 1e-5;
                let (scale, shift): (Vec<f64>, Vec<f64>) = match &mut self.bn_before {
                    Some(bn) => {
                        set_bn(bn, &vec![1.0; ci], &vec![0.0; ci], &xs.mean, &xs.var);
                        (0..ci)
                            .map(|i| {
                                (
                                    1.0 / (xs.var[i] + eps).sqrt(),
                                    -xs.mean[i] / (xs.var[i] + eps).sqrt(),
                                )
                            })
                            .unzip()
                    }
                    None => (vec![1.0; ci], vec![0.0; ci]),
                };
                // Normalized input u = scale ⊙ x + shift has covariance
                // scale_i scale_j Cov(x) and mean scale ⊙ μx + shift.
                let cov = self_cov(x, &xs);
                let cross = cross_cov(x, &xs, y, &ys);
                let mut a = vec![0.0; ci * ci];
                for i in 0..ci {
                    for j in 0..ci {
                        a[i * ci + j] = scale[i] * scale[j] * cov[i * ci + j];
                    }
                }
                let trace = (0..ci).map(|i| a[i * ci + i]).sum::<f64>() / ci as f64;
                let lambda = ridge * trace.max(1e-12);
                for i in 0..ci {
                    a[i * ci + i] += lambda;
                }
                let rhs: Vec<f64> = (0..ci * co).map(|k| scale[k / co] * cross[k]).collect();
                let sol = linalg::cholesky_solve(&a, &rhs, ci, co)?; // [ci, co]
                let umean: Vec<f64> = (0..ci).map(|i| scale[i] * xs.mean[i] + shift[i]).collect();
                let conv = self.conv.as_mut().expect("sandwich has a conv");
                let mut wt = vec![0.0f32; co * ci * kernel * kernel];
                let centre = (kernel / 2) * kernel + kernel / 2;
                let mut bias = vec![0.0; co];
                for o in 0..co {
                    let mut b = ys.mean[o];
                    for i in 0..ci {
                        let v = sol[i * co + o];
                        wt[(o * ci + i) * kernel * kernel + centre] = v as f32;
                        b -= v * umean[i];
                    }
                    bias[o] = b;
                }
                conv.weight.value = Tensor::from_vec(conv.weight.value.shape(), wt)?;
                conv.bias.value =
                    Tensor::from_vec(&[co], bias.iter().map(|&v| v as f32).collect())?;
                if let Some(bn) = &mut self.bn_after {
                    // Fitted values z = Wu + b: mean ȳ, variance wᵀ Cov(u) w.
                    let var: Vec<f64> = (0..co)
                        .map(|o| {
                            let mut v = 0.0;
                            for i in 0..ci {
                                for j in 0..ci {
                                    v += sol[i * co + o]
                                        * sol[j * co + o]
                                        * (a[i * ci + j] - if i == j { lambda } else { 0.0 });
                                }
                            }
                            v.max(0.0)
                        })
                        .collect();
                    let gamma: Vec<f64> = var.iter().map(|v| (v + eps).sqrt()).collect();
                    set_bn(bn, &gamma, &ys.mean, &ys.mean, &var);
                }
                Ok(())
            }
        }
    }

    /// Kaiming start for the conv with default batch norms (already the state
    /// after [`Stitcher::new`]); kept for symmetry with the init switch.
    pub fn init_kaiming(&mut self, seed: u64) -> Result<()> {
        let fresh = Stitcher::new(self.family, self.in_channels, self.out_channels, seed)?;
        *self = Stitcher {
            mode: self.mode,
            ..fresh
        };
        Ok(())
    }

    pub fn clear_cache(&mut self) {
        if let Some(bn) = &mut self.bn_before {
            bn.clear_cache();
        }
        if let Some(c) = &mut self.conv {
            c.clear_cache();
        }
        if let Some(bn) = &mut self.bn_after {
            bn.clear_cache();
        }
    }
}

fn set_bn(bn: &mut BatchNorm2d, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) {
    let t = |v: &[f64]| {
        Tensor::from_vec(&[v.len()], v.iter().map(|&x| x as f32).collect()).expect("length matches")
    };
    bn.gamma.value = t(gamma);
    bn.beta.value = t(beta);
    bn.running_mean = t(mean);
    bn.running_var = t(var);
}

struct Stats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl Stats {
    fn of(x: &Tensor) -> Stats {
        let (n, c, h, w) = x.dims4().expect("checked rank");
        let s = h * w;
        let m = (n * s) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                mean[ch] += x.data()[(i * c + ch) * s..][..s]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for i in 0..n {
            for ch in 0..c {
                var[ch] += x.data()[(i * c + ch) * s..][..s]
                    .iter()
                    .map(|&v| (v as f64 - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        Stats { mean, var }
    }
}

/// Centered per-position channel rows of an NCHW tensor, `[N·H·W, C]`.
fn centered_rows(x: &Tensor, st: &Stats) -> (Vec<f64>, usize) {
    let (n, c, h, w) = x.dims4().expect("checked rank");
    let s = h * w;
    let mut rows = vec![0.0; n * s * c];
    for i in 0..n {
        for ch in 0..c {
            for p in 0..s {
                rows[(i * s + p) * c + ch] = x.data()[(i * c + ch) * s + p] as f64 - st.mean[ch];
            }
        }
    }
    (rows, n * s)
}

fn self_cov(x: &Tensor, xs: &Stats) -> Vec<f64> {
    let (r, m) = centered_rows(x, xs);
    let c = xs.mean.len();
    let mut out = vec![0.0; c * c];
    crate::tensor::gemm(
        crate::tensor::Transpose::Yes,
        crate::tensor::Transpose::No,
        c,
        c,
        m,
        1.0 / m as f64,
        &r,
        &r,
        0.0,
        &mut out,
    );
    out
}

/// `[Cx, Cy]` cross-covariance.
fn cross_cov(x: &Tensor, xs: &Stats, y: &Tensor, ys: &Stats) -> Vec<f64> {
    let (rx, m) = centered_rows(x, xs);
    let (ry, _) = centered_rows(y, ys);
    let (cx, cy) = (xs.mean.len(), ys.mean.len());
    let mut out = vec![0.0; cx * cy];
    crate::tensor::gemm(
        crate::tensor::Transpose::Yes,
        crate::tensor::Transpose::No,
        cx,
        cy,
        m,
        1.0 / m as f64,
        &rx,
        &ry,
        0.0,
        &mut out,
    );
    out
}
