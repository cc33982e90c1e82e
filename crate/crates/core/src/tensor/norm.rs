use serde::{Deserialize, Serialize};

use super::{Mode, Scalar, Tensor};
use crate::error::{Error, Result};

/// Momentum and epsilon of a batch-normalization layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BnParams {
    fn default() -> Self {
        BnParams {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Saved forward state needed by [`batchnorm_backward`].
#[derive(Clone, Debug)]
pub struct BnCache<T = f32> {
    pub mode: Mode,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BnGrads<T = f32> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// `(N, C, spatial)` view of a rank-2 `[N, C]` or rank-4 `[N, C, H, W]` tensor.
fn layout<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        s => Err(Error::shape(
            "batchnorm",
            format!("expected [N,C] or [N,C,H,W], got {s:?}"),
        )),
    }
}

/// Per-channel normalization over `(N, H, W)`.
///
/// In `Train` mode the batch statistics normalize the input and the running
/// statistics move towards them (`running = (1 − m)·running + m·batch`, with
/// the unbiased variance). In `Eval` mode the running statistics are used and
/// left untouched.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    mode: Mode,
    params: BnParams,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, s) = layout(input)?;
    for (name, t) in [
        ("gamma", &*gamma),
        ("beta", &*beta),
        ("running_mean", &*running_mean),
        ("running_var", &*running_var),
    ] {
        if t.len() != c {
            return Err(Error::shape(
                "batchnorm",
                format!("{name} has length {} but input has {c} channels", t.len()),
            ));
        }
    }
    if !(params.eps > 0.0) {
        return Err(Error::invalid(
            "batchnorm",
            format!("epsilon must be positive, got {}", params.eps),
        ));
    }
    let m = n * s;
    let x = input.data();
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            if m == 0 {
                return Err(Error::EmptyBatch);
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for i in 0..n {
                    sum += x[(i * c + ch) * s..][..s]
                        .iter()
                        .map(|v| v.as_f64())
                        .sum::<f64>();
                }
                let mu = sum / m as f64;
                let mut sq = 0.0;
                for i in 0..n {
                    sq += x[(i * c + ch) * s..][..s]
                        .iter()
                        .map(|v| (v.as_f64() - mu).powi(2))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = sq / m as f64;
            }
            let unbias = if m > 1 {
                m as f64 / (m - 1) as f64
            } else {
                1.0
            };
            let mom = params.momentum;
            for ch in 0..c {
                let rm = &mut running_mean.data_mut()[ch];
                *rm = T::of((1.0 - mom) * rm.as_f64() + mom * mean[ch]);
                let rv = &mut running_var.data_mut()[ch];
                *rv = T::of((1.0 - mom) * rv.as_f64() + mom * var[ch] * unbias);
            }
            (mean, var)
        }
        Mode::Eval => (
            running_mean.data().iter().map(|v| v.as_f64()).collect(),
            running_var.data().iter().map(|v| v.as_f64()).collect(),
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + params.eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * s;
            let (mu, is) = (mean[ch], inv_std[ch]);
            let (g, b) = (gamma.data()[ch].as_f64(), beta.data()[ch].as_f64());
            for j in off..off + s {
                let xh = (x[j].as_f64() - mu) * is;
                xhat.data_mut()[j] = T::of(xh);
                out.data_mut()[j] = T::of(g * xh + b);
            }
        }
    }
    Ok((
        out,
        BnCache {
            mode,
            xhat,
            inv_std,
        },
    ))
}

pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
) -> Result<BnGrads<T>> {
    if grad_out.shape() != cache.xhat.shape() {
        return Err(Error::shape(
            "batchnorm_backward",
            format!(
                "grad_out {:?} differs from input {:?}",
                grad_out.shape(),
                cache.xhat.shape()
            ),
        ));
    }
    let (n, c, s) = layout(grad_out)?;
    let m = (n * s) as f64;
    let gy = grad_out.data();
    let xh = cache.xhat.data();
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * s;
            for j in off..off + s {
                let g = gy[j].as_f64();
                dbeta[ch] += g;
                dgamma[ch] += g * xh[j].as_f64();
            }
        }
    }
    let mut dx = Tensor::zeros(grad_out.shape());
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * s;
            let scale = gamma.data()[ch].as_f64() * cache.inv_std[ch];
            for j in off..off + s {
                let g = gy[j].as_f64();
                dx.data_mut()[j] = T::of(match cache.mode {
                    Mode::Eval => scale * g,
                    Mode::Train => scale * (g - dbeta[ch] / m - xh[j].as_f64() * dgamma[ch] / m),
                });
            }
        }
    }
    let to_tensor = |v: Vec<f64>| Tensor::from_vec(&[c], v.into_iter().map(T::of).collect());
    Ok(BnGrads {
        input: dx,
        gamma: to_tensor(dgamma)?,
        beta: to_tensor(dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(t: &Tensor<f64>, ch: usize) -> (f64, f64) {
        let (n, c, h, w) = t.dims4().unwrap();
        let s = h * w;
        let vals: Vec<f64> = (0..n)
            .flat_map(|i| t.data()[(i * c + ch) * s..][..s].to_vec())
            .collect();
        let mu = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
        (mu, var)
    }

    #[test]
    fn train_mode_output_has_beta_mean_and_gamma_sq_var() {
        let x = Tensor::<f64>::from_vec(
            &[3, 2, 2, 2],
            (0..24).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect(),
        )
        .unwrap();
        let gamma = Tensor::from_vec(&[2], vec![1.5, 0.5]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![0.25, -1.0]).unwrap();
        let mut rm = Tensor::zeros(&[2]);
        let mut rv = Tensor::full(&[2], 1.0);
        let (y, _) = batchnorm(
            &x,
            &gamma,
            &beta,
            &mut rm,
            &mut rv,
            Mode::Train,
            BnParams::default(),
        )
        .unwrap();
        for ch in 0..2 {
            let (mu, var) = stats(&y, ch);
            assert!((mu - beta.data()[ch]).abs() < 1e-4);
            assert!((var - gamma.data()[ch].powi(2)).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_with_unit_stats_is_near_identity() {
        let x = Tensor::<f64>::from_vec(&[2, 1, 1, 2], vec![0.5, -2.0, 3.0, 1.0]).unwrap();
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::full(&[1], 1.0);
        let p = BnParams {
            momentum: 0.1,
            eps: 1e-12,
        };
        let (y, _) = batchnorm(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            &mut rm,
            &mut rv,
            Mode::Eval,
            p,
        )
        .unwrap();
        assert!(y.max_abs_diff(&x) < 1e-10);
        assert_eq!(rm.data(), &[0.0]);
    }

    #[test]
    fn rejects_empty_batch_and_bad_eps() {
        let x = Tensor::<f32>::zeros(&[0, 2, 2, 2]);
        let (g, b) = (Tensor::full(&[2], 1.0), Tensor::zeros(&[2]));
        let (mut rm, mut rv) = (Tensor::zeros(&[2]), Tensor::full(&[2], 1.0));
        assert!(matches!(
            batchnorm(
                &x,
                &g,
                &b,
                &mut rm,
                &mut rv,
                Mode::Train,
                BnParams::default()
            ),
            Err(Error::EmptyBatch)
        ));
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        let p = BnParams {
            momentum: 0.1,
            eps: 0.0,
        };
        assert!(batchnorm(&x, &g, &b, &mut rm, &mut rv, Mode::Train, p).is_err());
    }
}
