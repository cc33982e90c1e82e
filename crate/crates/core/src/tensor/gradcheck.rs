//! Central finite-difference checks of analytic backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Param, Scalar, Tensor};
use crate::error::Result;

/// A block with an analytic backward pass.
///
/// `forward` may cache whatever `backward` needs; `backward` returns the
/// gradient with respect to the input and *accumulates* parameter gradients
/// into the [`Param`]s reachable through `visit_params`.
pub trait Differentiable<T: Scalar> {
    fn label(&self) -> String;
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>));
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_abs_error: f64,
    pub max_grad: f64,
}

/// Outcome of [`grad_check`].
///
/// `max_rel_error` is the largest absolute discrepancy between analytic and
/// numeric gradients over every checked tensor, divided by the largest
/// gradient magnitude seen anywhere in the check. Normalizing by the global
/// gradient scale keeps parameters whose true gradient vanishes (a conv bias
/// feeding a train-mode batch norm) from turning rounding noise into a
/// spurious failure.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub layer: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub tensors: Vec<TensorCheck>,
}

fn projected_loss<T: Scalar>(out: &Tensor<T>, proj: &[f64]) -> f64 {
    out.data()
        .iter()
        .zip(proj)
        .map(|(o, r)| o.as_f64() * r)
        .sum()
}

/// Compares the analytic gradients of `L(x, θ) = Σ r ⊙ layer(x)` (fixed
/// random `r`) against central differences with the given step, over every
/// input element and every parameter element.
pub fn grad_check<T: Scalar, L: Differentiable<T> + ?Sized>(
    layer: &mut L,
    input: &Tensor<T>,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let out = layer.forward(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<f64> = (0..out.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let proj_t = Tensor::from_vec(out.shape(), proj.iter().map(|&v| T::of(v)).collect())?;

    layer.visit_params(&mut |_, p| p.zero_grad());
    let analytic_input = layer.backward(&proj_t)?;
    let mut analytic_params: Vec<(String, Tensor<T>)> = Vec::new();
    layer.visit_params(&mut |name, p| analytic_params.push((name.to_string(), p.grad.clone())));

    let h = T::of(step);
    let mut tensors = Vec::new();

    let mut x = input.clone();
    let mut numeric = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x.data()[i];
        let (up, down) = (orig + h, orig - h);
        x.data_mut()[i] = up;
        let plus = projected_loss(&layer.forward(&x)?, &proj);
        x.data_mut()[i] = down;
        let minus = projected_loss(&layer.forward(&x)?, &proj);
        x.data_mut()[i] = orig;
        numeric[i] = (plus - minus) / (up.as_f64() - down.as_f64());
    }
    tensors.push(compare("input", analytic_input.data(), &numeric));

    for (idx, (name, analytic)) in analytic_params.iter().enumerate() {
        let mut numeric = vec![0.0; analytic.len()];
        for i in 0..analytic.len() {
            let mut losses = [0.0; 2];
            let mut moved = [T::zero(); 2];
            for (slot, sign) in [(0, T::one()), (1, -T::one())] {
                let mut orig = T::zero();
                set_param_element(layer, idx, i, |v| {
                    orig = v;
                    moved[slot] = v + sign * h;
                    moved[slot]
                });
                losses[slot] = projected_loss(&layer.forward(input)?, &proj);
                set_param_element(layer, idx, i, |_| orig);
            }
            numeric[i] = (losses[0] - losses[1]) / (moved[0].as_f64() - moved[1].as_f64());
        }
        tensors.push(compare(name, analytic.data(), &numeric));
    }

    let scale = tensors.iter().map(|t| t.max_grad).fold(0.0, f64::max);
    let worst = tensors.iter().map(|t| t.max_abs_error).fold(0.0, f64::max);
    let max_rel_error = if scale > 0.0 { worst / scale } else { worst };
    Ok(GradCheckReport {
        layer: layer.label(),
        max_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
        tensors,
    })
}

fn set_param_element<T: Scalar, L: Differentiable<T> + ?Sized>(
    layer: &mut L,
    param: usize,
    elem: usize,
    mut f: impl FnMut(T) -> T,
) {
    let mut k = 0;
    layer.visit_params(&mut |_, p| {
        if k == param {
            let v = p.value.data()[elem];
            p.value.data_mut()[elem] = f(v);
        }
        k += 1;
    });
}

fn compare<T: Scalar>(name: &str, analytic: &[T], numeric: &[f64]) -> TensorCheck {
    let mut max_abs_error: f64 = 0.0;
    let mut max_grad: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        let a = a.as_f64();
        max_abs_error = max_abs_error.max((a - n).abs());
        max_grad = max_grad.max(a.abs()).max(n.abs());
    }
    TensorCheck {
        name: name.to_string(),
        max_abs_error,
        max_grad,
    }
}
