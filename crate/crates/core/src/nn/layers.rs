//! Parameterized layers with cached forward state for their backward pass.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::gradcheck::Differentiable;
use crate::tensor::{self, BnCache, BnParams, Mode, Param, Scalar, Tensor};

/// Which gradients a backward pass has to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradNeeds {
    pub input: bool,
    pub params: bool,
}

impl GradNeeds {
    pub const ALL: GradNeeds = GradNeeds {
        input: true,
        params: true,
    };
}

fn kaiming<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    let std = (gain / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}

#[derive(Clone, Debug)]
pub struct Conv2d<T = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Kaiming fan-in initialization (`std = √(2 / (Ci·kh·kw))`), zero bias.
    pub fn new<R: Rng>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        Self::from_parts(
            kaiming(&[cout, cin, kernel, kernel], fan_in, 2.0, rng),
            Tensor::zeros(&[cout]),
            stride,
            padding,
        )
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight: Param::new(weight),
            bias: Param::new(bias),
            stride,
            padding,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::conv2d(
            x,
            &self.weight.value,
            &self.bias.value,
            self.stride,
            self.padding,
        )
    }

    pub fn forward_cached(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward_with(
        &mut self,
        grad_out: &Tensor<T>,
        needs: GradNeeds,
    ) -> Result<Option<Tensor<T>>> {
        let input = self.input.take().ok_or(Error::MissingCache("conv"))?;
        let mut gi = needs.input.then(|| Tensor::zeros(input.shape()));
        let params = needs
            .params
            .then_some((&mut self.weight.grad, &mut self.bias.grad));
        tensor::conv::conv2d_backward_into(
            grad_out,
            &input,
            &self.weight.value,
            self.stride,
            self.padding,
            gi.as_mut(),
            params,
        )?;
        Ok(gi)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.input = None;
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub params: BnParams,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            params: BnParams::default(),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Eval-mode normalization without touching any state.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut rm = self.running_mean.clone();
        let mut rv = self.running_var.clone();
        let (y, _) = tensor::batchnorm(
            x,
            &self.gamma.value,
            &self.beta.value,
            &mut rm,
            &mut rv,
            Mode::Eval,
            self.params,
        )?;
        Ok(y)
    }

    pub fn forward_cached(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (y, cache) = tensor::batchnorm(
            x,
            &self.gamma.value,
            &self.beta.value,
            &mut self.running_mean,
            &mut self.running_var,
            mode,
            self.params,
        )?;
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn backward_with(&mut self, grad_out: &Tensor<T>, needs: GradNeeds) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(Error::MissingCache("batchnorm"))?;
        let g = tensor::batchnorm_backward(grad_out, &cache, &self.gamma.value)?;
        if needs.params {
            tensor::add_assign(&mut self.gamma.grad, &g.gamma)?;
            tensor::add_assign(&mut self.beta.grad, &g.beta)?;
        }
        Ok(g.input)
    }

    /// Per-channel `(scale, shift)` of the eval-mode map `y = scale·x + shift`.
    pub fn eval_affine(&self) -> (Vec<f64>, Vec<f64>) {
        (0..self.channels())
            .map(|c| {
                let inv = 1.0 / (self.running_var.data()[c].as_f64() + self.params.eps).sqrt();
                let g = self.gamma.value.data()[c].as_f64();
                let scale = g * inv;
                let shift = self.beta.value.data()[c].as_f64()
                    - self.running_mean.data()[c].as_f64() * scale;
                (scale, shift)
            })
            .unzip()
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Fan-in normal initialization with unit gain, zero bias.
    pub fn new<R: Rng>(fin: usize, fout: usize, rng: &mut R) -> Self {
        Self::from_parts(kaiming(&[fout, fin], fin, 1.0, rng), Tensor::zeros(&[fout]))
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Self {
        Linear {
            weight: Param::new(weight),
            bias: Param::new(bias),
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::linear(x, &self.weight.value, &self.bias.value)
    }

    pub fn forward_cached(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward_with(&mut self, grad_out: &Tensor<T>, needs: GradNeeds) -> Result<Tensor<T>> {
        let input = self.input.take().ok_or(Error::MissingCache("linear"))?;
        let g = tensor::linear_backward(grad_out, &input, &self.weight.value)?;
        if needs.params {
            tensor::add_assign(&mut self.weight.grad, &g.weight)?;
            tensor::add_assign(&mut self.bias.grad, &g.bias)?;
        }
        Ok(g.input)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.input = None;
    }
}

impl<T: Scalar> Differentiable<T> for Linear<T> {
    fn label(&self) -> String {
        format!(
            "linear {}→{}",
            self.in_features(),
            self.weight.value.shape()[0]
        )
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_cached(x)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        self.backward_with(grad_out, GradNeeds::ALL)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

impl<T: Scalar> Differentiable<T> for Conv2d<T> {
    fn label(&self) -> String {
        let k = self.kernel();
        format!(
            "conv{k}x{k} {}→{} s{} p{}",
            self.in_channels(),
            self.out_channels(),
            self.stride,
            self.padding
        )
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_cached(x)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self
            .backward_with(grad_out, GradNeeds::ALL)?
            .expect("input gradient requested"))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

/// A batch-norm layer pinned to one mode, for gradient checking.
pub struct ModalBatchNorm<T: Scalar> {
    pub bn: BatchNorm2d<T>,
    pub mode: Mode,
}

impl<T: Scalar> Differentiable<T> for ModalBatchNorm<T> {
    fn label(&self) -> String {
        format!("batchnorm({}) {:?}", self.bn.channels(), self.mode)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.bn.forward_cached(x, self.mode)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        self.bn.backward_with(grad_out, GradNeeds::ALL)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f("gamma", &mut self.bn.gamma);
        f("beta", &mut self.bn.beta);
    }
}
