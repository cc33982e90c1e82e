use rand::Rng;

use super::layers::{BatchNorm2d, Conv2d, GradNeeds, Linear};
use crate::error::{Error, Result};
use crate::tensor::gradcheck::Differentiable;
use crate::tensor::{self, MaxPoolCache, Mode, Param, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct StemBlock<T = f32> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    out: Option<Tensor<T>>,
}

/// `relu(bn2(conv3x3(relu(bn1(conv1x1(x))))) + bn_s(conv1x1(x)))`.
///
/// Both branches enter through a 1×1 convolution, so any channel-affine map
/// applied to the block input can be absorbed exactly into the block.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T = f32> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub shortcut_conv: Conv2d<T>,
    pub shortcut_bn: BatchNorm2d<T>,
    hidden: Option<Tensor<T>>,
    out: Option<Tensor<T>>,
}

/// `maxpool2(relu(bn(conv3x3(x))))`.
#[derive(Clone, Debug)]
pub struct PlainBlock<T = f32> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    act: Option<Tensor<T>>,
    pool: Option<MaxPoolCache>,
}

#[derive(Clone, Debug)]
pub enum BlockKind<T = f32> {
    Stem(StemBlock<T>),
    Residual(ResidualBlock<T>),
    Plain(PlainBlock<T>),
}

/// One unit between two cut points.
#[derive(Clone, Debug)]
pub struct Block<T = f32> {
    pub name: String,
    pub kind: BlockKind<T>,
    /// Frozen blocks run batch norm in eval mode and never accumulate
    /// parameter gradients.
    pub frozen: bool,
}

impl<T: Scalar> StemBlock<T> {
    pub fn new<R: Rng>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        StemBlock {
            conv: Conv2d::new(cin, cout, kernel, stride, padding, rng),
            bn: BatchNorm2d::new(cout),
            out: None,
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(tensor::relu(&self.bn.infer(&self.conv.infer(x)?)?))
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = tensor::relu(
            &self
                .bn
                .forward_cached(&self.conv.forward_cached(x)?, mode)?,
        );
        self.out = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor<T>, needs: GradNeeds) -> Result<Option<Tensor<T>>> {
        let out = self.out.take().ok_or(Error::MissingCache("stem"))?;
        let g = tensor::relu_backward(g, &out)?;
        let g = self.bn.backward_with(
            &g,
            GradNeeds {
                input: true,
                ..needs
            },
        )?;
        self.conv.backward_with(&g, needs)
    }
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(cin, cout, 1, 1, 0, rng),
            bn1: BatchNorm2d::new(cout),
            conv2: Conv2d::new(cout, cout, 3, stride, 1, rng),
            bn2: BatchNorm2d::new(cout),
            shortcut_conv: Conv2d::new(cin, cout, 1, stride, 0, rng),
            shortcut_bn: BatchNorm2d::new(cout),
            hidden: None,
            out: None,
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = tensor::relu(&self.bn1.infer(&self.conv1.infer(x)?)?);
        let mut main = self.bn2.infer(&self.conv2.infer(&h)?)?;
        let short = self.shortcut_bn.infer(&self.shortcut_conv.infer(x)?)?;
        tensor::add_assign(&mut main, &short)?;
        Ok(tensor::relu(&main))
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = tensor::relu(
            &self
                .bn1
                .forward_cached(&self.conv1.forward_cached(x)?, mode)?,
        );
        let mut main = self
            .bn2
            .forward_cached(&self.conv2.forward_cached(&h)?, mode)?;
        let short = self
            .shortcut_bn
            .forward_cached(&self.shortcut_conv.forward_cached(x)?, mode)?;
        tensor::add_assign(&mut main, &short)?;
        let out = tensor::relu(&main);
        self.hidden = Some(h);
        self.out = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, g: &Tensor<T>, needs: GradNeeds) -> Result<Option<Tensor<T>>> {
        let out = self.out.take().ok_or(Error::MissingCache("residual"))?;
        let hidden = self.hidden.take().ok_or(Error::MissingCache("residual"))?;
        let g = tensor::relu_backward(g, &out)?;
        let inner = GradNeeds {
            input: true,
            ..needs
        };
        let gm = self.bn2.backward_with(&g, inner)?;
        let gh = self
            .conv2
            .backward_with(&gm, inner)?
            .expect("input gradient requested");
        let gh = tensor::relu_backward(&gh, &hidden)?;
        let gh = self.bn1.backward_with(&gh, inner)?;
        let gx_main = self.conv1.backward_with(&gh, needs)?;
        let gs = self.shortcut_bn.backward_with(&g, inner)?;
        let gx_short = self.shortcut_conv.backward_with(&gs, needs)?;
        Ok(match (gx_main, gx_short) {
            (Some(mut a), Some(b)) => {
                tensor::add_assign(&mut a, &b)?;
                Some(a)
            }
            _ => None,
        })
    }
}

impl<T: Scalar> PlainBlock<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        PlainBlock {
            conv: Conv2d::new(cin, cout, 3, 1, 1, rng),
            bn: BatchNorm2d::new(cout),
            act: None,
            pool: None,
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let a = tensor::relu(&self.bn.infer(&self.conv.infer(x)?)?);
        Ok(tensor::maxpool2d(&a, 2)?.0)
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let a = tensor::relu(
            &self
                .bn
                .forward_cached(&self.conv.forward_cached(x)?, mode)?,
        );
        let (y, cache) = tensor::maxpool2d(&a, 2)?;
        self.act = Some(a);
        self.pool = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor<T>, needs: GradNeeds) -> Result<Option<Tensor<T>>> {
        let pool = self.pool.take().ok_or(Error::MissingCache("plain"))?;
        let act = self.act.take().ok_or(Error::MissingCache("plain"))?;
        let g = tensor::maxpool2d_backward(g, &pool)?;
        let g = tensor::relu_backward(&g, &act)?;
        let g = self.bn.backward_with(
            &g,
            GradNeeds {
                input: true,
                ..needs
            },
        )?;
        self.conv.backward_with(&g, needs)
    }
}

impl<T: Scalar> Block<T> {
    pub fn new(name: impl Into<String>, kind: BlockKind<T>) -> Self {
        Block {
            name: name.into(),
            kind,
            frozen: false,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.kind {
            BlockKind::Stem(b) => b.infer(x),
            BlockKind::Residual(b) => b.infer(x),
            BlockKind::Plain(b) => b.infer(x),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mode = if self.frozen { Mode::Eval } else { mode };
        match &mut self.kind {
            BlockKind::Stem(b) => b.forward(x, mode),
            BlockKind::Residual(b) => b.forward(x, mode),
            BlockKind::Plain(b) => b.forward(x, mode),
        }
    }

    /// Back-propagates `g`; returns the input gradient when `needs.input`.
    pub fn backward(&mut self, g: &Tensor<T>, needs: GradNeeds) -> Result<Option<Tensor<T>>> {
        let needs = GradNeeds {
            params: needs.params && !self.frozen,
            ..needs
        };
        match &mut self.kind {
            BlockKind::Stem(b) => b.backward(g, needs),
            BlockKind::Residual(b) => b.backward(g, needs),
            BlockKind::Plain(b) => b.backward(g, needs),
        }
    }

    fn layers_mut(
        &mut self,
    ) -> (
        Vec<(&'static str, &mut Conv2d<T>)>,
        Vec<(&'static str, &mut BatchNorm2d<T>)>,
    ) {
        match &mut self.kind {
            BlockKind::Stem(b) => (vec![("conv", &mut b.conv)], vec![("bn", &mut b.bn)]),
            BlockKind::Residual(b) => (
                vec![
                    ("conv1", &mut b.conv1),
                    ("conv2", &mut b.conv2),
                    ("shortcut_conv", &mut b.shortcut_conv),
                ],
                vec![
                    ("bn1", &mut b.bn1),
                    ("bn2", &mut b.bn2),
                    ("shortcut_bn", &mut b.shortcut_bn),
                ],
            ),
            BlockKind::Plain(b) => (vec![("conv", &mut b.conv)], vec![("bn", &mut b.bn)]),
        }
    }

    /// Trainable parameters, named `<block>.<layer>.<param>`.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        let name = self.name.clone();
        let (convs, bns) = self.layers_mut();
        for (layer, conv) in convs {
            f(&format!("{name}.{layer}.weight"), &mut conv.weight);
            f(&format!("{name}.{layer}.bias"), &mut conv.bias);
        }
        for (layer, bn) in bns {
            f(&format!("{name}.{layer}.gamma"), &mut bn.gamma);
            f(&format!("{name}.{layer}.beta"), &mut bn.beta);
        }
    }

    /// Every persistent tensor (parameters and running statistics).
    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        let name = self.name.clone();
        let (convs, bns) = self.layers_mut();
        for (layer, conv) in convs {
            f(&format!("{name}.{layer}.weight"), &mut conv.weight.value);
            f(&format!("{name}.{layer}.bias"), &mut conv.bias.value);
        }
        for (layer, bn) in bns {
            f(&format!("{name}.{layer}.gamma"), &mut bn.gamma.value);
            f(&format!("{name}.{layer}.beta"), &mut bn.beta.value);
            f(
                &format!("{name}.{layer}.running_mean"),
                &mut bn.running_mean,
            );
            f(&format!("{name}.{layer}.running_var"), &mut bn.running_var);
        }
    }

    /// Convolutions that read the block input directly.
    pub fn entry_convs_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        match &mut self.kind {
            BlockKind::Stem(b) => vec![&mut b.conv],
            BlockKind::Residual(b) => vec![&mut b.conv1, &mut b.shortcut_conv],
            BlockKind::Plain(b) => vec![&mut b.conv],
        }
    }

    pub fn clear_cache(&mut self) {
        let (convs, bns) = self.layers_mut();
        convs.into_iter().for_each(|(_, c)| c.clear_cache());
        bns.into_iter().for_each(|(_, b)| b.clear_cache());
        match &mut self.kind {
            BlockKind::Stem(b) => b.out = None,
            BlockKind::Residual(b) => {
                b.hidden = None;
                b.out = None;
            }
            BlockKind::Plain(b) => {
                b.act = None;
                b.pool = None;
            }
        }
    }
}

/// Global average pooling followed by a linear classifier.
#[derive(Clone, Debug)]
pub struct Head<T = f32> {
    pub fc: Linear<T>,
    pub frozen: bool,
    input_shape: Option<Vec<usize>>,
}

impl<T: Scalar> Head<T> {
    pub fn new<R: Rng>(features: usize, classes: usize, rng: &mut R) -> Self {
        Head {
            fc: Linear::new(features, classes, rng),
            frozen: false,
            input_shape: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc.infer(&tensor::global_avg_pool(x)?)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.input_shape = Some(x.shape().to_vec());
        self.fc.forward_cached(&tensor::global_avg_pool(x)?)
    }

    pub fn backward(&mut self, g: &Tensor<T>, needs: GradNeeds) -> Result<Tensor<T>> {
        let shape = self.input_shape.take().ok_or(Error::MissingCache("head"))?;
        let needs = GradNeeds {
            params: needs.params && !self.frozen,
            input: true,
        };
        let g = self.fc.backward_with(g, needs)?;
        tensor::global_avg_pool_backward(&g, &shape)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f("head.fc.weight", &mut self.fc.weight);
        f("head.fc.bias", &mut self.fc.bias);
    }

    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("head.fc.weight", &mut self.fc.weight.value);
        f("head.fc.bias", &mut self.fc.bias.value);
    }

    pub fn clear_cache(&mut self) {
        self.fc.clear_cache();
        self.input_shape = None;
    }
}

/// A block pinned to one batch-norm mode, for gradient checking.
pub struct ModalBlock<T: Scalar> {
    pub block: Block<T>,
    pub mode: Mode,
}

impl<T: Scalar> Differentiable<T> for ModalBlock<T> {
    fn label(&self) -> String {
        let kind = match self.block.kind {
            BlockKind::Stem(_) => "conv+bn+relu",
            BlockKind::Residual(_) => "residual",
            BlockKind::Plain(_) => "conv+bn+relu+maxpool",
        };
        format!("{} ({kind}, {:?})", self.block.name, self.mode)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.block.forward(x, self.mode)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self
            .block
            .backward(grad_out, GradNeeds::ALL)?
            .expect("input gradient requested"))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if !self.block.frozen {
            self.block.visit_params(f);
        }
    }
}

impl<T: Scalar> Differentiable<T> for Head<T> {
    fn label(&self) -> String {
        "head (avgpool+linear)".into()
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Head::forward(self, x)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        Head::backward(self, grad_out, GradNeeds::ALL)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if !self.frozen {
            Head::visit_params(self, f);
        }
    }
}
