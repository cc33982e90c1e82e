//! A fixed battery of finite-difference checks over every differentiable
//! component, in 64-bit floats.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    ArchitectureSpec, BatchNorm2d, Block, BlockKind, Conv2d, GradNeeds, Head, Linear,
    ModalBatchNorm, ModalBlock, ModelGraph, PlainBlock, ResidualBlock, StemBlock,
};
use crate::error::Result;
use crate::tensor::gradcheck::{grad_check, Differentiable, GradCheckReport};
use crate::tensor::{softmax_cross_entropy, Mode, Param, Tensor};

/// Finite-difference step used by [`gradient_suite`].
pub const GRAD_STEP: f64 = 1e-6;
/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-6;

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
        .expect("shape matches")
}

/// Non-trivial batch-norm affine and running statistics, so eval mode is
/// not the identity.
fn perturb_bn(bn: &mut BatchNorm2d<f64>, rng: &mut ChaCha8Rng) {
    let c = bn.channels();
    bn.gamma.value = normal(&[c], rng).map(|v| 1.0 + 0.3 * v);
    bn.beta.value = normal(&[c], rng).map(|v| 0.2 * v);
    bn.running_mean = normal(&[c], rng).map(|v| 0.3 * v);
    bn.running_var = normal(&[c], rng).map(|v| 0.5 + v.abs());
}

/// Mean cross-entropy against fixed labels, as a one-element output.
struct Loss {
    labels: Vec<usize>,
    grad: Option<Tensor<f64>>,
}

impl Differentiable<f64> for Loss {
    fn label(&self) -> String {
        format!("softmax cross-entropy ({} rows)", self.labels.len())
    }

    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (loss, grad) = softmax_cross_entropy(x, &self.labels)?;
        self.grad = Some(grad);
        Tensor::from_vec(&[1], vec![loss])
    }

    fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
        let grad = self.grad.take().expect("forward before backward");
        Ok(grad.map(|v| v * g.data()[0]))
    }

    fn visit_params(&mut self, _: &mut dyn FnMut(&str, &mut Param<f64>)) {}
}

/// A whole network in one mode, input to logits.
struct Whole {
    model: ModelGraph<f64>,
    mode: Mode,
}

impl Differentiable<f64> for Whole {
    fn label(&self) -> String {
        format!(
            "{} width {} ({:?})",
            self.model.spec.id, self.model.spec.width, self.mode
        )
    }

    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.model.forward(x, self.mode)
    }

    fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self
            .model
            .backward(g, GradNeeds::ALL)?
            .expect("input gradient requested"))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
        self.model.visit_params(f)
    }
}

type Case = (Box<dyn Differentiable<f64>>, Tensor<f64>);

fn cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut out: Vec<Case> = Vec::new();
    for n in [1, 3, 8] {
        for fin in [1, 4, 7] {
            for fout in [2, 5] {
                let mut l = Linear::<f64>::new(fin, fout, rng);
                l.bias.value = normal(&[fout], rng);
                out.push((Box::new(l), normal(&[n, fin], rng)));
            }
        }
    }
    let convs: &[(usize, usize, usize, usize)] = &[
        // (kernel, stride, padding, size)
        (1, 1, 0, 5),
        (1, 2, 0, 5),
        (3, 1, 0, 5),
        (3, 1, 1, 5),
        (3, 2, 0, 6),
        (3, 2, 1, 6),
        (5, 1, 0, 7),
        (5, 1, 2, 7),
        (5, 2, 0, 7),
        (5, 2, 2, 7),
        (7, 1, 3, 9),
        (7, 2, 3, 9),
        (2, 2, 0, 6),
        (4, 4, 0, 8),
        (3, 1, 4, 3),
    ];
    for &(k, s, p, size) in convs {
        for (ci, co) in [(1, 2), (3, 2)] {
            let mut c = Conv2d::<f64>::new(ci, co, k, s, p, rng);
            c.bias.value = normal(&[co], rng);
            out.push((Box::new(c), normal(&[2, ci, size, size], rng)));
        }
    }
    for mode in [Mode::Train, Mode::Eval] {
        for (n, c, h, w) in [
            (2, 1, 1, 1),
            (2, 3, 3, 3),
            (4, 1, 3, 3),
            (4, 3, 1, 1),
            (3, 2, 2, 3),
            (2, 4, 3, 2),
            (5, 2, 2, 2),
        ] {
            let mut bn = BatchNorm2d::<f64>::new(c);
            perturb_bn(&mut bn, rng);
            out.push((
                Box::new(ModalBatchNorm { bn, mode }),
                normal(&[n, c, h, w], rng),
            ));
        }
    }
    let mut blocks: Vec<(BlockKind<f64>, [usize; 4])> = Vec::new();
    for (cin, k, s, p, size) in [
        (1, 3, 1, 1, 5),
        (3, 3, 1, 1, 4),
        (1, 4, 4, 0, 8),
        (3, 2, 2, 0, 4),
    ] {
        blocks.push((
            BlockKind::Stem(StemBlock::new(cin, 3, k, s, p, rng)),
            [2, cin, size, size],
        ));
    }
    for stride in [1, 2] {
        for (cin, cout) in [(2, 2), (2, 4), (3, 4)] {
            blocks.push((
                BlockKind::Residual(ResidualBlock::new(cin, cout, stride, rng)),
                [2, cin, 4, 4],
            ));
        }
    }
    for (cin, cout, size) in [(1, 2, 4), (3, 4, 4), (2, 3, 6), (3, 2, 6)] {
        blocks.push((
            BlockKind::Plain(PlainBlock::new(cin, cout, rng)),
            [2, cin, size, size],
        ));
    }
    for (kind, shape) in blocks {
        for mode in [Mode::Train, Mode::Eval] {
            let mut block = Block::new("block", kind.clone());
            perturb_block(&mut block, rng);
            out.push((Box::new(ModalBlock { block, mode }), normal(&shape, rng)));
        }
    }
    for (n, c, hw, classes) in [
        (1, 2, 1, 2),
        (2, 3, 2, 4),
        (3, 4, 3, 10),
        (2, 8, 4, 3),
        (4, 1, 2, 2),
        (2, 5, 1, 7),
    ] {
        let mut head = Head::<f64>::new(c, classes, rng);
        head.fc.bias.value = normal(&[classes], rng);
        out.push((Box::new(head), normal(&[n, c, hw, hw], rng)));
    }
    for n in [1, 3, 5] {
        for k in [2, 10] {
            let labels = (0..n).map(|i| (i * 7 + 1) % k).collect();
            out.push((Box::new(Loss { labels, grad: None }), normal(&[n, k], rng)));
        }
    }
    for mut spec in [
        ArchitectureSpec::small_resnet(0.25, 3),
        ArchitectureSpec::plain_cnn(0.25, 3),
    ] {
        spec.in_channels = 1;
        spec.image_size = 16;
        for mode in [Mode::Train, Mode::Eval] {
            let mut model = ModelGraph::<f64>::build(&spec, 7)?;
            for block in &mut model.blocks {
                perturb_block(block, rng);
            }
            out.push((
                Box::new(Whole { model, mode }),
                normal(&[2, 1, 16, 16], rng),
            ));
        }
    }
    Ok(out)
}

fn perturb_block(block: &mut Block<f64>, rng: &mut ChaCha8Rng) {
    let bns: Vec<&mut BatchNorm2d<f64>> = match &mut block.kind {
        BlockKind::Stem(s) => vec![&mut s.bn],
        BlockKind::Residual(r) => vec![&mut r.bn1, &mut r.bn2, &mut r.shortcut_bn],
        BlockKind::Plain(p) => vec![&mut p.bn],
    };
    for bn in bns {
        perturb_bn(bn, rng);
    }
}

/// Checks linear, convolution (several kernels, strides and paddings),
/// batch norm in both modes, every block type in both modes, the head, the
/// loss and two whole networks. Deterministic in `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = cases(&mut rng)?;
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (mut layer, x))| {
            grad_check(
                layer.as_mut(),
                &x,
                GRAD_STEP,
                GRAD_TOLERANCE,
                seed ^ i as u64,
            )
        })
        .collect()
}
