use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::blocks::{Block, BlockKind, Head, PlainBlock, ResidualBlock, StemBlock};
use super::layers::GradNeeds;
use crate::error::{Error, Result};
use crate::tensor::{Mode, Param, Scalar, Tensor};

/// Version of the architecture table below. Checkpoints record it.
pub const ARCH_SPEC_VERSION: u32 = 1;

pub const SMALL_RESNET_8: &str = "small-resnet-8";
pub const PLAIN_CNN_5: &str = "plain-cnn-5";

/// Kernel and stride of the small-resnet stem: a non-overlapping patchify
/// convolution, so the stem has no padding.
pub const STEM_KERNEL: usize = 4;

/// Hand count of trainable parameters of `small-resnet-8` at width 1, ten
/// classes, 3×32×32 input.
///
/// stem 3·16·4·4 + 16 + 2·16 = 816;
/// stage1 (16·16 + 16) + (16·16·9 + 16) + (16·16 + 16) + 3·2·16 = 2960;
/// stage2 (16·32 + 32) + (32·32·9 + 32) + (16·32 + 32) + 3·2·32 = 10528;
/// stage3 (32·64 + 64) + (64·64·9 + 64) + (32·64 + 64) + 3·2·64 = 41536;
/// head 64·10 + 10 = 650.
pub const SMALL_RESNET_8_PARAMS: usize = 56490;

const WIDTHS: [f64; 4] = [0.25, 0.5, 1.0, 2.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchKind {
    SmallResNet,
    PlainCnn,
}

/// Static description of a network: everything needed to rebuild its shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub id: String,
    pub width: f64,
    pub classes: usize,
    pub in_channels: usize,
    pub image_size: usize,
}

impl ArchitectureSpec {
    pub fn new(id: &str, width: f64, classes: usize) -> Self {
        ArchitectureSpec {
            id: id.to_string(),
            width,
            classes,
            in_channels: 3,
            image_size: 32,
        }
    }

    pub fn small_resnet(width: f64, classes: usize) -> Self {
        Self::new(SMALL_RESNET_8, width, classes)
    }

    pub fn plain_cnn(width: f64, classes: usize) -> Self {
        Self::new(PLAIN_CNN_5, width, classes)
    }

    pub fn kind(&self) -> Result<ArchKind> {
        match self.id.as_str() {
            SMALL_RESNET_8 => Ok(ArchKind::SmallResNet),
            PLAIN_CNN_5 => Ok(ArchKind::PlainCnn),
            other => Err(Error::UnknownArchitecture(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<ArchKind> {
        let kind = self.kind()?;
        if !WIDTHS.contains(&self.width) {
            return Err(Error::invalid(
                "build",
                format!("width multiplier {} not in {WIDTHS:?}", self.width),
            ));
        }
        if self.classes < 2 {
            return Err(Error::invalid(
                "build",
                format!("need at least 2 classes, got {}", self.classes),
            ));
        }
        if self.in_channels == 0 {
            return Err(Error::invalid("build", "input needs at least one channel"));
        }
        let min = match kind {
            ArchKind::SmallResNet => STEM_KERNEL * 4,
            ArchKind::PlainCnn => 16,
        };
        if self.image_size < min || self.image_size % min != 0 {
            return Err(Error::invalid(
                "build",
                format!(
                    "image size {} must be a positive multiple of {min}",
                    self.image_size
                ),
            ));
        }
        Ok(kind)
    }

    /// Channel count of each stage at this width.
    pub fn stage_channels(&self) -> Result<Vec<usize>> {
        let base = |c: f64| ((c * self.width).round() as usize).max(1);
        Ok(match self.validate()? {
            ArchKind::SmallResNet => vec![base(16.0), base(16.0), base(32.0), base(64.0)],
            ArchKind::PlainCnn => vec![base(16.0), base(32.0), base(64.0), base(128.0)],
        })
    }

    /// Shape `[C, H, W]` of the activation at every cut point `0..=L`.
    pub fn cut_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let ch = self.stage_channels()?;
        let s = self.image_size;
        let mut shapes = vec![[self.in_channels, s, s]];
        match self.kind()? {
            ArchKind::SmallResNet => {
                let s = s / STEM_KERNEL;
                shapes.push([ch[0], s, s]);
                shapes.push([ch[1], s, s]);
                shapes.push([ch[2], s / 2, s / 2]);
                shapes.push([ch[3], s / 4, s / 4]);
            }
            ArchKind::PlainCnn => {
                for (i, &c) in ch.iter().enumerate() {
                    let side = s >> (i + 1);
                    shapes.push([c, side, side]);
                }
            }
        }
        Ok(shapes)
    }

    /// Every trainable tensor with its fixed shape, in parameter order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut out = Vec::new();
        let conv =
            |out: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, cout: usize, k: usize| {
                out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
                out.push((format!("{name}.bias"), vec![cout]));
            };
        let ch = self.stage_channels()?;
        let mut bns = Vec::new();
        match self.kind()? {
            ArchKind::SmallResNet => {
                conv(&mut out, "stem.conv", self.in_channels, ch[0], STEM_KERNEL);
                bns.push(("stem.bn".to_string(), ch[0]));
                flush_bns(&mut out, &mut bns);
                for stage in 1..4 {
                    let (cin, cout) = (ch[stage - 1], ch[stage]);
                    let b = format!("stage{stage}");
                    conv(&mut out, &format!("{b}.conv1"), cin, cout, 1);
                    conv(&mut out, &format!("{b}.conv2"), cout, cout, 3);
                    conv(&mut out, &format!("{b}.shortcut_conv"), cin, cout, 1);
                    for bn in ["bn1", "bn2", "shortcut_bn"] {
                        bns.push((format!("{b}.{bn}"), cout));
                    }
                    flush_bns(&mut out, &mut bns);
                }
            }
            ArchKind::PlainCnn => {
                let mut cin = self.in_channels;
                for (i, &c) in ch.iter().enumerate() {
                    conv(&mut out, &format!("layer{}.conv", i + 1), cin, c, 3);
                    bns.push((format!("layer{}.bn", i + 1), c));
                    flush_bns(&mut out, &mut bns);
                    cin = c;
                }
            }
        }
        out.push(("head.fc.weight".into(), vec![self.classes, ch[3]]));
        out.push(("head.fc.bias".into(), vec![self.classes]));
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum())
    }

    /// Human-readable table of cut shapes and parameter shapes.
    pub fn dump(&self) -> Result<String> {
        let mut s = String::new();
        let _ = writeln!(s, "architecture {} (spec v{ARCH_SPEC_VERSION})", self.id);
        let _ = writeln!(
            s,
            "width {}  classes {}  input {}x{}x{}",
            self.width, self.classes, self.in_channels, self.image_size, self.image_size
        );
        for (i, [c, h, w]) in self.cut_shapes()?.iter().enumerate() {
            let _ = writeln!(s, "cut {i}: {c}x{h}x{w}");
        }
        for (name, shape) in self.param_shapes()? {
            let _ = writeln!(s, "{name} {shape:?}");
        }
        let _ = writeln!(s, "parameters {}", self.param_count()?);
        Ok(s)
    }

    /// Stable hex digest of the spec, used for cache keys.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("spec serializes"),
        ))
    }
}

fn flush_bns(out: &mut Vec<(String, Vec<usize>)>, bns: &mut Vec<(String, usize)>) {
    for (name, c) in bns.drain(..) {
        out.push((format!("{name}.gamma"), vec![c]));
        out.push((format!("{name}.beta"), vec![c]));
    }
}

/// Provenance carried through checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: u64,
    pub train_digest: String,
    pub epoch: u64,
}

/// An ordered list of blocks with cut points between them, and a head.
///
/// Cut `0` is the input, cut `k` is the output of block `k`, and cut `L` (the
/// number of blocks) is the pre-classifier feature map.
#[derive(Clone, Debug)]
pub struct ModelGraph<T = f32> {
    pub spec: ArchitectureSpec,
    pub blocks: Vec<Block<T>>,
    pub head: Head<T>,
    pub meta: ModelMeta,
}

impl<T: Scalar> ModelGraph<T> {
    /// Kaiming fan-in conv init, unit-gamma zero-beta batch norm; deterministic in `seed`.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        let kind = spec.validate()?;
        let ch = spec.stage_channels()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        match kind {
            ArchKind::SmallResNet => {
                blocks.push(Block::new(
                    "stem",
                    BlockKind::Stem(StemBlock::new(
                        spec.in_channels,
                        ch[0],
                        STEM_KERNEL,
                        STEM_KERNEL,
                        0,
                        &mut rng,
                    )),
                ));
                for stage in 1..4 {
                    let stride = if stage == 1 { 1 } else { 2 };
                    blocks.push(Block::new(
                        format!("stage{stage}"),
                        BlockKind::Residual(ResidualBlock::new(
                            ch[stage - 1],
                            ch[stage],
                            stride,
                            &mut rng,
                        )),
                    ));
                }
            }
            ArchKind::PlainCnn => {
                let mut cin = spec.in_channels;
                for (i, &c) in ch.iter().enumerate() {
                    blocks.push(Block::new(
                        format!("layer{}", i + 1),
                        BlockKind::Plain(PlainBlock::new(cin, c, &mut rng)),
                    ));
                    cin = c;
                }
            }
        }
        let head = Head::new(ch[3], spec.classes, &mut rng);
        Ok(ModelGraph {
            spec: spec.clone(),
            blocks,
            head,
            meta: ModelMeta {
                seed,
                ..ModelMeta::default()
            },
        })
    }

    /// `L`, the index of the deepest cut.
    pub fn num_cuts(&self) -> usize {
        self.blocks.len()
    }

    fn check_cut(&self, cut: usize) -> Result<()> {
        if cut > self.num_cuts() {
            return Err(Error::CutOutOfRange {
                cut,
                max: self.num_cuts(),
            });
        }
        Ok(())
    }

    /// Channel count at `cut`.
    pub fn channels_at(&self, cut: usize) -> Result<usize> {
        self.check_cut(cut)?;
        Ok(self.spec.cut_shapes()?[cut][0])
    }

    /// Eval-mode logits without touching any cached state.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer_from(0, &self.activations_at(0, x)?)
    }

    /// Eval-mode activation at `cut`: `B_{≤cut}(x)`.
    pub fn activations_at(&self, cut: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer_range(0, cut, x)
    }

    /// [`ModelGraph::activations_at`] over `x` in slices of `batch` examples.
    pub fn activations_in_batches(
        &self,
        cut: usize,
        x: &Tensor<T>,
        batch: usize,
    ) -> Result<Tensor<T>> {
        let n = x.shape().first().copied().unwrap_or(0);
        let parts = (0..n)
            .step_by(batch.max(1))
            .map(|start| {
                self.activations_at(cut, &x.slice_outer(start, (start + batch.max(1)).min(n))?)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat_outer(&parts)
    }

    /// Eval-mode map from the activation at cut `from` to the one at cut `to`.
    pub fn infer_range(&self, from: usize, to: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_cut(from)?;
        self.check_cut(to)?;
        if from > to {
            return Err(Error::invalid(
                "infer_range",
                format!("cut {from} is after cut {to}"),
            ));
        }
        let mut h = x.clone();
        for block in &self.blocks[from..to] {
            h = block.infer(&h)?;
        }
        Ok(h)
    }

    /// Eval-mode `A_{>cut}`: logits from the activation at `cut`.
    pub fn infer_from(&self, cut: usize, act: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.infer_range(cut, self.num_cuts(), act)?;
        self.head.infer(&h)
    }

    /// Logits, caching what [`ModelGraph::backward`] needs.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.forward_from(0, x, mode)
    }

    /// Cached `A_{>cut}`; frozen blocks run in eval mode.
    pub fn forward_from(&mut self, cut: usize, act: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_cut(cut)?;
        let mut h = act.clone();
        for block in &mut self.blocks[cut..] {
            h = block.forward(&h, mode)?;
        }
        self.head.forward(&h)
    }

    pub fn backward(
        &mut self,
        grad_logits: &Tensor<T>,
        needs: GradNeeds,
    ) -> Result<Option<Tensor<T>>> {
        self.backward_from(0, grad_logits, needs)
    }

    /// Back-propagates through the part run by [`ModelGraph::forward_from`]
    /// with the same `cut`; returns the gradient at `cut` when requested.
    ///
    /// Blocks below the deepest trainable one skip gradient work entirely
    /// unless `needs.input` asks for the gradient at `cut`.
    pub fn backward_from(
        &mut self,
        cut: usize,
        grad_logits: &Tensor<T>,
        needs: GradNeeds,
    ) -> Result<Option<Tensor<T>>> {
        self.check_cut(cut)?;
        let lowest_trainable = if needs.params {
            (cut..self.blocks.len()).find(|&i| !self.blocks[i].frozen)
        } else {
            None
        };
        let stop = match (needs.input, lowest_trainable) {
            (true, _) => cut,
            (false, Some(i)) => i,
            (false, None) => self.blocks.len(),
        };
        let mut g = self.head.backward(grad_logits, needs)?;
        for i in (cut..self.blocks.len()).rev() {
            if i < stop {
                self.blocks[i].clear_cache();
                continue;
            }
            let local = GradNeeds {
                input: i > stop || needs.input,
                params: needs.params,
            };
            match self.blocks[i].backward(&g, local)? {
                Some(next) => g = next,
                None => {
                    self.blocks[cut..i].iter_mut().for_each(Block::clear_cache);
                    return Ok(None);
                }
            }
        }
        Ok(needs.input.then_some(g))
    }

    /// Trainable parameters of every non-frozen block and head.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for block in self.blocks.iter_mut().filter(|b| !b.frozen) {
            block.visit_params(f);
        }
        if !self.head.frozen {
            self.head.visit_params(f);
        }
    }

    /// Every persistent tensor, frozen or not, including running statistics.
    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for block in &mut self.blocks {
            block.visit_state_mut(f);
        }
        self.head.visit_state_mut(f);
    }

    /// Names and values of every persistent tensor, in a fixed order.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut clone = self.clone();
        let mut out = Vec::new();
        clone.visit_state_mut(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// SHA-256 over names, shapes and values of every persistent tensor.
    pub fn param_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.state() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn num_params(&self) -> usize {
        let mut clone = self.clone();
        for b in &mut clone.blocks {
            b.frozen = false;
        }
        clone.head.frozen = false;
        let mut n = 0;
        clone.visit_params(&mut |_, p| n += p.value.len());
        n
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for b in &mut self.blocks {
            b.frozen = frozen;
        }
        self.head.frozen = frozen;
    }

    /// Freezes blocks `0..cut` (everything up to the activation at `cut`).
    pub fn freeze_below(&mut self, cut: usize) -> Result<()> {
        self.check_cut(cut)?;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.frozen = i < cut;
        }
        Ok(())
    }

    /// Replaces every block above `cut` and the head with fresh ones from `seed`.
    pub fn reinit_above(&mut self, cut: usize, seed: u64) -> Result<()> {
        self.check_cut(cut)?;
        let fresh = ModelGraph::build(&self.spec, seed)?;
        for i in cut..self.blocks.len() {
            self.blocks[i] = fresh.blocks[i].clone();
        }
        self.head = fresh.head;
        Ok(())
    }

    /// Blocks `0..cut` of `bottom` followed by the rest of `top`.
    pub fn splice(bottom: &ModelGraph<T>, top: &ModelGraph<T>, cut: usize) -> Result<Self> {
        top.check_cut(cut)?;
        if bottom.spec != top.spec {
            return Err(Error::invalid(
                "splice",
                "bottom and top differ in architecture",
            ));
        }
        let mut out = top.clone();
        for i in 0..cut {
            out.blocks[i] = bottom.blocks[i].clone();
        }
        out.clear_cache();
        Ok(out)
    }

    pub fn clear_cache(&mut self) {
        self.blocks.iter_mut().for_each(Block::clear_cache);
        self.head.clear_cache();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, seed: u64) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * 32 * 32).map(|_| rng.random::<f32>()).collect();
        Tensor::from_vec(&[n, 3, 32, 32], data).unwrap()
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let spec = ArchitectureSpec::small_resnet(1.0, 10);
        let a = ModelGraph::<f32>::build(&spec, 3).unwrap();
        let b = ModelGraph::<f32>::build(&spec, 3).unwrap();
        let c = ModelGraph::<f32>::build(&spec, 4).unwrap();
        assert_eq!(a.param_digest(), b.param_digest());
        assert_ne!(a.param_digest(), c.param_digest());
    }

    #[test]
    fn param_count_matches_hand_count() {
        let spec = ArchitectureSpec::small_resnet(1.0, 10);
        assert_eq!(spec.param_count().unwrap(), SMALL_RESNET_8_PARAMS);
        assert_eq!(
            ModelGraph::<f32>::build(&spec, 0).unwrap().num_params(),
            SMALL_RESNET_8_PARAMS
        );
    }

    #[test]
    fn built_state_matches_spec_shapes() {
        for spec in [
            ArchitectureSpec::small_resnet(0.5, 10),
            ArchitectureSpec::plain_cnn(0.25, 2),
        ] {
            let mut m = ModelGraph::<f32>::build(&spec, 1).unwrap();
            let mut params = Vec::new();
            m.visit_params(&mut |name, p| {
                params.push((name.to_string(), p.value.shape().to_vec()))
            });
            assert_eq!(params, spec.param_shapes().unwrap());
        }
    }

    #[test]
    fn cut_shapes_match_activations() {
        for spec in [
            ArchitectureSpec::small_resnet(1.0, 10),
            ArchitectureSpec::plain_cnn(0.5, 10),
        ] {
            let m = ModelGraph::<f32>::build(&spec, 0).unwrap();
            let x = batch(2, 0);
            for (cut, s) in spec.cut_shapes().unwrap().iter().enumerate() {
                assert_eq!(
                    m.activations_at(cut, &x).unwrap().shape(),
                    &[2, s[0], s[1], s[2]]
                );
            }
        }
    }

    #[test]
    fn unknown_architecture_and_bad_width_rejected() {
        let bad = ArchitectureSpec::new("resnet-50", 1.0, 10);
        assert!(matches!(
            ModelGraph::<f32>::build(&bad, 0),
            Err(Error::UnknownArchitecture(_))
        ));
        assert!(ModelGraph::<f32>::build(&ArchitectureSpec::small_resnet(3.0, 10), 0).is_err());
        assert!(ModelGraph::<f32>::build(&ArchitectureSpec::small_resnet(1.0, 1), 0).is_err());
    }

    #[test]
    fn cut_out_of_range() {
        let m = ModelGraph::<f32>::build(&ArchitectureSpec::small_resnet(0.25, 10), 0).unwrap();
        assert!(matches!(
            m.activations_at(5, &batch(1, 0)),
            Err(Error::CutOutOfRange { cut: 5, max: 4 })
        ));
    }

    #[test]
    fn frozen_backward_leaves_grads_untouched() {
        let mut m = ModelGraph::<f32>::build(&ArchitectureSpec::small_resnet(0.25, 10), 0).unwrap();
        m.freeze_below(2).unwrap();
        let x = batch(4, 1);
        let logits = m.forward(&x, Mode::Train).unwrap();
        let (_, g) = crate::tensor::softmax_cross_entropy(&logits, &[0, 1, 2, 3]).unwrap();
        assert!(m
            .backward(
                &g,
                GradNeeds {
                    input: false,
                    params: true
                }
            )
            .unwrap()
            .is_none());
        assert!(m.blocks[0].frozen);
        let mut frozen_grad = 0.0f64;
        for b in &mut m.blocks[..2] {
            b.visit_params(&mut |_, p| frozen_grad = frozen_grad.max(p.grad.max_abs()));
        }
        assert_eq!(frozen_grad, 0.0);
        let mut live_grad = 0.0f64;
        m.visit_params(&mut |_, p| live_grad = live_grad.max(p.grad.max_abs()));
        assert!(live_grad > 0.0);
    }
}
