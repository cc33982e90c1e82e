use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{StitchFamily, StitchInit, Stitcher};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{fold_stitcher, GradNeeds, ModelGraph};
use crate::optim::{
    evaluate, train, EvalResult, History, ParamFilter, TrainConfig, TrainSet, Trainable,
};
use crate::tensor::{Mode, Param, Tensor};

/// Examples per slice when running frozen networks over a whole dataset.
pub(crate) const EVAL_BATCH: usize = 500;

/// Gaussian channels appended to the bottom's activation. Each example's
/// noise is a fixed function of its activation, so train and test inputs
/// carry consistent but useless extra coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Spurious {
    pub channels: usize,
    pub seed: u64,
}

/// `A_{>cut} ∘ s ∘ B_{≤cut}` with both networks frozen.
#[derive(Clone, Debug)]
pub struct StitchedModel {
    pub bottom: ModelGraph,
    pub top: ModelGraph,
    pub cut: usize,
    pub stitcher: Stitcher,
    pub spurious: Option<Spurious>,
}

/// Stitches the bottom `cut` blocks of `bottom` into `top`.
pub fn make_stitched(
    top: &ModelGraph,
    bottom: &ModelGraph,
    cut: usize,
    family: StitchFamily,
    seed: u64,
) -> Result<StitchedModel> {
    let top_shape = *top
        .spec
        .cut_shapes()?
        .get(cut)
        .ok_or(Error::CutOutOfRange {
            cut,
            max: top.num_cuts(),
        })?;
    let bottom_shape = *bottom
        .spec
        .cut_shapes()?
        .get(cut)
        .ok_or(Error::CutOutOfRange {
            cut,
            max: bottom.num_cuts(),
        })?;
    if top_shape[1..] != bottom_shape[1..] {
        return Err(Error::Stitch(format!(
            "spatial size {:?} of the bottom at cut {cut} differs from the top's {:?}",
            &bottom_shape[1..],
            &top_shape[1..]
        )));
    }
    let stitcher = Stitcher::new(family, bottom_shape[0], top_shape[0], seed)?;
    let mut top = top.clone();
    let mut bottom = bottom.clone();
    top.set_frozen(true);
    bottom.set_frozen(true);
    top.clear_cache();
    bottom.clear_cache();
    Ok(StitchedModel {
        bottom,
        top,
        cut,
        stitcher,
        spurious: None,
    })
}

impl StitchedModel {
    /// Appends `spurious.channels` noise channels to the bottom's output and
    /// rebuilds the stitcher to read them.
    pub fn with_spurious(mut self, spurious: Spurious, seed: u64) -> Result<Self> {
        let c = self.bottom.channels_at(self.cut)? + spurious.channels;
        self.stitcher = Stitcher::new(self.stitcher.family, c, self.stitcher.out_channels, seed)?;
        self.spurious = Some(spurious);
        Ok(self)
    }

    /// What the stitcher reads: `B_{≤cut}(x)`, plus any spurious channels.
    pub fn bottom_features(&self, images: &Tensor) -> Result<Tensor> {
        let act = self
            .bottom
            .activations_in_batches(self.cut, images, EVAL_BATCH)?;
        match self.spurious {
            None => Ok(act),
            Some(sp) => append_noise(&act, sp),
        }
    }

    /// Eval-mode logits from precomputed [`StitchedModel::bottom_features`].
    pub fn infer_features(&self, features: &Tensor) -> Result<Tensor> {
        self.top
            .infer_from(self.cut, &self.stitcher.infer(features)?)
    }

    pub fn infer(&self, images: &Tensor) -> Result<Tensor> {
        self.infer_features(&self.bottom_features(images)?)
    }

    pub fn evaluate(&self, test: &LabeledDataset) -> Result<EvalResult> {
        let features = self.bottom_features(&test.images)?;
        evaluate(
            &|x| self.infer_features(x),
            TrainSet::new(&features, &test.labels)?,
            EVAL_BATCH,
        )
    }

    /// The stitched network as a single model of the top's architecture:
    /// the bottom's first `cut` blocks, then the top's blocks with the
    /// stitcher folded into the first of them.
    pub fn fold(&self) -> Result<ModelGraph> {
        if self.spurious.is_some() {
            return Err(Error::Fold(
                "spurious channels have no place in the architecture".into(),
            ));
        }
        if self.bottom.spec != self.top.spec {
            return Err(Error::Fold("bottom and top differ in architecture".into()));
        }
        let mut spliced = ModelGraph::splice(&self.bottom, &self.top, self.cut)?;
        spliced.set_frozen(false);
        let mut folded = fold_stitcher(&spliced, &self.stitcher, self.cut)?;
        folded.set_frozen(false);
        Ok(folded)
    }
}

fn append_noise(act: &Tensor, sp: Spurious) -> Result<Tensor> {
    let (n, c, h, w) = act.dims4()?;
    let s = h * w;
    let per = c * s;
    let extra = sp.channels * s;
    let mut data = Vec::with_capacity(n * (per + extra));
    for row in act.data().chunks_exact(per) {
        let mut hasher = Sha256::new();
        hasher.update(sp.seed.to_le_bytes());
        row.iter().for_each(|v| hasher.update(v.to_le_bytes()));
        let key: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(key);
        data.extend_from_slice(row);
        data.extend((0..extra).map(|_| -> f32 { StandardNormal.sample(&mut rng) }));
    }
    Tensor::from_vec(&[n, c + sp.channels, h, w], data)
}

/// How a stitcher is fitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchOptions {
    pub family: StitchFamily,
    pub init: StitchInit,
    /// Ridge strength relative to the mean diagonal of the input covariance.
    pub ridge: f64,
    /// Examples in the batch the least-squares start is fitted on.
    pub init_batch: usize,
    pub budget: TrainConfig,
}

impl StitchOptions {
    pub fn new(family: StitchFamily, budget: TrainConfig) -> Self {
        StitchOptions {
            family,
            init: StitchInit::LeastSquares,
            ridge: 1e-3,
            init_batch: 512,
            budget,
        }
    }
}

/// Trains only the stitcher, on cached bottom features.
struct Fit<'a> {
    top: &'a mut ModelGraph,
    stitcher: &'a mut Stitcher,
    cut: usize,
}

impl Trainable for Fit<'_> {
    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.stitcher.forward(x)?;
        self.top.forward_from(self.cut, &h, Mode::Eval)
    }

    fn backward(&mut self, grad_logits: &Tensor) -> Result<()> {
        let g = self
            .top
            .backward_from(
                self.cut,
                grad_logits,
                GradNeeds {
                    input: true,
                    params: false,
                },
            )?
            .ok_or(Error::MissingCache("stitched top"))?;
        self.stitcher.backward(
            &g,
            GradNeeds {
                input: false,
                params: true,
            },
        )?;
        Ok(())
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stitcher.visit_params(f)
    }

    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.top.infer_from(self.cut, &self.stitcher.infer(x)?)
    }

    fn restrict(&mut self, _filter: &ParamFilter) -> Vec<bool> {
        Vec::new()
    }

    fn unrestrict(&mut self, _saved: Vec<bool>) {}

    fn allows_empty(&self, _filter: &ParamFilter) -> bool {
        !self.stitcher.is_trainable()
    }
}

/// Initializes and trains the stitcher on `train`; the bottom and top stay
/// bit-identical. A zero-step budget leaves the stitcher untouched as well;
/// parameter-free families stop after initialization.
pub fn fit_stitcher(
    sm: &mut StitchedModel,
    train_ds: &LabeledDataset,
    opts: &StitchOptions,
) -> Result<History> {
    if opts.budget.filter != ParamFilter::StitcherOnly {
        return Err(Error::invalid(
            "fit_stitcher",
            "the budget must train the stitcher only",
        ));
    }
    opts.budget.validate()?;
    if opts.budget.steps == 0 || sm.stitcher.family == StitchFamily::Identity {
        return Ok(History::default());
    }
    let features = sm.bottom_features(&train_ds.images)?;
    match (opts.init, sm.stitcher.family) {
        (_, StitchFamily::Identity) => {}
        (StitchInit::Kaiming, StitchFamily::ConvSandwich { .. }) => {
            sm.stitcher.init_kaiming(opts.budget.seed)?
        }
        _ => {
            let n = train_ds.len();
            let mut rng = ChaCha8Rng::seed_from_u64(opts.budget.seed);
            rng.set_stream(2);
            let mut idx = sample(&mut rng, n, opts.init_batch.clamp(1, n)).into_vec();
            idx.sort_unstable();
            let x = features.gather_outer(&idx)?;
            let y = sm
                .top
                .activations_at(sm.cut, &train_ds.images.gather_outer(&idx)?)?;
            sm.stitcher.init_from_activations(&x, &y, opts.ridge)?;
        }
    }
    if !sm.stitcher.is_trainable() {
        return Ok(History::default());
    }
    sm.stitcher.mode = Mode::Train;
    let mut fit = Fit {
        top: &mut sm.top,
        stitcher: &mut sm.stitcher,
        cut: sm.cut,
    };
    let result = train(
        &mut fit,
        TrainSet::new(&features, &train_ds.labels)?,
        &opts.budget,
        None,
    );
    sm.stitcher.mode = Mode::Eval;
    sm.stitcher.clear_cache();
    sm.top.clear_cache();
    result
}
