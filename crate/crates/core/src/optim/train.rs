use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{augment, OptimState, ParamFilter, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{GradNeeds, ModelGraph};
use crate::tensor::{softmax_cross_entropy, Mode, Param, Tensor};

/// A network the training loop can drive.
pub trait Trainable {
    /// Train-mode logits, caching state for [`Trainable::backward`].
    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor>;
    /// Accumulates gradients of the parameters it exposes.
    fn backward(&mut self, grad_logits: &Tensor) -> Result<()>;
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param));
    /// Eval-mode logits.
    fn predict(&self, x: &Tensor) -> Result<Tensor>;
    /// Freezes every part holding no parameter `filter` matches; returns a
    /// token for [`Trainable::unrestrict`].
    fn restrict(&mut self, filter: &ParamFilter) -> Vec<bool>;
    fn unrestrict(&mut self, saved: Vec<bool>);
    /// Whether an empty trainable set is a legal no-op (parameter-free stitchers).
    fn allows_empty(&self, _filter: &ParamFilter) -> bool {
        false
    }
}

impl Trainable for ModelGraph {
    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.forward(x, Mode::Train)
    }

    fn backward(&mut self, grad_logits: &Tensor) -> Result<()> {
        ModelGraph::backward(
            self,
            grad_logits,
            GradNeeds {
                input: false,
                params: true,
            },
        )?;
        Ok(())
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        ModelGraph::visit_params(self, f)
    }

    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.infer(x)
    }

    fn restrict(&mut self, filter: &ParamFilter) -> Vec<bool> {
        let mut saved: Vec<bool> = self.blocks.iter().map(|b| b.frozen).collect();
        saved.push(self.head.frozen);
        for block in &mut self.blocks {
            let mut any = false;
            block.visit_params(&mut |name, _| any |= filter.matches(name));
            block.frozen |= !any;
        }
        let mut any = false;
        self.head
            .visit_params(&mut |name, _| any |= filter.matches(name));
        self.head.frozen |= !any;
        saved
    }

    fn unrestrict(&mut self, saved: Vec<bool>) {
        let (head, blocks) = saved.split_last().expect("one flag per block and the head");
        for (b, &f) in self.blocks.iter_mut().zip(blocks) {
            b.frozen = f;
        }
        self.head.frozen = *head;
    }
}

/// Inputs (images or cached activations) with their labels.
#[derive(Clone, Copy, Debug)]
pub struct TrainSet<'a> {
    pub inputs: &'a Tensor,
    pub labels: &'a [usize],
}

impl<'a> TrainSet<'a> {
    pub fn new(inputs: &'a Tensor, labels: &'a [usize]) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(Error::shape(
                "train set",
                format!("{n} inputs but {} labels", labels.len()),
            ));
        }
        Ok(TrainSet { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

/// Per-epoch training loss and held-out error, in step order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Checkpoint(format!("history csv: {e}"));
        wr.write_record(["step", "epoch", "split", "metric", "value"])
            .map_err(io)?;
        for r in &self.rows {
            wr.write_record([
                r.step.to_string(),
                r.epoch.to_string(),
                r.split.to_string(),
                r.metric.to_string(),
                format!("{}", r.value),
            ])
            .map_err(io)?;
        }
        wr.flush()
            .map_err(|e| Error::Checkpoint(format!("history csv: {e}")))
    }

    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        hex::encode(Sha256::digest(buf))
    }

    pub fn last(&self, split: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    /// Top-1 error in `[0, 1]`; ties in the argmax go to the lowest class.
    pub error: f64,
    pub cross_entropy: f64,
}

/// Top-1 error and mean cross-entropy of `predict` over `data`, in batches.
pub fn evaluate(
    predict: &dyn Fn(&Tensor) -> Result<Tensor>,
    data: TrainSet,
    batch_size: usize,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = data.len();
    let (mut wrong, mut ce) = (0usize, 0.0);
    let mut start = 0;
    while start < n {
        let end = (start + batch_size.max(1)).min(n);
        let logits = predict(&data.inputs.slice_outer(start, end)?)?;
        let labels = &data.labels[start..end];
        let (loss, _) = softmax_cross_entropy(&logits, labels)?;
        ce += loss * (end - start) as f64;
        let k = logits.shape()[1];
        for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            wrong += (best != y) as usize;
        }
        start = end;
    }
    Ok(EvalResult {
        error: wrong as f64 / n as f64,
        cross_entropy: ce / n as f64,
    })
}

/// Runs `config.steps` optimizer steps on `data`, changing only parameters
/// the filter selects. Parts holding none of them are frozen for the
/// duration, so their batch-norm statistics stay fixed too.
pub fn train<N: Trainable + ?Sized>(
    net: &mut N,
    data: TrainSet,
    config: &TrainConfig,
    eval: Option<TrainSet>,
) -> Result<History> {
    train_observed(net, data, config, eval, &[], &mut |_, _| Ok(()))
}

/// [`train`], calling `observe` with the network after each step count in
/// `at` (0 meaning before the first step). Used to keep intermediate
/// checkpoints of one run.
pub fn train_observed<N: Trainable + ?Sized>(
    net: &mut N,
    data: TrainSet,
    config: &TrainConfig,
    eval: Option<TrainSet>,
    at: &[usize],
    observe: &mut dyn FnMut(usize, &N) -> Result<()>,
) -> Result<History> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(&s) = at.iter().find(|&&s| s > config.steps) {
        return Err(Error::invalid(
            "train",
            format!("snapshot at step {s} of a {}-step run", config.steps),
        ));
    }
    let saved = net.restrict(&config.filter);
    let result = run(net, data, config, eval, at, observe);
    net.unrestrict(saved);
    result
}

fn run<N: Trainable + ?Sized>(
    net: &mut N,
    data: TrainSet,
    config: &TrainConfig,
    eval: Option<TrainSet>,
    at: &[usize],
    observe: &mut dyn FnMut(usize, &N) -> Result<()>,
) -> Result<History> {
    let mut trainable = 0;
    net.visit_params(&mut |name, _| trainable += config.filter.matches(name) as usize);
    if trainable == 0 {
        if net.allows_empty(&config.filter) {
            return Ok(History::default());
        }
        return Err(Error::EmptyTrainableSet);
    }
    let mut history = History::default();
    if at.contains(&0) {
        observe(0, net)?;
    }
    if config.steps == 0 {
        return Ok(history);
    }
    let n = data.len();
    let batch = config.batch_size.min(n);
    let steps_per_epoch = (n / batch).max(1);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed);
    aug_rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut state = OptimState::default();
    let (mut epoch_loss, mut epoch_wrong, mut epoch_seen) = (0.0, 0usize, 0usize);
    for step in 0..config.steps {
        let pos = step % steps_per_epoch;
        if pos == 0 {
            order.shuffle(&mut order_rng);
        }
        let idx = &order[pos * batch..(pos + 1) * batch];
        let mut x = data.inputs.gather_outer(idx)?;
        if !config.augment.is_off() {
            x = augment(&x, config.augment, &mut aug_rng)?;
        }
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        net.visit_params(&mut |_, p| p.zero_grad());
        let logits = net.forward_train(&x)?;
        let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let k = logits.shape()[1];
        for (row, &y) in logits.data().chunks_exact(k).zip(&labels) {
            let best = (1..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            epoch_wrong += (best != y) as usize;
        }
        epoch_loss += loss * batch as f64;
        epoch_seen += batch;
        net.backward(&grad)?;
        let lr = config.schedule.lr_at(config.optimizer.lr(), step);
        state.begin_step();
        let mut slot = 0;
        let mut failure = None;
        net.visit_params(&mut |name, p| {
            if failure.is_some() || !config.filter.matches(name) {
                return;
            }
            if let Err(e) = state.update(slot, &mut p.value, &p.grad, &config.optimizer, lr) {
                failure = Some(e);
            }
            slot += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let done = step + 1;
        if at.contains(&done) {
            observe(done, net)?;
        }
        let epoch_end = done % steps_per_epoch == 0 || done == config.steps;
        if epoch_end {
            let epoch = done.div_ceil(steps_per_epoch);
            history.rows.push(HistoryRow {
                step: done,
                epoch,
                split: "train",
                metric: "loss",
                value: epoch_loss / epoch_seen as f64,
            });
            history.rows.push(HistoryRow {
                step: done,
                epoch,
                split: "train",
                metric: "error",
                value: epoch_wrong as f64 / epoch_seen as f64,
            });
            (epoch_loss, epoch_wrong, epoch_seen) = (0.0, 0, 0);
            let due = config.eval_every_epochs > 0 && epoch % config.eval_every_epochs == 0;
            if let Some(ev) = eval.filter(|_| due || done == config.steps) {
                let r = evaluate(&|x| net.predict(x), ev, 256)?;
                history.rows.push(HistoryRow {
                    step: done,
                    epoch,
                    split: "test",
                    metric: "error",
                    value: r.error,
                });
            }
        }
    }
    Ok(history)
}
