//! Datasets, trained networks and stitch fits, each computed at most once
//! per content address and optionally persisted on disk.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stitchlab_core::data::{
    coarsen_labels, corrupt_labels, disjoint_split, load_uri, subset, synthetic, LabeledDataset,
    Source, CIFAR_COARSE,
};
use stitchlab_core::nn::{self, ArchitectureSpec, ModelGraph};
use stitchlab_core::optim::{evaluate, train_observed, TrainConfig, TrainSet};
use stitchlab_core::stitching::{
    fit_stitcher, make_stitched, Baselines, PenaltyReport, Spurious, StitchFamily, StitchOptions,
};

use crate::error::{Context, Error, Result};
use crate::manifest::StitchBudget;

/// Which examples and labels of the manifest's training set a network sees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataVariant {
    Full,
    /// First `n` examples of a shuffle drawn with `seed`; nested in `n`.
    Subset {
        n: usize,
        seed: u64,
    },
    /// Part `index` of `k` disjoint equal parts.
    Part {
        k: usize,
        index: usize,
        seed: u64,
    },
    Noisy {
        p: f64,
        seed: u64,
    },
    /// Two-way superclass labels.
    Coarse,
}

/// Where a network's weights start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    Fresh,
    /// Another recipe's final weights with blocks below `freeze_below`
    /// frozen, and everything above reinitialized when `reinit_seed` is set.
    From {
        base: Box<Recipe>,
        freeze_below: usize,
        reinit_seed: Option<u64>,
    },
}

/// Everything that determines a trained network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub spec: ArchitectureSpec,
    pub seed: u64,
    pub data: DataVariant,
    pub train: TrainConfig,
    pub init: Init,
}

/// A network with the content address it was produced under.
#[derive(Clone, Debug)]
pub struct Net {
    pub key: String,
    pub model: Arc<ModelGraph>,
}

/// Share of training steps at which every run keeps a checkpoint.
const STANDARD_SNAPSHOTS: [(usize, usize); 2] = [(1, 4), (1, 2)];

fn sha(value: &impl Serialize) -> String {
    hex::encode(Sha256::digest(
        serde_json::to_vec(value).expect("serializable"),
    ))
}

/// Label mapping used for [`DataVariant::Coarse`].
pub fn coarse_mapping(source: &Source, classes: usize) -> Vec<usize> {
    match source {
        Source::Synthetic { .. } => synthetic::coarse_map(classes),
        Source::Cifar10 { .. } => CIFAR_COARSE.to_vec(),
    }
}

/// Shared state of one or more experiment runs over the same data.
pub struct Lab {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    dir: Option<PathBuf>,
    derived: Mutex<HashMap<String, Arc<LabeledDataset>>>,
    models: Mutex<HashMap<String, Arc<ModelGraph>>>,
    errors: Mutex<HashMap<String, f64>>,
    trainings: Mutex<usize>,
}

impl Lab {
    /// Loads both datasets. With a cache directory, networks and stitch
    /// results are persisted there and reused by later runs.
    pub fn new(train_uri: &str, test_uri: &str, cache: Option<&Path>) -> Result<Self> {
        let train = load_uri(train_uri)?;
        let test = load_uri(test_uri)?;
        if train.classes != test.classes {
            return Err(Error::manifest(format!(
                "train data has {} classes, test data {}",
                train.classes, test.classes
            )));
        }
        if let Some(dir) = cache {
            for sub in ["models", "stitch"] {
                std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
            }
        }
        Ok(Lab {
            train,
            test,
            dir: cache.map(Path::to_path_buf),
            derived: Mutex::default(),
            models: Mutex::default(),
            errors: Mutex::default(),
            trainings: Mutex::new(0),
        })
    }

    /// Networks trained (not loaded) so far.
    pub fn trainings(&self) -> usize {
        *self.trainings.lock().unwrap()
    }

    pub fn coarse_classes(&self) -> usize {
        coarse_mapping(&self.train.provenance.source, self.train.classes)
            .iter()
            .max()
            .map_or(1, |m| m + 1)
    }

    pub fn dataset(&self, variant: &DataVariant) -> Result<Arc<LabeledDataset>> {
        let key = serde_json::to_string(variant).expect("serializable");
        if let Some(ds) = self.derived.lock().unwrap().get(&key) {
            return Ok(ds.clone());
        }
        let ds = match *variant {
            DataVariant::Full => self.train.clone(),
            DataVariant::Subset { n, seed } => subset(&self.train, n, seed)?,
            DataVariant::Part { k, index, seed } => {
                let mut parts = disjoint_split(&self.train, k, seed)?;
                if index >= k {
                    return Err(Error::manifest(format!("part {index} of {k}")));
                }
                parts.swap_remove(index)
            }
            DataVariant::Noisy { p, seed } => corrupt_labels(&self.train, p, seed)?,
            DataVariant::Coarse => coarsen_labels(
                &self.train,
                &coarse_mapping(&self.train.provenance.source, self.train.classes),
            )?,
        };
        let ds = Arc::new(ds);
        self.derived.lock().unwrap().insert(key, ds.clone());
        Ok(ds)
    }

    /// Content address of a recipe trained on this lab's data.
    pub fn key(&self, recipe: &Recipe) -> String {
        sha(&(recipe, &self.train.provenance))
    }

    fn model_path(&self, key: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join("models").join(format!("{key}.ckpt")))
    }

    fn lookup(&self, key: &str) -> Result<Option<Arc<ModelGraph>>> {
        if let Some(m) = self.models.lock().unwrap().get(key) {
            return Ok(Some(m.clone()));
        }
        match self.model_path(key) {
            Some(path) if path.exists() => {
                let m = Arc::new(nn::load(&path)?);
                self.models
                    .lock()
                    .unwrap()
                    .insert(key.to_string(), m.clone());
                Ok(Some(m))
            }
            _ => Ok(None),
        }
    }

    fn remember(&self, key: &str, model: ModelGraph) -> Result<Arc<ModelGraph>> {
        if let Some(path) = self.model_path(key) {
            nn::save(&model, &path)?;
        }
        let m = Arc::new(model);
        self.models
            .lock()
            .unwrap()
            .insert(key.to_string(), m.clone());
        Ok(m)
    }

    /// The network after all of `recipe`'s steps.
    pub fn model(&self, recipe: &Recipe) -> Result<Net> {
        self.snapshot(recipe, recipe.train.steps)
    }

    /// The network of `recipe`'s run after `step` optimizer steps. A run is
    /// trained once; its quarter and half checkpoints are always kept.
    pub fn snapshot(&self, recipe: &Recipe, step: usize) -> Result<Net> {
        let steps = recipe.train.steps;
        if step > steps {
            return Err(Error::manifest(format!(
                "checkpoint {step} of a {steps}-step run"
            )));
        }
        let base = self.key(recipe);
        let key = if step == steps {
            base.clone()
        } else {
            format!("{base}@{step}")
        };
        if let Some(model) = self.lookup(&key)? {
            return Ok(Net { key, model });
        }
        let mut wanted: BTreeSet<usize> = STANDARD_SNAPSHOTS
            .iter()
            .map(|(a, b)| steps * a / b)
            .collect();
        wanted.insert(step);
        wanted.retain(|&s| s < steps);
        self.train_run(recipe, &base, &wanted.into_iter().collect::<Vec<_>>())?;
        let model = self.lookup(&key)?.expect("run stored its checkpoints");
        Ok(Net { key, model })
    }

    fn train_run(&self, recipe: &Recipe, key: &str, snapshots: &[usize]) -> Result<()> {
        let mut model = match &recipe.init {
            Init::Fresh => ModelGraph::build(&recipe.spec, recipe.seed)?,
            Init::From {
                base,
                freeze_below,
                reinit_seed,
            } => {
                let mut m = (*self.model(base)?.model).clone();
                if m.spec != recipe.spec {
                    return Err(Error::manifest("derived recipe changes the architecture"));
                }
                if let Some(seed) = reinit_seed {
                    m.reinit_above(*freeze_below, *seed)?;
                }
                m.freeze_below(*freeze_below)?;
                m
            }
        };
        let data = self.dataset(&recipe.data)?;
        if data.classes != recipe.spec.classes {
            return Err(Error::manifest(format!(
                "network has {} outputs but its data {} classes",
                recipe.spec.classes, data.classes
            )));
        }
        let started = Instant::now();
        info!(
            "training {} width {} seed {} on {:?} for {} steps",
            recipe.spec.id, recipe.spec.width, recipe.seed, recipe.data, recipe.train.steps
        );
        let set = TrainSet::new(&data.images, &data.labels)?;
        let mut snaps = Vec::new();
        train_observed(
            &mut model,
            set,
            &recipe.train,
            None,
            snapshots,
            &mut |step, m: &ModelGraph| {
                snaps.push((step, m.clone()));
                Ok(())
            },
        )?;
        *self.trainings.lock().unwrap() += 1;
        info!("trained in {:.1}s", started.elapsed().as_secs_f64());
        for (step, mut m) in snaps.into_iter().chain([(recipe.train.steps, model)]) {
            m.set_frozen(false);
            m.clear_cache();
            m.meta.train_digest = key.to_string();
            m.meta.epoch = step as u64;
            let k = if step == recipe.train.steps {
                key.to_string()
            } else {
                format!("{key}@{step}")
            };
            self.remember(&k, m)?;
        }
        Ok(())
    }

    /// Top-1 test error, computed once per network.
    pub fn test_error(&self, net: &Net) -> Result<f64> {
        if let Some(&e) = self.errors.lock().unwrap().get(&net.key) {
            return Ok(e);
        }
        if net.model.spec.classes != self.test.classes {
            return Err(Error::manifest(
                "network and test set have different label spaces",
            ));
        }
        let set = TrainSet::new(&self.test.images, &self.test.labels)?;
        let e = evaluate(&|x| net.model.infer(x), set, 500)?.error;
        self.errors.lock().unwrap().insert(net.key.clone(), e);
        Ok(e)
    }

    fn baselines(&self, top: &Net, bottom: &Net) -> Result<Baselines> {
        Ok(Baselines {
            top_error: self.test_error(top)?,
            bottom_error: if bottom.model.spec.classes == self.test.classes {
                Some(self.test_error(bottom)?)
            } else {
                None
            },
        })
    }

    /// Stitches `bottom` into `top` at `cut`, once per content address.
    pub fn stitch(
        &self,
        top: &Net,
        bottom: &Net,
        cut: usize,
        opts: &StitchOptions,
        spurious: Option<Spurious>,
    ) -> Result<PenaltyReport> {
        let key = sha(&(
            &top.key,
            &bottom.key,
            cut,
            opts,
            spurious,
            &self.train.provenance,
            &self.test.provenance,
        ));
        let path = self
            .dir
            .as_ref()
            .map(|d| d.join("stitch").join(format!("{key}.json")));
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            return serde_json::from_str(&text)
                .map_err(|e| Error::Output(format!("{}: {e}", p.display())));
        }
        let started = Instant::now();
        let base = self.baselines(top, bottom)?;
        let mut sm = make_stitched(
            &top.model,
            &bottom.model,
            cut,
            opts.family,
            opts.budget.seed,
        )?;
        if let Some(sp) = spurious {
            sm = sm.with_spurious(sp, opts.budget.seed)?;
        }
        let history = fit_stitcher(&mut sm, &self.train, opts)?;
        let r = sm.evaluate(&self.test)?;
        let report = PenaltyReport {
            experiment_id: String::new(),
            cut,
            family: opts.family.label(),
            stitched_error: r.error,
            stitched_cross_entropy: r.cross_entropy,
            top_error: base.top_error,
            bottom_error: base.bottom_error,
            penalty: r.error - base.top_error,
            seed: opts.budget.seed,
            curve_digest: history.digest(),
        };
        info!(
            "stitched at cut {cut} ({}): error {:.4}, penalty {:+.4} in {:.1}s",
            report.family,
            report.stitched_error,
            report.penalty,
            started.elapsed().as_secs_f64()
        );
        if let Some(p) = path {
            let tmp = p.with_extension("tmp");
            std::fs::write(&tmp, serde_json::to_vec(&report).expect("serializable"))
                .map_err(|e| Error::io(&tmp, e))?;
            std::fs::rename(&tmp, &p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(report)
    }

    /// The lowest stitched error over `seeds` restarts.
    pub fn stitch_best(
        &self,
        top: &Net,
        bottom: &Net,
        cut: usize,
        family: StitchFamily,
        budget: &StitchBudget,
        spurious: Option<Spurious>,
    ) -> Result<PenaltyReport> {
        let mut best: Option<PenaltyReport> = None;
        for &seed in &budget.seeds {
            let r = self
                .stitch(top, bottom, cut, &budget.options(family, seed), spurious)
                .context(|| format!("stitching at cut {cut} with seed {seed}"))?;
            if best
                .as_ref()
                .is_none_or(|b| r.stitched_error < b.stitched_error)
            {
                best = Some(r);
            }
            if !family_has_parameters(family) {
                break;
            }
        }
        Ok(best.expect("at least one stitcher seed"))
    }
}

fn family_has_parameters(family: StitchFamily) -> bool {
    matches!(family, StitchFamily::ConvSandwich { .. })
}

/// `f` over `items` on up to `jobs` threads; results keep the input order.
pub fn par_map<T: Sync, R: Send>(
    jobs: usize,
    items: &[T],
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                *slots[i].lock().unwrap() = Some(f(&items[i]));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every item ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use stitchlab_core::optim::AugmentFlags;

    fn recipe(seed: u64, steps: usize) -> Recipe {
        let mut train = TrainConfig::base(steps, 16, seed);
        train.augment = AugmentFlags::NONE;
        Recipe {
            spec: ArchitectureSpec::small_resnet(0.25, 10),
            seed,
            data: DataVariant::Subset { n: 40, seed: 0 },
            train,
            init: Init::Fresh,
        }
    }

    #[test]
    fn networks_are_trained_once_and_reloaded_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let lab = Lab::new("synth:1:60", "synth:2:20", Some(dir.path())).unwrap();
        let a = lab.model(&recipe(1, 8)).unwrap();
        let half = lab.snapshot(&recipe(1, 8), 4).unwrap();
        assert_eq!(lab.trainings(), 1);
        assert_ne!(a.model.param_digest(), half.model.param_digest());

        let again = Lab::new("synth:1:60", "synth:2:20", Some(dir.path())).unwrap();
        let b = again.model(&recipe(1, 8)).unwrap();
        assert_eq!(again.trainings(), 0);
        assert_eq!(a.model.param_digest(), b.model.param_digest());
        again.snapshot(&recipe(1, 8), 3).unwrap();
        assert_eq!(again.trainings(), 1);
        assert_ne!(lab.key(&recipe(1, 8)), lab.key(&recipe(2, 8)));
    }

    #[test]
    fn derived_runs_start_from_their_base() {
        let lab = Lab::new("synth:1:60", "synth:2:20", None).unwrap();
        let base = recipe(1, 4);
        let derived = Recipe {
            init: Init::From {
                base: Box::new(base.clone()),
                freeze_below: 2,
                reinit_seed: None,
            },
            ..recipe(1, 4)
        };
        let (b, d) = (lab.model(&base).unwrap(), lab.model(&derived).unwrap());
        let x = lab.test.images.clone();
        assert_eq!(
            b.model.activations_at(2, &x).unwrap(),
            d.model.activations_at(2, &x).unwrap()
        );
        assert_ne!(b.model.param_digest(), d.model.param_digest());
    }

    #[test]
    fn stitch_results_are_cached() {
        let dir = tempfile::tempdir().unwrap();
        let lab = Lab::new("synth:1:60", "synth:2:20", Some(dir.path())).unwrap();
        let a = lab.model(&recipe(1, 4)).unwrap();
        let b = lab.model(&recipe(2, 4)).unwrap();
        let opts = StitchOptions::new(StitchFamily::conv(1), TrainConfig::stitcher(3, 16, 0));
        let r = lab.stitch(&a, &b, 2, &opts, None).unwrap();
        assert_eq!(
            std::fs::read_dir(dir.path().join("stitch"))
                .unwrap()
                .count(),
            1
        );
        assert_eq!(lab.stitch(&a, &b, 2, &opts, None).unwrap(), r);
        assert_eq!(r.penalty, r.stitched_error - r.top_error);
    }

    #[test]
    fn parallel_map_keeps_order_and_errors() {
        let items: Vec<usize> = (0..20).collect();
        assert_eq!(
            par_map(4, &items, |&i| Ok(i * 2)).unwrap(),
            (0..20).map(|i| i * 2).collect::<Vec<_>>()
        );
        assert!(par_map(3, &items, |&i| if i == 7 {
            Err(Error::manifest("x"))
        } else {
            Ok(i)
        })
        .is_err());
    }
}
