//! Declarative experiment descriptions read from TOML.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stitchlab_core::data::{parse_uri, Source};
use stitchlab_core::metrics::{Pooling, CKA_EXAMPLES};
use stitchlab_core::nn::ArchitectureSpec;
use stitchlab_core::optim::{AugmentFlags, OptimizerKind, Schedule, TrainConfig};
use stitchlab_core::stitching::{StitchFamily, StitchInit, StitchOptions, STITCH_KERNELS};

use crate::error::{Error, Result};

/// One experiment: what to train, what to stitch, and which outcomes count as a pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub id: String,
    /// Dataset URI the networks and stitchers are trained on.
    pub train_data: String,
    pub test_data: String,
    #[serde(default = "default_arch")]
    pub arch: String,
    #[serde(default = "default_width")]
    pub width: f64,
    /// Seed of the reference network (the top in most experiments).
    pub seed: u64,
    /// Cut points to stitch at; all of `1..=L` when absent.
    #[serde(default)]
    pub cuts: Option<Vec<usize>>,
    /// Not part of the digest: moving outputs does not change an experiment.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    pub train: TrainBudget,
    pub stitch: StitchBudget,
    pub experiment: Experiment,
}

fn default_arch() -> String {
    stitchlab_core::nn::SMALL_RESNET_8.to_string()
}

fn default_width() -> f64 {
    1.0
}

/// Base-network training budget: SGD with momentum and step decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBudget {
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "yes")]
    pub augment: bool,
}

fn default_lr() -> f64 {
    0.05
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn yes() -> bool {
    true
}

impl TrainBudget {
    pub fn config(&self, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::base(self.steps, self.batch_size, seed);
        c.optimizer = OptimizerKind::Sgd {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        };
        c.augment = if self.augment {
            AugmentFlags::STANDARD
        } else {
            AugmentFlags::NONE
        };
        c
    }
}

/// Stitcher fitting budget: Adam with cosine decay, stitcher parameters only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StitchBudget {
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_stitch_lr")]
    pub lr: f64,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub init: StitchInit,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_init_batch")]
    pub init_batch: usize,
    /// Restarts per fit; the lowest stitched error is kept.
    #[serde(default = "default_stitch_seeds")]
    pub seeds: Vec<u64>,
}

fn default_stitch_lr() -> f64 {
    1e-3
}

fn default_kernel() -> usize {
    1
}

fn default_ridge() -> f64 {
    1e-3
}

fn default_init_batch() -> usize {
    512
}

fn default_stitch_seeds() -> Vec<u64> {
    vec![0]
}

impl StitchBudget {
    pub fn options(&self, family: StitchFamily, seed: u64) -> StitchOptions {
        let mut budget = TrainConfig::stitcher(self.steps, self.batch_size, seed);
        budget.optimizer = match budget.optimizer {
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
                ..
            } => OptimizerKind::Adam {
                lr: self.lr,
                beta1,
                beta2,
                epsilon,
            },
            other => other,
        };
        budget.schedule = Schedule::Cosine {
            total_steps: self.steps,
        };
        StitchOptions {
            family,
            init: self.init,
            ridge: self.ridge,
            init_batch: self.init_batch,
            budget,
        }
    }

    pub fn family(&self) -> StitchFamily {
        StitchFamily::conv(self.kernel)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Connectivity {
    pub bottom_seed: u64,
    /// Also stitch two networks trained on the two halves of the data.
    #[serde(default)]
    pub disjoint: bool,
    #[serde(default)]
    pub split_seed: u64,
    /// Also stitch the reference network into itself.
    #[serde(default)]
    pub self_stitch: bool,
    /// Seed of an untrained bottom stitched for reference.
    #[serde(default)]
    pub random_seed: Option<u64>,
    #[serde(default = "five_points")]
    pub max_penalty: f64,
    #[serde(default = "one_point")]
    pub self_max_penalty: f64,
    #[serde(default = "twenty_points")]
    pub random_min_penalty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomSanity {
    pub random_seed: u64,
    /// Trained second network the random curve is contrasted with.
    pub reference_seed: u64,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default = "default_cka_examples")]
    pub cka_examples: usize,
    #[serde(default = "fifteen_points")]
    pub min_rise: f64,
    #[serde(default = "ten_points")]
    pub min_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoreData {
    /// Training-set size of the top network.
    pub top_samples: usize,
    pub bottom_seed: u64,
    pub sample_sizes: Vec<usize>,
    /// Sizes are nested prefixes of one shuffle drawn with this seed.
    #[serde(default)]
    pub subset_seed: u64,
    #[serde(default = "one_point")]
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoreTime {
    /// Step counts of the reference run used as bottoms.
    pub checkpoints: Vec<usize>,
    /// Step count of the same run used as the top.
    pub top_checkpoint: usize,
    #[serde(default = "one_point")]
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoreWidth {
    pub bottom_seed: u64,
    /// Bottom widths stitched into the reference-width top.
    pub widths: Vec<f64>,
    /// `[narrow, wide]`: compares wide→narrow with narrow→wide stitching.
    #[serde(default)]
    pub asymmetry: Option<[f64; 2]>,
    #[serde(default = "one_point")]
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelQuality {
    pub bottom_seed: u64,
    /// Include a bottom trained on the two-way coarse labels.
    #[serde(default)]
    pub coarse: bool,
    /// Fractions of training labels replaced by uniform draws.
    #[serde(default)]
    pub noise: Vec<f64>,
    #[serde(default)]
    pub noise_seed: u64,
    #[serde(default = "five_points")]
    pub shallow_max_penalty: f64,
    /// Deep-cut penalty a fully noisy bottom must reach.
    #[serde(default = "twenty_points")]
    pub pure_noise_min_penalty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelAblation {
    pub bottom_seed: u64,
    #[serde(default = "default_kernels")]
    pub kernels: Vec<usize>,
    #[serde(default = "two_points")]
    pub max_spread: f64,
}

fn default_kernels() -> Vec<usize> {
    STITCH_KERNELS.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneBaseline {
    pub random_seed: u64,
    pub bottom_seed: u64,
    /// Cuts below which the bottom is frozen and above which the network is
    /// reinitialized and retrained.
    pub finetune_cuts: Vec<usize>,
    /// Seed of the reinitialized top.
    #[serde(default)]
    pub reinit_seed: u64,
    #[serde(default = "three_points")]
    pub max_finetune_gap: f64,
    #[serde(default = "fifteen_points")]
    pub min_stitch_penalty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezeTraining {
    pub bottom_seed: u64,
    /// Training-set size of the network whose layers get frozen.
    pub samples: usize,
    #[serde(default)]
    pub subset_seed: u64,
    /// A cut qualifies when its penalty is at most this.
    #[serde(default = "one_point")]
    pub select_epsilon: f64,
    #[serde(default = "three_points")]
    pub max_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CkaCompare {
    pub bottom_seed: u64,
    #[serde(default = "default_poolings")]
    pub poolings: Vec<Pooling>,
    #[serde(default = "default_cka_examples")]
    pub cka_examples: usize,
    #[serde(default)]
    pub cka_seed: u64,
    /// Gaussian coordinates appended to the bottom's deepest representation.
    #[serde(default)]
    pub spurious: Option<usize>,
    #[serde(default)]
    pub spurious_seed: u64,
    #[serde(default = "default_cka_drop")]
    pub min_cka_drop: f64,
    #[serde(default = "one_point")]
    pub max_penalty_change: f64,
}

fn default_poolings() -> Vec<Pooling> {
    vec![Pooling::Pool, Pooling::Flatten]
}

fn default_cka_examples() -> usize {
    CKA_EXAMPLES
}

fn default_cka_drop() -> f64 {
    0.05
}

fn one_point() -> f64 {
    0.01
}

fn two_points() -> f64 {
    0.02
}

fn three_points() -> f64 {
    0.03
}

fn five_points() -> f64 {
    0.05
}

fn ten_points() -> f64 {
    0.10
}

fn fifteen_points() -> f64 {
    0.15
}

fn twenty_points() -> f64 {
    0.20
}

/// The experiment kind with its variation parameters and pass thresholds.
/// Errors and thresholds are fractions: 0.01 is one point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", try_from = "toml::Table")]
pub enum Experiment {
    Connectivity(Connectivity),
    RandomSanity(RandomSanity),
    MoreData(MoreData),
    MoreTime(MoreTime),
    MoreWidth(MoreWidth),
    LabelQuality(LabelQuality),
    KernelAblation(KernelAblation),
    FinetuneBaseline(FinetuneBaseline),
    FreezeTraining(FreezeTraining),
    CkaCompare(CkaCompare),
}

fn table_into<T: DeserializeOwned>(table: toml::Table) -> Result<T, String> {
    T::deserialize(toml::Value::Table(table)).map_err(|e| e.to_string())
}

impl TryFrom<toml::Table> for Experiment {
    type Error = String;

    /// Dispatches on `kind`, then reads the rest strictly so misspelled
    /// parameters are rejected rather than silently defaulted.
    fn try_from(mut table: toml::Table) -> Result<Self, String> {
        let kind = match table.remove("kind") {
            Some(toml::Value::String(s)) => s,
            Some(_) => return Err("`kind` must be a string".into()),
            None => return Err("missing `kind`".into()),
        };
        Ok(match kind.as_str() {
            "connectivity" => Experiment::Connectivity(table_into(table)?),
            "random_sanity" => Experiment::RandomSanity(table_into(table)?),
            "more_data" => Experiment::MoreData(table_into(table)?),
            "more_time" => Experiment::MoreTime(table_into(table)?),
            "more_width" => Experiment::MoreWidth(table_into(table)?),
            "label_quality" => Experiment::LabelQuality(table_into(table)?),
            "kernel_ablation" => Experiment::KernelAblation(table_into(table)?),
            "finetune_baseline" => Experiment::FinetuneBaseline(table_into(table)?),
            "freeze_training" => Experiment::FreezeTraining(table_into(table)?),
            "cka_compare" => Experiment::CkaCompare(table_into(table)?),
            other => return Err(format!("unknown experiment kind `{other}`")),
        })
    }
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Connectivity(_) => "connectivity",
            Experiment::RandomSanity(_) => "random_sanity",
            Experiment::MoreData(_) => "more_data",
            Experiment::MoreTime(_) => "more_time",
            Experiment::MoreWidth(_) => "more_width",
            Experiment::LabelQuality(_) => "label_quality",
            Experiment::KernelAblation(_) => "kernel_ablation",
            Experiment::FinetuneBaseline(_) => "finetune_baseline",
            Experiment::FreezeTraining(_) => "freeze_training",
            Experiment::CkaCompare(_) => "cka_compare",
        }
    }
}

impl Manifest {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            source: Box::new(e),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("manifest serializes"),
        ))
    }

    /// Class count of the training data, as declared by its URI.
    pub fn classes(&self) -> Result<usize> {
        Ok(match parse_uri(&self.train_data)? {
            Source::Synthetic { classes, .. } => classes,
            Source::Cifar10 { .. } => 10,
        })
    }

    pub fn spec(&self, width: f64) -> Result<ArchitectureSpec> {
        let spec = ArchitectureSpec::new(&self.arch, width, self.classes()?);
        spec.validate()?;
        Ok(spec)
    }

    /// Number of blocks `L` of the architecture.
    pub fn depth(&self) -> Result<usize> {
        Ok(self.spec(self.width)?.stage_channels()?.len())
    }

    pub fn cuts(&self) -> Result<Vec<usize>> {
        Ok(match &self.cuts {
            Some(c) => c.clone(),
            None => (1..=self.depth()?).collect(),
        })
    }

    /// Static checks; datasets are only parsed, not loaded.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::manifest(format!("{}: {m}", self.id)));
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(Error::manifest(format!(
                "id `{}` must be non-empty [A-Za-z0-9_-]",
                self.id
            )));
        }
        let train_src = parse_uri(&self.train_data)?;
        let test_src = parse_uri(&self.test_data)?;
        let classes = |s: &Source| match s {
            Source::Synthetic { classes, .. } => *classes,
            Source::Cifar10 { .. } => 10,
        };
        if classes(&train_src) != classes(&test_src) {
            return bad("train and test data have different class counts".into());
        }
        let depth = self.depth()?;
        let cuts = self.cuts()?;
        if cuts.is_empty() || cuts.iter().any(|&c| c > depth) {
            return bad(format!(
                "cuts {cuts:?} must be a non-empty subset of 0..={depth}"
            ));
        }
        if cuts.iter().collect::<BTreeSet<_>>().len() != cuts.len() {
            return bad(format!("cuts {cuts:?} repeat"));
        }
        self.train.config(self.seed).validate()?;
        if self.stitch.seeds.is_empty() {
            return bad("at least one stitcher seed is needed".into());
        }
        self.stitch.family().validate(1, 1)?;
        self.stitch
            .options(self.stitch.family(), 0)
            .budget
            .validate()?;
        self.validate_experiment(depth, &bad)
    }

    fn validate_experiment(&self, depth: usize, bad: &dyn Fn(String) -> Result<()>) -> Result<()> {
        let thresholds: Vec<f64> = match &self.experiment {
            Experiment::Connectivity(c) => {
                if c.bottom_seed == self.seed {
                    return bad("connectivity needs two distinct seeds".into());
                }
                vec![c.max_penalty, c.self_max_penalty, c.random_min_penalty]
            }
            Experiment::RandomSanity(r) => {
                if r.cka_examples < 2 {
                    return bad("CKA needs at least 2 examples".into());
                }
                vec![r.min_rise, r.min_gap]
            }
            Experiment::MoreData(m) => {
                if m.sample_sizes.is_empty() || m.sample_sizes.contains(&0) || m.top_samples == 0 {
                    return bad("sample sizes must be positive and non-empty".into());
                }
                vec![m.epsilon]
            }
            Experiment::MoreTime(m) => {
                let steps = self.train.steps;
                if m.checkpoints.is_empty()
                    || m.checkpoints
                        .iter()
                        .chain([&m.top_checkpoint])
                        .any(|&s| s > steps)
                {
                    return bad(format!("checkpoints must lie within the {steps}-step run"));
                }
                vec![m.epsilon]
            }
            Experiment::MoreWidth(m) => {
                for &w in m.widths.iter().chain(m.asymmetry.iter().flatten()) {
                    self.spec(w)?;
                }
                if m.widths.is_empty() {
                    return bad("at least one bottom width is needed".into());
                }
                if m.asymmetry.is_some_and(|[n, w]| n >= w) {
                    return bad("asymmetry is [narrow, wide] with narrow < wide".into());
                }
                vec![m.epsilon]
            }
            Experiment::LabelQuality(l) => {
                if l.noise.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return bad(format!("noise levels {:?} outside [0, 1]", l.noise));
                }
                if !l.coarse && l.noise.is_empty() {
                    return bad("no weak variant requested".into());
                }
                vec![l.shallow_max_penalty, l.pure_noise_min_penalty]
            }
            Experiment::KernelAblation(k) => {
                for &kernel in &k.kernels {
                    StitchFamily::conv(kernel).validate(1, 1)?;
                }
                if k.kernels.is_empty() {
                    return bad("at least one kernel size is needed".into());
                }
                vec![k.max_spread]
            }
            Experiment::FinetuneBaseline(f) => {
                if f.finetune_cuts.is_empty() || f.finetune_cuts.iter().any(|&c| c > depth) {
                    return bad(format!(
                        "fine-tune cuts {:?} outside 0..={depth}",
                        f.finetune_cuts
                    ));
                }
                vec![f.max_finetune_gap, f.min_stitch_penalty]
            }
            Experiment::FreezeTraining(f) => {
                if f.samples == 0 {
                    return bad("the small training set cannot be empty".into());
                }
                vec![f.select_epsilon, f.max_gap]
            }
            Experiment::CkaCompare(c) => {
                if c.cka_examples < 2 || c.poolings.is_empty() {
                    return bad("CKA needs at least 2 examples and one pooling".into());
                }
                vec![c.min_cka_drop, c.max_penalty_change]
            }
        };
        if thresholds.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return bad(format!(
                "thresholds {thresholds:?} must be finite and non-negative"
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"
        id = "tiny"
        train_data = "synth:1:200"
        test_data = "synth:2:100"
        width = 0.25
        seed = 1

        [train]
        steps = 10
        batch_size = 16

        [stitch]
        steps = 5
        batch_size = 16

        [experiment]
        kind = "connectivity"
        bottom_seed = 2
        self_stitch = true
    "#;

    fn tiny() -> Manifest {
        Manifest::parse(TINY, Path::new("tiny.toml")).unwrap()
    }

    #[test]
    fn parses_with_defaults() {
        let m = tiny();
        m.validate().unwrap();
        assert_eq!(m.arch, "small-resnet-8");
        assert_eq!(m.cuts().unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(m.stitch.seeds, vec![0]);
        let Experiment::Connectivity(c) = &m.experiment else {
            panic!()
        };
        assert!(c.self_stitch && !c.disjoint);
        assert_eq!(c.max_penalty, 0.05);
    }

    #[test]
    fn digest_ignores_the_output_directory_only() {
        let a = tiny();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.digest(), b.digest());
        b.seed = 9;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn unknown_fields_and_kinds_are_rejected() {
        let typo = TINY.replace("self_stitch", "self_stich");
        assert!(Manifest::parse(&typo, Path::new("m")).is_err());
        let kind = TINY.replace("\"connectivity\"", "\"teleport\"");
        assert!(Manifest::parse(&kind, Path::new("m")).is_err());
        let top = format!("{TINY}\nextra = 1");
        assert!(Manifest::parse(&top, Path::new("m")).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut m = tiny();
        m.cuts = Some(vec![5]);
        assert!(m.validate().is_err());
        let mut m = tiny();
        m.width = 0.3;
        assert!(m.validate().is_err());
        let mut m = tiny();
        m.experiment = Experiment::Connectivity(Connectivity {
            bottom_seed: 1,
            ..match tiny().experiment {
                Experiment::Connectivity(c) => c,
                _ => unreachable!(),
            }
        });
        assert!(m.validate().is_err());
        let mut m = tiny();
        m.test_data = "synth:2:100:4".into();
        assert!(m.validate().is_err());
        let mut m = tiny();
        m.train_data = "ftp://x".into();
        assert!(m.validate().is_err());
    }

    #[test]
    fn every_kind_round_trips_through_its_name() {
        for kind in [
            "connectivity",
            "random_sanity",
            "more_data",
            "more_time",
            "more_width",
            "label_quality",
            "kernel_ablation",
            "finetune_baseline",
            "freeze_training",
            "cka_compare",
        ] {
            let text = match kind {
                "connectivity" => "bottom_seed = 2",
                "random_sanity" => "random_seed = 3\nreference_seed = 2",
                "more_data" => "top_samples = 50\nbottom_seed = 2\nsample_sizes = [50, 100]",
                "more_time" => "checkpoints = [5, 10]\ntop_checkpoint = 5",
                "more_width" => "bottom_seed = 2\nwidths = [0.25, 0.5]",
                "label_quality" => "bottom_seed = 2\ncoarse = true",
                "kernel_ablation" => "bottom_seed = 2",
                "finetune_baseline" => "random_seed = 3\nbottom_seed = 2\nfinetune_cuts = [1]",
                "freeze_training" => "bottom_seed = 2\nsamples = 50",
                _ => "bottom_seed = 2\nspurious = 10",
            };
            let head = TINY.split("[experiment]").next().unwrap();
            let m = Manifest::parse(
                &format!("{head}[experiment]\nkind = \"{kind}\"\n{text}\n"),
                Path::new("m"),
            )
            .unwrap();
            assert_eq!(m.experiment.kind(), kind);
            m.validate().unwrap();
        }
    }
}
