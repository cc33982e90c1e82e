//! Labelled image datasets, their sources and the label/data manipulations
//! experiments apply to them.

mod cifar;
pub mod synthetic;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cifar::{load_cifar10, read_cifar_batch, CIFAR_COARSE, CIFAR_RECORD};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Synthetic { seed: u64, n: usize, classes: usize },
    Cifar10 { dir: String, split: Split },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Subset { n: usize, seed: u64 },
    Part { k: usize, index: usize, seed: u64 },
    CorruptLabels { p: f64, seed: u64 },
    Coarsen { mapping: Vec<usize> },
}

/// Where a dataset came from and what was done to it, in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: Source,
    pub transforms: Vec<Transform>,
}

impl Provenance {
    /// Rebuilds the dataset from its source by re-applying every transform.
    pub fn replay(&self) -> Result<LabeledDataset> {
        let mut ds = match &self.source {
            Source::Synthetic { seed, n, classes } => generate_synthetic(*seed, *n, *classes)?,
            Source::Cifar10 { dir, split } => {
                let (train, test) = load_cifar10(Path::new(dir))?;
                match split {
                    Split::Train => train,
                    Split::Test => test,
                }
            }
        };
        for t in &self.transforms {
            ds = match t {
                Transform::Subset { n, seed } => subset(&ds, *n, *seed)?,
                Transform::Part { k, index, seed } => {
                    disjoint_split(&ds, *k, *seed)?.swap_remove(*index)
                }
                Transform::CorruptLabels { p, seed } => corrupt_labels(&ds, *p, *seed)?,
                Transform::Coarsen { mapping } => coarsen_labels(&ds, mapping)?,
            };
        }
        Ok(ds)
    }
}

/// Images `[N, 3, H, W]` in `[0, 1]` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        let (n, ..) = images.dims4()?;
        if n == 0 {
            return Err(Error::DatasetFormat("dataset is empty".into()));
        }
        if n != labels.len() {
            return Err(Error::DatasetFormat(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(LabeledDataset {
            images,
            labels,
            classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    fn derived(
        &self,
        images: Tensor,
        labels: Vec<usize>,
        classes: usize,
        t: Transform,
    ) -> Result<Self> {
        let mut provenance = self.provenance.clone();
        provenance.transforms.push(t);
        LabeledDataset::new(images, labels, classes, provenance)
    }

    fn select(&self, indices: &[usize], t: Transform) -> Result<Self> {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        self.derived(self.images.gather_outer(indices)?, labels, self.classes, t)
    }
}

/// `n` rendered shape images, labels `i % classes`.
pub fn generate_synthetic(seed: u64, n: usize, classes: usize) -> Result<LabeledDataset> {
    if !(2..=synthetic::MAX_CLASSES).contains(&classes) {
        return Err(Error::invalid(
            "generate_synthetic",
            format!(
                "classes must be in 2..={}, got {classes}",
                synthetic::MAX_CLASSES
            ),
        ));
    }
    if n < classes {
        return Err(Error::invalid(
            "generate_synthetic",
            format!("n = {n} is below the class count {classes}"),
        ));
    }
    let (images, labels) = synthetic::generate(seed, n, classes);
    LabeledDataset::new(
        images,
        labels,
        classes,
        Provenance {
            source: Source::Synthetic { seed, n, classes },
            transforms: Vec::new(),
        },
    )
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Uniform sample of `n` examples without replacement, in shuffled order.
pub fn subset(ds: &LabeledDataset, n: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 || n > ds.len() {
        return Err(Error::invalid(
            "subset",
            format!("cannot take {n} of {} examples", ds.len()),
        ));
    }
    let idx = shuffled(ds.len(), seed);
    ds.select(&idx[..n], Transform::Subset { n, seed })
}

/// `k` disjoint parts of `⌊N/k⌋` examples each.
pub fn disjoint_split(ds: &LabeledDataset, k: usize, seed: u64) -> Result<Vec<LabeledDataset>> {
    if k == 0 || k > ds.len() {
        return Err(Error::invalid(
            "disjoint_split",
            format!("cannot split {} examples {k} ways", ds.len()),
        ));
    }
    let idx = shuffled(ds.len(), seed);
    let m = ds.len() / k;
    (0..k)
        .map(|index| {
            ds.select(
                &idx[index * m..(index + 1) * m],
                Transform::Part { k, index, seed },
            )
        })
        .collect()
}

/// Replaces the labels of exactly `round(p·N)` uniformly chosen examples
/// with labels drawn uniformly from all classes (the draw may repeat the
/// original label).
pub fn corrupt_labels(ds: &LabeledDataset, p: f64, seed: u64) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(
            "corrupt_labels",
            format!("p = {p} outside [0, 1]"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng);
    let count = (p * ds.len() as f64).round() as usize;
    let mut labels = ds.labels.clone();
    for &i in &idx[..count] {
        labels[i] = rng.random_range(0..ds.classes);
    }
    ds.derived(
        ds.images.clone(),
        labels,
        ds.classes,
        Transform::CorruptLabels { p, seed },
    )
}

/// Relabels class `c` as `mapping[c]`; the new class count is `max + 1`.
pub fn coarsen_labels(ds: &LabeledDataset, mapping: &[usize]) -> Result<LabeledDataset> {
    if mapping.len() != ds.classes {
        return Err(Error::invalid(
            "coarsen_labels",
            format!("mapping covers {} of {} classes", mapping.len(), ds.classes),
        ));
    }
    let classes = mapping.iter().max().map_or(0, |m| m + 1);
    let labels = ds.labels.iter().map(|&l| mapping[l]).collect();
    ds.derived(
        ds.images.clone(),
        labels,
        classes.max(1),
        Transform::Coarsen {
            mapping: mapping.to_vec(),
        },
    )
}

/// Parses `synth:<seed>:<n>[:<classes>]` or `cifar10:<dir>:<train|test>`.
pub fn parse_uri(uri: &str) -> Result<Source> {
    let bad = || Error::invalid("dataset uri", format!("cannot parse `{uri}`"));
    let mut parts = uri.splitn(2, ':');
    match (parts.next(), parts.next()) {
        (Some("synth"), Some(rest)) => {
            let f: Vec<&str> = rest.split(':').collect();
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad());
            match f[..] {
                [seed, n] => Ok(Source::Synthetic {
                    seed: num(seed)?,
                    n: num(n)? as usize,
                    classes: 10,
                }),
                [seed, n, classes] => Ok(Source::Synthetic {
                    seed: num(seed)?,
                    n: num(n)? as usize,
                    classes: num(classes)? as usize,
                }),
                _ => Err(bad()),
            }
        }
        (Some("cifar10"), Some(rest)) => {
            let (dir, split) = rest.rsplit_once(':').ok_or_else(bad)?;
            let split = match split {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(bad()),
            };
            Ok(Source::Cifar10 {
                dir: dir.to_string(),
                split,
            })
        }
        _ => Err(bad()),
    }
}

pub fn load_uri(uri: &str) -> Result<LabeledDataset> {
    Provenance {
        source: parse_uri(uri)?,
        transforms: Vec::new(),
    }
    .replay()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(n: usize) -> LabeledDataset {
        generate_synthetic(5, n, 10).unwrap()
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = ds(200);
        assert_eq!(a, ds(200));
        assert_ne!(a.images, generate_synthetic(6, 200, 10).unwrap().images);
        assert!(a.histogram().iter().all(|&c| c == 20));
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn synthetic_prefixes_agree() {
        let big = ds(50);
        let small = ds(20);
        assert_eq!(big.images.slice_outer(0, 20).unwrap(), small.images);
    }

    #[test]
    fn subset_of_everything_is_a_permutation() {
        let d = ds(40);
        let s = subset(&d, 40, 1).unwrap();
        let mut a = d.labels.clone();
        let mut b = s.labels.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert!(subset(&d, 41, 1).is_err());
    }

    #[test]
    fn disjoint_parts_do_not_overlap() {
        let d = ds(30);
        let parts = disjoint_split(&d, 3, 2).unwrap();
        assert!(parts.iter().all(|p| p.len() == 10));
        let key = |p: &LabeledDataset, i: usize| p.images.slice_outer(i, i + 1).unwrap().into_vec();
        for a in 0..3 {
            for b in a + 1..3 {
                for i in 0..10 {
                    for j in 0..10 {
                        assert_ne!(key(&parts[a], i), key(&parts[b], j));
                    }
                }
            }
        }
    }

    #[test]
    fn corruption_touches_exact_count() {
        let d = ds(100);
        assert_eq!(corrupt_labels(&d, 0.0, 3).unwrap().labels, d.labels);
        // Touched indices are the first round(pN) of the seeded shuffle.
        let c = corrupt_labels(&d, 0.5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut idx: Vec<usize> = (0..100).collect();
        idx.shuffle(&mut rng);
        let touched: std::collections::HashSet<usize> = idx[..50].iter().copied().collect();
        for i in 0..100 {
            if !touched.contains(&i) {
                assert_eq!(c.labels[i], d.labels[i]);
            }
        }
        assert_eq!(c.images, d.images);
        assert!(corrupt_labels(&d, 1.5, 0).is_err());
    }

    #[test]
    fn coarsening() {
        let d = ds(20);
        let id: Vec<usize> = (0..10).collect();
        assert_eq!(coarsen_labels(&d, &id).unwrap().labels, d.labels);
        let c = coarsen_labels(&d, &synthetic::coarse_map(10)).unwrap();
        assert_eq!(c.classes, 2);
        assert!(coarsen_labels(&d, &[0, 1]).is_err());
        // Composing two coarsenings equals coarsening by the composed map.
        let m1: Vec<usize> = (0..10).map(|c| c / 2).collect();
        let m2 = vec![0, 0, 1, 1, 1];
        let twice = coarsen_labels(&coarsen_labels(&d, &m1).unwrap(), &m2).unwrap();
        let composed: Vec<usize> = m1.iter().map(|&c| m2[c]).collect();
        assert_eq!(twice.labels, coarsen_labels(&d, &composed).unwrap().labels);
    }

    #[test]
    fn provenance_replays() {
        let d = ds(60);
        let t = corrupt_labels(&subset(&d, 30, 4).unwrap(), 0.3, 9).unwrap();
        let t = coarsen_labels(&t, &synthetic::coarse_map(10)).unwrap();
        assert_eq!(t.provenance.replay().unwrap(), t);
        let parts = disjoint_split(&d, 2, 8).unwrap();
        assert_eq!(parts[1].provenance.replay().unwrap(), parts[1]);
    }

    #[test]
    fn uris() {
        assert_eq!(
            parse_uri("synth:7:1000").unwrap(),
            Source::Synthetic {
                seed: 7,
                n: 1000,
                classes: 10
            }
        );
        assert_eq!(
            parse_uri("cifar10:/data/c10:test").unwrap(),
            Source::Cifar10 {
                dir: "/data/c10".into(),
                split: Split::Test
            }
        );
        assert!(parse_uri("imagenet:x").is_err());
        assert!(parse_uri("synth:x:10").is_err());
    }
}
