//! Reader for the CIFAR-10 binary distribution (`cifar-10-batches-bin`).

use std::path::Path;

use super::{LabeledDataset, Provenance, Source, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One label byte followed by a 3·32·32 channel-major image.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const RECORDS_PER_FILE: usize = 10_000;

/// Animals → 0, vehicles → 1, indexed by the CIFAR-10 class id
/// (airplane, automobile, bird, cat, deer, dog, frog, horse, ship, truck).
pub const CIFAR_COARSE: [usize; 10] = [1, 1, 0, 0, 0, 0, 0, 0, 1, 1];

/// Decodes one batch file into images scaled to `[0, 1]` and labels.
pub fn read_cifar_batch(path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes).map_err(|e| Error::DatasetFormat(format!("{}: {e}", path.display())))
}

fn decode(bytes: &[u8]) -> std::result::Result<(Vec<f32>, Vec<usize>), String> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(format!(
            "length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(format!("record {i} has label {label}"));
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((images, labels))
}

fn load_files(dir: &Path, names: &[String], split: Split) -> Result<LabeledDataset> {
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for name in names {
        let path = dir.join(name);
        let (im, lb) = read_cifar_batch(&path)?;
        if lb.len() != RECORDS_PER_FILE {
            return Err(Error::DatasetFormat(format!(
                "{}: {} records, expected {RECORDS_PER_FILE}",
                path.display(),
                lb.len()
            )));
        }
        images.extend(im);
        labels.extend(lb);
    }
    let n = labels.len();
    let provenance = Provenance {
        source: Source::Cifar10 {
            dir: dir.display().to_string(),
            split,
        },
        transforms: Vec::new(),
    };
    LabeledDataset::new(
        Tensor::from_vec(&[n, 3, 32, 32], images)?,
        labels,
        10,
        provenance,
    )
}

/// Loads the 50 000 training and 10 000 test images from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let train: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    let test = ["test_batch.bin".to_string()];
    Ok((
        load_files(dir, &train, Split::Train)?,
        load_files(dir, &test, Split::Test)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_label_and_scales_pixels() {
        let mut rec = vec![0u8; 2 * CIFAR_RECORD];
        rec[0] = 7;
        rec[1] = 255;
        rec[CIFAR_RECORD] = 3;
        rec[CIFAR_RECORD + 3072] = 51;
        let (im, lb) = decode(&rec).unwrap();
        assert_eq!(lb, vec![7, 3]);
        assert_eq!(im[0], 1.0);
        assert!((im[2 * 3072 - 1] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn rejects_truncated_or_bad_labels() {
        assert!(decode(&vec![0u8; CIFAR_RECORD - 1]).is_err());
        assert!(decode(&[]).is_err());
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 10;
        assert!(decode(&rec).is_err());
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        let err = load_cifar10(Path::new("/nonexistent/cifar")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn coarse_map_groups_vehicles() {
        let vehicles: Vec<usize> = (0..10).filter(|&c| CIFAR_COARSE[c] == 1).collect();
        assert_eq!(vehicles, vec![0, 1, 8, 9]);
    }
}
