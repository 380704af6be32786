//! CIFAR-10 binary batches: each record is one label byte followed by 3072
//! pixel bytes (1024 red, 1024 green, 1024 blue, row-major 32×32).

use std::fs;
use std::path::Path;

use super::dataset::{Dataset, Split};
use super::persist::write_locked;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CLASSES: usize = 10;
pub const MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

pub fn parse_cifar10(bytes: &[u8], path: &Path, split: Split) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            len: bytes.len(),
            record: RECORD_BYTES,
        });
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks(RECORD_BYTES) {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(Error::LabelRange {
                label,
                classes: CLASSES,
            });
        }
        labels.push(label);
        for (i, &b) in rec[1..].iter().enumerate() {
            let c = i / 1024;
            data.push((b as f64 / 255.0 - MEAN[c]) / STD[c]);
        }
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, 3, 32, 32], data)?,
        labels,
        num_classes: CLASSES,
        split,
        mean: MEAN.to_vec(),
        std: STD.to_vec(),
    })
}

pub fn load_cifar10_bin(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes, path, split)
}

/// Concatenates several batch files.
pub fn load_cifar10_files(paths: &[&Path], split: Split) -> Result<Dataset> {
    let mut parts = Vec::new();
    for p in paths {
        parts.push(load_cifar10_bin(p, split)?);
    }
    let images = Tensor::stack_rows(&parts.iter().map(|d| d.images.clone()).collect::<Vec<_>>())?;
    let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
    Ok(Dataset {
        images,
        labels,
        ..parts.swap_remove(0)
    })
}

/// The standard training or test batches inside an extracted CIFAR-10 directory.
pub fn load_cifar10_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let names: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Eval => vec!["test_batch.bin".into()],
    };
    let paths: Vec<_> = names.iter().map(|n| dir.join(n)).collect();
    let refs: Vec<&Path> = paths.iter().map(|p| p.as_path()).collect();
    load_cifar10_files(&refs, split)
}

/// Inverse of [`parse_cifar10`]: recovers the pixel bytes of a CIFAR-shaped dataset.
pub fn encode_cifar10(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.images.shape()[1..] != [3, 32, 32] {
        return Err(Error::Dataset(format!("not CIFAR-shaped: {:?}", ds.images.shape())));
    }
    let mut out = Vec::with_capacity(ds.len() * RECORD_BYTES);
    for (i, &y) in ds.labels.iter().enumerate() {
        out.push(u8::try_from(y).map_err(|_| Error::LabelRange { label: y, classes: 256 })?);
        for (j, &x) in ds.images.data()[i * 3072..(i + 1) * 3072].iter().enumerate() {
            let c = j / 1024;
            let v = ((x * ds.std[c] + ds.mean[c]) * 255.0).round().clamp(0.0, 255.0);
            out.push(v as u8);
        }
    }
    Ok(out)
}

pub fn write_cifar10_bin(ds: &Dataset, path: &Path) -> Result<()> {
    write_locked(path, &encode_cifar10(ds)?)
}
