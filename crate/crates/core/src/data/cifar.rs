//! CIFAR-10 / CIFAR-100 binary-format readers.
//!
//! Expected layouts under the dataset root (the root may also point directly
//! at the inner directory):
//!
//! ```text
//! cifar-10-batches-bin/data_batch_{1..5}.bin, test_batch.bin   (1 label byte + 3072 pixels)
//! cifar-100-binary/train.bin, test.bin                         (coarse, fine, 3072 pixels)
//! ```
//!
//! Pixels are stored channel-major (1024 red, 1024 green, 1024 blue) and are
//! converted to height x width x channels in `[0, 1]`. An optional
//! `SHA256SUMS` file next to the batches is verified when present.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::{LabeledDataset, TrainTest};
use crate::error::{Error, Result};
use crate::nn::ImageShape;

const PIXELS: usize = 32 * 32 * 3;
const SHAPE: ImageShape = ImageShape::new(32, 32, 3);

struct Layout {
    dir: &'static str,
    train: &'static [&'static str],
    test: &'static str,
    label_bytes: usize,
    /// Which of the leading label bytes holds the class.
    label_byte: usize,
    num_classes: usize,
    records_per_train_file: usize,
    records_test: usize,
}

const CIFAR10: Layout = Layout {
    dir: "cifar-10-batches-bin",
    train: &["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"],
    test: "test_batch.bin",
    label_bytes: 1,
    label_byte: 0,
    num_classes: 10,
    records_per_train_file: 10_000,
    records_test: 10_000,
};

const CIFAR100: Layout = Layout {
    dir: "cifar-100-binary",
    train: &["train.bin"],
    test: "test.bin",
    label_bytes: 2,
    label_byte: 1,
    num_classes: 100,
    records_per_train_file: 50_000,
    records_test: 10_000,
};

fn resolve_dir(root: &Path, layout: &Layout) -> PathBuf {
    let nested = root.join(layout.dir);
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn read_checksums(dir: &Path) -> Result<HashMap<String, String>> {
    let path = dir.join("SHA256SUMS");
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| {
            let mut parts = l.split_whitespace();
            let sum = parts.next()?;
            let name = parts.next()?.trim_start_matches('*');
            Some((name.to_string(), sum.to_lowercase()))
        })
        .collect())
}

fn read_file(
    dir: &Path,
    file: &str,
    layout: &Layout,
    records: usize,
    sums: &HashMap<String, String>,
) -> Result<(Vec<f32>, Vec<usize>)> {
    let path = dir.join(file);
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::CorruptData { path: path.clone(), reason: format!("cannot read: {e}") })?;
    let record = layout.label_bytes + PIXELS;
    if bytes.len() != records * record {
        return Err(Error::CorruptData {
            path,
            reason: format!("expected {} bytes, found {}", records * record, bytes.len()),
        });
    }
    if let Some(expected) = sums.get(file) {
        let actual = hex::encode(Sha256::digest(&bytes));
        if &actual != expected {
            return Err(Error::CorruptData { path, reason: "checksum mismatch".into() });
        }
    }
    let mut pixels = vec![0.0f32; records * PIXELS];
    let mut labels = Vec::with_capacity(records);
    for (r, chunk) in bytes.chunks_exact(record).enumerate() {
        let y = chunk[layout.label_byte] as usize;
        if y >= layout.num_classes {
            return Err(Error::CorruptData { path, reason: format!("label {y} in record {r}") });
        }
        labels.push(y);
        let img = &chunk[layout.label_bytes..];
        let out = &mut pixels[r * PIXELS..(r + 1) * PIXELS];
        for c in 0..3 {
            for p in 0..1024 {
                out[p * 3 + c] = img[c * 1024 + p] as f32 / 255.0;
            }
        }
    }
    Ok((pixels, labels))
}

fn load(root: &Path, layout: &Layout, name: &str) -> Result<TrainTest> {
    let dir = resolve_dir(root, layout);
    let sums = read_checksums(&dir)?;
    let mut train_px = Vec::new();
    let mut train_y = Vec::new();
    for file in layout.train {
        let (px, y) = read_file(&dir, file, layout, layout.records_per_train_file, &sums)?;
        train_px.extend(px);
        train_y.extend(y);
    }
    let (test_px, test_y) = read_file(&dir, layout.test, layout, layout.records_test, &sums)?;
    let to_array = |px: Vec<f32>, n: usize| Array2::from_shape_vec((n, PIXELS), px).expect("record count checked");
    let train = to_array(train_px, train_y.len());
    let test = to_array(test_px, test_y.len());
    Ok(TrainTest {
        train: LabeledDataset::new(name, layout.num_classes, SHAPE, train, train_y)?,
        test: LabeledDataset::new(name, layout.num_classes, SHAPE, test, test_y)?,
    })
}

pub fn load_cifar10(root: &Path) -> Result<TrainTest> {
    load(root, &CIFAR10, "cifar10")
}

pub fn load_cifar100(root: &Path) -> Result<TrainTest> {
    load(root, &CIFAR100, "cifar100")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Writes a miniature CIFAR-10 layout with `records` per file.
    fn write_fake(dir: &Path, layout: &Layout, records: usize) {
        std::fs::create_dir_all(dir).unwrap();
        let record = layout.label_bytes + PIXELS;
        for file in layout.train.iter().chain(std::iter::once(&layout.test)) {
            let mut bytes = vec![0u8; records * record];
            for r in 0..records {
                bytes[r * record + layout.label_byte] = (r % layout.num_classes) as u8;
                // red channel of pixel 0 carries the record number
                bytes[r * record + layout.label_bytes] = r as u8;
                // blue channel of the last pixel is saturated
                bytes[r * record + layout.label_bytes + 3 * 1024 - 1] = 255;
            }
            std::fs::write(dir.join(file), bytes).unwrap();
        }
    }

    fn small_layout() -> Layout {
        Layout { records_per_train_file: 4, records_test: 4, ..CIFAR10 }
    }

    #[test]
    fn decodes_channel_major_records() {
        let tmp = tempfile::tempdir().unwrap();
        let layout = small_layout();
        write_fake(&tmp.path().join(layout.dir), &layout, 4);
        let tt = load(tmp.path(), &layout, "cifar10").unwrap();
        assert_eq!(tt.train.len(), 20);
        assert_eq!(tt.test.len(), 4);
        assert_eq!(tt.train.labels()[..4], [0, 1, 2, 3]);
        let row = tt.train.images().row(3);
        assert!((row[0] - 3.0 / 255.0).abs() < 1e-7);
        assert_eq!(row[PIXELS - 1], 1.0);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let tmp = tempfile::tempdir().unwrap();
        let layout = small_layout();
        let dir = tmp.path().join(layout.dir);
        write_fake(&dir, &layout, 4);
        std::fs::write(dir.join("test_batch.bin"), [0u8; 100]).unwrap();
        assert!(matches!(load(tmp.path(), &layout, "cifar10"), Err(Error::CorruptData { .. })));
    }

    #[test]
    fn checksum_mismatch_is_corrupt() {
        let tmp = tempfile::tempdir().unwrap();
        let layout = small_layout();
        let dir = tmp.path().join(layout.dir);
        write_fake(&dir, &layout, 4);
        std::fs::write(dir.join("SHA256SUMS"), format!("{}  test_batch.bin\n", "0".repeat(64))).unwrap();
        let err = load(tmp.path(), &layout, "cifar10").unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn missing_files_are_reported() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(load_cifar10(tmp.path()), Err(Error::CorruptData { .. })));
    }
}
