use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Normalization, Split};
use crate::error::{Error, Result};

/// One label byte followed by 1024 red, 1024 green and 1024 blue bytes.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// Undecoded pixels as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImages {
    /// `n·3·32·32` bytes, channel planes in R, G, B order.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Parses one batch file that must hold exactly `records` records.
pub fn read_cifar_file(path: impl AsRef<Path>, records: usize) -> Result<RawImages> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = (records * CIFAR_RECORD) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::DataLength {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    let mut pixels = Vec::with_capacity(records * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(records);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Data(format!("{}: label byte {} is not a class", path.display(), rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(RawImages { pixels, labels })
}

pub fn write_cifar_file(path: impl AsRef<Path>, raw: &RawImages) -> Result<()> {
    let path = path.as_ref();
    let per = CIFAR_RECORD - 1;
    if raw.pixels.len() != raw.labels.len() * per {
        return Err(Error::Data(format!(
            "{} pixel bytes do not make {} records",
            raw.pixels.len(),
            raw.labels.len()
        )));
    }
    let mut out = Vec::with_capacity(raw.len() * CIFAR_RECORD);
    for (y, px) in raw.labels.iter().zip(raw.pixels.chunks_exact(per)) {
        out.push(*y);
        out.extend_from_slice(px);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Standard CIFAR-10 binary directory: five train batches and one test batch.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    load_cifar10_with(dir, CIFAR_RECORDS_PER_FILE)
}

/// As [`load_cifar10`] with a different per-file record count, for small
/// fixtures in the same layout.
pub fn load_cifar10_with(dir: impl AsRef<Path>, records_per_file: usize) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let mut train = RawImages {
        pixels: Vec::new(),
        labels: Vec::new(),
    };
    for name in TRAIN_FILES {
        let part = read_cifar_file(dir.join(name), records_per_file)?;
        train.pixels.extend(part.pixels);
        train.labels.extend(part.labels);
    }
    let test = read_cifar_file(dir.join(TEST_FILE), records_per_file)?;

    let to_float = |raw: &RawImages| -> Vec<f32> { raw.pixels.iter().map(|&b| b as f32 / 255.0).collect() };
    let mut train_px = to_float(&train);
    let mut test_px = to_float(&test);
    let plane = 32 * 32;
    let norm = Normalization::fit(&train_px, 3, plane);
    norm.apply(&mut train_px, plane);
    norm.apply(&mut test_px, plane);

    let labels = |raw: &RawImages| raw.labels.iter().map(|&y| y as usize).collect::<Vec<_>>();
    Ok((
        Dataset::new(train_px, labels(&train), [3, 32, 32], 10, Split::Train, norm.clone())?,
        Dataset::new(test_px, labels(&test), [3, 32, 32], 10, Split::Test, norm)?,
    ))
}

/// File names a CIFAR-10 directory must contain.
pub fn cifar_files(dir: &Path) -> Vec<PathBuf> {
    TRAIN_FILES.iter().chain([&TEST_FILE]).map(|n| dir.join(n)).collect()
}
