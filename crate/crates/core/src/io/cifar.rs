//! CIFAR-10 binary batches: 10000 records of one label byte followed by
//! 3072 pixel bytes (R, G, B planes, each 32×32 row-major).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_BYTES: usize = 3 * 32 * 32;
pub const RECORD_BYTES: usize = 1 + IMAGE_BYTES;
pub const RECORDS_PER_FILE: usize = 10_000;
pub const FILE_BYTES: usize = RECORD_BYTES * RECORDS_PER_FILE;
pub const CLASSES: usize = 10;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Undecoded records.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawBatch {
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

impl RawBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn append(&mut self, mut other: RawBatch) {
        self.labels.append(&mut other.labels);
        self.pixels.append(&mut other.pixels);
    }
}

fn data_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Splits raw bytes into records, rejecting labels above 9.
pub fn parse_records(bytes: &[u8], path: &Path) -> Result<RawBatch> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(data_err(
            path,
            format!(
                "size {} is not a positive multiple of the {RECORD_BYTES}-byte record",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut out = RawBatch {
        labels: Vec::with_capacity(n),
        pixels: Vec::with_capacity(n * IMAGE_BYTES),
    };
    for (k, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] as usize >= CLASSES {
            return Err(data_err(
                path,
                format!("label {} at byte offset {} is out of range", rec[0], k * RECORD_BYTES),
            ));
        }
        out.labels.push(rec[0]);
        out.pixels.extend_from_slice(&rec[1..]);
    }
    Ok(out)
}

/// Reads one batch file. With `strict`, the file must hold exactly 10000 records.
pub fn read_batch(path: &Path, strict: bool) -> Result<RawBatch> {
    let bytes = fs::read(path).map_err(|e| data_err(path, e.to_string()))?;
    if strict && bytes.len() != FILE_BYTES {
        return Err(data_err(
            path,
            format!("expected {FILE_BYTES} bytes, found {}", bytes.len()),
        ));
    }
    parse_records(&bytes, path)
}

/// Writes records in the same layout.
pub fn write_batch(path: &Path, batch: &RawBatch) -> Result<()> {
    if batch.pixels.len() != batch.labels.len() * IMAGE_BYTES {
        return Err(Error::shape(format!(
            "{} labels with {} pixel bytes",
            batch.labels.len(),
            batch.pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(batch.len() * RECORD_BYTES);
    for (label, px) in batch.labels.iter().zip(batch.pixels.chunks_exact(IMAGE_BYTES)) {
        out.push(*label);
        out.extend_from_slice(px);
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images `[N, C, H, W]` in `[0, 1]` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.dim(0) != labels.len() {
            return Err(Error::shape(format!(
                "images {:?} with {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        Ok(Dataset {
            images,
            labels,
            split,
        })
    }

    /// Pixels scaled by 1/255.
    pub fn from_raw(raw: &RawBatch, split: Split) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let images = Tensor::new(
            vec![raw.len(), 3, 32, 32],
            raw.pixels.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )?;
        Dataset::new(images, raw.labels.iter().map(|&l| l as usize).collect(), split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.images.dim(1), self.images.dim(2), self.images.dim(3))
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Copies the selected records into a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let (c, h, w) = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("index {i} outside {} records", self.len())));
            }
            data.extend_from_slice(self.images.row(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let (images, labels) = self.batch(indices)?;
        Ok(Dataset {
            images,
            labels,
            split,
        })
    }

    /// The first `per_class` records of every class, in file order.
    pub fn first_per_class(&self, per_class: usize) -> Result<Self> {
        let mut taken = vec![0usize; self.class_count()];
        let picked: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = self.labels[i];
                let keep = taken[c] < per_class;
                taken[c] += usize::from(keep);
                keep
            })
            .collect();
        self.subset(&picked, self.split)
    }

    /// Seeded split keeping each class's share: `fraction` of every class
    /// goes to the second (validation) set.
    pub fn stratified_split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::invalid(format!("split fraction {fraction} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for c in 0..self.class_count() {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            idx.shuffle(&mut rng);
            let k = (idx.len() as f64 * fraction).round() as usize;
            val.extend_from_slice(&idx[..k]);
            train.extend_from_slice(&idx[k..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        if val.is_empty() || train.is_empty() {
            return Err(Error::invalid("split leaves an empty side"));
        }
        Ok((self.subset(&train, Split::Train)?, self.subset(&val, Split::Val)?))
    }
}

fn batch_paths(dir: &Path) -> (Vec<PathBuf>, PathBuf) {
    (
        TRAIN_FILES.iter().map(|f| dir.join(f)).collect(),
        dir.join(TEST_FILE),
    )
}

/// All 50000 training and 10000 test records.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let (train_paths, test_path) = batch_paths(dir);
    let mut raw = RawBatch::default();
    for p in &train_paths {
        raw.append(read_batch(p, true)?);
    }
    let test = read_batch(&test_path, true)?;
    Ok((Dataset::from_raw(&raw, Split::Train)?, Dataset::from_raw(&test, Split::Test)?))
}

/// The 10000 test records.
pub fn load_cifar10_test(dir: &Path) -> Result<Dataset> {
    Dataset::from_raw(&read_batch(&dir.join(TEST_FILE), true)?, Split::Test)
}

/// The first `per_class` training records of each class (file order) and the
/// full test set, without decoding the rest of the training data.
pub fn load_cifar10_subset(dir: &Path, per_class: usize) -> Result<(Dataset, Dataset)> {
    let (train_paths, test_path) = batch_paths(dir);
    let mut taken = [0usize; CLASSES];
    let mut raw = RawBatch::default();
    for p in &train_paths {
        if taken.iter().all(|&t| t >= per_class) {
            break;
        }
        let batch = read_batch(p, true)?;
        for (k, &l) in batch.labels.iter().enumerate() {
            if taken[l as usize] < per_class {
                taken[l as usize] += 1;
                raw.labels.push(l);
                raw.pixels
                    .extend_from_slice(&batch.pixels[k * IMAGE_BYTES..(k + 1) * IMAGE_BYTES]);
            }
        }
    }
    let test = read_batch(&test_path, true)?;
    Ok((Dataset::from_raw(&raw, Split::Train)?, Dataset::from_raw(&test, Split::Test)?))
}
