//! CIFAR-10 binary batches, labeled/unlabeled/validation splits and the
//! paired per-epoch batch schedule.
//!
//! Images are kept as raw bytes in the on-disk channel-major layout
//! (`[3, 32, 32]` per record) and converted to `f64` only when a batch is built.

use std::fmt::Write as _;
use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_BYTES: usize = CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;
pub const NUM_CLASSES: usize = 10;
pub const TRAIN_RECORDS: usize = 50_000;
pub const TEST_RECORDS: usize = 10_000;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Per-channel statistics of the CIFAR-10 training set, on the [0, 1] scale.
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    split: SplitName,
}

impl RawDataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>, split: SplitName) -> Result<Self> {
        if pixels.len() != labels.len() * IMAGE_BYTES {
            return Err(Error::Input(format!(
                "{} pixel bytes for {} labels",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Input(format!("label {bad} outside 0..{NUM_CLASSES}")));
        }
        Ok(Self { pixels, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self) -> SplitName {
        self.split
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Channel-major pixels of record `i`.
    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    /// Record `i` in the on-disk layout: label byte then pixels.
    pub fn record(&self, i: usize) -> [u8; RECORD_BYTES] {
        let mut out = [0u8; RECORD_BYTES];
        out[0] = self.labels[i];
        out[1..].copy_from_slice(self.image(i));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * RECORD_BYTES);
        for i in 0..self.len() {
            out.extend_from_slice(&self.record(i));
        }
        out
    }

    fn extend(&mut self, other: RawDataset) {
        self.pixels.extend(other.pixels);
        self.labels.extend(other.labels);
    }
}

/// Parse the records of one batch file. `file` only labels errors.
pub fn parse_records(bytes: &[u8], file: &Path, split: SplitName) -> Result<RawDataset> {
    let whole = bytes.len() / RECORD_BYTES;
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Parse {
            file: file.to_path_buf(),
            offset: (whole * RECORD_BYTES) as u64,
            reason: format!(
                "truncated record: {} of {RECORD_BYTES} bytes",
                bytes.len() % RECORD_BYTES
            ),
        });
    }
    let mut labels = Vec::with_capacity(whole);
    let mut pixels = Vec::with_capacity(whole * IMAGE_BYTES);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] as usize >= NUM_CLASSES {
            return Err(Error::Parse {
                file: file.to_path_buf(),
                offset: (i * RECORD_BYTES) as u64,
                reason: format!("label byte {} is not a class in 0..{NUM_CLASSES}", rec[0]),
            });
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(RawDataset { pixels, labels, split })
}

pub fn read_batch_file(path: &Path, split: SplitName) -> Result<RawDataset> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::Parse {
            file: path.to_path_buf(),
            offset: 0,
            reason: "batch file is missing".into(),
        },
        _ => Error::io(path, e),
    })?;
    parse_records(&bytes, path, split)
}

pub fn write_batch_file(path: &Path, data: &RawDataset) -> Result<()> {
    fs::write(path, data.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Load the five training batches and the test batch, requiring the
/// standard 50,000 / 10,000 record counts.
pub fn load_cifar10(dir: &Path) -> Result<(RawDataset, RawDataset)> {
    let (train, test) = load_cifar10_partial(dir)?;
    for (data, want) in [(&train, TRAIN_RECORDS), (&test, TEST_RECORDS)] {
        if data.len() != want {
            return Err(Error::Input(format!(
                "{:?} split of {} has {} records, expected {want}",
                data.split(),
                dir.display(),
                data.len()
            )));
        }
    }
    Ok((train, test))
}

/// Like [`load_cifar10`] but accepts any record count, for reduced corpora
/// written in the same format.
pub fn load_cifar10_partial(dir: &Path) -> Result<(RawDataset, RawDataset)> {
    let mut train = RawDataset {
        pixels: Vec::new(),
        labels: Vec::new(),
        split: SplitName::Train,
    };
    for name in TRAIN_FILES {
        train.extend(read_batch_file(&dir.join(name), SplitName::Train)?);
    }
    let test = read_batch_file(&dir.join(TEST_FILE), SplitName::Test)?;
    Ok((train, test))
}

/// Write `train` over the five training files (as evenly as possible) and `test`.
pub fn write_cifar10_dir(dir: &Path, train: &RawDataset, test: &RawDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = train.len();
    for (k, name) in TRAIN_FILES.iter().enumerate() {
        let (lo, hi) = (k * n / 5, (k + 1) * n / 5);
        let part = RawDataset {
            pixels: train.pixels[lo * IMAGE_BYTES..hi * IMAGE_BYTES].to_vec(),
            labels: train.labels[lo..hi].to_vec(),
            split: SplitName::Train,
        };
        write_batch_file(&dir.join(name), &part)?;
    }
    write_batch_file(&dir.join(TEST_FILE), test)
}

/// Class-conditional procedural images in CIFAR layout: each class is a
/// striped, colored disc of a class-specific orientation, frequency and hue,
/// placed at a random position over a noisy background.
pub fn synthetic_dataset(n: usize, split: SplitName, seed: u64) -> RawDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * IMAGE_BYTES);
    let side = IMAGE_SIDE as f64;
    for i in 0..n {
        let class = (i % NUM_CLASSES) as u8;
        let k = class as f64;
        let angle = k * std::f64::consts::PI / NUM_CLASSES as f64;
        let freq = 2.0 + (class % 3) as f64;
        let color = [
            0.5 + 0.5 * (k * 0.63).cos(),
            0.5 + 0.5 * (k * 0.63 + 2.1).cos(),
            0.5 + 0.5 * (k * 0.63 + 4.2).cos(),
        ];
        let radius = rng.random_range(7.0..11.0);
        let cy = rng.random_range(radius..side - radius);
        let cx = rng.random_range(radius..side - radius);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let background: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.6));
        let mut image = [0u8; IMAGE_BYTES];
        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = (dy * dy + dx * dx).sqrt() <= radius;
                let stripe = (freq * std::f64::consts::TAU * (dx * angle.cos() + dy * angle.sin()) / side + phase).sin();
                for c in 0..CHANNELS {
                    let noise = rng.random_range(-0.08..0.08);
                    let v = if inside {
                        color[c] * (0.6 + 0.4 * stripe)
                    } else {
                        background[c]
                    };
                    image[c * IMAGE_SIDE * IMAGE_SIDE + y * IMAGE_SIDE + x] = ((v + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        labels.push(class);
        pixels.extend_from_slice(&image);
    }
    // Shuffle record order so class never follows position.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut out = RawDataset {
        pixels: Vec::with_capacity(n * IMAGE_BYTES),
        labels: Vec::with_capacity(n),
        split,
    };
    for i in order {
        out.labels.push(labels[i]);
        out.pixels.extend_from_slice(&pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]);
    }
    out
}

/// Scale bytes to [0, 1], keeping the `[C, H, W]` layout.
pub fn image_to_unit(bytes: &[u8]) -> Array3<f64> {
    Array3::from_shape_fn((CHANNELS, IMAGE_SIDE, IMAGE_SIDE), |(c, y, x)| {
        bytes[c * IMAGE_SIDE * IMAGE_SIDE + y * IMAGE_SIDE + x] as f64 / 255.0
    })
}

/// Standardize a [0, 1] image in place with the fixed CIFAR statistics.
pub fn standardize(image: &mut Array3<f64>) {
    for (c, mut plane) in image.outer_iter_mut().enumerate() {
        plane.mapv_inplace(|v| (v - CIFAR_MEAN[c]) / CIFAR_STD[c]);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub labeled_count: usize,
    pub ratio: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            labeled_count: 5000,
            ratio: 1.0,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validation_count(&self, train_size: usize) -> usize {
        (self.val_fraction * train_size as f64).round() as usize
    }

    pub fn unlabeled_count(&self) -> usize {
        (self.ratio * self.labeled_count as f64).round() as usize
    }

    pub fn validate(&self, train_size: usize) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        if !(self.ratio.is_finite() && self.ratio > 0.0) {
            return Err(Error::Config(format!("ratio must be positive, got {}", self.ratio)));
        }
        if self.labeled_count == 0 {
            return Err(Error::Config("labeled_count must be at least 1".into()));
        }
        let val = self.validation_count(train_size);
        let need = self.labeled_count + self.unlabeled_count();
        if val == 0 || need > train_size - val.min(train_size) {
            return Err(Error::Config(format!(
                "cannot draw {} labeled + {} unlabeled + {val} validation images from {train_size}",
                self.labeled_count,
                self.unlabeled_count()
            )));
        }
        Ok(())
    }
}

/// Images with labels, in split order.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    indices: Vec<usize>,
    labels: Vec<u8>,
    pixels: Vec<u8>,
}

/// Images whose labels were dropped when the split was made.
#[derive(Clone, Debug)]
pub struct UnlabeledSet {
    indices: Vec<usize>,
    pixels: Vec<u8>,
}

impl LabeledSet {
    fn gather(raw: &RawDataset, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * IMAGE_BYTES);
        for &i in indices {
            pixels.extend_from_slice(raw.image(i));
        }
        Self {
            indices: indices.to_vec(),
            labels: indices.iter().map(|&i| raw.labels[i]).collect(),
            pixels,
        }
    }

    /// The whole of `raw`, in record order.
    pub fn from_raw(raw: &RawDataset) -> Self {
        Self {
            indices: (0..raw.len()).collect(),
            labels: raw.labels.clone(),
            pixels: raw.pixels.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Positions in the source dataset.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    /// A new set holding the first `n` items.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            indices: self.indices[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            pixels: self.pixels[..n * IMAGE_BYTES].to_vec(),
        }
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

impl UnlabeledSet {
    fn gather(raw: &RawDataset, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * IMAGE_BYTES);
        for &i in indices {
            pixels.extend_from_slice(raw.image(i));
        }
        Self {
            indices: indices.to_vec(),
            pixels,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub config: SplitConfig,
    pub train_size: usize,
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledSet,
    pub validation: LabeledSet,
    pub test: Option<LabeledSet>,
}

impl DatasetSplit {
    pub fn with_test(mut self, test: &RawDataset) -> Self {
        self.test = Some(LabeledSet::from_raw(test));
        self
    }
}

/// Seeded shuffle of the training records; validation is drawn first, then
/// the labeled set, then the unlabeled set from what remains.
pub fn make_splits(raw: &RawDataset, config: &SplitConfig) -> Result<DatasetSplit> {
    config.validate(raw.len())?;
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let v = config.validation_count(raw.len());
    let l = v + config.labeled_count;
    let u = l + config.unlabeled_count();
    Ok(DatasetSplit {
        config: *config,
        train_size: raw.len(),
        validation: LabeledSet::gather(raw, &order[..v]),
        labeled: LabeledSet::gather(raw, &order[v..l]),
        unlabeled: UnlabeledSet::gather(raw, &order[l..u]),
        test: None,
    })
}

/// One step of the schedule: positions into the labeled and unlabeled sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairedBatch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Per-epoch schedule pairing every labeled sample with one unlabeled sample.
/// The unlabeled pool is re-shuffled and cycled when smaller than the labeled
/// set and a fresh random subset is used when larger.
#[derive(Clone, Debug)]
pub struct PairedIterator {
    labeled: usize,
    unlabeled: usize,
    batch_size: usize,
    seed: u64,
}

pub fn paired_iterator(split: &DatasetSplit, batch_size: usize, seed: u64, needs_unlabeled: bool) -> Result<PairedIterator> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if split.labeled.is_empty() {
        return Err(Error::Input("labeled set is empty".into()));
    }
    if needs_unlabeled && split.unlabeled.is_empty() {
        return Err(Error::Config(
            "unlabeled set is empty but the pseudo-label or Grad-CAM weight is positive".into(),
        ));
    }
    Ok(PairedIterator {
        labeled: split.labeled.len(),
        unlabeled: split.unlabeled.len(),
        batch_size,
        seed,
    })
}

impl PairedIterator {
    pub fn batches_per_epoch(&self) -> usize {
        self.labeled.div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = PairedBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut labeled: Vec<usize> = (0..self.labeled).collect();
        labeled.shuffle(&mut rng);
        let mut unlabeled = Vec::with_capacity(self.labeled);
        if self.unlabeled > 0 {
            while unlabeled.len() < self.labeled {
                let mut pass: Vec<usize> = (0..self.unlabeled).collect();
                pass.shuffle(&mut rng);
                unlabeled.extend(pass);
            }
            unlabeled.truncate(self.labeled);
        }
        let b = self.batch_size;
        (0..self.batches_per_epoch()).map(move |k| {
            let hi = ((k + 1) * b).min(labeled.len());
            PairedBatch {
                labeled: labeled[k * b..hi].to_vec(),
                unlabeled: if unlabeled.is_empty() {
                    Vec::new()
                } else {
                    unlabeled[k * b..hi].to_vec()
                },
            }
        })
    }
}

/// Plain-text record of a split: the config and every index list.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitManifest {
    pub config: SplitConfig,
    pub train_size: usize,
    pub validation: Vec<usize>,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub labeled_histogram: [usize; NUM_CLASSES],
}

const MANIFEST_HEADER: &str = "# camcon split manifest v1";

impl SplitManifest {
    pub fn from_split(split: &DatasetSplit) -> Self {
        Self {
            config: split.config,
            train_size: split.train_size,
            validation: split.validation.indices.clone(),
            labeled: split.labeled.indices.clone(),
            unlabeled: split.unlabeled.indices.clone(),
            labeled_histogram: split.labeled.class_histogram(),
        }
    }

    pub fn render(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        writeln!(s, "{MANIFEST_HEADER}").unwrap();
        writeln!(s, "seed: {}", self.config.seed).unwrap();
        writeln!(s, "config: {}", serde_json::to_string(&self.config).unwrap()).unwrap();
        writeln!(s, "train_size: {}", self.train_size).unwrap();
        writeln!(s, "labeled_histogram: {}", list(&self.labeled_histogram)).unwrap();
        writeln!(s, "validation: {}", list(&self.validation)).unwrap();
        writeln!(s, "labeled: {}", list(&self.labeled)).unwrap();
        writeln!(s, "unlabeled: {}", list(&self.unlabeled)).unwrap();
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Input("not a split manifest".into()));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| Error::Input(format!("manifest ends before {key}")))?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(':'))
                .map(|r| r.trim().to_string())
                .ok_or_else(|| Error::Input(format!("expected manifest field {key}, found {line:?}")))
        };
        let list = |s: String| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Input(format!("bad index {t:?} in manifest"))))
                .collect()
        };
        let _seed = field("seed")?;
        let config: SplitConfig =
            serde_json::from_str(&field("config")?).map_err(|e| Error::Input(format!("manifest config: {e}")))?;
        let train_size = field("train_size")?
            .parse()
            .map_err(|_| Error::Input("bad train_size in manifest".into()))?;
        let hist = list(field("labeled_histogram")?)?;
        let labeled_histogram = hist
            .try_into()
            .map_err(|_| Error::Input("labeled_histogram must have one count per class".into()))?;
        Ok(Self {
            config,
            train_size,
            validation: list(field("validation")?)?,
            labeled: list(field("labeled")?)?,
            unlabeled: list(field("unlabeled")?)?,
            labeled_histogram,
        })
    }
}
