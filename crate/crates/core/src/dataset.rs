//! CIFAKE-style folder ingestion, seeded stratified splits and mini-batching.
//!
//! Two layouts are recognised under a dataset root:
//!
//! * `<root>/{train,test}/{FAKE,REAL}/*` - the shipped test folders are kept
//!   as the test split and validation is carved out of `train/` by seed.
//! * `<root>/{FAKE,REAL}/*` - each class is shuffled and prefix-sliced into
//!   train/val/test by the configured ratios.
//!
//! Labels are fixed project-wide: `Fake = 0`, `Real = 1`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorframe::{read_cache, Preprocessor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Fake = 0,
    Real = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Fake, Label::Real];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Fake),
            1 => Some(Label::Real),
            _ => None,
        }
    }

    fn dir_name(self) -> &'static str {
        match self {
            Label::Fake => "FAKE",
            Label::Real => "REAL",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Fake => "fake",
            Label::Real => "real",
        })
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fake" => Ok(Label::Fake),
            "real" => Ok(Label::Real),
            other => Err(Error::Format(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

/// One image with its label and split. `path` is relative to the manifest
/// root.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub label: Label,
    pub split: Split,
}

/// Train/val/test fractions per class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let all = [train, val, test];
        if all.iter().any(|r| !r.is_finite() || *r < 0.0) || train <= 0.0 {
            return Err(Error::Config(format!("invalid split ratios {all:?}")));
        }
        let total = train + val + test;
        Ok(Self { train: train / total, val: val / total, test: test / total })
    }
}

impl Default for SplitRatios {
    /// 45,000 : 5,000 : 10,000 per class, i.e. 9 : 1 : 2.
    fn default() -> Self {
        Self { train: 0.75, val: 1.0 / 12.0, test: 1.0 / 6.0 }
    }
}

/// Seeded, reproducible record of samples and their split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    root: PathBuf,
    seed: u64,
    records: Vec<SampleRecord>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Sorted image paths (relative to `root`) directly inside `root/rel`.
fn list_images(root: &Path, rel: &Path) -> Result<Vec<PathBuf>> {
    let dir = root.join(rel);
    if !dir.is_dir() {
        return Err(Error::data(&dir, "missing class directory"));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(&dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let p = dir.join(&name);
        if p.is_file() && is_image(&p) {
            if name.to_string_lossy().contains(['\t', '\n']) {
                return Err(Error::data(&p, "file names may not contain tabs or newlines"));
            }
            out.push(rel.join(name));
        }
    }
    if out.is_empty() {
        return Err(Error::data(&dir, "no images found"));
    }
    out.sort();
    Ok(out)
}

/// Counter-based 64-bit mixer used to derive independent seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn shuffled(mut items: Vec<PathBuf>, seed: u64, salt: u64) -> Vec<PathBuf> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, salt));
    items.shuffle(&mut rng);
    items
}

impl DatasetManifest {
    /// Scans `root` and assigns every (class-balanced) image to a split.
    pub fn build(root: &Path, ratios: SplitRatios, seed: u64) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::data(root, "dataset root is not a directory"));
        }
        let predefined = root.join("train").is_dir() && root.join("test").is_dir();
        let mut records = Vec::new();
        if predefined {
            let val_share = ratios.val / (ratios.train + ratios.val);
            let train = Self::balanced(root, Path::new("train"), seed, 1)?;
            let test = Self::balanced(root, Path::new("test"), seed, 2)?;
            for (label, files) in train {
                let n_val = (files.len() as f64 * val_share).round() as usize;
                for (i, path) in files.into_iter().enumerate() {
                    let split = if i < n_val { Split::Val } else { Split::Train };
                    records.push(SampleRecord { path, label, split });
                }
            }
            for (label, files) in test {
                records.extend(files.into_iter().map(|path| SampleRecord { path, label, split: Split::Test }));
            }
        } else {
            for (label, files) in Self::balanced(root, Path::new(""), seed, 0)? {
                let n = files.len() as f64;
                let n_test = (n * ratios.test).round() as usize;
                let n_val = (n * ratios.val).round() as usize;
                for (i, path) in files.into_iter().enumerate() {
                    let split = if i < n_test {
                        Split::Test
                    } else if i < n_test + n_val {
                        Split::Val
                    } else {
                        Split::Train
                    };
                    records.push(SampleRecord { path, label, split });
                }
            }
        }
        records.sort_by_key(|r| (r.split, r.label));
        let manifest = Self { root: root.to_path_buf(), seed, records };
        for split in Split::ALL {
            if manifest.count(split, Label::Fake) + manifest.count(split, Label::Real) == 0
                && split != Split::Val
            {
                return Err(Error::data(root, format!("{split} split is empty")));
            }
        }
        Ok(manifest)
    }

    /// Shuffled per-class file lists under `root/sub`, truncated to the
    /// smaller class so that the classes stay balanced.
    fn balanced(root: &Path, sub: &Path, seed: u64, salt: u64) -> Result<Vec<(Label, Vec<PathBuf>)>> {
        let mut per_class = Vec::new();
        for label in Label::ALL {
            let files = list_images(root, &sub.join(label.dir_name()))?;
            per_class.push((label, shuffled(files, seed, salt * 16 + label.index() as u64)));
        }
        let min = per_class.iter().map(|(_, f)| f.len()).min().unwrap_or(0);
        for (label, files) in per_class.iter_mut() {
            if files.len() > min {
                log::warn!("dropping {} {label} images to balance classes", files.len() - min);
                files.truncate(min);
            }
        }
        Ok(per_class)
    }

    pub fn from_records(root: impl Into<PathBuf>, seed: u64, records: Vec<SampleRecord>) -> Self {
        Self { root: root.into(), seed, records }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn count(&self, split: Split, label: Label) -> usize {
        self.records.iter().filter(|r| r.split == split && r.label == label).count()
    }

    pub fn abs_path(&self, record: &SampleRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Seeded class-balanced subset: up to `per_class` records of each label
    /// from `split`, in manifest order.
    pub fn sample_balanced(&self, split: Split, per_class: usize, seed: u64) -> Vec<SampleRecord> {
        let mut out = Vec::new();
        for label in Label::ALL {
            let mut idx: Vec<usize> = (0..self.records.len())
                .filter(|&i| self.records[i].split == split && self.records[i].label == label)
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 100 + label.index() as u64));
            idx.shuffle(&mut rng);
            idx.truncate(per_class);
            idx.sort_unstable();
            out.extend(idx.into_iter().map(|i| self.records[i].clone()));
        }
        out
    }

    /// Text serialization: one header line followed by tab-separated
    /// `path<TAB>label<TAB>split` records.
    pub fn to_text(&self) -> String {
        let mut counts = Vec::new();
        for label in Label::ALL {
            for split in Split::ALL {
                counts.push(format!("{label}.{split}={}", self.count(split, label)));
            }
        }
        let mut out = format!(
            "#swinforge-manifest\tv1\tseed={}\t{}\troot={}\n",
            self.seed,
            counts.join("\t"),
            self.root.display()
        );
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\n", r.path.display(), r.label, r.split));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty manifest".into()))?;
        let fields: Vec<&str> = header.split('\t').collect();
        if fields.len() < 3 || fields[0] != "#swinforge-manifest" || fields[1] != "v1" {
            return Err(Error::Format("missing manifest header".into()));
        }
        let mut seed = None;
        let mut root = None;
        let mut declared = Vec::new();
        for f in &fields[2..] {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field `{f}`")))?;
            match k {
                "seed" => seed = Some(v.parse::<u64>().map_err(|e| Error::Format(e.to_string()))?),
                "root" => root = Some(PathBuf::from(v)),
                _ => {
                    let n = v.parse::<usize>().map_err(|e| Error::Format(e.to_string()))?;
                    declared.push((k.to_string(), n));
                }
            }
        }
        let seed = seed.ok_or_else(|| Error::Format("header lacks seed".into()))?;
        let root = root.ok_or_else(|| Error::Format("header lacks root".into()))?;
        let mut records = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::Format(format!("record line {} has {} fields", lineno + 2, parts.len())));
            }
            records.push(SampleRecord {
                path: PathBuf::from(parts[0]),
                label: parts[1].parse()?,
                split: parts[2].parse()?,
            });
        }
        let manifest = Self { root, seed, records };
        for (key, n) in declared {
            let actual = key
                .split_once('.')
                .and_then(|(l, s)| Some((l.parse::<Label>().ok()?, s.parse::<Split>().ok()?)))
                .map(|(l, s)| manifest.count(s, l))
                .ok_or_else(|| Error::Format(format!("bad count key `{key}`")))?;
            if actual != n {
                return Err(Error::Format(format!("header declares {key}={n} but records give {actual}")));
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// What to do with an image that fails to decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorruptPolicy {
    #[default]
    Abort,
    SkipWithWarning,
}

/// Turns records into preprocessed tensors.
#[derive(Debug, Clone)]
pub struct SampleLoader {
    pub preprocessor: Preprocessor,
    /// When set, `<cache_dir>/<record path>.sfc` is read instead of decoding.
    pub cache_dir: Option<PathBuf>,
    pub on_corrupt: CorruptPolicy,
}

impl SampleLoader {
    pub fn new(preprocessor: Preprocessor) -> Self {
        Self { preprocessor, cache_dir: None, on_corrupt: CorruptPolicy::Abort }
    }

    pub fn cache_path(cache_dir: &Path, record: &SampleRecord) -> PathBuf {
        let mut p = cache_dir.join(&record.path).into_os_string();
        p.push(".sfc");
        PathBuf::from(p)
    }

    pub fn load(&self, manifest: &DatasetManifest, record: &SampleRecord) -> Result<Tensor<f32>> {
        if let Some(dir) = &self.cache_dir {
            let cached = Self::cache_path(dir, record);
            if cached.is_file() {
                let (planes, h, w) = read_cache(&cached)?;
                return self.preprocessor.finish(planes, h, w);
            }
        }
        self.preprocessor.load(&manifest.abs_path(record))
    }
}

/// A mini-batch of `[B, 3, H, W]` inputs and labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Visiting order of `n` items for one epoch; `None` keeps manifest order.
pub fn epoch_order(n: usize, epoch_seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = epoch_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// Iterator over the batches of one split for one epoch.
pub struct BatchIter<'a> {
    manifest: &'a DatasetManifest,
    records: Vec<&'a SampleRecord>,
    batch_size: usize,
    cursor: usize,
    loader: &'a SampleLoader,
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        while self.cursor < self.records.len() {
            let end = (self.cursor + self.batch_size).min(self.records.len());
            let chunk = &self.records[self.cursor..end];
            self.cursor = end;
            // Decoding runs in parallel; `collect` keeps record order.
            let loaded: Vec<Result<Tensor<f32>>> =
                chunk.par_iter().map(|r| self.loader.load(self.manifest, r)).collect();
            let mut data = Vec::new();
            let mut labels = Vec::new();
            let mut dims = None;
            for (record, item) in chunk.iter().zip(loaded) {
                match item {
                    Ok(t) => {
                        dims.get_or_insert_with(|| t.shape().to_vec());
                        labels.push(record.label.index());
                        data.extend_from_slice(t.data());
                    }
                    Err(e) if self.loader.on_corrupt == CorruptPolicy::SkipWithWarning => {
                        log::warn!("skipping {}: {e}", record.path.display());
                    }
                    Err(e) => return Some(Err(e)),
                }
            }
            if let Some(d) = dims {
                let mut shape = vec![labels.len()];
                shape.extend(d);
                return Some(Tensor::new(shape, data).map(|inputs| Batch { inputs, labels }));
            }
        }
        None
    }
}

/// Batches of `split`. With `epoch_seed = Some(s)` the order is a seeded
/// shuffle; every record is visited exactly once and the last batch may be
/// short.
pub fn iterate_batches<'a>(
    manifest: &'a DatasetManifest,
    split: Split,
    batch_size: usize,
    epoch_seed: Option<u64>,
    loader: &'a SampleLoader,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let pool = manifest.split(split);
    if pool.is_empty() {
        return Err(Error::Contract(format!("{split} split is empty")));
    }
    let records = epoch_order(pool.len(), epoch_seed).into_iter().map(|i| pool[i]).collect();
    Ok(BatchIter { manifest, records, batch_size, cursor: 0, loader })
}

/// Seed of epoch `epoch` for a run seeded with `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    mix_seed(seed, 0xE90C_0000 + epoch as u64)
}
