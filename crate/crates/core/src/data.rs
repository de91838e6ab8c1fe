//! Labelled image datasets: CIFAR-style binary batches and a seeded
//! synthetic generator.
//!
//! Dataset sources are named by a URI-like string:
//!
//! * a directory path containing `data_batch_*.bin` (train) and
//!   `test_batch.bin` (test) files with 1 label byte followed by
//!   `3 * H * W` channel-planar pixel bytes per record;
//! * `synthetic:key=value,...` for the synthetic generator, keys as in
//!   [`SyntheticSpec`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ferd_autograd::Tensor;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, FerdError, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(N, channels, H, W)` pixels in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.ndim() != 4 || images.dim(0) != labels.len() {
            return Err(FerdError::Input(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(FerdError::Input(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.select(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Consecutive index chunks of at most `size`.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |s| (s..(s + size).min(self.len())).collect())
    }

    /// The first `per_class` samples of every class, in dataset order.
    pub fn balanced_subset(&self, per_class: usize) -> Result<Dataset> {
        let mut taken = vec![0; self.num_classes];
        let mut idx = Vec::new();
        for (i, &y) in self.labels.iter().enumerate() {
            if taken[y] < per_class {
                taken[y] += 1;
                idx.push(i);
            }
        }
        let (images, labels) = self.batch(&idx);
        Dataset::new(images, labels, self.num_classes)
    }
}

/// Seeded Gaussian class prototypes rendered as images.
///
/// Each class owns a prototype `0.5 + contrast * G_c`, where `G_c` is a
/// standard normal field on a `blocks x blocks` grid per channel, upsampled
/// to `size x size`. The last class mixes its field with class 0's
/// (`overlap` is the correlation), which makes it the hardest class to
/// separate. Samples add i.i.d. pixel noise of std `noise` and are clipped
/// to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    pub blocks: usize,
    /// Training samples per class.
    pub train: usize,
    /// Test samples per class.
    pub test: usize,
    pub contrast: f64,
    pub noise: f64,
    pub overlap: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            channels: 3,
            size: 16,
            blocks: 4,
            train: 256,
            test: 128,
            contrast: 0.25,
            noise: 0.15,
            overlap: 0.6,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(FerdError::Config(format!("synthetic classes must be >= 2, got {}", self.classes)));
        }
        if self.channels == 0 || self.size == 0 || self.blocks == 0 || self.size % self.blocks != 0 {
            return Err(FerdError::Config(format!(
                "synthetic size {} must be a positive multiple of blocks {}",
                self.size, self.blocks
            )));
        }
        if self.train == 0 || self.test == 0 {
            return Err(FerdError::Config("synthetic train and test counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap) || !(self.noise >= 0.0) || !(self.contrast >= 0.0) {
            return Err(FerdError::Config("synthetic overlap must lie in [0, 1], noise and contrast >= 0".into()));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.size, self.size]
    }

    fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut r = rng::derive(self.seed, &[0x7072_6f74]);
        let cells = self.channels * self.blocks * self.blocks;
        let mut fields: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| (0..cells).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let last = self.classes - 1;
        let rho = self.overlap;
        let mixed: Vec<f64> = fields[0]
            .iter()
            .zip(&fields[last])
            .map(|(&a, &b)| rho * a + (1.0 - rho * rho).sqrt() * b)
            .collect();
        fields[last] = mixed;
        let cell = self.size / self.blocks;
        fields
            .iter()
            .map(|f| {
                let mut img = Vec::with_capacity(self.channels * self.size * self.size);
                for c in 0..self.channels {
                    for i in 0..self.size {
                        for j in 0..self.size {
                            let v = f[(c * self.blocks + i / cell) * self.blocks + j / cell];
                            img.push((0.5 + self.contrast * v).clamp(0.0, 1.0));
                        }
                    }
                }
                img
            })
            .collect()
    }

    fn render(&self, protos: &[Vec<f64>], per_class: usize, stream: u64) -> Result<Dataset> {
        let mut r = rng::derive(self.seed, &[0x7361_6d70, stream]);
        let n = per_class * self.classes;
        let pix = self.channels * self.size * self.size;
        let mut data = Vec::with_capacity(n * pix);
        let mut labels = Vec::with_capacity(n);
        // Interleave classes so any prefix is close to balanced.
        for k in 0..n {
            let y = k % self.classes;
            labels.push(y);
            for &p in &protos[y] {
                let e: f64 = r.sample(StandardNormal);
                data.push((p + self.noise * e).clamp(0.0, 1.0));
            }
        }
        let [c, h, w] = self.image_shape();
        Dataset::new(Tensor::from_vec(&[n, c, h, w], data)?, labels, self.classes)
    }

    /// `(train, test)` splits drawn from disjoint random streams.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let protos = self.prototypes();
        Ok((self.render(&protos, self.train, 0)?, self.render(&protos, self.test, 1)?))
    }
}

impl FromStr for SyntheticSpec {
    type Err = FerdError;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        for kv in s.split(',').map(str::trim).filter(|kv| !kv.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| FerdError::Config(format!("synthetic spec entry `{kv}` is not key=value")))?;
            let bad = || FerdError::Config(format!("synthetic spec key `{k}` has invalid value `{v}`"));
            match k {
                "classes" => spec.classes = v.parse().map_err(|_| bad())?,
                "channels" => spec.channels = v.parse().map_err(|_| bad())?,
                "size" => spec.size = v.parse().map_err(|_| bad())?,
                "blocks" => spec.blocks = v.parse().map_err(|_| bad())?,
                "train" => spec.train = v.parse().map_err(|_| bad())?,
                "test" => spec.test = v.parse().map_err(|_| bad())?,
                "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                "contrast" => spec.contrast = v.parse().map_err(|_| bad())?,
                "noise" => spec.noise = v.parse().map_err(|_| bad())?,
                "overlap" => spec.overlap = v.parse().map_err(|_| bad())?,
                _ => return Err(FerdError::Config(format!("unknown synthetic spec key `{k}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for SyntheticSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "synthetic:classes={},channels={},size={},blocks={},train={},test={},contrast={},noise={},overlap={},seed={}",
            self.classes, self.channels, self.size, self.blocks, self.train, self.test, self.contrast, self.noise, self.overlap, self.seed
        )
    }
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Cifar { dir: PathBuf, image_shape: [usize; 3], num_classes: usize },
}

impl DataSource {
    /// Parse `synthetic:<spec>` or a CIFAR-10 directory path.
    pub fn parse(uri: &str) -> Result<Self> {
        match uri.strip_prefix("synthetic:") {
            Some(rest) => Ok(DataSource::Synthetic(rest.parse()?)),
            None if uri == "synthetic" => Ok(DataSource::Synthetic(SyntheticSpec::default())),
            None => Ok(DataSource::Cifar { dir: PathBuf::from(uri), image_shape: [3, 32, 32], num_classes: 10 }),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DataSource::Synthetic(s) => s.classes,
            DataSource::Cifar { num_classes, .. } => *num_classes,
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        match self {
            DataSource::Synthetic(s) => s.image_shape(),
            DataSource::Cifar { image_shape, .. } => *image_shape,
        }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synthetic(s) => s.generate(),
            DataSource::Cifar { dir, image_shape, num_classes } => load_cifar_dir(dir, *image_shape, *num_classes),
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synthetic(s) => write!(f, "{s}"),
            DataSource::Cifar { dir, .. } => write!(f, "{}", dir.display()),
        }
    }
}

/// Decode CIFAR-style records: one label byte then channel-planar pixels.
pub fn read_cifar_records(bytes: &[u8], image_shape: [usize; 3], num_classes: usize, what: &str) -> Result<Dataset> {
    let pix: usize = image_shape.iter().product();
    let rec = pix + 1;
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(format_err(
            what,
            format!("length {} is not a positive multiple of the record size {rec}", bytes.len()),
        ));
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * pix);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let y = r[0] as usize;
        if y >= num_classes {
            return Err(format_err(format!("{what} record {i}"), format!("label {y} >= {num_classes}")));
        }
        labels.push(y);
        data.extend(r[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let [c, h, w] = image_shape;
    Dataset::new(Tensor::from_vec(&[n, c, h, w], data)?, labels, num_classes)
}

fn concat_datasets(parts: Vec<Dataset>, num_classes: usize) -> Result<Dataset> {
    let imgs: Vec<&Tensor> = parts.iter().map(|d| &d.images).collect();
    let images = Tensor::concat(&imgs)?;
    let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
    Dataset::new(images, labels, num_classes)
}

/// Load `data_batch_*.bin` as train and `test_batch.bin` as test.
pub fn load_cifar_dir(dir: &Path, image_shape: [usize; 3], num_classes: usize) -> Result<(Dataset, Dataset)> {
    if !dir.is_dir() {
        return Err(FerdError::MissingFile(dir.to_path_buf()));
    }
    let mut train_files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    train_files.sort();
    if train_files.is_empty() {
        return Err(FerdError::MissingFile(dir.join("data_batch_1.bin")));
    }
    let read = |p: &Path| -> Result<Dataset> {
        let bytes = std::fs::read(p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => FerdError::MissingFile(p.to_path_buf()),
            _ => FerdError::Io(e),
        })?;
        read_cifar_records(&bytes, image_shape, num_classes, &p.display().to_string())
    };
    let train = concat_datasets(train_files.iter().map(|p| read(p)).collect::<Result<_>>()?, num_classes)?;
    let test = read(&dir.join("test_batch.bin"))?;
    Ok((train, test))
}
