//! In-memory labelled image sets: a seeded synthetic generator and a
//! CIFAR-10 binary reader.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Bytes per CIFAR-10 record: one label plus a 3×32×32 channel-planar image.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    images: Tensor<T>,
    labels: Vec<usize>,
    classes: usize,
}

impl<T: Element> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().n != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.shape().n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_shape(&self) -> Shape {
        Shape {
            n: 1,
            ..self.images.shape()
        }
    }

    /// Gathers the samples at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let per = self.images.shape().sample();
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dataset(format!(
                    "index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let shape = Shape {
            n: indices.len(),
            ..self.images.shape()
        };
        Ok((Tensor::from_vec(shape, data)?, labels))
    }
}

/// `n` images of `3×res×res`: sample `i` has label `i mod classes` and pixels
/// `template[label] + noise`, both standard normal from a ChaCha8 stream.
pub fn synthetic<T: Element>(
    n: usize,
    classes: usize,
    resolution: usize,
    seed: u64,
) -> Result<Dataset<T>> {
    if n == 0 || classes == 0 || resolution == 0 {
        return Err(Error::Dataset(
            "synthetic set needs positive size, classes and resolution".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = 3 * resolution * resolution;
    let templates: Vec<f64> = (0..classes * per)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut data = Vec::with_capacity(n * per);
    for &label in &labels {
        let t = &templates[label * per..(label + 1) * per];
        data.extend(t.iter().map(|&m| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            T::of(m + noise)
        }));
    }
    Dataset::new(
        Tensor::from_vec(Shape::new(n, 3, resolution, resolution), data)?,
        labels,
        classes,
    )
}

/// Parses CIFAR-10 binary records, normalizing with the usual per-channel
/// statistics and resizing (nearest neighbour) to `resolution`.
pub fn parse_cifar10<T: Element>(
    bytes: &[u8],
    limit: Option<usize>,
    resolution: usize,
) -> Result<Dataset<T>> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Dataset(format!(
            "CIFAR-10 binary size {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    if resolution == 0 {
        return Err(Error::Dataset("resolution must be positive".into()));
    }
    let records = bytes.len() / CIFAR_RECORD;
    let n = limit.map_or(records, |l| l.min(records));
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3 * resolution * resolution);
    for rec in bytes.chunks_exact(CIFAR_RECORD).take(n) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Dataset(format!(
                "CIFAR-10 label {label} out of range"
            )));
        }
        labels.push(label);
        for c in 0..3 {
            let plane = &rec[1 + c * 1024..1 + (c + 1) * 1024];
            for y in 0..resolution {
                let sy = y * 32 / resolution;
                for x in 0..resolution {
                    let sx = x * 32 / resolution;
                    let v = plane[sy * 32 + sx] as f64 / 255.0;
                    data.push(T::of((v - CIFAR_MEAN[c]) / CIFAR_STD[c]));
                }
            }
        }
    }
    Dataset::new(
        Tensor::from_vec(Shape::new(n, 3, resolution, resolution), data)?,
        labels,
        10,
    )
}

pub fn read_cifar10<T: Element>(
    path: &Path,
    limit: Option<usize>,
    resolution: usize,
) -> Result<Dataset<T>> {
    let bytes = std::fs::read(path)?;
    parse_cifar10(&bytes, limit, resolution)
}

/// Where training images come from: `synthetic:N[:SEED]` or `cifar10:PATH[:LIMIT]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetSource {
    Synthetic { samples: usize, seed: u64 },
    Cifar10Binary { path: PathBuf, limit: Option<usize> },
}

impl DatasetSource {
    pub fn load<T: Element>(&self, classes: usize, resolution: usize) -> Result<Dataset<T>> {
        match self {
            DatasetSource::Synthetic { samples, seed } => {
                synthetic(*samples, classes, resolution, *seed)
            }
            DatasetSource::Cifar10Binary { path, limit } => {
                if classes < 10 {
                    return Err(Error::Dataset(format!(
                        "CIFAR-10 needs 10 classes, head has {classes}"
                    )));
                }
                read_cifar10(path, *limit, resolution)
            }
        }
    }
}

impl FromStr for DatasetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |what: &str| Error::Dataset(format!("invalid {what} in data source `{s}`"));
        if let Some(rest) = s.strip_prefix("synthetic:") {
            let mut parts = rest.split(':');
            let samples = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("sample count"))?;
            let seed = match parts.next() {
                Some(v) => v.parse().map_err(|_| bad("seed"))?,
                None => 0,
            };
            if parts.next().is_some() {
                return Err(bad("trailing field"));
            }
            return Ok(DatasetSource::Synthetic { samples, seed });
        }
        if let Some(rest) = s.strip_prefix("cifar10:") {
            let (path, limit) = match rest.rsplit_once(':') {
                Some((p, l)) if l.chars().all(|c| c.is_ascii_digit()) && !l.is_empty() => {
                    (p, Some(l.parse().map_err(|_| bad("limit"))?))
                }
                _ => (rest, None),
            };
            if path.is_empty() {
                return Err(bad("path"));
            }
            return Ok(DatasetSource::Cifar10Binary {
                path: PathBuf::from(path),
                limit,
            });
        }
        Err(Error::Dataset(format!(
            "unknown data source `{s}` (expected synthetic:N[:SEED] or cifar10:PATH[:LIMIT])"
        )))
    }
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSource::Synthetic { samples, seed } => write!(f, "synthetic:{samples}:{seed}"),
            DatasetSource::Cifar10Binary { path, limit: None } => {
                write!(f, "cifar10:{}", path.display())
            }
            DatasetSource::Cifar10Binary {
                path,
                limit: Some(l),
            } => write!(f, "cifar10:{}:{l}", path.display()),
        }
    }
}
