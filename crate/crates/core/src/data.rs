//! Datasets (IDX files or synthetic Gaussian blobs) and client partitioning.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_IMAGES_4D_MAGIC: u32 = 0x0000_0804;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(M, C, H, W)`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Data(format!(
                "images must be (M, C, H, W), got {:?}",
                images.shape()
            )));
        }
        if images.dim(0) != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.dim(0),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} >= class count {num_classes}"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of a single sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Images and labels for one mini-batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        Ok((
            self.images.gather_rows(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn ingestion(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| ingestion(path, "truncated header"))
}

fn read_idx(path: &Path, allowed_magic: &[u32]) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| ingestion(path, e.to_string()))?;
    let magic = read_be_u32(&bytes, 0, path)?;
    if !allowed_magic.contains(&magic) {
        return Err(ingestion(path, format!("bad magic {magic:#010x}")));
    }
    let ndim = (magic & 0xFF) as usize;
    let dims = (0..ndim)
        .map(|d| read_be_u32(&bytes, 4 + 4 * d, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let expected: usize = dims.iter().product();
    let body = &bytes[start..];
    if body.len() != expected {
        return Err(ingestion(
            path,
            format!("expected {expected} data bytes, found {}", body.len()),
        ));
    }
    Ok((dims, body.to_vec()))
}

/// Loads an IDX image/label pair. Pixels are scaled by 1/255; the class count
/// is one past the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let (dims, pixels) = read_idx(images_path, &[IDX_IMAGES_MAGIC, IDX_IMAGES_4D_MAGIC])?;
    let shape = match dims[..] {
        [m, h, w] => vec![m, 1, h, w],
        [m, c, h, w] => vec![m, c, h, w],
        _ => unreachable!("magic restricts the dimension count"),
    };
    let (label_dims, raw_labels) = read_idx(labels_path, &[IDX_LABELS_MAGIC])?;
    if label_dims[0] != shape[0] {
        return Err(ingestion(
            labels_path,
            format!("{} labels for {} images", label_dims[0], shape[0]),
        ));
    }
    let images = Tensor::new(shape, pixels.iter().map(|&p| p as f32 / 255.0).collect())?;
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(images, labels, num_classes)
}

/// Writes a dataset back to IDX. Pixels are stored as `round(255 * x)`, so a
/// dataset loaded from IDX round-trips bit-exactly.
pub fn write_idx(
    dataset: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let shape = dataset.images.shape();
    let mut img = Vec::with_capacity(20 + dataset.images.numel());
    if shape[1] == 1 {
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        for d in [shape[0], shape[2], shape[3]] {
            img.extend_from_slice(&(d as u32).to_be_bytes());
        }
    } else {
        img.extend_from_slice(&IDX_IMAGES_4D_MAGIC.to_be_bytes());
        for &d in shape {
            img.extend_from_slice(&(d as u32).to_be_bytes());
        }
    }
    for &v in dataset.images.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Data(format!(
                "pixel {v} outside [0, 1] cannot be written as IDX"
            )));
        }
        img.push((v * 255.0).round() as u8);
    }
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    for &l in &dataset.labels {
        lab.push(
            u8::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit a byte")))?,
        );
    }
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

/// Gaussian class clusters with unit variance, class means `separation` apart.
///
/// Class `k`'s mean is `separation / sqrt(2)` on one coordinate (spread evenly
/// across the flattened image) and zero elsewhere, so every pair of means is
/// exactly `separation` apart. Samples are interleaved by class.
pub fn synth_blobs_with_separation(
    num_classes: usize,
    per_class: usize,
    dims: [usize; 3],
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Config(
            "synthetic data needs at least 2 classes".into(),
        ));
    }
    let features: usize = dims.iter().product();
    if features < num_classes {
        return Err(Error::Config(format!(
            "{features} features cannot hold {num_classes} orthogonal class means"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = separation / std::f64::consts::SQRT_2;
    let total = num_classes * per_class;
    let mut data = Vec::with_capacity(total * features);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % num_classes;
        let hot = class * features / num_classes;
        for f in 0..features {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push((z + if f == hot { offset } else { 0.0 }) as f32);
        }
        labels.push(class);
    }
    let images = Tensor::new(vec![total, dims[0], dims[1], dims[2]], data)?;
    Dataset::new(images, labels, num_classes)
}

pub fn synth_blobs(
    num_classes: usize,
    per_class: usize,
    dims: [usize; 3],
    seed: u64,
) -> Result<Dataset> {
    synth_blobs_with_separation(num_classes, per_class, dims, 6.0, seed)
}

/// Per-client sample index lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    /// Checks the lists are disjoint, non-empty, and together cover `0..m`.
    pub fn validate(&self, m: usize) -> Result<()> {
        let mut seen = vec![false; m];
        let mut covered = 0;
        for (c, list) in self.assignments.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::Data(format!("client {c} received no samples")));
            }
            for &i in list {
                if i >= m || seen[i] {
                    return Err(Error::Data(format!(
                        "sample {i} duplicated or out of range"
                    )));
                }
                seen[i] = true;
                covered += 1;
            }
        }
        if covered != m {
            return Err(Error::Data(format!(
                "partition covers {covered} of {m} samples"
            )));
        }
        Ok(())
    }

    /// JSON object mapping client id to its index list.
    pub fn to_json(&self) -> String {
        let map: std::collections::BTreeMap<String, &Vec<usize>> = self
            .assignments
            .iter()
            .enumerate()
            .map(|(c, l)| (format!("{c}"), l))
            .collect();
        serde_json::to_string_pretty(&map).expect("index lists always serialize")
    }

    /// Per-client label histogram.
    pub fn label_counts(&self, dataset: &Dataset) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|list| {
                let mut counts = vec![0; dataset.num_classes];
                for &i in list {
                    counts[dataset.labels[i]] += 1;
                }
                counts
            })
            .collect()
    }
}

fn check_clients(m: usize, num_clients: usize) -> Result<()> {
    if num_clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if num_clients > m {
        return Err(Error::Config(format!(
            "{num_clients} clients cannot each get a sample from {m}"
        )));
    }
    Ok(())
}

/// Shuffles all indices and deals them out in contiguous chunks whose sizes
/// differ by at most one (earlier clients get the remainder).
pub fn partition_iid(dataset: &Dataset, num_clients: usize, seed: u64) -> Result<Partition> {
    let m = dataset.len();
    check_clients(m, num_clients)?;
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (m / num_clients, m % num_clients);
    let mut assignments = Vec::with_capacity(num_clients);
    let mut start = 0;
    for c in 0..num_clients {
        let len = base + usize::from(c < extra);
        assignments.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(Partition { assignments })
}

/// Splits `total` items by `weights` using largest-remainder rounding; ties in
/// the remainder go to the lower index.
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().take(total.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    counts
}

/// Label-wise Dirichlet(β) allocation over clients. Each label's shuffled
/// samples are dealt out in proportion to a fresh Dirichlet draw; any client
/// left empty takes one sample from the currently largest client.
pub fn partition_dirichlet(
    dataset: &Dataset,
    num_clients: usize,
    beta: f64,
    seed: u64,
) -> Result<Partition> {
    let m = dataset.len();
    check_clients(m, num_clients)?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!(
            "Dirichlet beta must be positive, got {beta}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::Config(format!("Dirichlet beta: {e}")))?;
    let mut assignments = vec![Vec::new(); num_clients];
    for label in 0..dataset.num_classes {
        let mut idx: Vec<usize> = (0..m).filter(|&i| dataset.labels[i] == label).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let mut weights: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        if weights.iter().sum::<f64>() <= 0.0 {
            // every gamma draw underflowed; treat as uniform
            weights.fill(1.0);
        }
        let counts = largest_remainder(idx.len(), &weights);
        let mut start = 0;
        for (c, n) in counts.into_iter().enumerate() {
            assignments[c].extend_from_slice(&idx[start..start + n]);
            start += n;
        }
    }
    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let largest = (0..num_clients)
            .max_by(|&a, &b| {
                assignments[a]
                    .len()
                    .cmp(&assignments[b].len())
                    .then(b.cmp(&a))
            })
            .expect("at least one client");
        let moved = assignments[largest]
            .pop()
            .expect("largest client is non-empty");
        assignments[empty].push(moved);
    }
    Ok(Partition { assignments })
}
