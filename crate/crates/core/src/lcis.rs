//! Label-aware channel importance scoring.
//!
//! A channel is important when samples sharing a label produce similar feature
//! maps on it (high intra-label similarity) while different labels produce
//! dissimilar ones (low inter-label similarity). Each iteration yields an
//! instantaneous score per channel; a per-client [`ScoreState`] keeps the
//! running mean of those scores and blends the two with a linearly decaying
//! weight.
//!
//! All score arithmetic is done in `f64`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominators at or below this fall back to a uniform distribution.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Cut-layer activations for one mini-batch with their labels.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    activations: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    iteration: usize,
}

impl FeatureBatch {
    pub fn new(
        activations: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        iteration: usize,
    ) -> Result<Self> {
        let shape = activations.shape();
        if shape.len() != 4 {
            return Err(Error::shape(
                "feature batch",
                &[labels.len(), 0, 0, 0],
                shape,
            ));
        }
        if shape[0] == 0 || labels.is_empty() {
            return Err(Error::Data("feature batch is empty".into()));
        }
        if shape[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} activation samples but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        activations.ensure_finite("feature batch")?;
        Ok(FeatureBatch {
            activations,
            labels,
            num_classes,
            iteration,
        })
    }

    pub fn activations(&self) -> &Tensor<f32> {
        &self.activations
    }

    /// Returns the activations and labels.
    pub fn into_parts(self) -> (Tensor<f32>, Vec<usize>) {
        (self.activations, self.labels)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn batch_size(&self) -> usize {
        self.activations.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.activations.dim(1)
    }

    pub fn map_len(&self) -> usize {
        self.activations.dim(2) * self.activations.dim(3)
    }

    /// Feature map of `sample` on `channel`, flattened.
    pub fn map(&self, sample: usize, channel: usize) -> &[f32] {
        let hw = self.map_len();
        let start = (sample * self.channels() + channel) * hw;
        &self.activations.data()[start..start + hw]
    }
}

/// Label-wise mean feature maps for the labels present in a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanMaps {
    /// Present labels in ascending order.
    pub labels: Vec<usize>,
    /// Sample count per present label.
    pub counts: Vec<usize>,
    pub channels: usize,
    pub map_len: usize,
    /// `[label_slot][channel][element]`, flattened.
    data: Vec<f64>,
}

impl MeanMaps {
    pub fn present_labels(&self) -> usize {
        self.labels.len()
    }

    /// Mean map of channel `channel` for the `slot`-th present label.
    pub fn map(&self, slot: usize, channel: usize) -> &[f64] {
        let start = (slot * self.channels + channel) * self.map_len;
        &self.data[start..start + self.map_len]
    }

    pub fn slot_of(&self, label: usize) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }
}

/// Averages each channel's maps over the samples of each label. Labels that
/// do not occur in the batch are omitted.
pub fn label_mean_maps(batch: &FeatureBatch) -> Result<MeanMaps> {
    let mut counts = vec![0usize; batch.num_classes()];
    for &l in batch.labels() {
        counts[l] += 1;
    }
    let labels: Vec<usize> = (0..batch.num_classes())
        .filter(|&l| counts[l] > 0)
        .collect();
    if labels.is_empty() {
        return Err(Error::Data("no labels present in batch".into()));
    }
    let (channels, hw) = (batch.channels(), batch.map_len());
    let mut slot_of = vec![usize::MAX; batch.num_classes()];
    for (slot, &l) in labels.iter().enumerate() {
        slot_of[l] = slot;
    }
    let mut data = vec![0.0f64; labels.len() * channels * hw];
    for (b, &l) in batch.labels().iter().enumerate() {
        let slot = slot_of[l];
        for i in 0..channels {
            let dst = &mut data[(slot * channels + i) * hw..][..hw];
            for (d, &v) in dst.iter_mut().zip(batch.map(b, i)) {
                *d += v as f64;
            }
        }
    }
    for (slot, &l) in labels.iter().enumerate() {
        let inv = 1.0 / counts[l] as f64;
        data[slot * channels * hw..(slot + 1) * channels * hw]
            .iter_mut()
            .for_each(|v| *v *= inv);
    }
    Ok(MeanMaps {
        counts: labels.iter().map(|&l| counts[l]).collect(),
        labels,
        channels,
        map_len: hw,
        data,
    })
}

fn frobenius_f32_f64(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y).sum()
}

fn frobenius(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Raw intra-label similarity per channel: for every present label, the mean
/// Frobenius inner product of each sample's map with its label's mean map,
/// averaged over the present labels.
pub fn intra_similarity(batch: &FeatureBatch, means: &MeanMaps) -> Vec<f64> {
    let present = means.present_labels() as f64;
    let mut per_label = vec![0.0f64; means.present_labels() * batch.channels()];
    for (b, &l) in batch.labels().iter().enumerate() {
        let slot = means.slot_of(l).expect("means computed from this batch");
        for i in 0..batch.channels() {
            per_label[slot * batch.channels() + i] +=
                frobenius_f32_f64(batch.map(b, i), means.map(slot, i));
        }
    }
    (0..batch.channels())
        .map(|i| {
            (0..means.present_labels())
                .map(|slot| per_label[slot * batch.channels() + i] / means.counts[slot] as f64)
                .sum::<f64>()
                / present
        })
        .collect()
}

/// Raw inter-label similarity per channel: mean Frobenius inner product over
/// all unordered pairs of label mean maps. All zeros when fewer than two
/// labels are present.
pub fn inter_similarity(means: &MeanMaps) -> Vec<f64> {
    let k = means.present_labels();
    if k < 2 {
        return vec![0.0; means.channels];
    }
    let pairs = (k * (k - 1) / 2) as f64;
    (0..means.channels)
        .map(|i| {
            let mut acc = 0.0;
            for n in 0..k {
                for m in n + 1..k {
                    acc += frobenius(means.map(n, i), means.map(m, i));
                }
            }
            acc / pairs
        })
        .collect()
}

/// Divides by the channel sum; uniform `1/N` when the sum is not positive.
pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    if total > NORMALIZE_EPS {
        raw.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    }
}

pub fn instantaneous_score(intra_norm: &[f64], inter_norm: &[f64]) -> Vec<f64> {
    intra_norm
        .iter()
        .zip(inter_norm)
        .map(|(a, b)| a - b)
        .collect()
}

/// Intermediate and final scores for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchScores {
    pub intra: Vec<f64>,
    pub inter: Vec<f64>,
    pub intra_norm: Vec<f64>,
    pub inter_norm: Vec<f64>,
    pub instantaneous: Vec<f64>,
}

/// Instantaneous channel scores of a batch.
pub fn score_batch(batch: &FeatureBatch) -> Result<BatchScores> {
    let means = label_mean_maps(batch)?;
    let intra = intra_similarity(batch, &means);
    let inter = inter_similarity(&means);
    let intra_norm = normalize_scores(&intra);
    let inter_norm = normalize_scores(&inter);
    let instantaneous = instantaneous_score(&intra_norm, &inter_norm);
    Ok(BatchScores {
        intra,
        inter,
        intra_norm,
        inter_norm,
        instantaneous,
    })
}

/// Weight on the instantaneous score after `t` of `total` iterations.
pub fn alpha(t: usize, total: usize) -> f64 {
    1.0 - t as f64 / total as f64
}

/// Per-client scoring state across iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreState {
    pub instantaneous: Vec<f64>,
    /// Running mean of every instantaneous vector seen so far.
    pub historical: Vec<f64>,
    pub combined: Vec<f64>,
    t: usize,
    total: usize,
}

impl ScoreState {
    pub fn new(channels: usize, total_iterations: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config(
                "score state needs at least one channel".into(),
            ));
        }
        if total_iterations == 0 {
            return Err(Error::Config(
                "total iterations T must be at least 1".into(),
            ));
        }
        Ok(ScoreState {
            instantaneous: vec![0.0; channels],
            historical: vec![0.0; channels],
            combined: vec![0.0; channels],
            t: 0,
            total: total_iterations,
        })
    }

    /// Iterations observed so far.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn alpha(&self) -> f64 {
        alpha(self.t, self.total)
    }

    /// Absorbs one instantaneous vector and recomputes the combined scores.
    pub fn update(&mut self, inst: &[f64]) -> Result<&[f64]> {
        if self.t >= self.total {
            return Err(Error::ScheduleExhausted {
                t: self.t,
                total: self.total,
            });
        }
        if inst.len() != self.historical.len() {
            return Err(Error::shape(
                "instantaneous scores",
                &[self.historical.len()],
                &[inst.len()],
            ));
        }
        self.t += 1;
        let inv_t = 1.0 / self.t as f64;
        for (h, &s) in self.historical.iter_mut().zip(inst) {
            *h += (s - *h) * inv_t;
        }
        self.instantaneous.copy_from_slice(inst);
        let a = self.alpha();
        for ((c, &s), &h) in self.combined.iter_mut().zip(inst).zip(&self.historical) {
            *c = a * s + (1.0 - a) * h;
        }
        if self.t == self.total {
            // alpha is exactly zero here; copy so the equality is bit-exact
            self.combined.copy_from_slice(&self.historical);
        }
        Ok(&self.combined)
    }
}
