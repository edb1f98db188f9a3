//! Naive reference implementations shared by the oracle tests and the
//! acceptance target. Written as plain loops over nested vectors, independent
//! of the library's flattened layouts.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitprune_core::lcis::FeatureBatch;
use splitprune_core::nn::Layer;
use splitprune_core::Tensor;

/// One random scoring problem: `maps[b][i]` is sample b's channel-i map.
pub struct NaiveBatch {
    pub maps: Vec<Vec<Vec<f64>>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl NaiveBatch {
    pub fn random(
        rng: &mut ChaCha8Rng,
        channels: usize,
        classes: usize,
        h: usize,
        w: usize,
    ) -> Self {
        let b = rng.random_range(1..=8);
        let labels = (0..b).map(|_| rng.random_range(0..classes)).collect();
        // Non-negative like post-ReLU activations, with some exact zeros.
        let maps = (0..b)
            .map(|_| {
                (0..channels)
                    .map(|_| {
                        (0..h * w)
                            .map(|_| {
                                if rng.random_bool(0.2) {
                                    0.0
                                } else {
                                    rng.random_range(0.0f32..2.0) as f64
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        NaiveBatch {
            maps,
            labels,
            classes,
        }
    }

    pub fn to_feature_batch(&self, h: usize, w: usize, iteration: usize) -> FeatureBatch {
        let b = self.maps.len();
        let n = self.maps[0].len();
        let data: Vec<f32> = self
            .maps
            .iter()
            .flatten()
            .flatten()
            .map(|&v| v as f32)
            .collect();
        let t = Tensor::new(vec![b, n, h, w], data).unwrap();
        FeatureBatch::new(t, self.labels.clone(), self.classes, iteration).unwrap()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for e in 0..a.len() {
        s += a[e] * b[e];
    }
    s
}

fn normalize(raw: &[f64]) -> Vec<f64> {
    let mut sum = 0.0;
    for v in raw {
        sum += v;
    }
    if sum > 1e-12 {
        raw.iter().map(|v| v / sum).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    }
}

/// `(intra, inter, instantaneous)` by direct loops.
pub fn naive_instantaneous(batch: &NaiveBatch) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let channels = batch.maps[0].len();
    let hw = batch.maps[0][0].len();
    let present: Vec<usize> = (0..batch.classes)
        .filter(|l| batch.labels.contains(l))
        .collect();
    let mut intra = vec![0.0; channels];
    let mut inter = vec![0.0; channels];
    for i in 0..channels {
        let mut means = Vec::new();
        for &n in &present {
            let members: Vec<usize> = (0..batch.labels.len())
                .filter(|&b| batch.labels[b] == n)
                .collect();
            let mut mean = vec![0.0; hw];
            for &b in &members {
                for e in 0..hw {
                    mean[e] += batch.maps[b][i][e];
                }
            }
            for v in mean.iter_mut() {
                *v /= members.len() as f64;
            }
            let mut s = 0.0;
            for &b in &members {
                s += dot(&batch.maps[b][i], &mean);
            }
            intra[i] += s / members.len() as f64;
            means.push(mean);
        }
        intra[i] /= present.len() as f64;
        if present.len() >= 2 {
            let mut s = 0.0;
            let mut pairs = 0;
            for n in 0..means.len() {
                for m in 0..means.len() {
                    if n < m {
                        s += dot(&means[n], &means[m]);
                        pairs += 1;
                    }
                }
            }
            inter[i] = s / pairs as f64;
        }
    }
    let a = normalize(&intra);
    let b = normalize(&inter);
    let inst = (0..channels).map(|i| a[i] - b[i]).collect();
    (intra, inter, inst)
}

/// Combined scores after each step of a sequence, recomputing the historical
/// mean from scratch every time.
pub fn naive_combined(history: &[Vec<f64>], total: usize) -> Vec<f64> {
    let t = history.len();
    let n = history[0].len();
    let alpha = 1.0 - t as f64 / total as f64;
    (0..n)
        .map(|i| {
            let mut s = 0.0;
            for h in history {
                s += h[i];
            }
            let hist = s / t as f64;
            alpha * history[t - 1][i] + (1.0 - alpha) * hist
        })
        .collect()
}

/// Kept set by fully sorting (score desc, index asc) and taking the first k.
pub fn full_sort_select(scores: &[f64], ratio: f64) -> Vec<usize> {
    let n = scores.len();
    let k = (((1.0 - ratio) * n as f64).round() as usize).max(1).min(n);
    let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(0..n).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
    kept.sort();
    kept
}

/// Score vector with deliberate ties.
pub fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if rng.random_bool(0.2) {
                (rng.random_range(0..4) as f64) * 0.25
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-3;

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values at least 0.02 away from zero and pairwise distinct by 0.01, so no
/// finite-difference probe crosses a ReLU kink or a max-pool tie.
pub fn kink_free(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| {
            let mag = 0.02 + 0.01 * i as f64;
            if i % 2 == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom < 1e-10 {
        0.0
    } else {
        (a - n).abs() / denom
    }
}

/// `L = sum(r * layer(x))`; checks dL/dx and every parameter gradient.
pub fn check_layer(mut layer: Layer<f64>, x: Tensor<f64>, rng: &mut ChaCha8Rng) -> f64 {
    let y = layer.forward(&x, true).unwrap();
    let r = rand_tensor(y.shape(), rng);
    let dx = layer.backward(&r).unwrap();
    let loss = |l: &mut Layer<f64>, x: &Tensor<f64>| -> f64 {
        let y = l.forward(x, false).unwrap();
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += EPS;
        let mut xm = x.clone();
        xm.data_mut()[i] -= EPS;
        let num = (loss(&mut layer, &xp) - loss(&mut layer, &xm)) / (2.0 * EPS);
        worst = worst.max(rel_err(dx.data()[i], num));
    }
    let analytic: Vec<Vec<f64>> = layer
        .params()
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &g) in grads.iter().enumerate() {
            let orig = layer.params()[pi].value.data()[j];
            layer.params_mut()[pi].value.data_mut()[j] = orig + EPS;
            let lp = loss(&mut layer, &x);
            layer.params_mut()[pi].value.data_mut()[j] = orig - EPS;
            let lm = loss(&mut layer, &x);
            layer.params_mut()[pi].value.data_mut()[j] = orig;
            worst = worst.max(rel_err(g, (lp - lm) / (2.0 * EPS)));
        }
    }
    worst
}
