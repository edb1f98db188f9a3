//! Adaptive channel pruning: combined channel scores → pruning ratio → kept channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `|d_inst|` at or below this makes the scaling factor fall back to 1.
pub const SCALING_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioBounds {
    pub p_min: f64,
    pub p_base: f64,
    pub p_max: f64,
}

impl RatioBounds {
    pub fn new(p_min: f64, p_base: f64, p_max: f64) -> Result<Self> {
        let b = RatioBounds {
            p_min,
            p_base,
            p_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.p_min
            && self.p_min <= self.p_base
            && self.p_base <= self.p_max
            && self.p_max < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "RatioBounds invariant violated: need 0 < p_min <= p_base <= p_max < 1, got \
                 p_min = {}, p_base = {}, p_max = {}",
                self.p_min, self.p_base, self.p_max
            )))
        }
    }
}

impl Default for RatioBounds {
    fn default() -> Self {
        RatioBounds {
            p_min: 0.6,
            p_base: 0.7,
            p_max: 0.8,
        }
    }
}

/// Running mean of the per-iteration group scores.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroupState {
    pub d_hist_sum: f64,
    pub count: usize,
}

impl GroupState {
    pub fn d_hist(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.d_hist_sum / self.count as f64
        }
    }
}

/// Mean of the combined channel scores.
pub fn group_instantaneous(combined: &[f64]) -> f64 {
    combined.iter().sum::<f64>() / combined.len() as f64
}

/// Absorbs `d_inst` and returns the updated historical group score.
pub fn group_historical(state: &mut GroupState, d_inst: f64) -> f64 {
    state.d_hist_sum += d_inst;
    state.count += 1;
    state.d_hist()
}

/// `d_hist / d_inst`, or 1 when `d_inst` is near zero or the ratio is not
/// positive and finite.
pub fn scaling_factor(d_hist: f64, d_inst: f64) -> f64 {
    if d_inst.abs() <= SCALING_EPS {
        return 1.0;
    }
    let w = d_hist / d_inst;
    if w > 0.0 && w.is_finite() {
        w
    } else {
        1.0
    }
}

/// `W_t * p_base` clamped to `[p_min, p_max]`.
pub fn pruning_ratio(w_t: f64, bounds: &RatioBounds) -> f64 {
    let scaled = w_t * bounds.p_base;
    if scaled.is_nan() {
        return bounds.p_base;
    }
    bounds.p_min.max(scaled.min(bounds.p_max))
}

/// Number of channels kept out of `channels` at pruning ratio `ratio`; never zero.
pub fn kept_count(channels: usize, ratio: f64) -> usize {
    (((1.0 - ratio) * channels as f64).round() as usize).clamp(1, channels.max(1))
}

/// Indices of the `kept_count` highest-scoring channels, ascending. Ties go to
/// the lower index.
pub fn select_channels(scores: &[f64], ratio: f64) -> Vec<usize> {
    let k = kept_count(scores.len(), ratio);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneDecision {
    pub ratio: f64,
    /// Strictly increasing channel indices.
    pub kept: Vec<usize>,
    pub w_t: f64,
    pub d_inst: f64,
    pub d_hist: f64,
}

impl PruneDecision {
    /// Decision that transmits every channel.
    pub fn keep_all(channels: usize) -> Self {
        PruneDecision {
            ratio: 0.0,
            kept: (0..channels).collect(),
            w_t: 1.0,
            d_inst: 0.0,
            d_hist: 0.0,
        }
    }
}

/// Per-client ACP controller.
#[derive(Clone, Debug)]
pub struct AdaptivePruner {
    bounds: RatioBounds,
    group: GroupState,
}

impl AdaptivePruner {
    pub fn new(bounds: RatioBounds) -> Result<Self> {
        bounds.validate()?;
        Ok(AdaptivePruner {
            bounds,
            group: GroupState::default(),
        })
    }

    pub fn bounds(&self) -> &RatioBounds {
        &self.bounds
    }

    pub fn group(&self) -> &GroupState {
        &self.group
    }

    /// Updates the group statistics with this iteration's combined scores and
    /// returns the adaptive ratio and kept set.
    pub fn decide(&mut self, combined: &[f64]) -> PruneDecision {
        let d_inst = group_instantaneous(combined);
        let d_hist = group_historical(&mut self.group, d_inst);
        let w_t = scaling_factor(d_hist, d_inst);
        let ratio = pruning_ratio(w_t, &self.bounds);
        PruneDecision {
            ratio,
            kept: select_channels(combined, ratio),
            w_t,
            d_inst,
            d_hist,
        }
    }

    /// Same statistics update as [`decide`](Self::decide), but the kept set is
    /// chosen at an externally supplied ratio.
    pub fn decide_with_ratio(&mut self, combined: &[f64], ratio: f64) -> PruneDecision {
        let mut d = self.decide(combined);
        d.ratio = ratio;
        d.kept = select_channels(combined, ratio);
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_means() {
        assert_eq!(group_instantaneous(&[0.25; 7]), 0.25);
        assert!((group_instantaneous(&[0.1, 0.3]) - 0.2).abs() < 1e-15);
        let mut st = GroupState::default();
        assert_eq!(group_historical(&mut st, 1.0), 1.0);
        assert_eq!(group_historical(&mut st, 3.0), 2.0);
    }

    #[test]
    fn scaling_factor_cases() {
        assert_eq!(scaling_factor(0.37, 0.37), 1.0);
        assert!((scaling_factor(0.2, 0.1) - 2.0).abs() < 1e-15);
        assert_eq!(scaling_factor(0.2, 0.0), 1.0);
        assert_eq!(scaling_factor(0.2, -0.1), 1.0);
        assert_eq!(scaling_factor(1e300, 1e-300), 1.0);
    }

    #[test]
    fn pruning_ratio_clamps() {
        let b = RatioBounds::default();
        assert!((pruning_ratio(1.0, &b) - 0.7).abs() < 1e-15);
        assert_eq!(pruning_ratio(1.5, &b), 0.8);
        assert_eq!(pruning_ratio(0.5, &b), 0.6);
        assert_eq!(pruning_ratio(f64::INFINITY, &b), 0.8);
        assert_eq!(pruning_ratio(f64::NEG_INFINITY, &b), 0.6);
    }

    #[test]
    fn bounds_validation() {
        assert!(RatioBounds::new(0.8, 0.7, 0.6).is_err());
        assert!(RatioBounds::new(0.0, 0.5, 0.6).is_err());
        assert!(RatioBounds::new(0.6, 0.7, 1.0).is_err());
        assert!(RatioBounds::new(0.6, 0.6, 0.6).is_ok());
    }

    #[test]
    fn selection_examples() {
        let scores = [0.1, 0.9, 0.3, 0.8, 0.0, 0.5, 0.2, 0.7, 0.4, 0.6];
        assert_eq!(select_channels(&scores, 0.7), vec![1, 3, 7]);
        assert_eq!(select_channels(&[0.5; 64], 0.99).len(), 1);
        assert_eq!(select_channels(&[1.0; 4], 0.5), vec![0, 1]);
    }

    #[test]
    fn decide_with_zero_sum_scores_uses_base_ratio() {
        let mut p = AdaptivePruner::new(RatioBounds::default()).unwrap();
        let d = p.decide(&[0.1, -0.05, -0.05, 0.0]);
        assert_eq!(d.w_t, 1.0);
        assert!((d.ratio - 0.7).abs() < 1e-15);
        assert_eq!(d.kept, vec![0]);
    }
}
