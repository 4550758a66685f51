//! Adaptive-threshold pseudo-labeling of target rows.
//!
//! The threshold starts at chance level (`1 / n_classes`) and tracks an
//! exponential moving average of the mean top-class confidence on each target
//! mini-batch. Confidences are plain numbers here, so nothing upstream of the
//! threshold receives gradient.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub tau: f64,
    pub lambda: f64,
    pub t: u64,
    pub n_classes: usize,
}

impl ThresholdState {
    pub fn new(n_classes: usize, lambda: f64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::InvalidConfig("pseudo-labeling needs at least two classes".into()));
        }
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::InvalidConfig(format!("EMA momentum must lie in (0, 1), got {lambda}")));
        }
        Ok(Self { tau: 1.0 / n_classes as f64, lambda, t: 0, n_classes })
    }
}

/// Mean over rows of the largest entry.
pub fn mean_max_confidence(probs: &Array2<f64>) -> Option<f64> {
    if probs.nrows() == 0 {
        return None;
    }
    let s: f64 = probs.rows().into_iter().map(|r| r.fold(f64::NEG_INFINITY, |a, &b| a.max(b))).sum();
    Some(s / probs.nrows() as f64)
}

/// One EMA step. An empty batch leaves the state untouched.
pub fn update_threshold(state: &ThresholdState, target_probs: &Array2<f64>) -> ThresholdState {
    let Some(conf) = mean_max_confidence(target_probs) else {
        return *state;
    };
    ThresholdState {
        tau: state.lambda * state.tau + (1.0 - state.lambda) * conf,
        t: state.t + 1,
        ..*state
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeledSet {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
}

impl PseudoLabeledSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Keeps rows whose top probability is at least `tau`, labelled by argmax
/// (ties resolve to the lowest class index), in input order.
pub fn select_pseudo(target_probs: &Array2<f64>, tau: f64) -> PseudoLabeledSet {
    let mut out = PseudoLabeledSet::default();
    for (i, row) in target_probs.rows().into_iter().enumerate() {
        let (mut best, mut conf) = (0usize, f64::NEG_INFINITY);
        for (k, &p) in row.iter().enumerate() {
            if p > conf {
                best = k;
                conf = p;
            }
        }
        if conf >= tau {
            out.indices.push(i);
            out.labels.push(best);
            out.confidences.push(conf);
        }
    }
    out
}
