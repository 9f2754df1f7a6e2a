//! Running posterior means of collected states.

use crate::matrix::DenseMatrix;
use crate::oggbn::{DeepState, LayerState};

/// Elementwise running mean of factor, loading and scale matrices, plus mean
/// threshold gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMean {
    count: usize,
    mean: DeepState,
    deltas: Vec<f64>,
}

fn blend(acc: &mut [f64], x: &[f64], w: f64) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += (b - *a) * w;
    }
}

impl PosteriorMean {
    pub fn new(first: &DeepState) -> Self {
        PosteriorMean {
            count: 1,
            mean: first.clone(),
            deltas: first.thresholds.deltas().to_vec(),
        }
    }

    pub fn add(&mut self, state: &DeepState) {
        self.count += 1;
        let w = 1.0 / self.count as f64;
        for (acc, layer) in self.mean.layers.iter_mut().zip(&state.layers) {
            blend(acc.theta.as_mut_slice(), layer.theta.as_slice(), w);
            blend(acc.phi.as_mut_slice(), layer.phi.as_slice(), w);
            blend(&mut acc.scales, &layer.scales, w);
            blend(&mut acc.c_user, &layer.c_user, w);
        }
        blend(&mut self.mean.r, &state.r, w);
        blend(&mut self.deltas, state.thresholds.deltas(), w);
        self.mean.sweep = state.sweep;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean parameters packed as a state; thresholds are rebuilt from the
    /// mean gaps.
    pub fn state(&self) -> DeepState {
        let mut s = self.mean.clone();
        if let Ok(tm) = crate::ordinal::ThresholdModel::from_deltas(&self.deltas) {
            s.thresholds = tm;
        }
        s
    }

    pub fn mean_deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn layer(&self, t: usize) -> &LayerState {
        &self.mean.layers[t]
    }

    pub fn theta(&self, t: usize) -> &DenseMatrix {
        &self.mean.layers[t].theta
    }
}
