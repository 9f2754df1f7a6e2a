//! Bernoulli-Poisson augmentation of social edges and community scales.
//!
//! Each observed unordered edge carries a latent count `m_uv >= 1` split over
//! communities in proportion to `theta_uk * u_k * theta_vk`. Non-edges carry
//! zero counts, so only `|E| * K` work is done per sweep; the Poisson rate
//! penalty over all pairs is recovered in closed form by [`pair_exposure`].

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::matrix::DenseMatrix;
use crate::rng::{gamma_unchecked, thin_into, ztp_unchecked, Phase, RngStream};
use crate::sparse::AdjacencyGraph;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("observed edge ({u}, {v}) has zero rate")]
    ZeroRateEdge { u: usize, v: usize },
}

/// Latent counts for the observed edges of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeCounts {
    n_communities: usize,
    /// `(u, v)` with `u < v`, ascending.
    pub edges: Vec<(u32, u32)>,
    /// `m_uv` per edge.
    pub totals: Vec<u64>,
    /// `m_ukv`, edge-major, `edges.len() * K`.
    pub per_edge: Vec<u64>,
    /// `m_uk.` summed over neighbours, U x K row-major.
    pub user_community: Vec<u64>,
    /// `m_.k.` summed over unordered pairs.
    pub community_total: Vec<u64>,
}

impl EdgeCounts {
    pub fn empty(n_users: usize, n_communities: usize) -> Self {
        EdgeCounts {
            n_communities,
            edges: Vec::new(),
            totals: Vec::new(),
            per_edge: Vec::new(),
            user_community: vec![0; n_users * n_communities],
            community_total: vec![0; n_communities],
        }
    }

    pub fn n_communities(&self) -> usize {
        self.n_communities
    }

    pub fn edge_split(&self, e: usize) -> &[u64] {
        &self.per_edge[e * self.n_communities..(e + 1) * self.n_communities]
    }

    /// `m_uk.` row for user `u`.
    pub fn user_row(&self, u: usize) -> &[u64] {
        &self.user_community[u * self.n_communities..(u + 1) * self.n_communities]
    }

    /// Rebuilds aggregates from the per-edge table.
    pub fn recompute_aggregates(&self, n_users: usize) -> (Vec<u64>, Vec<u64>) {
        let k = self.n_communities;
        let mut user = vec![0; n_users * k];
        let mut comm = vec![0; k];
        for (e, &(u, v)) in self.edges.iter().enumerate() {
            for (c, &m) in self.edge_split(e).iter().enumerate() {
                user[u as usize * k + c] += m;
                user[v as usize * k + c] += m;
                comm[c] += m;
            }
        }
        (user, comm)
    }
}

/// `sum_k theta_uk * u_k * theta_vk`.
#[inline]
pub fn edge_rate(theta_u: &[f64], theta_v: &[f64], scales: &[f64]) -> f64 {
    theta_u
        .iter()
        .zip(theta_v)
        .zip(scales)
        .map(|((a, b), s)| a * s * b)
        .sum()
}

/// Stream keys for users; identity unless the caller relabels users.
#[derive(Debug, Clone, Copy)]
pub struct UserKeys<'a>(pub Option<&'a [u64]>);

impl UserKeys<'_> {
    #[inline]
    pub fn key(&self, u: usize) -> u64 {
        match self.0 {
            Some(keys) => keys[u],
            None => u as u64,
        }
    }
}

/// Rescaled weights of an edge whose rate underflows; returns their sum, or
/// `None` when no community has a positive finite weight.
fn underflow_weights(tu: &[f64], tv: &[f64], scales: &[f64], weights: &mut [f64]) -> Option<f64> {
    let mut max = f64::NEG_INFINITY;
    for (c, w) in weights.iter_mut().enumerate() {
        *w = tu[c].ln() + scales[c].ln() + tv[c].ln();
        if w.is_nan() {
            return None;
        }
        max = max.max(*w);
    }
    if !max.is_finite() {
        return None;
    }
    let mut sum = 0.0;
    for w in weights.iter_mut() {
        *w = (*w - max).exp();
        sum += *w;
    }
    Some(sum)
}

/// Augments every observed edge: `m_uv ~ ZTP(rate)` then multinomial split.
pub fn sample_edge_counts(
    graph: &AdjacencyGraph,
    theta: &DenseMatrix,
    scales: &[f64],
    streams: &RngStream,
    layer: u32,
    sweep: u64,
    keys: UserKeys<'_>,
) -> Result<EdgeCounts, GraphError> {
    let n_users = graph.n_users();
    let k = scales.len();
    debug_assert_eq!(theta.cols(), k);

    type Row = Vec<(u32, u64, Vec<u64>)>;
    let rows: Vec<Result<Row, GraphError>> = (0..n_users)
        .into_par_iter()
        .map(|u| {
            let mut out = Vec::new();
            let mut weights = vec![0.0; k];
            for &v in graph.neighbors(u).iter().filter(|&&v| v as usize > u) {
                let (tu, tv) = (theta.row(u), theta.row(v as usize));
                let mut rate = 0.0;
                for c in 0..k {
                    weights[c] = tu[c] * scales[c] * tv[c];
                    rate += weights[c];
                }
                let mut rng = streams.for_pair(Phase::AugmentEdges, layer, sweep, keys.key(u), keys.key(v as usize));
                let mut split = vec![0; k];
                let total = if rate >= f64::MIN_POSITIVE {
                    let total = ztp_unchecked(rate, &mut rng);
                    thin_into(total, &weights, rate, &mut split, &mut rng);
                    total
                } else {
                    // the product underflowed: the count is 1 in the limit and
                    // its community follows the log-space weights
                    let mass = underflow_weights(tu, tv, scales, &mut weights)
                        .ok_or(GraphError::ZeroRateEdge { u, v: v as usize })?;
                    thin_into(1, &weights, mass, &mut split, &mut rng);
                    1
                };
                out.push((v, total, split));
            }
            Ok(out)
        })
        .collect();

    let mut counts = EdgeCounts::empty(n_users, k);
    for (u, row) in rows.into_iter().enumerate() {
        for (v, total, split) in row? {
            counts.edges.push((u as u32, v));
            counts.totals.push(total);
            for (c, &m) in split.iter().enumerate() {
                counts.user_community[u * k + c] += m;
                counts.user_community[v as usize * k + c] += m;
                counts.community_total[c] += m;
            }
            counts.per_edge.extend_from_slice(&split);
        }
    }
    Ok(counts)
}

/// `sum_{u<v} theta_uk theta_vk` over all pairs, in O(U).
pub fn pair_exposure(theta: &DenseMatrix, k: usize) -> f64 {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for u in 0..theta.rows() {
        let x = theta[(u, k)];
        sum += x;
        sum_sq += x * x;
    }
    ((sum * sum - sum_sq) / 2.0).max(0.0)
}

/// Prior of the community scales: `u_k ~ Gam(gamma0 / K, 1 / c0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleHyper {
    pub gamma0: f64,
    pub n_communities: usize,
    pub c0: f64,
}

impl ScaleHyper {
    pub fn shape(&self) -> f64 {
        self.gamma0 / self.n_communities as f64
    }
}

/// Conditional draw of `u_k`:
/// `Gam(gamma0/K + m_.k., 1 / (c0 + sum_{u<v} theta_uk theta_vk))`.
pub fn sample_community_scale<R: Rng + ?Sized>(
    k: usize,
    counts: &EdgeCounts,
    theta: &DenseMatrix,
    hyper: ScaleHyper,
    rng: &mut R,
) -> f64 {
    let shape = hyper.shape() + counts.community_total[k] as f64;
    let rate = hyper.c0 + pair_exposure(theta, k);
    gamma_unchecked(shape, 1.0 / rate, rng)
}
