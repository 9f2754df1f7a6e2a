//! Deep model: a gamma belief network over user factors.
//!
//! ```text
//! theta_u^(T) ~ Gam(r, 1/c_u^(T+1))
//! theta_u^(t) ~ Gam(Phi^(t+1) theta_u^(t+1), 1/c_u^(t+1))     t < T
//! lambda_ui   = sum_k theta_uk^(1) phi_ik^(1)
//! m_ukv^(t)   ~ Pois(theta_uk^(t) u_k^(t) theta_vk^(t)) on A^(t) = A^t
//! ```
//!
//! Inference augments counts upward and samples downward. Counts `x^(t)` at
//! layer t are reduced to Chinese-restaurant tables, which are Poisson one
//! layer up with rate `(Phi^(t+1) theta^(t+1))_k * ln(1 + a^(t)_uk / c_u)`,
//! where `a^(t)` is the total likelihood exposure of `theta^(t)`. Because the
//! graph term makes `a^(t)` depend on both user and community, the exposure
//! recursion is carried per `(u, k)`.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graph::{sample_edge_counts, EdgeCounts, UserKeys};
use crate::matrix::DenseMatrix;
use crate::ogfa::{
    add_graph_exposure, augment_ratings, check_dims, check_positive_all, check_simplex, dot, draw_factors,
    init_factors, init_loadings, init_scales, rated_exposure_offset, rating_exposure, resample_loadings,
    resample_rates, resample_scales, Hyper, OgfaState, RatingCounts, SamplerOptions, SweepTimings,
};
use crate::ordinal::{em_update, ThresholdModel};
use crate::rng::{crt_unchecked, thin_into, Phase, RngStream};
use crate::sparse::{adjacency_power, AdjacencyGraph, OrdinalMatrix};
use crate::ModelError;

/// Parameters of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    /// U x K_t factors.
    pub theta: DenseMatrix,
    /// I x K_1 at the bottom layer, K_{t-1} x K_t above; column-stochastic.
    pub phi: DenseMatrix,
    /// Community scales of this layer's graph.
    pub scales: Vec<f64>,
    /// Per-user gamma rate of this layer's factor prior.
    pub c_user: Vec<f64>,
}

impl LayerState {
    pub fn width(&self) -> usize {
        self.theta.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepState {
    pub layers: Vec<LayerState>,
    /// Top-layer shape.
    pub r: Vec<f64>,
    pub thresholds: ThresholdModel,
    pub hyper: Hyper,
    pub sweep: u64,
}

impl From<OgfaState> for DeepState {
    fn from(s: OgfaState) -> Self {
        DeepState {
            layers: vec![LayerState {
                theta: s.theta,
                phi: s.phi,
                scales: s.scales,
                c_user: s.c_user,
            }],
            r: s.r,
            thresholds: s.thresholds,
            hyper: s.hyper,
            sweep: s.sweep,
        }
    }
}

impl DeepState {
    /// Draws a state from the prior, top layer first.
    pub fn init(
        n_users: usize,
        n_items: usize,
        widths: &[usize],
        levels: u32,
        hyper: Hyper,
        streams: &RngStream,
    ) -> Result<Self, ModelError> {
        if n_users == 0 || n_items == 0 || widths.is_empty() || widths.contains(&0) || levels == 0 {
            return Err(ModelError::BadDimensions(format!(
                "U={n_users}, I={n_items}, K={widths:?}, V={levels} must all be positive"
            )));
        }
        hyper.validate()?;
        let depth = widths.len();
        let r = vec![hyper.r; widths[depth - 1]];
        let c_user = vec![hyper.c; n_users];

        let mut phis = Vec::with_capacity(depth);
        for (t, &k) in widths.iter().enumerate() {
            let rows = if t == 0 { n_items } else { widths[t - 1] };
            phis.push(init_loadings(rows, k, hyper.eta, streams, t as u32 + 1));
        }
        let mut thetas: Vec<DenseMatrix> = vec![DenseMatrix::zeros(0, 0); depth];
        thetas[depth - 1] = init_factors(n_users, widths[depth - 1], |_, c| r[c], &c_user, streams, depth as u32);
        for t in (0..depth - 1).rev() {
            let shape = layer_shape(&phis[t + 1], &thetas[t + 1]);
            thetas[t] = init_factors(n_users, widths[t], |u, c| shape[(u, c)], &c_user, streams, t as u32 + 1);
        }
        let layers = thetas
            .into_iter()
            .zip(phis)
            .enumerate()
            .map(|(t, (theta, phi))| LayerState {
                scales: init_scales(theta.cols(), hyper, streams, t as u32 + 1),
                theta,
                phi,
                c_user: c_user.clone(),
            })
            .collect();
        Ok(DeepState {
            layers,
            r,
            thresholds: ThresholdModel::uniform(levels)?,
            hyper,
            sweep: 0,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(LayerState::width).collect()
    }

    pub fn n_users(&self) -> usize {
        self.layers[0].theta.rows()
    }

    pub fn n_items(&self) -> usize {
        self.layers[0].phi.rows()
    }

    #[inline]
    pub fn lambda(&self, u: usize, i: usize) -> f64 {
        dot(self.layers[0].theta.row(u), self.layers[0].phi.row(i))
    }

    /// Simplex, positivity and shape-chain invariants.
    pub fn check(&self) -> Result<(), ModelError> {
        for (t, layer) in self.layers.iter().enumerate() {
            check_simplex(&layer.phi, &format!("phi^{}", t + 1))?;
            check_positive_all(layer.theta.as_slice(), "theta")?;
            check_positive_all(&layer.scales, "scales")?;
            check_positive_all(&layer.c_user, "c_user")?;
            if t > 0 && layer.phi.rows() != self.layers[t - 1].width() {
                return Err(ModelError::Invariant(format!("phi^{} has {} rows", t + 1, layer.phi.rows())));
            }
        }
        check_positive_all(&self.r, "r")
    }

    /// Shallow view of a depth-one state.
    pub fn into_shallow(self) -> Option<OgfaState> {
        if self.layers.len() != 1 {
            return None;
        }
        let layer = self.layers.into_iter().next()?;
        Some(OgfaState {
            theta: layer.theta,
            phi: layer.phi,
            scales: layer.scales,
            thresholds: self.thresholds,
            r: self.r,
            c_user: layer.c_user,
            hyper: self.hyper,
            sweep: self.sweep,
        })
    }
}

/// `(Phi theta_u)_k` for every user: the gamma shape a layer passes down.
fn layer_shape(phi_above: &DenseMatrix, theta_above: &DenseMatrix) -> DenseMatrix {
    let (k_below, k_above) = phi_above.shape();
    let mut out = DenseMatrix::zeros(theta_above.rows(), k_below);
    out.par_rows_mut().enumerate().for_each(|(u, row)| {
        let t = theta_above.row(u);
        for (k, x) in row.iter_mut().enumerate() {
            let p = phi_above.row(k);
            *x = (0..k_above).map(|j| p[j] * t[j]).sum();
        }
    });
    out
}

/// `[A, A^2, ..., A^T]`, binarized with zero diagonal.
pub fn build_layer_graphs(graph: &AdjacencyGraph, depth: usize) -> Vec<AdjacencyGraph> {
    (1..=depth as u32)
        .map(|t| adjacency_power(graph, t).expect("t >= 1"))
        .collect()
}

/// Counts produced by the upward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCounts {
    pub ratings: RatingCounts,
    pub edges: Vec<EdgeCounts>,
    /// `x^(t)`, U x K_t per layer: everything that loads on `theta^(t)`.
    pub totals: Vec<Vec<u64>>,
    /// `l^(t)`, U x K_t for t < T.
    pub tables: Vec<Vec<u64>>,
    /// `sum_u l^(t)_{u,k,k'}`, K_t x K_{t+1} for t < T.
    pub parent_counts: Vec<Vec<u64>>,
}

/// Augments ratings and every layer's edges, then propagates counts upward
/// through CRT tables split over parent communities.
pub fn upward_pass(
    ratings: &OrdinalMatrix,
    graphs: &[AdjacencyGraph],
    state: &DeepState,
    streams: &RngStream,
    keys: UserKeys<'_>,
) -> Result<LayerCounts, ModelError> {
    let sweep = state.sweep;
    let bottom = &state.layers[0];
    let rating_counts = augment_ratings(ratings, &bottom.theta, &bottom.phi, &state.thresholds, streams, sweep, keys);
    let mut edges = Vec::with_capacity(state.depth());
    for (t, layer) in state.layers.iter().enumerate() {
        edges.push(sample_edge_counts(&graphs[t], &layer.theta, &layer.scales, streams, t as u32 + 1, sweep, keys)?);
    }

    let mut totals: Vec<Vec<u64>> = Vec::with_capacity(state.depth());
    totals.push(
        rating_counts
            .user_community
            .iter()
            .zip(&edges[0].user_community)
            .map(|(a, b)| a + b)
            .collect(),
    );
    let mut tables = Vec::new();
    let mut parent_counts = Vec::new();
    let n_users = state.n_users();

    for t in 0..state.depth() - 1 {
        let above = &state.layers[t + 1];
        let (k_below, k_above) = above.phi.shape();
        let shape = layer_shape(&above.phi, &above.theta);
        let x = &totals[t];
        let layer_tag = t as u32 + 1;

        let per_user: Vec<(Vec<u64>, Vec<u64>)> = (0..n_users)
            .into_par_iter()
            .map(|u| {
                let mut rng = streams.for_key(Phase::Tables, layer_tag, sweep, keys.key(u));
                let mut table_row = vec![0u64; k_below];
                let mut split = vec![0u64; k_below * k_above];
                let mut weights = vec![0.0; k_above];
                let theta_u = above.theta.row(u);
                for k in 0..k_below {
                    let n = x[u * k_below + k];
                    if n == 0 {
                        continue;
                    }
                    let tables = crt_unchecked(n, shape[(u, k)], &mut rng);
                    table_row[k] = tables;
                    let p = above.phi.row(k);
                    let mut total = 0.0;
                    for j in 0..k_above {
                        weights[j] = p[j] * theta_u[j];
                        total += weights[j];
                    }
                    thin_into(tables, &weights, total, &mut split[k * k_above..(k + 1) * k_above], &mut rng);
                }
                (table_row, split)
            })
            .collect();

        let mut layer_tables = Vec::with_capacity(n_users * k_below);
        let mut parent = vec![0u64; k_below * k_above];
        let mut next = edges[t + 1].user_community.clone();
        for (u, (table_row, split)) in per_user.into_iter().enumerate() {
            layer_tables.extend_from_slice(&table_row);
            for k in 0..k_below {
                for j in 0..k_above {
                    let m = split[k * k_above + j];
                    parent[k * k_above + j] += m;
                    next[u * k_above + j] += m;
                }
            }
        }
        tables.push(layer_tables);
        parent_counts.push(parent);
        totals.push(next);
    }

    Ok(LayerCounts {
        ratings: rating_counts,
        edges,
        totals,
        tables,
        parent_counts,
    })
}

/// Resamples loadings bottom-up, then factors top-down, then scales.
///
/// Loadings go first so that each layer's exposure is built from the
/// loadings the factors will be conditioned on.
pub fn downward_pass(
    ratings: &OrdinalMatrix,
    counts: &LayerCounts,
    state: &mut DeepState,
    options: &SamplerOptions,
    streams: &RngStream,
    keys: UserKeys<'_>,
) {
    let depth = state.depth();
    let sweep = state.sweep;
    let eta = state.hyper.eta;

    let offset = options
        .correct_loadings
        .then(|| rated_exposure_offset(ratings, &state.layers[0].theta, &state.thresholds));
    state.layers[0].phi = resample_loadings(
        &state.layers[0].phi,
        &counts.ratings.item_community,
        eta,
        offset.as_ref(),
        streams,
        1,
        sweep,
    );

    // `bases[t]`: rate terms of theta^(t) not involving other users;
    // `full[t]`: the exposure a^(t), graph term included.
    let mut bases = Vec::with_capacity(depth);
    let mut full = Vec::with_capacity(depth);
    let base = rating_exposure(ratings, &state.layers[0].phi, &state.thresholds);
    let mut a = base.clone();
    add_graph_exposure(&mut a, &state.layers[0].theta, &state.layers[0].scales);
    bases.push(base);
    full.push(a);
    for t in 0..depth - 1 {
        let below = &full[t];
        let c_below = &state.layers[t].c_user;
        let mut log_gain = below.clone();
        log_gain.par_rows_mut().enumerate().for_each(|(u, row)| {
            row.iter_mut().for_each(|x| *x = (*x / c_below[u]).ln_1p());
        });

        let (k_below, k_above) = state.layers[t + 1].phi.shape();
        let correction = options.correct_loadings.then(|| {
            let theta_above = &state.layers[t + 1].theta;
            let mut e = DenseMatrix::zeros(k_below, k_above);
            for u in 0..theta_above.rows() {
                let (g, th) = (log_gain.row(u), theta_above.row(u));
                for k in 0..k_below {
                    for j in 0..k_above {
                        e[(k, j)] += th[j] * g[k];
                    }
                }
            }
            e
        });
        let phi = resample_loadings(
            &state.layers[t + 1].phi,
            &counts.parent_counts[t],
            eta,
            correction.as_ref(),
            streams,
            t as u32 + 2,
            sweep,
        );
        state.layers[t + 1].phi = phi;

        let phi = &state.layers[t + 1].phi;
        let mut next = DenseMatrix::zeros(log_gain.rows(), k_above);
        next.par_rows_mut().enumerate().for_each(|(u, row)| {
            let g = log_gain.row(u);
            for (j, x) in row.iter_mut().enumerate() {
                *x = (0..k_below).map(|k| phi[(k, j)] * g[k]).sum();
            }
        });
        let mut with_graph = next.clone();
        add_graph_exposure(&mut with_graph, &state.layers[t + 1].theta, &state.layers[t + 1].scales);
        bases.push(next);
        full.push(with_graph);
    }

    for t in (0..depth).rev() {
        let theta = if t + 1 == depth {
            let r = &state.r;
            draw_factors(
                |_, c| r[c],
                &counts.totals[t],
                &state.layers[t].c_user,
                &bases[t],
                Some((&state.layers[t].theta, &state.layers[t].scales)),
                streams,
                t as u32 + 1,
                sweep,
                keys,
            )
        } else {
            let shape = layer_shape(&state.layers[t + 1].phi, &state.layers[t + 1].theta);
            draw_factors(
                |u, c| shape[(u, c)],
                &counts.totals[t],
                &state.layers[t].c_user,
                &bases[t],
                Some((&state.layers[t].theta, &state.layers[t].scales)),
                streams,
                t as u32 + 1,
                sweep,
                keys,
            )
        };
        state.layers[t].theta = theta;
    }

    for t in 0..depth {
        state.layers[t].scales =
            resample_scales(&counts.edges[t], &state.layers[t].theta, &state.hyper, streams, t as u32 + 1, sweep);
    }
}

/// One hybrid Gibbs-EM sweep of the deep model.
pub fn deep_sweep(
    ratings: &OrdinalMatrix,
    graphs: &[AdjacencyGraph],
    state: &mut DeepState,
    options: &SamplerOptions,
    streams: &RngStream,
    keys: UserKeys<'_>,
) -> Result<SweepTimings, ModelError> {
    if graphs.len() != state.depth() {
        return Err(ModelError::BadDimensions(format!(
            "{} layer graphs for a depth-{} model",
            graphs.len(),
            state.depth()
        )));
    }
    for g in graphs {
        check_dims(ratings, g, state.n_users(), state.n_items(), state.thresholds.levels())?;
    }
    let mut timings = SweepTimings::default();
    let mut clock = Instant::now();

    let counts = upward_pass(ratings, graphs, state, streams, keys)?;
    timings.lap("upward", &mut clock);

    downward_pass(ratings, &counts, state, options, streams, keys);
    timings.lap("downward", &mut clock);

    if options.resample_hyper {
        let depth = state.depth();
        for t in 0..depth {
            let rates = if t + 1 == depth {
                let r_sum: f64 = state.r.iter().sum();
                resample_rates(&state.layers[t].theta, |_| r_sum, &state.hyper, streams, t as u32 + 1, state.sweep, keys)
            } else {
                // columns of Phi^(t+1) sum to one, so sum_k (Phi theta_u)_k = sum_j theta_uj
                let above = &state.layers[t + 1].theta;
                resample_rates(
                    &state.layers[t].theta,
                    |u| above.row(u).iter().sum(),
                    &state.hyper,
                    streams,
                    t as u32 + 1,
                    state.sweep,
                    keys,
                )
            };
            state.layers[t].c_user = rates;
        }
    }
    timings.lap("hyper", &mut clock);

    if options.learn_thresholds {
        state.thresholds = em_update(&counts.ratings.thresholds.finish())?;
    }
    timings.lap("thresholds", &mut clock);

    state.sweep += 1;
    Ok(timings)
}

/// Item-space distribution of community `k` at layer `layer` (1-based):
/// `Phi^(1) ... Phi^(layer-1) phi_k^(layer)`.
pub fn project_community(state: &DeepState, layer: usize, k: usize) -> Result<Vec<f64>, ModelError> {
    if layer == 0 || layer > state.depth() {
        return Err(ModelError::IndexOutOfRange {
            what: "layer",
            index: layer,
            size: state.depth(),
        });
    }
    let width = state.layers[layer - 1].width();
    if k >= width {
        return Err(ModelError::IndexOutOfRange {
            what: "community",
            index: k,
            size: width,
        });
    }
    let mut v = state.layers[layer - 1].phi.column(k);
    for t in (0..layer - 1).rev() {
        v = state.layers[t].phi.mul_vec(&v);
    }
    Ok(v)
}

/// Posterior-mean rate over deep states.
pub fn predict_scores_deep(states: &[DeepState], users: &[usize], items: &[usize]) -> Result<DenseMatrix, ModelError> {
    if states.is_empty() {
        return Err(ModelError::EmptyStateList);
    }
    let mut out = DenseMatrix::zeros(users.len(), items.len());
    for s in states {
        for (a, &u) in users.iter().enumerate() {
            let row = out.row_mut(a);
            for (b, &i) in items.iter().enumerate() {
                row[b] += s.lambda(u, i);
            }
        }
    }
    let n = states.len() as f64;
    out.as_mut_slice().iter_mut().for_each(|x| *x /= n);
    Ok(out)
}

/// Held-out log likelihood under the posterior-mean rate of deep states.
pub fn heldout_loglik_deep(test: &[(usize, usize, u32)], states: &[DeepState]) -> Result<f64, ModelError> {
    let last = states.last().ok_or(ModelError::EmptyStateList)?;
    let n = states.len() as f64;
    let mut total = 0.0;
    for &(u, i, level) in test {
        let lambda = states.iter().map(|s| s.lambda(u, i)).sum::<f64>() / n;
        total += last.thresholds.log_lik(lambda, level)?;
    }
    Ok(total)
}
