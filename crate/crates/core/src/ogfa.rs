//! Shallow joint model: ordinal ratings and a binary social graph share the
//! user factors `theta`.
//!
//! ```text
//! y_ui ~ ordinal link of lambda_ui = sum_k theta_uk phi_ik
//! a_uv = 1(m_uv >= 1), m_ukv ~ Pois(theta_uk u_k theta_vk)
//! phi_k ~ Dir(eta), theta_u ~ Gam(r, 1/c_u), u_k ~ Gam(gamma0/K, 1/c0)
//! ```
//!
//! Every phase of [`gibbs_sweep`] reads a frozen state and writes its result
//! at the phase barrier. Work inside a phase is split by user, item or
//! community, each unit drawing from its own tagged stream, so the result is
//! independent of the rayon pool size.

use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graph::{sample_community_scale, sample_edge_counts, EdgeCounts, ScaleHyper, UserKeys};
use crate::matrix::DenseMatrix;
use crate::ordinal::{em_update, ThresholdAccumulator, ThresholdModel};
use crate::rng::{dirichlet_into, gamma_unchecked, scaled_dirichlet_into, thin_into, Phase, RngStream};
use crate::sparse::{AdjacencyGraph, OrdinalMatrix};
use crate::ModelError;

/// Prior and hyperprior constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    /// Top-layer gamma shape `r_k`.
    pub r: f64,
    /// Initial per-user rate `c_u`.
    pub c: f64,
    /// Rate of the community-scale prior.
    pub c0: f64,
    /// Total shape of the community-scale prior, split as `gamma0 / K`.
    pub gamma0: f64,
    /// Dirichlet concentration of loading columns.
    pub eta: f64,
    /// Gamma hyperprior on `c_u`: shape `e0`, rate `f0`.
    pub e0: f64,
    pub f0: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            r: 1.0,
            c: 1.0,
            c0: 1.0,
            gamma0: 1.0,
            eta: 0.05,
            e0: 1.0,
            f0: 1.0,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("r", self.r),
            ("c", self.c),
            ("c0", self.c0),
            ("gamma0", self.gamma0),
            ("eta", self.eta),
            ("e0", self.e0),
            ("f0", self.f0),
        ];
        for (name, value) in fields {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ModelError::BadHyper { name, value });
            }
        }
        Ok(())
    }

    pub(crate) fn scale_hyper(&self, n_communities: usize) -> ScaleHyper {
        ScaleHyper {
            gamma0: self.gamma0,
            n_communities,
            c0: self.c0,
        }
    }
}

/// Switches for the parts of the sweep that are not plain Gibbs steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerOptions {
    /// Re-estimate threshold gaps by EM after each sweep.
    pub learn_thresholds: bool,
    /// Resample the per-user rates `c_u`.
    pub resample_hyper: bool,
    /// Metropolis-correct the Dirichlet loading proposal for the exposure that
    /// differs between rated and unrated cells.
    pub correct_loadings: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions {
            learn_thresholds: true,
            resample_hyper: true,
            correct_loadings: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OgfaState {
    /// U x K user factors.
    pub theta: DenseMatrix,
    /// I x K item loadings; each column lies on the simplex.
    pub phi: DenseMatrix,
    /// Community scales `u_k`.
    pub scales: Vec<f64>,
    pub thresholds: ThresholdModel,
    pub r: Vec<f64>,
    pub c_user: Vec<f64>,
    pub hyper: Hyper,
    pub sweep: u64,
}

impl OgfaState {
    pub fn init(
        n_users: usize,
        n_items: usize,
        n_communities: usize,
        levels: u32,
        hyper: Hyper,
        streams: &RngStream,
    ) -> Result<Self, ModelError> {
        if n_users == 0 || n_items == 0 || n_communities == 0 || levels == 0 {
            return Err(ModelError::BadDimensions(format!(
                "U={n_users}, I={n_items}, K={n_communities}, V={levels} must all be positive"
            )));
        }
        hyper.validate()?;
        let r = vec![hyper.r; n_communities];
        let c_user = vec![hyper.c; n_users];
        let theta = init_factors(n_users, n_communities, |_, c| r[c], &c_user, streams, 1);
        let phi = init_loadings(n_items, n_communities, hyper.eta, streams, 1);
        let scales = init_scales(n_communities, hyper, streams, 1);
        Ok(OgfaState {
            theta,
            phi,
            scales,
            thresholds: ThresholdModel::uniform(levels)?,
            r,
            c_user,
            hyper,
            sweep: 0,
        })
    }

    pub fn n_users(&self) -> usize {
        self.theta.rows()
    }

    pub fn n_items(&self) -> usize {
        self.phi.rows()
    }

    pub fn n_communities(&self) -> usize {
        self.theta.cols()
    }

    #[inline]
    pub fn lambda(&self, u: usize, i: usize) -> f64 {
        dot(self.theta.row(u), self.phi.row(i))
    }

    /// Simplex and positivity invariants.
    pub fn check(&self) -> Result<(), ModelError> {
        check_simplex(&self.phi, "phi")?;
        check_positive_all(self.theta.as_slice(), "theta")?;
        check_positive_all(&self.scales, "scales")?;
        check_positive_all(&self.r, "r")?;
        check_positive_all(&self.c_user, "c_user")
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn check_simplex(m: &DenseMatrix, name: &str) -> Result<(), ModelError> {
    for (k, s) in m.column_sums().iter().enumerate() {
        if (s - 1.0).abs() > 1e-8 {
            return Err(ModelError::Invariant(format!("{name} column {k} sums to {s}")));
        }
    }
    if m.iter().any(|&x| !(x >= 0.0)) {
        return Err(ModelError::Invariant(format!("{name} has a negative entry")));
    }
    Ok(())
}

pub(crate) fn check_positive_all(xs: &[f64], name: &str) -> Result<(), ModelError> {
    match xs.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
        Some(p) => Err(ModelError::Invariant(format!("{name}[{p}] = {} is not positive", xs[p]))),
        None => Ok(()),
    }
}

pub(crate) fn init_factors(
    n_users: usize,
    k: usize,
    shape: impl Fn(usize, usize) -> f64 + Sync,
    c_user: &[f64],
    streams: &RngStream,
    layer: u32,
) -> DenseMatrix {
    let mut theta = DenseMatrix::zeros(n_users, k);
    theta.par_rows_mut().enumerate().for_each(|(u, row)| {
        let mut rng = streams.for_key(Phase::InitFactors, layer, 0, u as u64);
        for (c, x) in row.iter_mut().enumerate() {
            *x = gamma_unchecked(shape(u, c), 1.0 / c_user[u], &mut rng);
        }
    });
    theta
}

pub(crate) fn init_loadings(rows: usize, cols: usize, eta: f64, streams: &RngStream, layer: u32) -> DenseMatrix {
    let mut phi = DenseMatrix::zeros(rows, cols);
    let alphas = vec![eta; rows];
    let mut column = vec![0.0; rows];
    for k in 0..cols {
        let mut rng = streams.for_key(Phase::InitLoadings, layer, 0, k as u64);
        dirichlet_into(&alphas, &mut column, &mut rng);
        phi.set_column(k, &column);
    }
    phi
}

pub(crate) fn init_scales(k: usize, hyper: Hyper, streams: &RngStream, layer: u32) -> Vec<f64> {
    let prior = hyper.scale_hyper(k);
    (0..k)
        .map(|c| {
            let mut rng = streams.for_key(Phase::InitScales, layer, 0, c as u64);
            gamma_unchecked(prior.shape(), 1.0 / prior.c0, &mut rng)
        })
        .collect()
}

/// Augmented rating counts of one sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingCounts {
    n_communities: usize,
    /// `n_ui` per nonzero, in row-storage order.
    pub latent: Vec<u64>,
    /// `c_uik`, nonzero-major.
    pub per_cell: Vec<u64>,
    /// `c_u.k`, U x K.
    pub user_community: Vec<u64>,
    /// `c_.ik`, I x K.
    pub item_community: Vec<u64>,
    /// Threshold statistics gathered with the same rates.
    pub thresholds: ThresholdAccumulator,
}

impl RatingCounts {
    pub fn cell_split(&self, p: usize) -> &[u64] {
        &self.per_cell[p * self.n_communities..(p + 1) * self.n_communities]
    }

    pub fn user_row(&self, u: usize) -> &[u64] {
        &self.user_community[u * self.n_communities..(u + 1) * self.n_communities]
    }
}

/// Draws `n_ui` for every nonzero and splits it over communities with
/// weights `theta_uk phi_ik`. Level-0 cells are skipped; they enter only the
/// threshold statistics through their total rate.
pub fn augment_ratings(
    ratings: &OrdinalMatrix,
    theta: &DenseMatrix,
    phi: &DenseMatrix,
    thresholds: &ThresholdModel,
    streams: &RngStream,
    sweep: u64,
    keys: UserKeys<'_>,
) -> RatingCounts {
    let k = theta.cols();
    let phi_mass = phi.column_sums();

    let mut latent = vec![0u64; ratings.nnz()];
    let mut per_cell = vec![0u64; ratings.nnz() * k];
    // one disjoint (latent, split) slice pair per user
    let mut slices = Vec::with_capacity(ratings.n_users());
    let (mut rest_latent, mut rest_split) = (latent.as_mut_slice(), per_cell.as_mut_slice());
    for u in 0..ratings.n_users() {
        let len = ratings.row_range(u).len();
        let (l, tail_l) = rest_latent.split_at_mut(len);
        let (c, tail_c) = rest_split.split_at_mut(len * k);
        slices.push((l, c));
        rest_latent = tail_l;
        rest_split = tail_c;
    }

    let accumulators: Vec<ThresholdAccumulator> = slices
        .into_par_iter()
        .enumerate()
        .map(|(u, (latent, split))| {
            let mut rng = streams.for_key(Phase::AugmentRatings, 1, sweep, keys.key(u));
            let mut acc = ThresholdAccumulator::new(thresholds.levels());
            let mut weights = vec![0.0; k];
            let tu = theta.row(u);
            let mut rated_mass = 0.0;
            for (j, p) in ratings.row_range(u).enumerate() {
                let (i, level) = ratings.entry(p);
                let pi = phi.row(i);
                let mut lambda = 0.0;
                for c in 0..k {
                    weights[c] = tu[c] * pi[c];
                    lambda += weights[c];
                }
                let n = thresholds.latent_count_unchecked(level, lambda, &mut rng);
                if n > 0 {
                    thin_into(n, &weights, lambda, &mut split[j * k..(j + 1) * k], &mut rng);
                }
                acc.observe(level, n, lambda);
                latent[j] = n;
                rated_mass += lambda;
            }
            acc.observe_zero_mass(dot(tu, &phi_mass) - rated_mass);
            acc
        })
        .collect();

    let mut counts = RatingCounts {
        n_communities: k,
        latent,
        per_cell,
        user_community: vec![0; ratings.n_users() * k],
        item_community: vec![0; ratings.n_items() * k],
        thresholds: ThresholdAccumulator::new(thresholds.levels()),
    };
    for (u, acc) in accumulators.iter().enumerate() {
        for p in ratings.row_range(u) {
            let (i, _) = ratings.entry(p);
            for c in 0..k {
                let m = counts.per_cell[p * k + c];
                counts.user_community[u * k + c] += m;
                counts.item_community[i * k + c] += m;
            }
        }
        counts.thresholds.merge(acc);
    }
    counts
}

/// Resamples every column of a column-stochastic matrix.
///
/// Without an `exposure` column `k` is drawn from `Dir(eta + counts[., k])`.
/// With an exposure matrix `E` the target carries the extra factor
/// `exp(-sum_i phi_ik E_ik)`; a scaled Dirichlet tilted towards it is
/// proposed and accepted with the matching Metropolis-Hastings ratio.
/// Metropolis-Hastings transitions per loading column and sweep.
const LOADING_TRIES: usize = 4;

pub(crate) fn resample_loadings(
    current: &DenseMatrix,
    counts: &[u64],
    eta: f64,
    exposure: Option<&DenseMatrix>,
    streams: &RngStream,
    layer: u32,
    sweep: u64,
) -> DenseMatrix {
    let (rows, cols) = current.shape();
    let columns: Vec<Vec<f64>> = (0..cols)
        .into_par_iter()
        .map(|k| {
            let mut rng = streams.for_key(Phase::Loadings, layer, sweep, k as u64);
            let alphas: Vec<f64> = (0..rows).map(|i| eta + counts[i * cols + k] as f64).collect();
            let mut proposal = vec![0.0; rows];
            let Some(e) = exposure else {
                dirichlet_into(&alphas, &mut proposal, &mut rng);
                return proposal;
            };
            // Proposal: gammas with rates b_i = 1 + E_ik / m, normalized. The
            // log weight target / proposal is w(x) = A ln(1 + x / m) - x in
            // x = phi.E, stationary at x = A - m; m is chosen so that point
            // sits at the proposal's mean of x, which depends on alpha and E
            // only and keeps this an independence sampler.
            let total: f64 = alphas.iter().sum();
            let floor = 2.0 * (0..rows).map(|i| -e[(i, k)]).fold(0.0, f64::max);
            let mut m = total.max(floor);
            for _ in 0..20 {
                let (mut num, mut den) = (0.0, 0.0);
                for (i, a) in alphas.iter().enumerate() {
                    let w = a / (m + e[(i, k)]);
                    num += w * e[(i, k)];
                    den += w;
                }
                m = (total - num / den).max(floor);
            }
            let rates: Vec<f64> = (0..rows).map(|i| 1.0 + e[(i, k)] / m).collect();
            let log_weight = |phi: &[f64]| {
                let (mut linear, mut scaled) = (0.0, 0.0);
                for i in 0..rows {
                    linear += phi[i] * e[(i, k)];
                    scaled += phi[i] * rates[i];
                }
                total * scaled.ln() - linear
            };
            let mut column = current.column(k);
            let mut weight = log_weight(&column);
            for _ in 0..LOADING_TRIES {
                scaled_dirichlet_into(&alphas, &rates, &mut proposal, &mut rng);
                let proposed = log_weight(&proposal);
                let u: f64 = rng.random();
                if proposed >= weight || u.ln() < proposed - weight {
                    std::mem::swap(&mut column, &mut proposal);
                    weight = proposed;
                }
            }
            column
        })
        .collect();
    let mut out = DenseMatrix::zeros(rows, cols);
    for (k, col) in columns.iter().enumerate() {
        out.set_column(k, col);
    }
    out
}

/// `sum_{u rated i} theta_uk (T_{y_ui} - gamma_0)`: how much less rate a
/// rated cell is charged than an unrated one.
pub(crate) fn rated_exposure_offset(
    ratings: &OrdinalMatrix,
    theta: &DenseMatrix,
    thresholds: &ThresholdModel,
) -> DenseMatrix {
    let k = theta.cols();
    let gamma0 = thresholds.gamma()[0];
    let mut out = DenseMatrix::zeros(ratings.n_items(), k);
    out.par_rows_mut().enumerate().for_each(|(i, row)| {
        for (u, level) in ratings.col(i) {
            let w = thresholds.exposure(level) - gamma0;
            for (x, t) in row.iter_mut().zip(theta.row(u)) {
                *x += t * w;
            }
        }
    });
    out
}

/// Draws the item loadings from their conditional.
pub fn sample_phi(
    ratings: &OrdinalMatrix,
    counts: &RatingCounts,
    state: &OgfaState,
    options: &SamplerOptions,
    streams: &RngStream,
) -> DenseMatrix {
    let exposure = options
        .correct_loadings
        .then(|| rated_exposure_offset(ratings, &state.theta, &state.thresholds));
    resample_loadings(
        &state.phi,
        &counts.item_community,
        state.hyper.eta,
        exposure.as_ref(),
        streams,
        1,
        state.sweep,
    )
}

/// Rate each `theta_uk` is charged by the ratings:
/// `sum_i phi_ik T_{y_ui}` over all items, level-0 cells included.
pub(crate) fn rating_exposure(ratings: &OrdinalMatrix, phi: &DenseMatrix, thresholds: &ThresholdModel) -> DenseMatrix {
    let k = phi.cols();
    let gamma0 = thresholds.gamma()[0];
    let base: Vec<f64> = phi.column_sums().iter().map(|s| gamma0 * s).collect();
    let mut out = DenseMatrix::zeros(ratings.n_users(), k);
    out.par_rows_mut().enumerate().for_each(|(u, row)| {
        row.copy_from_slice(&base);
        for (i, level) in ratings.row(u) {
            let w = thresholds.exposure(level) - gamma0;
            for (x, p) in row.iter_mut().zip(phi.row(i)) {
                *x += p * w;
            }
        }
    });
    out
}

/// Adds the social-graph rate `u_k * sum_{v != u} theta_vk` to `exposure`.
pub(crate) fn add_graph_exposure(exposure: &mut DenseMatrix, theta: &DenseMatrix, scales: &[f64]) {
    let totals = theta.column_sums();
    exposure.rows_iter_mut().enumerate().for_each(|(u, row)| {
        for (k, x) in row.iter_mut().enumerate() {
            *x += scales[k] * (totals[k] - theta[(u, k)]);
        }
    });
}

/// Users in the order their graph-coupled factors are updated: ascending
/// stream key, so relabeling users together with their keys leaves the
/// trajectory unchanged.
pub(crate) fn update_order(n_users: usize, keys: UserKeys<'_>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_users).collect();
    order.sort_by_key(|&u| (keys.key(u), u));
    order
}

/// `theta_uk ~ Gam(shape_uk + counts_uk, 1 / (rate_u + exposure_uk + g_uk))`.
///
/// `exposure` holds every rate term that does not involve other users. With a
/// `coupling = (theta, scales)` the graph term `g_uk = u_k sum_{v != u}
/// theta_vk` is added using the newest value of every other user, updating
/// users one at a time in key order; this keeps the step an exact Gibbs scan.
/// Each user still draws from its own stream.
pub(crate) fn draw_factors(
    shape: impl Fn(usize, usize) -> f64 + Sync,
    counts: &[u64],
    rate: &[f64],
    exposure: &DenseMatrix,
    coupling: Option<(&DenseMatrix, &[f64])>,
    streams: &RngStream,
    layer: u32,
    sweep: u64,
    keys: UserKeys<'_>,
) -> DenseMatrix {
    let (n_users, k) = exposure.shape();
    let draw_row = |u: usize, row: &mut [f64], graph: &dyn Fn(usize) -> f64| {
        let mut rng = streams.for_key(Phase::Factors, layer, sweep, keys.key(u));
        for (c, x) in row.iter_mut().enumerate() {
            let a = shape(u, c) + counts[u * k + c] as f64;
            let b = rate[u] + exposure[(u, c)] + graph(c);
            *x = gamma_unchecked(a, 1.0 / b, &mut rng);
        }
    };
    match coupling {
        None => {
            let mut theta = DenseMatrix::zeros(n_users, k);
            theta.par_rows_mut().enumerate().for_each(|(u, row)| draw_row(u, row, &|_| 0.0));
            theta
        }
        Some((current, scales)) => {
            let mut theta = current.clone();
            let mut totals = current.column_sums();
            let mut row = vec![0.0; k];
            for u in update_order(n_users, keys) {
                let old = theta.row(u);
                let others: Vec<f64> = (0..k).map(|c| scales[c] * (totals[c] - old[c]).max(0.0)).collect();
                draw_row(u, &mut row, &|c| others[c]);
                for c in 0..k {
                    totals[c] += row[c] - theta[(u, c)];
                }
                theta.row_mut(u).copy_from_slice(&row);
            }
            theta
        }
    }
}

/// Draws the user factors from their conditional given fresh counts and the
/// current loadings, scanning users so each sees the newest factors of the
/// others.
pub fn sample_theta(
    ratings: &OrdinalMatrix,
    counts: &RatingCounts,
    edges: &EdgeCounts,
    state: &OgfaState,
    streams: &RngStream,
    keys: UserKeys<'_>,
) -> DenseMatrix {
    let exposure = rating_exposure(ratings, &state.phi, &state.thresholds);
    let total: Vec<u64> = counts
        .user_community
        .iter()
        .zip(&edges.user_community)
        .map(|(a, b)| a + b)
        .collect();
    let r = &state.r;
    draw_factors(
        |_, c| r[c],
        &total,
        &state.c_user,
        &exposure,
        Some((&state.theta, &state.scales)),
        streams,
        1,
        state.sweep,
        keys,
    )
}

/// `c_u ~ Gam(e0 + sum_k shape_uk, 1 / (f0 + sum_k theta_uk))`.
pub(crate) fn resample_rates(
    theta: &DenseMatrix,
    shape_sum: impl Fn(usize) -> f64 + Sync,
    hyper: &Hyper,
    streams: &RngStream,
    layer: u32,
    sweep: u64,
    keys: UserKeys<'_>,
) -> Vec<f64> {
    (0..theta.rows())
        .into_par_iter()
        .map(|u| {
            let mut rng = streams.for_key(Phase::Hyper, layer, sweep, keys.key(u));
            let a = hyper.e0 + shape_sum(u);
            let b = hyper.f0 + theta.row(u).iter().sum::<f64>();
            gamma_unchecked(a, 1.0 / b, &mut rng)
        })
        .collect()
}

pub(crate) fn resample_scales(
    edges: &EdgeCounts,
    theta: &DenseMatrix,
    hyper: &Hyper,
    streams: &RngStream,
    layer: u32,
    sweep: u64,
) -> Vec<f64> {
    let prior = hyper.scale_hyper(theta.cols());
    (0..theta.cols())
        .map(|k| {
            let mut rng = streams.for_key(Phase::CommunityScale, layer, sweep, k as u64);
            sample_community_scale(k, edges, theta, prior, &mut rng)
        })
        .collect()
}

/// Wall-clock per sweep phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepTimings {
    pub phases: Vec<(&'static str, Duration)>,
}

impl SweepTimings {
    pub(crate) fn lap(&mut self, name: &'static str, start: &mut Instant) {
        let now = Instant::now();
        self.phases.push((name, now - *start));
        *start = now;
    }

    pub fn total(&self) -> Duration {
        self.phases.iter().map(|p| p.1).sum()
    }
}

pub(crate) fn check_dims(ratings: &OrdinalMatrix, graph: &AdjacencyGraph, n_users: usize, n_items: usize, levels: u32) -> Result<(), ModelError> {
    if ratings.n_users() != n_users || graph.n_users() != n_users || ratings.n_items() != n_items {
        return Err(ModelError::BadDimensions(format!(
            "ratings {}x{}, graph {} users, state {}x{}",
            ratings.n_users(),
            ratings.n_items(),
            graph.n_users(),
            n_users,
            n_items
        )));
    }
    if ratings.max_level() != levels {
        return Err(ModelError::BadDimensions(format!(
            "ratings have V={} but thresholds have V={}",
            ratings.max_level(),
            levels
        )));
    }
    Ok(())
}

/// One hybrid Gibbs-EM sweep.
///
/// Phases: rating augmentation, edge augmentation, loadings, factors,
/// community scales, per-user rates, threshold EM (from the statistics of the
/// augmentation phase).
pub fn gibbs_sweep(
    ratings: &OrdinalMatrix,
    graph: &AdjacencyGraph,
    state: &mut OgfaState,
    options: &SamplerOptions,
    streams: &RngStream,
    keys: UserKeys<'_>,
) -> Result<SweepTimings, ModelError> {
    check_dims(ratings, graph, state.n_users(), state.n_items(), state.thresholds.levels())?;
    let mut timings = SweepTimings::default();
    let mut clock = Instant::now();
    let sweep = state.sweep;

    let counts = augment_ratings(ratings, &state.theta, &state.phi, &state.thresholds, streams, sweep, keys);
    timings.lap("augment_ratings", &mut clock);

    let edges = sample_edge_counts(graph, &state.theta, &state.scales, streams, 1, sweep, keys)?;
    timings.lap("augment_edges", &mut clock);

    state.phi = sample_phi(ratings, &counts, state, options, streams);
    timings.lap("loadings", &mut clock);

    state.theta = sample_theta(ratings, &counts, &edges, state, streams, keys);
    timings.lap("factors", &mut clock);

    state.scales = resample_scales(&edges, &state.theta, &state.hyper, streams, 1, sweep);
    timings.lap("scales", &mut clock);

    if options.resample_hyper {
        let r_sum: f64 = state.r.iter().sum();
        state.c_user = resample_rates(&state.theta, |_| r_sum, &state.hyper, streams, 1, sweep, keys);
    }
    timings.lap("hyper", &mut clock);

    if options.learn_thresholds {
        state.thresholds = em_update(&counts.thresholds.finish())?;
    }
    timings.lap("thresholds", &mut clock);

    state.sweep += 1;
    Ok(timings)
}

/// Synthetic data together with the parameters that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub ratings: OrdinalMatrix,
    pub graph: AdjacencyGraph,
    pub theta: DenseMatrix,
    pub phi: DenseMatrix,
    pub scales: Vec<f64>,
    pub thresholds: ThresholdModel,
}

impl Synthetic {
    pub fn lambda(&self, u: usize, i: usize) -> f64 {
        dot(self.theta.row(u), self.phi.row(i))
    }
}

/// Draws parameters from the priors, then ratings and edges from them.
pub fn simulate(
    n_users: usize,
    n_items: usize,
    n_communities: usize,
    hyper: Hyper,
    true_deltas: &[f64],
    streams: &RngStream,
) -> Result<Synthetic, ModelError> {
    let thresholds = ThresholdModel::from_deltas(true_deltas)?;
    let state = OgfaState::init(n_users, n_items, n_communities, thresholds.levels(), hyper, streams)?;
    simulate_from(state.theta, state.phi, state.scales, thresholds, streams)
}

/// Draws ratings and edges from fixed parameters.
///
/// Ratings quantize `lambda_ui * eps` with `eps ~ IG(1,1)`; an edge appears
/// with probability `1 - exp(-rate)`, the law of `1(Pois(rate) >= 1)`.
pub fn simulate_from(
    theta: DenseMatrix,
    phi: DenseMatrix,
    scales: Vec<f64>,
    thresholds: ThresholdModel,
    streams: &RngStream,
) -> Result<Synthetic, ModelError> {
    let (n_users, n_items) = (theta.rows(), phi.rows());
    let rows: Vec<Vec<(usize, usize, u32)>> = (0..n_users)
        .into_par_iter()
        .map(|u| {
            let mut rng = streams.for_key(Phase::Simulate, 1, 0, u as u64);
            let mut out = Vec::new();
            for i in 0..n_items {
                let lambda = dot(theta.row(u), phi.row(i));
                let exp1: f64 = rng.sample(rand_distr::Exp1);
                let level = if exp1 > 0.0 { thresholds.quantize(lambda / exp1) } else { thresholds.levels() };
                if level > 0 {
                    out.push((u, i, level));
                }
            }
            out
        })
        .collect();
    let triples: Vec<_> = rows.into_iter().flatten().collect();
    let ratings = OrdinalMatrix::new(&triples, n_users, n_items, thresholds.levels())?;

    let edge_rows: Vec<Vec<(usize, usize)>> = (0..n_users)
        .into_par_iter()
        .map(|u| {
            let mut rng = streams.for_key(Phase::SimulateGraph, 1, 0, u as u64);
            ((u + 1)..n_users)
                .filter(|&v| {
                    let rate = crate::graph::edge_rate(theta.row(u), theta.row(v), &scales);
                    rng.random::<f64>() < -(-rate).exp_m1()
                })
                .map(|v| (u, v))
                .collect()
        })
        .collect();
    let edges: Vec<_> = edge_rows.into_iter().flatten().collect();
    let graph = AdjacencyGraph::new(&edges, n_users)?;
    Ok(Synthetic {
        ratings,
        graph,
        theta,
        phi,
        scales,
        thresholds,
    })
}

/// Posterior-mean rate `mean_s sum_k theta_uk phi_ik` for every
/// `(users[a], items[b])`.
pub fn predict_scores(states: &[OgfaState], users: &[usize], items: &[usize]) -> Result<DenseMatrix, ModelError> {
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

/// Sum of `log pmf(lambda_bar, y)` over the listed test cells, with the
/// thresholds of the last state.
pub fn heldout_loglik(test: &[(usize, usize, u32)], states: &[OgfaState]) -> Result<f64, ModelError> {
    let last = states.last().ok_or(ModelError::EmptyStateList)?;
    let n = states.len() as f64;
    let mut total = 0.0;
    for &(u, i, level) in test {
        let lambda = states.iter().map(|s| s.lambda(u, i)).sum::<f64>() / n;
        total += last.thresholds.log_lik(lambda, level)?;
    }
    Ok(total)
}
