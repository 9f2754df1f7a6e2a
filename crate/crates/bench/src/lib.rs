//! Random workloads shared by the benchmarks.

use ordgraph::{AdjacencyGraph, OrdinalMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Ratings with about `per_user` items per user, levels uniform on 1..=5, and
/// a random graph of mean degree about `degree`.
pub fn workload(n_users: usize, n_items: usize, per_user: usize, degree: usize, seed: u64) -> (OrdinalMatrix, AdjacencyGraph) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut triples = Vec::with_capacity(n_users * per_user);
    for u in 0..n_users {
        let mut items: Vec<usize> = (0..per_user).map(|_| r.random_range(0..n_items)).collect();
        items.sort_unstable();
        items.dedup();
        triples.extend(items.into_iter().map(|i| (u, i, r.random_range(1..=5u32))));
    }
    let edges: Vec<(usize, usize)> = (0..n_users * degree / 2)
        .map(|_| (r.random_range(0..n_users), r.random_range(0..n_users)))
        .collect();
    (
        OrdinalMatrix::new(&triples, n_users, n_items, 5).expect("valid triples"),
        AdjacencyGraph::new(&edges, n_users).expect("valid edges"),
    )
}
