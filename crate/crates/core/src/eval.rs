//! Top-N ranking metrics over held-out ratings.
//!
//! Candidates for a user are all items minus that user's training items.
//! An item counts as relevant at level `s` when its held-out level is at
//! least `s`; users without any relevant held-out item are skipped.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparse::OrdinalMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no user has a held-out item at level >= {s}")]
    NoEvaluableUsers { s: u32 },
    #[error("invalid evaluation config: {0}")]
    BadConfig(String),
    #[error("held-out triple ({user}, {item}) is outside the {n_users} x {n_items} matrix")]
    OutOfRange { user: usize, item: usize, n_users: usize, n_items: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Cutoff N.
    pub n: usize,
    pub s_levels: Vec<u32>,
    /// Use gains `2^y - 1` instead of binary relevance.
    pub graded: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n: 100,
            s_levels: vec![1],
            graded: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, levels: u32) -> Result<(), EvalError> {
        if self.n == 0 {
            return Err(EvalError::BadConfig("cutoff N must be at least 1".into()));
        }
        if self.s_levels.is_empty() {
            return Err(EvalError::BadConfig("no relevance levels given".into()));
        }
        if let Some(&s) = self.s_levels.iter().find(|&&s| s == 0 || s > levels) {
            return Err(EvalError::BadConfig(format!("relevance level {s} outside 1..={levels}")));
        }
        Ok(())
    }
}

/// Top-`n` items by descending score, skipping `exclude` (sorted ascending).
/// Ties go to the smaller item index.
pub fn rank_items(scores: &[f64], exclude: &[u32], n: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..scores.len())
        .filter(|&i| exclude.binary_search(&(i as u32)).is_err())
        .collect();
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if candidates.len() > n && n > 0 {
        candidates.select_nth_unstable_by(n - 1, order);
        candidates.truncate(n);
    }
    candidates.sort_unstable_by(order);
    candidates.truncate(n);
    candidates
}

/// Held-out ratings grouped by user.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldOut {
    by_user: Vec<Vec<(usize, u32)>>,
}

impl HeldOut {
    pub fn new(triples: &[(usize, usize, u32)], n_users: usize) -> Self {
        let mut by_user = vec![Vec::new(); n_users];
        for &(u, i, y) in triples {
            by_user[u].push((i, y));
        }
        for row in &mut by_user {
            row.sort_unstable();
        }
        HeldOut { by_user }
    }

    pub fn n_users(&self) -> usize {
        self.by_user.len()
    }

    pub fn user(&self, u: usize) -> &[(usize, u32)] {
        &self.by_user[u]
    }

    fn level(&self, u: usize, item: usize) -> u32 {
        let row = &self.by_user[u];
        row.binary_search_by_key(&item, |&(i, _)| i).map_or(0, |p| row[p].1)
    }

    pub fn is_evaluable(&self, u: usize, s: u32) -> bool {
        self.by_user[u].iter().any(|&(_, y)| y >= s)
    }
}

fn gain(level: u32, s: u32, graded: bool) -> f64 {
    if level < s {
        0.0
    } else if graded {
        (level as f64).exp2() - 1.0
    } else {
        1.0
    }
}

#[inline]
fn discount(position: usize) -> f64 {
    1.0 / ((position + 2) as f64).log2()
}

/// Hit indicator and NDCG of one ranked list, or `None` if the user has no
/// relevant held-out item.
pub fn user_metrics(ranked: &[usize], held: &HeldOut, u: usize, s: u32, n: usize, graded: bool) -> Option<(f64, f64)> {
    if !held.is_evaluable(u, s) {
        return None;
    }
    let top = &ranked[..ranked.len().min(n)];
    let mut dcg = 0.0;
    let mut hit = false;
    for (p, &item) in top.iter().enumerate() {
        let g = gain(held.level(u, item), s, graded);
        if g > 0.0 {
            hit = true;
            dcg += g * discount(p);
        }
    }
    let mut ideal: Vec<f64> = held.user(u).iter().map(|&(_, y)| gain(y, s, graded)).filter(|&g| g > 0.0).collect();
    ideal.sort_unstable_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().take(n).enumerate().map(|(p, g)| g * discount(p)).sum();
    Some((if hit { 1.0 } else { 0.0 }, dcg / idcg))
}

fn mean_over_users(ranked: &[Vec<usize>], held: &HeldOut, s: u32, n: usize, graded: bool) -> Result<(f64, f64, usize), EvalError> {
    let per_user: Vec<Option<(f64, f64)>> = (0..held.n_users())
        .into_par_iter()
        .map(|u| user_metrics(&ranked[u], held, u, s, n, graded))
        .collect();
    let (mut hr, mut ndcg, mut count) = (0.0, 0.0, 0usize);
    for (h, g) in per_user.into_iter().flatten() {
        hr += h;
        ndcg += g;
        count += 1;
    }
    if count == 0 {
        return Err(EvalError::NoEvaluableUsers { s });
    }
    Ok((hr / count as f64, ndcg / count as f64, count))
}

/// HR@N: fraction of evaluable users with a relevant item in their top N.
/// `ranked[u]` is user `u`'s ranked list.
pub fn hit_ratio(ranked: &[Vec<usize>], held: &HeldOut, s: u32, n: usize) -> Result<f64, EvalError> {
    mean_over_users(ranked, held, s, n, false).map(|m| m.0)
}

/// NDCG@N with binary relevance at level `s`.
pub fn ndcg(ranked: &[Vec<usize>], held: &HeldOut, s: u32, n: usize) -> Result<f64, EvalError> {
    mean_over_users(ranked, held, s, n, false).map(|m| m.1)
}

/// NDCG@N with gains `2^y - 1` for held-out levels `y >= s`.
pub fn ndcg_graded(ranked: &[Vec<usize>], held: &HeldOut, s: u32, n: usize) -> Result<f64, EvalError> {
    mean_over_users(ranked, held, s, n, true).map(|m| m.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub dataset: String,
    pub s: u32,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "HR")]
    pub hr: f64,
    #[serde(rename = "NDCG")]
    pub ndcg: f64,
    pub n_evaluable_users: usize,
}

/// Scores every user with held-out data, ranks once at the largest cutoff
/// and reports one row per relevance level.
///
/// `score(u, out)` must fill `out` (length I) with user `u`'s item scores.
pub fn evaluate<F>(
    score: F,
    train: &OrdinalMatrix,
    test: &[(usize, usize, u32)],
    config: &EvalConfig,
    model: &str,
    dataset: &str,
) -> Result<Vec<MetricRow>, EvalError>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    config.validate(train.max_level())?;
    let (n_users, n_items) = (train.n_users(), train.n_items());
    if let Some(&(user, item, _)) = test.iter().find(|&&(u, i, _)| u >= n_users || i >= n_items) {
        return Err(EvalError::OutOfRange { user, item, n_users, n_items });
    }
    let held = HeldOut::new(test, n_users);
    let ranked: Vec<Vec<usize>> = (0..n_users)
        .into_par_iter()
        .map_init(
            || vec![0.0; n_items],
            |buf, u| {
                if held.user(u).is_empty() {
                    return Vec::new();
                }
                score(u, buf);
                rank_items(buf, train.row_items(u), config.n)
            },
        )
        .collect();
    config
        .s_levels
        .iter()
        .map(|&s| {
            let (hr, ndcg, count) = mean_over_users(&ranked, &held, s, config.n, config.graded)?;
            Ok(MetricRow {
                model: model.to_string(),
                dataset: dataset.to_string(),
                s,
                n: config.n,
                hr,
                ndcg,
                n_evaluable_users: count,
            })
        })
        .collect()
}

pub fn write_csv<W: Write>(rows: &[MetricRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "model,dataset,s,N,HR,NDCG,n_evaluable_users")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{},{},{}", r.model, r.dataset, r.s, r.n, r.hr, r.ndcg, r.n_evaluable_users)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_items(&[0.1, 0.9, 0.5], &[], 2), vec![1, 2]);
        assert_eq!(rank_items(&[0.1, 0.9, 0.5], &[1], 2), vec![2, 0]);
        assert_eq!(rank_items(&[0.3; 5], &[], 5), vec![0, 1, 2, 3, 4]);
        assert_eq!(rank_items(&[0.3; 5], &[0, 2], 2), vec![1, 3]);
        assert_eq!(rank_items(&[1.0, 2.0], &[], 10), vec![1, 0]);
    }

    fn one_user(ranked: Vec<usize>, test: &[(usize, u32)], s: u32, n: usize) -> (f64, f64) {
        let triples: Vec<_> = test.iter().map(|&(i, y)| (0, i, y)).collect();
        let held = HeldOut::new(&triples, 1);
        let r = vec![ranked];
        (hit_ratio(&r, &held, s, n).unwrap(), ndcg(&r, &held, s, n).unwrap())
    }

    #[test]
    fn metric_examples() {
        assert_eq!(one_user(vec![4, 1, 2], &[(4, 3)], 1, 1), (1.0, 1.0));
        assert_eq!(one_user(vec![1, 2, 4], &[(4, 3)], 1, 2), (0.0, 0.0));
        let (_, g) = one_user(vec![1, 4, 2], &[(4, 1)], 1, 5);
        assert!((g - 0.630_929_753_571_457_4).abs() < 1e-12);
        assert!((g - 0.63093).abs() < 5e-6);
        let (_, g) = one_user(vec![7, 1, 8, 2], &[(7, 1), (8, 2)], 1, 5);
        assert!((g - 1.5 / (1.0 + 1.0 / 3f64.log2())).abs() < 1e-12);
        assert!((g - 0.919_72).abs() < 5e-6);

        let held = HeldOut::new(&[(0, 0, 2), (1, 1, 2)], 2);
        let ranked = vec![vec![0, 1], vec![0, 1]];
        assert_eq!(hit_ratio(&ranked, &held, 1, 1).unwrap(), 0.5);
        assert_eq!(hit_ratio(&ranked, &held, 3, 1), Err(EvalError::NoEvaluableUsers { s: 3 }));
    }

    #[test]
    fn graded_gains() {
        let held = HeldOut::new(&[(0, 0, 1), (0, 1, 3)], 1);
        let best = vec![vec![1, 0]];
        let worst = vec![vec![0, 1]];
        assert!((ndcg_graded(&best, &held, 1, 2).unwrap() - 1.0).abs() < 1e-15);
        let expected = (1.0 + 7.0 / 3f64.log2()) / (7.0 + 1.0 / 3f64.log2());
        assert!((ndcg_graded(&worst, &held, 1, 2).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let c = EvalConfig { n: 10, s_levels: vec![1, 6], graded: false };
        assert!(c.validate(5).is_err());
        assert!(c.validate(6).is_ok());
        assert!(EvalConfig { n: 0, ..EvalConfig::default() }.validate(5).is_err());
    }

    #[test]
    fn evaluate_excludes_training_items() {
        let train = OrdinalMatrix::new(&[(0, 0, 2)], 2, 3, 2).unwrap();
        let test = [(0, 1, 2), (1, 0, 1)];
        // item 0 scores highest for everyone but is a training item of user 0
        let rows = evaluate(
            |_, out: &mut [f64]| out.copy_from_slice(&[3.0, 2.0, 1.0]),
            &train,
            &test,
            &EvalConfig { n: 1, s_levels: vec![1, 2], graded: false },
            "m",
            "d",
        )
        .unwrap();
        assert_eq!(rows[0].hr, 1.0);
        assert_eq!(rows[0].n_evaluable_users, 2);
        assert_eq!(rows[1].n_evaluable_users, 1);
        let mut csv = Vec::new();
        write_csv(&rows, &mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("model,dataset,s,N,HR,NDCG,n_evaluable_users\nm,d,1,1,1,1,2\n"));
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_ideal_is_one(levels in proptest::collection::vec(0u32..4, 1..7), s in 1u32..4, n in 1usize..7) {
            let triples: Vec<_> = levels.iter().enumerate().filter(|(_, &y)| y > 0).map(|(i, &y)| (0, i, y)).collect();
            let held = HeldOut::new(&triples, 1);
            prop_assume!(held.is_evaluable(0, s));
            let mut best_ndcg: f64 = 0.0;
            for perm in permutations(levels.len()) {
                let (h, g) = user_metrics(&perm, &held, 0, s, n, false).unwrap();
                prop_assert!((0.0..=1.0 + 1e-12).contains(&g));
                prop_assert!(h == 0.0 || h == 1.0);
                best_ndcg = best_ndcg.max(g);
            }
            // relevant items first attains NDCG 1
            let mut ideal: Vec<usize> = (0..levels.len()).collect();
            ideal.sort_by_key(|&i| levels[i] < s);
            let (_, g) = user_metrics(&ideal, &held, 0, s, n, false).unwrap();
            prop_assert!((g - 1.0).abs() < 1e-12);
            prop_assert!((best_ndcg - 1.0).abs() < 1e-12);
        }
    }
}
