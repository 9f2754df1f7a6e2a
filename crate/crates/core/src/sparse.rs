//! Sparse storage for the ordinal rating matrix and the social graph.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SparseError {
    #[error("duplicate entry for ({user}, {item})")]
    DuplicateEntry { user: usize, item: usize },
    #[error("level {level} outside 1..={max}")]
    LevelOutOfRange { level: u32, max: u32 },
    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("adjacency power must be at least 1")]
    ZeroPower,
}

/// U x I matrix of ordinal levels; level 0 is represented by absence.
///
/// Row-compressed storage with a column-compressed mirror. `col_to_row[p]`
/// gives the row-storage position of the p-th column-storage entry so
/// per-nonzero arrays can be shared between the two traversals.
#[derive(Debug, Clone, PartialEq)]
pub struct OrdinalMatrix {
    n_users: usize,
    n_items: usize,
    max_level: u32,
    row_ptr: Vec<usize>,
    items: Vec<u32>,
    levels: Vec<u8>,
    col_ptr: Vec<usize>,
    users: Vec<u32>,
    col_to_row: Vec<usize>,
}

impl OrdinalMatrix {
    pub fn new(
        triples: &[(usize, usize, u32)],
        n_users: usize,
        n_items: usize,
        max_level: u32,
    ) -> Result<Self, SparseError> {
        if max_level == 0 || max_level > u8::MAX as u32 {
            return Err(SparseError::LevelOutOfRange {
                level: max_level,
                max: u8::MAX as u32,
            });
        }
        let mut sorted = Vec::with_capacity(triples.len());
        for &(u, i, level) in triples {
            if u >= n_users {
                return Err(SparseError::IndexOutOfRange { index: u, dim: n_users });
            }
            if i >= n_items {
                return Err(SparseError::IndexOutOfRange { index: i, dim: n_items });
            }
            if level == 0 || level > max_level {
                return Err(SparseError::LevelOutOfRange { level, max: max_level });
            }
            sorted.push((u as u32, i as u32, level as u8));
        }
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0 && w[0].1 == w[1].1) {
            return Err(SparseError::DuplicateEntry {
                user: w[0].0 as usize,
                item: w[0].1 as usize,
            });
        }

        let nnz = sorted.len();
        let mut row_ptr = vec![0usize; n_users + 1];
        let mut col_ptr = vec![0usize; n_items + 1];
        for &(u, i, _) in &sorted {
            row_ptr[u as usize + 1] += 1;
            col_ptr[i as usize + 1] += 1;
        }
        for u in 0..n_users {
            row_ptr[u + 1] += row_ptr[u];
        }
        for i in 0..n_items {
            col_ptr[i + 1] += col_ptr[i];
        }
        let items = sorted.iter().map(|t| t.1).collect();
        let levels = sorted.iter().map(|t| t.2).collect();

        let mut users = vec![0u32; nnz];
        let mut col_to_row = vec![0usize; nnz];
        let mut cursor = col_ptr.clone();
        for (pos, &(u, i, _)) in sorted.iter().enumerate() {
            let slot = &mut cursor[i as usize];
            users[*slot] = u;
            col_to_row[*slot] = pos;
            *slot += 1;
        }

        Ok(OrdinalMatrix {
            n_users,
            n_items,
            max_level,
            row_ptr,
            items,
            levels,
            col_ptr,
            users,
            col_to_row,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn max_level(&self) -> u32 {
        self.max_level
    }

    pub fn nnz(&self) -> usize {
        self.items.len()
    }

    /// Row-storage position range of user `u`.
    pub fn row_range(&self, u: usize) -> std::ops::Range<usize> {
        self.row_ptr[u]..self.row_ptr[u + 1]
    }

    /// `(item, level)` pairs of user `u`, ascending by item.
    pub fn row(&self, u: usize) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.row_range(u)
            .map(move |p| (self.items[p] as usize, u32::from(self.levels[p])))
    }

    /// `(user, level)` pairs of item `i`, ascending by user.
    pub fn col(&self, i: usize) -> impl Iterator<Item = (usize, u32)> + '_ {
        (self.col_ptr[i]..self.col_ptr[i + 1]).map(move |q| {
            let p = self.col_to_row[q];
            (self.users[q] as usize, u32::from(self.levels[p]))
        })
    }

    /// `(user, row-storage position)` pairs of item `i`.
    pub fn col_positions(&self, i: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.col_ptr[i]..self.col_ptr[i + 1]).map(move |q| (self.users[q] as usize, self.col_to_row[q]))
    }

    /// Item and level stored at row-storage position `p`.
    #[inline]
    pub fn entry(&self, p: usize) -> (usize, u32) {
        (self.items[p] as usize, u32::from(self.levels[p]))
    }

    /// All nonzeros as `(user, item, level)`, ascending by (user, item).
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        (0..self.n_users).flat_map(move |u| self.row(u).map(move |(i, l)| (u, i, l)))
    }

    /// Level at (u, i); 0 when absent.
    pub fn get(&self, u: usize, i: usize) -> u32 {
        let range = self.row_range(u);
        match self.items[range.clone()].binary_search(&(i as u32)) {
            Ok(off) => u32::from(self.levels[range.start + off]),
            Err(_) => 0,
        }
    }

    /// Sorted item indices rated by `u`.
    pub fn row_items(&self, u: usize) -> &[u32] {
        &self.items[self.row_range(u)]
    }

    pub fn triples(&self) -> Vec<(usize, usize, u32)> {
        self.iter().collect()
    }
}

/// Symmetric binary U x U graph without self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyGraph {
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
}

impl AdjacencyGraph {
    /// Symmetrizes and deduplicates `edges`; self-loops are dropped.
    pub fn new(edges: &[(usize, usize)], n_users: usize) -> Result<Self, SparseError> {
        let mut lists = vec![Vec::new(); n_users];
        for &(u, v) in edges {
            for x in [u, v] {
                if x >= n_users {
                    return Err(SparseError::IndexOutOfRange { index: x, dim: n_users });
                }
            }
            if u != v {
                lists[u].push(v as u32);
                lists[v].push(u as u32);
            }
        }
        Ok(Self::from_lists(lists))
    }

    fn from_lists(mut lists: Vec<Vec<u32>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let mut neighbors = Vec::new();
        for list in lists.iter_mut() {
            list.sort_unstable();
            list.dedup();
            neighbors.extend_from_slice(list);
            offsets.push(neighbors.len());
        }
        AdjacencyGraph { offsets, neighbors }
    }

    pub fn empty(n_users: usize) -> Self {
        AdjacencyGraph {
            offsets: vec![0; n_users + 1],
            neighbors: Vec::new(),
        }
    }

    pub fn n_users(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of unordered edges.
    pub fn n_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn neighbors(&self, u: usize) -> &[u32] {
        &self.neighbors[self.offsets[u]..self.offsets[u + 1]]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&(v as u32)).is_ok()
    }

    /// Unordered edges `(u, v)` with `u < v`, ascending.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_users()).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .filter(move |&&v| (v as usize) > u)
                .map(move |&v| (u, v as usize))
        })
    }

    /// Binarized t-th power: `(u, v)` is an edge iff `u != v` and some walk of
    /// length exactly `t` joins them.
    pub fn power(&self, t: u32) -> Result<AdjacencyGraph, SparseError> {
        if t == 0 {
            return Err(SparseError::ZeroPower);
        }
        if t == 1 {
            return Ok(self.clone());
        }
        let n = self.n_users();
        // walk reachability keeps the diagonal; it is dropped only at the end
        let mut reach: Vec<Vec<u32>> = (0..n).map(|u| self.neighbors(u).to_vec()).collect();
        let mut stamp = vec![u32::MAX; n];
        for _ in 1..t {
            reach = reach
                .iter()
                .enumerate()
                .map(|(u, row)| {
                    let mark = u as u32;
                    let mut next = Vec::new();
                    for &w in row {
                        for &x in self.neighbors(w as usize) {
                            if stamp[x as usize] != mark {
                                stamp[x as usize] = mark;
                                next.push(x);
                            }
                        }
                    }
                    next.sort_unstable();
                    next
                })
                .collect();
            stamp.iter_mut().for_each(|s| *s = u32::MAX);
        }
        for (u, row) in reach.iter_mut().enumerate() {
            row.retain(|&v| v as usize != u);
        }
        Ok(Self::from_lists(reach))
    }
}

/// Binarized power of `graph` with zeroed diagonal.
pub fn adjacency_power(graph: &AdjacencyGraph, t: u32) -> Result<AdjacencyGraph, SparseError> {
    graph.power(t)
}
