//! Dataset ingestion: TSV ratings and edges, play-count quantization,
//! train/test splitting and cosine-similarity graphs.
//!
//! Files ending in `.gz` are decompressed transparently.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{Phase, RngStream};
use crate::sparse::{AdjacencyGraph, OrdinalMatrix, SparseError};

pub const DEFAULT_BINS: [u64; 4] = [1, 2, 6, 51];
pub const EPSILON_RATINGS: f64 = 0.45;
pub const EPSILON_PLAYS: f64 = 0.35;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: value {value} outside 1..={max}")]
    ValueOutOfRange { path: PathBuf, line: usize, value: u64, max: u32 },
    #[error("count must be positive")]
    NonPositiveCount,
    #[error("bins must start at 1 and increase strictly, got {0:?}")]
    BadBins(Vec<u64>),
    #[error("split ratio must lie in (0, 1), got {0}")]
    BadRatio(f64),
    #[error("cosine threshold must lie in (0, 1), got {0}")]
    BadEpsilon(f64),
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn open_reader(path: &Path) -> Result<Box<dyn BufRead>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let inner: Box<dyn Read> = if is_gz(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    Ok(Box::new(BufReader::new(inner)))
}

pub fn create_writer(path: &Path) -> Result<Box<dyn Write>, DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let buffered = BufWriter::new(file);
    Ok(if is_gz(path) {
        Box::new(GzEncoder::new(buffered, Compression::default()))
    } else {
        Box::new(buffered)
    })
}

/// Bidirectional map between external ids and dense indices, in order of
/// first appearance.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct IdMap {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for IdMap {
    fn from(names: Vec<String>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        IdMap { names, index }
    }
}

impl From<IdMap> for Vec<String> {
    fn from(m: IdMap) -> Self {
        m.names
    }
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Dense ids `"0", "1", ...`.
    pub fn sequential(n: usize) -> Self {
        (0..n).map(|i| i.to_string()).collect::<Vec<_>>().into()
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// One id per line.
    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut out = create_writer(path)?;
        for n in &self.names {
            writeln!(out, "{n}").map_err(io_err(path))?;
        }
        out.flush().map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let mut names = Vec::new();
        for line in open_reader(path)?.lines() {
            names.push(line.map_err(io_err(path))?);
        }
        Ok(names.into())
    }
}

/// How raw values become ordinal levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ValueMap {
    /// Values are already levels in `1..=V`.
    Identity { levels: u32 },
    /// Values are counts quantized by bin edges.
    Bins(Vec<u64>),
}

impl ValueMap {
    pub fn levels(&self) -> u32 {
        match self {
            ValueMap::Identity { levels } => *levels,
            ValueMap::Bins(b) => b.len() as u32,
        }
    }
}

fn split_line<'a>(line: &'a str, path: &Path, lineno: usize, fields: usize) -> Result<Vec<&'a str>, DataError> {
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != fields || parts.iter().any(|p| p.is_empty()) {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg: format!("expected {fields} tab-separated fields"),
        });
    }
    Ok(parts)
}

fn lines_of(path: &Path) -> Result<impl Iterator<Item = (usize, Result<String, DataError>)> + '_, DataError> {
    let reader = open_reader(path)?;
    Ok(reader
        .lines()
        .enumerate()
        .map(move |(i, l)| (i + 1, l.map_err(io_err(path))))
        .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty())))
}

/// Reads `user<TAB>item<TAB>value` lines, interning ids into the maps.
pub fn load_ratings(
    path: &Path,
    map: &ValueMap,
    users: &mut IdMap,
    items: &mut IdMap,
) -> Result<Vec<(usize, usize, u32)>, DataError> {
    if let ValueMap::Bins(b) = map {
        validate_bins(b)?;
    }
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (lineno, line) in lines_of(path)? {
        let line = line?;
        let parts = split_line(line.trim_end_matches('\r'), path, lineno, 3)?;
        let value: u64 = parts[2].trim().parse().map_err(|_| DataError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg: format!("`{}` is not a non-negative integer", parts[2]),
        })?;
        let level = match map {
            ValueMap::Identity { levels } => {
                if value == 0 || value > u64::from(*levels) {
                    return Err(DataError::ValueOutOfRange {
                        path: path.to_path_buf(),
                        line: lineno,
                        value,
                        max: *levels,
                    });
                }
                value as u32
            }
            ValueMap::Bins(b) => quantize_counts(value, b).map_err(|_| DataError::ValueOutOfRange {
                path: path.to_path_buf(),
                line: lineno,
                value,
                max: u32::MAX,
            })?,
        };
        let u = users.intern(parts[0]);
        let i = items.intern(parts[1]);
        if let Some(first) = seen.insert((u, i), lineno) {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("duplicate of line {first}"),
            });
        }
        out.push((u, i, level));
    }
    Ok(out)
}

/// Reads `user<TAB>user` lines. Unknown users are added to the map.
pub fn load_edges(path: &Path, users: &mut IdMap) -> Result<Vec<(usize, usize)>, DataError> {
    let mut out = Vec::new();
    for (lineno, line) in lines_of(path)? {
        let line = line?;
        let parts = split_line(line.trim_end_matches('\r'), path, lineno, 2)?;
        out.push((users.intern(parts[0]), users.intern(parts[1])));
    }
    Ok(out)
}

pub fn validate_bins(bins: &[u64]) -> Result<(), DataError> {
    if bins.first() != Some(&1) || bins.windows(2).any(|w| w[0] >= w[1]) || bins.len() > u8::MAX as usize {
        return Err(DataError::BadBins(bins.to_vec()));
    }
    Ok(())
}

/// Level `l` such that `bins[l-1] <= count < bins[l]`.
pub fn quantize_counts(count: u64, bins: &[u64]) -> Result<u32, DataError> {
    validate_bins(bins)?;
    if count == 0 {
        return Err(DataError::NonPositiveCount);
    }
    Ok(bins.partition_point(|&b| b <= count) as u32)
}

/// Uniform random split of triples into train and test, with
/// `round(ratio * n)` training triples.
pub fn split<T: Clone>(triples: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::BadRatio(ratio));
    }
    let mut order: Vec<usize> = (0..triples.len()).collect();
    order.shuffle(&mut RngStream::new(seed).for_key(Phase::Split, 0, 0, 0));
    let n_train = (ratio * triples.len() as f64).round() as usize;
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((
        train_idx.into_iter().map(|i| triples[i].clone()).collect(),
        test_idx.into_iter().map(|i| triples[i].clone()).collect(),
    ))
}

/// Links users whose value-weighted rating vectors have cosine similarity
/// above `eps`.
///
/// Work is driven by the item index, so cost is proportional to the number
/// of co-rating pairs rather than `U^2`.
pub fn cosine_graph(y: &OrdinalMatrix, eps: f64) -> Result<AdjacencyGraph, DataError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(DataError::BadEpsilon(eps));
    }
    let n = y.n_users();
    let norms: Vec<f64> = (0..n)
        .map(|u| y.row(u).map(|(_, v)| f64::from(v * v)).sum::<f64>().sqrt())
        .collect();
    let edges: Vec<(usize, usize)> = (0..n)
        .into_par_iter()
        .map_init(
            || (vec![0.0f64; n], Vec::<usize>::new()),
            |(acc, touched), u| {
                for (i, yu) in y.row(u) {
                    for (v, yv) in y.col(i) {
                        if v > u {
                            if acc[v] == 0.0 {
                                touched.push(v);
                            }
                            acc[v] += f64::from(yu * yv);
                        }
                    }
                }
                let mut found = Vec::new();
                for &v in touched.iter() {
                    if acc[v] / (norms[u] * norms[v]) > eps {
                        found.push((u, v));
                    }
                    acc[v] = 0.0;
                }
                touched.clear();
                found
            },
        )
        .flatten_iter()
        .collect();
    Ok(AdjacencyGraph::new(&edges, n)?)
}

/// Summary written next to a prepared dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub levels: u32,
    pub bins: Option<Vec<u64>>,
    pub epsilon: Option<f64>,
    pub seed: u64,
    pub split_ratio: f64,
    pub n_users: usize,
    pub n_items: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_edges: usize,
}

/// Training matrix, held-out triples, optional graph and id maps.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: OrdinalMatrix,
    pub test: Vec<(usize, usize, u32)>,
    pub graph: Option<AdjacencyGraph>,
    pub users: IdMap,
    pub items: IdMap,
}

impl Dataset {
    /// Assembles a dataset, splitting `ratings` when no test set is given.
    /// Users known only from `edges` get empty rating rows.
    pub fn assemble(
        ratings: Vec<(usize, usize, u32)>,
        test: Option<Vec<(usize, usize, u32)>>,
        edges: Option<Vec<(usize, usize)>>,
        users: IdMap,
        items: IdMap,
        levels: u32,
        ratio: f64,
        seed: u64,
    ) -> Result<Self, DataError> {
        let (train, test) = match test {
            Some(t) => (ratings, t),
            None => split(&ratings, ratio, seed)?,
        };
        let (n_users, n_items) = (users.len(), items.len());
        let train = OrdinalMatrix::new(&train, n_users, n_items, levels)?;
        let graph = edges.map(|e| AdjacencyGraph::new(&e, n_users)).transpose()?;
        Ok(Dataset {
            train,
            test,
            graph,
            users,
            items,
        })
    }

    pub fn manifest(&self, bins: Option<Vec<u64>>, epsilon: Option<f64>, seed: u64, ratio: f64) -> DatasetManifest {
        DatasetManifest {
            levels: self.train.max_level(),
            bins,
            epsilon,
            seed,
            split_ratio: ratio,
            n_users: self.users.len(),
            n_items: self.items.len(),
            n_train: self.train.nnz(),
            n_test: self.test.len(),
            n_edges: self.graph.as_ref().map_or(0, AdjacencyGraph::n_edges),
        }
    }
}

pub fn write_ratings(path: &Path, triples: &[(usize, usize, u32)], users: &IdMap, items: &IdMap) -> Result<(), DataError> {
    let mut out = create_writer(path)?;
    for &(u, i, y) in triples {
        writeln!(out, "{}\t{}\t{}", users.name(u), items.name(i), y).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn write_edges(path: &Path, graph: &AdjacencyGraph, users: &IdMap) -> Result<(), DataError> {
    let mut out = create_writer(path)?;
    for (u, v) in graph.edges() {
        writeln!(out, "{}\t{}", users.name(u), users.name(v)).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Reads held-out triples against existing maps; rows naming unknown ids are
/// reported as parse errors.
pub fn load_test_ratings(path: &Path, levels: u32, users: &IdMap, items: &IdMap) -> Result<Vec<(usize, usize, u32)>, DataError> {
    let mut u2 = users.clone();
    let mut i2 = items.clone();
    let triples = load_ratings(path, &ValueMap::Identity { levels }, &mut u2, &mut i2)?;
    if u2.len() != users.len() || i2.len() != items.len() {
        let unknown = u2.names()[users.len()..]
            .iter()
            .chain(&i2.names()[items.len()..])
            .next()
            .cloned()
            .unwrap_or_default();
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("unknown id `{unknown}`"),
        });
    }
    Ok(triples)
}
