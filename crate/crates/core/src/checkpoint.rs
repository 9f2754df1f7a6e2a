//! On-disk model checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` and one binary file
//! per matrix. Binary matrices are the ASCII magic `OGM1`, the row and column
//! counts as little-endian u64, then the row-major payload as little-endian
//! f64. Vectors are stored as single-row matrices.
//!
//! ```text
//! manifest.json
//! last/    L{t}_theta.bin L{t}_phi.bin L{t}_scales.bin L{t}_c.bin r.bin
//! mean/    same layout, running posterior means
//! states/000/ ...   every collected state, when requested
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::DenseMatrix;
use crate::ogfa::Hyper;
use crate::oggbn::{DeepState, LayerState};
use crate::ordinal::ThresholdModel;

const MAGIC: &[u8; 4] = b"OGM1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("no checkpoint at {0}")]
    Missing(PathBuf),
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn write_matrix(path: &Path, m: &DenseMatrix) -> Result<(), CheckpointError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut write = || -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&(m.rows() as u64).to_le_bytes())?;
        out.write_all(&(m.cols() as u64).to_le_bytes())?;
        for x in m.iter() {
            out.write_all(&x.to_le_bytes())?;
        }
        out.flush()
    };
    write().map_err(io_err(path))
}

pub fn read_matrix(path: &Path) -> Result<DenseMatrix, CheckpointError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io_err(path))?)
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(format_err(path, "missing OGM1 header"));
    }
    let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
    let (rows, cols) = (word(4) as usize, word(12) as usize);
    let payload = &bytes[20..];
    if rows.checked_mul(cols).and_then(|n| n.checked_mul(8)) != Some(payload.len()) {
        return Err(format_err(path, format!("payload of {} bytes does not fit {rows} x {cols}", payload.len())));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(DenseMatrix::from_vec(rows, cols, data))
}

fn write_vector(path: &Path, v: &[f64]) -> Result<(), CheckpointError> {
    write_matrix(path, &DenseMatrix::from_vec(1, v.len(), v.to_vec()))
}

fn read_vector(path: &Path, len: usize) -> Result<Vec<f64>, CheckpointError> {
    let m = read_matrix(path)?;
    if m.shape() != (1, len) {
        return Err(format_err(path, format!("expected a vector of length {len}, found {:?}", m.shape())));
    }
    Ok(m.as_slice().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ogfa,
    Oggbn,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Ogfa => "ogfa",
            ModelKind::Oggbn => "oggbn",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ogfa" => Ok(ModelKind::Ogfa),
            "oggbn" => Ok(ModelKind::Oggbn),
            other => Err(format!("unknown model kind `{other}`, expected ogfa or oggbn")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub width: usize,
    /// Rows of this layer's loading matrix.
    pub loading_rows: usize,
    pub theta: String,
    pub phi: String,
    pub scales: String,
    pub c_user: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelKind,
    pub n_users: usize,
    pub n_items: usize,
    pub widths: Vec<usize>,
    pub levels: u32,
    pub hyper: Hyper,
    /// Sweeps completed at the last stored state.
    pub sweep: u64,
    /// Threshold gaps of the last state.
    pub deltas: Vec<f64>,
    /// Posterior-mean threshold gaps, when a mean is stored.
    pub mean_deltas: Option<Vec<f64>>,
    /// Number of states averaged into `mean/`.
    pub collected: usize,
    /// Number of states under `states/`.
    pub stored_states: usize,
    pub layers: Vec<LayerManifest>,
}

fn layer_files(t: usize, state: &LayerState) -> LayerManifest {
    let l = t + 1;
    LayerManifest {
        width: state.width(),
        loading_rows: state.phi.rows(),
        theta: format!("L{l}_theta.bin"),
        phi: format!("L{l}_phi.bin"),
        scales: format!("L{l}_scales.bin"),
        c_user: format!("L{l}_c.bin"),
    }
}

fn write_state(dir: &Path, state: &DeepState) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (t, layer) in state.layers.iter().enumerate() {
        let files = layer_files(t, layer);
        write_matrix(&dir.join(&files.theta), &layer.theta)?;
        write_matrix(&dir.join(&files.phi), &layer.phi)?;
        write_vector(&dir.join(&files.scales), &layer.scales)?;
        write_vector(&dir.join(&files.c_user), &layer.c_user)?;
    }
    write_vector(&dir.join("r.bin"), &state.r)
}

fn read_state(dir: &Path, manifest: &Manifest, deltas: &[f64], sweep: u64) -> Result<DeepState, CheckpointError> {
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for lm in &manifest.layers {
        let theta = read_matrix(&dir.join(&lm.theta))?;
        let phi = read_matrix(&dir.join(&lm.phi))?;
        if theta.shape() != (manifest.n_users, lm.width) || phi.shape() != (lm.loading_rows, lm.width) {
            return Err(format_err(dir, "matrix shapes disagree with manifest"));
        }
        layers.push(LayerState {
            theta,
            phi,
            scales: read_vector(&dir.join(&lm.scales), lm.width)?,
            c_user: read_vector(&dir.join(&lm.c_user), manifest.n_users)?,
        });
    }
    let top = manifest.widths.last().copied().unwrap_or(0);
    let thresholds = ThresholdModel::from_deltas(deltas).map_err(|e| format_err(dir, e.to_string()))?;
    Ok(DeepState {
        layers,
        r: read_vector(&dir.join("r.bin"), top)?,
        thresholds,
        hyper: manifest.hyper,
        sweep,
    })
}

/// Everything a checkpoint directory holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub last: DeepState,
    pub mean: Option<DeepState>,
    pub states: Vec<DeepState>,
}

impl Checkpoint {
    /// State used for scoring: the posterior mean when present.
    pub fn scoring_state(&self) -> &DeepState {
        self.mean.as_ref().unwrap_or(&self.last)
    }
}

/// Writes a checkpoint. `mean` pairs the mean state with the number of
/// states it averages.
pub fn save(
    dir: &Path,
    model: ModelKind,
    last: &DeepState,
    mean: Option<(&DeepState, usize)>,
    states: &[DeepState],
) -> Result<Manifest, CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model,
        n_users: last.n_users(),
        n_items: last.n_items(),
        widths: last.widths(),
        levels: last.thresholds.levels(),
        hyper: last.hyper,
        sweep: last.sweep,
        deltas: last.thresholds.deltas().to_vec(),
        mean_deltas: mean.map(|(m, _)| m.thresholds.deltas().to_vec()),
        collected: mean.map_or(0, |(_, n)| n),
        stored_states: states.len(),
        layers: last.layers.iter().enumerate().map(|(t, l)| layer_files(t, l)).collect(),
    };
    write_state(&dir.join("last"), last)?;
    if let Some((m, _)) = mean {
        write_state(&dir.join("mean"), m)?;
    }
    for (n, s) in states.iter().enumerate() {
        let sub = dir.join("states").join(format!("{n:03}"));
        write_state(&sub, s)?;
        let deltas = serde_json::to_vec(&(s.sweep, s.thresholds.deltas())).expect("serializable");
        fs::write(sub.join("meta.json"), deltas).map_err(io_err(&sub))?;
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("serializable");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<Checkpoint, CheckpointError> {
    let path = dir.join("manifest.json");
    if !path.is_file() {
        return Err(CheckpointError::Missing(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| CheckpointError::Json { path: path.clone(), source })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(format_err(&path, format!("unsupported format version {}", manifest.format_version)));
    }
    if manifest.layers.len() != manifest.widths.len() || manifest.layers.is_empty() {
        return Err(format_err(&path, "layer sections disagree with widths"));
    }
    let last = read_state(&dir.join("last"), &manifest, &manifest.deltas, manifest.sweep)?;
    let mean = match &manifest.mean_deltas {
        Some(d) => Some(read_state(&dir.join("mean"), &manifest, d, manifest.sweep)?),
        None => None,
    };
    let mut states = Vec::with_capacity(manifest.stored_states);
    for n in 0..manifest.stored_states {
        let sub = dir.join("states").join(format!("{n:03}"));
        let meta_path = sub.join("meta.json");
        let meta = fs::read(&meta_path).map_err(io_err(&meta_path))?;
        let (sweep, deltas): (u64, Vec<f64>) =
            serde_json::from_slice(&meta).map_err(|source| CheckpointError::Json { path: meta_path.clone(), source })?;
        states.push(read_state(&sub, &manifest, &deltas, sweep)?);
    }
    Ok(Checkpoint {
        manifest,
        last,
        mean,
        states,
    })
}
