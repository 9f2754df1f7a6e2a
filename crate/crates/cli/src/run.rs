//! Layout of a run directory and loading it back.
//!
//! ```text
//! <run>/config.toml        resolved configuration
//! <run>/model/             checkpoint (manifest.json, last/, mean/, states/)
//! <run>/data/              users.txt, items.txt, train.tsv, test.tsv, edges.tsv, dataset.json
//! <run>/train_log.tsv      per-sweep held-out log likelihood and threshold gaps
//! <run>/timings.tsv        wall-clock per sweep phase
//! <run>/thresholds.json    final threshold gaps
//! ```

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use ordgraph::checkpoint::{self, Checkpoint};
use ordgraph::dataio::{load_test_ratings, IdMap};
use ordgraph::OrdinalMatrix;

use crate::config::RunConfig;
use crate::error::{Classify, CliResult};

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn data(&self, file: &str) -> PathBuf {
        self.root.join("data").join(file)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// A trained run: checkpoint, id maps and the training matrix.
pub struct LoadedRun {
    pub dir: RunDir,
    pub config: RunConfig,
    pub checkpoint: Checkpoint,
    pub users: IdMap,
    pub items: IdMap,
    pub train: OrdinalMatrix,
}

impl LoadedRun {
    pub fn open(root: &Path) -> CliResult<Self> {
        let dir = RunDir::new(root);
        let checkpoint = checkpoint::load(&dir.model())
            .with_context(|| format!("no usable checkpoint in {}", root.display()))
            .data()?;
        let config_path = dir.file("config.toml");
        let config = std::fs::read_to_string(&config_path)
            .map_err(anyhow::Error::from)
            .and_then(|t| RunConfig::parse(&t))
            .with_context(|| format!("reading {}", config_path.display()))
            .data()?;
        let users = IdMap::read(&dir.data("users.txt")).data()?;
        let items = IdMap::read(&dir.data("items.txt")).data()?;
        let m = &checkpoint.manifest;
        if users.len() != m.n_users || items.len() != m.n_items {
            return Err(anyhow!(
                "id maps ({} users, {} items) disagree with the checkpoint ({} x {})",
                users.len(),
                items.len(),
                m.n_users,
                m.n_items
            ))
            .data();
        }
        let triples = load_test_ratings(&dir.data("train.tsv"), m.levels, &users, &items).data()?;
        let train = OrdinalMatrix::new(&triples, users.len(), items.len(), m.levels).data()?;
        Ok(LoadedRun {
            dir,
            config,
            checkpoint,
            users,
            items,
            train,
        })
    }

    pub fn levels(&self) -> u32 {
        self.checkpoint.manifest.levels
    }
}
