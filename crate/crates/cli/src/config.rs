//! Run configuration: a TOML file with one section per concern. Keys left
//! out take their defaults, and command-line flags override both.
//!
//! ```toml
//! [data]
//! ratings = "ratings.tsv"   # user<TAB>item<TAB>value
//! edges = "trust.tsv"       # optional user<TAB>user
//! values = "levels"         # or "counts", quantized by `bins`
//! levels = 5
//!
//! [model]
//! kind = "oggbn"
//! widths = [150, 80, 40]
//!
//! [sampler]
//! sweeps = 1000
//! burn_in = 500
//! stride = 10
//! seed = 1
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ordgraph::checkpoint::ModelKind;
use ordgraph::dataio::{validate_bins, ValueMap, DEFAULT_BINS};
use ordgraph::eval::EvalConfig;
use ordgraph::Hyper;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    /// Values are ordinal levels `1..=levels`.
    Levels,
    /// Values are positive counts quantized by `bins`.
    Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub ratings: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    /// Held-out ratings; when absent the ratings are split.
    pub test: Option<PathBuf>,
    pub name: String,
    pub values: ValueKind,
    pub levels: u32,
    pub bins: Vec<u64>,
    /// Cosine threshold for building a graph when no edge file is given.
    pub epsilon: Option<f64>,
    pub split_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            ratings: None,
            edges: None,
            test: None,
            name: "dataset".into(),
            values: ValueKind::Levels,
            levels: 5,
            bins: DEFAULT_BINS.to_vec(),
            epsilon: None,
            split_ratio: 0.8,
        }
    }
}

impl DataConfig {
    pub fn value_map(&self) -> ValueMap {
        match self.values {
            ValueKind::Levels => ValueMap::Identity { levels: self.levels },
            ValueKind::Counts => ValueMap::Bins(self.bins.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Layer widths, bottom layer first.
    pub widths: Vec<usize>,
    /// Initial threshold gaps; uniform `1/V` when absent.
    pub threshold_init: Option<Vec<f64>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Ogfa,
            widths: vec![100],
            threshold_init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub sweeps: u64,
    pub burn_in: u64,
    /// Sweeps between collected states after burn-in.
    pub stride: u64,
    pub seed: u64,
    /// Worker threads; 0 picks the number of cores.
    pub workers: usize,
    pub learn_thresholds: bool,
    pub resample_hyper: bool,
    pub correct_loadings: bool,
    /// Log the held-out log likelihood after every sweep.
    pub heldout_loglik: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            sweeps: 1000,
            burn_in: 500,
            stride: 10,
            seed: 1,
            workers: 0,
            learn_thresholds: true,
            resample_hyper: true,
            correct_loadings: true,
            heldout_loglik: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    /// Keep every collected state, not only the mean and the last one.
    pub store_all_states: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub hyper: Hyper,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads a config file; relative data paths are taken relative to it.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config = Self::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut config.data.ratings,
            &mut config.data.edges,
            &mut config.data.test,
            &mut config.output.dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        ensure!(d.ratings.is_some(), "no ratings file given");
        match d.values {
            ValueKind::Levels => ensure!(d.levels >= 1, "levels must be at least 1"),
            ValueKind::Counts => validate_bins(&d.bins)?,
        }
        ensure!(
            d.split_ratio > 0.0 && d.split_ratio < 1.0,
            "split_ratio must lie in (0, 1), got {}",
            d.split_ratio
        );
        if let Some(eps) = d.epsilon {
            ensure!(eps > 0.0 && eps < 1.0, "epsilon must lie in (0, 1), got {eps}");
        }

        let m = &self.model;
        ensure!(!m.widths.is_empty(), "model.widths is empty");
        ensure!(m.widths.iter().all(|&k| k > 0), "layer widths must be positive");
        if m.kind == ModelKind::Ogfa && m.widths.len() != 1 {
            bail!("kind = \"ogfa\" takes one layer width, got {:?}", m.widths);
        }
        let levels = self.levels();
        if let Some(init) = &m.threshold_init {
            ensure!(
                init.len() == levels as usize,
                "threshold_init has {} gaps for {levels} levels",
                init.len()
            );
            ensure!(init.iter().all(|&x| x > 0.0 && x.is_finite()), "threshold gaps must be positive");
        }

        let s = &self.sampler;
        ensure!(s.sweeps >= 1, "sweeps must be at least 1");
        ensure!(s.stride >= 1, "stride must be at least 1");
        ensure!(
            s.burn_in < s.sweeps,
            "burn_in ({}) leaves no sweeps to collect out of {}",
            s.burn_in,
            s.sweeps
        );
        self.hyper.validate()?;
        self.eval.validate(levels)?;
        Ok(())
    }

    pub fn levels(&self) -> u32 {
        self.data.value_map().levels()
    }

    /// Sweeps after burn-in whose states enter the posterior mean.
    pub fn collected(&self) -> u64 {
        let s = &self.sampler;
        (s.sweeps - s.burn_in) / s.stride
    }

    pub fn is_collected(&self, sweep: u64) -> bool {
        let s = &self.sampler;
        sweep > s.burn_in && (sweep - s.burn_in).is_multiple_of(s.stride)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_keys() {
        let c = RunConfig::parse("[data]\nratings = \"r.tsv\"\n").unwrap();
        assert_eq!(c.data.levels, 5);
        assert_eq!(c.model.widths, vec![100]);
        assert_eq!(c.collected(), 50);
        c.validate().unwrap();
    }

    #[test]
    fn round_trip_is_identity() {
        let text = r#"
            [data]
            ratings = "plays.tsv.gz"
            values = "counts"
            bins = [1, 3, 10]
            epsilon = 0.35
            [model]
            kind = "oggbn"
            widths = [150, 80, 40]
            threshold_init = [0.1, 0.2, 0.30000000000000004]
            [sampler]
            sweeps = 20
            burn_in = 10
            stride = 2
            seed = 99
            [hyper]
            eta = 0.01
            c0 = 0.1
            [eval]
            n = 50
            s_levels = [1, 3]
        "#;
        let c = RunConfig::parse(text).unwrap();
        c.validate().unwrap();
        let again = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_toml(), c.to_toml());
    }

    #[test]
    fn rejects_bad_values() {
        let base = "[data]\nratings = \"r.tsv\"\n";
        let bad = [
            "[model]\nkind = \"ogfa\"\nwidths = [3, 2]\n",
            "[sampler]\nsweeps = 10\nburn_in = 10\n",
            "[eval]\ns_levels = [6]\n",
            "[model]\nthreshold_init = [0.5]\n",
            "[data]\nsplit_ratio = 1.0\n",
        ];
        for extra in bad {
            let text = if extra.starts_with("[data]") {
                format!("[data]\nratings = \"r.tsv\"\n{}", &extra[7..])
            } else {
                format!("{base}{extra}")
            };
            let c = RunConfig::parse(&text).unwrap();
            assert!(c.validate().is_err(), "{text}");
        }
        assert!(RunConfig::parse("[model]\nwidth = 3\n").is_err());
    }
}
