use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::Args;
use ordgraph::checkpoint::{self, ModelKind};
use ordgraph::dataio::{self, cosine_graph, load_edges, load_ratings, Dataset, IdMap};
use ordgraph::oggbn::{build_layer_graphs, heldout_loglik_deep};
use ordgraph::posterior::PosteriorMean;
use ordgraph::{deep_sweep, AdjacencyGraph, DeepState, RngStream, SamplerOptions, ThresholdModel, UserKeys};
use serde::Serialize;

use crate::config::{RunConfig, ValueKind};
use crate::error::{Classify, CliResult};
use crate::run::RunDir;

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Ratings TSV: user, item, value.
    #[arg(long)]
    pub ratings: Option<PathBuf>,
    /// Social edges TSV: user, user.
    #[arg(long)]
    pub edges: Option<PathBuf>,
    /// Held-out ratings TSV; the ratings are split when absent.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Dataset label used in metric files.
    #[arg(long)]
    pub name: Option<String>,
    /// Whether values are levels or counts to quantize.
    #[arg(long, value_parser = parse_values)]
    pub values: Option<ValueKind>,
    /// Number of ordinal levels V for level-valued data.
    #[arg(long)]
    pub levels: Option<u32>,
    /// Count bin edges, e.g. 1,2,6,51.
    #[arg(long, value_delimiter = ',')]
    pub bins: Option<Vec<u64>>,
    /// Build a cosine-similarity graph with this threshold when no edges are given.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub split_ratio: Option<f64>,
    /// ogfa or oggbn.
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Layer widths, bottom first, e.g. 150,80,40.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub sweeps: Option<u64>,
    #[arg(long)]
    pub burn_in: Option<u64>,
    #[arg(long)]
    pub stride: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output run directory.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Keep every collected state in the checkpoint.
    #[arg(long)]
    pub store_all_states: bool,
}

fn parse_values(s: &str) -> Result<ValueKind, String> {
    match s {
        "levels" => Ok(ValueKind::Levels),
        "counts" => Ok(ValueKind::Counts),
        other => Err(format!("unknown value kind `{other}`, expected levels or counts")),
    }
}

/// File config, then flags on top.
pub fn resolve(args: &TrainArgs, workers: Option<usize>) -> CliResult<RunConfig> {
    let mut c = match &args.config {
        Some(p) => RunConfig::read(p).config()?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    if args.ratings.is_some() {
        c.data.ratings = args.ratings.clone();
    }
    if args.edges.is_some() {
        c.data.edges = args.edges.clone();
    }
    if args.test.is_some() {
        c.data.test = args.test.clone();
    }
    if args.epsilon.is_some() {
        c.data.epsilon = args.epsilon;
    }
    if args.out.is_some() {
        c.output.dir = args.out.clone();
    }
    set!(c.data.name, args.name);
    set!(c.data.values, args.values);
    set!(c.data.levels, args.levels);
    set!(c.data.bins, args.bins);
    set!(c.data.split_ratio, args.split_ratio);
    set!(c.model.kind, args.model);
    set!(c.model.widths, args.widths);
    set!(c.sampler.sweeps, args.sweeps);
    set!(c.sampler.burn_in, args.burn_in);
    set!(c.sampler.stride, args.stride);
    set!(c.sampler.seed, args.seed);
    set!(c.sampler.workers, workers);
    c.output.store_all_states |= args.store_all_states;
    c.validate().config()?;
    if c.output.dir.is_none() {
        return Err(anyhow!("no output directory given (--out or [output] dir)")).config();
    }
    Ok(c)
}

fn load_dataset(c: &RunConfig) -> CliResult<Dataset> {
    let d = &c.data;
    let map = d.value_map();
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let ratings = load_ratings(d.ratings.as_ref().expect("validated"), &map, &mut users, &mut items).data()?;
    let test = match &d.test {
        Some(p) => Some(load_ratings(p, &map, &mut users, &mut items).data()?),
        None => None,
    };
    let edges = match &d.edges {
        Some(p) => Some(load_edges(p, &mut users).data()?),
        None => None,
    };
    if users.is_empty() || items.is_empty() {
        return Err(anyhow!("no ratings in {}", d.ratings.as_ref().unwrap().display())).data();
    }
    let mut dataset =
        Dataset::assemble(ratings, test, edges, users, items, map.levels(), d.split_ratio, c.sampler.seed).data()?;
    if dataset.graph.is_none() {
        if let Some(eps) = d.epsilon {
            dataset.graph = Some(cosine_graph(&dataset.train, eps).runtime()?);
        }
    }
    Ok(dataset)
}

fn write_dataset(dir: &RunDir, c: &RunConfig, dataset: &Dataset) -> CliResult<()> {
    fs::create_dir_all(dir.data("")).data()?;
    dataset.users.write(&dir.data("users.txt")).data()?;
    dataset.items.write(&dir.data("items.txt")).data()?;
    dataio::write_ratings(&dir.data("train.tsv"), &dataset.train.triples(), &dataset.users, &dataset.items).data()?;
    dataio::write_ratings(&dir.data("test.tsv"), &dataset.test, &dataset.users, &dataset.items).data()?;
    if let Some(g) = &dataset.graph {
        dataio::write_edges(&dir.data("edges.tsv"), g, &dataset.users).data()?;
    }
    let bins = (c.data.values == ValueKind::Counts).then(|| c.data.bins.clone());
    let manifest = dataset.manifest(bins, c.data.epsilon, c.sampler.seed, c.data.split_ratio);
    write_json(&dir.data("dataset.json"), &manifest)
}

pub fn write_json<T: Serialize>(path: &std::path::Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .runtime()
}

#[derive(Serialize)]
struct Thresholds<'a> {
    /// Gaps of the last state.
    deltas: &'a [f64],
    /// Cumulative thresholds of the last state.
    gamma: &'a [f64],
    /// Gaps averaged over collected states.
    mean_deltas: &'a [f64],
}

pub fn run(args: TrainArgs, workers: Option<usize>, quiet: bool) -> CliResult<()> {
    let c = resolve(&args, workers)?;
    crate::setup_threads(Some(c.sampler.workers))?;
    let dir = RunDir::new(c.output.dir.clone().expect("validated"));
    fs::create_dir_all(dir.root())
        .with_context(|| format!("creating {}", dir.root().display()))
        .data()?;

    let dataset = load_dataset(&c)?;
    write_dataset(&dir, &c, &dataset)?;
    fs::write(dir.file("config.toml"), c.to_toml()).data()?;
    let (n_users, n_items) = (dataset.users.len(), dataset.items.len());
    let graph = dataset.graph.clone().unwrap_or_else(|| AdjacencyGraph::new(&[], n_users).expect("empty graph"));
    if !quiet {
        eprintln!(
            "{n_users} users, {n_items} items, {} training ratings, {} held out, {} edges",
            dataset.train.nnz(),
            dataset.test.len(),
            graph.n_edges()
        );
    }

    let streams = RngStream::new(c.sampler.seed);
    let mut state = DeepState::init(n_users, n_items, &c.model.widths, c.levels(), c.hyper, &streams).runtime()?;
    if let Some(init) = &c.model.threshold_init {
        state.thresholds = ThresholdModel::from_deltas(init).config()?;
    }
    let graphs = build_layer_graphs(&graph, state.depth());
    let options = SamplerOptions {
        learn_thresholds: c.sampler.learn_thresholds,
        resample_hyper: c.sampler.resample_hyper,
        correct_loadings: c.sampler.correct_loadings,
    };

    let mut log = BufWriter::new(fs::File::create(dir.file("train_log.tsv")).data()?);
    let mut timings = BufWriter::new(fs::File::create(dir.file("timings.tsv")).data()?);
    let deltas_header: Vec<String> = (1..=c.levels()).map(|l| format!("delta_{l}")).collect();
    writeln!(log, "sweep\theldout_loglik\t{}", deltas_header.join("\t")).runtime()?;
    let mut timing_header = false;

    if !quiet {
        eprintln!("{} sweeps, collecting {} states after burn-in", c.sampler.sweeps, c.collected());
    }
    let mut mean: Option<PosteriorMean> = None;
    let mut stored = Vec::new();
    let started = Instant::now();
    let report_every = (c.sampler.sweeps / 20).max(1);
    for sweep in 1..=c.sampler.sweeps {
        let t = deep_sweep(&dataset.train, &graphs, &mut state, &options, &streams, UserKeys(None)).runtime()?;
        if !timing_header {
            let names: Vec<&str> = t.phases.iter().map(|p| p.0).collect();
            writeln!(timings, "sweep\t{}\ttotal_ms", names.iter().map(|n| format!("{n}_ms")).collect::<Vec<_>>().join("\t"))
                .runtime()?;
            timing_header = true;
        }
        let ms: Vec<String> = t.phases.iter().map(|p| format!("{:.3}", p.1.as_secs_f64() * 1e3)).collect();
        writeln!(timings, "{sweep}\t{}\t{:.3}", ms.join("\t"), t.total().as_secs_f64() * 1e3).runtime()?;

        let ll = if c.sampler.heldout_loglik && !dataset.test.is_empty() {
            heldout_loglik_deep(&dataset.test, std::slice::from_ref(&state)).runtime()?.to_string()
        } else {
            String::new()
        };
        let deltas: Vec<String> = state.thresholds.deltas().iter().map(f64::to_string).collect();
        writeln!(log, "{sweep}\t{ll}\t{}", deltas.join("\t")).runtime()?;

        if c.is_collected(sweep) {
            match &mut mean {
                Some(m) => m.add(&state),
                None => mean = Some(PosteriorMean::new(&state)),
            }
            if c.output.store_all_states {
                stored.push(state.clone());
            }
        }
        if !quiet && (sweep % report_every == 0 || sweep == c.sampler.sweeps) {
            eprintln!(
                "sweep {sweep}/{}  {:.1}s  loglik {}",
                c.sampler.sweeps,
                started.elapsed().as_secs_f64(),
                if ll.is_empty() { "-" } else { &ll }
            );
        }
    }
    log.flush().runtime()?;
    timings.flush().runtime()?;

    let mean_state = mean.as_ref().map(|m| (m.state(), m.count()));
    checkpoint::save(
        &dir.model(),
        c.model.kind,
        &state,
        mean_state.as_ref().map(|(s, n)| (s, *n)),
        &stored,
    )
    .runtime()?;
    let mean_deltas = mean.as_ref().map_or(state.thresholds.deltas(), |m| m.mean_deltas());
    write_json(
        &dir.file("thresholds.json"),
        &Thresholds {
            deltas: state.thresholds.deltas(),
            gamma: state.thresholds.gamma(),
            mean_deltas,
        },
    )?;
    if !quiet {
        eprintln!("wrote {}", dir.root().display());
    }
    Ok(())
}
