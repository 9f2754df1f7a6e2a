//! `synth`: draw a dataset from the single-layer model with known parameters.

use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::Args;
use ordgraph::checkpoint::write_matrix;
use ordgraph::dataio::{write_edges, write_ratings, IdMap};
use ordgraph::ogfa::{simulate, simulate_from};
use ordgraph::{Hyper, RngStream, ThresholdModel};
use serde::Serialize;

use crate::error::{Classify, CliResult};
use crate::train::write_json;

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub users: usize,
    #[arg(long, default_value_t = 400)]
    pub items: usize,
    #[arg(long, default_value_t = 10)]
    pub communities: usize,
    /// Threshold gaps, one per level.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.3,0.2,0.12,0.08")]
    pub deltas: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Gamma shape of the factors.
    #[arg(long, default_value_t = 1.0)]
    pub r: f64,
    /// Gamma rate of the factors.
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    /// Dirichlet concentration of the item loadings.
    #[arg(long, default_value_t = 0.05)]
    pub eta: f64,
    /// Fixed community scale; drawn from its prior when absent.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct Truth<'a> {
    n_users: usize,
    n_items: usize,
    communities: usize,
    seed: u64,
    deltas: &'a [f64],
    scales: &'a [f64],
    hyper: Hyper,
    n_ratings: usize,
    n_edges: usize,
}

pub fn run(args: SynthArgs) -> CliResult<()> {
    if args.users == 0 || args.items == 0 || args.communities == 0 {
        return Err(anyhow!("users, items and communities must be positive")).config();
    }
    if let Some(s) = args.scale {
        if !(s > 0.0 && s.is_finite()) {
            return Err(anyhow!("--scale must be positive, got {s}")).config();
        }
    }
    let hyper = Hyper {
        r: args.r,
        c: args.c,
        eta: args.eta,
        ..Hyper::default()
    };
    hyper.validate().config()?;
    ThresholdModel::from_deltas(&args.deltas).config()?;

    let streams = RngStream::new(args.seed);
    let mut world = simulate(args.users, args.items, args.communities, hyper, &args.deltas, &streams).runtime()?;
    if let Some(s) = args.scale {
        let scales = vec![s; args.communities];
        world = simulate_from(world.theta, world.phi, scales, world.thresholds, &streams).runtime()?;
    }

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .runtime()?;
    let users = named("u", args.users);
    let items = named("i", args.items);
    let triples = world.ratings.triples();
    write_ratings(&args.out.join("ratings.tsv"), &triples, &users, &items).runtime()?;
    write_edges(&args.out.join("edges.tsv"), &world.graph, &users).runtime()?;
    write_matrix(&args.out.join("theta.bin"), &world.theta).runtime()?;
    write_matrix(&args.out.join("phi.bin"), &world.phi).runtime()?;
    write_json(
        &args.out.join("truth.json"),
        &Truth {
            n_users: args.users,
            n_items: args.items,
            communities: args.communities,
            seed: args.seed,
            deltas: &args.deltas,
            scales: &world.scales,
            hyper,
            n_ratings: triples.len(),
            n_edges: world.graph.n_edges(),
        },
    )
}

fn named(prefix: &str, n: usize) -> IdMap {
    let mut m = IdMap::new();
    for k in 0..n {
        m.intern(&format!("{prefix}{k}"));
    }
    m
}
