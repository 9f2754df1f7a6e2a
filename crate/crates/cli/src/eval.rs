//! `eval` and `recommend`: scoring with a trained run.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::Args;
use ordgraph::dataio::load_test_ratings;
use ordgraph::eval::{evaluate, rank_items, write_csv};
use ordgraph::DeepState;

use crate::error::{Classify, CliResult};
use crate::run::LoadedRun;
use crate::train::write_json;

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Held-out ratings; defaults to the run's own test split.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Cutoff N.
    #[arg(long)]
    pub n: Option<usize>,
    /// Relevance levels, e.g. 1,3,5.
    #[arg(long, value_delimiter = ',')]
    pub s: Option<Vec<u32>>,
    /// Graded gains instead of binary relevance.
    #[arg(long)]
    pub graded: bool,
    /// Output directory; defaults to <run>/eval.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RecommendArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// File with one user id per line.
    #[arg(long)]
    pub users: Option<PathBuf>,
    /// User ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub user: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Output TSV: user, rank, item, score.
    #[arg(long, short)]
    pub out: PathBuf,
}

/// States whose rates are averaged for scoring: every stored state when the
/// run kept them, otherwise the posterior mean (or last) state.
fn scoring_states(run: &LoadedRun) -> Vec<&DeepState> {
    let c = &run.checkpoint;
    if c.states.is_empty() {
        vec![c.scoring_state()]
    } else {
        c.states.iter().collect()
    }
}

fn fill_scores(states: &[&DeepState], u: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for s in states {
        for (i, x) in out.iter_mut().enumerate() {
            *x += s.lambda(u, i);
        }
    }
    let n = states.len() as f64;
    out.iter_mut().for_each(|x| *x /= n);
}

pub fn run_eval(args: EvalArgs) -> CliResult<()> {
    let run = LoadedRun::open(&args.checkpoint)?;
    let mut config = run.config.eval.clone();
    if let Some(n) = args.n {
        config.n = n;
    }
    if let Some(s) = &args.s {
        config.s_levels = s.clone();
    }
    config.graded |= args.graded;
    config.validate(run.levels()).config()?;

    let test_path = args.test.clone().unwrap_or_else(|| run.dir.data("test.tsv"));
    let test = load_test_ratings(&test_path, run.levels(), &run.users, &run.items).data()?;
    let states = scoring_states(&run);
    let model = run.checkpoint.manifest.model.to_string();
    let rows = evaluate(
        |u, buf| fill_scores(&states, u, buf),
        &run.train,
        &test,
        &config,
        &model,
        &run.config.data.name,
    )
    .data()?;

    let out = args.out.unwrap_or_else(|| run.dir.file("eval"));
    fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .runtime()?;
    let csv = out.join("metrics.csv");
    let file = fs::File::create(&csv).with_context(|| format!("writing {}", csv.display())).runtime()?;
    write_csv(&rows, BufWriter::new(file)).runtime()?;
    write_json(&out.join("metrics.json"), &rows)?;
    for r in &rows {
        println!("s={} N={} HR={:.4} NDCG={:.4} users={}", r.s, r.n, r.hr, r.ndcg, r.n_evaluable_users);
    }
    Ok(())
}

pub fn run_recommend(args: RecommendArgs) -> CliResult<()> {
    if args.n == 0 {
        return Err(anyhow!("--n must be at least 1")).config();
    }
    let run = LoadedRun::open(&args.checkpoint)?;
    let mut names = args.user.clone();
    if let Some(p) = &args.users {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).data()?;
        names.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from));
    }
    if names.is_empty() {
        return Err(anyhow!("no users given (--user or --users)")).config();
    }
    let users: Vec<usize> = names
        .iter()
        .map(|n| run.users.get(n).ok_or_else(|| anyhow!("unknown user `{n}`")))
        .collect::<Result<_, _>>()
        .data()?;

    let states = scoring_states(&run);
    let mut scores = vec![0.0; run.items.len()];
    let file = fs::File::create(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))
        .runtime()?;
    let mut out = BufWriter::new(file);
    writeln!(out, "user\trank\titem\tscore").runtime()?;
    for (name, &u) in names.iter().zip(&users) {
        fill_scores(&states, u, &mut scores);
        for (rank, i) in rank_items(&scores, run.train.row_items(u), args.n).into_iter().enumerate() {
            writeln!(out, "{name}\t{}\t{}\t{}", rank + 1, run.items.name(i), scores[i]).runtime()?;
        }
    }
    out.flush().runtime()
}
