use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ordgraph::checkpoint::{self, read_matrix};
use ordgraph::ThresholdModel;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn ordgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ordgraph"))
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ordgraph(args);
    assert!(
        out.status.success(),
        "ordgraph {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    ordgraph(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic data with 50 users, 40 items and 3 communities.
fn synth(dir: &Path, seed: u64) -> PathBuf {
    let out = dir.join(format!("syn{seed}"));
    let seed = seed.to_string();
    ok(&[
        "synth", "--users", "50", "--items", "40", "--communities", "3", "--seed", &seed, "--r", "2", "--out",
        s(&out),
    ]);
    out
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let ratings = data.join("ratings.tsv");
    let edges = data.join("edges.tsv");
    let mut args = vec![
        "train",
        "--ratings",
        s(&ratings),
        "--edges",
        s(&edges),
        "--sweeps",
        "50",
        "--burn-in",
        "25",
        "--stride",
        "5",
        "--seed",
        "7",
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

/// Digest of every file under `dir`, keyed by relative path.
fn digest_tree(dir: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let hash = Sha256::digest(fs::read(&path).unwrap());
                let key = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(key, hash.iter().map(|b| format!("{b:02x}")).collect());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn read_tsv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split('\t').map(String::from).collect())
        .collect()
}

#[test]
fn train_is_reproducible_and_checkpoint_reloads() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 1);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train(&data, &a, &["--store-all-states"]);
    let b_str = b.to_str().unwrap().to_string();
    let out = Command::new(env!("CARGO_BIN_EXE_ordgraph"))
        .args(["--quiet", "--workers", "1", "train"])
        .args(["--ratings", s(&data.join("ratings.tsv")), "--edges", s(&data.join("edges.tsv"))])
        .args(["--sweeps", "50", "--burn-in", "25", "--stride", "5", "--seed", "7", "--store-all-states"])
        .args(["--out", &b_str])
        .output()
        .unwrap();
    assert!(out.status.success());

    let (da, db) = (digest_tree(&a.join("model")), digest_tree(&b.join("model")));
    assert!(!da.is_empty());
    assert_eq!(da, db, "checkpoint differs between a multi-threaded and a single-threaded run");
    for f in ["train_log.tsv", "thresholds.json", "data/train.tsv", "data/test.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let loaded = checkpoint::load(&a.join("model")).unwrap();
    assert_eq!(loaded.manifest.collected, 5);
    assert_eq!(loaded.states.len(), 5);
    assert_eq!(loaded.last.sweep, 50);
    let again = tmp.path().join("resaved");
    let mean = loaded.mean.as_ref().map(|m| (m, loaded.manifest.collected));
    checkpoint::save(&again, loaded.manifest.model, &loaded.last, mean, &loaded.states).unwrap();
    assert_eq!(digest_tree(&again), da);
    assert_eq!(checkpoint::load(&again).unwrap(), loaded);
}

#[test]
fn deep_config_file_is_accepted() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 2);
    let config = tmp.path().join("run.toml");
    fs::write(
        &config,
        format!(
            "[data]\nratings = \"{}\"\nedges = \"{}\"\nname = \"toy\"\n\n[model]\nkind = \"oggbn\"\nwidths = [150, 80, 40]\n\n\
             [sampler]\nsweeps = 3\nburn_in = 1\nstride = 1\n\n[output]\ndir = \"deep\"\n",
            s(&data.join("ratings.tsv")),
            s(&data.join("edges.tsv"))
        ),
    )
    .unwrap();
    ok(&["train", "--config", s(&config)]);
    let m = checkpoint::load(&tmp.path().join("deep/model")).unwrap().manifest;
    assert_eq!(m.widths, vec![150, 80, 40]);
    assert_eq!(m.collected, 2);
    let log = read_tsv(&tmp.path().join("deep/train_log.tsv"));
    assert_eq!(log.len(), 4);
    assert!(log[1][1].parse::<f64>().unwrap().is_finite());
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 3);
    let config = tmp.path().join("run.toml");
    fs::write(
        &config,
        format!("[data]\nratings = \"{}\"\n[sampler]\nsweeps = 4\nburn_in = 2\n[model]\nwidths = [5]\n", s(&data.join("ratings.tsv"))),
    )
    .unwrap();
    let out = tmp.path().join("run");
    ok(&["train", "--config", s(&config), "--widths", "4", "--sweeps", "6", "--out", s(&out)]);
    let written = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(written.contains("widths = [4]"), "{written}");
    assert!(written.contains("sweeps = 6"), "{written}");
    assert!(written.contains("burn_in = 2"), "{written}");
}

#[test]
fn eval_writes_bounded_deterministic_metrics() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 4);
    let run = tmp.path().join("run");
    train(&data, &run, &[]);
    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    ok(&["eval", "--checkpoint", s(&run), "--n", "10", "--s", "1,3,5", "--out", s(&e1)]);
    ok(&["eval", "--checkpoint", s(&run), "--n", "10", "--s", "1,3,5", "--out", s(&e2)]);
    let csv = fs::read_to_string(e1.join("metrics.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(e2.join("metrics.csv")).unwrap());
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "model,dataset,s,N,HR,NDCG,n_evaluable_users");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(!rows.is_empty());
    for r in &rows {
        assert_eq!(r[0], "ogfa");
        let (hr, ndcg): (f64, f64) = (r[4].parse().unwrap(), r[5].parse().unwrap());
        assert!((0.0..=1.0).contains(&hr) && (0.0..=1.0).contains(&ndcg), "{r:?}");
        assert!(ndcg <= hr + 1e-12);
    }
    let json: serde_json::Value = serde_json::from_slice(&fs::read(e1.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), rows.len());
    assert!(json[0].get("HR").is_some() && json[0].get("NDCG").is_some());

    assert_eq!(code(&["eval", "--checkpoint", s(&run), "--s", "6"]), 2);
    assert_eq!(code(&["eval", "--checkpoint", s(&run), "--n", "0"]), 2);
}

#[test]
fn recommend_excludes_training_items_and_ranks_by_rate() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 5);
    let run = tmp.path().join("run");
    train(&data, &run, &[]);

    let mut seen: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for row in read_tsv(&run.join("data/train.tsv")) {
        seen.entry(row[0].clone()).or_default().insert(row[1].clone());
    }
    let users: Vec<String> = seen.keys().take(8).cloned().collect();
    let list = tmp.path().join("users.txt");
    fs::write(&list, users.join("\n")).unwrap();

    let (r1, r2) = (tmp.path().join("r1.tsv"), tmp.path().join("r2.tsv"));
    ok(&["recommend", "--checkpoint", s(&run), "--users", s(&list), "--n", "5", "--out", s(&r1)]);
    ok(&["recommend", "--checkpoint", s(&run), "--users", s(&list), "--n", "5", "--out", s(&r2)]);
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());
    let rows = read_tsv(&r1);
    assert_eq!(rows[0], ["user", "rank", "item", "score"]);
    assert_eq!(rows.len(), 1 + 5 * users.len());
    for r in &rows[1..] {
        assert!(!seen[&r[0]].contains(&r[2]), "recommended a training item: {r:?}");
    }

    // N = 1 is the argmax of the rate over unseen items.
    let ck = checkpoint::load(&run.join("model")).unwrap();
    let state = ck.scoring_state();
    let user_ids: Vec<String> = fs::read_to_string(run.join("data/users.txt")).unwrap().lines().map(String::from).collect();
    let item_ids: Vec<String> = fs::read_to_string(run.join("data/items.txt")).unwrap().lines().map(String::from).collect();
    let top = tmp.path().join("top.tsv");
    let joined = users.join(",");
    ok(&["recommend", "--checkpoint", s(&run), "--user", &joined, "--n", "1", "--out", s(&top)]);
    for r in &read_tsv(&top)[1..] {
        let u = user_ids.iter().position(|x| x == &r[0]).unwrap();
        let best = (0..item_ids.len())
            .filter(|&i| !seen[&r[0]].contains(&item_ids[i]))
            .max_by(|&a, &b| state.lambda(u, a).total_cmp(&state.lambda(u, b)).then(b.cmp(&a)))
            .unwrap();
        assert_eq!(r[2], item_ids[best]);
    }

    assert_eq!(code(&["recommend", "--checkpoint", s(&run), "--user", "nobody", "--out", s(&top)]), 3);
}

#[test]
fn tree_export_shapes() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 6);

    let flat = tmp.path().join("flat");
    train(&data, &flat, &["--widths", "3"]);
    ok(&["export-tree", "--checkpoint", s(&flat), "--top", "4"]);
    let tree: serde_json::Value = serde_json::from_slice(&fs::read(flat.join("tree/tree.json")).unwrap()).unwrap();
    assert_eq!(tree["nodes"].as_array().unwrap().len(), 3);
    assert!(tree["links"].as_array().unwrap().is_empty());
    for n in tree["nodes"].as_array().unwrap() {
        let items = n["top_items"].as_array().unwrap();
        assert_eq!(items.len(), 4);
        let w: Vec<f64> = items.iter().map(|t| t["weight"].as_f64().unwrap()).collect();
        assert!(w.windows(2).all(|p| p[0] >= p[1]));
    }
    assert!(!fs::read_to_string(flat.join("tree/tree.dot")).unwrap().contains("->"));

    let deep = tmp.path().join("deep");
    train(&data, &deep, &["--model", "oggbn", "--widths", "4,3,2"]);
    let out = tmp.path().join("t0");
    ok(&["export-tree", "--checkpoint", s(&deep), "--tau", "0", "--out", s(&out)]);
    let tree: serde_json::Value = serde_json::from_slice(&fs::read(out.join("tree.json")).unwrap()).unwrap();
    assert_eq!(tree["nodes"].as_array().unwrap().len(), 9);
    let links = tree["links"].as_array().unwrap();
    assert_eq!(links.len(), 3 * 4 + 2 * 3);
    let mut per_parent: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for l in links {
        let e = per_parent.entry(l["parent"].as_str().unwrap().to_string()).or_default();
        e.0 += 1;
        e.1 += l["weight"].as_f64().unwrap();
    }
    for (p, (count, total)) in &per_parent {
        let expect = if p.starts_with("L2") { 4 } else { 3 };
        assert_eq!(*count, expect, "{p}");
        assert!((total - 1.0).abs() < 1e-9, "{p}: {total}");
    }
    let dot = fs::read_to_string(out.join("tree.dot")).unwrap();
    assert_eq!(dot.matches("->").count(), links.len());

    let pruned = tmp.path().join("t1");
    ok(&["export-tree", "--checkpoint", s(&deep), "--tau", "0.3", "--out", s(&pruned)]);
    let tree: serde_json::Value = serde_json::from_slice(&fs::read(pruned.join("tree.json")).unwrap()).unwrap();
    assert!(tree["links"].as_array().unwrap().iter().all(|l| l["weight"].as_f64().unwrap() >= 0.3));
}

#[test]
fn synth_is_seeded_and_matches_level_probabilities() {
    let tmp = TempDir::new().unwrap();
    let a = synth(tmp.path(), 9);
    let b = tmp.path().join("again");
    ok(&[
        "synth", "--users", "50", "--items", "40", "--communities", "3", "--seed", "9", "--r", "2", "--out", s(&b),
    ]);
    assert_eq!(digest_tree(&a), digest_tree(&b));
    let other = synth(tmp.path(), 10);
    assert_ne!(fs::read(a.join("ratings.tsv")).unwrap(), fs::read(other.join("ratings.tsv")).unwrap());

    // larger draw for the histogram check
    let big = tmp.path().join("big");
    ok(&["synth", "--users", "400", "--items", "300", "--communities", "4", "--seed", "11", "--out", s(&big)]);
    let truth: serde_json::Value = serde_json::from_slice(&fs::read(big.join("truth.json")).unwrap()).unwrap();
    let deltas: Vec<f64> = truth["deltas"].as_array().unwrap().iter().map(|d| d.as_f64().unwrap()).collect();
    let tm = ThresholdModel::from_deltas(&deltas).unwrap();
    let theta = read_matrix(&big.join("theta.bin")).unwrap();
    let phi = read_matrix(&big.join("phi.bin")).unwrap();
    let levels = deltas.len();

    let mut observed = vec![0.0; levels + 1];
    let rows = read_tsv(&big.join("ratings.tsv"));
    for r in &rows {
        let y: usize = r[2].parse().unwrap();
        assert!((1..=levels).contains(&y), "{r:?}");
        observed[y] += 1.0;
    }
    observed[0] = (theta.rows() * phi.rows()) as f64 - rows.len() as f64;

    let mut expected = vec![0.0; levels + 1];
    let mut variance = vec![0.0; levels + 1];
    for u in 0..theta.rows() {
        for i in 0..phi.rows() {
            let lambda: f64 = theta.row(u).iter().zip(phi.row(i)).map(|(a, b)| a * b).sum();
            for (v, (e, var)) in expected.iter_mut().zip(&mut variance).enumerate() {
                let p = tm.pmf(lambda, v as u32).unwrap();
                *e += p;
                *var += p * (1.0 - p);
            }
        }
    }
    for v in 0..=levels {
        let z = (observed[v] - expected[v]) / variance[v].sqrt().max(1.0);
        assert!(z.abs() < 5.0, "level {v}: observed {} expected {:.1} (z = {z:.2})", observed[v], expected[v]);
    }
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 12);
    let ratings = data.join("ratings.tsv");
    let out = tmp.path().join("o");
    // configuration problems
    assert_eq!(code(&["train", "--ratings", s(&ratings), "--widths", "3,2", "--out", s(&out)]), 2);
    assert_eq!(code(&["train", "--ratings", s(&ratings), "--sweeps", "5", "--burn-in", "5", "--out", s(&out)]), 2);
    assert_eq!(code(&["train", "--ratings", s(&ratings)]), 2);
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[model]\nwidth = 3\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&bad), "--out", s(&out)]), 2);
    // data problems
    let missing = tmp.path().join("missing.tsv");
    assert_eq!(code(&["train", "--ratings", s(&missing), "--out", s(&out)]), 3);
    let garbled = tmp.path().join("garbled.tsv");
    fs::write(&garbled, "u1\ti1\t9\n").unwrap();
    assert_eq!(code(&["train", "--ratings", s(&garbled), "--out", s(&out)]), 3);
    assert_eq!(code(&["eval", "--checkpoint", s(&tmp.path().join("none"))]), 3);
    assert_eq!(code(&["export-tree", "--checkpoint", s(&tmp.path().join("none"))]), 3);
    // clap usage errors also exit with 2
    assert_eq!(code(&["train", "--sweeps", "many"]), 2);
}
