//! `export-tree`: the community hierarchy as JSON and Graphviz DOT.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::Args;
use ordgraph::dataio::IdMap;
use ordgraph::oggbn::project_community;
use ordgraph::DeepState;
use serde::Serialize;

use crate::error::{Classify, CliResult};
use crate::run::LoadedRun;
use crate::train::write_json;

#[derive(Args, Debug)]
pub struct TreeArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Items listed per community.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// Drop links whose loading weight is below this.
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    /// Output directory; defaults to <run>/tree.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct TopItem {
    pub item: String,
    pub weight: f64,
}

#[derive(Debug, Serialize)]
pub struct Node {
    pub id: String,
    /// 1-based layer.
    pub layer: usize,
    pub community: usize,
    pub top_items: Vec<TopItem>,
}

#[derive(Debug, Serialize)]
pub struct Link {
    /// Community at layer t+1.
    pub parent: String,
    /// Community at layer t.
    pub child: String,
    pub weight: f64,
}

#[derive(Debug, Serialize)]
pub struct Tree {
    pub widths: Vec<usize>,
    pub nodes: Vec<Node>,
    pub links: Vec<Link>,
}

fn node_id(layer: usize, k: usize) -> String {
    format!("L{layer}_{k}")
}

pub fn build(state: &DeepState, items: &IdMap, top: usize, tau: f64) -> anyhow::Result<Tree> {
    let mut nodes = Vec::new();
    for (t, layer) in state.layers.iter().enumerate() {
        for k in 0..layer.width() {
            let dist = project_community(state, t + 1, k)?;
            let mut order: Vec<usize> = (0..dist.len()).collect();
            order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
            let top_items = order
                .into_iter()
                .take(top)
                .map(|i| TopItem {
                    item: items.name(i).to_string(),
                    weight: dist[i],
                })
                .collect();
            nodes.push(Node {
                id: node_id(t + 1, k),
                layer: t + 1,
                community: k,
                top_items,
            });
        }
    }
    let mut links = Vec::new();
    for t in 1..state.depth() {
        let phi = &state.layers[t].phi;
        for parent in 0..phi.cols() {
            for child in 0..phi.rows() {
                let weight = phi.row(child)[parent];
                if weight >= tau {
                    links.push(Link {
                        parent: node_id(t + 1, parent),
                        child: node_id(t, child),
                        weight,
                    });
                }
            }
        }
    }
    Ok(Tree {
        widths: state.widths(),
        nodes,
        links,
    })
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

pub fn to_dot(tree: &Tree) -> String {
    let mut s = String::from("digraph communities {\n  rankdir=TB;\n  node [shape=box, fontsize=10];\n");
    for n in &tree.nodes {
        let items: Vec<&str> = n.top_items.iter().take(5).map(|t| t.item.as_str()).collect();
        let label = format!("{}\\n{}", n.id, escape(&items.join(", ")));
        writeln!(s, "  \"{}\" [label=\"{label}\"];", n.id).unwrap();
    }
    for l in &tree.links {
        let pen = 0.5 + 4.5 * l.weight;
        writeln!(s, "  \"{}\" -> \"{}\" [penwidth={pen:.3}, label=\"{:.3}\"];", l.parent, l.child, l.weight).unwrap();
    }
    s.push_str("}\n");
    s
}

pub fn run(args: TreeArgs) -> CliResult<()> {
    if !(0.0..=1.0).contains(&args.tau) {
        return Err(anyhow!("--tau must lie in [0, 1], got {}", args.tau)).config();
    }
    let run = LoadedRun::open(&args.checkpoint)?;
    let tree = build(run.checkpoint.scoring_state(), &run.items, args.top, args.tau).runtime()?;
    let out = args.out.unwrap_or_else(|| run.dir.file("tree"));
    fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .runtime()?;
    write_json(&out.join("tree.json"), &tree)?;
    fs::write(out.join("tree.dot"), to_dot(&tree)).runtime()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ordgraph::{DenseMatrix, Hyper, RngStream};

    fn items(n: usize) -> IdMap {
        let mut m = IdMap::new();
        for i in 0..n {
            m.intern(&format!("item{i}"));
        }
        m
    }

    #[test]
    fn identity_loadings_link_each_deep_community_once() {
        let mut state = DeepState::init(6, 8, &[3, 3], 5, Hyper::default(), &RngStream::new(1)).unwrap();
        state.layers[1].phi = DenseMatrix::identity(3);
        let tree = build(&state, &items(8), 2, 0.05).unwrap();
        assert_eq!(tree.links.len(), 3);
        for (k, l) in tree.links.iter().enumerate() {
            assert_eq!(l.parent, format!("L2_{k}"));
            assert_eq!(l.child, format!("L1_{k}"));
            assert_eq!(l.weight, 1.0);
        }
        // an identity layer projects to the same item distribution as its child
        for k in 0..3 {
            let (deep, shallow) = (&tree.nodes[3 + k], &tree.nodes[k]);
            let names = |n: &Node| n.top_items.iter().map(|t| t.item.clone()).collect::<Vec<_>>();
            assert_eq!(names(deep), names(shallow));
        }
    }

    #[test]
    fn dot_pen_widths_grow_with_weight() {
        let mut state = DeepState::init(6, 8, &[2, 1], 5, Hyper::default(), &RngStream::new(2)).unwrap();
        state.layers[1].phi = DenseMatrix::from_rows(&[vec![0.8], vec![0.2]]);
        let dot = to_dot(&build(&state, &items(8), 3, 0.0).unwrap());
        assert!(dot.contains("\"L2_0\" -> \"L1_0\" [penwidth=4.100"), "{dot}");
        assert!(dot.contains("\"L2_0\" -> \"L1_1\" [penwidth=1.400"), "{dot}");
    }
}
