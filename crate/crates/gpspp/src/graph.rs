//! Molecular graph data model, dataset files and split utilities.
//!
//! Graphs arrive pre-featurized: node and edge features are categorical
//! integers whose per-column vocabulary sizes are declared in the dataset
//! header. Bonds are stored undirected on disk and expanded to two directed
//! edges on load, so `num_edges` is always even and every directed edge has
//! its reverse with identical categories.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::{Error, Result};

/// Per-column vocabulary sizes for node and edge categorical features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub node: Vec<usize>,
    pub edge: Vec<usize>,
}

impl Vocabulary {
    /// Vocabulary sizes for the 11-node / 3-edge chemical feature selection
    /// used by the reference configuration: atomic number, periodic-table
    /// group / period / element type, degree, formal charge, hydrogen count,
    /// radical electrons, aromaticity, ring membership and chiral-center
    /// flag; bond type, bond stereo and bond ring membership.
    pub fn reference_set1() -> Self {
        Vocabulary {
            node: vec![119, 19, 8, 5, 11, 11, 9, 5, 2, 2, 2],
            edge: vec![5, 6, 2],
        }
    }

    /// Tiny vocabulary for unit tests and toy models.
    pub fn toy() -> Self {
        Vocabulary {
            node: vec![6, 4],
            edge: vec![4, 2],
        }
    }
}

/// One sample: topology, categorical features, optional 3D positions and an
/// optional scalar regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct MolecularGraph {
    pub num_nodes: usize,
    /// Directed edges; each undirected bond appears as `(u, v)` and `(v, u)`.
    pub edges: Vec<(usize, usize)>,
    /// `num_nodes x D_atom` categorical values.
    pub node_cats: Vec<Vec<usize>>,
    /// One row per directed edge.
    pub edge_cats: Vec<Vec<usize>>,
    /// `num_nodes x 3`, arbitrary length units.
    pub positions: Option<Vec<[f64; 3]>>,
    pub target: Option<f64>,
}

impl MolecularGraph {
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Undirected degree of every node.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.num_nodes];
        for &(u, v) in &self.edges {
            let _ = v;
            deg[u] += 1;
        }
        deg
    }

    /// Check all structural invariants against a vocabulary.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.num_nodes == 0 {
            return Err(Error::Validation("graph must have at least one node".into()));
        }
        if self.node_cats.len() != self.num_nodes {
            return Err(Error::Validation(format!(
                "{} node feature rows for {} nodes",
                self.node_cats.len(),
                self.num_nodes
            )));
        }
        if self.edge_cats.len() != self.edges.len() {
            return Err(Error::Validation(format!(
                "{} edge feature rows for {} edges",
                self.edge_cats.len(),
                self.edges.len()
            )));
        }
        if let Some(pos) = &self.positions {
            if pos.len() != self.num_nodes {
                return Err(Error::Validation(format!(
                    "{} positions for {} nodes",
                    pos.len(),
                    self.num_nodes
                )));
            }
            if pos.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Validation("non-finite position".into()));
            }
        }
        if let Some(t) = self.target {
            if !t.is_finite() {
                return Err(Error::Validation("non-finite target".into()));
            }
        }

        let mut seen = std::collections::HashMap::new();
        for (k, &(u, v)) in self.edges.iter().enumerate() {
            if u >= self.num_nodes || v >= self.num_nodes {
                return Err(Error::Validation(format!(
                    "edge ({u}, {v}) out of bounds for {} nodes",
                    self.num_nodes
                )));
            }
            if u == v {
                return Err(Error::Validation(format!("self-loop at node {u}")));
            }
            if seen.insert((u, v), k).is_some() {
                return Err(Error::Validation(format!("duplicate directed edge ({u}, {v})")));
            }
        }
        for (&(u, v), &k) in &seen {
            match seen.get(&(v, u)) {
                None => {
                    return Err(Error::Validation(format!(
                        "edge ({u}, {v}) has no reverse"
                    )))
                }
                Some(&r) => {
                    if self.edge_cats[k] != self.edge_cats[r] {
                        return Err(Error::Validation(format!(
                            "edge ({u}, {v}) and its reverse disagree on categories"
                        )));
                    }
                }
            }
        }

        for (i, row) in self.node_cats.iter().enumerate() {
            check_cats("node", i, row, &vocab.node)?;
        }
        for (k, row) in self.edge_cats.iter().enumerate() {
            check_cats("edge", k, row, &vocab.edge)?;
        }
        Ok(())
    }
}

fn check_cats(kind: &str, index: usize, row: &[usize], vocab: &[usize]) -> Result<()> {
    if row.len() != vocab.len() {
        return Err(Error::Validation(format!(
            "{kind} {index}: {} categories for {} columns",
            row.len(),
            vocab.len()
        )));
    }
    for (c, (&v, &size)) in row.iter().zip(vocab).enumerate() {
        if v >= size {
            return Err(Error::Validation(format!(
                "{kind} {index} column {c}: category {v} out of vocabulary {size}"
            )));
        }
    }
    Ok(())
}

/// A loaded dataset: vocabulary plus graphs in file order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub graphs: Vec<MolecularGraph>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    version: u32,
    node_vocab: Vec<usize>,
    edge_vocab: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GraphLine {
    num_nodes: usize,
    /// Undirected bonds.
    edges: Vec<[usize; 2]>,
    node_cats: Vec<Vec<usize>>,
    /// One row per bond.
    edge_cats: Vec<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    positions: Option<Vec<[f64; 3]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target: Option<f64>,
}

/// Load a JSON Lines dataset: a header line followed by one graph per line.
/// Each bond expands to two directed edges sharing the bond's categories.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut lines = BufReader::new(file).lines();

    let header_text = match lines.next() {
        Some(l) => l?,
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
    };
    let header: HeaderLine = serde_json::from_str(&header_text).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.version != 1 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported version {}", header.version),
        });
    }
    let vocab = Vocabulary {
        node: header.node_vocab,
        edge: header.edge_vocab,
    };

    let mut graphs = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: GraphLine = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if rec.edge_cats.len() != rec.edges.len() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!(
                    "{} edge category rows for {} bonds",
                    rec.edge_cats.len(),
                    rec.edges.len()
                ),
            });
        }
        let graph = expand_record(rec);
        graph.validate(&vocab).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        graphs.push(graph);
    }
    Ok(Dataset { vocab, graphs })
}

fn expand_record(rec: GraphLine) -> MolecularGraph {
    let mut edges = Vec::with_capacity(rec.edges.len() * 2);
    let mut edge_cats = Vec::with_capacity(rec.edges.len() * 2);
    for (bond, cats) in rec.edges.iter().zip(rec.edge_cats) {
        edges.push((bond[0], bond[1]));
        edges.push((bond[1], bond[0]));
        edge_cats.push(cats.clone());
        edge_cats.push(cats);
    }
    MolecularGraph {
        num_nodes: rec.num_nodes,
        edges,
        node_cats: rec.node_cats,
        positions: rec.positions,
        target: rec.target,
        edge_cats,
    }
}

/// Serialise a dataset back to JSON Lines, collapsing directed edge pairs
/// into bonds in first-occurrence order.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let text = dataset_to_string(dataset)?;
    let mut file = std::fs::File::create(path.as_ref())?;
    file.write_all(text.as_bytes())?;
    Ok(())
}

pub fn dataset_to_string(dataset: &Dataset) -> Result<String> {
    let mut out = String::new();
    let header = HeaderLine {
        version: 1,
        node_vocab: dataset.vocab.node.clone(),
        edge_vocab: dataset.vocab.edge.clone(),
    };
    out.push_str(&serde_json::to_string(&header).map_err(|e| Error::Validation(e.to_string()))?);
    out.push('\n');
    for g in &dataset.graphs {
        let mut bonds = Vec::new();
        let mut bond_cats = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (k, &(u, v)) in g.edges.iter().enumerate() {
            let key = (u.min(v), u.max(v));
            if seen.insert(key) {
                bonds.push([u, v]);
                bond_cats.push(g.edge_cats[k].clone());
            }
        }
        let rec = GraphLine {
            num_nodes: g.num_nodes,
            edges: bonds,
            node_cats: g.node_cats.clone(),
            edge_cats: bond_cats,
            positions: g.positions.clone(),
            target: g.target,
        };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Validation(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// The three train/evaluation index arrangements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Original,
    TrainPlusValid,
    TrainPlusHalfValid,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(SplitName::Original),
            "train_plus_valid" => Ok(SplitName::TrainPlusValid),
            "train_plus_half_valid" => Ok(SplitName::TrainPlusHalfValid),
            other => Err(Error::Config(format!("unknown split name '{other}'"))),
        }
    }
}

/// Disjoint train / evaluation index lists covering the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub train_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
}

/// Build a split. The nominal validation portion is the last `valid_count`
/// indices of the dataset; `train_plus_half_valid` moves a seeded random
/// half of it (rounded down) into training and keeps the rest for
/// evaluation, `train_plus_valid` moves all of it. Which half the reference
/// data actually used is unknown, so the seed is explicit.
pub fn make_split(
    dataset_size: usize,
    valid_count: usize,
    name: SplitName,
    seed: u64,
) -> Result<DatasetSplit> {
    if valid_count > dataset_size {
        return Err(Error::Config(format!(
            "valid_count {valid_count} exceeds dataset size {dataset_size}"
        )));
    }
    let boundary = dataset_size - valid_count;
    let mut train: Vec<usize> = (0..boundary).collect();
    let valid: Vec<usize> = (boundary..dataset_size).collect();
    let eval = match name {
        SplitName::Original => valid,
        SplitName::TrainPlusValid => {
            train.extend(valid);
            Vec::new()
        }
        SplitName::TrainPlusHalfValid => {
            let mut shuffled = valid;
            let mut rng = RngStream::new(seed, 0x59117);
            rng.shuffle(&mut shuffled);
            let moved = shuffled.len() / 2;
            train.extend(shuffled[..moved].iter().copied());
            let mut held: Vec<usize> = shuffled[moved..].to_vec();
            held.sort_unstable();
            held
        }
    };
    train.sort_unstable();
    Ok(DatasetSplit {
        name,
        train_indices: train,
        eval_indices: eval,
    })
}

/// Parameters for the synthetic molecule-like graph generator used by tests
/// and the `synth` CLI subcommand.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_graphs: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Expected number of extra ring-closing bonds per graph.
    pub extra_bonds: f64,
    pub vocab: Vocabulary,
    pub with_positions: bool,
    pub with_targets: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_graphs: 64,
            min_nodes: 4,
            max_nodes: 12,
            extra_bonds: 1.0,
            vocab: Vocabulary::toy(),
            with_positions: true,
            with_targets: true,
            seed: 0,
        }
    }
}

/// Random connected graph: a spanning tree plus a few ring-closing bonds,
/// categories drawn uniformly per column, positions laid out on a jittered
/// chain. The target is a smooth deterministic function of the structure so
/// small models can fit it.
pub fn synth_graph(cfg: &SynthConfig, rng: &mut RngStream) -> MolecularGraph {
    let n = cfg.min_nodes + rng.next_below(cfg.max_nodes - cfg.min_nodes + 1);
    let mut bonds: Vec<(usize, usize)> = Vec::new();
    let mut adjacent = std::collections::HashSet::new();
    for v in 1..n {
        let u = rng.next_below(v);
        bonds.push((u, v));
        adjacent.insert((u, v));
    }
    let extra = (cfg.extra_bonds * 2.0 * rng.next_f64()).round() as usize;
    for _ in 0..extra {
        if n < 3 {
            break;
        }
        let u = rng.next_below(n);
        let v = rng.next_below(n);
        let key = (u.min(v), u.max(v));
        if u != v && !adjacent.contains(&key) {
            adjacent.insert(key);
            bonds.push(key);
        }
    }

    let node_cats: Vec<Vec<usize>> = (0..n)
        .map(|_| cfg.vocab.node.iter().map(|&s| rng.next_below(s)).collect())
        .collect();
    let bond_cats: Vec<Vec<usize>> = bonds
        .iter()
        .map(|_| cfg.vocab.edge.iter().map(|&s| rng.next_below(s)).collect())
        .collect();

    let positions = cfg.with_positions.then(|| {
        (0..n)
            .map(|i| {
                [
                    1.4 * i as f64 + rng.uniform(-0.4, 0.4),
                    rng.uniform(-1.2, 1.2),
                    rng.uniform(-1.2, 1.2),
                ]
            })
            .collect::<Vec<[f64; 3]>>()
    });

    let mut edges = Vec::with_capacity(bonds.len() * 2);
    let mut edge_cats = Vec::with_capacity(bonds.len() * 2);
    for (b, cats) in bonds.iter().zip(bond_cats) {
        edges.push(*b);
        edges.push((b.1, b.0));
        edge_cats.push(cats.clone());
        edge_cats.push(cats);
    }

    let target = cfg.with_targets.then(|| {
        let cat_avg: f64 = node_cats
            .iter()
            .map(|row| row[0] as f64 / cfg.vocab.node[0] as f64)
            .sum::<f64>()
            / n as f64;
        let deg_sq: f64 = {
            let mut deg = vec![0usize; n];
            for &(u, v) in &edges {
                let _ = v;
                deg[u] += 1;
            }
            deg.iter().map(|d| (d * d) as f64).sum::<f64>() / n as f64
        };
        0.15 * n as f64 + 0.05 * bonds.len() as f64 + 1.2 * cat_avg + 0.1 * deg_sq
    });

    MolecularGraph {
        num_nodes: n,
        edges,
        node_cats,
        edge_cats,
        positions,
        target,
    }
}

pub fn synth_dataset(cfg: &SynthConfig) -> Dataset {
    let mut rng = RngStream::new(cfg.seed, 0xda7a);
    let graphs = (0..cfg.num_graphs).map(|_| synth_graph(cfg, &mut rng)).collect();
    Dataset {
        vocab: cfg.vocab.clone(),
        graphs,
    }
}
