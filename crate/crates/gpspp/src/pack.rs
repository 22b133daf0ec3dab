//! Streaming packing of variable-size graphs into fixed-capacity packs.
//!
//! Fixed tensor shapes are amortised over several molecules per pack: graphs
//! are appended in order until adding the next one would exceed the node,
//! edge or graph capacity, at which point the pack is closed and a new one
//! opened. Edge capacity counts directed edges (two per bond).

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Capacity of one pack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackSpec {
    pub max_nodes: usize,
    pub max_edges: usize,
    pub max_graphs: usize,
}

impl Default for PackSpec {
    fn default() -> Self {
        PackSpec {
            max_nodes: 60,
            max_edges: 120,
            max_graphs: 8,
        }
    }
}

impl PackSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_nodes == 0 || self.max_edges == 0 || self.max_graphs == 0 {
            return Err(Error::Config("pack capacities must be positive".into()));
        }
        Ok(())
    }
}

/// Sizes of one graph as seen by the packer.
#[derive(Debug, Clone, Copy)]
pub struct GraphSize {
    pub id: usize,
    pub nodes: usize,
    pub edges: usize,
}

/// One slot of a pack: which graph sits where.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackEntry {
    pub graph_id: usize,
    pub node_offset: usize,
    pub edge_offset: usize,
    pub nodes: usize,
    pub edges: usize,
}

/// A closed pack: member graphs with contiguous node/edge offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pack {
    pub spec: PackSpec,
    pub entries: Vec<PackEntry>,
}

impl Pack {
    pub fn nodes_used(&self) -> usize {
        self.entries.iter().map(|e| e.nodes).sum()
    }

    pub fn edges_used(&self) -> usize {
        self.entries.iter().map(|e| e.edges).sum()
    }

    pub fn graphs_used(&self) -> usize {
        self.entries.len()
    }
}

/// Greedy streaming packer: append each graph to the open pack unless any
/// capacity would overflow, else close it and start a new pack. Order is
/// preserved and every graph appears exactly once.
pub fn pack_stream(graphs: &[GraphSize], spec: PackSpec) -> Result<Vec<Pack>> {
    spec.validate()?;
    let mut packs = Vec::new();
    let mut open: Vec<PackEntry> = Vec::new();
    let (mut n_used, mut m_used) = (0usize, 0usize);

    for g in graphs {
        if g.nodes > spec.max_nodes || g.edges > spec.max_edges {
            return Err(Error::Oversize {
                index: g.id,
                details: format!(
                    "{} nodes / {} edges vs capacity {} / {}",
                    g.nodes, g.edges, spec.max_nodes, spec.max_edges
                ),
            });
        }
        let overflows = n_used + g.nodes > spec.max_nodes
            || m_used + g.edges > spec.max_edges
            || open.len() + 1 > spec.max_graphs;
        if overflows {
            packs.push(Pack {
                spec,
                entries: std::mem::take(&mut open),
            });
            n_used = 0;
            m_used = 0;
        }
        open.push(PackEntry {
            graph_id: g.id,
            node_offset: n_used,
            edge_offset: m_used,
            nodes: g.nodes,
            edges: g.edges,
        });
        n_used += g.nodes;
        m_used += g.edges;
    }
    if !open.is_empty() {
        packs.push(Pack { spec, entries: open });
    }
    Ok(packs)
}

/// Node / edge fill fractions and mean graphs per pack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PackEfficiency {
    pub node_efficiency: f64,
    pub edge_efficiency: f64,
    pub mean_graphs_per_pack: f64,
}

pub fn pack_efficiency(packs: &[Pack]) -> Result<PackEfficiency> {
    if packs.is_empty() {
        return Err(Error::Config("efficiency of an empty pack list is undefined".into()));
    }
    let spec = packs[0].spec;
    let (mut nodes, mut edges, mut graphs) = (0usize, 0usize, 0usize);
    for p in packs {
        nodes += p.nodes_used();
        edges += p.edges_used();
        graphs += p.graphs_used();
    }
    let count = packs.len() as f64;
    Ok(PackEfficiency {
        node_efficiency: nodes as f64 / (count * spec.max_nodes as f64),
        edge_efficiency: edges as f64 / (count * spec.max_edges as f64),
        mean_graphs_per_pack: graphs as f64 / count,
    })
}

/// Histogram of graphs-per-pack, indexed by count (0..=max_graphs).
pub fn graphs_per_pack_histogram(packs: &[Pack]) -> Vec<usize> {
    let cap = packs.first().map_or(0, |p| p.spec.max_graphs);
    let mut hist = vec![0usize; cap + 1];
    for p in packs {
        hist[p.graphs_used()] += 1;
    }
    hist
}
