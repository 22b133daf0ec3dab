//! Fixed-capacity tensor assembly of one pack of graphs.
//!
//! Every buffer is padded to the pack capacities; validity masks mark which
//! node / edge / graph rows are real. Padding rows carry index 0 wherever an
//! index is needed — they are excluded from every reduction (masked scatter
//! inputs, masked attention, masked pooling and masked losses), so their
//! values can never reach a valid output or gradient.

use std::cell::Cell;

use crate::encodings::{EncodingConfig, GraphFeatures};
use crate::graph::MolecularGraph;
use crate::pack::{Pack, PackSpec};
use crate::{Error, Result};

/// One graph's slice of a batch.
pub struct BatchItem<'a> {
    /// Model input (possibly corrupted).
    pub graph: &'a MolecularGraph,
    /// Reconstruction targets for the denoising heads.
    pub clean: &'a MolecularGraph,
    pub features: &'a GraphFeatures,
    /// Per-eigencolumn sign flips (training-time randomisation).
    pub sign_flips: Option<&'a [f64]>,
}

/// Flat tensors for one pack.
pub struct PackedBatch {
    pub cap_n: usize,
    pub cap_m: usize,
    pub cap_g: usize,
    pub n_graphs: usize,

    pub node_valid: Vec<bool>,
    pub edge_valid: Vec<bool>,
    pub graph_valid: Vec<bool>,

    /// Graph index per node row (0 for padding).
    pub node_graph: Vec<usize>,
    pub edge_graph: Vec<usize>,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,

    /// Column-major categorical features: `node_cats[c][row]`.
    pub node_cats: Vec<Vec<usize>>,
    pub edge_cats: Vec<Vec<usize>>,
    pub clean_node_cats: Vec<Vec<usize>>,
    pub clean_edge_cats: Vec<Vec<usize>>,

    positions: Option<Vec<f64>>,
    positions_reads: Cell<u64>,

    pub targets: Vec<f64>,
    pub target_valid: Vec<bool>,

    /// `cap_n x k_lap`, sign flips applied.
    pub lap_vecs: Vec<f64>,
    /// `cap_g x k_lap` normalised eigenvalue vectors.
    pub lap_vals: Vec<f64>,
    /// `cap_n x k_rw`.
    pub rw: Vec<f64>,
    pub degree_buckets: Vec<usize>,
    /// `cap_n x cap_n` SPD bucket indices; cross-graph and padding pairs use
    /// the unreachable bucket.
    pub spd_buckets: Vec<usize>,

    /// `cap_n x cap_n`: valid same-graph pairs (the attention mask).
    pub attn_mask: Vec<bool>,
    /// Same mask as 0/1 reals, for zeroing kernel rows.
    pub pair_same_graph: Vec<f64>,
}

impl PackedBatch {
    /// Positions as a flat `cap_n x 3` buffer. Reads are counted so tests
    /// can assert the evaluation path never touches them.
    pub fn positions(&self) -> Option<&[f64]> {
        self.positions_reads.set(self.positions_reads.get() + 1);
        self.positions.as_deref()
    }

    pub fn has_positions(&self) -> bool {
        self.positions.is_some()
    }

    pub fn position_reads(&self) -> u64 {
        self.positions_reads.get()
    }

    pub fn node_valid_f(&self) -> Vec<f64> {
        self.node_valid.iter().map(|&b| b as u8 as f64).collect()
    }

    pub fn edge_valid_f(&self) -> Vec<f64> {
        self.edge_valid.iter().map(|&b| b as u8 as f64).collect()
    }

    /// Assemble one batch at the given capacities. All member graphs must
    /// provide positions for the batch to carry them; a batch used for
    /// evaluation without positions simply omits them.
    pub fn assemble(
        spec: PackSpec,
        items: &[BatchItem<'_>],
        enc: &EncodingConfig,
    ) -> Result<PackedBatch> {
        let (cap_n, cap_m, cap_g) = (spec.max_nodes, spec.max_edges, spec.max_graphs);
        let n_graphs = items.len();
        if n_graphs > cap_g {
            return Err(Error::Config(format!(
                "{n_graphs} graphs for capacity {cap_g}"
            )));
        }
        let total_nodes: usize = items.iter().map(|i| i.graph.num_nodes).sum();
        let total_edges: usize = items.iter().map(|i| i.graph.num_edges()).sum();
        if total_nodes > cap_n || total_edges > cap_m {
            return Err(Error::Config(format!(
                "{total_nodes} nodes / {total_edges} edges exceed capacity {cap_n} / {cap_m}"
            )));
        }
        let num_node_cols = items
            .first()
            .map_or(0, |i| i.graph.node_cats.first().map_or(0, Vec::len));
        let num_edge_cols = items
            .first()
            .map_or(0, |i| i.graph.edge_cats.first().map_or(0, Vec::len));

        let mut b = PackedBatch {
            cap_n,
            cap_m,
            cap_g,
            n_graphs,
            node_valid: vec![false; cap_n],
            edge_valid: vec![false; cap_m],
            graph_valid: vec![false; cap_g],
            node_graph: vec![0; cap_n],
            edge_graph: vec![0; cap_m],
            edge_src: vec![0; cap_m],
            edge_dst: vec![0; cap_m],
            node_cats: vec![vec![0; cap_n]; num_node_cols],
            edge_cats: vec![vec![0; cap_m]; num_edge_cols],
            clean_node_cats: vec![vec![0; cap_n]; num_node_cols],
            clean_edge_cats: vec![vec![0; cap_m]; num_edge_cols],
            positions: None,
            positions_reads: Cell::new(0),
            targets: vec![0.0; cap_g],
            target_valid: vec![false; cap_g],
            lap_vecs: vec![0.0; cap_n * enc.k_lap],
            lap_vals: vec![0.0; cap_g * enc.k_lap],
            rw: vec![0.0; cap_n * enc.k_rw],
            degree_buckets: vec![0; cap_n],
            spd_buckets: vec![enc.unreachable_bucket(); cap_n * cap_n],
            attn_mask: vec![false; cap_n * cap_n],
            pair_same_graph: vec![0.0; cap_n * cap_n],
        };

        let all_positions = !items.is_empty() && items.iter().all(|i| i.graph.positions.is_some());
        let mut positions = all_positions.then(|| vec![0.0; cap_n * 3]);

        let mut node_off = 0usize;
        let mut edge_off = 0usize;
        for (gi, item) in items.iter().enumerate() {
            let g = item.graph;
            let n = g.num_nodes;
            let m = g.num_edges();
            check_topology_matches(g, item.clean)?;
            b.graph_valid[gi] = true;
            if let Some(t) = g.target {
                b.targets[gi] = t;
                b.target_valid[gi] = true;
            }
            for (j, &v) in item.features.spectral.eig_values.iter().enumerate() {
                b.lap_vals[gi * enc.k_lap + j] = v;
            }
            for i in 0..n {
                let row = node_off + i;
                b.node_valid[row] = true;
                b.node_graph[row] = gi;
                for c in 0..num_node_cols {
                    b.node_cats[c][row] = g.node_cats[i][c];
                    b.clean_node_cats[c][row] = item.clean.node_cats[i][c];
                }
                for j in 0..enc.k_lap {
                    let flip = item.sign_flips.map_or(1.0, |f| f[j]);
                    b.lap_vecs[row * enc.k_lap + j] =
                        flip * item.features.spectral.eig_vectors.at2(i, j);
                }
                for s in 0..enc.k_rw {
                    b.rw[row * enc.k_rw + s] = item.features.random_walk.probs.at2(i, s);
                }
                b.degree_buckets[row] = item.features.degree_buckets[i];
                if let (Some(buf), Some(pos)) = (positions.as_mut(), g.positions.as_ref()) {
                    buf[row * 3] = pos[i][0];
                    buf[row * 3 + 1] = pos[i][1];
                    buf[row * 3 + 2] = pos[i][2];
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let (ri, rj) = (node_off + i, node_off + j);
                    b.spd_buckets[ri * cap_n + rj] = item.features.spd.bucket(i, j);
                    b.attn_mask[ri * cap_n + rj] = true;
                    b.pair_same_graph[ri * cap_n + rj] = 1.0;
                }
            }
            for (k, &(u, v)) in g.edges.iter().enumerate() {
                let row = edge_off + k;
                b.edge_valid[row] = true;
                b.edge_graph[row] = gi;
                b.edge_src[row] = node_off + u;
                b.edge_dst[row] = node_off + v;
                for c in 0..num_edge_cols {
                    b.edge_cats[c][row] = g.edge_cats[k][c];
                    b.clean_edge_cats[c][row] = item.clean.edge_cats[k][c];
                }
            }
            node_off += n;
            edge_off += m;
        }
        b.positions = positions;
        Ok(b)
    }

    /// Capacity exactly fitting one graph.
    pub fn single_spec(g: &MolecularGraph) -> PackSpec {
        PackSpec {
            max_nodes: g.num_nodes,
            max_edges: g.num_edges().max(1),
            max_graphs: 1,
        }
    }
}

/// Corruption may only change categories, never topology.
fn check_topology_matches(g: &MolecularGraph, clean: &MolecularGraph) -> Result<()> {
    if g.num_nodes != clean.num_nodes || g.edges != clean.edges {
        return Err(Error::Validation(
            "corrupted and clean graphs disagree on topology".into(),
        ));
    }
    Ok(())
}

/// Batch items from a [`Pack`] over dataset slices.
pub fn items_from_pack<'a>(
    pack: &Pack,
    graphs: &'a [MolecularGraph],
    feats: &'a [GraphFeatures],
) -> Vec<BatchItem<'a>> {
    pack.entries
        .iter()
        .map(|e| BatchItem {
            graph: &graphs[e.graph_id],
            clean: &graphs[e.graph_id],
            features: &feats[e.graph_id],
            sign_flips: None,
        })
        .collect()
}
