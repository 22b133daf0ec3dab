//! The composite training objective: L1 regression plus categorical
//! cross-entropy reconstruction of the uncorrupted node and edge features.

use crate::diff::Var;
use crate::model::{Forward, PackedBatch};
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::corrupt::CorruptionMasks;

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub homo_lumo: f64,
    pub noisy_nodes: f64,
    pub noisy_edges: f64,
}

/// The scalar loss node plus detached term values for logging.
pub struct LossOutput {
    pub total: Var,
    pub total_value: f64,
    pub mae: f64,
    pub ce_nodes: f64,
    pub ce_edges: f64,
    /// Graphs that contributed to the regression term.
    pub labeled_graphs: usize,
}

/// `L = w0·MAE + w1·CE_nodes + w2·CE_edges`. The MAE averages over labeled
/// valid graphs; each CE averages over all valid (entry, column) pairs —
/// or only the corrupted ones when `corrupted_only` masks are given —
/// against the *uncorrupted* categories. Zero-weight terms are skipped
/// entirely, so with weights (1, 0, 0) the loss is exactly the MAE.
pub fn composite_loss(
    fwd: &mut Forward,
    batch: &PackedBatch,
    weights: LossWeights,
    corrupted_only: Option<&[CorruptionMasks]>,
) -> Result<LossOutput> {
    let tape = &mut fwd.tape;
    let cap_g = batch.cap_g;

    let mut total: Option<Var> = None;
    let add_term = |tape: &mut crate::diff::Tape, term: Var, weight: f64, total: &mut Option<Var>| -> Result<f64> {
        let value = tape.value(term).item();
        let scaled = tape.scale(term, weight);
        *total = Some(match *total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
        Ok(value)
    };

    // regression term
    let labeled: Vec<bool> = (0..cap_g)
        .map(|g| batch.graph_valid[g] && batch.target_valid[g])
        .collect();
    let labeled_graphs = labeled.iter().filter(|&&b| b).count();
    let mut mae = 0.0;
    if weights.homo_lumo > 0.0 && labeled_graphs > 0 {
        let targets = tape.constant(Tensor::new(
            vec![cap_g, 1],
            batch.targets.clone(),
        )?);
        let diff = tape.sub(fwd.pred, targets)?;
        let abs = tape.abs(diff);
        let mask: Vec<f64> = labeled.iter().map(|&b| b as u8 as f64).collect();
        let masked = tape.mul_const(abs, mask)?;
        let sum = tape.sum_all(masked);
        let term = tape.scale(sum, 1.0 / labeled_graphs as f64);
        mae = add_term(tape, term, weights.homo_lumo, &mut total)?;
    }

    // reconstruction terms
    let mut ce_nodes = 0.0;
    if weights.noisy_nodes > 0.0 && !fwd.node_logits.is_empty() {
        let mut sum: Option<Var> = None;
        let mut count = 0usize;
        for (c, &logits) in fwd.node_logits.iter().enumerate() {
            let valid: Vec<bool> = (0..batch.cap_n)
                .map(|r| {
                    batch.node_valid[r]
                        && corrupted_only.is_none_or(|ms| entry_changed_node(ms, batch, r, c))
                })
                .collect();
            count += valid.iter().filter(|&&b| b).count();
            let s = tape.cross_entropy_sum(logits, &batch.clean_node_cats[c], &valid)?;
            sum = Some(match sum {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
        if count > 0 {
            let term = tape.scale(sum.expect("columns present"), 1.0 / count as f64);
            ce_nodes = add_term(tape, term, weights.noisy_nodes, &mut total)?;
        }
    }

    let mut ce_edges = 0.0;
    if weights.noisy_edges > 0.0 && !fwd.edge_logits.is_empty() {
        let mut sum: Option<Var> = None;
        let mut count = 0usize;
        for (c, &logits) in fwd.edge_logits.iter().enumerate() {
            let valid: Vec<bool> = (0..batch.cap_m)
                .map(|r| {
                    batch.edge_valid[r]
                        && corrupted_only.is_none_or(|ms| entry_changed_edge(ms, batch, r, c))
                })
                .collect();
            count += valid.iter().filter(|&&b| b).count();
            let s = tape.cross_entropy_sum(logits, &batch.clean_edge_cats[c], &valid)?;
            sum = Some(match sum {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
        if count > 0 {
            let term = tape.scale(sum.expect("columns present"), 1.0 / count as f64);
            ce_edges = add_term(tape, term, weights.noisy_edges, &mut total)?;
        }
    }

    let total = match total {
        Some(t) => t,
        None => tape.scalar(0.0),
    };
    let total_value = tape.value(total).item();
    if !total_value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {total_value}")));
    }
    Ok(LossOutput {
        total,
        total_value,
        mae,
        ce_nodes,
        ce_edges,
        labeled_graphs,
    })
}

/// Map a pack node row back to its graph-local index and look up the mask.
fn entry_changed_node(masks: &[CorruptionMasks], batch: &PackedBatch, row: usize, col: usize) -> bool {
    let g = batch.node_graph[row];
    let local = row - node_offset(batch, g);
    masks[g].node_changed[local][col]
}

fn entry_changed_edge(masks: &[CorruptionMasks], batch: &PackedBatch, row: usize, col: usize) -> bool {
    let g = batch.edge_graph[row];
    let local = row - edge_offset(batch, g);
    masks[g].edge_changed[local][col]
}

fn node_offset(batch: &PackedBatch, g: usize) -> usize {
    (0..batch.cap_n)
        .find(|&r| batch.node_valid[r] && batch.node_graph[r] == g)
        .unwrap_or(0)
}

fn edge_offset(batch: &PackedBatch, g: usize) -> usize {
    (0..batch.cap_m)
        .find(|&r| batch.edge_valid[r] && batch.edge_graph[r] == g)
        .unwrap_or(0)
}
