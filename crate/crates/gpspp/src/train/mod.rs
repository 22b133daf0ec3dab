//! The training and evaluation loops.
//!
//! Per epoch: shuffle the training indices, pack the stream, then per pack
//! sample one masking group, corrupt the categorical features, run the
//! forward/backward pass and accumulate gradients; clip and apply Adam
//! every `packs_per_step` packs. Everything is driven by counter-based RNG
//! streams keyed on `(seed, purpose, epoch, pack)`, so runs with the same
//! seed produce bit-identical metric logs.

pub mod adam;
pub mod config;
pub mod corrupt;
pub mod loss;
pub mod masking;

pub use adam::{clip_global_norm, learning_rate, Adam};
pub use config::TrainConfig;
pub use corrupt::{corrupt_features, CorruptionMasks};
pub use loss::{composite_loss, LossOutput, LossWeights};
pub use masking::{sample_masking_group, MaskingGroup};

use serde::Serialize;

use crate::encodings::{featurize_dataset, GraphFeatures};
use crate::graph::{Dataset, DatasetSplit, MolecularGraph};
use crate::model::{
    collect_grads, forward, predict_batch, BatchItem, Forward, ForwardOptions, Mode, ModelConfig,
    PackedBatch, ParamStore,
};
use crate::pack::{pack_stream, GraphSize, PackSpec};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{Error, Result};

// rng stream purposes
const STREAM_SHUFFLE: u64 = 1;
const STREAM_GROUP: u64 = 2;
const STREAM_CORRUPT: u64 = 3;
const STREAM_DROPOUT: u64 = 4;
const STREAM_SIGNS: u64 = 5;

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub steps: u64,
    pub final_train_mae: f64,
    pub final_eval_mae: Option<f64>,
    pub best_eval_mae: Option<f64>,
    pub diverged_at_step: Option<u64>,
    pub seed: u64,
    pub train_graphs: usize,
    pub eval_graphs: usize,
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub metrics_csv: String,
    pub summary: TrainSummary,
}

pub const METRICS_HEADER: &str = "epoch,split,mae,loss_total,loss_mae,loss_noisy_nodes,loss_noisy_edges";

struct EpochStats {
    mae_weighted: f64,
    labeled: usize,
    loss_total: f64,
    loss_mae: f64,
    loss_nodes: f64,
    loss_edges: f64,
    batches: usize,
}

impl EpochStats {
    fn new() -> Self {
        EpochStats {
            mae_weighted: 0.0,
            labeled: 0,
            loss_total: 0.0,
            loss_mae: 0.0,
            loss_nodes: 0.0,
            loss_edges: 0.0,
            batches: 0,
        }
    }

    fn absorb(&mut self, l: &LossOutput) {
        self.mae_weighted += l.mae * l.labeled_graphs as f64;
        self.labeled += l.labeled_graphs;
        self.loss_total += l.total_value;
        self.loss_mae += l.mae;
        self.loss_nodes += l.ce_nodes;
        self.loss_edges += l.ce_edges;
        self.batches += 1;
    }

    fn train_mae(&self) -> f64 {
        if self.labeled == 0 {
            f64::NAN
        } else {
            self.mae_weighted / self.labeled as f64
        }
    }
}

/// Train on the split's training indices, evaluating on its eval indices
/// after every epoch. A non-finite loss aborts the run and returns the
/// parameters from the last completed epoch.
pub fn train(
    dataset: &Dataset,
    split: &DatasetSplit,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let enc = model_cfg.encoding_config();
    let spec = train_cfg.pack_spec();
    let feats = featurize_dataset(&dataset.graphs, &enc)?;

    let mut params = ParamStore::init(model_cfg, &dataset.vocab, train_cfg.seed);
    let mut adam = Adam::new(&params, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps);
    let root = RngStream::new(train_cfg.seed, 0);

    // schedule totals from the unshuffled packing (pack counts shift a
    // little under shuffling; the decay clamps at zero)
    let nominal_packs = pack_stream(&graph_sizes(&dataset.graphs, &split.train_indices)?, spec)?
        .len()
        .max(1);
    let steps_per_epoch = nominal_packs.div_ceil(train_cfg.packs_per_step) as u64;
    let warmup_steps = steps_per_epoch * train_cfg.warmup_epochs as u64;
    let total_steps = steps_per_epoch * train_cfg.total_epochs as u64;

    let weights = LossWeights {
        homo_lumo: train_cfg.w_homo_lumo,
        noisy_nodes: train_cfg.w_noisy_nodes,
        noisy_edges: train_cfg.w_noisy_edges,
    };
    let want_aux = weights.noisy_nodes > 0.0 || weights.noisy_edges > 0.0;

    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut step: u64 = 0;
    let mut last_good = params.clone();
    let mut diverged_at = None;
    let mut epochs_run = 0;
    let mut final_train_mae = f64::NAN;
    let mut final_eval_mae = None;
    let mut best_eval_mae: Option<f64> = None;

    'epochs: for epoch in 0..train_cfg.total_epochs {
        let e = epoch as u64;
        let mut indices = split.train_indices.clone();
        root.derive(&[STREAM_SHUFFLE, e]).shuffle(&mut indices);

        // eigenvector sign randomisation, one draw per graph per epoch
        let sign_flips: std::collections::HashMap<usize, Vec<f64>> = if train_cfg.randomize_eig_signs {
            let mut rng = root.derive(&[STREAM_SIGNS, e]);
            indices
                .iter()
                .map(|&i| {
                    let flips = (0..enc.k_lap)
                        .map(|_| if rng.bernoulli(0.5) { -1.0 } else { 1.0 })
                        .collect();
                    (i, flips)
                })
                .collect()
        } else {
            Default::default()
        };

        let packs = pack_stream(&graph_sizes(&dataset.graphs, &indices)?, spec)?;
        let mut group_rng = root.derive(&[STREAM_GROUP, e]);
        let mut stats = EpochStats::new();

        for chunk in packs.chunks(train_cfg.packs_per_step) {
            let mut accum: Option<Vec<Tensor>> = None;
            let inv_chunk = 1.0 / chunk.len() as f64;
            for (pi, pack) in chunk.iter().enumerate() {
                let group = sample_masking_group(
                    (
                        train_cfg.mask_ratio_spatial,
                        train_cfg.mask_ratio_topological,
                        train_cfg.mask_ratio_none,
                    ),
                    &mut group_rng,
                );
                let mut corrupt_rng = root.derive(&[STREAM_CORRUPT, e, step, pi as u64]);
                let mut corrupted = Vec::with_capacity(pack.entries.len());
                let mut masks = Vec::with_capacity(pack.entries.len());
                for entry in &pack.entries {
                    let (g, m) = corrupt_features(
                        &dataset.graphs[entry.graph_id],
                        &dataset.vocab,
                        train_cfg.p_corrupt,
                        &mut corrupt_rng,
                    );
                    corrupted.push(g);
                    masks.push(m);
                }
                let items: Vec<BatchItem> = pack
                    .entries
                    .iter()
                    .zip(&corrupted)
                    .map(|(entry, g)| BatchItem {
                        graph: g,
                        clean: &dataset.graphs[entry.graph_id],
                        features: &feats[entry.graph_id],
                        sign_flips: sign_flips.get(&entry.graph_id).map(Vec::as_slice),
                    })
                    .collect();
                let batch = PackedBatch::assemble(spec, &items, &enc)?;
                // a pack without positions can only run the spatial group
                let group = if batch.has_positions() {
                    group
                } else {
                    MaskingGroup::Spatial
                };

                let mut dropout_rng = root.derive(&[STREAM_DROPOUT, e, step, pi as u64]);
                let mut fwd = forward(
                    model_cfg,
                    &params,
                    &batch,
                    group,
                    &mut Mode::Train {
                        rng: &mut dropout_rng,
                    },
                    &ForwardOptions {
                        want_grad: true,
                        want_aux,
                    },
                )?;
                let loss = composite_loss(
                    &mut fwd,
                    &batch,
                    weights,
                    train_cfg.ce_corrupted_only.then_some(masks.as_slice()),
                )?;
                if !loss.total_value.is_finite() {
                    diverged_at = Some(step + 1);
                    break 'epochs;
                }
                stats.absorb(&loss);

                let scaled = fwd.tape.scale(loss.total, inv_chunk);
                fwd.tape.backward(scaled)?;
                let grads = collect_grads(&fwd, &params)?;
                accum = Some(match accum {
                    None => grads,
                    Some(mut acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                        acc
                    }
                });
            }

            let mut grads = accum.expect("non-empty chunk");
            step += 1;
            let lr = learning_rate(step, warmup_steps, total_steps, train_cfg.peak_lr);
            clip_global_norm(&mut grads, train_cfg.grad_clip);
            if let Err(err) = adam.step(&mut params, &grads, lr) {
                match err {
                    Error::Numeric(_) => {
                        diverged_at = Some(step);
                        break 'epochs;
                    }
                    other => return Err(other),
                }
            }
            if train_cfg.max_steps > 0 && step >= train_cfg.max_steps {
                epochs_run = epoch + 1;
                final_train_mae = stats.train_mae();
                push_train_row(&mut metrics, epoch, &stats);
                last_good = params.clone();
                break 'epochs;
            }
        }

        epochs_run = epoch + 1;
        final_train_mae = stats.train_mae();
        push_train_row(&mut metrics, epoch, &stats);

        if !split.eval_indices.is_empty() {
            let mae = evaluate_mae(model_cfg, &params, &dataset.graphs, &feats, &split.eval_indices, spec)?;
            if let Some(mae) = mae {
                metrics.push_str(&format!("{epoch},eval,{mae},,,,\n"));
                final_eval_mae = Some(mae);
                best_eval_mae = Some(best_eval_mae.map_or(mae, |b: f64| b.min(mae)));
            }
        }
        last_good = params.clone();
    }

    if diverged_at.is_some() {
        params = last_good;
    }
    let summary = TrainSummary {
        epochs_run,
        steps: step,
        final_train_mae,
        final_eval_mae,
        best_eval_mae,
        diverged_at_step: diverged_at,
        seed: train_cfg.seed,
        train_graphs: split.train_indices.len(),
        eval_graphs: split.eval_indices.len(),
    };
    Ok(TrainOutcome {
        params,
        metrics_csv: metrics,
        summary,
    })
}

fn push_train_row(metrics: &mut String, epoch: usize, stats: &EpochStats) {
    let b = stats.batches.max(1) as f64;
    metrics.push_str(&format!(
        "{},train,{},{},{},{},{}\n",
        epoch,
        stats.train_mae(),
        stats.loss_total / b,
        stats.loss_mae / b,
        stats.loss_nodes / b,
        stats.loss_edges / b,
    ));
}

fn graph_sizes(graphs: &[MolecularGraph], indices: &[usize]) -> Result<Vec<GraphSize>> {
    indices
        .iter()
        .map(|&i| {
            graphs
                .get(i)
                .map(|g| GraphSize {
                    id: i,
                    nodes: g.num_nodes,
                    edges: g.num_edges(),
                })
                .ok_or_else(|| Error::Config(format!("split index {i} out of range")))
        })
        .collect()
}

/// Mean absolute error of deterministic predictions over the labeled graphs
/// among `indices`, packed with `spec`. `None` if nothing is labeled.
pub fn evaluate_mae(
    cfg: &ModelConfig,
    params: &ParamStore,
    graphs: &[MolecularGraph],
    feats: &[GraphFeatures],
    indices: &[usize],
    spec: PackSpec,
) -> Result<Option<f64>> {
    let preds = predict_indices(cfg, params, graphs, feats, indices, spec)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (&i, pred) in indices.iter().zip(&preds) {
        if let Some(target) = graphs[i].target {
            total += (pred - target).abs();
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Deterministic predictions for `indices`, in order.
pub fn predict_indices(
    cfg: &ModelConfig,
    params: &ParamStore,
    graphs: &[MolecularGraph],
    feats: &[GraphFeatures],
    indices: &[usize],
    spec: PackSpec,
) -> Result<Vec<f64>> {
    let enc = cfg.encoding_config();
    let packs = pack_stream(&graph_sizes(graphs, indices)?, spec)?;
    let mut preds = Vec::with_capacity(indices.len());
    for pack in &packs {
        let items: Vec<BatchItem> = pack
            .entries
            .iter()
            .map(|e| BatchItem {
                graph: &graphs[e.graph_id],
                clean: &graphs[e.graph_id],
                features: &feats[e.graph_id],
                sign_flips: None,
            })
            .collect();
        let batch = PackedBatch::assemble(spec, &items, &enc)?;
        preds.extend(predict_batch(cfg, params, &batch)?);
    }
    Ok(preds)
}

/// Forward + loss once without updating anything; used by tests to compare
/// against independently scripted loss values.
pub fn loss_of_batch(
    cfg: &ModelConfig,
    params: &ParamStore,
    batch: &PackedBatch,
    group: MaskingGroup,
    weights: LossWeights,
) -> Result<(Forward, LossOutput)> {
    let mut fwd = forward(
        cfg,
        params,
        batch,
        group,
        &mut Mode::Eval,
        &ForwardOptions {
            want_grad: false,
            want_aux: true,
        },
    )?;
    let loss = composite_loss(&mut fwd, batch, weights, None)?;
    Ok((fwd, loss))
}

#[cfg(test)]
mod tests;
