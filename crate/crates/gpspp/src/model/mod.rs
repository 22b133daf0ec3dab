//! The network: input encoder, a stack of message-passing / biased-attention
//! blocks, a sum-pool decoder and the denoising reconstruction heads.
//!
//! Each block runs a local MPNN and a globally-biased attention module in
//! parallel on the node states and combines them with a feed-forward
//! network. Edge and global feature streams flow through the MPNN only.
//! All padding rows are kept out of every reduction by masks, so a graph's
//! outputs are identical whether it is packed with others or alone.

pub mod batch;
pub mod config;
pub mod params;

pub use batch::{items_from_pack, BatchItem, PackedBatch};
pub use config::{config_from_toml, config_to_toml, ModelConfig, ATTENTION_SCALE_PER_HEAD};
pub use params::{count_params, load_checkpoint, param_specs, save_checkpoint, ParamStore};

use std::collections::HashMap;

use crate::diff::{dropout_mask, Tape, Var};
use crate::encodings::distance_kernels;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Which feature group is stochastically removed for this sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskingGroup {
    /// Remove every 3D-derived feature (node, edge and bias terms).
    Spatial,
    /// Remove the shortest-path-distance attention bias.
    Topological,
    /// Keep everything.
    NoMask,
}

/// Training (live dropout) or deterministic evaluation.
pub enum Mode<'r> {
    Train { rng: &'r mut RngStream },
    Eval,
}

/// Parameter tensors bound to a tape as leaves.
pub struct Binder {
    map: HashMap<String, Var>,
}

impl Binder {
    pub fn bind(tape: &mut Tape, params: &ParamStore, requires_grad: bool) -> Binder {
        let mut map = HashMap::with_capacity(params.len());
        for (name, tensor) in params.iter() {
            map.insert(name.clone(), tape.leaf(tensor.clone(), requires_grad));
        }
        Binder { map }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
    }
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: &mut Mode) -> Result<Var> {
    match mode {
        Mode::Train { rng } if rate > 0.0 => {
            let mask = dropout_mask(tape.value(x).len(), rate, rng);
            tape.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}

/// Stochastic depth: zero a whole graph's rows at once, scaled by the keep
/// probability, relying on the residual connections to carry the signal.
fn graph_dropout(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    row_graph: &[usize],
    cap_g: usize,
    mode: &mut Mode,
) -> Result<Var> {
    match mode {
        Mode::Train { rng } if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let per_graph: Vec<f64> = (0..cap_g)
                .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
                .collect();
            let coeff: Vec<f64> = row_graph.iter().map(|&g| per_graph[g]).collect();
            tape.row_scale(x, coeff)
        }
        _ => Ok(x),
    }
}

fn dense(tape: &mut Tape, binder: &Binder, prefix: &str, x: Var) -> Result<Var> {
    let w = binder.var(&format!("{prefix}/w"))?;
    let b = binder.var(&format!("{prefix}/b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn dense2(tape: &mut Tape, binder: &Binder, w: &str, b: &str, x: Var) -> Result<Var> {
    let wv = binder.var(w)?;
    let bv = binder.var(b)?;
    let y = tape.matmul(x, wv)?;
    tape.add_row(y, bv)
}

/// `Dense -> GELU -> LayerNorm -> Dense`, the block MLP shape.
fn house_mlp(tape: &mut Tape, binder: &Binder, prefix: &str, x: Var) -> Result<Var> {
    let h = dense2(tape, binder, &format!("{prefix}/w1"), &format!("{prefix}/b1"), x)?;
    let h = tape.gelu(h);
    let g = binder.var(&format!("{prefix}/ln_g"))?;
    let b = binder.var(&format!("{prefix}/ln_b"))?;
    let h = tape.layer_norm(h, g, b)?;
    dense2(tape, binder, &format!("{prefix}/w2"), &format!("{prefix}/b2"), h)
}

/// `LayerNorm -> Dense -> ReLU -> LayerNorm -> Dense -> Dropout`, the
/// fixed-latent feature encoder.
fn encoder_mlp(
    tape: &mut Tape,
    binder: &Binder,
    prefix: &str,
    x: Var,
    rate: f64,
    mode: &mut Mode,
) -> Result<Var> {
    let g1 = binder.var(&format!("{prefix}/ln1_g"))?;
    let b1 = binder.var(&format!("{prefix}/ln1_b"))?;
    let h = tape.layer_norm(x, g1, b1)?;
    let h = dense2(tape, binder, &format!("{prefix}/w1"), &format!("{prefix}/b1"), h)?;
    let h = tape.relu(h);
    let g2 = binder.var(&format!("{prefix}/ln2_g"))?;
    let b2 = binder.var(&format!("{prefix}/ln2_b"))?;
    let h = tape.layer_norm(h, g2, b2)?;
    let h = dense2(tape, binder, &format!("{prefix}/w2"), &format!("{prefix}/b2"), h)?;
    dropout(tape, h, rate, mode)
}

/// The four initialised streams plus the shared attention bias.
pub struct EncodedInputs {
    pub x0: Var,
    pub e0: Option<Var>,
    pub g0: Option<Var>,
    /// `(cap_n², heads)` additive attention bias, when any component is on.
    pub bias: Option<Var>,
    /// `(cap_n², K)` Gaussian kernel tensor, kept for per-layer biases.
    pub psi: Option<Var>,
}

/// Sum the attention-bias components that survive the masking group.
fn build_bias(
    tape: &mut Tape,
    cfg: &ModelConfig,
    binder: &Binder,
    batch: &PackedBatch,
    group: MaskingGroup,
    psi: Option<Var>,
    prefix: &str,
) -> Result<Option<Var>> {
    let mut parts: Vec<Var> = Vec::new();
    if cfg.use_spd_bias && group != MaskingGroup::Topological {
        let table = binder.var(&format!("{prefix}/spd_bias"))?;
        parts.push(tape.gather_rows(table, &batch.spd_buckets)?);
    }
    if cfg.use_3d_bias {
        if let Some(psi) = psi {
            let h = dense2(
                tape,
                binder,
                &format!("{prefix}/bias3d/w1"),
                &format!("{prefix}/bias3d/b1"),
                psi,
            )?;
            let h = tape.gelu(h);
            parts.push(dense2(
                tape,
                binder,
                &format!("{prefix}/bias3d/w2"),
                &format!("{prefix}/bias3d/b2"),
                h,
            )?);
        }
    }
    Ok(match parts.len() {
        0 => None,
        1 => Some(parts[0]),
        _ => Some(tape.add(parts[0], parts[1])?),
    })
}

/// Build the initial node / edge / global states and attention bias from a
/// packed batch. Masked feature groups are replaced by exact zeros; under
/// the spatial mask the positions buffer is never read.
pub fn encode_inputs(
    tape: &mut Tape,
    cfg: &ModelConfig,
    binder: &Binder,
    batch: &PackedBatch,
    group: MaskingGroup,
    mode: &mut Mode,
) -> Result<EncodedInputs> {
    if group != MaskingGroup::Spatial && !batch.has_positions() {
        return Err(Error::Masking(
            "positions are required unless the spatial group is masked".into(),
        ));
    }
    let (cap_n, cap_m, cap_g) = (batch.cap_n, batch.cap_m, batch.cap_g);
    let latent = cfg.encoder_latent;
    let enc = cfg.encoding_config();

    // chemical node features: sum of per-column embeddings through the MLP
    let mut x_sum: Option<Var> = None;
    for (c, cats) in batch.node_cats.iter().enumerate() {
        let table = binder.var(&format!("encoder/atom_embed/{c}"))?;
        let rows = tape.gather_rows(table, cats)?;
        x_sum = Some(match x_sum {
            None => rows,
            Some(acc) => tape.add(acc, rows)?,
        });
    }
    let x_sum = x_sum.ok_or_else(|| Error::Config("no node feature columns".into()))?;
    let x_atom = house_mlp(tape, binder, "encoder/atom_mlp", x_sum)?;
    let x_atom = dropout(tape, x_atom, cfg.dropout_encoder, mode)?;

    let mut x_parts = vec![x_atom];
    if cfg.use_lap_pe {
        let vecs = tape.constant(Tensor::new(vec![cap_n, enc.k_lap], batch.lap_vecs.clone())?);
        x_parts.push(encoder_mlp(tape, binder, "encoder/lapvec", vecs, cfg.dropout_encoder, mode)?);
        let vals = tape.constant(Tensor::new(vec![cap_g, enc.k_lap], batch.lap_vals.clone())?);
        let vals = encoder_mlp(tape, binder, "encoder/lapval", vals, cfg.dropout_encoder, mode)?;
        x_parts.push(tape.gather_rows(vals, &batch.node_graph)?);
    }
    if cfg.use_rwse {
        let rw = tape.constant(Tensor::new(vec![cap_n, enc.k_rw], batch.rw.clone())?);
        x_parts.push(encoder_mlp(tape, binder, "encoder/rwse", rw, cfg.dropout_encoder, mode)?);
    }
    if cfg.use_local_centrality {
        let table = binder.var("encoder/cent_embed")?;
        x_parts.push(tape.gather_rows(table, &batch.degree_buckets)?);
    }

    // 3D-derived features share one kernel tensor
    let mut psi = None;
    if group != MaskingGroup::Spatial && cfg.kernels_active() {
        let pos = batch
            .positions()
            .expect("positions checked above")
            .to_vec();
        let pos_t = tape.constant(Tensor::new(vec![cap_n, 3], pos)?);
        if !tape.value(pos_t).all_finite() {
            return Err(Error::Numeric("non-finite positions".into()));
        }
        let dist = tape.pairwise_dist(pos_t)?;
        let mu = binder.var("encoder/kernels/mu")?;
        let sigma = binder.var("encoder/kernels/sigma")?;
        psi = Some(distance_kernels(tape, dist, mu, sigma)?);
    }

    if cfg.use_3d_centrality {
        let x3d = match psi {
            Some(psi) => {
                // sum ψ over same-graph partners only
                let masked = tape.row_scale(psi, batch.pair_same_graph.clone())?;
                let pair_rows: Vec<usize> = (0..cap_n * cap_n).map(|r| r / cap_n).collect();
                let summed = tape.scatter_add_rows(masked, &pair_rows, cap_n)?;
                let w3d = binder.var("encoder/w3d")?;
                tape.matmul(summed, w3d)?
            }
            None => tape.constant(Tensor::zeros(vec![cap_n, latent])),
        };
        x_parts.push(x3d);
    }

    let x_all = tape.concat_cols(&x_parts)?;
    let x0 = dense(tape, binder, "encoder/x_dense", x_all)?;

    let e0 = if cfg.use_edge_features {
        let mut e_sum: Option<Var> = None;
        for (c, cats) in batch.edge_cats.iter().enumerate() {
            let table = binder.var(&format!("encoder/bond_embed/{c}"))?;
            let rows = tape.gather_rows(table, cats)?;
            e_sum = Some(match e_sum {
                None => rows,
                Some(acc) => tape.add(acc, rows)?,
            });
        }
        let e_sum = e_sum.ok_or_else(|| Error::Config("no edge feature columns".into()))?;
        let e_bond = house_mlp(tape, binder, "encoder/bond_mlp", e_sum)?;
        let e_bond = dropout(tape, e_bond, cfg.dropout_encoder, mode)?;
        let mut e_parts = vec![e_bond];
        if cfg.use_bond_lengths {
            let e3d = match psi {
                Some(psi) => {
                    let pair_rows: Vec<usize> = (0..cap_m)
                        .map(|k| batch.edge_src[k] * cap_n + batch.edge_dst[k])
                        .collect();
                    let psi_edges = tape.gather_rows(psi, &pair_rows)?;
                    encoder_mlp(tape, binder, "encoder/e3d", psi_edges, cfg.dropout_encoder, mode)?
                }
                None => tape.constant(Tensor::zeros(vec![cap_m, latent])),
            };
            e_parts.push(e3d);
        }
        let e_in = tape.concat_cols(&e_parts)?;
        Some(dense(tape, binder, "encoder/e_dense", e_in)?)
    } else {
        None
    };

    let g0 = if cfg.use_global_features {
        let table = binder.var("encoder/g_embed")?;
        Some(tape.gather_rows(table, &vec![0; cap_g])?)
    } else {
        None
    };

    let bias = if cfg.use_mhsa && !cfg.per_layer_bias {
        build_bias(tape, cfg, binder, batch, group, psi, "encoder")?
    } else {
        None
    };

    Ok(EncodedInputs {
        x0,
        e0,
        g0,
        bias,
        psi,
    })
}

/// One message-passing layer. Returns the normalised node update plus the
/// residual-updated edge and global streams.
#[allow(clippy::too_many_arguments)]
fn mpnn_layer(
    tape: &mut Tape,
    cfg: &ModelConfig,
    binder: &Binder,
    batch: &PackedBatch,
    l: usize,
    x: Var,
    e: Option<Var>,
    g: Option<Var>,
    mode: &mut Mode,
) -> Result<(Var, Option<Var>, Option<Var>)> {
    let prefix = format!("layer{l}/mpnn");
    let (cap_n, cap_g) = (batch.cap_n, batch.cap_g);
    let edge_mask = batch.edge_valid_f();
    let node_mask = batch.node_valid_f();

    let xu = tape.gather_rows(x, &batch.edge_src)?;
    let xv = tape.gather_rows(x, &batch.edge_dst)?;

    // per-edge messages
    let ebar = if cfg.use_edge_features {
        let ev = e.ok_or_else(|| Error::Config("edge stream missing".into()))?;
        let mut parts = vec![xu, xv, ev];
        if let Some(gv) = g {
            parts.push(tape.gather_rows(gv, &batch.edge_graph)?);
        }
        let c_uv = tape.concat_cols(&parts)?;
        let msg = house_mlp(tape, binder, &format!("{prefix}/edge_mlp"), c_uv)?;
        let msg = dropout(tape, msg, cfg.dropout_message, mode)?;
        // padding edges must contribute nothing to any aggregation
        Some(tape.row_scale(msg, edge_mask.clone())?)
    } else {
        None
    };

    // per-node aggregate: state, message sums, adjacent-node sums, global
    let mut parts = vec![x];
    if let Some(msg) = ebar {
        parts.push(tape.scatter_add_rows(msg, &batch.edge_dst, cap_n)?);
        if cfg.use_sender_aggregation {
            parts.push(tape.scatter_add_rows(msg, &batch.edge_src, cap_n)?);
        }
    }
    if cfg.use_adjacent_node_aggregation {
        let xu_m = tape.row_scale(xu, edge_mask.clone())?;
        parts.push(tape.scatter_add_rows(xu_m, &batch.edge_dst, cap_n)?);
        if cfg.use_sender_aggregation {
            let xv_m = tape.row_scale(xv, edge_mask)?;
            parts.push(tape.scatter_add_rows(xv_m, &batch.edge_src, cap_n)?);
        }
    }
    if let Some(gv) = g {
        parts.push(tape.gather_rows(gv, &batch.node_graph)?);
    }
    let c_i = tape.concat_cols(&parts)?;
    let xbar = house_mlp(tape, binder, &format!("{prefix}/node_mlp"), c_i)?;

    // global update reads the raw node update, per-graph sums only
    let g_next = match g {
        Some(gv) => {
            let xbar_m = tape.row_scale(xbar, node_mask)?;
            let sum_x = tape.scatter_add_rows(xbar_m, &batch.node_graph, cap_g)?;
            let mut gparts = vec![gv, sum_x];
            if let Some(msg) = ebar {
                gparts.push(tape.scatter_add_rows(msg, &batch.edge_graph, cap_g)?);
            }
            let c_g = tape.concat_cols(&gparts)?;
            let gbar = house_mlp(tape, binder, &format!("{prefix}/global_mlp"), c_g)?;
            let gbar = dropout(tape, gbar, cfg.dropout_global, mode)?;
            Some(tape.add(gbar, gv)?)
        }
        None => None,
    };

    let xbar_d = dropout(tape, xbar, cfg.dropout_node, mode)?;
    let y_pre = tape.add(xbar_d, x)?;
    let ln_g = binder.var(&format!("{prefix}/ln_g"))?;
    let ln_b = binder.var(&format!("{prefix}/ln_b"))?;
    let y = tape.layer_norm(y_pre, ln_g, ln_b)?;

    let e_next = match (ebar, e) {
        (Some(msg), Some(ev)) => Some(tape.add(msg, ev)?),
        (_, ev) => ev,
    };
    Ok((y, e_next, g_next))
}

/// Multi-head self-attention with an additive structural bias, cross-graph
/// and padding pairs masked out. Returns `Z` including its residual.
#[allow(clippy::too_many_arguments)]
fn biased_attention(
    tape: &mut Tape,
    cfg: &ModelConfig,
    binder: &Binder,
    batch: &PackedBatch,
    l: usize,
    x: Var,
    bias: Option<Var>,
    mode: &mut Mode,
) -> Result<Var> {
    let prefix = format!("layer{l}/attn");
    let cap_n = batch.cap_n;
    let q = {
        let w = binder.var(&format!("{prefix}/wq"))?;
        tape.matmul(x, w)?
    };
    let k = {
        let w = binder.var(&format!("{prefix}/wk"))?;
        tape.matmul(x, w)?
    };
    let v = {
        let w = binder.var(&format!("{prefix}/wv"))?;
        tape.matmul(x, w)?
    };
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut head_outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let raw = tape.matmul_nt(qh, kh)?;
        let mut logits = tape.scale(raw, scale);
        if let Some(b) = bias {
            let bh = tape.slice_cols(b, h, 1)?;
            let bh = tape.reshape(bh, vec![cap_n, cap_n])?;
            logits = tape.add(logits, bh)?;
        }
        let attn = tape.masked_softmax(logits, &batch.attn_mask)?;
        let attn = dropout(tape, attn, cfg.dropout_attention, mode)?;
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let mixed = tape.concat_cols(&head_outs)?;
    let p = dense2(tape, binder, &format!("{prefix}/wp"), &format!("{prefix}/bp"), mixed)?;
    let p = graph_dropout(
        tape,
        p,
        cfg.graph_dropout_rate(l),
        &batch.node_graph,
        batch.cap_g,
        mode,
    )?;
    tape.add(p, x)
}

fn ffn(
    tape: &mut Tape,
    cfg: &ModelConfig,
    binder: &Binder,
    batch: &PackedBatch,
    l: usize,
    s: Var,
    mode: &mut Mode,
) -> Result<Var> {
    let prefix = format!("layer{l}/ffn");
    let h = dense2(tape, binder, &format!("{prefix}/w1"), &format!("{prefix}/b1"), s)?;
    let h = tape.gelu(h);
    let h = dropout(tape, h, cfg.dropout_ffn, mode)?;
    let o = dense2(tape, binder, &format!("{prefix}/w2"), &format!("{prefix}/b2"), h)?;
    let o = graph_dropout(
        tape,
        o,
        cfg.graph_dropout_rate(l),
        &batch.node_graph,
        batch.cap_g,
        mode,
    )?;
    tape.add(o, s)
}

/// Node / edge / global states flowing through the block stack.
pub struct StreamState {
    pub x: Var,
    pub e: Option<Var>,
    pub g: Option<Var>,
}

/// One full block: MPNN and attention in parallel, their sum through the
/// FFN. Disabled submodules drop out of the sum; with everything disabled
/// the block is the identity.
#[allow(clippy::too_many_arguments)]
pub fn gps_block(
    tape: &mut Tape,
    cfg: &ModelConfig,
    binder: &Binder,
    batch: &PackedBatch,
    l: usize,
    state: StreamState,
    bias: Option<Var>,
    mode: &mut Mode,
) -> Result<StreamState> {
    let (y, e_next, g_next) = if cfg.use_mpnn {
        mpnn_layer(tape, cfg, binder, batch, l, state.x, state.e, state.g, mode)?
    } else {
        (state.x, state.e, state.g)
    };
    let z = if cfg.use_mhsa {
        Some(biased_attention(tape, cfg, binder, batch, l, state.x, bias, mode)?)
    } else {
        None
    };
    let s = match (cfg.use_mpnn, z) {
        (true, Some(z)) => tape.add(y, z)?,
        (true, None) => y,
        (false, Some(z)) => z,
        (false, None) => state.x,
    };
    let x_next = if cfg.use_ffn {
        ffn(tape, cfg, binder, batch, l, s, mode)?
    } else {
        s
    };
    Ok(StreamState {
        x: x_next,
        e: e_next,
        g: g_next,
    })
}

/// Per-graph prediction: masked sum-pool of node states through a two-layer
/// MLP. Returns `(cap_g, 1)`.
pub fn decode(
    tape: &mut Tape,
    binder: &Binder,
    batch: &PackedBatch,
    x_final: Var,
) -> Result<Var> {
    let xm = tape.row_scale(x_final, batch.node_valid_f())?;
    let pooled = tape.scatter_add_rows(xm, &batch.node_graph, batch.cap_g)?;
    let h = dense2(tape, binder, "decoder/w1", "decoder/b1", pooled)?;
    let h = tape.gelu(h);
    dense2(tape, binder, "decoder/w2", "decoder/b2", h)
}

pub struct ForwardOptions {
    pub want_grad: bool,
    /// Also compute the denoising reconstruction logits.
    pub want_aux: bool,
}

/// A completed forward pass; the tape can be driven backward from any
/// scalar derived from these handles.
pub struct Forward {
    pub tape: Tape,
    pub binder: Binder,
    /// `(cap_g, 1)` predictions (padding rows are meaningless).
    pub pred: Var,
    /// Final node states after the last block.
    pub x_final: Var,
    /// Per-column reconstruction logits over node categories.
    pub node_logits: Vec<Var>,
    /// Per-column reconstruction logits over edge categories.
    pub edge_logits: Vec<Var>,
}

pub fn forward(
    cfg: &ModelConfig,
    params: &ParamStore,
    batch: &PackedBatch,
    group: MaskingGroup,
    mode: &mut Mode,
    opts: &ForwardOptions,
) -> Result<Forward> {
    let mut tape = Tape::new();
    let binder = Binder::bind(&mut tape, params, opts.want_grad);
    let enc = encode_inputs(&mut tape, cfg, &binder, batch, group, mode)?;
    let mut state = StreamState {
        x: enc.x0,
        e: enc.e0,
        g: enc.g0,
    };
    for l in 0..cfg.layers {
        let bias = if cfg.use_mhsa && cfg.per_layer_bias {
            build_bias(&mut tape, cfg, &binder, batch, group, enc.psi, &format!("layer{l}"))?
        } else {
            enc.bias
        };
        state = gps_block(&mut tape, cfg, &binder, batch, l, state, bias, mode)?;
    }
    let pred = decode(&mut tape, &binder, batch, state.x)?;

    let mut node_logits = Vec::new();
    let mut edge_logits = Vec::new();
    if opts.want_aux {
        for c in 0..batch.node_cats.len() {
            node_logits.push(dense(&mut tape, &binder, &format!("heads/node{c}"), state.x)?);
        }
        if cfg.use_edge_features {
            let e_final = state
                .e
                .ok_or_else(|| Error::Config("edge stream missing".into()))?;
            for c in 0..batch.edge_cats.len() {
                edge_logits.push(dense(&mut tape, &binder, &format!("heads/edge{c}"), e_final)?);
            }
        }
    }
    Ok(Forward {
        tape,
        binder,
        pred,
        x_final: state.x,
        node_logits,
        edge_logits,
    })
}

/// Deterministic per-graph predictions for the batch's valid graphs.
pub fn predict_batch(
    cfg: &ModelConfig,
    params: &ParamStore,
    batch: &PackedBatch,
) -> Result<Vec<f64>> {
    let group = if batch.has_positions() {
        MaskingGroup::NoMask
    } else {
        MaskingGroup::Spatial
    };
    let fwd = forward(
        cfg,
        params,
        batch,
        group,
        &mut Mode::Eval,
        &ForwardOptions {
            want_grad: false,
            want_aux: false,
        },
    )?;
    let values = fwd.tape.value(fwd.pred);
    Ok((0..batch.n_graphs).map(|g| values.at2(g, 0)).collect())
}

/// Gradients for every parameter in canonical order (zeros where a tensor
/// did not participate).
pub fn collect_grads(fwd: &Forward, params: &ParamStore) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let var = fwd.binder.var(name)?;
        out.push(
            fwd.tape
                .grad(var)
                .unwrap_or_else(|| Tensor::zeros(tensor.shape().to_vec())),
        );
    }
    Ok(out)
}
