//! Parameter enumeration, initialisation, counting and checkpoints.
//!
//! [`param_specs`] is the single source of truth for which tensors exist
//! under a configuration: initialisation materialises exactly that list,
//! [`count_params`] sums its shapes, and checkpoint loading validates
//! against it, so the three can never drift apart.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::graph::Vocabulary;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::config::{config_from_toml, config_to_toml, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Glorot-uniform dense weight.
    DenseWeight,
    /// Zero bias.
    Bias,
    LayerNormGamma,
    LayerNormBeta,
    /// Normal(0, 0.02) embedding table.
    Embedding,
    /// Kernel locations on a uniform grid over [0, 12] length units.
    KernelMu,
    /// Kernel widths, constant 0.5.
    KernelSigma,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

fn spec(name: String, shape: Vec<usize>, init: InitKind) -> ParamSpec {
    ParamSpec { name, shape, init }
}

/// Two Dense layers with GELU and LayerNorm between:
/// `Dense(in, hidden) -> GELU -> LayerNorm -> Dense(hidden, out)`.
fn house_mlp(out: &mut Vec<ParamSpec>, prefix: &str, input: usize, hidden: usize, output: usize) {
    out.push(spec(format!("{prefix}/w1"), vec![input, hidden], InitKind::DenseWeight));
    out.push(spec(format!("{prefix}/b1"), vec![hidden], InitKind::Bias));
    out.push(spec(format!("{prefix}/ln_g"), vec![hidden], InitKind::LayerNormGamma));
    out.push(spec(format!("{prefix}/ln_b"), vec![hidden], InitKind::LayerNormBeta));
    out.push(spec(format!("{prefix}/w2"), vec![hidden, output], InitKind::DenseWeight));
    out.push(spec(format!("{prefix}/b2"), vec![output], InitKind::Bias));
}

/// The feature-encoder MLP:
/// `LayerNorm -> Dense(in, 2·in) -> ReLU -> LayerNorm -> Dense(2·in, latent)`
/// (dropout applied by the caller).
fn encoder_mlp(out: &mut Vec<ParamSpec>, prefix: &str, input: usize, latent: usize) {
    let hidden = 2 * input;
    out.push(spec(format!("{prefix}/ln1_g"), vec![input], InitKind::LayerNormGamma));
    out.push(spec(format!("{prefix}/ln1_b"), vec![input], InitKind::LayerNormBeta));
    out.push(spec(format!("{prefix}/w1"), vec![input, hidden], InitKind::DenseWeight));
    out.push(spec(format!("{prefix}/b1"), vec![hidden], InitKind::Bias));
    out.push(spec(format!("{prefix}/ln2_g"), vec![hidden], InitKind::LayerNormGamma));
    out.push(spec(format!("{prefix}/ln2_b"), vec![hidden], InitKind::LayerNormBeta));
    out.push(spec(format!("{prefix}/w2"), vec![hidden, latent], InitKind::DenseWeight));
    out.push(spec(format!("{prefix}/b2"), vec![latent], InitKind::Bias));
}

fn bias_tables(out: &mut Vec<ParamSpec>, prefix: &str, cfg: &ModelConfig) {
    if cfg.use_spd_bias {
        out.push(spec(
            format!("{prefix}/spd_bias"),
            vec![cfg.spd_buckets(), cfg.heads],
            InitKind::Embedding,
        ));
    }
    if cfg.use_3d_bias {
        let k = cfg.num_kernels;
        out.push(spec(format!("{prefix}/bias3d/w1"), vec![k, k], InitKind::DenseWeight));
        out.push(spec(format!("{prefix}/bias3d/b1"), vec![k], InitKind::Bias));
        out.push(spec(format!("{prefix}/bias3d/w2"), vec![k, cfg.heads], InitKind::DenseWeight));
        out.push(spec(format!("{prefix}/bias3d/b2"), vec![cfg.heads], InitKind::Bias));
    }
}

/// Every learnable tensor for `(config, vocabulary)`, in canonical order.
pub fn param_specs(cfg: &ModelConfig, vocab: &Vocabulary) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let latent = cfg.encoder_latent;

    // chemical category embeddings and their projection MLPs
    for (c, &v) in vocab.node.iter().enumerate() {
        out.push(spec(format!("encoder/atom_embed/{c}"), vec![v, cfg.embed_dim], InitKind::Embedding));
    }
    house_mlp(&mut out, "encoder/atom_mlp", cfg.embed_dim, 4 * cfg.d_node, cfg.d_node);
    if cfg.use_edge_features {
        for (c, &v) in vocab.edge.iter().enumerate() {
            out.push(spec(format!("encoder/bond_embed/{c}"), vec![v, cfg.embed_dim], InitKind::Embedding));
        }
        house_mlp(&mut out, "encoder/bond_mlp", cfg.embed_dim, 4 * cfg.d_edge, cfg.d_edge);
    }

    if cfg.use_lap_pe {
        encoder_mlp(&mut out, "encoder/lapvec", cfg.k_lap, latent);
        encoder_mlp(&mut out, "encoder/lapval", cfg.k_lap, latent);
    }
    if cfg.use_rwse {
        encoder_mlp(&mut out, "encoder/rwse", cfg.k_rw, latent);
    }
    if cfg.use_local_centrality {
        out.push(spec(
            "encoder/cent_embed".into(),
            vec![cfg.degree_buckets(), cfg.embed_dim],
            InitKind::Embedding,
        ));
    }

    if cfg.kernels_active() {
        out.push(spec("encoder/kernels/mu".into(), vec![cfg.num_kernels], InitKind::KernelMu));
        out.push(spec("encoder/kernels/sigma".into(), vec![cfg.num_kernels], InitKind::KernelSigma));
    }
    if cfg.use_3d_centrality {
        out.push(spec("encoder/w3d".into(), vec![cfg.num_kernels, latent], InitKind::DenseWeight));
    }
    if cfg.use_edge_features && cfg.use_bond_lengths {
        encoder_mlp(&mut out, "encoder/e3d", cfg.num_kernels, latent);
    }

    out.push(spec("encoder/x_dense/w".into(), vec![cfg.x_all_width(), cfg.d_node], InitKind::DenseWeight));
    out.push(spec("encoder/x_dense/b".into(), vec![cfg.d_node], InitKind::Bias));
    if cfg.use_edge_features {
        out.push(spec("encoder/e_dense/w".into(), vec![cfg.e_in_width(), cfg.d_edge], InitKind::DenseWeight));
        out.push(spec("encoder/e_dense/b".into(), vec![cfg.d_edge], InitKind::Bias));
    }
    if cfg.use_global_features {
        out.push(spec("encoder/g_embed".into(), vec![1, cfg.d_global], InitKind::Embedding));
    }

    if cfg.use_mhsa && !cfg.per_layer_bias {
        bias_tables(&mut out, "encoder", cfg);
    }

    for l in 0..cfg.layers {
        if cfg.use_mpnn {
            if cfg.use_edge_features {
                house_mlp(
                    &mut out,
                    &format!("layer{l}/mpnn/edge_mlp"),
                    cfg.c_uv_width(),
                    4 * cfg.d_edge,
                    cfg.d_edge,
                );
            }
            house_mlp(
                &mut out,
                &format!("layer{l}/mpnn/node_mlp"),
                cfg.c_i_width(),
                4 * cfg.d_node,
                cfg.d_node,
            );
            if cfg.use_global_features {
                house_mlp(
                    &mut out,
                    &format!("layer{l}/mpnn/global_mlp"),
                    cfg.c_g_width(),
                    4 * cfg.d_global,
                    cfg.d_global,
                );
            }
            out.push(spec(format!("layer{l}/mpnn/ln_g"), vec![cfg.d_node], InitKind::LayerNormGamma));
            out.push(spec(format!("layer{l}/mpnn/ln_b"), vec![cfg.d_node], InitKind::LayerNormBeta));
        }
        if cfg.use_mhsa {
            for w in ["wq", "wk", "wv", "wp"] {
                out.push(spec(format!("layer{l}/attn/{w}"), vec![cfg.d_node, cfg.d_node], InitKind::DenseWeight));
            }
            out.push(spec(format!("layer{l}/attn/bp"), vec![cfg.d_node], InitKind::Bias));
            if cfg.per_layer_bias {
                bias_tables(&mut out, &format!("layer{l}"), cfg);
            }
        }
        if cfg.use_ffn {
            out.push(spec(format!("layer{l}/ffn/w1"), vec![cfg.d_node, 4 * cfg.d_node], InitKind::DenseWeight));
            out.push(spec(format!("layer{l}/ffn/b1"), vec![4 * cfg.d_node], InitKind::Bias));
            out.push(spec(format!("layer{l}/ffn/w2"), vec![4 * cfg.d_node, cfg.d_node], InitKind::DenseWeight));
            out.push(spec(format!("layer{l}/ffn/b2"), vec![cfg.d_node], InitKind::Bias));
        }
    }

    out.push(spec("decoder/w1".into(), vec![cfg.d_node, cfg.decoder_hidden()], InitKind::DenseWeight));
    out.push(spec("decoder/b1".into(), vec![cfg.decoder_hidden()], InitKind::Bias));
    out.push(spec("decoder/w2".into(), vec![cfg.decoder_hidden(), 1], InitKind::DenseWeight));
    out.push(spec("decoder/b2".into(), vec![1], InitKind::Bias));

    // denoising reconstruction heads: one affine per categorical column
    for (c, &v) in vocab.node.iter().enumerate() {
        out.push(spec(format!("heads/node{c}/w"), vec![cfg.d_node, v], InitKind::DenseWeight));
        out.push(spec(format!("heads/node{c}/b"), vec![v], InitKind::Bias));
    }
    if cfg.use_edge_features {
        for (c, &v) in vocab.edge.iter().enumerate() {
            out.push(spec(format!("heads/edge{c}/w"), vec![cfg.d_edge, v], InitKind::DenseWeight));
            out.push(spec(format!("heads/edge{c}/b"), vec![v], InitKind::Bias));
        }
    }
    out
}

/// Exact count of learnable scalars for a configuration; no tensor is
/// materialised.
pub fn count_params(cfg: &ModelConfig, vocab: &Vocabulary) -> usize {
    param_specs(cfg, vocab)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// Named tensors in canonical order with O(1) lookup.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn init(cfg: &ModelConfig, vocab: &Vocabulary, seed: u64) -> Self {
        let specs = param_specs(cfg, vocab);
        let mut rng = RngStream::new(seed, 0x1217);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        let mut index = HashMap::with_capacity(specs.len());
        for s in specs {
            let len: usize = s.shape.iter().product();
            let data: Vec<f64> = match s.init {
                InitKind::DenseWeight => {
                    let (fan_in, fan_out) = match s.shape.as_slice() {
                        [i, o] => (*i, *o),
                        [n] => (*n, *n),
                        _ => (len, len),
                    };
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..len).map(|_| rng.uniform(-limit, limit)).collect()
                }
                InitKind::Bias | InitKind::LayerNormBeta => vec![0.0; len],
                InitKind::LayerNormGamma => vec![1.0; len],
                InitKind::Embedding => (0..len).map(|_| rng.normal(0.0, 0.02)).collect(),
                InitKind::KernelMu => (0..len)
                    .map(|k| {
                        if len == 1 {
                            0.0
                        } else {
                            12.0 * k as f64 / (len - 1) as f64
                        }
                    })
                    .collect(),
                InitKind::KernelSigma => vec![0.5; len],
            };
            index.insert(s.name.clone(), names.len());
            names.push(s.name);
            tensors.push(Tensor::new(s.shape, data).expect("init shape"));
        }
        ParamStore {
            names,
            tensors,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).copied().map(move |i| &mut self.tensors[i])
    }

    pub fn at(&self, i: usize) -> (&str, &Tensor) {
        (&self.names[i], &self.tensors[i])
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.names.iter().zip(self.tensors.iter())
    }
}

// --- checkpoint format ---------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"GPSC";
const CHECKPOINT_VERSION: u32 = 1;

/// Write parameters with their config and vocabulary.
///
/// Layout (little-endian): magic `GPSC`, version u32, config TOML
/// (u32 length + bytes), vocabulary JSON (u32 length + bytes), tensor count
/// u32, then per tensor: name (u16 length + bytes), rank u8, dims u64 each,
/// f64 data.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    params: &ParamStore,
) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg_text = config_to_toml(cfg)?;
    out.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg_text.as_bytes());
    let vocab_text = serde_json::to_string(vocab).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.extend_from_slice(&(vocab_text.len() as u32).to_le_bytes());
    out.extend_from_slice(vocab_text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path.as_ref())?.write_all(&out)?;
    Ok(())
}

/// Load a checkpoint and validate every tensor name and shape against the
/// stored configuration.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, Vocabulary, ParamStore)> {
    let mut buf = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut buf)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let cfg_text = std::str::from_utf8(take(&mut pos, cfg_len)?)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let cfg = config_from_toml(cfg_text)?;
    let vocab_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let vocab: Vocabulary = serde_json::from_slice(take(&mut pos, vocab_len)?)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    let mut index = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            .to_string();
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let bytes = take(&mut pos, len * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        index.insert(name.clone(), names.len());
        names.push(name);
        tensors.push(Tensor::new(shape, data)?);
    }
    let store = ParamStore {
        names,
        tensors,
        index,
    };

    // shape-check against the stored config
    let specs = param_specs(&cfg, &vocab);
    if specs.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, config expects {}",
            store.len(),
            specs.len()
        )));
    }
    for (i, s) in specs.iter().enumerate() {
        let (name, tensor) = store.at(i);
        if name != s.name {
            return Err(Error::Checkpoint(format!(
                "tensor {i} named '{name}', expected '{}'",
                s.name
            )));
        }
        if tensor.shape() != s.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                tensor.shape(),
                s.shape
            )));
        }
    }
    Ok((cfg, vocab, store))
}
