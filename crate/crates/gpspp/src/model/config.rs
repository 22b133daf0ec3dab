//! Architecture configuration and derived widths.

use serde::{Deserialize, Serialize};

use crate::encodings::EncodingConfig;
use crate::{Error, Result};

/// Attention logits are scaled by `1/sqrt(d_node / heads)` (per-head width),
/// the standard multi-head convention.
pub const ATTENTION_SCALE_PER_HEAD: bool = true;

/// All architecture hyperparameters, flat so the TOML config file mirrors
/// the field names one-to-one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_node: usize,
    pub d_edge: usize,
    pub d_global: usize,
    pub layers: usize,
    pub heads: usize,
    /// Gaussian kernels embedding interatomic distances.
    pub num_kernels: usize,
    /// Retained nontrivial Laplacian eigenpairs.
    pub k_lap: usize,
    /// Random-walk lengths.
    pub k_rw: usize,
    /// Latent width each encoded auxiliary feature is projected to.
    pub encoder_latent: usize,
    /// Width of the category / centrality embedding vectors.
    pub embed_dim: usize,
    pub max_spd: usize,
    pub max_degree: usize,

    pub dropout_message: f64,
    pub dropout_node: f64,
    pub dropout_global: f64,
    pub dropout_attention: f64,
    pub dropout_encoder: f64,
    pub dropout_ffn: f64,
    /// Stochastic-depth rate of the last layer; earlier layers scale
    /// linearly with depth.
    pub graph_dropout_max: f64,

    pub use_mpnn: bool,
    pub use_edge_features: bool,
    pub use_global_features: bool,
    pub use_sender_aggregation: bool,
    pub use_adjacent_node_aggregation: bool,
    pub use_mhsa: bool,
    pub use_ffn: bool,
    pub use_spd_bias: bool,
    pub use_3d_bias: bool,
    pub use_3d_centrality: bool,
    pub use_lap_pe: bool,
    pub use_rwse: bool,
    pub use_local_centrality: bool,
    pub use_bond_lengths: bool,

    /// Learn the attention-bias tables per layer instead of sharing one set
    /// computed at encoding time.
    pub per_layer_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_node: 256,
            d_edge: 128,
            d_global: 64,
            layers: 16,
            heads: 32,
            num_kernels: 128,
            k_lap: 7,
            k_rw: 16,
            encoder_latent: 32,
            embed_dim: 64,
            max_spd: 20,
            max_degree: 16,
            dropout_message: 0.0035,
            dropout_node: 0.3,
            dropout_global: 0.35,
            dropout_attention: 0.3,
            dropout_encoder: 0.18,
            dropout_ffn: 0.0,
            graph_dropout_max: 0.3,
            use_mpnn: true,
            use_edge_features: true,
            use_global_features: true,
            use_sender_aggregation: true,
            use_adjacent_node_aggregation: true,
            use_mhsa: true,
            use_ffn: true,
            use_spd_bias: true,
            use_3d_bias: true,
            use_3d_centrality: true,
            use_lap_pe: true,
            use_rwse: true,
            use_local_centrality: true,
            use_bond_lengths: true,
            per_layer_bias: false,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and toy training runs, with every
    /// architectural feature still enabled.
    pub fn toy() -> Self {
        ModelConfig {
            d_node: 32,
            d_edge: 16,
            d_global: 8,
            layers: 2,
            heads: 4,
            num_kernels: 8,
            k_lap: 4,
            k_rw: 6,
            encoder_latent: 8,
            embed_dim: 8,
            max_spd: 10,
            max_degree: 8,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_node", self.d_node),
            ("d_edge", self.d_edge),
            ("d_global", self.d_global),
            ("layers", self.layers),
            ("heads", self.heads),
            ("num_kernels", self.num_kernels),
            ("k_lap", self.k_lap),
            ("k_rw", self.k_rw),
            ("encoder_latent", self.encoder_latent),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_node.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_node {} not divisible by heads {}",
                self.d_node, self.heads
            )));
        }
        for (name, r) in [
            ("dropout_message", self.dropout_message),
            ("dropout_node", self.dropout_node),
            ("dropout_global", self.dropout_global),
            ("dropout_attention", self.dropout_attention),
            ("dropout_encoder", self.dropout_encoder),
            ("dropout_ffn", self.dropout_ffn),
            ("graph_dropout_max", self.graph_dropout_max),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_node / self.heads
    }

    pub fn encoding_config(&self) -> EncodingConfig {
        EncodingConfig {
            k_lap: self.k_lap,
            k_rw: self.k_rw,
            max_spd: self.max_spd,
            max_degree: self.max_degree,
        }
    }

    pub fn spd_buckets(&self) -> usize {
        self.max_spd + 2
    }

    pub fn degree_buckets(&self) -> usize {
        self.max_degree + 1
    }

    /// Any consumer of the Gaussian distance kernels active?
    pub fn kernels_active(&self) -> bool {
        (self.use_mhsa && self.use_3d_bias) || self.use_3d_centrality || self.use_bond_lengths
    }

    /// Width of the concatenated node feature row fed to the input Dense.
    pub fn x_all_width(&self) -> usize {
        let mut w = self.d_node; // chemical features
        if self.use_lap_pe {
            w += 2 * self.encoder_latent; // eigenvectors + eigenvalues
        }
        if self.use_rwse {
            w += self.encoder_latent;
        }
        if self.use_local_centrality {
            w += self.embed_dim;
        }
        if self.use_3d_centrality {
            w += self.encoder_latent;
        }
        w
    }

    /// Width of the concatenated edge feature row fed to the input Dense.
    pub fn e_in_width(&self) -> usize {
        let mut w = self.d_edge; // bond features
        if self.use_bond_lengths {
            w += self.encoder_latent;
        }
        w
    }

    /// Width of the per-edge message input `[x_u | x_v | e_uv | g]`.
    pub fn c_uv_width(&self) -> usize {
        let mut w = 2 * self.d_node + self.d_edge;
        if self.use_global_features {
            w += self.d_global;
        }
        w
    }

    /// Width of the per-node aggregate. The full form concatenates the node
    /// state, incoming and outgoing message sums, incoming and outgoing
    /// adjacent-node sums, and the global state; the ablation flags drop
    /// slots. For valid bidirected graphs the two adjacent-node sums are
    /// equal, so the extra slot is a reparameterisation, not new signal.
    pub fn c_i_width(&self) -> usize {
        let mut w = self.d_node;
        if self.use_edge_features {
            w += self.d_edge; // incoming messages
            if self.use_sender_aggregation {
                w += self.d_edge; // outgoing messages
            }
        }
        if self.use_adjacent_node_aggregation {
            w += self.d_node; // incoming adjacent nodes
            if self.use_sender_aggregation {
                w += self.d_node; // outgoing adjacent nodes
            }
        }
        if self.use_global_features {
            w += self.d_global;
        }
        w
    }

    /// Width of the global aggregate `[g | Σ x̄ | Σ ē]`.
    pub fn c_g_width(&self) -> usize {
        let mut w = self.d_global + self.d_node;
        if self.use_edge_features {
            w += self.d_edge;
        }
        w
    }

    pub fn decoder_hidden(&self) -> usize {
        self.d_node
    }

    /// Stochastic-depth rate for 0-based layer index `l`.
    pub fn graph_dropout_rate(&self, l: usize) -> f64 {
        self.graph_dropout_max * (l + 1) as f64 / self.layers as f64
    }
}

pub fn config_to_toml(cfg: &ModelConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

pub fn config_from_toml(text: &str) -> Result<ModelConfig> {
    let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_widths() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.x_all_width(), 256 + 32 + 32 + 32 + 64 + 32);
        assert_eq!(c.e_in_width(), 160);
        assert_eq!(c.c_uv_width(), 704);
        assert_eq!(c.c_i_width(), 1088);
        assert_eq!(c.c_g_width(), 448);
        assert_eq!(c.d_head(), 8);
    }

    #[test]
    fn ablations_shrink_widths() {
        let c = ModelConfig {
            use_sender_aggregation: false,
            ..ModelConfig::default()
        };
        assert_eq!(c.c_i_width(), 1088 - 128 - 256);
        let c = ModelConfig {
            use_adjacent_node_aggregation: false,
            ..ModelConfig::default()
        };
        assert_eq!(c.c_i_width(), 1088 - 512);
        let c = ModelConfig {
            use_edge_features: false,
            ..ModelConfig::default()
        };
        assert_eq!(c.c_i_width(), 1088 - 256);
        assert_eq!(c.c_g_width(), 320);
    }

    #[test]
    fn toml_round_trip() {
        let c = ModelConfig::toy();
        let text = config_to_toml(&c).unwrap();
        let back = config_from_toml(&text).unwrap();
        assert_eq!(c, back);
        // flat key/value: every field name appears at top level
        assert!(text.contains("d_node = 32"));
        assert!(text.contains("use_mhsa = true"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = ModelConfig {
            heads: 7,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            dropout_node: 1.0,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
