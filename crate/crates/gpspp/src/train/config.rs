//! Training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::pack::PackSpec;
use crate::{Error, Result};

/// Flat training configuration; TOML keys mirror the field names. The
/// reference setup trains for 450 epochs — the desk-scale default is 50.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub grad_clip: f64,
    pub p_corrupt: f64,

    /// Loss weights for (regression, node reconstruction, edge
    /// reconstruction).
    pub w_homo_lumo: f64,
    pub w_noisy_nodes: f64,
    pub w_noisy_edges: f64,

    /// Sampling ratio of the three masking groups
    /// (spatial : topological : none).
    pub mask_ratio_spatial: f64,
    pub mask_ratio_topological: f64,
    pub mask_ratio_none: f64,

    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    pub seed: u64,
    /// Packs accumulated into one optimizer step.
    pub packs_per_step: usize,
    /// Hard cap on optimizer steps (0 = epochs decide).
    pub max_steps: u64,
    /// Reconstruct only the corrupted entries instead of all entries.
    pub ce_corrupted_only: bool,
    /// Re-randomise Laplacian eigenvector signs every epoch.
    pub randomize_eig_signs: bool,

    pub pack_max_nodes: usize,
    pub pack_max_edges: usize,
    pub pack_max_graphs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 4e-4,
            warmup_epochs: 10,
            total_epochs: 50,
            grad_clip: 5.0,
            p_corrupt: 0.01,
            w_homo_lumo: 1.0,
            w_noisy_nodes: 1.2,
            w_noisy_edges: 1.2,
            mask_ratio_spatial: 1.0,
            mask_ratio_topological: 3.0,
            mask_ratio_none: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            packs_per_step: 1,
            max_steps: 0,
            ce_corrupted_only: false,
            randomize_eig_signs: true,
            pack_max_nodes: 60,
            pack_max_edges: 120,
            pack_max_graphs: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ratios = [
            self.mask_ratio_spatial,
            self.mask_ratio_topological,
            self.mask_ratio_none,
        ];
        if ratios.iter().any(|&r| r < 0.0) {
            return Err(Error::Config("masking ratios must be nonnegative".into()));
        }
        if ratios.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("masking ratios must not all be zero".into()));
        }
        for (name, w) in [
            ("w_homo_lumo", self.w_homo_lumo),
            ("w_noisy_nodes", self.w_noisy_nodes),
            ("w_noisy_edges", self.w_noisy_edges),
        ] {
            if w < 0.0 {
                return Err(Error::Config(format!("{name} must be nonnegative")));
            }
        }
        if !(0.0..=1.0).contains(&self.p_corrupt) {
            return Err(Error::Config(format!(
                "p_corrupt = {} outside [0, 1]",
                self.p_corrupt
            )));
        }
        if self.total_epochs == 0 || self.packs_per_step == 0 {
            return Err(Error::Config("total_epochs and packs_per_step must be positive".into()));
        }
        self.pack_spec().validate()
    }

    pub fn pack_spec(&self) -> PackSpec {
        PackSpec {
            max_nodes: self.pack_max_nodes,
            max_edges: self.pack_max_edges,
            max_graphs: self.pack_max_graphs,
        }
    }
}
