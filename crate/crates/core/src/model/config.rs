//! Decoder hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transformer decoder configuration.
///
/// The first `shared_layers` transformer layers process one stream; the
/// remaining `layers - shared_layers` run once per codebook group on lane
/// activations produced by per-group transition projections. Group-layer
/// weights are stored once and shared across lanes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Total transformer layers (L).
    pub layers: usize,
    /// Shared layers before the group split (M); N = L - M.
    pub shared_layers: usize,
    /// Codebook group count (G).
    pub groups: usize,
    /// Codebooks per frame (Q).
    pub codebooks: usize,
    /// Codes per codebook (K); the PAD sentinel is K.
    pub codebook_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Text symbol vocabulary size.
    pub text_vocab: usize,
    /// Fixed number of speaker condition vectors.
    pub cond_len: usize,
    /// Input feature dimension of the speaker encoder.
    pub feature_dim: usize,
    /// Capacity of the learned position table (prefix + BOS + steps).
    pub max_seq: usize,
    /// Group assignment per codebook (0-based), length Q, values in 0..G.
    pub group_of: Vec<usize>,
}

impl ModelConfig {
    /// Contiguous default grouping: group g owns codebooks
    /// g·Q/G .. (g+1)·Q/G. Requires G to divide Q.
    pub fn contiguous_groups(codebooks: usize, groups: usize) -> Result<Vec<usize>> {
        if groups == 0 || codebooks % groups != 0 {
            return Err(Error::Config(format!(
                "groups={groups} must divide codebooks={codebooks} for contiguous assignment"
            )));
        }
        let per = codebooks / groups;
        Ok((0..codebooks).map(|q| q / per).collect())
    }

    /// Desk-scale default: trains on CPU in minutes while exercising every
    /// mechanism.
    pub fn desk_default() -> Self {
        let codebooks = 8;
        let groups = 1;
        ModelConfig {
            layers: 4,
            shared_layers: 2,
            groups,
            codebooks,
            codebook_size: 64,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            text_vocab: 27,
            cond_len: 8,
            feature_dim: 16,
            max_seq: 256,
            group_of: Self::contiguous_groups(codebooks, groups).expect("1 divides 8"),
        }
    }

    /// Group-split layer count N = L - M.
    pub fn group_layers(&self) -> usize {
        self.layers - self.shared_layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.shared_layers > self.layers {
            return Err(Error::Config(format!(
                "shared_layers {} exceeds layers {}",
                self.shared_layers, self.layers
            )));
        }
        if self.groups == 0 {
            return Err(Error::Config("groups must be >= 1".into()));
        }
        if self.codebooks == 0 {
            return Err(Error::Config("codebooks must be >= 1".into()));
        }
        if self.codebook_size < 2 || self.codebook_size >= u16::MAX as usize {
            return Err(Error::Config(format!(
                "codebook_size {} out of range",
                self.codebook_size
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.text_vocab == 0 || self.cond_len == 0 || self.feature_dim == 0 {
            return Err(Error::Config("d_ff, text_vocab, cond_len, feature_dim must be positive".into()));
        }
        if self.group_of.len() != self.codebooks {
            return Err(Error::Config(format!(
                "group_of has {} entries for {} codebooks",
                self.group_of.len(),
                self.codebooks
            )));
        }
        for (q, &gr) in self.group_of.iter().enumerate() {
            if gr >= self.groups {
                return Err(Error::Config(format!(
                    "group_of[{q}] = {gr} out of range 0..{}",
                    self.groups
                )));
            }
        }
        Ok(())
    }
}
