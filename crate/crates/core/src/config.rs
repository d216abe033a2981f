//! Model shape configuration shared by the encoder, fusion layer and heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square search-region frame, in pixels.
    pub search_size: usize,
    /// Side of each square clip frame, in pixels.
    pub clip_size: usize,
    pub patch: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub n_clips: usize,
    pub encoder_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Hidden widths of the fusion experts, strictly increasing.
    pub expert_widths: Vec<usize>,
    pub top_k: usize,
    /// Renormalize the top-K gate values to sum to one. Off by default.
    #[serde(default)]
    pub renormalize_gates: bool,
    pub fuse_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            search_size: 64,
            clip_size: 32,
            patch: 8,
            channels: 1,
            embed_dim: 64,
            n_clips: 3,
            encoder_blocks: 4,
            heads: 4,
            mlp_ratio: 4,
            expert_widths: heterogeneous_widths(10),
            top_k: 2,
            renormalize_gates: false,
            fuse_layers: 1,
        }
    }
}

/// Widths `2^d` for `d` in `2..max_exp`: `max_exp = 10` gives 4..=512.
pub fn heterogeneous_widths(max_exp: u32) -> Vec<usize> {
    (2..max_exp).map(|d| 1usize << d).collect()
}

impl ModelConfig {
    /// Search tokens per side of the score map.
    pub fn score_side(&self) -> usize {
        self.search_size / self.patch
    }

    pub fn search_tokens(&self) -> usize {
        self.score_side() * self.score_side()
    }

    pub fn clip_tokens(&self) -> usize {
        let s = self.clip_size / self.patch;
        s * s
    }

    pub fn seq_len(&self) -> usize {
        2 * self.search_tokens() + 2 * self.n_clips * self.clip_tokens()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn num_experts(&self) -> usize {
        self.expert_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.search_size % self.patch != 0 || self.clip_size % self.patch != 0 {
            return bad(format!(
                "frame sizes {}/{} must be positive multiples of patch {}",
                self.search_size, self.clip_size, self.patch
            ));
        }
        if self.search_size == 0 || self.clip_size == 0 || self.channels == 0 {
            return bad("frame sizes and channels must be positive".into());
        }
        if self.n_clips == 0 {
            return bad("at least one clip frame is required".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.expert_widths.is_empty() {
            return bad("no experts configured".into());
        }
        if self.top_k == 0 || self.top_k > self.expert_widths.len() {
            return bad(format!(
                "top_k {} must be in 1..={} (number of experts)",
                self.top_k,
                self.expert_widths.len()
            ));
        }
        let w = &self.expert_widths;
        if w.iter().any(|&v| v < 4 || !v.is_power_of_two()) {
            return bad(format!("expert widths {w:?} must be powers of two >= 4"));
        }
        let increasing = w.windows(2).all(|p| p[0] < p[1]);
        let homogeneous = w.windows(2).all(|p| p[0] == p[1]);
        if !increasing && !homogeneous {
            return bad(format!(
                "expert widths {w:?} must be strictly increasing (heterogeneous) or all equal (homogeneous)"
            ));
        }
        if self.fuse_layers == 0 {
            return bad("at least one fusion layer is required".into());
        }
        Ok(())
    }
}
