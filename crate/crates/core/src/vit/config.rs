use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    /// Learned absolute embeddings added to CLS and patch tokens.
    LearnedAbsolute,
    /// Axial 2D rotary phases on patch queries/keys. Experimental: not a
    /// verified reproduction of any published checkpoint.
    RotaryPatch,
}

/// Architecture hyperparameters of the analysable transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub register_count: usize,
    pub mlp_ratio: f64,
    pub positional_mode: PositionalMode,
    /// Initial layer-scale value; `None` means blocks have no layer scale.
    #[serde(default)]
    pub layer_scale: Option<f32>,
    pub terminal_layernorm: bool,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

fn default_eps() -> f64 {
    1e-6
}

fn default_rope_base() -> f64 {
    100.0
}

impl ModelConfig {
    /// 4 blocks, width 64, 4 heads, 2 registers, 8×8 grid of 4-pixel patches.
    pub fn toy() -> Self {
        Self {
            depth: 4,
            hidden_dim: 64,
            heads: 4,
            patch_size: 4,
            image_size: 32,
            register_count: 2,
            mlp_ratio: 4.0,
            positional_mode: PositionalMode::LearnedAbsolute,
            layer_scale: Some(0.5),
            terminal_layernorm: true,
            layer_norm_eps: default_eps(),
            rope_base: default_rope_base(),
        }
    }

    /// ViT-S/14 at 224 px (DINOv2 family layout).
    pub fn vit_small_14(register_count: usize) -> Self {
        Self {
            depth: 12,
            hidden_dim: 384,
            heads: 6,
            patch_size: 14,
            image_size: 224,
            register_count,
            mlp_ratio: 4.0,
            positional_mode: PositionalMode::LearnedAbsolute,
            layer_scale: Some(1.0),
            terminal_layernorm: true,
            layer_norm_eps: default_eps(),
            rope_base: default_rope_base(),
        }
    }

    /// ViT-B/14 at 224 px.
    pub fn vit_base_14(register_count: usize) -> Self {
        Self {
            hidden_dim: 768,
            heads: 12,
            ..Self::vit_small_14(register_count)
        }
    }

    /// ViT-S/16 with rotary patch positions and four registers.
    pub fn vit_small_16_rotary() -> Self {
        Self {
            patch_size: 16,
            register_count: 4,
            positional_mode: PositionalMode::RotaryPatch,
            ..Self::vit_small_14(4)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.hidden_dim == 0 || self.heads == 0 {
            return fail("hidden_dim and heads must be positive".into());
        }
        if self.hidden_dim % self.heads != 0 {
            return fail(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.image_size == 0 {
            return fail("image_size must be positive".into());
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return fail(format!("invalid mlp_ratio {}", self.mlp_ratio));
        }
        if self.positional_mode == PositionalMode::RotaryPatch && self.head_dim() % 4 != 0 {
            return fail(format!(
                "rotary positions need head_dim divisible by 4, got {}",
                self.head_dim()
            ));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_count(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// `1 + R + P`.
    pub fn token_count(&self) -> usize {
        1 + self.register_count + self.patch_count()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.hidden_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_input_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            register_count: self.register_count,
            grid_rows: self.grid_side(),
            grid_cols: self.grid_side(),
        }
    }
}

/// Label of one token position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenGroup {
    Cls,
    Register(usize),
    Patch { row: usize, col: usize },
}

/// The three coarse token groups used by attention-flow summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Cls,
    Registers,
    Patches,
}

impl GroupKind {
    pub const ALL: [GroupKind; 3] = [GroupKind::Cls, GroupKind::Registers, GroupKind::Patches];

    pub fn name(self) -> &'static str {
        match self {
            GroupKind::Cls => "cls",
            GroupKind::Registers => "registers",
            GroupKind::Patches => "patches",
        }
    }
}

/// Token order is fixed: `[CLS, R_0..R_{R-1}, patches row-major]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub register_count: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl TokenLayout {
    pub fn patch_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn len(&self) -> usize {
        1 + self.register_count + self.patch_count()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub const fn cls_index(&self) -> usize {
        0
    }

    pub fn register_index(&self, slot: usize) -> Result<usize> {
        if slot >= self.register_count {
            return Err(Error::Range {
                what: "register slot",
                index: slot,
                limit: self.register_count,
            });
        }
        Ok(1 + slot)
    }

    pub fn first_patch(&self) -> usize {
        1 + self.register_count
    }

    pub fn patch_index(&self, row: usize, col: usize) -> usize {
        self.first_patch() + row * self.grid_cols + col
    }

    pub fn group_of(&self, index: usize) -> TokenGroup {
        if index == 0 {
            TokenGroup::Cls
        } else if index <= self.register_count {
            TokenGroup::Register(index - 1)
        } else {
            let p = index - self.first_patch();
            TokenGroup::Patch {
                row: p / self.grid_cols,
                col: p % self.grid_cols,
            }
        }
    }

    pub fn kind_of(&self, index: usize) -> GroupKind {
        match self.group_of(index) {
            TokenGroup::Cls => GroupKind::Cls,
            TokenGroup::Register(_) => GroupKind::Registers,
            TokenGroup::Patch { .. } => GroupKind::Patches,
        }
    }

    pub fn labels(&self) -> Vec<TokenGroup> {
        (0..self.len()).map(|i| self.group_of(i)).collect()
    }

    pub fn indices(&self, kind: GroupKind) -> std::ops::Range<usize> {
        match kind {
            GroupKind::Cls => 0..1,
            GroupKind::Registers => 1..1 + self.register_count,
            GroupKind::Patches => self.first_patch()..self.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts_for_standard_models() {
        let s14 = ModelConfig::vit_small_14(4);
        assert_eq!(s14.patch_count(), 256);
        assert_eq!(s14.token_count(), 261);
        let s16 = ModelConfig::vit_small_16_rotary();
        assert_eq!(s16.patch_count(), 196);
        assert_eq!(ModelConfig::vit_small_14(0).token_count(), 257);
    }

    #[test]
    fn validation_catches_bad_shapes() {
        let mut c = ModelConfig::toy();
        c.image_size = 30;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::toy();
        c.heads = 5;
        assert!(c.validate().is_err());
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn layout_groups_round_trip() {
        let l = ModelConfig::toy().layout();
        assert_eq!(l.len(), 1 + 2 + 64);
        assert_eq!(l.group_of(0), TokenGroup::Cls);
        assert_eq!(l.group_of(2), TokenGroup::Register(1));
        assert_eq!(l.group_of(l.patch_index(3, 5)), TokenGroup::Patch { row: 3, col: 5 });
        let labels = l.labels();
        assert_eq!(labels.iter().filter(|g| matches!(g, TokenGroup::Register(_))).count(), 2);
        assert!(l.register_index(2).is_err());
    }
}
