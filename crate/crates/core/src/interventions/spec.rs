use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::{GroupKind, TokenGroup, TokenLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    None,
    Zero,
    MeanSub,
    NoiseSub,
    Shuffle,
    RandomPatchZero,
}

impl InterventionKind {
    pub fn needs_calibration(self) -> bool {
        matches!(self, InterventionKind::MeanSub | InterventionKind::NoiseSub)
    }

    pub fn name(self) -> &'static str {
        match self {
            InterventionKind::None => "none",
            InterventionKind::Zero => "zero",
            InterventionKind::MeanSub => "mean_sub",
            InterventionKind::NoiseSub => "noise_sub",
            InterventionKind::Shuffle => "shuffle",
            InterventionKind::RandomPatchZero => "random_patch_zero",
        }
    }
}

/// Token rows an intervention rewrites.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenTarget {
    Cls,
    Registers,
    Register(usize),
    Patches,
    /// Explicit absolute token indices.
    Tokens(Vec<usize>),
}

impl TokenTarget {
    pub fn label(&self) -> String {
        match self {
            TokenTarget::Cls => "cls".into(),
            TokenTarget::Registers => "registers".into(),
            TokenTarget::Register(i) => format!("register{i}"),
            TokenTarget::Patches => "patches".into(),
            TokenTarget::Tokens(t) => format!(
                "tokens{}",
                t.iter().map(|i| format!("_{i}")).collect::<String>()
            ),
        }
    }
}

/// A token position named by role, used to key calibration statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSlot {
    Cls,
    Register(usize),
    Patch(usize),
}

impl TokenSlot {
    pub fn token_index(self, layout: &TokenLayout) -> Result<usize> {
        match self {
            TokenSlot::Cls => Ok(layout.cls_index()),
            TokenSlot::Register(i) => layout.register_index(i),
            TokenSlot::Patch(p) => {
                if p >= layout.patch_count() {
                    return Err(Error::Range {
                        what: "patch",
                        index: p,
                        limit: layout.patch_count(),
                    });
                }
                Ok(layout.first_patch() + p)
            }
        }
    }

    pub fn from_token_index(index: usize, layout: &TokenLayout) -> Result<Self> {
        if index >= layout.len() {
            return Err(Error::Range {
                what: "token",
                index,
                limit: layout.len(),
            });
        }
        Ok(match layout.group_of(index) {
            TokenGroup::Cls => TokenSlot::Cls,
            TokenGroup::Register(i) => TokenSlot::Register(i),
            TokenGroup::Patch { .. } => TokenSlot::Patch(index - layout.first_patch()),
        })
    }

    /// Archive path component: `slot{i}` for registers, `cls`, `patch{k}`.
    pub fn archive_component(self) -> String {
        match self {
            TokenSlot::Cls => "cls".into(),
            TokenSlot::Register(i) => format!("slot{i}"),
            TokenSlot::Patch(p) => format!("patch{p}"),
        }
    }

    pub fn parse_archive_component(s: &str) -> Option<Self> {
        if s == "cls" {
            Some(TokenSlot::Cls)
        } else if let Some(i) = s.strip_prefix("slot") {
            i.parse().ok().map(TokenSlot::Register)
        } else if let Some(p) = s.strip_prefix("patch") {
            p.parse().ok().map(TokenSlot::Patch)
        } else {
            None
        }
    }
}

/// Resolves a target to concrete slots for a layout.
pub fn resolve_target(target: &TokenTarget, layout: &TokenLayout) -> Result<Vec<TokenSlot>> {
    let needs_registers = |what: &str| {
        Error::Config(format!(
            "{what} targets registers but the model has no register tokens"
        ))
    };
    match target {
        TokenTarget::Cls => Ok(vec![TokenSlot::Cls]),
        TokenTarget::Registers => {
            if layout.register_count == 0 {
                return Err(needs_registers("intervention"));
            }
            Ok((0..layout.register_count).map(TokenSlot::Register).collect())
        }
        TokenTarget::Register(i) => {
            if layout.register_count == 0 {
                return Err(needs_registers("intervention"));
            }
            layout.register_index(*i)?;
            Ok(vec![TokenSlot::Register(*i)])
        }
        TokenTarget::Patches => Ok(layout
            .indices(GroupKind::Patches)
            .map(|i| TokenSlot::Patch(i - layout.first_patch()))
            .collect()),
        TokenTarget::Tokens(idx) => {
            let mut slots = idx
                .iter()
                .map(|&i| TokenSlot::from_token_index(i, layout))
                .collect::<Result<Vec<_>>>()?;
            slots.sort();
            slots.dedup();
            Ok(slots)
        }
    }
}

/// Block outputs to rewrite.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    /// Every block from this 0-based index to the last.
    FromBlock(usize),
    /// Explicit 0-based block indices.
    Blocks(Vec<usize>),
}

impl Default for LayerSelection {
    /// Blocks `1..L`: block 0's output is left untouched.
    fn default() -> Self {
        LayerSelection::FromBlock(1)
    }
}

impl LayerSelection {
    pub fn resolve(&self, depth: usize) -> Result<Vec<usize>> {
        match self {
            LayerSelection::FromBlock(start) => Ok((*start..depth).collect()),
            LayerSelection::Blocks(blocks) => {
                let mut out = blocks.clone();
                out.sort_unstable();
                out.dedup();
                if let Some(&bad) = out.iter().find(|&&b| b >= depth) {
                    return Err(Error::Range {
                        what: "block",
                        index: bad,
                        limit: depth,
                    });
                }
                Ok(out)
            }
        }
    }
}

fn default_random_patch_count() -> usize {
    4
}

/// Declarative description of one intervention condition.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InterventionSpec {
    /// Report label; derived from kind and target when absent.
    #[serde(default)]
    pub name: Option<String>,
    pub kind: InterventionKind,
    #[serde(default = "default_target")]
    pub target: TokenTarget,
    #[serde(default)]
    pub layers: LayerSelection,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub calibration_ref: Option<String>,
    #[serde(default = "default_random_patch_count")]
    pub random_patch_count: usize,
}

fn default_target() -> TokenTarget {
    TokenTarget::Registers
}

impl InterventionSpec {
    pub fn new(kind: InterventionKind, target: TokenTarget) -> Self {
        Self {
            name: None,
            kind,
            target,
            layers: LayerSelection::default(),
            seed: 0,
            calibration_ref: None,
            random_patch_count: default_random_patch_count(),
        }
    }

    pub fn none() -> Self {
        Self::new(InterventionKind::None, TokenTarget::Registers)
    }

    pub fn with_layers(mut self, layers: LayerSelection) -> Self {
        self.layers = layers;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match self.kind {
            InterventionKind::None => "full".into(),
            InterventionKind::RandomPatchZero => {
                format!("random_patch_zero{}", self.random_patch_count)
            }
            k => format!("{}_{}", k.name(), self.target.label()),
        }
    }

    /// Checks the spec against a model layout without building a plan.
    pub fn validate(&self, layout: &TokenLayout, depth: usize) -> Result<()> {
        self.layers.resolve(depth)?;
        match self.kind {
            InterventionKind::None => Ok(()),
            InterventionKind::RandomPatchZero => {
                if self.random_patch_count > layout.patch_count() {
                    return Err(Error::Config(format!(
                        "cannot zero {} of {} patches",
                        self.random_patch_count,
                        layout.patch_count()
                    )));
                }
                Ok(())
            }
            _ => resolve_target(&self.target, layout).map(|_| ()),
        }
    }
}

/// Zero-lesion of a single register slot, keeping the template's layers.
pub fn per_register_lesion(
    template: &InterventionSpec,
    slot: usize,
    register_count: usize,
) -> Result<InterventionSpec> {
    if slot >= register_count {
        return Err(Error::Range {
            what: "register slot",
            index: slot,
            limit: register_count,
        });
    }
    Ok(InterventionSpec {
        name: Some(format!("zero_register{slot}")),
        kind: InterventionKind::Zero,
        target: TokenTarget::Register(slot),
        layers: template.layers.clone(),
        seed: template.seed,
        calibration_ref: None,
        random_patch_count: template.random_patch_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ModelConfig;

    #[test]
    fn lesion_targets_single_slot() {
        let t = InterventionSpec::new(InterventionKind::Zero, TokenTarget::Registers);
        let s = per_register_lesion(&t, 2, 4).unwrap();
        assert_eq!(s.target, TokenTarget::Register(2));
        assert_eq!(s.kind, InterventionKind::Zero);
        assert!(matches!(per_register_lesion(&t, 4, 4), Err(Error::Range { .. })));
    }

    #[test]
    fn lesions_partition_register_group() {
        let layout = ModelConfig::vit_small_14(4).layout();
        let t = InterventionSpec::new(InterventionKind::Zero, TokenTarget::Registers);
        let mut all: Vec<TokenSlot> = (0..4)
            .flat_map(|i| {
                let s = per_register_lesion(&t, i, 4).unwrap();
                resolve_target(&s.target, &layout).unwrap()
            })
            .collect();
        all.sort();
        assert_eq!(all, resolve_target(&TokenTarget::Registers, &layout).unwrap());
    }

    #[test]
    fn registers_without_registers_is_config_error() {
        let layout = ModelConfig::vit_small_14(0).layout();
        assert!(matches!(
            resolve_target(&TokenTarget::Registers, &layout),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn layer_selection_defaults_skip_block_zero() {
        assert_eq!(LayerSelection::default().resolve(4).unwrap(), vec![1, 2, 3]);
        assert_eq!(LayerSelection::Blocks(vec![3, 1, 3]).resolve(4).unwrap(), vec![1, 3]);
        assert!(LayerSelection::Blocks(vec![4]).resolve(4).is_err());
        assert!(LayerSelection::FromBlock(9).resolve(4).unwrap().is_empty());
    }

    #[test]
    fn slot_archive_names_round_trip() {
        for s in [TokenSlot::Cls, TokenSlot::Register(3), TokenSlot::Patch(17)] {
            assert_eq!(TokenSlot::parse_archive_component(&s.archive_component()), Some(s));
        }
    }

    #[test]
    fn spec_deserializes_with_defaults() {
        let s: InterventionSpec = serde_json::from_str(r#"{"kind":"mean_sub"}"#).unwrap();
        assert_eq!(s.target, TokenTarget::Registers);
        assert_eq!(s.layers, LayerSelection::FromBlock(1));
        assert_eq!(s.random_patch_count, 4);
        assert_eq!(s.label(), "mean_sub_registers");
    }
}
