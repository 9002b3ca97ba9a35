use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use super::{resolve_target, CalibrationStats, InterventionKind, InterventionSpec};
use crate::error::{Error, Result};
use crate::tensor::{stream, Matrix};
use crate::vit::TokenLayout;

/// How one token row of a block output is rewritten.
#[derive(Debug, Clone, PartialEq)]
pub enum Replacement {
    /// Same vector for every image in the batch.
    Constant(Vec<f32>),
    /// One vector per batch image.
    PerImage(Vec<Vec<f32>>),
    /// Image `b` receives the row of image `sources[b]`, read before any
    /// edit at this layer.
    CopyFrom(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenEdit {
    pub token: usize,
    pub replacement: Replacement,
}

/// Resolved, executable form of an [`InterventionSpec`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InterventionPlan {
    /// Required batch size when any rule is batch-dependent.
    pub batch_size: Option<usize>,
    pub layers: BTreeMap<usize, Vec<TokenEdit>>,
}

impl InterventionPlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.values().all(|e| e.is_empty())
    }

    pub fn edits(&self, layer: usize) -> &[TokenEdit] {
        self.layers.get(&layer).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn check(&self, layout: &TokenLayout, depth: usize, dim: usize, batch: usize) -> Result<()> {
        if let Some(b) = self.batch_size {
            if b != batch {
                return Err(Error::Contract(format!(
                    "plan was built for batch size {b}, got {batch}"
                )));
            }
        }
        for (&layer, edits) in &self.layers {
            if layer >= depth {
                return Err(Error::Range {
                    what: "block",
                    index: layer,
                    limit: depth,
                });
            }
            for e in edits {
                if e.token >= layout.len() {
                    return Err(Error::Range {
                        what: "token",
                        index: e.token,
                        limit: layout.len(),
                    });
                }
                let ok = match &e.replacement {
                    Replacement::Constant(v) => v.len() == dim,
                    Replacement::PerImage(vs) => {
                        vs.len() == batch && vs.iter().all(|v| v.len() == dim)
                    }
                    Replacement::CopyFrom(src) => {
                        src.len() == batch && src.iter().all(|&s| s < batch)
                    }
                };
                if !ok {
                    return Err(Error::Contract(format!(
                        "replacement for token {} at block {layer} does not fit batch {batch} × dim {dim}",
                        e.token
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rewrites the block-`layer` outputs of a whole batch in place.
    pub fn apply(&self, layer: usize, states: &mut [Matrix]) -> Result<()> {
        let edits = self.edits(layer);
        if edits.is_empty() {
            return Ok(());
        }
        // Copies read the pre-edit rows.
        let snapshot: BTreeMap<usize, Vec<Vec<f32>>> = edits
            .iter()
            .filter(|e| matches!(e.replacement, Replacement::CopyFrom(_)))
            .map(|e| (e.token, states.iter().map(|s| s.row(e.token).to_vec()).collect()))
            .collect();
        for e in edits {
            for (b, state) in states.iter_mut().enumerate() {
                let row = state.row_mut(e.token);
                match &e.replacement {
                    Replacement::Constant(v) => row.copy_from_slice(v),
                    Replacement::PerImage(vs) => row.copy_from_slice(&vs[b]),
                    Replacement::CopyFrom(src) => row.copy_from_slice(&snapshot[&e.token][src[b]]),
                }
            }
        }
        Ok(())
    }
}

/// Everything `plan` needs to know about the model.
#[derive(Debug, Clone, Copy)]
pub struct PlanShape<'a> {
    pub layout: &'a TokenLayout,
    pub depth: usize,
    pub hidden_dim: usize,
}

/// Resolves a spec for one batch.
///
/// `seed` keys noise and shuffle draws; callers processing several batches
/// pass a distinct seed per batch. Random patch indices depend only on
/// `spec.seed` so every batch zeroes the same patches.
pub fn plan(
    spec: &InterventionSpec,
    shape: PlanShape<'_>,
    batch_size: usize,
    calibration: Option<&CalibrationStats>,
    seed: u64,
) -> Result<InterventionPlan> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    spec.validate(shape.layout, shape.depth)?;
    if spec.kind == InterventionKind::None {
        return Ok(InterventionPlan::none());
    }
    let layers = spec.layers.resolve(shape.depth)?;
    let calib = if spec.kind.needs_calibration() {
        Some(calibration.ok_or_else(|| {
            Error::Config(format!("{} requires calibration statistics", spec.kind.name()))
        })?)
    } else {
        None
    };
    let d = shape.hidden_dim;
    let mut out = InterventionPlan::none();

    if spec.kind == InterventionKind::RandomPatchZero {
        let p = shape.layout.patch_count();
        let mut rng = stream(spec.seed, "random_patch_zero", 0);
        let mut patches = sample(&mut rng, p, spec.random_patch_count).into_vec();
        patches.sort_unstable();
        for &l in &layers {
            let edits = patches
                .iter()
                .map(|&k| TokenEdit {
                    token: shape.layout.first_patch() + k,
                    replacement: Replacement::Constant(vec![0.0; d]),
                })
                .collect();
            out.layers.insert(l, edits);
        }
        return Ok(out);
    }

    let slots = resolve_target(&spec.target, shape.layout)?;
    let mix = seed ^ spec.seed.rotate_left(32);
    for &l in &layers {
        let mut edits = Vec::with_capacity(slots.len());
        match spec.kind {
            InterventionKind::Zero => {
                for &s in &slots {
                    edits.push(TokenEdit {
                        token: s.token_index(shape.layout)?,
                        replacement: Replacement::Constant(vec![0.0; d]),
                    });
                }
            }
            InterventionKind::MeanSub => {
                let c = calib.expect("checked above");
                for &s in &slots {
                    let m = c.require(l, s)?;
                    check_dim(&m.mean, d)?;
                    edits.push(TokenEdit {
                        token: s.token_index(shape.layout)?,
                        replacement: Replacement::Constant(m.mean.clone()),
                    });
                }
            }
            InterventionKind::NoiseSub => {
                let c = calib.expect("checked above");
                for &s in &slots {
                    let m = c.require(l, s)?;
                    check_dim(&m.mean, d)?;
                    check_dim(&m.var, d)?;
                    let tag = format!("noise_sub/layer{l}/{}", s.archive_component());
                    let per_image = (0..batch_size)
                        .map(|b| {
                            let mut rng = stream(mix, &tag, b as u64);
                            m.mean
                                .iter()
                                .zip(&m.var)
                                .map(|(&mu, &var)| {
                                    let z: f32 = StandardNormal.sample(&mut rng);
                                    mu + var.max(0.0).sqrt() * z
                                })
                                .collect()
                        })
                        .collect();
                    edits.push(TokenEdit {
                        token: s.token_index(shape.layout)?,
                        replacement: Replacement::PerImage(per_image),
                    });
                }
            }
            InterventionKind::Shuffle => {
                let mut perm: Vec<usize> = (0..batch_size).collect();
                perm.shuffle(&mut stream(mix, &format!("shuffle/layer{l}"), 0));
                if perm.iter().enumerate().any(|(i, &p)| i != p) {
                    for &s in &slots {
                        edits.push(TokenEdit {
                            token: s.token_index(shape.layout)?,
                            replacement: Replacement::CopyFrom(perm.clone()),
                        });
                    }
                }
            }
            InterventionKind::None | InterventionKind::RandomPatchZero => unreachable!(),
        }
        if !edits.is_empty() {
            out.layers.insert(l, edits);
        }
    }
    if matches!(spec.kind, InterventionKind::NoiseSub | InterventionKind::Shuffle) && !out.is_empty() {
        out.batch_size = Some(batch_size);
    }
    Ok(out)
}

fn check_dim(v: &[f32], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::Contract(format!(
            "calibration vector has {} dims, model has {d}",
            v.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interventions::{LayerSelection, SlotMoments, SourceFingerprint, TokenSlot, TokenTarget};
    use crate::vit::ModelConfig;

    fn shape(layout: &TokenLayout) -> PlanShape<'_> {
        PlanShape {
            layout,
            depth: 4,
            hidden_dim: 3,
        }
    }

    fn calib(var: f32) -> CalibrationStats {
        let mut entries = BTreeMap::new();
        for l in 0..4 {
            for r in 0..2 {
                entries.insert(
                    (l, TokenSlot::Register(r)),
                    SlotMoments {
                        mean: vec![l as f32, r as f32, 1.5],
                        var: vec![var; 3],
                    },
                );
            }
        }
        CalibrationStats {
            entries,
            sample_count: 1,
            fingerprint: SourceFingerprint {
                dataset_id: "t".into(),
                seed: 0,
            },
            pooled: false,
        }
    }

    #[test]
    fn zero_plan_targets_registers_from_block_one() {
        let layout = ModelConfig::toy().layout();
        let spec = InterventionSpec::new(InterventionKind::Zero, TokenTarget::Registers);
        let p = plan(&spec, shape(&layout), 2, None, 0).unwrap();
        assert_eq!(p.layers.keys().copied().collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(p.edits(1).iter().map(|e| e.token).collect::<Vec<_>>(), vec![1, 2]);
        assert!(p.batch_size.is_none());
    }

    #[test]
    fn mean_sub_without_calibration_fails() {
        let layout = ModelConfig::toy().layout();
        let spec = InterventionSpec::new(InterventionKind::MeanSub, TokenTarget::Registers);
        assert!(matches!(plan(&spec, shape(&layout), 1, None, 0), Err(Error::Config(_))));
    }

    #[test]
    fn noise_with_zero_variance_is_the_mean() {
        let layout = ModelConfig::toy().layout();
        let c = calib(0.0);
        let spec = InterventionSpec::new(InterventionKind::NoiseSub, TokenTarget::Registers);
        let p = plan(&spec, shape(&layout), 3, Some(&c), 9).unwrap();
        for (l, edits) in &p.layers {
            for e in edits {
                let Replacement::PerImage(vs) = &e.replacement else { panic!() };
                let r = e.token - 1;
                for v in vs {
                    assert_eq!(v, &vec![*l as f32, r as f32, 1.5]);
                }
            }
        }
    }

    #[test]
    fn noise_is_seeded_and_varies_per_image() {
        let layout = ModelConfig::toy().layout();
        let c = calib(1.0);
        let spec = InterventionSpec::new(InterventionKind::NoiseSub, TokenTarget::Registers);
        let a = plan(&spec, shape(&layout), 2, Some(&c), 5).unwrap();
        let b = plan(&spec, shape(&layout), 2, Some(&c), 5).unwrap();
        assert_eq!(a, b);
        let Replacement::PerImage(vs) = &a.edits(1)[0].replacement else { panic!() };
        assert_ne!(vs[0], vs[1]);
        assert_ne!(a, plan(&spec, shape(&layout), 2, Some(&c), 6).unwrap());
    }

    #[test]
    fn shuffle_batch_one_is_empty() {
        let layout = ModelConfig::toy().layout();
        let spec = InterventionSpec::new(InterventionKind::Shuffle, TokenTarget::Registers);
        for seed in 0..5 {
            assert!(plan(&spec, shape(&layout), 1, None, seed).unwrap().is_empty());
        }
    }

    #[test]
    fn shuffle_permutes_rows_across_batch() {
        let layout = ModelConfig::toy().layout();
        let spec = InterventionSpec::new(InterventionKind::Shuffle, TokenTarget::Registers)
            .with_layers(LayerSelection::Blocks(vec![2]));
        let p = (0..20)
            .map(|s| plan(&spec, shape(&layout), 5, None, s).unwrap())
            .find(|p| !p.is_empty())
            .unwrap();
        let mut states: Vec<Matrix> = (0..5)
            .map(|b| {
                let mut m = Matrix::zeros(layout.len(), 3);
                for t in 0..layout.len() {
                    m.row_mut(t).fill((b * 100 + t) as f32);
                }
                m
            })
            .collect();
        let before = states.clone();
        p.apply(2, &mut states).unwrap();
        for tok in [1, 2] {
            let mut a: Vec<f32> = before.iter().map(|s| s.row(tok)[0]).collect();
            let mut b: Vec<f32> = states.iter().map(|s| s.row(tok)[0]).collect();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            assert_eq!(a, b);
        }
        for (x, y) in before.iter().zip(&states) {
            assert_eq!(x.row(0), y.row(0));
            assert_eq!(x.row(3), y.row(3));
        }
    }

    #[test]
    fn random_patches_depend_only_on_spec_seed() {
        let layout = ModelConfig::toy().layout();
        let spec = InterventionSpec::new(InterventionKind::RandomPatchZero, TokenTarget::Patches).with_seed(3);
        let a = plan(&spec, shape(&layout), 1, None, 0).unwrap();
        let b = plan(&spec, shape(&layout), 4, None, 77).unwrap();
        assert_eq!(a, b);
        let toks: Vec<usize> = a.edits(1).iter().map(|e| e.token).collect();
        assert_eq!(toks.len(), 4);
        assert!(toks.iter().all(|&t| t >= layout.first_patch()));
        assert!(toks.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a.edits(1), a.edits(3));
    }

    #[test]
    fn check_rejects_wrong_batch() {
        let layout = ModelConfig::toy().layout();
        let spec = InterventionSpec::new(InterventionKind::Shuffle, TokenTarget::Registers);
        let p = (0..20)
            .map(|s| plan(&spec, shape(&layout), 3, None, s).unwrap())
            .find(|p| !p.is_empty())
            .unwrap();
        assert!(p.check(&layout, 4, 3, 3).is_ok());
        assert!(p.check(&layout, 4, 3, 2).is_err());
    }
}
