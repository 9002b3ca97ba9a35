use rayon::prelude::*;

use super::{GroupKind, ModelConfig, PositionalMode, TokenLayout, ViTWeights};
use super::weights::BlockWeights;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::interventions::InterventionPlan;
use crate::tensor::{gelu, layer_norm, softmax_slice, Matrix};

/// Per-layer token states and attention maps from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    /// `L + 1` matrices of shape `T × d`: the embedding output, then each
    /// block's (possibly intervened) output.
    pub token_states: Vec<Matrix>,
    /// Final state after the terminal norm (equal to the last state when the
    /// model has none).
    pub post_norm_final: Matrix,
    /// `attention[layer][head]` is a row-softmaxed `T × T` map. Empty when
    /// attention recording was disabled.
    pub attention: Vec<Vec<Matrix>>,
    pub layout: TokenLayout,
}

impl ActivationTrace {
    pub fn depth(&self) -> usize {
        self.token_states.len() - 1
    }

    pub fn has_attention(&self) -> bool {
        !self.attention.is_empty()
    }
}

/// Which rows of the final features to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    Cls,
    Patches,
    Register(usize),
}

/// Rows of `post_norm_final` for the requested group; patches come back in
/// row-major grid order.
pub fn extract_features(trace: &ActivationTrace, group: FeatureGroup) -> Result<Matrix> {
    let layout = &trace.layout;
    let rows: Vec<usize> = match group {
        FeatureGroup::Cls => vec![layout.cls_index()],
        FeatureGroup::Patches => layout.indices(GroupKind::Patches).collect(),
        FeatureGroup::Register(i) => vec![layout.register_index(i)?],
    };
    trace.post_norm_final.select_rows(&rows)
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub record_attention: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            record_attention: true,
        }
    }
}

/// Pre-norm ViT with CLS, register and patch tokens.
#[derive(Debug, Clone)]
pub struct VisionTransformer {
    config: ModelConfig,
    weights: ViTWeights,
}

impl VisionTransformer {
    pub fn new(config: ModelConfig, weights: ViTWeights) -> Result<Self> {
        weights.validate(&config)?;
        Ok(Self { config, weights })
    }

    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = ViTWeights::random(&config, seed)?;
        Self::new(config, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ViTWeights {
        &self.weights
    }

    pub fn layout(&self) -> TokenLayout {
        self.config.layout()
    }

    pub fn forward(&self, image: &Image, plan: Option<&InterventionPlan>) -> Result<ActivationTrace> {
        let mut traces = self.forward_batch(std::slice::from_ref(image), plan, ForwardOptions::default())?;
        Ok(traces.pop().expect("one trace per image"))
    }

    /// Runs a batch in lockstep, block by block, so that plans which mix
    /// rows across the batch (shuffles) see every image's current state.
    pub fn forward_batch(
        &self,
        images: &[Image],
        plan: Option<&InterventionPlan>,
        options: ForwardOptions,
    ) -> Result<Vec<ActivationTrace>> {
        let layout = self.layout();
        if let Some(plan) = plan {
            plan.check(&layout, self.config.depth, self.config.hidden_dim, images.len())?;
        }
        let mut states: Vec<Matrix> = images
            .par_iter()
            .map(|img| self.embed(img))
            .collect::<Result<_>>()?;
        let mut token_states: Vec<Vec<Matrix>> =
            states.iter().map(|s| vec![s.clone()]).collect();
        let mut attention: Vec<Vec<Vec<Matrix>>> = vec![Vec::new(); images.len()];

        for (layer, block) in self.weights.blocks.iter().enumerate() {
            let outputs: Vec<(Matrix, Option<Vec<Matrix>>)> = states
                .par_iter()
                .map(|x| self.block_forward(block, x, options.record_attention))
                .collect::<Result<_>>()?;
            states.clear();
            for (b, (x, attn)) in outputs.into_iter().enumerate() {
                states.push(x);
                if let Some(a) = attn {
                    attention[b].push(a);
                }
            }
            if let Some(plan) = plan {
                plan.apply(layer, &mut states)?;
            }
            for (b, s) in states.iter().enumerate() {
                token_states[b].push(s.clone());
            }
        }

        let finals: Vec<Matrix> = states
            .par_iter()
            .map(|x| match &self.weights.norm {
                Some(n) if self.config.terminal_layernorm => {
                    layer_norm(x, &n.weight, &n.bias, self.config.layer_norm_eps)
                }
                _ => Ok(x.clone()),
            })
            .collect::<Result<_>>()?;

        Ok(token_states
            .into_iter()
            .zip(attention)
            .zip(finals)
            .map(|((token_states, attention), post_norm_final)| ActivationTrace {
                token_states,
                post_norm_final,
                attention,
                layout,
            })
            .collect())
    }

    fn embed(&self, image: &Image) -> Result<Matrix> {
        let cfg = &self.config;
        if image.width != cfg.image_size || image.height != cfg.image_size {
            return Err(Error::Contract(format!(
                "image is {}x{} but the model expects {}x{}",
                image.width, image.height, cfg.image_size, cfg.image_size
            )));
        }
        let p = cfg.patch_size;
        let side = cfg.grid_side();
        let mut patches = Matrix::zeros(cfg.patch_count(), cfg.patch_input_dim());
        for gy in 0..side {
            for gx in 0..side {
                let row = patches.row_mut(gy * side + gx);
                let mut k = 0;
                for c in 0..3 {
                    for y in 0..p {
                        for x in 0..p {
                            row[k] = image.at(c, gy * p + y, gx * p + x);
                            k += 1;
                        }
                    }
                }
            }
        }
        let patch_tokens = self.weights.patch_embed.forward(&patches)?;

        let layout = cfg.layout();
        let d = cfg.hidden_dim;
        let mut x = Matrix::zeros(layout.len(), d);
        x.row_mut(0).copy_from_slice(&self.weights.cls_token);
        for r in 0..cfg.register_count {
            x.row_mut(1 + r)
                .copy_from_slice(self.weights.register_tokens.row(r));
        }
        for i in 0..cfg.patch_count() {
            x.row_mut(layout.first_patch() + i)
                .copy_from_slice(patch_tokens.row(i));
        }
        // Registers carry no positional embedding.
        if let Some(pos) = &self.weights.pos_embed {
            for (dst, &v) in x.row_mut(0).iter_mut().zip(pos.row(0)) {
                *dst += v;
            }
            for i in 0..cfg.patch_count() {
                for (dst, &v) in x.row_mut(layout.first_patch() + i).iter_mut().zip(pos.row(1 + i)) {
                    *dst += v;
                }
            }
        }
        Ok(x)
    }

    fn block_forward(
        &self,
        block: &BlockWeights,
        x: &Matrix,
        record: bool,
    ) -> Result<(Matrix, Option<Vec<Matrix>>)> {
        let cfg = &self.config;
        let eps = cfg.layer_norm_eps;
        let t = x.rows();
        let d = cfg.hidden_dim;
        let hd = cfg.head_dim();

        let h = layer_norm(x, &block.norm1.weight, &block.norm1.bias, eps)?;
        let qkv = block.qkv.forward(&h)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut concat = Matrix::zeros(t, d);
        let mut maps = record.then(|| Vec::with_capacity(cfg.heads));
        for head in 0..cfg.heads {
            let mut q = Matrix::zeros(t, hd);
            let mut k = Matrix::zeros(t, hd);
            let mut v = Matrix::zeros(t, hd);
            for r in 0..t {
                let src = qkv.row(r);
                q.row_mut(r).copy_from_slice(&src[head * hd..(head + 1) * hd]);
                k.row_mut(r)
                    .copy_from_slice(&src[d + head * hd..d + (head + 1) * hd]);
                v.row_mut(r)
                    .copy_from_slice(&src[2 * d + head * hd..2 * d + (head + 1) * hd]);
            }
            if cfg.positional_mode == PositionalMode::RotaryPatch {
                self.apply_rotary(&mut q);
                self.apply_rotary(&mut k);
            }
            let mut scores = q.matmul_t(&k)?;
            for row in scores.as_mut_slice().chunks_exact_mut(t) {
                for s in row.iter_mut() {
                    *s = (*s as f64 * scale) as f32;
                }
                softmax_slice(row);
            }
            let out = scores.matmul(&v)?;
            for r in 0..t {
                concat.row_mut(r)[head * hd..(head + 1) * hd].copy_from_slice(out.row(r));
            }
            if let Some(m) = maps.as_mut() {
                m.push(scores);
            }
        }
        let attn_out = block.proj.forward(&concat)?;
        let mut x = residual(x, &attn_out, block.ls1.as_deref());

        let h = layer_norm(&x, &block.norm2.weight, &block.norm2.bias, eps)?;
        let mut hidden = block.fc1.forward(&h)?;
        hidden.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
        let mlp_out = block.fc2.forward(&hidden)?;
        x = residual(&x, &mlp_out, block.ls2.as_deref());
        Ok((x, maps))
    }

    /// Axial 2D rotary phases on patch rows: the first half of each head's
    /// dimensions rotates with the grid row, the second half with the column.
    fn apply_rotary(&self, m: &mut Matrix) {
        let cfg = &self.config;
        let layout = cfg.layout();
        let hd = cfg.head_dim();
        let quarter = hd / 4;
        for idx in layout.indices(GroupKind::Patches) {
            let p = idx - layout.first_patch();
            let coords = [(p / layout.grid_cols) as f64, (p % layout.grid_cols) as f64];
            let row = m.row_mut(idx);
            for (axis, &pos) in coords.iter().enumerate() {
                let base = axis * hd / 2;
                for i in 0..quarter {
                    let freq = cfg.rope_base.powf(-(i as f64) / quarter as f64);
                    let (sin, cos) = (pos * freq).sin_cos();
                    let a = row[base + i] as f64;
                    let b = row[base + i + quarter] as f64;
                    row[base + i] = (a * cos - b * sin) as f32;
                    row[base + i + quarter] = (a * sin + b * cos) as f32;
                }
            }
        }
    }
}

fn residual(x: &Matrix, delta: &Matrix, gamma: Option<&[f32]>) -> Matrix {
    let mut out = x.clone();
    let cols = x.cols();
    for (dst, src) in out
        .as_mut_slice()
        .chunks_exact_mut(cols)
        .zip(delta.as_slice().chunks_exact(cols))
    {
        match gamma {
            Some(g) => {
                for ((o, &dv), &gv) in dst.iter_mut().zip(src).zip(g) {
                    *o += gv * dv;
                }
            }
            None => {
                for (o, &dv) in dst.iter_mut().zip(src) {
                    *o += dv;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::random_image;

    fn toy() -> VisionTransformer {
        VisionTransformer::random(ModelConfig::toy(), 3).unwrap()
    }

    #[test]
    fn trace_shapes_and_row_sums() {
        let m = toy();
        let img = random_image(32, 1);
        let t = m.forward(&img, None).unwrap();
        assert_eq!(t.token_states.len(), 5);
        assert_eq!(t.attention.len(), 4);
        assert_eq!(t.layout.len(), 67);
        for layer in &t.attention {
            assert_eq!(layer.len(), 4);
            for head in layer {
                for row in head.row_iter() {
                    let s: f64 = row.iter().map(|&v| v as f64).sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
        assert!(t.post_norm_final.is_finite());
    }

    #[test]
    fn forward_is_deterministic() {
        let m = toy();
        let img = random_image(32, 2);
        assert_eq!(m.forward(&img, None).unwrap(), m.forward(&img, None).unwrap());
    }

    #[test]
    fn extract_feature_shapes() {
        let m = toy();
        let t = m.forward(&random_image(32, 4), None).unwrap();
        assert_eq!(extract_features(&t, FeatureGroup::Cls).unwrap().shape(), (1, 64));
        assert_eq!(extract_features(&t, FeatureGroup::Patches).unwrap().shape(), (64, 64));
        assert_eq!(extract_features(&t, FeatureGroup::Register(1)).unwrap().shape(), (1, 64));
        assert!(matches!(
            extract_features(&t, FeatureGroup::Register(2)),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let m = toy();
        assert!(matches!(m.forward(&random_image(16, 0), None), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_registers_reduces_to_cls_plus_patches() {
        let cfg = ModelConfig {
            register_count: 0,
            ..ModelConfig::toy()
        };
        let m = VisionTransformer::random(cfg, 1).unwrap();
        let t = m.forward(&random_image(32, 0), None).unwrap();
        assert_eq!(t.post_norm_final.rows(), 1 + 64);
        assert_eq!(t.attention[0][0].shape(), (65, 65));
    }

    #[test]
    fn rotary_mode_runs() {
        let cfg = ModelConfig {
            positional_mode: PositionalMode::RotaryPatch,
            ..ModelConfig::toy()
        };
        let m = VisionTransformer::random(cfg, 1).unwrap();
        let t = m.forward(&random_image(32, 0), None).unwrap();
        assert!(t.post_norm_final.is_finite());
    }
}
