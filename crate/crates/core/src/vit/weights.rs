//! Model parameters and their archive names.
//!
//! | archive name                     | shape            |
//! |----------------------------------|------------------|
//! | `patch_embed.weight`             | `[d, 3, p, p]` or `[d, 3·p·p]` |
//! | `patch_embed.bias`               | `[d]`            |
//! | `cls_token`                      | `[1, 1, d]` / `[1, d]` / `[d]` |
//! | `register_tokens`                | `[1, R, d]` / `[R, d]` |
//! | `pos_embed`                      | `[1, 1+P, d]` / `[1+P, d]` (learned_absolute only) |
//! | `blocks.{i}.norm1.{weight,bias}` | `[d]`            |
//! | `blocks.{i}.attn.qkv.{weight,bias}` | `[3d, d]`, `[3d]` |
//! | `blocks.{i}.attn.proj.{weight,bias}` | `[d, d]`, `[d]` |
//! | `blocks.{i}.ls1.gamma`           | `[d]` (when layer scale is present) |
//! | `blocks.{i}.norm2.{weight,bias}` | `[d]`            |
//! | `blocks.{i}.mlp.fc1.{weight,bias}` | `[h, d]`, `[h]` |
//! | `blocks.{i}.mlp.fc2.{weight,bias}` | `[d, h]`, `[d]` |
//! | `blocks.{i}.ls2.gamma`           | `[d]`            |
//! | `norm.{weight,bias}`             | `[d]` (terminal norm) |
//!
//! The model configuration travels in the archive metadata under `"config"`.
//! Archives containing gated-MLP parameters (`mlp.w12`, `mlp.w3`, ...) are
//! rejected at import.

use rand::Rng;
use rand_distr::StandardNormal;

use super::ModelConfig;
use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, RandomStream};

/// Affine map `y = x Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul_t(&self.weight)?;
        y.add_row_vector(&self.bias)?;
        Ok(y)
    }

    fn check(&self, name: &str, out: usize, inp: usize) -> Result<()> {
        if self.weight.shape() != (out, inp) || self.bias.len() != out {
            return Err(Error::Contract(format!(
                "{name}: expected weight {out}x{inp} and bias {out}, got {:?} and {}",
                self.weight.shape(),
                self.bias.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl NormParams {
    fn identity(d: usize) -> Self {
        Self {
            weight: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    fn check(&self, name: &str, d: usize) -> Result<()> {
        if self.weight.len() != d || self.bias.len() != d {
            return Err(Error::Contract(format!("{name}: expected length {d}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub norm1: NormParams,
    pub qkv: Linear,
    pub proj: Linear,
    pub ls1: Option<Vec<f32>>,
    pub norm2: NormParams,
    pub fc1: Linear,
    pub fc2: Linear,
    pub ls2: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTWeights {
    /// `d × (3·p·p)`, input flattened in `(channel, y, x)` order.
    pub patch_embed: Linear,
    pub cls_token: Vec<f32>,
    /// `R × d`.
    pub register_tokens: Matrix,
    /// `(1 + P) × d`, present for learned absolute positions.
    pub pos_embed: Option<Matrix>,
    pub blocks: Vec<BlockWeights>,
    pub norm: Option<NormParams>,
}

impl ViTWeights {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let d = config.hidden_dim;
        let h = config.mlp_hidden();
        self.patch_embed
            .check("patch_embed", d, config.patch_input_dim())?;
        if self.cls_token.len() != d {
            return Err(Error::Contract(format!("cls_token: expected length {d}")));
        }
        if self.register_tokens.shape() != (config.register_count, d) {
            return Err(Error::Contract(format!(
                "register_tokens: expected {}x{d}, got {:?}",
                config.register_count,
                self.register_tokens.shape()
            )));
        }
        match (config.positional_mode, &self.pos_embed) {
            (super::PositionalMode::LearnedAbsolute, Some(p)) => {
                if p.shape() != (1 + config.patch_count(), d) {
                    return Err(Error::Contract(format!(
                        "pos_embed: expected {}x{d}, got {:?}",
                        1 + config.patch_count(),
                        p.shape()
                    )));
                }
            }
            (super::PositionalMode::LearnedAbsolute, None) => {
                return Err(Error::Contract("pos_embed missing for learned positions".into()))
            }
            (super::PositionalMode::RotaryPatch, _) => {}
        }
        if self.blocks.len() != config.depth {
            return Err(Error::Contract(format!(
                "expected {} blocks, got {}",
                config.depth,
                self.blocks.len()
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.norm1.check(&format!("blocks.{i}.norm1"), d)?;
            b.norm2.check(&format!("blocks.{i}.norm2"), d)?;
            b.qkv.check(&format!("blocks.{i}.attn.qkv"), 3 * d, d)?;
            b.proj.check(&format!("blocks.{i}.attn.proj"), d, d)?;
            b.fc1.check(&format!("blocks.{i}.mlp.fc1"), h, d)?;
            b.fc2.check(&format!("blocks.{i}.mlp.fc2"), d, h)?;
            for (name, ls) in [("ls1", &b.ls1), ("ls2", &b.ls2)] {
                if let Some(g) = ls {
                    if g.len() != d {
                        return Err(Error::Contract(format!("blocks.{i}.{name}: expected length {d}")));
                    }
                }
            }
        }
        match (&self.norm, config.terminal_layernorm) {
            (Some(n), true) => n.check("norm", d)?,
            (None, true) => return Err(Error::Contract("terminal norm parameters missing".into())),
            _ => {}
        }
        if !self.all_finite() {
            return Err(Error::Contract("weights contain non-finite values".into()));
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        let lin = |l: &Linear| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite());
        let vec = |v: &[f32]| v.iter().all(|x| x.is_finite());
        lin(&self.patch_embed)
            && vec(&self.cls_token)
            && self.register_tokens.is_finite()
            && self.pos_embed.as_ref().is_none_or(Matrix::is_finite)
            && self.blocks.iter().all(|b| {
                lin(&b.qkv)
                    && lin(&b.proj)
                    && lin(&b.fc1)
                    && lin(&b.fc2)
                    && vec(&b.norm1.weight)
                    && vec(&b.norm1.bias)
                    && vec(&b.norm2.weight)
                    && vec(&b.norm2.bias)
                    && b.ls1.as_deref().is_none_or(vec)
                    && b.ls2.as_deref().is_none_or(vec)
            })
    }

    /// Seeded random initialisation, for toy models and tests.
    ///
    /// Linear weights are `N(0, 1/fan_in)`; token and position embeddings are
    /// `N(0, 0.5²)` so that positions remain distinguishable after a few blocks.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let h = config.mlp_hidden();
        let gauss = |name: &str, n: usize, std: f64| -> Vec<f32> {
            let mut rng = RandomStream::new(seed, format!("init/{name}"), 0).rng();
            (0..n)
                .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
                .collect()
        };
        let linear = |name: &str, out: usize, inp: usize| -> Result<Linear> {
            Ok(Linear {
                weight: Matrix::from_vec(
                    out,
                    inp,
                    gauss(&format!("{name}.weight"), out * inp, 1.0 / (inp as f64).sqrt()),
                )?,
                bias: gauss(&format!("{name}.bias"), out, 0.02),
            })
        };
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let ls = config.layer_scale.map(|g| vec![g; d]);
            blocks.push(BlockWeights {
                norm1: NormParams::identity(d),
                qkv: linear(&format!("blocks.{i}.attn.qkv"), 3 * d, d)?,
                proj: linear(&format!("blocks.{i}.attn.proj"), d, d)?,
                ls1: ls.clone(),
                norm2: NormParams::identity(d),
                fc1: linear(&format!("blocks.{i}.mlp.fc1"), h, d)?,
                fc2: linear(&format!("blocks.{i}.mlp.fc2"), d, h)?,
                ls2: ls,
            });
        }
        let pos_embed = match config.positional_mode {
            super::PositionalMode::LearnedAbsolute => {
                let n = 1 + config.patch_count();
                Some(Matrix::from_vec(n, d, gauss("pos_embed", n * d, 0.5))?)
            }
            super::PositionalMode::RotaryPatch => None,
        };
        let weights = Self {
            patch_embed: linear("patch_embed", d, config.patch_input_dim())?,
            cls_token: gauss("cls_token", d, 0.5),
            register_tokens: Matrix::from_vec(
                config.register_count,
                d,
                gauss("register_tokens", config.register_count * d, 0.5),
            )?,
            pos_embed,
            blocks,
            norm: config.terminal_layernorm.then(|| NormParams::identity(d)),
        };
        weights.validate(config)?;
        Ok(weights)
    }

    pub fn to_archive(&self, config: &ModelConfig) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        a.metadata
            .insert("config".into(), serde_json::to_value(config)?);
        a.metadata.insert(
            "token_order".into(),
            serde_json::Value::String("cls,registers,patches_row_major".into()),
        );
        let put_linear = |a: &mut TensorArchive, name: &str, l: &Linear| -> Result<()> {
            a.insert_matrix(format!("{name}.weight"), &l.weight)?;
            a.insert_vector(format!("{name}.bias"), &l.bias)
        };
        let put_norm = |a: &mut TensorArchive, name: &str, n: &NormParams| -> Result<()> {
            a.insert_vector(format!("{name}.weight"), &n.weight)?;
            a.insert_vector(format!("{name}.bias"), &n.bias)
        };
        put_linear(&mut a, "patch_embed", &self.patch_embed)?;
        a.insert_vector("cls_token", &self.cls_token)?;
        a.insert_matrix("register_tokens", &self.register_tokens)?;
        if let Some(p) = &self.pos_embed {
            a.insert_matrix("pos_embed", p)?;
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            put_norm(&mut a, &format!("{p}.norm1"), &b.norm1)?;
            put_linear(&mut a, &format!("{p}.attn.qkv"), &b.qkv)?;
            put_linear(&mut a, &format!("{p}.attn.proj"), &b.proj)?;
            if let Some(g) = &b.ls1 {
                a.insert_vector(format!("{p}.ls1.gamma"), g)?;
            }
            put_norm(&mut a, &format!("{p}.norm2"), &b.norm2)?;
            put_linear(&mut a, &format!("{p}.mlp.fc1"), &b.fc1)?;
            put_linear(&mut a, &format!("{p}.mlp.fc2"), &b.fc2)?;
            if let Some(g) = &b.ls2 {
                a.insert_vector(format!("{p}.ls2.gamma"), g)?;
            }
        }
        if let Some(n) = &self.norm {
            put_norm(&mut a, "norm", n)?;
        }
        Ok(a)
    }

    /// Reads the configuration from the archive metadata and the parameters
    /// from the named tensors.
    pub fn from_archive(archive: &TensorArchive) -> Result<(ModelConfig, Self)> {
        let config: ModelConfig = serde_json::from_value(
            archive
                .metadata
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Archive("archive metadata has no \"config\"".into()))?,
        )?;
        config.validate()?;
        for name in archive.names() {
            if name.contains("mlp.w12") || name.contains("mlp.w3") || name.contains("mlp.gate") {
                return Err(Error::Config(format!(
                    "unsupported gated MLP parameter {name:?}"
                )));
            }
        }
        let d = config.hidden_dim;
        let matrix = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            let t = archive.require(name)?;
            if t.numel() != rows * cols {
                return Err(Error::Archive(format!(
                    "{name}: shape {:?} incompatible with {rows}x{cols}",
                    t.shape
                )));
            }
            Matrix::from_vec(rows, cols, t.data.clone())
        };
        let vector = |name: &str, n: usize| -> Result<Vec<f32>> {
            let t = archive.require(name)?;
            if t.numel() != n {
                return Err(Error::Archive(format!(
                    "{name}: shape {:?} incompatible with length {n}",
                    t.shape
                )));
            }
            Ok(t.data.clone())
        };
        let linear = |name: &str, out: usize, inp: usize| -> Result<Linear> {
            Ok(Linear {
                weight: matrix(&format!("{name}.weight"), out, inp)?,
                bias: vector(&format!("{name}.bias"), out)?,
            })
        };
        let norm = |name: &str| -> Result<NormParams> {
            Ok(NormParams {
                weight: vector(&format!("{name}.weight"), d)?,
                bias: vector(&format!("{name}.bias"), d)?,
            })
        };
        let optional = |name: &str| -> Result<Option<Vec<f32>>> {
            archive.get(name).map(|_| vector(name, d)).transpose()
        };
        let h = config.mlp_hidden();
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("blocks.{i}");
            blocks.push(BlockWeights {
                norm1: norm(&format!("{p}.norm1"))?,
                qkv: linear(&format!("{p}.attn.qkv"), 3 * d, d)?,
                proj: linear(&format!("{p}.attn.proj"), d, d)?,
                ls1: optional(&format!("{p}.ls1.gamma"))?,
                norm2: norm(&format!("{p}.norm2"))?,
                fc1: linear(&format!("{p}.mlp.fc1"), h, d)?,
                fc2: linear(&format!("{p}.mlp.fc2"), d, h)?,
                ls2: optional(&format!("{p}.ls2.gamma"))?,
            });
        }
        let pos_embed = match config.positional_mode {
            super::PositionalMode::LearnedAbsolute => {
                Some(matrix("pos_embed", 1 + config.patch_count(), d)?)
            }
            super::PositionalMode::RotaryPatch => None,
        };
        let register_tokens = if config.register_count == 0 {
            Matrix::zeros(0, d)
        } else {
            matrix("register_tokens", config.register_count, d)?
        };
        let weights = Self {
            patch_embed: linear("patch_embed", d, config.patch_input_dim())?,
            cls_token: vector("cls_token", d)?,
            register_tokens,
            pos_embed,
            blocks,
            norm: if config.terminal_layernorm {
                Some(norm("norm")?)
            } else {
                None
            },
        };
        weights.validate(&config)?;
        Ok((config, weights))
    }
}
