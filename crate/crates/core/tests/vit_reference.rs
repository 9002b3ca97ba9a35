//! Independent f64 forward pass used as an oracle for the model.

use ablate_core::data::{synthetic::random_image, Image};
use ablate_core::tensor::Matrix;
use ablate_core::vit::{ForwardOptions, ModelConfig, VisionTransformer};
use proptest::prelude::*;

type Mat = Vec<Vec<f64>>;

fn to_f64(m: &Matrix) -> Mat {
    m.row_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn linear(x: &Mat, w: &Matrix, b: &[f32]) -> Mat {
    x.iter()
        .map(|row| {
            (0..w.rows())
                .map(|o| b[o] as f64 + row.iter().zip(w.row(o)).map(|(a, &c)| a * c as f64).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, w: &[f32], b: &[f32], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + eps).sqrt() * w[i] as f64 + b[i] as f64)
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

struct Reference {
    states: Vec<Mat>,
    attention: Vec<Vec<Mat>>,
}

fn reference_forward(model: &VisionTransformer, image: &Image) -> Reference {
    let cfg = model.config();
    let w = model.weights();
    let (p, side, d) = (cfg.patch_size, cfg.grid_side(), cfg.hidden_dim);
    let mut patches = Vec::new();
    for gy in 0..side {
        for gx in 0..side {
            let mut v = Vec::new();
            for c in 0..3 {
                for y in 0..p {
                    for x in 0..p {
                        v.push(image.at(c, gy * p + y, gx * p + x) as f64);
                    }
                }
            }
            patches.push(v);
        }
    }
    let emb = linear(&patches, &w.patch_embed.weight, &w.patch_embed.bias);
    let pos = w.pos_embed.as_ref().map(to_f64);
    let mut x: Mat = Vec::new();
    x.push(
        w.cls_token
            .iter()
            .enumerate()
            .map(|(i, &v)| v as f64 + pos.as_ref().map_or(0.0, |p| p[0][i]))
            .collect(),
    );
    for r in 0..cfg.register_count {
        x.push(w.register_tokens.row(r).iter().map(|&v| v as f64).collect());
    }
    for (k, e) in emb.iter().enumerate() {
        x.push(e.iter().enumerate().map(|(i, v)| v + pos.as_ref().map_or(0.0, |p| p[1 + k][i])).collect());
    }
    let mut states = vec![x.clone()];
    let mut attention = Vec::new();
    let hd = d / cfg.heads;
    for b in &w.blocks {
        let h = layer_norm(&x, &b.norm1.weight, &b.norm1.bias, cfg.layer_norm_eps);
        let qkv = linear(&h, &b.qkv.weight, &b.qkv.bias);
        let t = x.len();
        let mut concat = vec![vec![0.0; d]; t];
        let mut maps = Vec::new();
        for head in 0..cfg.heads {
            let mut a = vec![vec![0.0; t]; t];
            for i in 0..t {
                for j in 0..t {
                    a[i][j] = (0..hd).map(|c| qkv[i][head * hd + c] * qkv[j][d + head * hd + c]).sum::<f64>()
                        / (hd as f64).sqrt();
                }
                let m = a[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = a[i].iter().map(|s| (s - m).exp()).sum();
                for s in a[i].iter_mut() {
                    *s = (*s - m).exp() / z;
                }
                for c in 0..hd {
                    concat[i][head * hd + c] = (0..t).map(|j| a[i][j] * qkv[j][2 * d + head * hd + c]).sum();
                }
            }
            maps.push(a);
        }
        let out = linear(&concat, &b.proj.weight, &b.proj.bias);
        for (i, row) in x.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v += b.ls1.as_ref().map_or(1.0, |g| g[c] as f64) * out[i][c];
            }
        }
        let h = layer_norm(&x, &b.norm2.weight, &b.norm2.bias, cfg.layer_norm_eps);
        let hidden: Mat = linear(&h, &b.fc1.weight, &b.fc1.bias)
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let out = linear(&hidden, &b.fc2.weight, &b.fc2.bias);
        for (i, row) in x.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v += b.ls2.as_ref().map_or(1.0, |g| g[c] as f64) * out[i][c];
            }
        }
        states.push(x.clone());
        attention.push(maps);
    }
    Reference { states, attention }
}

fn max_rel_err(got: &Matrix, want: &Mat) -> f64 {
    let scale = want.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    got.row_iter()
        .zip(want)
        .flat_map(|(g, w)| g.iter().zip(w).map(|(&a, b)| (a as f64 - b).abs()))
        .fold(0.0, f64::max)
        / scale
}

fn check_against_reference(config: ModelConfig, seed: u64) {
    let model = VisionTransformer::random(config.clone(), seed).unwrap();
    let img = random_image(config.image_size, seed + 1);
    let traces = model
        .forward_batch(std::slice::from_ref(&img), None, ForwardOptions { record_attention: true })
        .unwrap();
    let reference = reference_forward(&model, &img);
    for (l, (got, want)) in traces[0].token_states.iter().zip(&reference.states).enumerate() {
        let e = max_rel_err(got, want);
        assert!(e < 1e-4, "state {l}: relative error {e}");
    }
    for (l, (heads, want)) in traces[0].attention.iter().zip(&reference.attention).enumerate() {
        for (h, (got, want)) in heads.iter().zip(want).enumerate() {
            let e = max_rel_err(got, want);
            assert!(e < 1e-4, "attention {l}/{h}: error {e}");
        }
    }
}

#[test]
fn toy_model_matches_reference() {
    check_against_reference(ModelConfig::toy(), 11);
}

#[test]
fn layer_scale_model_matches_reference() {
    let mut c = ModelConfig::toy();
    c.layer_scale = Some(0.5);
    c.register_count = 0;
    check_against_reference(c, 5);
}

#[test]
fn register_order_is_equivariant() {
    let config = ModelConfig::toy();
    let model = VisionTransformer::random(config.clone(), 3).unwrap();
    let mut weights = model.weights().clone();
    let (r0, r1) = (weights.register_tokens.row(0).to_vec(), weights.register_tokens.row(1).to_vec());
    weights.register_tokens.row_mut(0).copy_from_slice(&r1);
    weights.register_tokens.row_mut(1).copy_from_slice(&r0);
    let swapped = VisionTransformer::new(config.clone(), weights).unwrap();
    let img = random_image(config.image_size, 9);
    let a = model.forward(&img, None).unwrap();
    let b = swapped.forward(&img, None).unwrap();
    let last = |t: &ablate_core::vit::ActivationTrace| t.token_states.last().unwrap().clone();
    let (a, b) = (last(&a), last(&b));
    let close = |x: &[f32], y: &[f32]| x.iter().zip(y).all(|(p, q)| (p - q).abs() <= 1e-4 * (1.0 + p.abs()));
    assert!(close(a.row(1), b.row(2)));
    assert!(close(a.row(2), b.row(1)));
    assert!(close(a.row(0), b.row(0)));
    for i in 3..a.rows() {
        assert!(close(a.row(i), b.row(i)), "patch row {i}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn batch_order_is_equivariant(seed in 0u64..1000, perm_seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let config = ModelConfig::toy();
        let model = VisionTransformer::random(config.clone(), seed).unwrap();
        let images: Vec<Image> = (0..4).map(|i| random_image(config.image_size, seed * 7 + i)).collect();
        let mut order: Vec<usize> = (0..4).collect();
        order.shuffle(&mut ablate_core::tensor::stream(perm_seed, "perm", 0));
        let permuted: Vec<Image> = order.iter().map(|&i| images[i].clone()).collect();
        let a = model.forward_batch(&images, None, ForwardOptions::default()).unwrap();
        let b = model.forward_batch(&permuted, None, ForwardOptions::default()).unwrap();
        for (k, &i) in order.iter().enumerate() {
            prop_assert_eq!(&a[i].token_states, &b[k].token_states);
        }
    }
}
