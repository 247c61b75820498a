//! Shared fixtures and a plain-loop reference transformer.
#![allow(dead_code)]

use rand::Rng;
use saim::model::{Block, Head, Linear, ModelConfig, ModelParams, Norm};
use saim::numerics::Tensor;
use saim::patching::PatchSequence;
use saim::rng::seeded;

pub fn random_patches(cfg: &ModelConfig, seed: u64) -> PatchSequence {
    let mut rng = seeded(seed);
    let g = cfg.grid();
    PatchSequence {
        grid_h: g,
        grid_w: g,
        patch_size: cfg.patch_size,
        channels: cfg.channels,
        values: (0..cfg.n_tokens() * cfg.patch_dim())
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect(),
    }
}

/// Config with an `grid × grid` token grid of 1-channel `P = 2` patches.
pub fn grid_config(grid: usize, embed_dim: usize, depth: usize, n_heads: usize) -> ModelConfig {
    ModelConfig {
        image_size: 2 * grid,
        channels: 1,
        patch_size: 2,
        embed_dim,
        depth,
        decoder_depth: depth,
        n_heads,
        mlp_ratio: 2,
        head_hidden_dim: embed_dim,
        ..ModelConfig::toy()
    }
}

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor<f64>) -> Mat {
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

fn linear(x: &Mat, l: &Linear<Tensor<f64>>) -> Mat {
    let w = mat(&l.weight);
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| {
                    l.bias.data()[j] + row.iter().zip(&w).map(|(a, wr)| a * wr[j]).sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn matmul(x: &Mat, w: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| row.iter().zip(w).map(|(a, wr)| a * wr[j]).sum())
                .collect()
        })
        .collect()
}

fn norm(x: &Mat, n: &Norm<Tensor<f64>>) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + 1e-6).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * n.weight.data()[j] + n.bias.data()[j])
                .collect()
        })
        .collect()
}

fn gelu(x: &Mat) -> Mat {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    x.iter()
        .map(|r| {
            r.iter()
                .map(|&v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh()))
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn cols(x: &Mat, start: usize, len: usize) -> Mat {
    x.iter().map(|r| r[start..start + len].to_vec()).collect()
}

/// Multi-head attention; rows with no visible key produce zeros.
fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize, visible: &dyn Fn(usize, usize) -> bool) -> Mat {
    let d = q[0].len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        for i in 0..q.len() {
            let keys: Vec<usize> = (0..k.len()).filter(|&j| visible(i, j)).collect();
            if keys.is_empty() {
                continue;
            }
            let s: Vec<f64> = keys
                .iter()
                .map(|&j| {
                    q[i][r.clone()]
                        .iter()
                        .zip(&k[j][r.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (&j, w) in keys.iter().zip(&e) {
                for c in r.clone() {
                    out[i][c] += w / z * v[j][c];
                }
            }
        }
    }
    out
}

fn mlp(x: Mat, b: &Block<Tensor<f64>>) -> Mat {
    let m = linear(&gelu(&linear(&norm(&x, &b.norm2), &b.fc1)), &b.fc2);
    add(&x, &m)
}

fn self_block(
    x: &Mat,
    b: &Block<Tensor<f64>>,
    heads: usize,
    visible: &dyn Fn(usize, usize) -> bool,
) -> Mat {
    let d = x[0].len();
    let qkv = matmul(&norm(x, &b.norm1), &mat(&b.qkv));
    let a = attend(
        &cols(&qkv, 0, d),
        &cols(&qkv, d, d),
        &cols(&qkv, 2 * d, d),
        heads,
        visible,
    );
    mlp(add(x, &linear(&a, &b.proj)), b)
}

fn cross_block(
    g: &Mat,
    h: &Mat,
    b: &Block<Tensor<f64>>,
    heads: usize,
    visible: &dyn Fn(usize, usize) -> bool,
) -> Mat {
    let d = g[0].len();
    let w = mat(&b.qkv);
    let q = matmul(&norm(g, &b.norm1), &cols(&w, 0, d));
    let kv = matmul(&norm(h, &b.norm1), &cols(&w, d, 2 * d));
    let a = attend(&q, &cols(&kv, 0, d), &cols(&kv, d, d), heads, visible);
    mlp(add(g, &linear(&a, &b.proj)), b)
}

/// Two-stream forward written with plain loops. `content(i, j)` / `query(i, j)`
/// say whether token `i` may read token `j`.
pub fn reference_forward(
    p: &ModelParams<f64>,
    x: &Tensor<f64>,
    content: &dyn Fn(usize, usize) -> bool,
    query: &dyn Fn(usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let cfg = &p.config;
    let w = &p.weights;
    let pos = mat(&p.pos_embed);
    let mut h = add(&linear(&mat(x), &w.patch_embed), &pos);
    let mut g = pos;
    let first = cfg.depth - cfg.decoder_depth;
    for (l, b) in w.encoder.iter().enumerate() {
        let prev = h.clone();
        h = self_block(&h, b, cfg.n_heads, content);
        if l >= first {
            let k = l - first;
            let dec = if cfg.share_weights {
                &w.encoder[l]
            } else {
                &w.decoder[k]
            };
            let kv = if cfg.decoder_reads_previous_layer {
                &prev
            } else {
                &h
            };
            g = cross_block(&g, kv, dec, cfg.n_heads, query);
        }
    }
    match &w.head {
        Head::Linear { norm: n, out } => linear(&norm(&g, n), out),
        Head::Mlp { norm: n, fc1, fc2 } => linear(&gelu(&linear(&norm(&g, n), fc1)), fc2),
        Head::Transformer {
            blocks,
            norm: n,
            out,
        } => {
            let mut y = g;
            for b in blocks {
                y = self_block(&y, b, cfg.n_heads, content);
            }
            linear(&norm(&y, n), out)
        }
    }
}

/// Mask-free encoder with plain loops.
pub fn reference_encoder(p: &ModelParams<f64>, x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let mut h = add(&linear(&mat(x), &p.weights.patch_embed), &mat(&p.pos_embed));
    for b in &p.weights.encoder {
        h = self_block(&h, b, p.config.n_heads, &|_, _| true);
    }
    h
}

pub fn max_diff(a: &Tensor<f64>, b: &[Vec<f64>]) -> f64 {
    b.iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().zip(a.row(i)).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}
