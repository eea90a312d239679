//! Shared fixtures and a slow, independent reference forward pass.

#![allow(dead_code)]

pub mod oracles;

use introlm_core::backbone::{BackboneConfig, BackboneWeights, Projection};
use introlm_core::introspect::{Aggregator, IntroModel};
use introlm_core::Tensor;
use rand::{Rng, SeedableRng};

pub fn tiny_config() -> BackboneConfig {
    BackboneConfig { vocab_size: 24, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 24, max_seq_len: 40, rope_base: 10_000.0 }
}

pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Random prompt of natural tokens (ids 4.. so no reserved token appears).
pub fn random_prompt(r: &mut impl Rng, vocab: usize, min_len: usize, max_len: usize) -> Vec<u32> {
    let n = r.gen_range(min_len..=max_len);
    let mut p = vec![1u32];
    p.extend((1..n).map(|_| r.gen_range(4..vocab as u32)));
    p
}

/// Fills every adapter `B` (and `A`) with random values so updates are
/// non-zero.
pub fn randomize_adapters<T: introlm_core::Scalar>(model: &mut IntroModel<T>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for a in &mut model.adapters {
        for v in a.a.tensor_mut().data_mut() {
            *v = T::from_f64(r.gen_range(-scale..scale));
        }
        for v in a.b.tensor_mut().data_mut() {
            *v = T::from_f64(r.gen_range(-scale..scale));
        }
    }
    for v in model.head.weight.tensor_mut().data_mut() {
        *v = T::from_f64(r.gen_range(-1.0..1.0));
    }
    model.head.bias.tensor_mut().data_mut()[0] = T::from_f64(r.gen_range(-0.5..0.5));
    for v in model.cpx_embed.tensor_mut().data_mut() {
        *v = T::from_f64(r.gen_range(-1.0..1.0));
    }
}

fn to64(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mat_vec(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    // w is d_in x d_out.
    let d_out = w[0].len();
    (0..d_out).map(|o| x.iter().zip(w).map(|(xi, wr)| xi * wr[o]).sum()).collect()
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(g).map(|(v, gi)| v * inv * gi).collect()
}

fn rope(x: &mut [f64], pos: usize, n_heads: usize, base: f64) {
    let hd = x.len() / n_heads;
    for h in 0..n_heads {
        for i in 0..hd / 2 {
            let theta = pos as f64 * base.powf(-(2.0 * i as f64) / hd as f64);
            let (a, b) = (x[h * hd + i], x[h * hd + i + hd / 2]);
            x[h * hd + i] = a * theta.cos() - b * theta.sin();
            x[h * hd + i + hd / 2] = b * theta.cos() + a * theta.sin();
        }
    }
}

/// Effective weight `W + scale B A` on rows where adapters are active.
fn effective(model: &IntroModel<f64>, layer: usize, p: Projection, active: bool) -> Vec<Vec<f64>> {
    let w = to64(model.backbone.layers[layer].projection(p).tensor());
    let Some(a) = model.adapter(layer, p).filter(|_| active) else { return w };
    let (r, d_in, d_out) = (a.rank(), a.d_in(), a.d_out());
    let (am, bm) = (a.a.tensor().data(), a.b.tensor().data());
    let s = a.alpha / r as f64;
    let mut out = w;
    for i in 0..d_in {
        for o in 0..d_out {
            let mut acc = 0.0;
            for k in 0..r {
                acc += bm[o * r + k] * am[k * d_in + i];
            }
            out[i][o] += s * acc;
        }
    }
    out
}

/// Reference forward over `tokens` with per-row adapter activity. Returns
/// the residual stream after each layer (`layers x rows x d`).
pub fn reference_forward(model: &IntroModel<f64>, rows: &[Vec<f64>], active: &[bool], n_layers: usize) -> Vec<Vec<Vec<f64>>> {
    let cfg = &model.backbone.config;
    let (d, nh) = (cfg.d_model, cfg.n_heads);
    let hd = d / nh;
    let mut x = rows.to_vec();
    let mut out = Vec::new();
    for l in 0..n_layers {
        let lw = &model.backbone.layers[l];
        let g1 = lw.attn_norm.tensor().data().to_vec();
        let g2 = lw.ffn_norm.tensor().data().to_vec();
        let n = x.len();
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        for (i, xi) in x.iter().enumerate() {
            let h = rms(xi, &g1);
            let mut qi = mat_vec(&h, &effective(model, l, Projection::Q, active[i]));
            let mut ki = mat_vec(&h, &effective(model, l, Projection::K, active[i]));
            rope(&mut qi, i, nh, cfg.rope_base);
            rope(&mut ki, i, nh, cfg.rope_base);
            q.push(qi);
            k.push(ki);
            v.push(mat_vec(&h, &effective(model, l, Projection::V, active[i])));
        }
        let mut next = Vec::new();
        for i in 0..n {
            let mut att = vec![0.0; d];
            for h in 0..nh {
                let c = h * hd..(h + 1) * hd;
                let logits: Vec<f64> = (0..=i)
                    .map(|j| q[i][c.clone()].iter().zip(&k[j][c.clone()]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let z: f64 = logits.iter().map(|s| s.exp()).sum();
                for j in 0..=i {
                    let p = logits[j].exp() / z;
                    for t in c.clone() {
                        att[t] += p * v[j][t];
                    }
                }
            }
            let o = mat_vec(&att, &effective(model, l, Projection::O, active[i]));
            let x1: Vec<f64> = x[i].iter().zip(&o).map(|(a, b)| a + b).collect();
            let h2 = rms(&x1, &g2);
            let gate = mat_vec(&h2, &effective(model, l, Projection::Gate, active[i]));
            let up = mat_vec(&h2, &effective(model, l, Projection::Up, active[i]));
            let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let down = mat_vec(&act, &effective(model, l, Projection::Down, active[i]));
            next.push(x1.iter().zip(&down).map(|(a, b)| a + b).collect());
        }
        x = next;
        out.push(x.clone());
    }
    out
}

/// Reference capability logit of `prompt` under `model`.
pub fn reference_logit(model: &IntroModel<f64>, prompt: &[u32]) -> f64 {
    let emb = &model.backbone.embed;
    let mut rows: Vec<Vec<f64>> = prompt.iter().map(|&t| emb.tensor().row(t as usize).to_vec()).collect();
    let c = model.cpx.n_cpx;
    for _ in 0..c {
        rows.push(model.cpx_embed.tensor().data().to_vec());
    }
    let mut active = vec![false; prompt.len()];
    active.extend(std::iter::repeat_n(true, c));
    let hidden = reference_forward(model, &rows, &active, model.depth());
    let last = hidden.last().unwrap();
    let g = model.backbone.final_norm.tensor().data();
    let cpx: Vec<Vec<f64>> = last[prompt.len()..]
        .iter()
        .map(|r| if model.cpx.post_norm { rms(r, g) } else { r.clone() })
        .collect();
    let pooled: Vec<f64> = match model.cpx.aggregator {
        Aggregator::Mean => (0..cpx[0].len()).map(|j| cpx.iter().map(|r| r[j]).sum::<f64>() / c as f64).collect(),
        Aggregator::Last => cpx.last().unwrap().clone(),
    };
    let w = model.head.weight.tensor().data();
    pooled.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + model.head.bias.tensor().data()[0]
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn backbone(seed: u64) -> std::sync::Arc<BackboneWeights<f32>> {
    std::sync::Arc::new(BackboneWeights::init(tiny_config(), seed).unwrap())
}
