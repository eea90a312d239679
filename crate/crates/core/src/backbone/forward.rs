use std::borrow::Cow;

use super::{special, BackboneWeights, KvCache, LayerWeights, Projection};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Scalar, Tensor};

/// Extra contribution added on top of a frozen projection, used by
/// token-conditional adapters. Rows with `mask[r] == false` must be left
/// untouched.
pub trait ProjectionDelta<T: Scalar> {
    fn add_delta(&self, layer: usize, proj: Projection, input: &[T], mask: &[bool], out: &mut [T]);
}

/// The plain backbone: no adapters anywhere.
pub struct NoDelta;

impl<T: Scalar> ProjectionDelta<T> for NoDelta {
    fn add_delta(&self, _: usize, _: Projection, _: &[T], _: &[bool], _: &mut [T]) {}
}

/// Result of a prefill pass.
#[derive(Clone, Debug)]
pub struct PrefillOutput<T> {
    /// Residual stream after each layer, `len x d_model` per layer.
    pub hidden: Vec<Tensor<T>>,
    /// Next-token logits at the last position.
    pub logits: Vec<T>,
    pub cache: KvCache<T>,
}

fn project<T: Scalar>(
    layer_w: &LayerWeights<T>,
    layer: usize,
    p: Projection,
    input: &[T],
    n: usize,
    delta: &dyn ProjectionDelta<T>,
    mask: &[bool],
) -> Vec<T> {
    let w = layer_w.projection(p).tensor();
    let (d_in, d_out) = (w.rows(), w.cols());
    let mut out = kernels::matmul(input, w.data(), n, d_in, d_out);
    delta.add_delta(layer, p, input, mask, &mut out);
    out
}

fn norm_rows<T: Scalar>(x: &[T], gain: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        kernels::rms_norm_row(xr, gain, or);
    }
    out
}

/// Attention sub-layer on already-normalised rows `h` (`n x d_model`) at
/// absolute positions `start..start + n`, attending to `past_k`/`past_v`
/// followed by the rows themselves. Returns `(W_o output, keys, values)`
/// where keys carry the rotary embedding.
#[allow(clippy::too_many_arguments)]
pub fn attention_block<T: Scalar>(
    weights: &BackboneWeights<T>,
    layer: usize,
    h: &[T],
    start: usize,
    past_k: &[T],
    past_v: &[T],
    delta: &dyn ProjectionDelta<T>,
    mask: &[bool],
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let cfg = &weights.config;
    let d = cfg.d_model;
    if !h.len().is_multiple_of(d) || past_k.len() != past_v.len() || !past_k.len().is_multiple_of(d) {
        return Err(Error::shape("attention_block inputs do not match d_model"));
    }
    let n = h.len() / d;
    if mask.len() != n {
        return Err(Error::shape(format!("mask of {} rows for {n}", mask.len())));
    }
    let n_past = past_k.len() / d;
    if n_past != start {
        return Err(Error::shape(format!("{n_past} cached positions but start {start}")));
    }
    let lw = &weights.layers[layer];
    let mut q = project(lw, layer, Projection::Q, h, n, delta, mask);
    let mut k = project(lw, layer, Projection::K, h, n, delta, mask);
    let v = project(lw, layer, Projection::V, h, n, delta, mask);
    for r in 0..n {
        let (c, s) = kernels::rope_tables::<T>(start + r, cfg.head_dim(), cfg.rope_base);
        kernels::rope_row(&mut q[r * d..(r + 1) * d], cfg.n_heads, &c, &s, false);
        kernels::rope_row(&mut k[r * d..(r + 1) * d], cfg.n_heads, &c, &s, false);
    }
    let (keys, values): (Cow<[T]>, Cow<[T]>) = if n_past == 0 {
        (Cow::Borrowed(&k), Cow::Borrowed(&v))
    } else {
        (Cow::Owned([past_k, &k].concat()), Cow::Owned([past_v, &v].concat()))
    };
    let mut attn = vec![T::zero(); n * d];
    let mut probs = vec![T::zero(); cfg.n_heads * (n_past + n)];
    for r in 0..n {
        let n_vis = n_past + r + 1;
        kernels::attend_row(
            &q[r * d..(r + 1) * d],
            &keys,
            &values,
            n_vis,
            cfg.n_heads,
            &mut attn[r * d..(r + 1) * d],
            &mut probs[..cfg.n_heads * n_vis],
        );
    }
    let o = project(lw, layer, Projection::O, &attn, n, delta, mask);
    Ok((o, k, v))
}

/// Gated feed-forward `W_down (silu(W_gate x) * (W_up x))` on `n` rows.
pub fn ffn_block<T: Scalar>(
    weights: &BackboneWeights<T>,
    layer: usize,
    x: &[T],
    delta: &dyn ProjectionDelta<T>,
    mask: &[bool],
) -> Result<Vec<T>> {
    let d = weights.config.d_model;
    if !x.len().is_multiple_of(d) || mask.len() != x.len() / d {
        return Err(Error::shape("ffn_block input does not match d_model"));
    }
    let n = x.len() / d;
    let lw = &weights.layers[layer];
    let gate = project(lw, layer, Projection::Gate, x, n, delta, mask);
    let up = project(lw, layer, Projection::Up, x, n, delta, mask);
    let act: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| kernels::silu(g) * u).collect();
    Ok(project(lw, layer, Projection::Down, &act, n, delta, mask))
}

/// One full pre-norm block over rows `x` (updated in place). Returns the new
/// keys and values of these rows.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<T: Scalar>(
    weights: &BackboneWeights<T>,
    layer: usize,
    x: &mut [T],
    start: usize,
    past_k: &[T],
    past_v: &[T],
    delta: &dyn ProjectionDelta<T>,
    mask: &[bool],
) -> Result<(Vec<T>, Vec<T>)> {
    let d = weights.config.d_model;
    let lw = &weights.layers[layer];
    let h = norm_rows(x, lw.attn_norm.tensor().data(), d);
    let (o, k, v) = attention_block(weights, layer, &h, start, past_k, past_v, delta, mask)?;
    for (xv, ov) in x.iter_mut().zip(&o) {
        *xv += *ov;
    }
    let h2 = norm_rows(x, lw.ffn_norm.tensor().data(), d);
    let f = ffn_block(weights, layer, &h2, delta, mask)?;
    for (xv, fv) in x.iter_mut().zip(&f) {
        *xv += *fv;
    }
    Ok((k, v))
}

pub(crate) fn embed_tokens<T: Scalar>(weights: &BackboneWeights<T>, tokens: &[u32]) -> Result<Vec<T>> {
    weights.check_tokens(tokens)?;
    let table = weights.embed.tensor();
    let mut x = Vec::with_capacity(tokens.len() * table.cols());
    for &t in tokens {
        x.extend_from_slice(table.row(t as usize));
    }
    Ok(x)
}

/// Final norm followed by the LM head for a single hidden row.
pub fn logits_from_hidden<T: Scalar>(weights: &BackboneWeights<T>, hidden: &[T]) -> Vec<T> {
    let d = weights.config.d_model;
    let mut normed = vec![T::zero(); d];
    kernels::rms_norm_row(hidden, weights.final_norm.tensor().data(), &mut normed);
    let head = weights.lm_head.tensor();
    kernels::matmul(&normed, head.data(), 1, d, head.cols())
}

/// Runs embedded rows through every layer from an empty cache.
pub fn prefill_rows<T: Scalar>(weights: &BackboneWeights<T>, mut x: Vec<T>) -> Result<PrefillOutput<T>> {
    let cfg = &weights.config;
    let n = x.len() / cfg.d_model;
    let mask = vec![false; n];
    let mut cache = KvCache::new(cfg.n_layers, cfg.d_model, cfg.max_seq_len);
    let mut hidden = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let (k, v) = block_forward(weights, layer, &mut x, 0, &[], &[], &NoDelta, &mask)?;
        cache.append(layer, &k, &v)?;
        hidden.push(Tensor::matrix(n, cfg.d_model, x.clone())?);
    }
    cache.commit()?;
    let logits = logits_from_hidden(weights, &x[(n - 1) * cfg.d_model..]);
    Ok(PrefillOutput { hidden, logits, cache })
}

/// Processes the whole prompt in parallel and returns per-layer hidden
/// states, last-position logits and the filled cache.
pub fn prefill<T: Scalar>(weights: &BackboneWeights<T>, tokens: &[u32]) -> Result<PrefillOutput<T>> {
    if tokens.is_empty() {
        return Err(Error::InvalidPrompt("empty prompt"));
    }
    if tokens.len() > weights.config.max_seq_len {
        return Err(Error::SeqTooLong { len: tokens.len(), max: weights.config.max_seq_len });
    }
    let x = embed_tokens(weights, tokens)?;
    prefill_rows(weights, x)
}

/// Feeds one token through every layer, appending its keys/values. Returns
/// the final-layer hidden row.
pub(crate) fn step_hidden<T: Scalar>(
    weights: &BackboneWeights<T>,
    cache: &mut KvCache<T>,
    token: u32,
) -> Result<Vec<T>> {
    let cfg = &weights.config;
    if cache.len() >= cfg.max_seq_len {
        return Err(Error::SeqTooLong { len: cache.len() + 1, max: cfg.max_seq_len });
    }
    let mut x = embed_tokens(weights, &[token])?;
    let start = cache.len();
    for layer in 0..cfg.n_layers {
        let (k, v) = block_forward(
            weights,
            layer,
            &mut x,
            start,
            cache.keys(layer),
            cache.values(layer),
            &NoDelta,
            &[false],
        )?;
        cache.append(layer, &k, &v)?;
    }
    cache.commit()?;
    Ok(x)
}

/// Incremental decoding: one position against the cache. Returns the
/// next-token logits; the cache grows by exactly one position.
pub fn decode_step<T: Scalar>(weights: &BackboneWeights<T>, cache: &mut KvCache<T>, token: u32) -> Result<Vec<T>> {
    let h = step_hidden(weights, cache, token)?;
    Ok(logits_from_hidden(weights, &h))
}

/// Greedy decoding that starts from a prefilled cache and the final hidden
/// row of the prompt. Stops at EOS (not included) or after `max_new` tokens.
pub fn generate_from<T: Scalar>(
    weights: &BackboneWeights<T>,
    mut cache: KvCache<T>,
    last_hidden: &[T],
    max_new: usize,
) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    if max_new == 0 {
        return Ok(out);
    }
    let mut logits = logits_from_hidden(weights, last_hidden);
    loop {
        let next = kernels::argmax(&logits) as u32;
        if next == special::EOS {
            break;
        }
        out.push(next);
        if out.len() == max_new {
            break;
        }
        logits = decode_step(weights, &mut cache, next)?;
    }
    Ok(out)
}

pub fn greedy_generate<T: Scalar>(weights: &BackboneWeights<T>, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    let pre = prefill(weights, prompt)?;
    let last = pre.hidden.last().expect("at least one layer");
    let d = weights.config.d_model;
    let row = last.row(last.rows() - 1).to_vec();
    debug_assert_eq!(row.len(), d);
    generate_from(weights, pre.cache, &row, max_new)
}
