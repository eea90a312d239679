//! Differentiable forward pass recorded on a [`Tape`], mirroring the
//! inference path kernel for kernel.

use super::{BackboneWeights, Projection};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Backbone tensors registered as tape leaves.
pub struct TapeParams {
    pub embed: Var,
    /// Per layer: attn_norm, q, k, v, o, ffn_norm, gate, up, down.
    pub layers: Vec<[Var; 9]>,
    pub final_norm: Var,
    pub lm_head: Var,
}

impl TapeParams {
    /// Registers every tensor; gradients are requested only when
    /// `trainable` is set and the tensor is not frozen.
    pub fn register<T: Scalar>(tape: &mut Tape<T>, weights: &BackboneWeights<T>, trainable: bool) -> Self {
        let mut leaf = |p: &super::Param<T>| tape.leaf(p.value.clone(), trainable && !p.frozen);
        let embed = leaf(&weights.embed);
        let layers = weights
            .layers
            .iter()
            .map(|l| {
                [
                    leaf(&l.attn_norm),
                    leaf(&l.wq),
                    leaf(&l.wk),
                    leaf(&l.wv),
                    leaf(&l.wo),
                    leaf(&l.ffn_norm),
                    leaf(&l.w_gate),
                    leaf(&l.w_up),
                    leaf(&l.w_down),
                ]
            })
            .collect();
        let final_norm = leaf(&weights.final_norm);
        let lm_head = leaf(&weights.lm_head);
        Self { embed, layers, final_norm, lm_head }
    }

    /// Vars in the same order as [`BackboneWeights::named_params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend_from_slice(l);
        }
        out.push(self.final_norm);
        out.push(self.lm_head);
        out
    }

    pub fn projection(&self, layer: usize, p: Projection) -> Var {
        let l = &self.layers[layer];
        match p {
            Projection::Q => l[1],
            Projection::K => l[2],
            Projection::V => l[3],
            Projection::O => l[4],
            Projection::Gate => l[6],
            Projection::Up => l[7],
            Projection::Down => l[8],
        }
    }
}

/// Differentiable counterpart of [`super::ProjectionDelta`].
pub(crate) trait TapeDelta<T: Scalar> {
    /// Given the input rows and the frozen projection output, returns the
    /// adapted output.
    fn apply(&self, tape: &mut Tape<T>, layer: usize, proj: Projection, input: Var, base: Var, mask: &[bool])
        -> Result<Var>;
}

pub(crate) struct NoTapeDelta;

impl<T: Scalar> TapeDelta<T> for NoTapeDelta {
    fn apply(&self, _: &mut Tape<T>, _: usize, _: Projection, _: Var, base: Var, _: &[bool]) -> Result<Var> {
        Ok(base)
    }
}

/// One pre-norm block on the tape. `past` holds constant (or recorded)
/// keys/values of earlier positions; `x` rows sit at `start..`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn tape_block<T: Scalar>(
    tape: &mut Tape<T>,
    weights: &BackboneWeights<T>,
    params: &TapeParams,
    layer: usize,
    x: Var,
    start: usize,
    past: Option<(Var, Var)>,
    delta: &dyn TapeDelta<T>,
    mask: &[bool],
) -> Result<Var> {
    let cfg = &weights.config;
    let lv = &params.layers[layer];
    let proj = |tape: &mut Tape<T>, p: Projection, input: Var| -> Result<Var> {
        let base = tape.matmul(input, params.projection(layer, p))?;
        delta.apply(tape, layer, p, input, base, mask)
    };
    let h = tape.rms_norm(x, lv[0])?;
    let q = proj(tape, Projection::Q, h)?;
    let k = proj(tape, Projection::K, h)?;
    let v = proj(tape, Projection::V, h)?;
    let q = tape.rope(q, start, cfg.n_heads, cfg.rope_base)?;
    let k = tape.rope(k, start, cfg.n_heads, cfg.rope_base)?;
    let (keys, values) = match past {
        Some((pk, pv)) => (tape.concat_rows(pk, k)?, tape.concat_rows(pv, v)?),
        None => (k, v),
    };
    let attn = tape.attention(q, keys, values, cfg.n_heads)?;
    let o = proj(tape, Projection::O, attn)?;
    let x = tape.add(x, o)?;
    let h2 = tape.rms_norm(x, lv[5])?;
    let gate = proj(tape, Projection::Gate, h2)?;
    let up = proj(tape, Projection::Up, h2)?;
    let act = tape.silu(gate)?;
    let act = tape.mul(act, up)?;
    let down = proj(tape, Projection::Down, act)?;
    tape.add(x, down)
}

/// Mean next-token cross-entropy of `tokens` at the given
/// `(position, target)` pairs: the logits at `position` predict `target`.
pub fn lm_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    weights: &BackboneWeights<T>,
    params: &TapeParams,
    tokens: &[u32],
    targets: &[(usize, u32)],
) -> Result<Var> {
    let cfg = &weights.config;
    if tokens.is_empty() || targets.is_empty() {
        return Err(Error::InvalidPrompt("empty training sequence"));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::SeqTooLong { len: tokens.len(), max: cfg.max_seq_len });
    }
    weights.check_tokens(tokens)?;
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut x = tape.gather(params.embed, &ids)?;
    let mask = vec![false; tokens.len()];
    for layer in 0..cfg.n_layers {
        x = tape_block(tape, weights, params, layer, x, 0, None, &NoTapeDelta, &mask)?;
    }
    let rows: Vec<usize> = targets.iter().map(|&(p, _)| p).collect();
    let tgt: Vec<usize> = targets.iter().map(|&(_, t)| t as usize).collect();
    let sel = tape.select_rows(x, &rows)?;
    let normed = tape.rms_norm(sel, params.final_norm)?;
    let logits = tape.matmul(normed, params.lm_head)?;
    let w = vec![T::one() / T::from_f64(targets.len() as f64); targets.len()];
    tape.cross_entropy(logits, &tgt, &w)
}
