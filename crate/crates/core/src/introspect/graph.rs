//! Training-time forward over `[CPX]` rows only. Prompt keys and values
//! come from a frozen prefix cache computed once per prompt.

use std::sync::Arc;

use super::{head_on_tape, IntroModel};
use crate::backbone::{block_forward, prefill, tape_block, BackboneWeights, Param, Projection, TapeDelta, TapeParams};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Backbone keys/values of a prompt plus its last final-layer hidden state.
#[derive(Clone, Debug)]
pub struct PrefixCache<T> {
    pub n_prompt: usize,
    pub keys: Vec<Arc<Tensor<T>>>,
    pub values: Vec<Arc<Tensor<T>>>,
    pub last_hidden: Vec<T>,
}

impl<T: Scalar> PrefixCache<T> {
    pub fn build(weights: &BackboneWeights<T>, prompt: &[u32]) -> Result<Self> {
        let out = prefill(weights, prompt)?;
        let (n, d) = (prompt.len(), weights.config.d_model);
        let mut keys = Vec::with_capacity(weights.config.n_layers);
        let mut values = Vec::with_capacity(weights.config.n_layers);
        for l in 0..weights.config.n_layers {
            keys.push(Arc::new(Tensor::matrix(n, d, out.cache.keys(l).to_vec())?));
            values.push(Arc::new(Tensor::matrix(n, d, out.cache.values(l).to_vec())?));
        }
        let last = out.hidden.last().expect("at least one layer");
        Ok(Self { n_prompt: n, keys, values, last_hidden: last.row(n - 1).to_vec() })
    }

    pub fn numel(&self) -> usize {
        self.keys.iter().chain(&self.values).map(|t| t.len()).sum::<usize>() + self.last_hidden.len()
    }
}

/// Introspection parameters registered on a tape. Backbone leaves never
/// request gradients.
pub struct IntroTapeParams {
    pub backbone: TapeParams,
    pub cpx_embed: Var,
    pub head_weight: Var,
    pub head_bias: Var,
    /// `(A, B)` per adapter, in model order.
    pub adapters: Vec<(Var, Var)>,
}

impl IntroTapeParams {
    pub fn register<T: Scalar>(tape: &mut Tape<T>, model: &IntroModel<T>) -> Self {
        let backbone = TapeParams::register(tape, &model.backbone, false);
        let mut leaf = |p: &Param<T>| tape.leaf(p.value.clone(), !p.frozen);
        let cpx_embed = leaf(&model.cpx_embed);
        let head_weight = leaf(&model.head.weight);
        let head_bias = leaf(&model.head.bias);
        let adapters = model.adapters.iter().map(|a| (leaf(&a.a), leaf(&a.b))).collect();
        Self { backbone, cpx_embed, head_weight, head_bias, adapters }
    }

    /// Same order as [`IntroModel::intro_params_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.cpx_embed, self.head_weight, self.head_bias];
        for &(a, b) in &self.adapters {
            out.push(a);
            out.push(b);
        }
        out
    }
}

struct AdapterDelta<'a, T> {
    model: &'a IntroModel<T>,
    vars: &'a [(Var, Var)],
}

impl<T: Scalar> TapeDelta<T> for AdapterDelta<'_, T> {
    fn apply(&self, tape: &mut Tape<T>, layer: usize, proj: Projection, input: Var, base: Var, mask: &[bool]) -> Result<Var> {
        match self.model.adapters.iter().position(|a| a.layer == layer && a.target == proj) {
            Some(i) => {
                let (a, b) = self.vars[i];
                self.model.adapters[i].apply_on_tape(tape, a, b, input, base, mask)
            }
            None => Ok(base),
        }
    }
}

impl<T: Scalar> IntroModel<T> {
    /// Every introspection tensor with a stable name.
    pub fn intro_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = vec![
            ("cpx_embed".to_string(), &mut self.cpx_embed),
            ("head.weight".to_string(), &mut self.head.weight),
            ("head.bias".to_string(), &mut self.head.bias),
        ];
        for a in &mut self.adapters {
            let name = format!("lora.{}.{}", a.layer, a.target);
            out.push((format!("{name}.a"), &mut a.a));
            out.push((format!("{name}.b"), &mut a.b));
        }
        out
    }

    pub fn intro_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = vec![
            ("cpx_embed".to_string(), &self.cpx_embed),
            ("head.weight".to_string(), &self.head.weight),
            ("head.bias".to_string(), &self.head.bias),
        ];
        for a in &self.adapters {
            let name = format!("lora.{}.{}", a.layer, a.target);
            out.push((format!("{name}.a"), &a.a));
            out.push((format!("{name}.b"), &a.b));
        }
        out
    }

    /// Capability logit computed from a frozen prefix without a tape.
    /// Equals [`IntroModel::logit`] bit for bit.
    pub fn logit_from_prefix(&self, prefix: &PrefixCache<T>) -> Result<T> {
        let depth = self.depth();
        if prefix.keys.len() < depth {
            return Err(Error::shape(format!("prefix cache has {} layers, need {depth}", prefix.keys.len())));
        }
        let c = self.cpx.n_cpx;
        let mut x = Vec::with_capacity(c * self.cpx_embed.numel());
        for _ in 0..c {
            x.extend_from_slice(self.cpx_embed.tensor().data());
        }
        let mask = vec![true; c];
        for layer in 0..depth {
            let (k, v) = (prefix.keys[layer].data(), prefix.values[layer].data());
            block_forward(&self.backbone, layer, &mut x, prefix.n_prompt, k, v, self, &mask)?;
        }
        let norm = self.cpx.post_norm.then(|| self.backbone.final_norm.tensor().data());
        self.head.logit_rows(&x, norm, self.cpx.aggregator)
    }

    /// Records the capability logit (`1 x 1`) for one prompt whose frozen
    /// prefix is `prefix`. Equals [`IntroModel::logit`] bit for bit.
    pub fn logit_on_tape(&self, tape: &mut Tape<T>, params: &IntroTapeParams, prefix: &PrefixCache<T>) -> Result<Var> {
        let depth = self.depth();
        if prefix.keys.len() < depth {
            return Err(Error::shape(format!("prefix cache has {} layers, need {depth}", prefix.keys.len())));
        }
        let c = self.cpx.n_cpx;
        let mut x = tape.gather(params.cpx_embed, &vec![0; c])?;
        let mask = vec![true; c];
        let delta = AdapterDelta { model: self, vars: &params.adapters };
        for layer in 0..depth {
            let pk = tape.leaf(prefix.keys[layer].clone(), false);
            let pv = tape.leaf(prefix.values[layer].clone(), false);
            x = tape_block(tape, &self.backbone, &params.backbone, layer, x, prefix.n_prompt, Some((pk, pv)), &delta, &mask)?;
        }
        let norm = self.cpx.post_norm.then_some(params.backbone.final_norm);
        head_on_tape(tape, x, norm, self.cpx.aggregator, params.head_weight, params.head_bias)
    }
}

/// Head on the cached last-prompt-token state, for the backbone-only
/// baseline.
pub(crate) fn backbone_only_logit_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    last_hidden: &[T],
    final_norm: Option<Var>,
    params: &IntroTapeParams,
) -> Result<Var> {
    let x = tape.constant(Tensor::matrix(1, last_hidden.len(), last_hidden.to_vec())?);
    head_on_tape(tape, x, final_norm, super::Aggregator::Last, params.head_weight, params.head_bias)
}
