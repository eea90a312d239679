//! Decoder-only causal transformer with explicit prefill and incremental
//! decoding phases.
//!
//! Blocks are pre-norm (RMSNorm), use rotary position embeddings and a
//! gated SiLU feed-forward network. Each block holds exactly seven
//! projection matrices: q, k, v, o, gate, up, down.

mod cache;
mod forward;
mod graph;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use cache::KvCache;
pub use forward::{
    attention_block, block_forward, decode_step, ffn_block, generate_from, greedy_generate,
    logits_from_hidden, prefill, prefill_rows, NoDelta, PrefillOutput, ProjectionDelta,
};
pub use graph::{lm_loss_on_tape, TapeParams};
pub(crate) use forward::embed_tokens;
pub(crate) use graph::{tape_block, TapeDelta};

/// Reserved token ids. Every vocabulary starts with these four.
pub mod special {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const CPX: u32 = 3;
    pub const COUNT: u32 = 4;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 192,
            max_seq_len: 256,
            rope_base: 10_000.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size < special::COUNT as usize {
            return bad(format!("vocab_size {} leaves no room for special tokens", self.vocab_size));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head_dim {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return bad("n_layers, d_ff and max_seq_len must be positive".into());
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return bad(format!("rope_base {} must be positive", self.rope_base));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(d_in, d_out)` of a projection.
    pub fn projection_dims(&self, p: Projection) -> (usize, usize) {
        match p {
            Projection::Q | Projection::K | Projection::V | Projection::O => (self.d_model, self.d_model),
            Projection::Gate | Projection::Up => (self.d_model, self.d_ff),
            Projection::Down => (self.d_ff, self.d_model),
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("max_seq_len".into(), self.max_seq_len.to_string()),
            ("rope_base".into(), format!("{:?}", self.rope_base)),
        ]
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        fn parse<V: FromStr>(get: &impl Fn(&str) -> Option<String>, key: &str) -> Result<V> {
            get(key)
                .ok_or_else(|| Error::Format(format!("missing config key {key}")))?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for {key}")))
        }
        let cfg = Self {
            vocab_size: parse(&get, "vocab_size")?,
            d_model: parse(&get, "d_model")?,
            n_layers: parse(&get, "n_layers")?,
            n_heads: parse(&get, "n_heads")?,
            d_ff: parse(&get, "d_ff")?,
            max_seq_len: parse(&get, "max_seq_len")?,
            rope_base: parse(&get, "rope_base")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The seven linear projections of a transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 7] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::O,
        Projection::Gate,
        Projection::Up,
        Projection::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
            Projection::Gate => "gate",
            Projection::Up => "up",
            Projection::Down => "down",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let p = match s.trim().to_ascii_lowercase().as_str() {
            "q" | "q_proj" => Projection::Q,
            "k" | "k_proj" => Projection::K,
            "v" | "v_proj" => Projection::V,
            "o" | "o_proj" => Projection::O,
            "gate" | "gate_proj" => Projection::Gate,
            "up" | "up_proj" => Projection::Up,
            "down" | "down_proj" => Projection::Down,
            _ => return Err(Error::UnknownTarget(s.to_string())),
        };
        Ok(p)
    }
}

/// A named weight tensor with a freeze flag. The value is reference counted
/// so forward tapes can borrow it without copying.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Arc<Tensor<T>>,
    pub frozen: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self {
            value: Arc::new(value),
            frozen: false,
        }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.value
    }

    /// Mutable access; clones the buffer if a tape still holds it.
    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            value: Arc::new(self.value.cast()),
            frozen: self.frozen,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerWeights<T> {
    pub attn_norm: Param<T>,
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
    pub wo: Param<T>,
    pub ffn_norm: Param<T>,
    pub w_gate: Param<T>,
    pub w_up: Param<T>,
    pub w_down: Param<T>,
}

impl<T: Scalar> LayerWeights<T> {
    /// Weight for `p`, stored `d_in x d_out` so that `out = H W`.
    pub fn projection(&self, p: Projection) -> &Param<T> {
        match p {
            Projection::Q => &self.wq,
            Projection::K => &self.wk,
            Projection::V => &self.wv,
            Projection::O => &self.wo,
            Projection::Gate => &self.w_gate,
            Projection::Up => &self.w_up,
            Projection::Down => &self.w_down,
        }
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Param<T>); 9] {
        [
            ("attn_norm", &mut self.attn_norm),
            ("q", &mut self.wq),
            ("k", &mut self.wk),
            ("v", &mut self.wv),
            ("o", &mut self.wo),
            ("ffn_norm", &mut self.ffn_norm),
            ("gate", &mut self.w_gate),
            ("up", &mut self.w_up),
            ("down", &mut self.w_down),
        ]
    }

    fn named(&self) -> [(&'static str, &Param<T>); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("q", &self.wq),
            ("k", &self.wk),
            ("v", &self.wv),
            ("o", &self.wo),
            ("ffn_norm", &self.ffn_norm),
            ("gate", &self.w_gate),
            ("up", &self.w_up),
            ("down", &self.w_down),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct BackboneWeights<T> {
    pub config: BackboneConfig,
    pub embed: Param<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Param<T>,
    pub lm_head: Param<T>,
}

fn uniform<T: Scalar>(rng: &mut crate::rng::Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let bound = std * 3f64.sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl<T: Scalar> BackboneWeights<T> {
    /// Random initialisation from the `backbone.init` stream of `seed`.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream(seed, "backbone.init");
        let c = &config;
        let d = c.d_model;
        let proj_std = 1.0 / (d as f64).sqrt();
        let out_std = proj_std / (2.0 * c.n_layers as f64).sqrt();
        let ones = |n: usize| Param::new(Tensor::full(vec![n], T::one()));
        let mut layers = Vec::with_capacity(c.n_layers);
        for _ in 0..c.n_layers {
            layers.push(LayerWeights {
                attn_norm: ones(d),
                wq: Param::new(uniform(&mut rng, vec![d, d], proj_std)),
                wk: Param::new(uniform(&mut rng, vec![d, d], proj_std)),
                wv: Param::new(uniform(&mut rng, vec![d, d], proj_std)),
                wo: Param::new(uniform(&mut rng, vec![d, d], out_std)),
                ffn_norm: ones(d),
                w_gate: Param::new(uniform(&mut rng, vec![d, c.d_ff], proj_std)),
                w_up: Param::new(uniform(&mut rng, vec![d, c.d_ff], proj_std)),
                w_down: Param::new(uniform(
                    &mut rng,
                    vec![c.d_ff, d],
                    out_std * (d as f64 / c.d_ff as f64).sqrt(),
                )),
            });
        }
        Ok(Self {
            embed: Param::new(uniform(&mut rng, vec![c.vocab_size, d], 1.0)),
            layers,
            final_norm: ones(d),
            lm_head: Param::new(uniform(&mut rng, vec![d, c.vocab_size], proj_std)),
            config,
        })
    }

    /// All tensors with stable names, in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, p) in layer.named() {
                out.push((format!("layers.{i}.{name}"), p));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, p) in layer.named_mut() {
                out.push((format!("layers.{i}.{name}"), p));
            }
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("lm_head".into(), &mut self.lm_head));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.numel()).sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for (_, p) in self.named_params_mut() {
            p.frozen = frozen;
        }
    }

    pub fn cast<U: Scalar>(&self) -> BackboneWeights<U> {
        BackboneWeights {
            config: self.config.clone(),
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ffn_norm: l.ffn_norm.cast(),
                    w_gate: l.w_gate.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.cast(),
        }
    }

    /// Bitwise equality of every tensor.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.named_params(), other.named_params());
        self.config == other.config
            && a.len() == b.len()
            && a.iter().zip(&b).all(|((na, pa), (nb, pb))| na == nb && pa.tensor().bit_eq(pb.tensor()))
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&t) => Err(Error::UnknownToken(t)),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_projections_per_block() {
        let w = BackboneWeights::<f32>::init(BackboneConfig::default(), 1).unwrap();
        for layer in &w.layers {
            let mats = Projection::ALL.iter().filter(|&&p| layer.projection(p).tensor().shape().len() == 2).count();
            assert_eq!(mats, 7);
        }
        let matrices = w
            .named_params()
            .iter()
            .filter(|(n, p)| n.starts_with("layers.0.") && p.tensor().shape().len() == 2)
            .count();
        assert_eq!(matrices, 7);
    }

    #[test]
    fn default_param_count() {
        let w = BackboneWeights::<f32>::init(BackboneConfig::default(), 1).unwrap();
        assert_eq!(w.num_params(), 4096 + 4 * 53_376 + 64 + 4096);
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig { n_heads: 5, ..BackboneConfig::default() }.validate().is_err());
        assert!(BackboneConfig { vocab_size: 3, ..BackboneConfig::default() }.validate().is_err());
        assert!("w".parse::<Projection>().is_err());
        assert_eq!("gate_proj".parse::<Projection>().unwrap(), Projection::Gate);
    }

    #[test]
    fn init_is_seeded() {
        let a = BackboneWeights::<f32>::init(BackboneConfig::default(), 3).unwrap();
        let b = BackboneWeights::<f32>::init(BackboneConfig::default(), 3).unwrap();
        let c = BackboneWeights::<f32>::init(BackboneConfig::default(), 4).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }
}
