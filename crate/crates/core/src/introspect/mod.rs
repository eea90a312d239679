//! `[CPX]` introspection tokens, token-conditional LoRA and the capability
//! classifier head.
//!
//! Scoring runs a single joint prefill over `prompt ++ [CPX] x n`. Adapters
//! fire only on `[CPX]` rows, and causal attention keeps prompt rows from
//! seeing them, so prompt hidden states and the KV cache are exactly those
//! of the bare backbone. `[CPX]` keys and values are never cached.

mod graph;
mod head;
mod lora;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    block_forward, embed_tokens, generate_from, prefill, special, BackboneWeights, KvCache, Param, Projection,
    ProjectionDelta,
};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Scalar, Tensor};

pub use graph::{IntroTapeParams, PrefixCache};
pub use head::{Aggregator, ClassifierHead};
pub use lora::{masked_lora_projection, LoraAdapter, LoraSpec};

pub(crate) use graph::backbone_only_logit_on_tape as graph_backbone_only;
pub(crate) use head::head_on_tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpxConfig {
    pub cpx_token_id: u32,
    pub n_cpx: usize,
    /// Number of blocks whose output feeds the head (1-based); `None`
    /// means every layer.
    pub layer: Option<usize>,
    pub aggregator: Aggregator,
    /// Apply the backbone's final RMSNorm gain to `[CPX]` states before
    /// pooling.
    pub post_norm: bool,
}

impl Default for CpxConfig {
    fn default() -> Self {
        Self {
            cpx_token_id: special::CPX,
            n_cpx: 1,
            layer: None,
            aggregator: Aggregator::Mean,
            post_norm: true,
        }
    }
}

impl CpxConfig {
    pub fn depth(&self, n_layers: usize) -> usize {
        self.layer.unwrap_or(n_layers)
    }

    pub fn validate(&self, vocab_size: usize, n_layers: usize) -> Result<()> {
        if self.n_cpx == 0 {
            return Err(Error::InvalidConfig("n_cpx must be at least 1".into()));
        }
        let k = self.depth(n_layers);
        if k == 0 || k > n_layers {
            return Err(Error::OutOfRange(format!("introspection layer {k} outside 1..={n_layers}")));
        }
        let id = self.cpx_token_id;
        if id as usize >= vocab_size || [special::PAD, special::BOS, special::EOS].contains(&id) {
            return Err(Error::InvalidConfig(format!("cpx token id {id} is not usable")));
        }
        Ok(())
    }
}

/// Per-position flag marking `[CPX]` rows of one sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask(Vec<bool>);

impl TokenMask {
    pub fn from_tokens(tokens: &[u32], cpx_token_id: u32) -> Self {
        Self(tokens.iter().map(|&t| t == cpx_token_id).collect())
    }

    pub fn from_bools(rows: Vec<bool>) -> Self {
        Self(rows)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

/// `prompt ++ [CPX] x n_cpx` and its mask.
pub fn append_cpx(prompt: &[u32], cfg: &CpxConfig, max_seq_len: usize) -> Result<(Vec<u32>, TokenMask)> {
    if prompt.is_empty() {
        return Err(Error::InvalidPrompt("empty prompt"));
    }
    if let Some(pos) = prompt.iter().position(|&t| t == cfg.cpx_token_id) {
        return Err(Error::ReservedTokenInPrompt(pos));
    }
    let len = prompt.len() + cfg.n_cpx;
    if len > max_seq_len {
        return Err(Error::SeqTooLong { len, max: max_seq_len });
    }
    let mut tokens = prompt.to_vec();
    tokens.extend(std::iter::repeat_n(cfg.cpx_token_id, cfg.n_cpx));
    let mask = TokenMask::from_tokens(&tokens, cfg.cpx_token_id);
    Ok((tokens, mask))
}

/// Where adapter updates are applied during a joint pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskMode {
    #[default]
    CpxOnly,
    /// Deliberately broken: adapters also modify prompt rows. Used as a
    /// negative control for the invariance checks.
    AllPositions,
}

/// Backbone plus the introspection parameters.
#[derive(Clone, Debug)]
pub struct IntroModel<T> {
    pub backbone: Arc<BackboneWeights<T>>,
    pub cpx: CpxConfig,
    /// `1 x d_model`.
    pub cpx_embed: Param<T>,
    pub adapters: Vec<LoraAdapter<T>>,
    pub head: ClassifierHead<T>,
    pub mask_mode: MaskMode,
}

/// Everything a single joint prefill produces.
#[derive(Clone, Debug)]
pub struct Introspection<T> {
    pub score: f64,
    pub logit: T,
    /// Exactly `len(prompt)` positions.
    pub cache: KvCache<T>,
    /// Final-layer hidden state of the last prompt token.
    pub last_hidden: Vec<T>,
    /// Prompt rows of the residual stream after each layer.
    pub prompt_hidden: Vec<Tensor<T>>,
}

pub fn sigmoid_score<T: Scalar>(logit: T) -> f64 {
    kernels::sigmoid(logit).as_f64()
}

impl<T: Scalar> IntroModel<T> {
    /// No adapters; `[CPX]` embedding copied from the backbone's table and a
    /// small random head.
    pub fn new(backbone: Arc<BackboneWeights<T>>, cpx: CpxConfig, seed: u64) -> Result<Self> {
        let c = &backbone.config;
        cpx.validate(c.vocab_size, c.n_layers)?;
        let embed = backbone.embed.tensor().row(cpx.cpx_token_id as usize).to_vec();
        let d = c.d_model;
        Ok(Self {
            cpx_embed: Param::new(Tensor::matrix(1, d, embed)?),
            head: ClassifierHead::init(d, seed),
            adapters: Vec::new(),
            mask_mode: MaskMode::CpxOnly,
            cpx,
            backbone,
        })
    }

    pub fn depth(&self) -> usize {
        self.cpx.depth(self.backbone.config.n_layers)
    }

    /// Replaces the adapter set with fresh adapters for every requested
    /// target in layers `0..depth`. An empty target set gives the
    /// frozen-weights configuration.
    pub fn set_lora_targets(&mut self, spec: &LoraSpec, seed: u64) -> Result<()> {
        spec.validate()?;
        let mut adapters = Vec::new();
        for layer in 0..self.depth() {
            for &p in &spec.targets {
                adapters.push(LoraAdapter::init(&self.backbone.config, p, layer, spec.rank, spec.alpha, seed)?);
            }
        }
        self.adapters = adapters;
        Ok(())
    }

    pub fn adapter(&self, layer: usize, proj: Projection) -> Option<&LoraAdapter<T>> {
        self.adapters.iter().find(|a| a.layer == layer && a.target == proj)
    }

    /// Adapter, head and `[CPX]` embedding parameters.
    pub fn num_intro_params(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::numel).sum::<usize>() + self.head.numel() + self.cpx_embed.numel()
    }

    fn final_norm(&self) -> Option<&[T]> {
        self.cpx.post_norm.then(|| self.backbone.final_norm.tensor().data())
    }

    fn joint_inputs(&self, prompt: &[u32]) -> Result<(Vec<T>, Vec<bool>)> {
        let (_, mask) = append_cpx(prompt, &self.cpx, self.backbone.config.max_seq_len)?;
        let mut x = embed_tokens(&self.backbone, prompt)?;
        for _ in 0..self.cpx.n_cpx {
            x.extend_from_slice(self.cpx_embed.tensor().data());
        }
        let mask = match self.mask_mode {
            MaskMode::CpxOnly => mask.as_slice().to_vec(),
            MaskMode::AllPositions => vec![true; mask.len()],
        };
        Ok((x, mask))
    }

    /// Capability logit from layers `0..depth` only.
    pub fn logit(&self, prompt: &[u32]) -> Result<T> {
        let (mut x, mask) = self.joint_inputs(prompt)?;
        for layer in 0..self.depth() {
            block_forward(&self.backbone, layer, &mut x, 0, &[], &[], self, &mask)?;
        }
        let d = self.backbone.config.d_model;
        self.head.logit_rows(&x[prompt.len() * d..], self.final_norm(), self.cpx.aggregator)
    }

    pub fn score(&self, prompt: &[u32]) -> Result<f64> {
        Ok(sigmoid_score(self.logit(prompt)?))
    }

    /// Scores prompts independently, splitting the work over `threads`
    /// workers. Results do not depend on the split.
    pub fn score_batch(&self, prompts: &[Vec<u32>], threads: usize) -> Result<Vec<f64>> {
        crate::par::parallel_map(prompts, threads, |p| self.score(p))
    }

    /// One joint pass yielding the score, the prompt-only cache and the
    /// state decoding starts from.
    pub fn prefill_with_introspection(&self, prompt: &[u32]) -> Result<Introspection<T>> {
        let (mut x, mut mask) = self.joint_inputs(prompt)?;
        let cfg = &self.backbone.config;
        let (n, d) = (prompt.len(), cfg.d_model);
        let depth = self.depth();
        let mut cache = KvCache::new(cfg.n_layers, d, cfg.max_seq_len);
        let mut prompt_hidden = Vec::with_capacity(cfg.n_layers);
        let mut cpx_rows = Vec::new();
        for layer in 0..cfg.n_layers {
            if layer == depth {
                cpx_rows = x.split_off(n * d);
                mask.truncate(n);
            }
            let (k, v) = block_forward(&self.backbone, layer, &mut x, 0, &[], &[], self, &mask)?;
            cache.append(layer, &k[..n * d], &v[..n * d])?;
            prompt_hidden.push(Tensor::matrix(n, d, x[..n * d].to_vec())?);
        }
        if depth == cfg.n_layers {
            cpx_rows = x.split_off(n * d);
        }
        cache.commit()?;
        let logit = self.head.logit_rows(&cpx_rows, self.final_norm(), self.cpx.aggregator)?;
        Ok(Introspection {
            score: sigmoid_score(logit),
            logit,
            cache,
            last_hidden: x[(n - 1) * d..n * d].to_vec(),
            prompt_hidden,
        })
    }

    /// Greedy decoding seeded from the introspective prefill. Returns the
    /// score alongside the generated tokens.
    pub fn generate(&self, prompt: &[u32], max_new: usize) -> Result<(f64, Vec<u32>)> {
        let out = self.prefill_with_introspection(prompt)?;
        let tokens = generate_from(&self.backbone, out.cache, &out.last_hidden, max_new)?;
        Ok((out.score, tokens))
    }

    /// Frozen backbone keys/values of the prompt, reused across training
    /// epochs.
    pub fn prefix_cache(&self, prompt: &[u32]) -> Result<PrefixCache<T>> {
        append_cpx(prompt, &self.cpx, self.backbone.config.max_seq_len)?;
        PrefixCache::build(&self.backbone, prompt)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("intro.cpx_token_id", self.cpx.cpx_token_id.to_string());
        ck.set_meta("intro.n_cpx", self.cpx.n_cpx.to_string());
        ck.set_meta("intro.layer", self.depth().to_string());
        ck.set_meta("intro.aggregator", self.cpx.aggregator.name());
        ck.set_meta("intro.post_norm", self.cpx.post_norm.to_string());
        ck.set_meta("intro.n_adapters", self.adapters.len().to_string());
        ck.push("intro.cpx_embed", self.cpx_embed.tensor());
        ck.push("intro.head.weight", self.head.weight.tensor());
        ck.push("intro.head.bias", self.head.bias.tensor());
        for (i, a) in self.adapters.iter().enumerate() {
            ck.set_meta(format!("intro.lora.{i}.target"), a.target.name());
            ck.set_meta(format!("intro.lora.{i}.layer"), a.layer.to_string());
            ck.set_meta(format!("intro.lora.{i}.alpha"), format!("{:?}", a.alpha));
            ck.push(format!("intro.lora.{i}.a"), a.a.tensor());
            ck.push(format!("intro.lora.{i}.b"), a.b.tensor());
        }
        ck
    }

    /// Rebuilds the introspection side from `ck` on top of `backbone`.
    pub fn from_checkpoint(backbone: Arc<BackboneWeights<T>>, ck: &Checkpoint) -> Result<Self> {
        fn meta<V: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<V> {
            ck.meta(key)
                .ok_or_else(|| Error::Format(format!("missing {key}")))?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for {key}")))
        }
        let cpx = CpxConfig {
            cpx_token_id: meta(ck, "intro.cpx_token_id")?,
            n_cpx: meta(ck, "intro.n_cpx")?,
            layer: Some(meta(ck, "intro.layer")?),
            aggregator: meta(ck, "intro.aggregator")?,
            post_norm: meta(ck, "intro.post_norm")?,
        };
        let mut model = Self::new(backbone, cpx, 0)?;
        let d = model.backbone.config.d_model;
        let expect = |t: Tensor<T>, shape: &[usize], name: &str| -> Result<Param<T>> {
            if t.shape() != shape {
                return Err(Error::Format(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(Param::new(t))
        };
        model.cpx_embed = expect(ck.get("intro.cpx_embed")?, &[1, d], "intro.cpx_embed")?;
        model.head.weight = expect(ck.get("intro.head.weight")?, &[d, 1], "intro.head.weight")?;
        model.head.bias = expect(ck.get("intro.head.bias")?, &[1, 1], "intro.head.bias")?;
        let n: usize = meta(ck, "intro.n_adapters")?;
        for i in 0..n {
            let target: Projection = meta(ck, &format!("intro.lora.{i}.target"))?;
            let layer: usize = meta(ck, &format!("intro.lora.{i}.layer"))?;
            if layer >= model.depth() {
                return Err(Error::Format(format!("adapter {i} on layer {layer} beyond depth")));
            }
            let (d_in, d_out) = model.backbone.config.projection_dims(target);
            let a: Tensor<T> = ck.get(&format!("intro.lora.{i}.a"))?;
            let r = a.rows();
            model.adapters.push(LoraAdapter {
                target,
                layer,
                a: expect(a, &[r, d_in], "lora a")?,
                b: expect(ck.get(&format!("intro.lora.{i}.b"))?, &[d_out, r], "lora b")?,
                alpha: meta(ck, &format!("intro.lora.{i}.alpha"))?,
            });
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(backbone: Arc<BackboneWeights<T>>, path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(backbone, &Checkpoint::read(path)?)
    }
}

impl<T: Scalar> ProjectionDelta<T> for IntroModel<T> {
    fn add_delta(&self, layer: usize, proj: Projection, input: &[T], mask: &[bool], out: &mut [T]) {
        let Some(a) = self.adapter(layer, proj) else { return };
        let (d_in, d_out) = (a.d_in(), a.d_out());
        for (r, &m) in mask.iter().enumerate() {
            if m {
                a.add_row(&input[r * d_in..(r + 1) * d_in], &mut out[r * d_out..(r + 1) * d_out]);
            }
        }
    }
}

/// Head applied to the final hidden state of the last prompt token, with no
/// `[CPX]` token and no adapters.
pub fn backbone_only_logit<T: Scalar>(
    weights: &BackboneWeights<T>,
    head: &ClassifierHead<T>,
    prompt: &[u32],
    post_norm: bool,
) -> Result<T> {
    let out = prefill(weights, prompt)?;
    let last = out.hidden.last().expect("at least one layer");
    let norm = post_norm.then(|| weights.final_norm.tensor().data());
    head.logit_rows(last.row(last.rows() - 1), norm, Aggregator::Last)
}

pub fn backbone_only_score<T: Scalar>(
    weights: &BackboneWeights<T>,
    head: &ClassifierHead<T>,
    prompt: &[u32],
    post_norm: bool,
) -> Result<f64> {
    Ok(sigmoid_score(backbone_only_logit(weights, head, prompt, post_norm)?))
}

/// Introspection parameter count for a backbone config without building
/// the model.
pub fn intro_param_count(config: &crate::backbone::BackboneConfig, cpx: &CpxConfig, lora: &LoraSpec) -> usize {
    let d = config.d_model;
    lora.num_params(config, cpx.depth(config.n_layers)) + (d + 1) + d
}
