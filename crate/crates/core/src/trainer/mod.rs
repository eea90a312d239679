//! Training loops: the backbone language model on the synthetic task, and
//! the introspection parameters on labelled prompts.

mod optim;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{lm_loss_on_tape, BackboneWeights, Param, Projection, TapeParams};
use crate::datagen::LabeledPrompt;
use crate::error::{Error, Result};
use crate::introspect::{IntroModel, IntroTapeParams, LoraSpec, PrefixCache};
use crate::metrics::{pr_auc_negative, roc_auc, ScoredSet};
use crate::tensor::{bce_value, Scalar, Tape, Var};

pub use optim::{clip_grad_norm, cosine_warmup_lr, global_norm, AdamW};

/// Loss weights for the two classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w0: f64,
    pub w1: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self { w0: 1.0, w1: 1.0 }
    }
}

impl ClassWeights {
    /// `w_c = N / (2 N_c)`, which averages to 1 over the data.
    pub fn inverse_frequency(labels: &[u8]) -> Result<Self> {
        let n = labels.len() as f64;
        let n1 = labels.iter().filter(|&&l| l == 1).count() as f64;
        let n0 = n - n1;
        if n0 == 0.0 || n1 == 0.0 {
            return Err(Error::DegenerateLabels);
        }
        Ok(Self { w0: n / (2.0 * n0), w1: n / (2.0 * n1) })
    }

    pub fn get(&self, label: u8) -> f64 {
        if label == 1 {
            self.w1
        } else {
            self.w0
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.w0 > 0.0 && self.w1 > 0.0 && self.w0.is_finite() && self.w1.is_finite()) {
            return Err(Error::InvalidConfig("class weights must be positive".into()));
        }
        Ok(())
    }
}

/// `-w_l [l log s(z) + (1 - l) log(1 - s(z))]`.
pub fn class_weighted_bce(logit: f64, label: u8, weights: &ClassWeights) -> Result<f64> {
    if label > 1 {
        return Err(Error::InvalidLabel(label));
    }
    Ok(weights.get(label) * bce_value(logit, f64::from(label)))
}

/// Derivative of [`class_weighted_bce`] with respect to the logit.
pub fn class_weighted_bce_grad(logit: f64, label: u8, weights: &ClassWeights) -> Result<f64> {
    if label > 1 {
        return Err(Error::InvalidLabel(label));
    }
    Ok(weights.get(label) * (crate::tensor::kernels::sigmoid(logit) - f64::from(label)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainMode {
    /// Next-token training of every non-frozen backbone tensor.
    BackboneLm,
    /// Head and `[CPX]` embedding only.
    FrozenCpx,
    /// Head, `[CPX]` embedding and masked adapters on `targets`.
    TokenLora { targets: BTreeSet<Projection>, rank: usize, alpha: f64 },
    /// Head on the last prompt token's final hidden state; no `[CPX]`.
    BackboneOnly,
}

impl TrainMode {
    pub fn token_lora(spec: &LoraSpec) -> Self {
        TrainMode::TokenLora { targets: spec.targets.clone(), rank: spec.rank, alpha: spec.alpha }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::BackboneLm => "backbone",
            TrainMode::FrozenCpx => "frozen-cpx",
            TrainMode::TokenLora { .. } => "token-lora",
            TrainMode::BackboneOnly => "backbone-only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Base learning rate; the group overrides below fall back to it.
    pub lr: f64,
    pub lr_head: Option<f64>,
    pub lr_cpx: Option<f64>,
    pub lr_lora: Option<f64>,
    pub warmup_ratio: f64,
    pub max_grad_norm: f64,
    pub weight_decay: f64,
    /// `None` selects inverse class frequency on the training labels.
    pub class_weights: Option<ClassWeights>,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 3,
            lr: 5e-5,
            lr_head: None,
            lr_cpx: None,
            lr_lora: None,
            warmup_ratio: 0.1,
            max_grad_norm: 0.3,
            weight_decay: 0.002,
            class_weights: None,
            seed: 0,
            mode: TrainMode::FrozenCpx,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must be in [0, 1)");
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm <= 0.0 {
            return bad("max_grad_norm must be positive");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        let lrs = [Some(self.lr), self.lr_head, self.lr_cpx, self.lr_lora];
        if lrs.iter().flatten().any(|lr| !(lr.is_finite() && *lr >= 0.0)) {
            return bad("learning rates must be non-negative");
        }
        if let Some(w) = &self.class_weights {
            w.validate()?;
        }
        Ok(())
    }

    fn steps(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size) * self.epochs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Global norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_roc_auc: Option<f64>,
    pub val_pr_auc_neg: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainEvent {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Callback receiving every step and epoch record.
pub type Observer<'a> = &'a mut dyn FnMut(&TrainEvent);

/// Discards every event.
pub fn no_observer(_: &TrainEvent) {}

fn is_decayed<T: Scalar>(p: &Param<T>) -> bool {
    let s = p.value.shape();
    s.len() == 2 && s[0] > 1 && s[1] > 1
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = crate::rng::stream(seed, &format!("trainer.shuffle.{epoch}"));
    idx.shuffle(&mut rng);
    idx
}

#[derive(Clone, Debug)]
pub struct BackboneOutcome<T> {
    pub weights: BackboneWeights<T>,
    pub history: Vec<EpochRecord>,
}

/// Mean next-token loss of the backbone on answer positions.
pub fn lm_eval_loss<T: Scalar>(weights: &BackboneWeights<T>, data: &[LabeledPrompt]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for p in data {
        let mut tape = Tape::new();
        let params = TapeParams::register(&mut tape, weights, false);
        let (tokens, targets) = p.training_sequence();
        let loss = lm_loss_on_tape(&mut tape, weights, &params, &tokens, &targets)?;
        total += tape.value(loss)?.item()?.as_f64();
    }
    Ok(total / data.len() as f64)
}

/// Trains the backbone on prompt-plus-answer sequences, supervising only
/// the answer and EOS positions.
pub fn train_backbone<T: Scalar>(
    cfg: &TrainConfig,
    mut weights: BackboneWeights<T>,
    train: &[LabeledPrompt],
    val: &[LabeledPrompt],
    observer: Observer<'_>,
) -> Result<BackboneOutcome<T>> {
    cfg.validate()?;
    if cfg.mode != TrainMode::BackboneLm {
        return Err(Error::ModeMismatch(format!("train_backbone needs backbone mode, got {}", cfg.mode.name())));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sizes: Vec<usize> = weights.named_params().iter().map(|(_, p)| p.numel()).collect();
    let decay: Vec<bool> = weights.named_params().iter().map(|(_, p)| is_decayed(p)).collect();
    let trainable: Vec<bool> = weights.named_params().iter().map(|(_, p)| !p.frozen).collect();
    let mut opt = AdamW::new(&sizes, cfg.weight_decay);
    let total = cfg.steps(train.len());
    let mut step = 0;
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = shuffled(train.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = cosine_warmup_lr(step, total, cfg.lr, cfg.warmup_ratio)?;
            let mut tape = Tape::new();
            let params = TapeParams::register(&mut tape, &weights, true);
            let scale = T::from_f64(1.0 / batch.len() as f64);
            let mut loss: Option<Var> = None;
            for &i in batch {
                let (tokens, targets) = train[i].training_sequence();
                let l = lm_loss_on_tape(&mut tape, &weights, &params, &tokens, &targets)?;
                let l = tape.scale(l, scale)?;
                loss = Some(match loss {
                    Some(acc) => tape.add(acc, l)?,
                    None => l,
                });
            }
            let loss = loss.expect("non-empty batch");
            let loss_value = tape.value(loss)?.item()?.as_f64();
            if !loss_value.is_finite() {
                return Err(Error::NonFinite("backbone training loss"));
            }
            let mut grads = tape.backward(loss)?;
            let vars = params.vars();
            let mut g: Vec<Vec<T>> = vars
                .iter()
                .zip(&sizes)
                .map(|(&v, &n)| grads.take(v).unwrap_or_else(|| vec![T::zero(); n]))
                .collect();
            let norm = clip_grad_norm(&mut g, cfg.max_grad_norm);
            drop(tape);
            let lrs: Vec<f64> = trainable.iter().map(|&t| if t { lr } else { 0.0 }).collect();
            let mut named = weights.named_params_mut();
            let mut slices: Vec<&mut [T]> = named.iter_mut().map(|(_, p)| p.tensor_mut().data_mut()).collect();
            let mask: Vec<bool> = decay.iter().zip(&trainable).map(|(&d, &t)| d && t).collect();
            if trainable.iter().any(|&t| t) {
                opt.step(&mut slices, &g, &lrs, &mask);
            }
            observer(&TrainEvent::Step(StepRecord { step, lr, loss: loss_value, grad_norm: norm }));
            epoch_loss += loss_value * batch.len() as f64;
            step += 1;
        }
        let rec = EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss: if val.is_empty() { None } else { Some(lm_eval_loss(&weights, val)?) },
            val_roc_auc: None,
            val_pr_auc_neg: None,
        };
        observer(&TrainEvent::Epoch(rec));
        history.push(rec);
    }
    Ok(BackboneOutcome { weights, history })
}

/// A labelled prompt with its frozen prefix cache.
#[derive(Clone, Debug)]
pub struct CachedExample<T> {
    pub id: u64,
    pub label: u8,
    pub prefix: Arc<PrefixCache<T>>,
}

/// Computes prefix caches for labelled prompts. Fails on unlabelled items.
pub fn build_cached<T: Scalar>(
    backbone: &BackboneWeights<T>,
    items: &[LabeledPrompt],
    threads: usize,
) -> Result<Vec<CachedExample<T>>> {
    crate::par::parallel_map(items, threads, |p| {
        let label = p.label.ok_or_else(|| Error::InvalidConfig(format!("prompt {} is unlabelled", p.id)))?;
        if backbone.config.max_seq_len <= p.tokens.len() {
            return Err(Error::SeqTooLong { len: p.tokens.len() + 1, max: backbone.config.max_seq_len });
        }
        if p.tokens.contains(&crate::backbone::special::CPX) {
            return Err(Error::ReservedTokenInPrompt(p.tokens.iter().position(|&t| t == 3).unwrap_or(0)));
        }
        Ok(CachedExample { id: p.id, label, prefix: Arc::new(PrefixCache::build(backbone, &p.tokens)?) })
    })
}

#[derive(Clone, Debug)]
pub struct IntroOutcome<T> {
    /// Parameters from the epoch with the best validation ROC-AUC (the last
    /// epoch when no validation set is given).
    pub model: IntroModel<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_roc_auc: Option<f64>,
}

fn check_mode<T: Scalar>(mode: &TrainMode, model: &IntroModel<T>) -> Result<()> {
    let have: BTreeSet<Projection> = model.adapters.iter().map(|a| a.target).collect();
    match mode {
        TrainMode::BackboneLm => Err(Error::ModeMismatch("backbone mode cannot train introspection parameters".into())),
        TrainMode::FrozenCpx | TrainMode::BackboneOnly if !model.adapters.is_empty() => {
            Err(Error::ModeMismatch(format!("{} mode with {} adapters", mode.name(), model.adapters.len())))
        }
        TrainMode::TokenLora { targets, .. } if *targets != have => Err(Error::ModeMismatch(format!(
            "mode targets {targets:?} but model adapters cover {have:?}"
        ))),
        _ => Ok(()),
    }
}

/// Validation logit of one example under `mode`.
pub fn cached_logit<T: Scalar>(model: &IntroModel<T>, mode: &TrainMode, ex: &CachedExample<T>) -> Result<T> {
    match mode {
        TrainMode::BackboneOnly => {
            let norm = model.cpx.post_norm.then(|| model.backbone.final_norm.tensor().data());
            model.head.logit_rows(&ex.prefix.last_hidden, norm, crate::introspect::Aggregator::Last)
        }
        _ => model.logit_from_prefix(&ex.prefix),
    }
}

/// Scores from cached prefixes, in input order.
pub fn cached_scores<T: Scalar>(
    model: &IntroModel<T>,
    mode: &TrainMode,
    data: &[CachedExample<T>],
    threads: usize,
) -> Result<Vec<f64>> {
    crate::par::parallel_map(data, threads, |ex| Ok(crate::introspect::sigmoid_score(cached_logit(model, mode, ex)?)))
}

fn evaluate<T: Scalar>(model: &IntroModel<T>, mode: &TrainMode, val: &[CachedExample<T>]) -> Result<(Option<f64>, Option<f64>)> {
    if val.is_empty() {
        return Ok((None, None));
    }
    let scores = cached_scores(model, mode, val, 1)?;
    let set = ScoredSet::new(scores, val.iter().map(|e| e.label).collect())?;
    match (roc_auc(&set), pr_auc_negative(&set)) {
        (Ok(r), Ok(p)) => Ok((Some(r), Some(p))),
        (Err(Error::DegenerateLabels), _) => Ok((None, None)),
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

/// Trains introspection parameters on labelled prompts. Builds prefix
/// caches first; see [`train_introlm_cached`] to share them across runs.
pub fn train_introlm<T: Scalar>(
    cfg: &TrainConfig,
    model: IntroModel<T>,
    train: &[LabeledPrompt],
    val: &[LabeledPrompt],
    observer: Observer<'_>,
) -> Result<IntroOutcome<T>> {
    let tr = build_cached(&model.backbone, train, 1)?;
    let va = build_cached(&model.backbone, val, 1)?;
    train_introlm_cached(cfg, model, &tr, &va, observer)
}

pub fn train_introlm_cached<T: Scalar>(
    cfg: &TrainConfig,
    mut model: IntroModel<T>,
    train: &[CachedExample<T>],
    val: &[CachedExample<T>],
    observer: Observer<'_>,
) -> Result<IntroOutcome<T>> {
    cfg.validate()?;
    check_mode(&cfg.mode, &model)?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels: Vec<u8> = train.iter().map(|e| e.label).collect();
    let weights = match cfg.class_weights {
        Some(w) => w,
        None => ClassWeights::inverse_frequency(&labels)?,
    };
    let backbone_only = cfg.mode == TrainMode::BackboneOnly;
    // Group learning rates and freeze flags, in `intro_params` order.
    let mut lrs = Vec::new();
    let mut decay = Vec::new();
    for (name, p) in model.intro_params_mut() {
        let (lr, frozen) = match name.as_str() {
            "cpx_embed" => (cfg.lr_cpx.unwrap_or(cfg.lr), backbone_only),
            "head.weight" | "head.bias" => (cfg.lr_head.unwrap_or(cfg.lr), false),
            _ => (cfg.lr_lora.unwrap_or(cfg.lr), false),
        };
        p.frozen = frozen;
        lrs.push(if frozen { 0.0 } else { lr });
        decay.push(!frozen && is_decayed(p));
    }
    let sizes: Vec<usize> = model.intro_params().iter().map(|(_, p)| p.numel()).collect();
    let mut opt = AdamW::new(&sizes, cfg.weight_decay);
    let total = cfg.steps(train.len());
    let mut step = 0;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, IntroModel<T>)> = None;
    for epoch in 0..cfg.epochs {
        let order = shuffled(train.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = cosine_warmup_lr(step, total, 1.0, cfg.warmup_ratio)?;
            let mut tape = Tape::new();
            let params = IntroTapeParams::register(&mut tape, &model);
            let norm = cfg.mode == TrainMode::BackboneOnly && model.cpx.post_norm;
            let mut loss: Option<Var> = None;
            for &i in batch {
                let ex = &train[i];
                let z = if backbone_only {
                    let g = norm.then_some(params.backbone.final_norm);
                    crate::introspect::graph_backbone_only(&mut tape, &ex.prefix.last_hidden, g, &params)?
                } else {
                    model.logit_on_tape(&mut tape, &params, &ex.prefix)?
                };
                let w = T::from_f64(weights.get(ex.label) / batch.len() as f64);
                let l = tape.bce_with_logit(z, ex.label, w)?;
                loss = Some(match loss {
                    Some(acc) => tape.add(acc, l)?,
                    None => l,
                });
            }
            let loss = loss.expect("non-empty batch");
            let loss_value = tape.value(loss)?.item()?.as_f64();
            if !loss_value.is_finite() {
                return Err(Error::NonFinite("introspection training loss"));
            }
            let mut grads = tape.backward(loss)?;
            let mut g: Vec<Vec<T>> = params
                .vars()
                .iter()
                .zip(&sizes)
                .map(|(&v, &n)| grads.take(v).unwrap_or_else(|| vec![T::zero(); n]))
                .collect();
            drop(tape);
            let grad_norm = clip_grad_norm(&mut g, cfg.max_grad_norm);
            let step_lrs: Vec<f64> = lrs.iter().map(|base| base * lr).collect();
            let mut named = model.intro_params_mut();
            let mut slices: Vec<&mut [T]> = named.iter_mut().map(|(_, p)| p.tensor_mut().data_mut()).collect();
            opt.step(&mut slices, &g, &step_lrs, &decay);
            observer(&TrainEvent::Step(StepRecord { step, lr: cfg.lr * lr, loss: loss_value, grad_norm }));
            epoch_loss += loss_value * batch.len() as f64;
            step += 1;
        }
        let (val_roc_auc, val_pr_auc_neg) = evaluate(&model, &cfg.mode, val)?;
        let rec = EpochRecord { epoch, train_loss: epoch_loss / train.len() as f64, val_loss: None, val_roc_auc, val_pr_auc_neg };
        observer(&TrainEvent::Epoch(rec));
        history.push(rec);
        if let Some(auc) = val_roc_auc {
            if best.as_ref().is_none_or(|(b, _, _)| auc > *b) {
                best = Some((auc, epoch, model.clone()));
            }
        }
    }
    let (best_val_roc_auc, best_epoch, model) = match best {
        Some((auc, e, m)) => (Some(auc), e, m),
        None => (None, cfg.epochs - 1, model),
    };
    Ok(IntroOutcome { model, history, best_epoch, best_val_roc_auc })
}
