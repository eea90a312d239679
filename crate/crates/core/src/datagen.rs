//! Synthetic modular-arithmetic task, execution-based labelling and
//! dataset splits.
//!
//! A prompt reads
//! `[BOS] preamble... [SEP] d0 op1 d1 ... opk dk [ANS]` where digits are
//! tokens `DIGIT0..DIGIT0+10`, operators are `+ - *` and the chain is
//! evaluated left to right modulo 10. The gold answer is the single digit
//! token of the result. The number of operators `k` is the difficulty knob.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{greedy_generate, special, BackboneWeights};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub mod vocab {
    pub const ANS: u32 = 4;
    pub const SEP: u32 = 5;
    pub const ADD: u32 = 6;
    pub const SUB: u32 = 7;
    pub const MUL: u32 = 8;
    pub const DIGIT0: u32 = 9;
    pub const FILLER0: u32 = 19;
    /// Smallest vocabulary that holds every task token plus one filler.
    pub const MIN_VOCAB: usize = 20;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPrompt {
    pub id: u64,
    pub tokens: Vec<u32>,
    pub gold: Vec<u32>,
    pub depth: usize,
    pub label: Option<u8>,
}

impl LabeledPrompt {
    /// Prompt followed by the gold answer and EOS, with the positions whose
    /// next-token prediction is supervised during backbone training.
    pub fn training_sequence(&self) -> (Vec<u32>, Vec<(usize, u32)>) {
        let mut tokens = self.tokens.clone();
        let mut targets = Vec::with_capacity(self.gold.len() + 1);
        for &g in self.gold.iter().chain(std::iter::once(&special::EOS)) {
            targets.push((tokens.len() - 1, g));
            tokens.push(g);
        }
        tokens.pop();
        (tokens, targets)
    }
}

/// Shape of generated prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Inclusive operator-count range.
    pub depth_min: usize,
    pub depth_max: usize,
    /// Filler tokens before `[SEP]`: uniform in `0..=preamble_max`.
    pub preamble_max: usize,
    pub vocab_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { depth_min: 1, depth_max: 6, preamble_max: 8, vocab_size: 64 }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth_min == 0 || self.depth_min > self.depth_max {
            return Err(Error::InvalidRange(format!("depth range {}..={}", self.depth_min, self.depth_max)));
        }
        if self.vocab_size < vocab::MIN_VOCAB {
            return Err(Error::InvalidConfig(format!("vocab_size {} below {}", self.vocab_size, vocab::MIN_VOCAB)));
        }
        Ok(())
    }

    pub fn depths(&self) -> Vec<usize> {
        (self.depth_min..=self.depth_max).collect()
    }

    /// Longest possible prompt.
    pub fn max_len(&self) -> usize {
        1 + self.preamble_max + 1 + (2 * self.depth_max + 1) + 1
    }
}

/// Relative frequency of each depth in a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMix {
    pub depths: Vec<usize>,
    pub weights: Vec<f64>,
}

impl DepthMix {
    pub fn uniform(cfg: &TaskConfig) -> Self {
        let depths = cfg.depths();
        let weights = vec![1.0 / depths.len() as f64; depths.len()];
        Self { depths, weights }
    }

    fn validate(&self) -> Result<()> {
        let total: f64 = self.weights.iter().sum();
        if self.depths.is_empty()
            || self.depths.len() != self.weights.len()
            || self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || total <= 0.0
        {
            return Err(Error::InvalidRange("depth mix needs non-negative weights with positive sum".into()));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut crate::rng::Rng) -> usize {
        let total: f64 = self.weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (&d, &w) in self.depths.iter().zip(&self.weights) {
            if u < w {
                return d;
            }
            u -= w;
        }
        *self.depths.iter().zip(&self.weights).rev().find(|(_, &w)| w > 0.0).expect("positive weight").0
    }
}

fn apply(op: u32, acc: u32, d: u32) -> u32 {
    match op {
        vocab::ADD => (acc + d) % 10,
        vocab::SUB => (acc + 10 - d) % 10,
        _ => (acc * d) % 10,
    }
}

fn make_prompt(rng: &mut crate::rng::Rng, id: u64, depth: usize, cfg: &TaskConfig) -> LabeledPrompt {
    let mut tokens = vec![special::BOS];
    let n_pre = rng.gen_range(0..=cfg.preamble_max);
    let filler_hi = cfg.vocab_size as u32;
    tokens.extend((0..n_pre).map(|_| rng.gen_range(vocab::FILLER0..filler_hi)));
    tokens.push(vocab::SEP);
    let mut acc = rng.gen_range(0..10u32);
    tokens.push(vocab::DIGIT0 + acc);
    for _ in 0..depth {
        let op = [vocab::ADD, vocab::SUB, vocab::MUL][rng.gen_range(0..3)];
        let d = rng.gen_range(0..10u32);
        tokens.push(op);
        tokens.push(vocab::DIGIT0 + d);
        acc = apply(op, acc, d);
    }
    tokens.push(vocab::ANS);
    LabeledPrompt { id, tokens, gold: vec![vocab::DIGIT0 + acc], depth, label: None }
}

/// `n` unlabeled prompts with depths drawn uniformly from `cfg`'s range.
pub fn gen_task(seed: u64, n: usize, cfg: &TaskConfig) -> Result<Vec<LabeledPrompt>> {
    gen_task_mix(seed, n, cfg, &DepthMix::uniform(cfg))
}

/// `n` unlabeled prompts with depths drawn from `mix`. Ids are `0..n`.
pub fn gen_task_mix(seed: u64, n: usize, cfg: &TaskConfig, mix: &DepthMix) -> Result<Vec<LabeledPrompt>> {
    cfg.validate()?;
    mix.validate()?;
    if n == 0 {
        return Err(Error::InvalidRange("at least one prompt is required".into()));
    }
    if let Some(&d) = mix.depths.iter().find(|&&d| d == 0 || d < cfg.depth_min || d > cfg.depth_max) {
        return Err(Error::InvalidRange(format!("depth {d} outside configured range")));
    }
    let mut rng = crate::rng::stream(seed, "datagen.task");
    Ok((0..n as u64)
        .map(|id| {
            let depth = mix.sample(&mut rng);
            make_prompt(&mut rng, id, depth, cfg)
        })
        .collect())
}

/// The same number of prompts at each listed depth, for accuracy probes.
pub fn gen_per_depth(seed: u64, per_depth: usize, cfg: &TaskConfig) -> Result<Vec<LabeledPrompt>> {
    cfg.validate()?;
    let mut rng = crate::rng::stream(seed, "datagen.probe");
    let mut out = Vec::new();
    for d in cfg.depths() {
        for _ in 0..per_depth {
            out.push(make_prompt(&mut rng, out.len() as u64, d, cfg));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthStats {
    pub depth: usize,
    pub n: usize,
    pub positives: usize,
}

impl DepthStats {
    pub fn accuracy(&self) -> f64 {
        self.positives as f64 / self.n.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub n: usize,
    pub positives: usize,
    pub positive_rate: f64,
    pub by_depth: Vec<DepthStats>,
}

impl LabelReport {
    pub fn from_labeled(items: &[LabeledPrompt]) -> Self {
        let mut by_depth: Vec<DepthStats> = Vec::new();
        let mut positives = 0;
        for it in items {
            let pos = usize::from(it.label == Some(1));
            positives += pos;
            match by_depth.iter_mut().find(|s| s.depth == it.depth) {
                Some(s) => {
                    s.n += 1;
                    s.positives += pos;
                }
                None => by_depth.push(DepthStats { depth: it.depth, n: 1, positives: pos }),
            }
        }
        by_depth.sort_by_key(|s| s.depth);
        Self {
            n: items.len(),
            positives,
            positive_rate: positives as f64 / items.len().max(1) as f64,
            by_depth,
        }
    }
}

/// Labels each prompt 1 iff the backbone's greedy continuation starts with
/// the gold answer. `max_new` defaults to the gold length.
pub fn label_dataset<T: Scalar>(
    backbone: &BackboneWeights<T>,
    prompts: Vec<LabeledPrompt>,
    max_new: Option<usize>,
    threads: usize,
) -> Result<(Vec<LabeledPrompt>, LabelReport)> {
    if let Some(p) = prompts.iter().find(|p| p.label.is_some()) {
        return Err(Error::AlreadyLabeled(p.id));
    }
    let labels = crate::par::parallel_map(&prompts, threads, |p| {
        let out = greedy_generate(backbone, &p.tokens, max_new.unwrap_or(p.gold.len()))?;
        Ok(u8::from(out.starts_with(&p.gold)))
    })?;
    let mut items = prompts;
    for (p, l) in items.iter_mut().zip(labels) {
        p.label = Some(l);
    }
    items.sort_by_key(|p| p.id);
    let report = LabelReport::from_labeled(&items);
    Ok((items, report))
}

/// Chooses depth weights `w_d ∝ exp(beta (1 - acc_d))` so that the expected
/// failure rate hits `target_failure`. If the target lies outside what the
/// depths can produce, the closest extreme is returned.
pub fn calibrate_depth_mix(stats: &[DepthStats], target_failure: f64) -> Result<DepthMix> {
    if stats.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(0.0..=1.0).contains(&target_failure) {
        return Err(Error::OutOfRange(format!("target failure rate {target_failure}")));
    }
    let fail: Vec<f64> = stats.iter().map(|s| 1.0 - s.accuracy()).collect();
    let mix_for = |beta: f64| -> (Vec<f64>, f64) {
        let top = fail.iter().map(|f| beta * f).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = fail.iter().map(|f| (beta * f - top).exp()).collect();
        let total: f64 = w.iter().sum();
        let w: Vec<f64> = w.iter().map(|x| x / total).collect();
        let rate = w.iter().zip(&fail).map(|(a, b)| a * b).sum();
        (w, rate)
    };
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mix_for(mid).1 < target_failure {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (weights, _) = mix_for(0.5 * (lo + hi));
    Ok(DepthMix { depths: stats.iter().map(|s| s.depth).collect(), weights })
}

/// Expected failure rate of a mix under the given per-depth accuracies.
pub fn expected_failure(stats: &[DepthStats], mix: &DepthMix) -> f64 {
    let total: f64 = mix.weights.iter().sum();
    mix.depths
        .iter()
        .zip(&mix.weights)
        .map(|(d, w)| {
            let acc = stats.iter().find(|s| s.depth == *d).map_or(0.0, DepthStats::accuracy);
            w / total * (1.0 - acc)
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<LabeledPrompt>,
    pub val: Vec<LabeledPrompt>,
    pub test: Vec<LabeledPrompt>,
}

/// Seeded prompt-level split. Each part is returned sorted by id.
pub fn split(dataset: Vec<LabeledPrompt>, spec: &SplitSpec) -> Result<Split> {
    let f = [spec.train, spec.val, spec.test];
    if f.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::BadFractions(format!("{} / {} / {}", spec.train, spec.val, spec.test)));
    }
    let n = dataset.len();
    let n_train = ((n as f64 * spec.train).round() as usize).min(n);
    let n_val = ((n as f64 * spec.val).round() as usize).min(n - n_train);
    let mut items = dataset;
    items.sort_by_key(|p| p.id);
    let mut rng = crate::rng::stream(spec.seed, "datagen.split");
    items.shuffle(&mut rng);
    let mut test = items.split_off(n_train + n_val);
    let mut val = items.split_off(n_train);
    let mut train = items;
    for part in [&mut train, &mut val, &mut test] {
        part.sort_by_key(|p| p.id);
    }
    Ok(Split { train, val, test })
}

pub fn write_jsonl(path: impl AsRef<Path>, items: &[LabeledPrompt]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<LabeledPrompt>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: LabeledPrompt = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if item.tokens.is_empty() {
            return Err(Error::Format(format!("line {}: empty prompt", i + 1)));
        }
        if let Some(l) = item.label.filter(|&l| l > 1) {
            return Err(Error::InvalidLabel(l));
        }
        out.push(item);
    }
    Ok(out)
}
