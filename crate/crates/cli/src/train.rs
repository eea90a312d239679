use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use introlm_core::backbone::BackboneConfig;
use introlm_core::checkpoint::Checkpoint;
use introlm_core::datagen::{read_jsonl, LabeledPrompt};
use introlm_core::introspect::{Aggregator, LoraSpec};
use introlm_core::rng::stream_seed;
use introlm_core::trainer::{
    build_cached, train_backbone, train_introlm_cached, CachedExample, EpochRecord, IntroOutcome, StepRecord,
    TrainConfig, TrainEvent, TrainMode,
};
use introlm_core::{BackboneWeights, CpxConfig, Error, IntroModel};

use crate::args::{AggregatorArg, Global, IntroFlags, LayerSweepArgs, Mode, OptimFlags, TrainArgs};
use crate::manifest;

fn load_split(path: &Path) -> anyhow::Result<Vec<LabeledPrompt>> {
    read_jsonl(path).with_context(|| format!("reading {}", path.display()))
}

pub fn load_backbone(path: &Path) -> anyhow::Result<Arc<BackboneWeights<f32>>> {
    let w = BackboneWeights::<f32>::load(path).with_context(|| format!("loading backbone {}", path.display()))?;
    Ok(Arc::new(w))
}

fn train_config(o: &OptimFlags, seed: u64, mode: TrainMode) -> TrainConfig {
    TrainConfig {
        batch_size: o.batch_size,
        epochs: o.epochs,
        lr: o.lr,
        lr_head: o.lr_head,
        lr_cpx: o.lr_cpx,
        lr_lora: o.lr_lora,
        warmup_ratio: o.warmup_ratio,
        max_grad_norm: o.max_grad_norm,
        weight_decay: o.weight_decay,
        class_weights: None,
        seed,
        mode,
    }
}

/// Resolves the requested mode and LoRA flags into a trainer mode.
/// `token-lora` with an empty target set is the frozen-weights mode.
pub fn intro_mode(mode: Mode, f: &IntroFlags) -> anyhow::Result<(TrainMode, Option<LoraSpec>)> {
    let targets = match (&f.lora_targets, mode) {
        (Some(s), _) => LoraSpec::parse_targets(s)?,
        (None, Mode::TokenLora) => LoraSpec::full(),
        (None, _) => LoraSpec::none(),
    };
    let spec = LoraSpec { targets, rank: f.rank, alpha: f.alpha, allow_kv: f.allow_kv };
    match mode {
        Mode::TokenLora if spec.targets.is_empty() => Ok((TrainMode::FrozenCpx, None)),
        Mode::TokenLora => {
            spec.validate()?;
            Ok((TrainMode::token_lora(&spec), Some(spec)))
        }
        Mode::FrozenCpx | Mode::BackboneOnly if !spec.targets.is_empty() => Err(Error::ModeMismatch(format!(
            "{} mode takes no LoRA targets, got {:?}",
            if mode == Mode::FrozenCpx { "frozen-cpx" } else { "backbone-only" },
            spec.targets
        ))
        .into()),
        Mode::FrozenCpx => Ok((TrainMode::FrozenCpx, None)),
        Mode::BackboneOnly => Ok((TrainMode::BackboneOnly, None)),
        Mode::Backbone => bail!("backbone mode has no introspection parameters"),
    }
}

fn cpx_config(f: &IntroFlags, layer: Option<usize>) -> CpxConfig {
    CpxConfig {
        n_cpx: f.n_cpx,
        layer,
        aggregator: match f.aggregator {
            AggregatorArg::Mean => Aggregator::Mean,
            AggregatorArg::Last => Aggregator::Last,
        },
        post_norm: !f.no_post_norm,
        ..CpxConfig::default()
    }
}

#[derive(Default)]
struct Log {
    steps: Vec<StepRecord>,
    epochs: Vec<EpochRecord>,
}

impl Log {
    fn observe(&mut self, e: &TrainEvent) {
        match e {
            TrainEvent::Step(s) => self.steps.push(*s),
            TrainEvent::Epoch(r) => self.epochs.push(*r),
        }
    }

    fn write(&self, out: &Path, name: &str) -> anyhow::Result<Vec<PathBuf>> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut s = String::from("step,lr,loss,grad_norm\n");
        for r in &self.steps {
            writeln!(s, "{},{:?},{:?},{:?}", r.step, r.lr, r.loss, r.grad_norm)?;
        }
        let mut e = String::from("epoch,train_loss,val_loss,val_roc_auc,val_pr_auc_neg\n");
        for r in &self.epochs {
            writeln!(e, "{},{:?},{},{},{}", r.epoch, r.train_loss, opt(r.val_loss), opt(r.val_roc_auc), opt(r.val_pr_auc_neg))?;
        }
        let sp = out.join("metrics").join(format!("{name}.steps.csv"));
        let ep = out.join("metrics").join(format!("{name}.epochs.csv"));
        std::fs::write(&sp, s)?;
        std::fs::write(&ep, e)?;
        Ok(vec![sp, ep])
    }
}

fn train_intro(
    bb: &Arc<BackboneWeights<f32>>,
    cfg: &TrainConfig,
    spec: Option<&LoraSpec>,
    cpx: CpxConfig,
    train: &[CachedExample<f32>],
    val: &[CachedExample<f32>],
    log: &mut Log,
) -> anyhow::Result<IntroOutcome<f32>> {
    let init_seed = stream_seed(cfg.seed, "cli.intro.init");
    let mut model = IntroModel::new(bb.clone(), cpx, init_seed)?;
    if let Some(spec) = spec {
        model.set_lora_targets(spec, init_seed)?;
    }
    Ok(train_introlm_cached(cfg, model, train, val, &mut |e| log.observe(e))?)
}

pub fn run(g: &Global, a: &TrainArgs) -> anyhow::Result<()> {
    manifest::prepare(&g.out)?;
    let train = load_split(&a.train)?;
    let val = match &a.val {
        Some(p) => load_split(p)?,
        None => Vec::new(),
    };
    let mut inputs: Vec<PathBuf> = vec![a.train.clone()];
    inputs.extend(a.val.iter().cloned());
    let mut log = Log::default();

    let (name, ck) = if a.mode == Mode::Backbone {
        if a.intro.lora_targets.is_some() {
            return Err(Error::ModeMismatch("backbone mode takes no LoRA targets".into()).into());
        }
        let w = match &a.init {
            Some(p) => {
                inputs.push(p.clone());
                Arc::unwrap_or_clone(load_backbone(p)?)
            }
            None => {
                let config = BackboneConfig {
                    vocab_size: a.vocab_size,
                    d_model: a.d_model,
                    n_layers: a.n_layers,
                    n_heads: a.n_heads,
                    d_ff: a.d_ff,
                    max_seq_len: a.max_seq_len,
                    ..BackboneConfig::default()
                };
                BackboneWeights::<f32>::init(config, stream_seed(g.seed, "cli.backbone.init"))?
            }
        };
        let cfg = train_config(&a.optim, g.seed, TrainMode::BackboneLm);
        let outcome = train_backbone(&cfg, w, &train, &val, &mut |e| log.observe(e))?;
        let mut ck = outcome.weights.to_checkpoint();
        ck.set_meta("cli.mode", "backbone");
        (a.name.clone().unwrap_or_else(|| "backbone".into()), ck)
    } else {
        let bp = a.backbone.as_ref().context("--backbone is required for introspection modes")?;
        inputs.push(bp.clone());
        let bb = load_backbone(bp)?;
        let (mode, spec) = intro_mode(a.mode, &a.intro)?;
        let cfg = train_config(&a.optim, g.seed, mode.clone());
        let tr = build_cached(&bb, &train, g.threads)?;
        let va = build_cached(&bb, &val, g.threads)?;
        let outcome = train_intro(&bb, &cfg, spec.as_ref(), cpx_config(&a.intro, a.layer), &tr, &va, &mut log)?;
        if let Some(auc) = outcome.best_val_roc_auc {
            println!("best epoch {} val roc_auc {auc:.4}", outcome.best_epoch);
        }
        let mut ck = outcome.model.to_checkpoint();
        ck.set_meta("cli.mode", mode.name());
        (a.name.clone().unwrap_or_else(|| mode.name().into()), ck)
    };
    let ckpt = g.out.join("ckpt").join(format!("{name}.ckpt"));
    ck.write(&ckpt)?;
    let mut outputs = vec![ckpt.clone()];
    outputs.extend(log.write(&g.out, &name)?);
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    manifest::write(g, "train", &name, a, &refs, outputs)?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

/// Mode recorded by `train` in an introspection checkpoint.
pub fn checkpoint_mode(ck: &Checkpoint) -> Option<&str> {
    ck.meta("cli.mode")
}

/// Layer count for a prefix given as a percentage of depth, at least one.
pub fn prefix_layers(pct: u32, n_layers: usize) -> anyhow::Result<usize> {
    if pct == 0 || pct > 100 {
        bail!("prefix {pct}% outside 1..=100");
    }
    Ok(((pct as usize * n_layers).div_ceil(100)).max(1))
}

pub fn layer_sweep(g: &Global, a: &LayerSweepArgs) -> anyhow::Result<()> {
    if a.seeds == 0 {
        bail!("--seeds must be positive");
    }
    manifest::prepare(&g.out)?;
    let bb = load_backbone(&a.backbone)?;
    let n_layers = bb.config.n_layers;
    let layers: Vec<usize> = a.prefixes.iter().map(|&p| prefix_layers(p, n_layers)).collect::<anyhow::Result<_>>()?;
    let (mode, spec) = intro_mode(Mode::TokenLora, &a.intro)?;
    let tr = build_cached(&bb, &load_split(&a.train)?, g.threads)?;
    let va = build_cached(&bb, &load_split(&a.val)?, g.threads)?;
    if va.is_empty() {
        bail!("validation split is empty");
    }
    let mut csv = String::from("prefix_pct,layer,seeds,mean_val_roc_auc,sd_val_roc_auc,mean_val_pr_auc_neg\n");
    for (&pct, &k) in a.prefixes.iter().zip(&layers) {
        let (mut rocs, mut prs) = (Vec::new(), Vec::new());
        for s in 0..a.seeds {
            let cfg = train_config(&a.optim, g.seed + s, mode.clone());
            let layer = (k < n_layers).then_some(k);
            let mut log = Log::default();
            let out = train_intro(&bb, &cfg, spec.as_ref(), cpx_config(&a.intro, layer), &tr, &va, &mut log)?;
            let best = &out.history[out.best_epoch];
            let roc = best.val_roc_auc.context("validation split has a single class")?;
            rocs.push(roc);
            prs.push(best.val_pr_auc_neg.unwrap_or(f64::NAN));
            println!("prefix {pct}% (k={k}) seed {}: val roc_auc {roc:.4}", g.seed + s);
        }
        let n = rocs.len() as f64;
        let mean = rocs.iter().sum::<f64>() / n;
        let sd = (rocs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        writeln!(csv, "{pct},{k},{},{mean:?},{sd:?},{:?}", rocs.len(), prs.iter().sum::<f64>() / n)?;
    }
    let path = g.out.join("metrics").join(format!("{}.csv", a.name));
    std::fs::write(&path, csv)?;
    manifest::write(g, "layer-sweep", &a.name, a, &[&a.backbone, &a.train, &a.val], vec![path.clone()])?;
    println!("wrote {}", path.display());
    Ok(())
}
