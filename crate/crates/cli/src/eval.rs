use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use introlm_core::checkpoint::Checkpoint;
use introlm_core::datagen::read_jsonl;
use introlm_core::introspect::backbone_only_score;
use introlm_core::metrics::{pr_auc_negative, pr_csv, pr_points_negative, roc_auc, roc_csv, roc_points, ScoredSet};
use introlm_core::{Error, IntroModel};
use serde::Serialize;

use crate::args::{EvalArgs, Global, Scorer};
use crate::manifest;
use crate::train::{checkpoint_mode, load_backbone};

pub struct ScoreRows {
    pub ids: Vec<u64>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Reads an `id,score,label` CSV with a header row.
pub fn read_scores(path: &Path) -> anyhow::Result<ScoreRows> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != "id,score,label" {
        bail!("{}: expected header `id,score,label`", path.display());
    }
    let mut rows = ScoreRows { ids: Vec::new(), scores: Vec::new(), labels: Vec::new() };
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || anyhow::anyhow!("{}:{}: malformed row `{line}`", path.display(), i + 2);
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, score, label] = f[..] else { return Err(bad()) };
        rows.ids.push(id.parse().map_err(|_| bad())?);
        rows.scores.push(score.parse().map_err(|_| bad())?);
        rows.labels.push(label.parse().map_err(|_| bad())?);
    }
    Ok(rows)
}

pub fn scores_csv(rows: &ScoreRows) -> String {
    let mut s = String::from("id,score,label\n");
    for ((id, sc), l) in rows.ids.iter().zip(&rows.scores).zip(&rows.labels) {
        let _ = writeln!(s, "{id},{sc:?},{l}");
    }
    s
}

#[derive(Serialize)]
struct Report {
    scorer: Scorer,
    n: usize,
    positives: usize,
    negatives: usize,
    roc_auc: f64,
    pr_auc_negative: f64,
}

fn model_scores(g: &Global, a: &EvalArgs, inputs: &mut Vec<PathBuf>) -> anyhow::Result<ScoreRows> {
    let data = a.data.as_ref().context("--data is required for model scorers")?;
    let bp = a.backbone.as_ref().context("--backbone is required for model scorers")?;
    let ip = a.intro.as_ref().context("--intro is required for model scorers")?;
    inputs.extend([data.clone(), bp.clone(), ip.clone()]);
    let items = read_jsonl(data).with_context(|| format!("reading {}", data.display()))?;
    let bb = load_backbone(bp)?;
    let ck = Checkpoint::read(ip).with_context(|| format!("reading {}", ip.display()))?;
    let trained = checkpoint_mode(&ck).unwrap_or("token-lora");
    let model = IntroModel::from_checkpoint(Arc::clone(&bb), &ck)?;
    let mut labels = Vec::with_capacity(items.len());
    for p in &items {
        labels.push(p.label.with_context(|| format!("prompt {} is unlabelled", p.id))?);
    }
    let prompts: Vec<Vec<u32>> = items.iter().map(|p| p.tokens.clone()).collect();
    let scores = match a.scorer {
        Scorer::BackboneOnly => {
            if trained != "backbone-only" {
                return Err(Error::ModeMismatch(format!("backbone-only scorer on a {trained} checkpoint")).into());
            }
            introlm_core::par::parallel_map(&prompts, g.threads, |p| {
                backbone_only_score(&bb, &model.head, p, model.cpx.post_norm)
            })?
        }
        _ => {
            if trained == "backbone-only" {
                return Err(Error::ModeMismatch("introlm scorer on a backbone-only checkpoint".into()).into());
            }
            model.score_batch(&prompts, g.threads)?
        }
    };
    Ok(ScoreRows { ids: items.iter().map(|p| p.id).collect(), scores, labels })
}

pub fn run(g: &Global, a: &EvalArgs) -> anyhow::Result<()> {
    manifest::prepare(&g.out)?;
    let mut inputs = Vec::new();
    let rows = match a.scorer {
        Scorer::File => {
            let p = a.scores.as_ref().context("--scores is required for the file scorer")?;
            inputs.push(p.clone());
            read_scores(p)?
        }
        _ => model_scores(g, a, &mut inputs)?,
    };
    let set = ScoredSet::new(rows.scores.clone(), rows.labels.clone())?;
    let (positives, negatives) = set.class_counts();
    let report = Report {
        scorer: a.scorer,
        n: set.len(),
        positives,
        negatives,
        roc_auc: roc_auc(&set)?,
        pr_auc_negative: pr_auc_negative(&set)?,
    };
    let name = a.name.clone().unwrap_or_else(|| {
        match a.scorer {
            Scorer::Introlm => "introlm",
            Scorer::BackboneOnly => "backbone-only",
            Scorer::File => "file",
        }
        .into()
    });
    let dir = g.out.join("metrics");
    let files = [
        (format!("{name}.report.json"), serde_json::to_string_pretty(&report)? + "\n"),
        (format!("{name}.roc.csv"), roc_csv(&roc_points(&set))),
        (format!("{name}.pr.csv"), pr_csv(&pr_points_negative(&set)?)),
        (format!("{name}.scores.csv"), scores_csv(&rows)),
    ];
    let mut outputs = Vec::new();
    for (f, body) in files {
        let p = dir.join(f);
        std::fs::write(&p, body)?;
        outputs.push(p);
    }
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    manifest::write(g, "eval", &name, a, &refs, outputs)?;
    println!("{name}: n={} roc_auc={:.4} pr_auc_negative={:.4}", report.n, report.roc_auc, report.pr_auc_negative);
    Ok(())
}
