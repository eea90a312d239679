use std::path::PathBuf;

use anyhow::Context;
use introlm_core::datagen::{self, DepthMix, LabelReport, SplitSpec, TaskConfig};
use introlm_core::rng::stream_seed;
use introlm_core::BackboneWeights;
use serde::Serialize;

use crate::args::{GenDataArgs, Global};
use crate::manifest;

#[derive(Serialize)]
struct DataReport {
    task: TaskConfig,
    n: usize,
    mix: DepthMix,
    probe: Option<LabelReport>,
    labels: Option<LabelReport>,
    negative_rate: Option<f64>,
    split: [usize; 3],
}

pub fn run(g: &Global, a: &GenDataArgs) -> anyhow::Result<()> {
    let task = TaskConfig {
        depth_min: a.depth_min,
        depth_max: a.depth_max,
        preamble_max: a.preamble_max,
        vocab_size: a.vocab_size,
    };
    task.validate()?;
    let spec = SplitSpec { train: a.train_frac, val: a.val_frac, test: a.test_frac, seed: stream_seed(g.seed, "cli.split") };
    manifest::prepare(&g.out)?;

    let backbone = match &a.backbone {
        Some(p) => {
            let w = BackboneWeights::<f32>::load(p).with_context(|| format!("loading backbone {}", p.display()))?;
            if w.config.vocab_size != task.vocab_size {
                anyhow::bail!("backbone vocab {} differs from --vocab-size {}", w.config.vocab_size, task.vocab_size);
            }
            Some(w)
        }
        None => None,
    };
    let (mix, probe) = match &backbone {
        Some(w) if !a.uniform => {
            let prompts = datagen::gen_per_depth(stream_seed(g.seed, "cli.probe"), a.probe_per_depth, &task)?;
            let (_, rep) = datagen::label_dataset(w, prompts, None, g.threads)?;
            (datagen::calibrate_depth_mix(&rep.by_depth, a.target_failure)?, Some(rep))
        }
        _ => (DepthMix::uniform(&task), None),
    };
    let prompts = datagen::gen_task_mix(stream_seed(g.seed, "cli.data"), a.n, &task, &mix)?;
    let (items, labels) = match &backbone {
        Some(w) => {
            let (items, rep) = datagen::label_dataset(w, prompts, None, g.threads)?;
            (items, Some(rep))
        }
        None => (prompts, None),
    };
    if let Some(rep) = &labels {
        println!("labelled {} prompts, negative rate {:.3}", rep.n, 1.0 - rep.positive_rate);
    }

    let dir = g.out.join("data");
    let base = dir.join(format!("{}.jsonl", a.name));
    datagen::write_jsonl(&base, &items)?;
    let sp = datagen::split(items, &spec)?;
    let mut outputs = vec![base];
    for (part, items) in [("train", &sp.train), ("val", &sp.val), ("test", &sp.test)] {
        let p = dir.join(format!("{}.{part}.jsonl", a.name));
        datagen::write_jsonl(&p, items)?;
        outputs.push(p);
    }
    let report = DataReport {
        task,
        n: a.n,
        mix,
        probe,
        negative_rate: labels.as_ref().map(|r| 1.0 - r.positive_rate),
        labels,
        split: [sp.train.len(), sp.val.len(), sp.test.len()],
    };
    let rp = dir.join(format!("{}.report.json", a.name));
    std::fs::write(&rp, serde_json::to_string_pretty(&report)? + "\n")?;
    outputs.push(rp);
    let inputs: Vec<PathBuf> = a.backbone.iter().cloned().collect();
    let inputs: Vec<&std::path::Path> = inputs.iter().map(PathBuf::as_path).collect();
    manifest::write(g, "gen-data", &a.name, a, &inputs, outputs)?;
    println!("wrote {} train / {} val / {} test prompts to {}", report.split[0], report.split[1], report.split[2], dir.display());
    Ok(())
}
