use std::fmt::Write as _;
use std::sync::Arc;

use anyhow::Context;
use introlm_core::backbone::{greedy_generate, prefill};
use introlm_core::introspect::{masked_lora_projection, MaskMode};
use introlm_core::rng::stream;
use introlm_core::{IntroModel, Tensor, TokenMask};
use rand::Rng;
use serde::Serialize;

use crate::args::{CheckArgs, Global};
use crate::train::load_backbone;
use crate::{manifest, InvariantFailure};

#[derive(Serialize, Default)]
struct Suite {
    name: &'static str,
    cases: usize,
    failures: usize,
    max_abs_diff: f64,
    pass: bool,
}

#[derive(Serialize)]
struct Report {
    sabotage: bool,
    pass: bool,
    suites: Vec<Suite>,
}

fn random_prompt(r: &mut impl Rng, vocab: u32, max_len: usize) -> Vec<u32> {
    let n = r.gen_range(1..=max_len);
    let mut p = vec![introlm_core::backbone::special::BOS];
    p.extend((1..n).map(|_| r.gen_range(4..vocab)));
    p
}

fn finish(mut s: Suite) -> Suite {
    s.pass = s.failures == 0 && s.max_abs_diff == 0.0;
    s
}

fn invariance(m: &IntroModel<f32>, a: &CheckArgs, seed: u64, max_len: usize) -> anyhow::Result<[Suite; 2]> {
    let bb = &m.backbone;
    let mut r = stream(seed, "cli.check.prompts");
    let mut gen = Suite { name: "generation-invariance", ..Suite::default() };
    let mut cache = Suite { name: "cache-purity", ..Suite::default() };
    for _ in 0..a.n {
        let p = random_prompt(&mut r, bb.config.vocab_size as u32, max_len);
        let plain = prefill(bb, &p)?;
        let out = m.prefill_with_introspection(&p)?;
        let (_, tokens) = m.generate(&p, a.max_new)?;
        gen.cases += 1;
        gen.failures += usize::from(tokens != greedy_generate(bb, &p, a.max_new)?);
        for (x, y) in out.prompt_hidden.iter().zip(&plain.hidden) {
            gen.max_abs_diff = gen.max_abs_diff.max(x.max_abs_diff(y).unwrap_or(f64::INFINITY));
        }
        cache.cases += 1;
        cache.failures += usize::from(out.cache.len() != p.len() || !out.cache.bit_eq(&plain.cache));
        cache.max_abs_diff = cache.max_abs_diff.max(out.cache.max_abs_diff(&plain.cache).unwrap_or(f64::INFINITY));
    }
    Ok([finish(gen), finish(cache)])
}

/// Mask-0 rows of every adapted projection must equal the plain product.
fn mask_locality(m: &IntroModel<f32>, a: &CheckArgs, seed: u64) -> anyhow::Result<Suite> {
    let mut r = stream(seed, "cli.check.mask");
    let mut s = Suite { name: "mask-locality", ..Suite::default() };
    if m.adapters.is_empty() {
        return Ok(finish(s));
    }
    for _ in 0..a.n {
        let ad = &m.adapters[r.gen_range(0..m.adapters.len())];
        let w = m.backbone.layers[ad.layer].projection(ad.target).tensor();
        let n = r.gen_range(1..=a.max_prompt_len.max(1));
        let h = Tensor::new(vec![n, ad.d_in()], (0..n * ad.d_in()).map(|_| r.gen_range(-2.0f32..2.0)).collect())?;
        let mask: Vec<bool> = (0..n).map(|_| r.gen_bool(0.3)).collect();
        let applied = match m.mask_mode {
            MaskMode::CpxOnly => mask.clone(),
            MaskMode::AllPositions => vec![true; n],
        };
        let out = masked_lora_projection(&h, w, ad, &TokenMask::from_bools(applied))?;
        let plain = introlm_core::tensor::kernels::matmul(h.data(), w.data(), n, ad.d_in(), ad.d_out());
        s.cases += 1;
        let mut differs = false;
        for (row, &on) in mask.iter().enumerate() {
            if on {
                continue;
            }
            let d = ad.d_out();
            for (x, y) in out.row(row).iter().zip(&plain[row * d..(row + 1) * d]) {
                s.max_abs_diff = s.max_abs_diff.max(f64::from((x - y).abs()));
                differs |= x != y;
            }
        }
        s.failures += usize::from(differs);
    }
    Ok(finish(s))
}

pub fn run(g: &Global, a: &CheckArgs) -> anyhow::Result<()> {
    manifest::prepare(&g.out)?;
    let bb = load_backbone(&a.backbone)?;
    let mut m = IntroModel::<f32>::load(Arc::clone(&bb), &a.intro).with_context(|| format!("loading {}", a.intro.display()))?;
    if a.sabotage {
        m.mask_mode = MaskMode::AllPositions;
    }
    let n_cpx = m.cpx.n_cpx;
    let max_len = a.max_prompt_len.min(bb.config.max_seq_len.saturating_sub(n_cpx + a.max_new)).max(1);
    let [gen, cache] = invariance(&m, a, g.seed, max_len)?;
    let suites = vec![gen, cache, mask_locality(&m, a, g.seed)?];
    let pass = suites.iter().all(|s| s.pass);
    let report = Report { sabotage: a.sabotage, pass, suites };
    let mut text = String::new();
    for s in &report.suites {
        writeln!(
            text,
            "[{}] {}: {} cases, {} failures, max abs diff {:e}",
            if s.pass { "PASS" } else { "FAIL" },
            s.name,
            s.cases,
            s.failures,
            s.max_abs_diff
        )?;
    }
    print!("{text}");
    let name = if a.sabotage { "invariance-sabotage" } else { "invariance" };
    let path = g.out.join("metrics").join(format!("{name}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    manifest::write(g, "check-invariance", name, a, &[&a.backbone, &a.intro], vec![path])?;
    if !pass {
        let failed: Vec<&str> = report.suites.iter().filter(|s| !s.pass).map(|s| s.name).collect();
        return Err(InvariantFailure(failed.join(", ")).into());
    }
    Ok(())
}
