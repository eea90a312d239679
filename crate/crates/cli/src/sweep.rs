use std::path::{Path, PathBuf};

use anyhow::Context;
use introlm_core::routing::{default_grid, sweep, sweep_csv, sweep_svg, LatencyProfile, SweepOptions, TradeoffPoint};

use crate::args::{Global, SweepArgs};
use crate::eval::read_scores;
use crate::manifest;

fn read_grid(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.parse::<f64>().with_context(|| format!("{}: bad threshold `{l}`", path.display())))
        .collect()
}

fn series(path: &Path, grid: Option<&[f64]>, opts: &SweepOptions) -> anyhow::Result<Vec<TradeoffPoint>> {
    let rows = read_scores(path)?;
    let grid = grid.map_or_else(|| default_grid(&rows.scores), <[f64]>::to_vec);
    Ok(sweep(&rows.scores, &rows.labels, &grid, opts)?)
}

pub fn run(g: &Global, a: &SweepArgs) -> anyhow::Result<()> {
    manifest::prepare(&g.out)?;
    let mut inputs = vec![a.scores.clone()];
    let profile = match &a.profile {
        Some(p) => {
            inputs.push(p.clone());
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<LatencyProfile>(&text).with_context(|| format!("parsing profile {}", p.display()))?
        }
        None => LatencyProfile::default(),
    };
    let grid = match &a.grid {
        Some(p) => {
            inputs.push(p.clone());
            Some(read_grid(p)?)
        }
        None => None,
    };
    let opts = SweepOptions { profile, large_accuracy: a.large_accuracy };
    let main = series(&a.scores, grid.as_deref(), &opts)?;
    let mut all = vec![(a.name.clone(), main.clone())];
    for c in &a.compare {
        let (label, path) = c.split_once('=').with_context(|| format!("--compare expects label=path, got `{c}`"))?;
        let path = PathBuf::from(path);
        all.push((label.to_string(), series(&path, grid.as_deref(), &opts)?));
        inputs.push(path);
    }
    let dir = g.out.join("sweeps");
    let csv = dir.join(format!("{}.csv", a.name));
    let svg = dir.join(format!("{}.svg", a.name));
    std::fs::write(&csv, sweep_csv(&main))?;
    std::fs::write(&svg, sweep_svg(&all))?;
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    manifest::write(g, "sweep", &a.name, a, &refs, vec![csv.clone(), svg.clone()])?;
    println!("wrote {} ({} points) and {}", csv.display(), main.len(), svg.display());
    Ok(())
}
