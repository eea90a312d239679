//! Brute-force reference implementations of the metrics and of per-prompt
//! routing accounting.

use introlm_core::routing::LatencyProfile;
use rand::Rng;

/// Pairwise probability that a positive outranks a negative, ties 1/2.
pub fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Average precision for detecting negatives: flag every prompt with score
/// `<= t` for each distinct `t` and sum recall increments times precision.
pub fn ap_negative_thresholds(scores: &[f64], labels: &[u8]) -> f64 {
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let n_neg = labels.iter().filter(|&&l| l == 0).count() as f64;
    let mut prev = 0.0;
    let mut ap = 0.0;
    for t in ts {
        let flagged: Vec<u8> = scores.iter().zip(labels).filter(|(s, _)| **s <= t).map(|(_, l)| *l).collect();
        let tp = flagged.iter().filter(|&&l| l == 0).count() as f64;
        let recall = tp / n_neg;
        ap += (recall - prev) * tp / flagged.len() as f64;
        prev = recall;
    }
    ap
}

/// Random scored set with both classes and a controllable tie rate.
pub fn random_set(r: &mut impl Rng, n: usize, coarse: bool) -> (Vec<f64>, Vec<u8>) {
    loop {
        let labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..2)).collect();
        if labels.contains(&0) && labels.contains(&1) {
            let scores = labels
                .iter()
                .map(|&l| {
                    let s: f64 = (r.gen::<f64>() + 0.3 * l as f64) / 1.3;
                    if coarse {
                        (s * 10.0).floor() / 10.0
                    } else {
                        s
                    }
                })
                .collect();
            return (scores, labels);
        }
    }
}

pub struct Simulated {
    pub reliability: f64,
    pub call_rate: f64,
    pub latency_introlm: f64,
    pub latency_pre_router: f64,
}

/// Routes every prompt individually and averages outcomes and latencies.
pub fn simulate(scores: &[f64], labels: &[u8], alpha: f64, large_accuracy: f64, p: &LatencyProfile) -> Simulated {
    let t_small = p.ttft_small + (p.mean_output_len - 1.0) * p.tpot_small;
    let t_large = p.ttft_large + (p.mean_output_len - 1.0) * p.tpot_large;
    let (mut ok, mut large, mut lat_i, mut lat_p) = (0.0, 0.0, 0.0, 0.0);
    for (&s, &l) in scores.iter().zip(labels) {
        if s >= alpha {
            ok += l as f64;
            lat_i += t_small;
            lat_p += t_small;
        } else {
            ok += large_accuracy;
            large += 1.0;
            lat_i += p.ttft_small + t_large;
            lat_p += t_large;
        }
    }
    let n = scores.len() as f64;
    Simulated { reliability: ok / n, call_rate: large / n, latency_introlm: lat_i / n, latency_pre_router: lat_p / n }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300) || a == b
}
