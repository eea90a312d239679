//! Fixtures shared by the criterion benches.

use std::sync::Arc;

use introlm_core::introspect::LoraSpec;
use introlm_core::rng::stream;
use introlm_core::{BackboneConfig, BackboneWeights, CpxConfig, IntroModel};
use rand::Rng;

pub fn backbone() -> Arc<BackboneWeights<f32>> {
    Arc::new(BackboneWeights::init(BackboneConfig::default(), 0).expect("default config is valid"))
}

/// Default-config model with full-preset adapters whose `B` is non-zero.
pub fn intro_model(bb: &Arc<BackboneWeights<f32>>) -> IntroModel<f32> {
    let mut m = IntroModel::new(Arc::clone(bb), CpxConfig::default(), 0).expect("valid cpx config");
    m.set_lora_targets(&LoraSpec::default(), 0).expect("valid targets");
    let mut r = stream(0, "bench.adapters");
    for a in &mut m.adapters {
        for v in a.b.tensor_mut().data_mut() {
            *v = r.gen_range(-0.05..0.05);
        }
    }
    m
}

pub fn prompt(len: usize, seed: u64) -> Vec<u32> {
    let mut r = stream(seed, "bench.prompt");
    let mut p = vec![introlm_core::backbone::special::BOS];
    p.extend((1..len).map(|_| r.gen_range(4..64)));
    p
}

/// `n` scores in `[0, 1]` with labels loosely correlated to them.
pub fn scored(n: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut r = stream(seed, "bench.scores");
    let scores: Vec<f64> = (0..n).map(|_| r.gen::<f64>()).collect();
    let labels = scores.iter().map(|&s| u8::from(r.gen::<f64>() < 0.2 + 0.7 * s)).collect();
    (scores, labels)
}
