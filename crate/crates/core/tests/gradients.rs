//! Reverse-mode gradients against central finite differences in f64.

mod common;

use std::sync::Arc;

use common::*;
use introlm_core::backbone::{lm_loss_on_tape, BackboneWeights, TapeParams};
use introlm_core::introspect::{Aggregator, CpxConfig, IntroModel, IntroTapeParams, LoraSpec};
use introlm_core::{Error, Tape, Tensor, Var};
use rand::Rng;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Checks d(sum(f(inputs) * R))/d inputs for a fixed random `R`.
fn check_op(name: &str, inputs: Vec<Tensor<f64>>, f: &Build) {
    let mut r = rng(99);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(Arc::new(t.clone()), true)).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.value(out).unwrap().shape().to_vec();
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let eval = |ins: &[Tensor<f64>]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(Arc::new(t.clone()), true)).collect();
        let out = f(&mut tape, &vars);
        let p = tape.constant(probe.clone());
        let prod = tape.mul(out, p).unwrap();
        let loss = tape.sum(prod).unwrap();
        let value = tape.value(loss).unwrap().item().unwrap();
        let grads = tape.backward(loss).unwrap();
        (value, vars.iter().map(|&v| grads.get(v).unwrap().to_vec()).collect())
    };
    let (_, analytic) = eval(&inputs);
    let h = 1e-5;
    for (i, grad) in analytic.iter().enumerate() {
        for (j, &a) in grad.iter().enumerate() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let e = rel_err(a, fd);
            assert!(e <= 1e-4, "{name}: input {i} elem {j}: analytic {a} fd {fd}");
        }
    }
}

fn rand_t(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn elementary_ops() {
    let mut r = rng(1);
    check_op("matmul", vec![rand_t(&mut r, &[3, 4]), rand_t(&mut r, &[4, 2])], &|t, v| t.matmul(v[0], v[1]).unwrap());
    check_op("matmul_nt", vec![rand_t(&mut r, &[3, 4]), rand_t(&mut r, &[5, 4])], &|t, v| {
        t.matmul_nt(v[0], v[1]).unwrap()
    });
    check_op("add", vec![rand_t(&mut r, &[2, 3]), rand_t(&mut r, &[2, 3])], &|t, v| t.add(v[0], v[1]).unwrap());
    check_op("mul", vec![rand_t(&mut r, &[2, 3]), rand_t(&mut r, &[2, 3])], &|t, v| t.mul(v[0], v[1]).unwrap());
    check_op("scale", vec![rand_t(&mut r, &[2, 3])], &|t, v| t.scale(v[0], -1.7).unwrap());
    check_op("silu", vec![rand_t(&mut r, &[2, 5])], &|t, v| t.silu(v[0]).unwrap());
    check_op("rms_norm", vec![rand_t(&mut r, &[3, 6]), rand_t(&mut r, &[6])], &|t, v| t.rms_norm(v[0], v[1]).unwrap());
    check_op("softmax", vec![rand_t(&mut r, &[3, 5])], &|t, v| t.softmax_rows(v[0]).unwrap());
    check_op("rope", vec![rand_t(&mut r, &[3, 8])], &|t, v| t.rope(v[0], 4, 2, 10_000.0).unwrap());
    check_op("mean_rows", vec![rand_t(&mut r, &[4, 3])], &|t, v| t.mean_rows(v[0]).unwrap());
    check_op("gather", vec![rand_t(&mut r, &[5, 3])], &|t, v| t.gather(v[0], &[4, 1, 4, 0]).unwrap());
    check_op("select_rows", vec![rand_t(&mut r, &[5, 3])], &|t, v| t.select_rows(v[0], &[2, 2, 0]).unwrap());
    check_op("concat", vec![rand_t(&mut r, &[2, 3]), rand_t(&mut r, &[1, 3])], &|t, v| {
        t.concat_rows(v[0], v[1]).unwrap()
    });
    check_op("masked_add", vec![rand_t(&mut r, &[3, 4]), rand_t(&mut r, &[3, 4])], &|t, v| {
        t.masked_add(v[0], v[1], &[true, false, true]).unwrap()
    });
}

#[test]
fn attention_op() {
    let mut r = rng(2);
    // Two queries at the end of five key positions, two heads of width 4.
    check_op(
        "attention",
        vec![rand_t(&mut r, &[2, 8]), rand_t(&mut r, &[5, 8]), rand_t(&mut r, &[5, 8])],
        &|t, v| t.attention(v[0], v[1], v[2], 2).unwrap(),
    );
    check_op(
        "attention_full",
        vec![rand_t(&mut r, &[4, 8]), rand_t(&mut r, &[4, 8]), rand_t(&mut r, &[4, 8])],
        &|t, v| t.attention(v[0], v[1], v[2], 2).unwrap(),
    );
}

#[test]
fn losses() {
    let mut r = rng(3);
    for label in 0..2u8 {
        check_op("bce", vec![rand_t(&mut r, &[1, 1])], &move |t, v| t.bce_with_logit(v[0], label, 1.3).unwrap());
    }
    check_op("cross_entropy", vec![rand_t(&mut r, &[3, 6])], &|t, v| {
        t.cross_entropy(v[0], &[1, 5, 0], &[0.5, 1.0, 0.25]).unwrap()
    });
    let mut tape: Tape<f64> = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    assert!(matches!(tape.bce_with_logit(z, 2, 1.0), Err(Error::InvalidLabel(2))));
}

#[test]
fn backward_rejects_foreign_vars_and_non_scalars() {
    let mut a: Tape<f64> = Tape::new();
    let mut b: Tape<f64> = Tape::new();
    let x = a.leaf(Arc::new(Tensor::zeros(vec![2, 2])), true);
    let y = b.leaf(Arc::new(Tensor::scalar(1.0)), true);
    assert!(matches!(a.backward(y), Err(Error::NotOnTape)));
    assert!(a.backward(x).is_err());
    assert!(matches!(b.add(y, x), Err(Error::NotOnTape)));
}

#[test]
fn backbone_lm_loss_gradients() {
    let cfg = tiny_config();
    let w = BackboneWeights::<f64>::init(cfg, 5).unwrap();
    let tokens = [1u32, 7, 9, 12, 4];
    let targets = [(3usize, 10u32), (4, 2)];
    let loss_of = |w: &BackboneWeights<f64>| {
        let mut tape = Tape::new();
        let p = TapeParams::register(&mut tape, w, true);
        let l = lm_loss_on_tape(&mut tape, w, &p, &tokens, &targets).unwrap();
        tape.value(l).unwrap().item().unwrap()
    };
    let mut tape = Tape::new();
    let params = TapeParams::register(&mut tape, &w, true);
    let l = lm_loss_on_tape(&mut tape, &w, &params, &tokens, &targets).unwrap();
    let grads = tape.backward(l).unwrap();
    let mut r = rng(5);
    let h = 1e-5;
    for (k, (name, p)) in w.named_params().iter().enumerate() {
        let g = grads.get(params.vars()[k]).unwrap();
        // A few random coordinates per tensor keeps the test fast.
        for _ in 0..6 {
            let j = r.gen_range(0..p.numel());
            let mut plus = w.clone();
            plus.named_params_mut()[k].1.tensor_mut().data_mut()[j] += h;
            let mut minus = w.clone();
            minus.named_params_mut()[k].1.tensor_mut().data_mut()[j] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            assert!(rel_err(g[j], fd) <= 1e-4, "{name}[{j}]: {} vs {fd}", g[j]);
        }
    }
}

fn intro_loss(m: &IntroModel<f64>, prompts: &[(Vec<u32>, u8)]) -> f64 {
    prompts
        .iter()
        .map(|(p, l)| introlm_core::tensor::bce_value(m.logit(p).unwrap(), *l as f64) * if *l == 0 { 1.5 } else { 0.7 })
        .sum()
}

#[test]
fn intro_model_gradients_every_group() {
    for cpx in [
        CpxConfig { n_cpx: 2, ..CpxConfig::default() },
        CpxConfig { n_cpx: 2, aggregator: Aggregator::Last, post_norm: false, layer: Some(1), ..CpxConfig::default() },
    ] {
        let bb = Arc::new(BackboneWeights::<f64>::init(tiny_config(), 6).unwrap());
        let mut m = IntroModel::new(bb, cpx, 6).unwrap();
        m.set_lora_targets(&LoraSpec { rank: 2, ..LoraSpec::default() }, 6).unwrap();
        randomize_adapters(&mut m, 6, 0.3);
        let prompts = vec![(vec![1u32, 5, 9, 13, 4], 1u8), (vec![1, 20, 6, 7], 0)];
        let mut tape = Tape::new();
        let params = IntroTapeParams::register(&mut tape, &m);
        let mut total = None;
        for (p, l) in &prompts {
            let prefix = m.prefix_cache(p).unwrap();
            let z = m.logit_on_tape(&mut tape, &params, &prefix).unwrap();
            let w = if *l == 0 { 1.5 } else { 0.7 };
            let loss = tape.bce_with_logit(z, *l, w).unwrap();
            total = Some(match total {
                Some(t) => tape.add(t, loss).unwrap(),
                None => loss,
            });
        }
        let grads = tape.backward(total.unwrap()).unwrap();
        let vars = params.vars();
        let h = 1e-5;
        let names: Vec<String> = m.intro_params().iter().map(|(n, _)| n.clone()).collect();
        for (k, name) in names.iter().enumerate() {
            let g = grads.get(vars[k]).unwrap().to_vec();
            let n = g.len();
            for j in (0..n).step_by((n / 5).max(1)) {
                let mut plus = m.clone();
                plus.intro_params_mut()[k].1.tensor_mut().data_mut()[j] += h;
                let mut minus = m.clone();
                minus.intro_params_mut()[k].1.tensor_mut().data_mut()[j] -= h;
                let fd = (intro_loss(&plus, &prompts) - intro_loss(&minus, &prompts)) / (2.0 * h);
                assert!(rel_err(g[j], fd) <= 1e-4, "{name}[{j}]: {} vs {fd}", g[j]);
            }
        }
        // Backbone leaves never request gradients.
        for v in params.backbone.vars() {
            assert!(grads.get(v).is_none());
        }
    }
}
