use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Linear warm-up from 0 to `base_lr`, then cosine decay to 0 at
/// `total_steps`.
pub fn cosine_warmup_lr(step: usize, total_steps: usize, base_lr: f64, warmup_ratio: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::OutOfRange(format!("step {step} of {total_steps}")));
    }
    if !(0.0..1.0).contains(&warmup_ratio) {
        return Err(Error::OutOfRange(format!("warmup ratio {warmup_ratio}")));
    }
    let warm = (warmup_ratio * total_steps as f64).round() as usize;
    if step < warm {
        return Ok(base_lr * step as f64 / warm as f64);
    }
    let span = (total_steps - warm).max(1) as f64;
    let progress = (step - warm) as f64 / span;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Euclidean norm over every gradient buffer, accumulated in `f64`.
pub fn global_norm<T: Scalar>(grads: &[Vec<T>]) -> f64 {
    grads.iter().flatten().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        // Slight headroom so rounding of the rescaled values cannot push
        // the norm back over the limit.
        let coef = T::from_f64(max_norm / norm * (1.0 - 1e-6));
        grads.iter_mut().flatten().for_each(|g| *g *= coef);
    }
    norm
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(sizes: &[usize], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `lrs[i]` and `decay[i]` apply to `params[i]`.
    pub fn step<T: Scalar>(&mut self, params: &mut [&mut [T]], grads: &[Vec<T>], lrs: &[f64], decay: &[bool]) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let lr = lrs[i];
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            for (j, (w, g)) in p.iter_mut().zip(&grads[i]).enumerate() {
                let g = g.as_f64();
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                let x = w.as_f64();
                *w = T::from_f64(x - lr * (update + wd * x));
            }
        }
    }
}
