use std::collections::BTreeSet;

use rand::Rng as _;

use crate::backbone::{BackboneConfig, Param, Projection};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Scalar, Tape, Tensor, Var};

use super::TokenMask;

/// Low-rank update `scale * B A` for one projection of one layer.
#[derive(Clone, Debug)]
pub struct LoraAdapter<T> {
    pub target: Projection,
    pub layer: usize,
    /// `rank x d_in`.
    pub a: Param<T>,
    /// `d_out x rank`.
    pub b: Param<T>,
    pub alpha: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    /// `A` uniform in `+-1/sqrt(d_in)`, `B = 0`, so the update starts at zero.
    pub fn init(
        config: &BackboneConfig,
        target: Projection,
        layer: usize,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        let (d_in, d_out) = config.projection_dims(target);
        if rank == 0 || rank >= d_in.min(d_out) {
            return Err(Error::InvalidConfig(format!(
                "LoRA rank {rank} must be in 1..{}",
                d_in.min(d_out)
            )));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidConfig(format!("LoRA alpha {alpha} must be positive")));
        }
        let mut rng = crate::rng::stream(seed, &format!("intro.lora.{layer}.{target}"));
        let bound = 1.0 / (d_in as f64).sqrt();
        let a = (0..rank * d_in).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
        Ok(Self {
            target,
            layer,
            a: Param::new(Tensor::new(vec![rank, d_in], a)?),
            b: Param::new(Tensor::zeros(vec![d_out, rank])),
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.tensor().rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.tensor().cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.tensor().rows()
    }

    pub fn scale(&self) -> T {
        T::from_f64(self.alpha / self.rank() as f64)
    }

    pub fn numel(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `scale * B A` as a `d_in x d_out` matrix, in the same layout as the
    /// frozen weight it adapts.
    pub fn delta_weight(&self) -> Tensor<T> {
        let (r, d_in, d_out) = (self.rank(), self.d_in(), self.d_out());
        let (a, b) = (self.a.tensor().data(), self.b.tensor().data());
        let s = self.scale();
        let mut out = vec![T::zero(); d_in * d_out];
        for i in 0..d_in {
            for o in 0..d_out {
                let mut acc = T::zero();
                for k in 0..r {
                    acc += b[o * r + k] * a[k * d_in + i];
                }
                out[i * d_out + o] = acc * s;
            }
        }
        Tensor::matrix(d_in, d_out, out).expect("shape matches data")
    }

    /// Adds `scale * (h A^T) B^T` to `out` for one row.
    pub(crate) fn add_row(&self, h: &[T], out: &mut [T]) {
        let (r, d_in, d_out) = (self.rank(), self.d_in(), self.d_out());
        let t = kernels::matmul_nt(h, self.a.tensor().data(), 1, d_in, r);
        let u = kernels::matmul_nt(&t, self.b.tensor().data(), 1, r, d_out);
        let s = self.scale();
        for (o, &v) in out.iter_mut().zip(&u) {
            *o += v * s;
        }
    }

    /// Tape version of the masked update on top of `base = input W`.
    pub(crate) fn apply_on_tape(
        &self,
        tape: &mut Tape<T>,
        a: Var,
        b: Var,
        input: Var,
        base: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let t = tape.matmul_nt(input, a)?;
        let u = tape.matmul_nt(t, b)?;
        let s = tape.scale(u, self.scale())?;
        tape.masked_add(base, s, mask)
    }
}

/// `H W + (H dW) * M`: rows with mask 0 are exactly `H W`.
pub fn masked_lora_projection<T: Scalar>(
    h: &Tensor<T>,
    w: &Tensor<T>,
    adapter: &LoraAdapter<T>,
    mask: &TokenMask,
) -> Result<Tensor<T>> {
    let (n, d_in) = (h.rows(), h.cols());
    if h.shape().len() != 2 || w.shape().len() != 2 || w.rows() != d_in {
        return Err(Error::shape(format!("projection {:?} x {:?}", h.shape(), w.shape())));
    }
    let d_out = w.cols();
    if adapter.d_in() != d_in || adapter.d_out() != d_out {
        return Err(Error::shape(format!(
            "adapter {}x{} on weight {d_in}x{d_out}",
            adapter.d_in(),
            adapter.d_out()
        )));
    }
    if mask.len() != n {
        return Err(Error::shape(format!("mask of {} rows for {n}", mask.len())));
    }
    let mut out = kernels::matmul(h.data(), w.data(), n, d_in, d_out);
    for (r, &m) in mask.as_slice().iter().enumerate() {
        if m {
            adapter.add_row(h.row(r), &mut out[r * d_out..(r + 1) * d_out]);
        }
    }
    Tensor::matrix(n, d_out, out)
}

/// Which projections receive adapters, and with what rank.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraSpec {
    pub targets: BTreeSet<Projection>,
    pub rank: usize,
    pub alpha: f64,
    /// Key and value projections are rejected unless this is set.
    pub allow_kv: bool,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self {
            targets: Self::full(),
            rank: 8,
            alpha: 16.0,
            allow_kv: false,
        }
    }
}

impl LoraSpec {
    pub fn none() -> BTreeSet<Projection> {
        BTreeSet::new()
    }

    pub fn ffn() -> BTreeSet<Projection> {
        [Projection::Gate, Projection::Up, Projection::Down].into()
    }

    pub fn attn() -> BTreeSet<Projection> {
        [Projection::Q, Projection::O].into()
    }

    pub fn full() -> BTreeSet<Projection> {
        [Projection::Q, Projection::O, Projection::Gate, Projection::Up, Projection::Down].into()
    }

    pub fn with_targets(targets: BTreeSet<Projection>) -> Self {
        Self { targets, ..Self::default() }
    }

    /// Parses either a preset (`none`, `ffn`, `attn`, `full`) or a comma
    /// separated list of projection names.
    pub fn parse_targets(s: &str) -> Result<BTreeSet<Projection>> {
        match s.trim() {
            "none" | "" => Ok(Self::none()),
            "ffn" => Ok(Self::ffn()),
            "attn" => Ok(Self::attn()),
            "full" => Ok(Self::full()),
            list => list.split(',').map(str::parse).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.allow_kv && (self.targets.contains(&Projection::K) || self.targets.contains(&Projection::V)) {
            return Err(Error::InvalidConfig(
                "k and v adapters are disabled by default; enable the override to use them".into(),
            ));
        }
        Ok(())
    }

    /// Adapter parameters over the first `layers` blocks.
    pub fn num_params(&self, config: &BackboneConfig, layers: usize) -> usize {
        self.targets
            .iter()
            .map(|&p| {
                let (d_in, d_out) = config.projection_dims(p);
                self.rank * (d_in + d_out)
            })
            .sum::<usize>()
            * layers
    }
}
