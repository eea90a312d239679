use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::Param;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Scalar, Tape, Tensor, Var};

/// How hidden states at several `[CPX]` positions are pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Mean,
    Last,
}

impl Aggregator {
    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Mean => "mean",
            Aggregator::Last => "last",
        }
    }
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregator::Mean),
            "last" => Ok(Aggregator::Last),
            _ => Err(Error::InvalidConfig(format!("unknown aggregator {s}"))),
        }
    }
}

/// Linear map from a pooled hidden state to one logit.
#[derive(Clone, Debug)]
pub struct ClassifierHead<T> {
    /// `d_model x 1`.
    pub weight: Param<T>,
    /// `1 x 1`.
    pub bias: Param<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn zeros(d_model: usize) -> Self {
        Self {
            weight: Param::new(Tensor::zeros(vec![d_model, 1])),
            bias: Param::new(Tensor::zeros(vec![1, 1])),
        }
    }

    /// Small uniform weights, zero bias.
    pub fn init(d_model: usize, seed: u64) -> Self {
        let mut rng = crate::rng::stream(seed, "intro.head");
        let bound = 0.1 / (d_model as f64).sqrt();
        let w = (0..d_model).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
        Self {
            weight: Param::new(Tensor::matrix(d_model, 1, w).expect("shape matches data")),
            bias: Param::new(Tensor::zeros(vec![1, 1])),
        }
    }

    pub fn d_model(&self) -> usize {
        self.weight.tensor().rows()
    }

    pub fn numel(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn logit(&self, pooled: &[T]) -> T {
        let z = kernels::matmul(pooled, self.weight.tensor().data(), 1, pooled.len(), 1)[0];
        z + self.bias.tensor().data()[0]
    }

    /// Normalises each row with `final_norm` (when given), pools and
    /// applies the head.
    pub fn logit_rows(&self, rows: &[T], final_norm: Option<&[T]>, agg: Aggregator) -> Result<T> {
        let d = self.d_model();
        if rows.is_empty() || !rows.len().is_multiple_of(d) {
            return Err(Error::shape(format!("{} values for head of width {d}", rows.len())));
        }
        let n = rows.len() / d;
        let mut normed = rows.to_vec();
        if let Some(g) = final_norm {
            for (src, dst) in rows.chunks_exact(d).zip(normed.chunks_exact_mut(d)) {
                kernels::rms_norm_row(src, g, dst);
            }
        }
        let pooled = match agg {
            Aggregator::Mean => crate::tensor::mean_rows(&Tensor::matrix(n, d, normed)?),
            Aggregator::Last => normed[(n - 1) * d..].to_vec(),
        };
        Ok(self.logit(&pooled))
    }
}

/// Tape counterpart of [`ClassifierHead::logit_rows`]; returns a `1 x 1`
/// logit.
pub(crate) fn head_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    rows: Var,
    final_norm: Option<Var>,
    agg: Aggregator,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let x = match final_norm {
        Some(g) => tape.rms_norm(rows, g)?,
        None => rows,
    };
    let pooled = match agg {
        Aggregator::Mean => tape.mean_rows(x)?,
        Aggregator::Last => {
            let n = tape.value(x)?.rows();
            tape.select_rows(x, &[n - 1])?
        }
    };
    let z = tape.matmul(pooled, weight)?;
    tape.add(z, bias)
}
