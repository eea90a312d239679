use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Per-layer keys (after rotary embedding) and values of every admitted
/// position, row-major `len x d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<T> {
    d_model: usize,
    max_len: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(n_layers: usize, d_model: usize, max_len: usize) -> Self {
        Self {
            d_model,
            max_len,
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            len: 0,
        }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn keys(&self, layer: usize) -> &[T] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[T] {
        &self.values[layer]
    }

    /// Positions stored for `layer`; equals `len()` once a step has
    /// written every layer.
    pub fn layer_len(&self, layer: usize) -> usize {
        self.keys[layer].len() / self.d_model
    }

    pub(crate) fn append(&mut self, layer: usize, k: &[T], v: &[T]) -> Result<()> {
        if k.len() != v.len() || !k.len().is_multiple_of(self.d_model) {
            return Err(Error::shape(format!("cache append of {} / {} values", k.len(), v.len())));
        }
        let new_len = self.layer_len(layer) + k.len() / self.d_model;
        if new_len > self.max_len {
            return Err(Error::SeqTooLong { len: new_len, max: self.max_len });
        }
        self.keys[layer].extend_from_slice(k);
        self.values[layer].extend_from_slice(v);
        Ok(())
    }

    /// Commits positions appended to every layer.
    pub(crate) fn commit(&mut self) -> Result<()> {
        let n = self.layer_len(0);
        if (0..self.n_layers()).any(|l| self.layer_len(l) != n) {
            return Err(Error::shape("cache layers have different lengths"));
        }
        self.len = n;
        Ok(())
    }

    /// Largest absolute difference against another cache, or `None` if the
    /// layouts differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.len != other.len || self.n_layers() != other.n_layers() || self.d_model != other.d_model {
            return None;
        }
        let mut m = 0.0f64;
        for l in 0..self.n_layers() {
            for (a, b) in self.keys[l].iter().zip(&other.keys[l]).chain(self.values[l].iter().zip(&other.values[l])) {
                m = m.max((a.as_f64() - b.as_f64()).abs());
            }
        }
        Some(m)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let bits = |v: &[T]| v.iter().map(|x| x.as_f64().to_bits()).collect::<Vec<_>>();
        self.len == other.len
            && self.n_layers() == other.n_layers()
            && (0..self.n_layers()).all(|l| {
                bits(&self.keys[l]) == bits(&other.keys[l]) && bits(&self.values[l]) == bits(&other.values[l])
            })
    }
}
