//! Named parameter storage shared by every trainable module.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<T> {
    names: Vec<String>,
    mats: Vec<Mat<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            mats: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>) -> usize {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.mats.push(value);
        self.mats.len() - 1
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn mats(&self) -> &[Mat<T>] {
        &self.mats
    }

    pub fn mats_mut(&mut self) -> &mut [Mat<T>] {
        &mut self.mats
    }

    pub fn get(&self, index: usize) -> &Mat<T> {
        &self.mats[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Mat<T> {
        &mut self.mats[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.mats.iter().map(|m| m.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.mats.iter().all(Mat::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            mats: self.mats.iter().map(Mat::cast).collect(),
        }
    }

    /// Replaces every value with `values` taken in storage order.
    pub fn load_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.n_scalars() {
            return Err(Error::config(format!(
                "{} values for {} parameters",
                values.len(),
                self.n_scalars()
            )));
        }
        let mut offset = 0;
        for m in &mut self.mats {
            let n = m.data.len();
            m.data.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<T> {
        self.mats.iter().flat_map(|m| m.data.iter().copied()).collect()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, m) in self.names.iter().zip(&mut self.mats) {
            if name.starts_with(prefix) {
                m.data.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }
}

/// Affine map `x · w + b` with `w: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    /// Normal weights with standard deviation `gain / sqrt(fan_in)`, zero bias.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        let w = store.add(format!("{name}.w"), normal(fan_in, fan_out, std, rng));
        let b = store.add(format!("{name}.b"), Mat::zeros(1, fan_out));
        Self { w, b }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, b)
    }

    pub fn shape<T: Real>(&self, store: &ParamStore<T>) -> (usize, usize) {
        store.get(self.w).shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn init<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Mat::filled(1, width, T::one()));
        let beta = store.add(format!("{name}.beta"), Mat::zeros(1, width));
        Self { gamma, beta }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

pub fn normal<T: Real>(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Mat<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| T::of(dist.sample(rng))).collect();
    Mat { rows, cols, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_round_trip_and_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::init(&mut store, "enc", 3, 2, 1.0, &mut rng);
        let ln = LayerNorm::init(&mut store, "norm", 2);
        assert_eq!(store.find("enc.w"), Some(lin.w));
        assert_eq!(store.find("norm.beta"), Some(ln.beta));
        assert_eq!(store.n_scalars(), 3 * 2 + 2 + 2 + 2);
        let flat = store.flat();
        let mut other = store.clone();
        other.zero_prefix("enc");
        assert!(other.get(lin.w).data.iter().all(|&x| x == 0.0));
        other.load_flat(&flat).unwrap();
        assert_eq!(other, store);
        assert!(other.load_flat(&flat[1..]).is_err());
    }
}
