//! A small reverse-mode autodiff engine over dense f64 tensors.
//!
//! The design is a flat tape (Wengert list): every operation appends a node
//! holding its value and a backward closure. Parameters live outside the tape
//! in a [`ParamStore`] and are re-leafed each step. Everything is
//! single-threaded and deterministic; checkpoints round values to f32 on
//! serialization.

mod conv;
mod gradcheck;
mod ops;
mod optim;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use tape::{Grads, Tape, Var};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RavenError, Result};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// Truncated normal init (values resampled outside 2 std).
    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            // Box-Muller.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                data.push(z * std);
            }
        }
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Number of rows when viewed as a 2-D row-major matrix.
    pub fn rows(&self) -> usize {
        assert!(self.shape.len() >= 1);
        self.shape[..self.shape.len() - 1].iter().product::<usize>().max(1)
    }

    /// Size of the trailing axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("cols() on scalar")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|v| *v as f32).collect()
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(RavenError::shape(format!(
                "tensor payload length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: data.iter().map(|v| *v as f64).collect() })
    }
}

/// Named parameter set with per-tensor trainability. Registration order is
/// the canonical order used by optimizers and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    index: std::collections::HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.trainable.push(trainable);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let ix = self.index[name];
        &self.tensors[ix]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let ix = self.index[name];
        &mut self.tensors[ix]
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|ix| &self.tensors[*ix])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.names
            .iter()
            .zip(self.tensors.iter())
            .zip(self.trainable.iter())
            .map(|((n, t), tr)| (n.as_str(), t, *tr))
    }

    pub fn tensor_at(&self, ix: usize) -> &Tensor {
        &self.tensors[ix]
    }

    pub fn tensor_at_mut(&mut self, ix: usize) -> &mut Tensor {
        &mut self.tensors[ix]
    }

    pub fn name_at(&self, ix: usize) -> &str {
        &self.names[ix]
    }

    pub fn trainable_at(&self, ix: usize) -> bool {
        self.trainable[ix]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Total number of scalar parameters (trainable only).
    pub fn param_count(&self) -> usize {
        self.iter().filter(|(_, _, tr)| *tr).map(|(_, t, _)| t.numel()).sum()
    }

    /// Copies every tensor under `src_prefix` in `other` into `dst_prefix`
    /// here. Shapes must match exactly.
    pub fn copy_subtree(&mut self, other: &ParamStore, src_prefix: &str, dst_prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, tensor, _) in other.iter() {
            if let Some(rest) = name.strip_prefix(src_prefix) {
                let dst = format!("{dst_prefix}{rest}");
                let ix = self.index.get(&dst).ok_or_else(|| {
                    RavenError::shape(format!("no destination parameter {dst}"))
                })?;
                if self.tensors[*ix].shape() != tensor.shape() {
                    return Err(RavenError::shape(format!(
                        "shape mismatch copying {name} -> {dst}: {:?} vs {:?}",
                        tensor.shape(),
                        self.tensors[*ix].shape()
                    )));
                }
                self.tensors[*ix] = tensor.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Binding of a ParamStore onto a tape: parameter index -> tape var.
pub struct BoundParams<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl<'a> BoundParams<'a> {
    pub fn bind(store: &'a ParamStore, tape: &mut Tape, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(_, t, tr)| {
                if trainable && tr {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundParams { store, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        match self.store.index_of(name) {
            Some(ix) => self.vars[ix],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn var_at(&self, ix: usize) -> Var {
        self.vars[ix]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn trunc_normal_bounded() {
        let mut rng = rng_for(1, "init", &[]);
        let t = Tensor::trunc_normal(&[64, 8], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04 + 1e-12));
    }

    #[test]
    fn param_store_subtree_copy() {
        let mut a = ParamStore::new();
        a.insert("video.enc.w", Tensor::full(&[2, 2], 3.0), true);
        a.insert("video.enc.b", Tensor::full(&[2], 1.0), true);
        let mut b = ParamStore::new();
        b.insert("enc.w", Tensor::zeros(&[2, 2]), true);
        b.insert("enc.b", Tensor::zeros(&[2]), true);
        let n = b.copy_subtree(&a, "video.enc.", "enc.").unwrap();
        assert_eq!(n, 2);
        assert_eq!(b.get("enc.w").data(), a.get("video.enc.w").data());
    }
}
