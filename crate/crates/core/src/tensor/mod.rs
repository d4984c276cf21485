//! Dense tensors, named parameter sets and a define-by-run autodiff tape.
//!
//! Model code records its forward pass on a [`Tape`], which borrows parameter
//! values from a [`ParamSet`] without copying them. [`Tape::backward`]
//! accumulates parameter gradients into a congruent [`GradSet`].

mod optim;
pub(crate) mod tape;

pub use optim::{clip_grad_norm, AdamConfig, AdamState};
pub use tape::{lstm_cell, LstmVars, Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Row-major dense array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                msg: format!("extents must be positive, got {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                msg: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; numel]).expect("zero-sized tensor")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    /// 1-D tensor. Panics on an empty vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::new(vec![data.len()], data).expect("empty vector")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::vector(vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid uniform bounds");
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = dist.sample(rng));
        t
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid normal std");
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = dist.sample(rng));
        t
    }
}

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.id(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(|id| &mut self.tensors[id.0])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Same names in the same order with the same shapes.
    pub fn check_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::invalid("parameter sets have different names"));
        }
        for ((name, a), b) in self.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::invalid(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Overwrites every value with the congruent set's values.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        self.check_congruent(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}

/// Gradient buffers congruent to a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    grads: Vec<Tensor>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradSet {
            grads: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.grads.iter_mut()
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &GradSet) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::invalid("gradient sets differ in length"));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if a.shape != b.shape {
                return Err(Error::ShapeMismatch {
                    op: "grad_add",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// All gradient values concatenated in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|g| g.data.iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn congruence_and_copy() {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::zeros(&[2, 2]));
        let mut b = ParamSet::new();
        b.insert("w", Tensor::full(&[2, 2], 3.0));
        a.copy_from(&b).unwrap();
        assert_eq!(a, b);

        let mut c = ParamSet::new();
        c.insert("w", Tensor::zeros(&[4]));
        assert!(a.check_congruent(&c).is_err());
    }
}
