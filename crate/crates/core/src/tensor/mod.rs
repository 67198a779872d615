//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The op set is exactly what the encoder and its losses need: matmul,
//! masked softmax, layer norm, lookups, pointwise math, and the two
//! cross-entropy losses. Gradients are recorded on a [`tape::Tape`] and
//! checked against central finite differences by [`gradcheck`].

pub mod gradcheck;
pub mod tape;

use crate::error::TensorError;
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major, with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Scalar> {
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            });
        }
        if shape.contains(&0) {
            return Err(TensorError::InvalidArgument {
                op: "Tensor::new",
                detail: format!("zero-sized dimension in shape {:?}", shape),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![E::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false, grad: None }
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(value: E) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self, TensorError> {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|i| E::from_f64(f(i))).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<E>>) {
        if let Some(g) = &grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        self.grad = grad;
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Casts elementwise into another precision. Grad is not carried over.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// Named trainable tensor. Names encode the module hierarchy with `.`
/// separators, e.g. `encoder.layer3.attn.q.weight`.
#[derive(Debug, Clone)]
pub struct Parameter<E: Scalar> {
    pub name: String,
    pub tensor: Tensor<E>,
}

/// Ordered set of named parameters. Iteration order is registration order,
/// which keeps initialization and optimizer traversal deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<E: Scalar> {
    entries: Vec<Parameter<E>>,
    index: std::collections::HashMap<String, usize>,
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: std::collections::HashMap::new() }
    }

    pub fn register(&mut self, name: &str, tensor: Tensor<E>) -> Result<(), TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::InvalidArgument {
                op: "ParamStore::register",
                detail: format!("duplicate parameter name {name:?}"),
            });
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Parameter { name: name.to_string(), tensor: tensor.with_requires_grad(true) });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].tensor)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<E>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<E>> {
        self.entries.iter_mut()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in &self.entries {
            out.register(&p.name, p.tensor.cast::<T>().with_requires_grad(true)).expect("names unique");
        }
        out
    }
}
