//! Dense rank-4 f64 tensors and named trainable parameters.
//!
//! Layout is row-major (batch, channel, row, col). Parameters hold their
//! value behind an `Arc` so recording a tape step shares storage instead
//! of copying weights; an optimizer update copies-on-write, which leaves
//! any still-recorded tape reading the pre-update values.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ShapeError {
    #[error("{op}: expected {expected} for {what}, got {got}")]
    Mismatch {
        op: &'static str,
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: data length {got} does not match shape {shape:?} ({expected} elements)")]
    DataLength {
        op: &'static str,
        shape: [usize; 4],
        expected: usize,
        got: usize,
    },
}

/// Dense (batch, channel, row, col) tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        let len = shape.iter().product();
        Tensor4 {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: [usize; 4], v: f64) -> Self {
        let len = shape.iter().product();
        Tensor4 {
            shape,
            data: vec![v; len],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self, ShapeError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(ShapeError::DataLength {
                op: "from_vec",
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor4 { shape, data })
    }

    /// Scalar wrapped as a [1,1,1,1] tensor.
    pub fn scalar(v: f64) -> Self {
        Tensor4 {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(b < self.shape[0] && c < self.shape[1] && h < self.shape[2] && w < self.shape[3]);
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(b, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        let i = self.idx(b, c, h, w);
        &mut self.data[i]
    }

    /// Same data, new shape; element count must match.
    pub fn reshaped(&self, shape: [usize; 4]) -> Result<Self, ShapeError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(ShapeError::DataLength {
                op: "reshaped",
                shape,
                expected,
                got: self.data.len(),
            });
        }
        Ok(Tensor4 {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// First non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<f64> {
        self.data.iter().copied().find(|v| !v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor4) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Scalar value of a [1,1,1,1] tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }
}

/// Handle into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// One named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Arc<Tensor4>,
    pub grad: Tensor4,
}

/// Ordered collection of parameters; iteration order is insertion order,
/// which fixes serialization and optimizer traversal order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor4) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let grad = Tensor4::zeros(value.shape());
        let id = ParamId(self.params.len());
        self.by_name.insert(name.to_owned(), id.0);
        self.params.push(Parameter {
            name: name.to_owned(),
            value: Arc::new(value),
            grad,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Total element count over all parameter values.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
