use serde::{Deserialize, Serialize};

use super::NnError;

/// Dense row-major array with an optional gradient buffer of the same length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(NnError::Shape {
                op: "tensor",
                expected: format!("{expected} values for shape {shape:?}"),
                got: format!("{} values", values.len()),
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![v; shape.iter().product()],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            values: vec![v],
            grad: None,
        }
    }

    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Self, NnError> {
        Self::new(shape, values.iter().map(|&v| v as f64).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        debug_assert!(grad.as_ref().is_none_or(|g| g.len() == self.values.len()));
        self.grad = grad;
    }

    pub(crate) fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub(crate) fn accumulate_grad(&mut self, delta: &[f64]) {
        match &mut self.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64, NnError> {
        if self.values.len() != 1 {
            return Err(NnError::Shape {
                op: "item",
                expected: "a single element".into(),
                got: format!("shape {:?}", self.shape),
            });
        }
        Ok(self.values[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, NnError> {
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(NnError::Shape {
                op: "reshape",
                expected: format!("{} elements", self.values.len()),
                got: format!("shape {shape:?}"),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Round every value to the nearest f32, which is how parameters are stored.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }
}
