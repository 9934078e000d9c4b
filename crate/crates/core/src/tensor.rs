use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major `f64` array with an optional gradient accumulator.
///
/// Every constructor rejects non-finite values, so a `Tensor` in hand is
/// always finite.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("dimensions must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction"));
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    /// Builds a matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    /// Internal constructor for values already known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            shape,
            values,
            grad: None,
        }
    }

    pub(crate) fn checked(shape: Vec<usize>, values: Vec<f64>, op: &'static str) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op));
        }
        Ok(Self::from_parts(shape, values))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// First value; meaningful for scalars.
    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Attaches a zeroed gradient buffer, marking the tensor as trainable.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.values.len()]);
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub(crate) fn split_mut(&mut self) -> (&mut [f64], Option<&mut [f64]>) {
        (&mut self.values, self.grad.as_deref_mut())
    }

    /// Copy of the values without the gradient buffer.
    pub fn detached(&self) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.values.clone())
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Stacks row blocks of equal width.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("row concatenation"))?;
        let cols = first.cols();
        let mut rows = 0;
        let mut values = Vec::new();
        for p in parts {
            if p.shape.len() != 2 || p.cols() != cols {
                return Err(Error::shape("concat_rows", format!("{:?} vs {:?}", first.shape, p.shape)));
            }
            rows += p.rows();
            values.extend_from_slice(&p.values);
        }
        Ok(Tensor::from_parts(vec![rows, cols], values))
    }

    /// Selects rows by index into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::Empty("row selection"));
        }
        let c = self.cols();
        let mut values = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::shape("gather_rows", format!("row {i} of {}", self.rows())));
            }
            values.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor::from_parts(shape, values))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("values", &self.values)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Tensor::vector(vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::vector(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn grad_buffer_matches_shape() {
        let t = Tensor::matrix(2, 3, vec![1.0; 6]).unwrap().with_grad();
        assert_eq!(t.grad().unwrap().len(), 6);
    }

    #[test]
    fn gather_and_concat() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let g = t.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.values(), &[5.0, 6.0, 1.0, 2.0]);
        let c = Tensor::concat_rows(&[&g, &t]).unwrap();
        assert_eq!(c.shape(), &[5, 2]);
    }
}
