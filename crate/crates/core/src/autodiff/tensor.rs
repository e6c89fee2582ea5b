use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = numel_of(shape)?;
        Self::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// One-dimensional tensor holding a copy of `values`.
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.data.len())?;
        self.shape = shape;
        Ok(self)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("empty shape"));
    }
    shape.iter().try_fold(1usize, |acc, &d| {
        if d == 0 {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        acc.checked_mul(d)
            .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows")))
    })
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    let n = numel_of(shape)?;
    if n != len {
        return Err(Error::shape(format!(
            "shape {shape:?} needs {n} values, got {len}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::from_slice(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0]);
        t.accumulate_grad(&[0.5, 2.0]);
        assert_eq!(t.grad().unwrap(), &[1.5, 3.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }
}
