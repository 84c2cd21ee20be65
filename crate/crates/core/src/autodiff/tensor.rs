use super::{AutogradError, Scalar};

/// Dense row-major N-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, AutogradError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutogradError::Shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, AutogradError> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// (N, C, H, W) of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize), AutogradError> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(AutogradError::Shape(format!(
                "expected NCHW, got {:?}",
                self.shape
            ))),
        }
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), AutogradError> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(AutogradError::Shape(format!(
                "expected a matrix, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, AutogradError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(AutogradError::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Mirror the last (width) axis of an NCHW tensor.
    pub fn flip_horizontal(&self) -> Self {
        let w = *self.shape.last().expect("non-empty shape");
        let mut data = self.data.clone();
        data.chunks_mut(w).for_each(|row| row.reverse());
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self, AutogradError> {
        let first = items
            .first()
            .ok_or_else(|| AutogradError::Shape("stack of nothing".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(AutogradError::Shape(format!(
                    "stack {:?} with {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Split along the leading axis.
    pub fn unstack(&self) -> Vec<Self> {
        let n = self.shape[0];
        let inner = self.shape[1..].to_vec();
        let step = self.numel() / n.max(1);
        self.data
            .chunks(step)
            .map(|c| Self {
                shape: inner.clone(),
                data: c.to_vec(),
            })
            .collect()
    }
}
