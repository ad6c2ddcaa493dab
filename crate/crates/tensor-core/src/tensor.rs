use crate::Real;

/// Dense real-valued array: a shape, a flat row-major value buffer, and an
/// optional gradient accumulator of the same length.
///
/// `Tensor` is the at-rest representation for parameters and data. During a
/// differentiable computation values live on a [`crate::Graph`]; the trainer
/// copies gradients back into `grad` after each backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Real> {
    pub shape: Vec<usize>,
    pub values: Vec<F>,
    pub grad: Option<Vec<F>>,
    pub requires_grad: bool,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: &[usize], values: Vec<F>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            values.len(),
            "tensor shape {:?} wants {} values, got {}",
            shape,
            numel,
            values.len()
        );
        Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![F::zero(); numel])
    }

    pub fn scalar(v: F) -> Self {
        Tensor::new(&[1], vec![v])
    }

    pub fn param(shape: &[usize], values: Vec<F>) -> Self {
        let mut t = Tensor::new(shape, values);
        t.requires_grad = true;
        t
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Interpret the shape as (rows, cols); rank-1 tensors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("expected rank 1 or 2, got shape {:?}", self.shape),
        }
    }

    /// Zero (and allocate if needed) the gradient accumulator.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = F::zero()),
            None => self.grad = Some(vec![F::zero(); self.values.len()]),
        }
    }

    /// Add `delta` into the gradient accumulator, allocating it if absent.
    pub fn accumulate_grad(&mut self, delta: &[F]) {
        assert_eq!(delta.len(), self.values.len(), "gradient length mismatch");
        let g = self
            .grad
            .get_or_insert_with(|| vec![F::zero(); self.values.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
    }
}
