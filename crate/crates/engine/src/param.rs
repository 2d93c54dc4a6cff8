use crate::scalar::Scalar;

/// A learnable tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub value: Vec<F>,
    pub grad: Vec<F>,
    pub dims: Vec<usize>,
}

impl<F: Scalar> Param<F> {
    pub fn new(dims: Vec<usize>, value: Vec<F>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), value.len(), "param dims/value mismatch");
        let grad = vec![F::zero(); value.len()];
        Param { value, grad, dims }
    }

    pub fn filled(dims: Vec<usize>, v: F) -> Self {
        let n = dims.iter().product();
        Param::new(dims, vec![v; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }
}
