use super::Float;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

// Gradients are scratch state; two parameters are equal when their values are.
impl<T: PartialEq> PartialEq for Param<T> {
    fn eq(&self, o: &Self) -> bool {
        self.value == o.value
    }
}

impl<T: Float> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    /// Samples every entry from `U(-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let len = shape.iter().product();
        let data: Vec<T> = (0..len).map(|_| T::of(dist.sample(rng))).collect();
        Self::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length"))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn values(&self) -> &[T] {
        self.value.as_slice().expect("params are contiguous")
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        self.value.as_slice_mut().expect("params are contiguous")
    }

    pub fn grads(&self) -> &[T] {
        self.grad.as_slice().expect("params are contiguous")
    }

    /// Mutable value and gradient slices at once, for optimizer updates.
    pub fn split_mut(&mut self) -> (&mut [T], &[T]) {
        (
            self.value.as_slice_mut().expect("params are contiguous"),
            self.grad.as_slice().expect("params are contiguous"),
        )
    }
}

/// Anything that owns named parameters.
///
/// Visiting order is stable and defines the parameter order used by the
/// optimizer and by checkpoints.
pub trait Parameterized<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self)
    where
        T: Float,
    {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize
    where
        T: Float,
    {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
