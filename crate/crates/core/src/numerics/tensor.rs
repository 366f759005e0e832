use rand::{Rng, SeedableRng};

use super::scalar::Scalar;
use crate::ir::TensorShape;

/// Dense row-major NCHW tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: TensorShape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: TensorShape) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: TensorShape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    /// Returns `None` when the length does not match the shape.
    pub fn from_vec(shape: TensorShape, data: Vec<T>) -> Option<Self> {
        (data.len() == shape.numel()).then_some(Tensor { shape, data })
    }

    pub fn random_uniform(shape: TensorShape, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::from_f64_lossy(rng.gen_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> TensorShape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = &self.shape;
        ((n * s.channels + c) * s.height + h) * s.width + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    pub fn dot(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "dot of differently shaped tensors");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "sum of differently shaped tensors");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Deterministic test input: a per-(sample, channel) offset in `[-1, 1)`
/// plus per-element noise in `[-0.5, 0.5)`.
pub fn sample_input<T: Scalar>(shape: TensorShape, seed: u64) -> Tensor<T> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let plane = shape.height * shape.width;
    let offsets: Vec<f64> = (0..shape.batch * shape.channels)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let data = (0..shape.numel())
        .map(|i| T::from_f64_lossy(offsets[i / plane] + rng.gen_range(-0.5..0.5)))
        .collect();
    Tensor { shape, data }
}
