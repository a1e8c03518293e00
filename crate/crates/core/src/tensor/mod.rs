//! Dense 64-bit tensors with a define-by-run reverse-mode tape.
//!
//! Layout is row-major throughout: a `[rows, cols]` tensor stores row `r`
//! at `data[r * cols..(r + 1) * cols]`, and a `[c, h, w]` image stores pixel
//! `(c, y, x)` at `data[(c * h + y) * w + x]`. Checkpoints depend on this.
//!
//! A [`Tape`] is rebuilt for every forward pass. Tensors registered on it as
//! parameters are borrowed, not copied; gradients are read back with
//! [`Tape::grad`] after [`Tape::backward`] and folded into the owning
//! tensor with [`Tensor::accumulate_grad`].

pub mod check;
mod kernels;
mod tape;

pub use kernels::{matmul_values, GELU_COEFF, GELU_SQRT_2_OVER_PI};
pub use tape::{CustomGradFn, Tape, Var};

use crate::error::{shape_err, Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    grad: Option<Vec<f64>>,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(shape_err!("shape must have at least one dimension"));
    }
    if let Some(d) = shape.iter().find(|&&d| d == 0) {
        return Err(shape_err!("dimension {d} in {shape:?} must be >= 1"));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = validate_shape(shape)?;
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = validate_shape(shape)?;
        Self::new(shape, vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = validate_shape(shape)?;
        Self::new(shape, vec![value; n])
    }

    /// Seeded normal draws scaled by `std`; bit-reproducible for a fixed seed.
    pub fn randn(shape: &[usize], seed: u64, std: f64) -> Result<Self> {
        let n = validate_shape(shape)?;
        if !(std > 0.0) {
            return Err(Error::Parameter(format!("randn std must be > 0, got {std}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        Self::new(shape, data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a `[rows.len(), cols]` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err!("ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err!("expected a matrix, got shape {s:?}")),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = *self.shape.last().expect("non-empty shape");
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = validate_shape(shape)?;
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(shape_err!(
                "gradient length {} does not match tensor length {}",
                g.len(),
                self.data.len()
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }

    /// Little-endian byte image of the values, used for bit-level comparisons.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Plain SGD with decoupled-free weight decay: `p <- p - lr * (grad + wd * p)`.
///
/// Grads are cleared after the update. Parameters without a gradient are
/// left untouched.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64, weight_decay: f64) {
    for p in params.iter_mut() {
        let Some(g) = p.grad.take() else { continue };
        p.data
            .iter_mut()
            .zip(&g)
            .for_each(|(w, gi)| *w -= lr * (gi + weight_decay * *w));
    }
}

/// SGD with heavy-ball momentum. With `momentum = 0` it is exactly [`sgd_step`].
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        if self.momentum == 0.0 {
            sgd_step(params, self.lr, self.weight_decay);
            return;
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (p, vel) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let Some(g) = p.grad.take() else { continue };
            for ((w, gi), v) in p.data.iter_mut().zip(&g).zip(vel.iter_mut()) {
                *v = self.momentum * *v + gi + self.weight_decay * *w;
                *w -= self.lr * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_is_all_zero() {
        let t = Tensor::zeros(&[2, 3]).unwrap();
        assert_eq!(t.len(), 6);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_dimension_is_shape_error() {
        assert!(matches!(Tensor::zeros(&[2, 0]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::randn(&[0], 1, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn randn_is_reproducible() {
        let a = Tensor::randn(&[4], 7, 1.0).unwrap();
        let b = Tensor::randn(&[4], 7, 1.0).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
        assert!(Tensor::randn(&[4], 7, 0.0).is_err());
    }

    #[test]
    fn randn_mean_near_zero() {
        let t = Tensor::randn(&[100_000], 1, 1.0).unwrap();
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn sgd_step_matches_definition() {
        let mut p = Tensor::new(&[1], vec![1.0]).unwrap();
        p.accumulate_grad(&[0.5]).unwrap();
        sgd_step(&mut [&mut p], 0.1, 0.0);
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
        assert!(p.grad().is_none());

        let mut q = Tensor::new(&[1], vec![2.0]).unwrap();
        q.accumulate_grad(&[0.0]).unwrap();
        sgd_step(&mut [&mut q], 0.5, 0.1);
        assert!((q.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_zero_equals_plain_sgd() {
        let mut a = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let mut b = a.clone();
        a.accumulate_grad(&[0.3, 0.2]).unwrap();
        b.accumulate_grad(&[0.3, 0.2]).unwrap();
        sgd_step(&mut [&mut a], 0.1, 0.01);
        Sgd::new(0.1, 0.0, 0.01).step(&mut [&mut b]);
        assert_eq!(a.data(), b.data());
    }
}
