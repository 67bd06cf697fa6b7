//! Dense batch-major feature maps.
//!
//! Shapes follow the (batch, channels, height, width) order. For acoustic
//! features height is the coefficient axis and width is time.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(alloc::format!(
                "tensor {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Number of values in one batch item.
    #[inline]
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cs, hs, ws] = self.shape;
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, expected: [usize; 4], what: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::Shape(alloc::format!(
                "{what}: expected {expected:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Stacks single-channel Q×T matrices (row-major) into a (B, 1, Q, T) batch.
    pub fn stack_matrices(q: usize, t: usize, items: &[&[f64]]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(items.len() * q * t);
        for m in items {
            if m.len() != q * t {
                return Err(Error::Shape(alloc::format!(
                    "matrix has {} values, expected {q}x{t}",
                    m.len()
                )));
            }
            data.extend_from_slice(m);
        }
        Tensor::from_vec([items.len(), 1, q, t], data)
    }

    /// Concatenates broadcast one-hot code planes after the existing channels.
    pub fn concat_code(&self, codes: &[usize], n_domains: usize) -> Tensor {
        let [b, c, h, w] = self.shape;
        debug_assert_eq!(codes.len(), b);
        let plane = h * w;
        let mut out = Tensor::zeros([b, c + n_domains, h, w]);
        for (n, &code) in codes.iter().enumerate() {
            let dst = out.item_mut(n);
            dst[..c * plane].copy_from_slice(self.item(n));
            let start = (c + code) * plane;
            dst[start..start + plane].fill(1.0);
        }
        out
    }

    /// Gradient of [`Tensor::concat_code`] with respect to the original channels.
    pub fn strip_code_grad(&self, channels: usize) -> Tensor {
        let [b, _, h, w] = self.shape;
        let plane = h * w;
        let mut out = Tensor::zeros([b, channels, h, w]);
        for n in 0..b {
            out.item_mut(n).copy_from_slice(&self.item(n)[..channels * plane]);
        }
        out
    }
}
