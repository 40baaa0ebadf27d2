//! Dense NCHW tensor value type.
//!
//! Values are stored as `f64`. Oracle tests rely on the 64-bit headroom;
//! desk-scale training uses the same representation.

use crate::error::{DenasError, Result};
use serde::{Deserialize, Serialize};

/// Dense 4-d array in (batch, channels, height, width) layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(DenasError::shape("tensor", format!("zero dim in {shape:?}")));
        }
        if data.len() != numel {
            return Err(DenasError::shape(
                "tensor",
                format!("{} values for shape {shape:?}", data.len()),
            ));
        }
        Ok(TensorData { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        let numel: usize = shape.iter().product();
        TensorData {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn ones(shape: [usize; 4]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: [usize; 4], v: f64) -> Self {
        let numel: usize = shape.iter().product();
        TensorData {
            shape,
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        TensorData {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    /// Uniform values in [-scale, scale] from the supplied RNG.
    pub fn random(shape: [usize; 4], scale: f64, rng: &mut impl rand::Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        TensorData { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        let i = self.idx(n, c, h, w);
        &mut self.data[i]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &TensorData) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn max_abs_diff(&self, other: &TensorData) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Numerically stable softmax of a plain vector.
pub fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}
