//! Shared row-major pixel buffers used across IO, rendering and losses.

use nalgebra::Vector3;

/// RGB image with channels in `[0,1]`, row-major, origin at the top-left.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Vector3<f64>>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![Vector3::zeros(); width * height] }
    }

    pub fn filled(width: usize, height: usize, value: Vector3<f64>) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Vector3<f64> {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut Vector3<f64> {
        &mut self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Scalar depth buffer. Invalid samples are stored as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// True when the sample is finite and strictly positive.
    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        let d = self.at(x, y);
        d.is_finite() && d > 0.0
    }
}
