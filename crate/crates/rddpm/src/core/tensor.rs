use crate::core::RngState;
use crate::{Error, Result};

/// A C×H×W image-shaped tensor with row-major `f32` storage.
///
/// Dataset images are normalized to `[-1, 1]`; intermediate noisy states are
/// unbounded. Storage is single precision, but elementwise arithmetic
/// promotes to `f64` so that repeated schedule scalings do not accumulate
/// single-precision error.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    /// An all-zeros tensor of the given shape.
    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        validate_shape(channels, height, width)?;
        Ok(ImageTensor { channels, height, width, data: vec![0.0; channels * height * width] })
    }

    /// Wraps existing row-major data; the length must match the shape.
    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        validate_shape(channels, height, width)?;
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(ImageTensor { channels, height, width, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Total element count (channels × height × width).
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Flat index of `(channel, row, column)`.
    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    /// Returns `a*self + b*other` with the scalar products and sum carried
    /// out in `f64` before rounding back to storage precision. This is the
    /// primitive behind forward noising and reverse sampling steps.
    pub fn scaled_sum(&self, a: f64, other: &ImageTensor, b: f64) -> Result<ImageTensor> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| (a * f64::from(x) + b * f64::from(y)) as f32)
            .collect();
        Ok(ImageTensor { channels: self.channels, height: self.height, width: self.width, data })
    }

    /// Elementwise sum.
    pub fn add(&self, other: &ImageTensor) -> Result<ImageTensor> {
        self.scaled_sum(1.0, other, 1.0)
    }

    /// Elementwise scaling by `a`.
    pub fn scale(&self, a: f64) -> ImageTensor {
        let data = self.data.iter().map(|&x| (a * f64::from(x)) as f32).collect();
        ImageTensor { channels: self.channels, height: self.height, width: self.width, data }
    }

    /// Clamps every element into `[-1, 1]`.
    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(-1.0, 1.0);
        }
    }

    /// True when every element lies in `[-1, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| (-1.0..=1.0).contains(v))
    }

    /// Elements promoted to `f64`, for model and loss arithmetic.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Builds a tensor of this shape from `f64` values (rounded to storage
    /// precision).
    pub fn from_f64_like(&self, values: &[f64]) -> Result<ImageTensor> {
        if values.len() != self.data.len() {
            return Err(Error::invalid(format!(
                "value length {} does not match tensor length {}",
                values.len(),
                self.data.len()
            )));
        }
        Ok(ImageTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: values.iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn check_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

fn validate_shape(channels: usize, height: usize, width: usize) -> Result<()> {
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "tensor dimensions must be positive, got {channels}x{height}x{width}"
        )));
    }
    Ok(())
}

/// A tensor of i.i.d. standard normal entries, consumed from `rng` in
/// row-major order.
pub fn gaussian_like(shape: (usize, usize, usize), rng: &mut RngState) -> Result<ImageTensor> {
    let (c, h, w) = shape;
    let mut out = ImageTensor::zeros(c, h, w)?;
    rng.fill_standard_normal(out.data_mut());
    Ok(out)
}

/// `acc += x` elementwise over `f64` accumulators (gradient reduction).
pub fn vec_add_assign(acc: &mut [f64], x: &[f64]) {
    assert_eq!(acc.len(), x.len(), "accumulator length mismatch");
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// `x *= a` elementwise over `f64` values.
pub fn vec_scale(x: &mut [f64], a: f64) {
    for v in x.iter_mut() {
        *v *= a;
    }
}
