use crate::core::{ImageTensor, RngState};
use crate::model::{NoisePredictor, Trace};
use crate::{Error, Result};

/// A per-pixel affine predictor: prediction_i = a_i·x_i + b_i.
///
/// Linear in its parameters, so the L2 training loss is exactly quadratic
/// and central finite differences have zero truncation error. This is the
/// closed-form reference point for the gradient checker; it is not meant
/// to learn anything interesting.
pub struct LinearPredictor {
    shape: (usize, usize, usize),
    params: Vec<f32>,
    params_f64: Vec<f64>,
}

impl LinearPredictor {
    /// Builds a predictor for one fixed input shape: scales near one,
    /// offsets near zero, both jittered so gradients are nondegenerate.
    pub fn new(shape: (usize, usize, usize), rng: &mut RngState) -> Result<Self> {
        let (c, h, w) = shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("predictor shape must be positive"));
        }
        let n = c * h * w;
        let mut params = Vec::with_capacity(2 * n);
        for _ in 0..n {
            params.push(rng.uniform_f64(0.5, 1.5) as f32);
        }
        for _ in 0..n {
            params.push(rng.uniform_f64(-0.2, 0.2) as f32);
        }
        let params_f64 = params.iter().map(|&p| f64::from(p)).collect();
        Ok(LinearPredictor { shape, params, params_f64 })
    }

    fn check_input(&self, x: &ImageTensor) -> Result<()> {
        if x.shape() != self.shape {
            return Err(Error::invalid(format!(
                "input shape {:?} does not match predictor shape {:?}",
                x.shape(),
                self.shape
            )));
        }
        Ok(())
    }
}

impl NoisePredictor for LinearPredictor {
    fn forward_traced(&self, x: &ImageTensor, _t: usize) -> Result<(Vec<f64>, Trace)> {
        self.check_input(x)?;
        let n = x.len();
        let out = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xv)| self.params_f64[i] * f64::from(xv) + self.params_f64[n + i])
            .collect();
        Ok((out, Trace::default()))
    }

    fn backward(
        &self,
        x: &ImageTensor,
        _t: usize,
        _trace: &Trace,
        upstream: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let n = x.len();
        if upstream.len() != n {
            return Err(Error::invalid("upstream gradient length mismatch"));
        }
        let mut grad = vec![0.0; 2 * n];
        for i in 0..n {
            grad[i] = upstream[i] * f64::from(x.data()[i]);
            grad[n + i] = upstream[i];
        }
        Ok(grad)
    }

    fn params(&self) -> &[f32] {
        &self.params
    }

    fn set_params(&mut self, params: &[f32]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::invalid("parameter count mismatch"));
        }
        self.params.copy_from_slice(params);
        for (dst, &src) in self.params_f64.iter_mut().zip(params) {
            *dst = f64::from(src);
        }
        Ok(())
    }
}
