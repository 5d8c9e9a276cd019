//! Batch normalization over feature rows of a sequence.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Per-feature batch normalization.
///
/// Columns are samples (frames, possibly concatenated across a batch of
/// sequences); rows are features. Training normalizes with biased batch
/// statistics and updates exponential running estimates with decay
/// `momentum` (`running = momentum * running + (1 - momentum) * batch`);
/// inference is the pure affine map derived from the running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
}

/// Cache from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnBatchCache {
    /// Batch mean per feature.
    pub mean: Array1<f64>,
    /// Biased batch variance per feature.
    pub var: Array1<f64>,
    /// Normalized input `(x - mean) / sqrt(var + eps)`.
    pub x_hat: Array2<f64>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            eps: 1e-5,
            momentum: 0.99,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Array2<f64>) -> Result<()> {
        if x.nrows() != self.features() {
            return Err(Error::Shape(format!(
                "batchnorm rows {} vs features {}",
                x.nrows(),
                self.features()
            )));
        }
        Ok(())
    }

    /// Training forward over `features x N`; updates running statistics.
    pub fn forward_train(&mut self, x: &Array2<f64>) -> Result<(Array2<f64>, BnBatchCache)> {
        self.check(x)?;
        let n = x.ncols();
        if n < 2 {
            return Err(Error::Train("batchnorm needs at least 2 samples".into()));
        }
        let mean = x.mean_axis(Axis(1)).expect("nonempty");
        let mut var = Array1::zeros(self.features());
        for (j, row) in x.outer_iter().enumerate() {
            var[j] = row.iter().map(|v| (v - mean[j]) * (v - mean[j])).sum::<f64>() / n as f64;
        }
        let mut x_hat = x.clone();
        for (j, mut row) in x_hat.outer_iter_mut().enumerate() {
            let inv = 1.0 / (var[j] + self.eps).sqrt();
            row.mapv_inplace(|v| (v - mean[j]) * inv);
        }
        let mut y = x_hat.clone();
        for (j, mut row) in y.outer_iter_mut().enumerate() {
            row.mapv_inplace(|v| self.gamma[j] * v + self.beta[j]);
        }
        for j in 0..self.features() {
            self.running_mean[j] =
                self.momentum * self.running_mean[j] + (1.0 - self.momentum) * mean[j];
            self.running_var[j] =
                self.momentum * self.running_var[j] + (1.0 - self.momentum) * var[j];
        }
        Ok((y, BnBatchCache { mean, var, x_hat }))
    }

    /// Inference forward using running statistics.
    pub fn forward_eval(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        let (a, b) = self.affine();
        let mut y = x.clone();
        for (j, mut row) in y.outer_iter_mut().enumerate() {
            row.mapv_inplace(|v| a[j] * v + b[j]);
        }
        Ok(y)
    }

    /// Single-frame inference forward.
    pub fn forward_frame(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.features() {
            return Err(Error::Shape("batchnorm frame size".into()));
        }
        let (a, b) = self.affine();
        Ok(Array1::from_shape_fn(x.len(), |j| a[j] * x[j] + b[j]))
    }

    /// Whether the inference map is exactly the identity (scale 1, shift 0
    /// bitwise). Holds after the layer has been folded into the following
    /// dense layer; quantized training and export require it.
    pub fn is_identity(&self) -> bool {
        let (a, b) = self.affine();
        a.iter().all(|&v| v == 1.0) && b.iter().all(|&v| v == 0.0)
    }

    /// The inference map as per-feature scale and shift:
    /// `y = a * x + b` with `a = gamma / sqrt(var + eps)` and
    /// `b = beta - a * mean`. This is what gets folded into the next
    /// dense layer at export.
    pub fn affine(&self) -> (Array1<f64>, Array1<f64>) {
        let a = Array1::from_shape_fn(self.features(), |j| {
            self.gamma[j] / (self.running_var[j] + self.eps).sqrt()
        });
        let b = Array1::from_shape_fn(self.features(), |j| self.beta[j] - a[j] * self.running_mean[j]);
        (a, b)
    }

    /// Backward through a training-mode pass. `dy` is `dL/dy`. Returns
    /// `(dgamma, dbeta, dx)`.
    pub fn backward(
        &self,
        dy: &Array2<f64>,
        cache: &BnBatchCache,
    ) -> Result<(Array1<f64>, Array1<f64>, Array2<f64>)> {
        if dy.dim() != cache.x_hat.dim() {
            return Err(Error::Shape("batchnorm backward shapes".into()));
        }
        let n = dy.ncols() as f64;
        let features = self.features();
        let mut dgamma = Array1::zeros(features);
        let mut dbeta = Array1::zeros(features);
        let mut dx = Array2::zeros(dy.raw_dim());
        for j in 0..features {
            let inv_std = 1.0 / (cache.var[j] + self.eps).sqrt();
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for t in 0..dy.ncols() {
                sum_dy += dy[(j, t)];
                sum_dy_xhat += dy[(j, t)] * cache.x_hat[(j, t)];
            }
            dgamma[j] = sum_dy_xhat;
            dbeta[j] = sum_dy;
            // dx = gamma * inv_std / N * (N dy - sum(dy) - x_hat * sum(dy x_hat))
            let g = self.gamma[j] * inv_std / n;
            for t in 0..dy.ncols() {
                dx[(j, t)] =
                    g * (n * dy[(j, t)] - sum_dy - cache.x_hat[(j, t)] * sum_dy_xhat);
            }
        }
        Ok((dgamma, dbeta, dx))
    }
}
