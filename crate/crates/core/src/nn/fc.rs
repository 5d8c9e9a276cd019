//! Fully connected layer over sequences.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

use super::Activation;

/// Dense layer `y = act(W x + b)` applied column-by-column to a sequence.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub act: Activation,
}

/// Forward cache: inputs and outputs of one sequence pass.
#[derive(Debug, Clone)]
pub struct DenseCache {
    /// `in x T` input the layer saw.
    pub x: Array2<f64>,
    /// `out x T` post-activation output.
    pub y: Array2<f64>,
}

impl Dense {
    pub fn new(w: Array2<f64>, b: Array1<f64>, act: Activation) -> Result<Self> {
        if w.nrows() != b.len() {
            return Err(Error::Shape(format!(
                "dense weight rows {} vs bias len {}",
                w.nrows(),
                b.len()
            )));
        }
        Ok(Self { w, b, act })
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    /// Single-frame forward without caching.
    pub fn forward_frame(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "dense input {} vs expected {}",
                x.len(),
                self.in_dim()
            )));
        }
        let mut y = self.w.dot(x) + &self.b;
        y.mapv_inplace(|v| self.act.apply(v));
        Ok(y)
    }

    /// Sequence forward: `x` is `in x T`, returns `out x T` plus a cache
    /// for the backward pass.
    pub fn forward_seq(&self, x: &Array2<f64>) -> Result<(Array2<f64>, DenseCache)> {
        if x.nrows() != self.in_dim() {
            return Err(Error::Shape(format!(
                "dense input rows {} vs expected {}",
                x.nrows(),
                self.in_dim()
            )));
        }
        let mut y = self.w.dot(x);
        for mut col in y.axis_iter_mut(Axis(1)) {
            col += &self.b;
        }
        y.mapv_inplace(|v| self.act.apply(v));
        let cache = DenseCache {
            x: x.clone(),
            y: y.clone(),
        };
        Ok((y, cache))
    }

    /// Backward pass. `dy` is `dL/dy` (`out x T`). Returns `(dw, db, dx)`.
    pub fn backward_seq(
        &self,
        dy: &Array2<f64>,
        cache: &DenseCache,
    ) -> Result<(Array2<f64>, Array1<f64>, Array2<f64>)> {
        if dy.dim() != cache.y.dim() {
            return Err(Error::Shape(format!(
                "dense grad {:?} vs cached output {:?}",
                dy.dim(),
                cache.y.dim()
            )));
        }
        // dz = dy .* act'(z), with act' written in terms of the output.
        let mut dz = dy.clone();
        ndarray::Zip::from(&mut dz).and(&cache.y).for_each(|g, &y| {
            *g *= self.act.derivative_from_output(y);
        });
        let dw = dz.dot(&cache.x.t());
        let db = dz.sum_axis(Axis(1));
        let dx = self.w.t().dot(&dz);
        Ok((dw, db, dx))
    }
}
