//! Neural network layers with analytic gradients.
//!
//! Everything is f64 and sequence-first: activations move through the
//! network as `features x time` matrices so input projections and weight
//! gradients run as single matrix products per sequence, leaving only the
//! recurrent chain sequential.

mod bn;
mod fc;
mod lstm;

pub use bn::{BatchNorm, BnBatchCache};
pub use fc::{Dense, DenseCache};
pub use lstm::{Lstm, LstmCache, LstmState, GATES_PER_CELL};

use ndarray::{Array1, Array2};
use rand::Rng;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pointwise nonlinearity at the end of a dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation output `y` (and the
    /// pre-activation sign for ReLU, where `y > 0` is equivalent).
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Weight initialization: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) for a
/// `rows x cols` matrix applied to `cols`-dimensional inputs.
pub fn init_uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let limit = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

/// Zero bias vector helper.
pub fn zero_bias(n: usize) -> Array1<f64> {
    Array1::zeros(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sigmoid_matches_reference_values() {
        assert_abs_diff_eq!(sigmoid(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(sigmoid(2.0), 1.0 / (1.0 + (-2.0f64).exp()), epsilon = 1e-15);
        assert_abs_diff_eq!(sigmoid(-700.0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sigmoid(700.0), 1.0, epsilon = 1e-15);
        // Symmetry: sigmoid(-x) = 1 - sigmoid(x).
        for x in [-3.0, -0.5, 0.1, 4.2] {
            assert_abs_diff_eq!(sigmoid(-x), 1.0 - sigmoid(x), epsilon = 1e-12);
        }
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        let h = 1e-6;
        for act in [Activation::Linear, Activation::Sigmoid] {
            for x in [-2.0, -0.3, 0.4, 1.7] {
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                let analytic = act.derivative_from_output(act.apply(x));
                assert_abs_diff_eq!(analytic, fd, epsilon = 1e-6);
            }
        }
        // ReLU away from the kink.
        for x in [-1.0, 1.0] {
            let fd = (Activation::Relu.apply(x + h) - Activation::Relu.apply(x - h)) / (2.0 * h);
            let analytic = Activation::Relu.derivative_from_output(Activation::Relu.apply(x));
            assert_abs_diff_eq!(analytic, fd, epsilon = 1e-6);
        }
    }
}
