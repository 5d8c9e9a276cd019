//! Frame-skipping controller for the streaming enhancer.
//!
//! A scalar update probability `g_tilde` accumulates from frame to frame;
//! rounding it yields a binary gate `g` that decides whether the LSTM states
//! are recomputed (`g = 1`) or held bitwise from the previous frame (`g = 0`).
//! Two EMA filters keep the rest of the network informed while states are
//! held: a context vector summarising recent input features (concatenated to
//! the LSTM output) and a smoothed output mask.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{init_uniform, sigmoid, LstmState};

/// Decay applied to the previous context vector each frame.
pub const CONTEXT_DECAY: f64 = 0.9;
/// Decay applied to the previous smoothed mask each frame.
pub const MASK_DECAY: f64 = 0.15;

/// Learned parameters of the skip controller.
#[derive(Debug, Clone)]
pub struct SkipParams {
    /// Gate projection over the final LSTM layer's cell state, length `hidden`.
    pub w_b: Array1<f64>,
    /// Gate bias.
    pub b_b: f64,
    /// Context projection, `dim_c x n_features`.
    pub w_c: Array2<f64>,
    /// Context bias, length `dim_c`.
    pub b_c: Array1<f64>,
}

impl SkipParams {
    pub fn init<R: Rng>(rng: &mut R, hidden: usize, dim_c: usize, n_features: usize) -> Self {
        let w_b = init_uniform(rng, 1, hidden).row(0).to_owned();
        let w_c = init_uniform(rng, dim_c, n_features);
        Self {
            w_b,
            b_b: 0.0,
            w_c,
            b_c: Array1::zeros(dim_c),
        }
    }

    /// Gate pre-activation `w_b . c_star + b_b`.
    pub fn gate_preact(&self, c_star_prev: &ArrayView1<f64>) -> Result<f64> {
        if c_star_prev.len() != self.w_b.len() {
            return Err(Error::Shape(format!(
                "skip gate expects cell state of length {}, got {}",
                self.w_b.len(),
                c_star_prev.len()
            )));
        }
        Ok(self.w_b.dot(c_star_prev) + self.b_b)
    }

    /// Context projection `W_c x + b_c`.
    pub fn project_context(&self, x_frame: &ArrayView1<f64>) -> Result<Array1<f64>> {
        if x_frame.len() != self.w_c.ncols() {
            return Err(Error::Shape(format!(
                "context projection expects input of length {}, got {}",
                self.w_c.ncols(),
                x_frame.len()
            )));
        }
        Ok(self.w_c.dot(x_frame) + &self.b_c)
    }
}

/// Per-stream mutable state of the skip controller.
#[derive(Debug, Clone)]
pub struct SkipRuntime {
    /// Update probability for the *current* frame.
    pub g_tilde: f64,
    /// Gate increment cached from the most recent update frame.
    pub delta_cached: f64,
    /// Context EMA vector, length `dim_c`.
    pub c_x: Array1<f64>,
    /// Smoothed mask; `None` until the first frame has produced one.
    pub m_smooth: Option<Array1<f64>>,
}

impl SkipRuntime {
    /// Fresh stream state: the first frame always updates (`g_tilde = 1`),
    /// so `delta_cached` is overwritten before it is ever read.
    pub fn new(dim_c: usize) -> Self {
        Self {
            g_tilde: 1.0,
            delta_cached: 1.0,
            c_x: Array1::zeros(dim_c),
            m_smooth: None,
        }
    }
}

/// Binary gate decision, half-up rounding: `g = 1` iff `g_tilde >= 0.5`.
pub fn gate_decision(g_tilde: f64) -> bool {
    g_tilde >= 0.5
}

/// Advance the gate by one frame.
///
/// Returns the gate for the current frame and leaves `rt.g_tilde` holding the
/// probability for the next frame. The gate increment is computed from the
/// final LSTM layer's previous cell state, but only on update frames; held
/// frames reuse the cached increment and accumulate it, saturating at 1 so
/// the probability never leaves `[0, 1]`.
pub fn skip_gate_step(
    params: &SkipParams,
    rt: &mut SkipRuntime,
    c_star_prev: &ArrayView1<f64>,
) -> Result<bool> {
    let g_tilde = rt.g_tilde;
    if !(0.0..=1.0).contains(&g_tilde) {
        return Err(Error::Nn(format!(
            "update probability {g_tilde} outside [0, 1]"
        )));
    }
    let g = gate_decision(g_tilde);
    if g {
        let delta = sigmoid(params.gate_preact(c_star_prev)?);
        rt.delta_cached = delta;
        rt.g_tilde = delta;
    } else {
        rt.g_tilde = g_tilde + rt.delta_cached.min(1.0 - g_tilde);
    }
    Ok(g)
}

/// Select the next LSTM state: the freshly computed candidate on update
/// frames, the previous state (bitwise, no arithmetic) on held frames.
pub fn apply_skip(g: bool, candidate: &LstmState, previous: &LstmState) -> LstmState {
    if g {
        candidate.clone()
    } else {
        previous.clone()
    }
}

/// Convex blend of two states, used by the soft (training) relaxation where
/// the gate participates in the graph as its underlying probability.
pub fn blend_states(weight: f64, candidate: &LstmState, previous: &LstmState) -> LstmState {
    LstmState {
        h: weight * &candidate.h + (1.0 - weight) * &previous.h,
        c: weight * &candidate.c + (1.0 - weight) * &previous.c,
    }
}

/// Fold the current frame's features into the context EMA:
/// `c_x = 0.9 c_x + 0.1 (W_c x + b_c)`. Runs every frame.
pub fn context_ema_step(
    params: &SkipParams,
    rt: &mut SkipRuntime,
    x_frame: &ArrayView1<f64>,
) -> Result<()> {
    let projected = params.project_context(x_frame)?;
    rt.c_x = CONTEXT_DECAY * &rt.c_x + (1.0 - CONTEXT_DECAY) * &projected;
    Ok(())
}

/// Fold the current frame's mask into the mask EMA:
/// `m_smooth = 0.15 m_smooth + 0.85 m`, seeded with the first mask as-is.
/// Returns the smoothed mask to apply. Runs every frame.
pub fn mask_ema_step(rt: &mut SkipRuntime, m: &ArrayView1<f64>) -> Array1<f64> {
    let smoothed = match rt.m_smooth.take() {
        Some(prev) => MASK_DECAY * &prev + (1.0 - MASK_DECAY) * m,
        None => m.to_owned(),
    };
    rt.m_smooth = Some(smoothed.clone());
    smoothed
}

/// Fraction of frames whose LSTM update was skipped: `1 - updates / frames`.
pub fn skip_rate(gate_trace: &[bool]) -> f64 {
    if gate_trace.is_empty() {
        return 0.0;
    }
    let updates = gate_trace.iter().filter(|&&g| g).count();
    1.0 - updates as f64 / gate_trace.len() as f64
}
